use nalgebra::{DMatrix, DVector};

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let s = a[(i, j)];
            if s != 0.0 {
                out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * s));
            }
        }
    }
    out
}

/// Stacks the columns of `m`.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`] for an `rows`-row matrix.
pub fn unvec(v: &DVector<f64>, rows: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, v.len() / rows, v.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_kron_identity() {
        assert_eq!(
            kron(&DMatrix::identity(2, 2), &DMatrix::identity(2, 2)),
            DMatrix::identity(4, 4)
        );
    }

    #[test]
    fn vec_stacks_columns() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(vec(&m).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(unvec(&vec(&m), 2), m);
    }

    #[test]
    fn kron_block_layout() {
        let a = DMatrix::from_row_slice(1, 2, &[2.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 3.0]);
        assert_eq!(
            kron(&a, &b),
            DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 6.0, -3.0])
        );
    }

    fn mat(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v))
    }

    proptest! {
        #[test]
        fn vec_kron_trace_identity(t in mat(3), b in mat(3), y in mat(3), j in 0usize..=4) {
            let bj = b.pow(j as u32);
            let lhs = (t.transpose() * &bj * &y * bj.transpose()).trace();
            let rhs = vec(&t).dot(&(kron(&bj, &bj) * vec(&y)));
            prop_assert!((lhs - rhs).abs() <= 1e-10);
            let direct = kron(&bj, &bj) * vec(&y);
            prop_assert!((direct - vec(&(&bj * &y * bj.transpose()))).amax() <= 1e-10);
        }
    }
}
