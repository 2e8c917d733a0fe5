//! STAGGER concepts on the numeric grid `{0, 0.5, 1}³`.
//!
//! Coordinates are (color, shape, size). The three concepts are
//! `h1 = 1 ∧ h3 = 0`, `h1 = 0 ∨ h2 = 0.5` and `h3 = 0.5 ∨ h3 = 1`, each active
//! for [`CONCEPT_LENGTH`] ticks.

use crate::risk::Sample;

/// Ticks per concept.
pub const CONCEPT_LENGTH: usize = 40;
/// Number of distinct concepts.
pub const N_CONCEPTS: usize = 3;
/// Last tick of a non-cycling stream.
pub const HORIZON: usize = CONCEPT_LENGTH * N_CONCEPTS;

/// The values each feature takes.
pub const LEVELS: [f64; 3] = [0.0, 0.5, 1.0];

/// Concept index (0, 1 or 2) active at tick `i ≥ 1`, cycling past the
/// horizon.
pub fn concept_at(i: usize) -> usize {
    ((i.max(1) - 1) / CONCEPT_LENGTH) % N_CONCEPTS
}

/// Whether `h` is a positive example of `concept`.
pub fn concept_label(concept: usize, h: &[f64]) -> bool {
    match concept {
        0 => h[0] == 1.0 && h[2] == 0.0,
        1 => h[0] == 0.0 || h[1] == 0.5,
        _ => h[2] == 0.5 || h[2] == 1.0,
    }
}

/// All 27 grid points in lexicographic order.
pub fn grid() -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(27);
    for &a in &LEVELS {
        for &b in &LEVELS {
            for &c in &LEVELS {
                out.push([a, b, c]);
            }
        }
    }
    out
}

/// The exact joint law of `(h, y)` under `concept` with uniform features and
/// labels flipped with probability `label_noise`. Zero-mass points are
/// omitted.
pub fn distribution(concept: usize, label_noise: f64) -> (Vec<Sample>, Vec<f64>) {
    let mut samples = Vec::with_capacity(54);
    let mut weights = Vec::with_capacity(54);
    for h in grid() {
        let y = if concept_label(concept, &h) { 1.0 } else { -1.0 };
        for (label, p) in [(y, 1.0 - label_noise), (-y, label_noise)] {
            if p > 0.0 {
                samples.push(Sample::new(h.to_vec(), label));
                weights.push(p / 27.0);
            }
        }
    }
    (samples, weights)
}
