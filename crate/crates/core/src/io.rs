//! File formats: LIBSVM datasets, edge lists, metric CSVs, JSONL tick dumps
//! and the run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::{Roc, Series};
use crate::risk::Sample;
use crate::topology::Network;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}:{line}: {message}")]
    MalformedLine {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: label `{label}` is not binary (expected -1/+1 or 0/1)")]
    LabelDomain {
        path: String,
        line: usize,
        label: String,
    },
    #[error("{path}: labels mix the -1/+1 and 0/1 conventions")]
    MixedLabels { path: String },
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.display().to_string(),
        source,
    }
}

/// Lowercase hex encoding.
pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").expect("writing to a string");
    }
    s
}

/// SHA-256 of a file's contents, hex encoded.
pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let bytes = fs::read(path).map_err(file_err(path))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Parses LIBSVM text: `label idx:val ...` with 1-based indices.
///
/// Labels `0`/`1` map to `-1`/`+1`. With `dim` set, indices beyond it are
/// rejected; otherwise the dimension is the largest index seen.
///
/// ```
/// let s = diffadapt::io::parse_libsvm("+1 1:0.5 3:2\n0 1:1\n", Some(3), "mem").unwrap();
/// assert_eq!(s[0].features, vec![0.5, 0.0, 2.0]);
/// assert_eq!(s[1].label, -1.0);
/// ```
pub fn parse_libsvm(text: &str, dim: Option<usize>, origin: &str) -> Result<Vec<Sample>, IoError> {
    read_libsvm(BufReader::new(text.as_bytes()), dim, origin)
}

/// Reads a LIBSVM file.
pub fn load_libsvm(path: &Path, dim: Option<usize>) -> Result<Vec<Sample>, IoError> {
    let f = fs::File::open(path).map_err(file_err(path))?;
    read_libsvm(BufReader::new(f), dim, &path.display().to_string())
}

fn read_libsvm<R: BufRead>(reader: R, dim: Option<usize>, origin: &str) -> Result<Vec<Sample>, IoError> {
    let malformed = |line: usize, message: String| IoError::MalformedLine {
        path: origin.to_string(),
        line,
        message,
    };
    let mut rows: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    let mut max_index = 0usize;
    let (mut saw_zero, mut saw_minus) = (false, false);
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| IoError::File {
            path: origin.to_string(),
            source,
        })?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut tokens = body.split_whitespace();
        let label_text = tokens.next().expect("nonempty line");
        let label_value: f64 = label_text.parse().map_err(|_| IoError::LabelDomain {
            path: origin.to_string(),
            line: lineno,
            label: label_text.to_string(),
        })?;
        let label = if label_value == 1.0 {
            1.0
        } else if label_value == -1.0 {
            saw_minus = true;
            -1.0
        } else if label_value == 0.0 {
            saw_zero = true;
            -1.0
        } else {
            return Err(IoError::LabelDomain {
                path: origin.to_string(),
                line: lineno,
                label: label_text.to_string(),
            });
        };
        let mut feats = Vec::new();
        let mut last = 0usize;
        for tok in tokens {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| malformed(lineno, format!("`{tok}` is not `index:value`")))?;
            let i: usize = i
                .parse()
                .map_err(|_| malformed(lineno, format!("bad index `{i}`")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| malformed(lineno, format!("bad value `{v}`")))?;
            if i == 0 {
                return Err(malformed(lineno, "indices are 1-based".into()));
            }
            if i <= last {
                return Err(malformed(lineno, "indices must increase".into()));
            }
            if let Some(d) = dim {
                if i > d {
                    return Err(malformed(lineno, format!("index {i} exceeds dimension {d}")));
                }
            }
            last = i;
            max_index = max_index.max(i);
            feats.push((i - 1, v));
        }
        rows.push((label, feats));
    }
    if saw_zero && saw_minus {
        return Err(IoError::MixedLabels {
            path: origin.to_string(),
        });
    }
    let d = dim.unwrap_or(max_index);
    Ok(rows
        .into_iter()
        .map(|(label, feats)| {
            let mut h = vec![0.0; d];
            for (i, v) in feats {
                h[i] = v;
            }
            Sample::new(h, label)
        })
        .collect())
}

/// Writes samples in LIBSVM format, omitting zero features. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_libsvm<W: Write>(samples: &[Sample], mut out: W) -> std::io::Result<()> {
    for s in samples {
        let label = if s.label > 0.0 { "+1" } else { "-1" };
        out.write_all(label.as_bytes())?;
        for (i, v) in s.features.iter().enumerate() {
            if *v != 0.0 {
                write!(out, " {}:{}", i + 1, v)?;
            }
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes a network as a 0-indexed edge list without self-loops.
pub fn write_edge_list<W: Write>(net: &Network, mut out: W) -> std::io::Result<()> {
    writeln!(out, "# {} nodes", net.n_nodes())?;
    for (u, v) in net.edges() {
        if u != v {
            writeln!(out, "{u} {v}")?;
        }
    }
    Ok(())
}

/// `tick,mean,stderr` CSV of a series; ticks start at 1.
pub fn series_csv(series: &Series) -> String {
    rows_csv(&series.mean(), &series.std_error())
}

/// `tick,mean,stderr` CSV from explicit columns.
pub fn rows_csv(mean: &[f64], stderr: &[f64]) -> String {
    let mut s = String::from("tick,mean,stderr\n");
    for (i, (m, e)) in mean.iter().zip(stderr).enumerate() {
        writeln!(s, "{},{},{}", i + 1, m, e).expect("writing to a string");
    }
    s
}

/// `threshold,pfa,pd` CSV of an ROC curve.
pub fn roc_csv(roc: &Roc) -> String {
    let mut s = String::from("threshold,pfa,pd\n");
    for p in &roc.points {
        writeln!(s, "{},{},{}", p.threshold, p.pfa, p.pd).expect("writing to a string");
    }
    s
}

/// One line of a JSONL stream dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: usize,
    pub node: usize,
    pub features: Vec<f64>,
    pub label: f64,
    /// Closed-form optimizer at this tick, when known.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub optimizer: Option<Vec<f64>>,
}

pub fn write_jsonl<W: Write>(records: &[TickRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// A file listed in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Description of a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub repetitions: u64,
    pub horizon: usize,
    pub threads: Option<usize>,
    pub wall_time_seconds: f64,
    /// Facts a reader needs to interpret the numbers.
    pub notes: BTreeMap<String, String>,
    pub files: Vec<FileEntry>,
}

/// Collects files written into an output directory, in write order.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, IoError> {
        fs::create_dir_all(root).map_err(file_err(root))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf, IoError> {
        let path = self.root.join(name);
        fs::write(&path, contents).map_err(file_err(&path))?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(path)
    }

    /// Names written so far.
    pub fn files(&self) -> &[String] {
        &self.written
    }

    /// Hashes every written file into manifest entries, sorted by name.
    pub fn entries(&self) -> Result<Vec<FileEntry>, IoError> {
        let mut names = self.written.clone();
        names.sort();
        names
            .into_iter()
            .map(|name| {
                let path = self.root.join(&name);
                let bytes = fs::metadata(&path).map_err(file_err(&path))?.len();
                Ok(FileEntry {
                    sha256: sha256_file(&path)?,
                    path: name,
                    bytes,
                })
            })
            .collect()
    }

    /// Writes `manifest.json` listing every other written file.
    pub fn finish(mut self, mut manifest: Manifest) -> Result<PathBuf, IoError> {
        manifest.files = self.entries()?;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        let path = self.root.join("manifest.json");
        fs::write(&path, text).map_err(file_err(&path))?;
        self.written.clear();
        Ok(path)
    }
}
