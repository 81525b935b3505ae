//! The frozen formula-string feature extractor.
//!
//! [`HashTeacher`] is a deterministic stand-in for a language model: tokens
//! and their trigram context index a fixed Gaussian table, then a seeded
//! orthogonal matrix mixes positions. [`ImportedTeacher`] serves hidden
//! states computed elsewhere from an exported directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, derive_seed_path};

/// Symbols the tokenizer knows, matched greedily by length.
pub const SYMBOL_TABLE: &[&str] = &[
    "add", "sub", "mul", "div", "pow", "neg", "abs", "sin", "cos", "tanh", "exp", "log", "sqrt", "x1", "x2", "x3",
    "x4", "x5", "x6", "x7", "x8", "x9", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ".", "e", "+", "-", "*",
    "/", "^", "(", ")", " ",
];

const INDEX_FILE: &str = "index.jsonl";
const BLOB_FILE: &str = "hidden.f32";
const TABLE_ROWS: usize = 2048;

/// Greedy longest-match tokenization into indices of [`SYMBOL_TABLE`].
pub fn formula_tokenize(s: &str) -> Result<Vec<u32>> {
    if s.is_empty() {
        return Err(Error::Tokenize { offset: 0, byte: 0 });
    }
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let best = SYMBOL_TABLE
            .iter()
            .enumerate()
            .filter(|(_, sym)| bytes[pos..].starts_with(sym.as_bytes()))
            .max_by_key(|(_, sym)| sym.len());
        match best {
            Some((id, sym)) => {
                out.push(id as u32);
                pos += sym.len();
            }
            None => {
                return Err(Error::Tokenize {
                    offset: pos,
                    byte: bytes[pos],
                })
            }
        }
    }
    Ok(out)
}

pub fn formula_detokenize(ids: &[u32]) -> String {
    ids.iter().map(|&i| SYMBOL_TABLE[i as usize]).collect()
}

/// Teacher hidden states `[N_m × D_m′]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherHidden {
    pub values: Array2<f64>,
    pub teacher_id: String,
}

impl TeacherHidden {
    pub fn token_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

pub trait Teacher: Send + Sync {
    fn id(&self) -> &str;
    fn width(&self) -> usize;
    fn extract(&self, formula: &str) -> Result<TeacherHidden>;
}

/// Rounds through `f32` so exported blobs reproduce the values exactly.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Debug, Clone)]
pub struct HashTeacher {
    id: String,
    width: usize,
    seed: u64,
    table: Array2<f64>,
}

impl HashTeacher {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7ab1e));
        let scale = 1.0 / (width as f64).sqrt();
        let table = Array2::from_shape_simple_fn((TABLE_ROWS, width), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self {
            id: format!("hash-trigram-w{width}-s{seed}"),
            width,
            seed,
            table,
        }
    }

    fn slot(&self, tags: &[u64]) -> usize {
        (derive_seed_path(self.seed, tags) % TABLE_ROWS as u64) as usize
    }

    /// Random orthogonal `[n × n]`, fixed per sequence length.
    fn mixing(&self, n: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_path(self.seed, &[0x6d6978, n as u64]));
        let mut q = Array2::<f64>::from_shape_simple_fn((n, n), || StandardNormal.sample(&mut rng));
        // Modified Gram-Schmidt over rows.
        for i in 0..n {
            for j in 0..i {
                let proj = q.row(i).dot(&q.row(j));
                let rj = q.row(j).to_owned();
                q.row_mut(i).scaled_add(-proj, &rj);
            }
            let norm = q.row(i).dot(&q.row(i)).sqrt();
            q.row_mut(i).mapv_inplace(|v| v / norm);
        }
        q
    }
}

impl Teacher for HashTeacher {
    fn id(&self) -> &str {
        &self.id
    }

    fn width(&self) -> usize {
        self.width
    }

    fn extract(&self, formula: &str) -> Result<TeacherHidden> {
        const NONE: u64 = u64::MAX;
        let toks = formula_tokenize(formula)?;
        let n = toks.len();
        let mut emb = Array2::<f64>::zeros((n, self.width));
        for k in 0..n {
            let prev = if k > 0 { toks[k - 1] as u64 } else { NONE };
            let next = toks.get(k + 1).map_or(NONE, |&t| t as u64);
            let own = self.slot(&[1, toks[k] as u64]);
            let ctx = self.slot(&[3, prev, toks[k] as u64, next]);
            let mut row = emb.row_mut(k);
            row += &self.table.row(own);
            row.scaled_add(0.5, &self.table.row(ctx));
        }
        let values = self.mixing(n).dot(&emb).mapv(f32_exact);
        Ok(TeacherHidden {
            values,
            teacher_id: self.id.clone(),
        })
    }
}

/// Returns the same hidden state for every string.
#[derive(Debug, Clone)]
pub struct ConstantTeacher {
    id: String,
    values: Array2<f64>,
}

impl ConstantTeacher {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Array2::from_shape_simple_fn((4, width), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            f32_exact(z)
        });
        Self {
            id: format!("constant-w{width}-s{seed}"),
            values,
        }
    }
}

impl Teacher for ConstantTeacher {
    fn id(&self) -> &str {
        &self.id
    }

    fn width(&self) -> usize {
        self.values.ncols()
    }

    fn extract(&self, formula: &str) -> Result<TeacherHidden> {
        formula_tokenize(formula)?;
        Ok(TeacherHidden {
            values: self.values.clone(),
            teacher_id: self.id.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    key: String,
    rows: usize,
    cols: usize,
    offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    teacher: Option<String>,
}

/// Hidden states loaded from an export directory, keyed by exact string.
#[derive(Debug, Clone)]
pub struct ImportedTeacher {
    id: String,
    width: usize,
    entries: BTreeMap<String, Array2<f64>>,
}

impl ImportedTeacher {
    pub fn load(dir: &Path, expected_width: usize) -> Result<Self> {
        let blob = fs::read(dir.join(BLOB_FILE))?;
        let index = BufReader::new(fs::File::open(dir.join(INDEX_FILE))?);
        let mut entries = BTreeMap::new();
        let mut id = None;
        for line in index.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: IndexEntry = serde_json::from_str(&line)?;
            if e.cols != expected_width {
                return Err(Error::Shape(format!(
                    "imported width {} for {:?}, expected {expected_width}",
                    e.cols, e.key
                )));
            }
            let start = e.offset as usize;
            let end = start + e.rows * e.cols * 4;
            let bytes = blob
                .get(start..end)
                .ok_or_else(|| Error::Shape(format!("blob too short for {:?}", e.key)))?;
            let vals: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let m = Array2::from_shape_vec((e.rows, e.cols), vals).map_err(|err| Error::Shape(err.to_string()))?;
            if id.is_none() {
                id = e.teacher.clone();
            }
            entries.insert(e.key, m);
        }
        Ok(Self {
            id: id.unwrap_or_else(|| format!("imported:{}", dir.display())),
            width: expected_width,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Teacher for ImportedTeacher {
    fn id(&self) -> &str {
        &self.id
    }

    fn width(&self) -> usize {
        self.width
    }

    fn extract(&self, formula: &str) -> Result<TeacherHidden> {
        let values = self
            .entries
            .get(formula)
            .cloned()
            .ok_or_else(|| Error::MissingKey(formula.to_string()))?;
        Ok(TeacherHidden {
            values,
            teacher_id: self.id.clone(),
        })
    }
}

/// Writes `index.jsonl` and `hidden.f32` for the given strings.
pub fn export_teacher(teacher: &dyn Teacher, formulas: &[String], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = fs::File::create(dir.join(INDEX_FILE))?;
    let mut blob = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for f in formulas {
        if !seen.insert(f.as_str()) {
            continue;
        }
        let h = teacher.extract(f)?;
        let entry = IndexEntry {
            key: f.clone(),
            rows: h.token_count(),
            cols: h.width(),
            offset: blob.len() as u64,
            teacher: Some(teacher.id().to_string()),
        };
        for v in h.values.iter() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        writeln!(index, "{}", serde_json::to_string(&entry)?)?;
    }
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_calls_and_variables() {
        let ids = formula_tokenize("sin(x1)").unwrap();
        let names: Vec<&str> = ids.iter().map(|&i| SYMBOL_TABLE[i as usize]).collect();
        assert_eq!(names, ["sin", "(", "x1", ")"]);
        assert!(matches!(formula_tokenize(""), Err(Error::Tokenize { .. })));
        assert!(matches!(formula_tokenize("sin(y)"), Err(Error::Tokenize { offset: 4, .. })));
        assert_eq!(formula_detokenize(&formula_tokenize("exp(1e-5)").unwrap()), "exp(1e-5)");
    }

    #[test]
    fn hash_teacher_is_deterministic_and_sensitive() {
        let t = HashTeacher::new(16, 3);
        let a = t.extract("(x1 + 1.5)").unwrap();
        assert_eq!(a, t.extract("(x1 + 1.5)").unwrap());
        assert_eq!(a.values.dim(), (9, 16));
        let b = t.extract("(x1 * 1.5)").unwrap();
        assert_ne!(a.values, b.values);
    }

    #[test]
    fn mixing_is_orthogonal() {
        let t = HashTeacher::new(8, 1);
        let q = t.mixing(6);
        let eye = q.dot(&q.t());
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((eye[[i, j]] - want).abs() < 1e-12);
            }
        }
    }
}
