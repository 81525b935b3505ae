//! Cosine-similarity matrices between modalities.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::dataset::Sample;
use crate::error::Result;
use crate::features::{pool, PooledFeature, Pooling};
use crate::loss::similarity_matrix;
use crate::nn::Model;
use crate::teacher::Teacher;

/// Pooled, unit-norm features of each modality for a list of samples.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub img: Vec<PooledFeature>,
    pub ots: Vec<PooledFeature>,
    pub formula: Vec<PooledFeature>,
}

pub fn embed_samples(
    model: &Model,
    samples: &[&Sample],
    teacher: &dyn Teacher,
    pooling: Pooling,
    teacher_pooling: Pooling,
) -> Result<Embeddings> {
    let mut e = Embeddings {
        img: Vec::with_capacity(samples.len()),
        ots: Vec::with_capacity(samples.len()),
        formula: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        e.img.push(pool(&model.encode_funcimg(&s.image)?, pooling));
        e.ots.push(pool(&model.encode_ots(&s.ots, &s.consts, None)?, pooling));
        let th = teacher.extract(&s.formula)?;
        e.formula.push(pool(&model.teacher_embedder(&th.values)?, teacher_pooling));
    }
    Ok(e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimSummary {
    pub mean_diag: f64,
    pub mean_offdiag: f64,
    /// Fraction of rows whose maximum sits on the diagonal.
    pub top1: f64,
}

impl SimSummary {
    pub fn gap(&self) -> f64 {
        self.mean_diag - self.mean_offdiag
    }
}

pub fn summarize(m: &Array2<f64>) -> SimSummary {
    let n = m.nrows();
    let mut diag = 0.0;
    let mut off = 0.0;
    let mut hits = 0usize;
    for i in 0..n {
        diag += m[[i, i]];
        let mut best = 0;
        for j in 0..n {
            if j != i {
                off += m[[i, j]];
            }
            if m[[i, j]] > m[[i, best]] {
                best = j;
            }
        }
        hits += usize::from(best == i);
    }
    let n_off = n * n - n;
    SimSummary {
        mean_diag: diag / n as f64,
        mean_offdiag: if n_off == 0 { 0.0 } else { off / n_off as f64 },
        top1: hits as f64 / n as f64,
    }
}

#[derive(Debug, Clone)]
pub struct SimilarityReport {
    pub img_ots: Array2<f64>,
    pub img_formula: Array2<f64>,
    pub ots_formula: Array2<f64>,
}

impl SimilarityReport {
    pub fn from_embeddings(e: &Embeddings) -> Self {
        Self {
            img_ots: similarity_matrix(&e.img, &e.ots),
            img_formula: similarity_matrix(&e.img, &e.formula),
            ots_formula: similarity_matrix(&e.ots, &e.formula),
        }
    }

    pub fn matrices(&self) -> [(&'static str, &Array2<f64>); 3] {
        [
            ("img_ots", &self.img_ots),
            ("img_formula", &self.img_formula),
            ("ots_formula", &self.ots_formula),
        ]
    }

    /// One CSV per matrix plus `summary.csv`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut summary = String::from("matrix,n,mean_diag,mean_offdiag,top1\n");
        for (name, m) in self.matrices() {
            let mut f = fs::File::create(dir.join(format!("{name}.csv")))?;
            for row in m.rows() {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(f, "{}", line.join(","))?;
            }
            let s = summarize(m);
            summary.push_str(&format!(
                "{name},{},{},{},{}\n",
                m.nrows(),
                s.mean_diag,
                s.mean_offdiag,
                s.top1
            ));
        }
        fs::write(dir.join("summary.csv"), summary)?;
        Ok(())
    }
}

pub fn similarity_report(
    model: &Model,
    samples: &[&Sample],
    teacher: &dyn Teacher,
    pooling: Pooling,
    teacher_pooling: Pooling,
    out_dir: Option<&Path>,
) -> Result<SimilarityReport> {
    let e = embed_samples(model, samples, teacher, pooling, teacher_pooling)?;
    let r = SimilarityReport::from_embeddings(&e);
    if let Some(dir) = out_dir {
        r.write_csv(dir)?;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn summary_of_small_matrix() {
        let m = array![[1.0, 0.2], [0.4, 0.3]];
        let s = summarize(&m);
        assert!((s.mean_diag - 0.65).abs() < 1e-15);
        assert!((s.mean_offdiag - 0.3).abs() < 1e-15);
        assert_eq!(s.top1, 0.5);
    }
}
