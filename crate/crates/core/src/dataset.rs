//! Training records: skeleton, constants, image and formula for each pair,
//! with a JSONL + packed `f32` on-disk form.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formula::tree_to_formula;
use crate::ots::{ots_to_tree, tree_to_ots, ConstVec, Ots};
use crate::render::{build_meshgrid, render_image, FuncImage, ImageMeta, MeshGrid, DEFAULT_NOISE_SIGMA};
use crate::seed::{derive_seed, derive_seed_path};
use crate::tree::{sample_tree, GenConfig, OperationTree};
use crate::vocab::{OperatorVocab, TokenId};

const INDEX_FILE: &str = "index.jsonl";
const BLOB_FILE: &str = "images.f32";
const MANIFEST_FILE: &str = "manifest.json";
const CONST_DRAW_ATTEMPTS: u64 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub gen: GenConfig,
    pub scales: Vec<f64>,
    pub points_per_dim: usize,
    pub noise_sigma: f64,
    /// d̃_c
    pub const_slots: usize,
    pub const_range: [f64; 2],
    /// Full scale used 11,028 skeletons and 551,400 pairs.
    pub n_skeletons: usize,
    pub images_per_skeleton: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            scales: vec![1.0, 2.0, 4.0],
            points_per_dim: 64,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            const_slots: 8,
            const_range: [-2.0, 2.0],
            n_skeletons: 500,
            images_per_skeleton: 4,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn grid(&self) -> Result<MeshGrid> {
        build_meshgrid(&self.scales, self.gen.var_count, self.points_per_dim)
    }

    pub fn vocab(&self) -> Result<OperatorVocab> {
        self.gen.vocab()
    }
}

/// One image-skeleton-formula triple held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tree: OperationTree,
    pub ots: Ots,
    /// Padded to d̃_c.
    pub consts: ConstVec,
    pub image: FuncImage,
    pub formula: String,
    pub skeleton: usize,
    pub seed: u64,
}

fn draw_consts(rng: &mut ChaCha8Rng, n: usize, range: [f64; 2]) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(range[0]..=range[1])).collect()
}

/// Samples `n_skeletons` distinct skeletons with `images_per_skeleton`
/// constant draws each. Skeletons whose images keep failing the finite
/// coverage gate are replaced.
pub fn generate_samples(cfg: &DataConfig) -> Result<Vec<Sample>> {
    cfg.gen.validate()?;
    let vocab = cfg.vocab()?;
    let grid = cfg.grid()?;
    let mut seen: BTreeSet<Vec<TokenId>> = BTreeSet::new();
    let mut out = Vec::with_capacity(cfg.n_skeletons * cfg.images_per_skeleton);
    let budget = 200 * cfg.n_skeletons as u64 + 1000;
    let mut attempt = 0u64;
    while seen.len() < cfg.n_skeletons {
        if attempt >= budget {
            return Err(Error::Sample {
                requested: cfg.n_skeletons,
                capacity: seen.len(),
            });
        }
        let tree_seed = derive_seed_path(cfg.seed, &[0x5e1, attempt]);
        attempt += 1;
        let tree = sample_tree(&cfg.gen, tree_seed)?;
        if tree.n_consts() > cfg.const_slots {
            continue;
        }
        let ots = tree_to_ots(&tree, &vocab, cfg.gen.max_ots_len)?;
        if seen.contains(ots.tokens()) {
            continue;
        }
        let skeleton = seen.len();
        let mut batch = Vec::with_capacity(cfg.images_per_skeleton);
        'images: for k in 0..cfg.images_per_skeleton {
            for a in 0..CONST_DRAW_ATTEMPTS {
                let seed = derive_seed_path(tree_seed, &[k as u64, a]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let values = draw_consts(&mut rng, tree.n_consts(), cfg.const_range);
                let consts = ConstVec::padded(&values, cfg.const_slots)?;
                match render_image(&tree, &consts, &grid, cfg.noise_sigma, derive_seed(seed, 0x1a9e)) {
                    Ok(image) => {
                        batch.push(Sample {
                            tree: tree.clone(),
                            ots: ots.clone(),
                            formula: tree_to_formula(&tree, &consts)?,
                            consts,
                            image,
                            skeleton,
                            seed,
                        });
                        continue 'images;
                    }
                    Err(Error::DegenerateImage { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            break;
        }
        if batch.len() == cfg.images_per_skeleton {
            seen.insert(ots.tokens().to_vec());
            out.extend(batch);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub ots: Vec<u32>,
    pub consts: Vec<f64>,
    pub formula: String,
    pub skeleton: usize,
    pub seed: u64,
    pub n_nodes: usize,
    pub image: ImageMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DataConfig,
    pub vocab: Vec<String>,
    pub n_records: usize,
    pub n_skeletons: usize,
    /// `sha256:` over the git-style blob hashes of the index and image files.
    pub content_hash: String,
}

/// SHA-256 of `blob <len>\0<bytes>`, as git does for file contents.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn content_hash(index: &[u8], blob: &[u8]) -> String {
    let listing = format!("{INDEX_FILE} {}\n{BLOB_FILE} {}\n", git_blob_hash(index), git_blob_hash(blob));
    format!("sha256:{}", hex::encode(Sha256::digest(listing.as_bytes())))
}

pub fn write_dataset(samples: &[Sample], cfg: &DataConfig, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let grid = cfg.grid()?;
    let vocab = cfg.vocab()?;
    let mut index = Vec::new();
    let mut blob = Vec::new();
    for s in samples {
        let rec = DatasetRecord {
            ots: s.ots.tokens().iter().map(|t| t.0).collect(),
            consts: s.consts.visible()?.to_vec(),
            formula: s.formula.clone(),
            skeleton: s.skeleton,
            seed: s.seed,
            n_nodes: s.tree.n_nodes(),
            image: s.image.meta(&grid, blob.len() as u64),
        };
        blob.extend_from_slice(&s.image.to_f32_bytes());
        writeln!(index, "{}", serde_json::to_string(&rec)?)?;
    }
    fs::write(dir.join(INDEX_FILE), &index)?;
    fs::write(dir.join(BLOB_FILE), &blob)?;
    let n_skeletons = samples.iter().map(|s| s.skeleton).collect::<BTreeSet<_>>().len();
    let manifest = Manifest {
        config: cfg.clone(),
        vocab: vocab.symbols().iter().map(|s| s.name()).collect(),
        n_records: samples.len(),
        n_skeletons,
        content_hash: content_hash(&index, &blob),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn dataset_generate(cfg: &DataConfig, dir: &Path) -> Result<Manifest> {
    let samples = generate_samples(cfg)?;
    write_dataset(&samples, cfg, dir)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
}

/// Loads every record. Trees are rebuilt from the stored OTS and the image
/// is read back from the blob, so all modalities come from stored data.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = read_manifest(dir)?;
    let vocab = manifest.config.vocab()?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let reader = BufReader::new(fs::File::open(dir.join(INDEX_FILE))?);
    let max_len = manifest.config.gen.max_ots_len;
    let mut samples = Vec::with_capacity(manifest.n_records);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)?;
        let ids: Vec<TokenId> = rec.ots.iter().map(|&t| TokenId(t)).collect();
        let ots = Ots::from_tokens(&ids, max_len, vocab.pad())?;
        let consts = ConstVec::padded(&rec.consts, manifest.config.const_slots)?;
        let tree = ots_to_tree(&ots, &consts, &vocab)?;
        let start = rec.image.offset as usize;
        let bytes = blob
            .get(start..start + rec.image.byte_len())
            .ok_or_else(|| Error::Shape("image blob truncated".into()))?;
        let image = FuncImage::from_parts(&rec.image, bytes)?;
        samples.push(Sample {
            tree,
            ots,
            consts,
            image,
            formula: rec.formula,
            skeleton: rec.skeleton,
            seed: rec.seed,
        });
    }
    Ok((manifest, samples))
}
