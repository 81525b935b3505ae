//! Multi-scale meshgrids and function-image rendering.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::eval_with_values;
use crate::ots::ConstVec;
use crate::tree::OperationTree;

/// Default image noise level.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.001;
/// Images with a smaller finite fraction are rejected.
pub const MIN_FINITE_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct MeshGrid {
    scales: Vec<f64>,
    dims: usize,
    points_per_dim: usize,
    /// `[n_s × d × n_δ]`
    coordinates: Array3<f64>,
}

pub fn build_meshgrid(scales: &[f64], dims: usize, points_per_dim: usize) -> Result<MeshGrid> {
    if scales.is_empty() {
        return Err(Error::Config("at least one scale is required".into()));
    }
    if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::Config(format!("scale {s} is not positive")));
    }
    if dims == 0 {
        return Err(Error::Config("grid needs at least one dimension".into()));
    }
    if points_per_dim < 2 {
        return Err(Error::Config("need at least two points per dimension".into()));
    }
    let last = (points_per_dim - 1) as f64;
    let coordinates = Array3::from_shape_fn((scales.len(), dims, points_per_dim), |(s, _, i)| {
        scales[s] * (2.0 * i as f64 - last) / last
    });
    Ok(MeshGrid {
        scales: scales.to_vec(),
        dims,
        points_per_dim,
        coordinates,
    })
}

impl MeshGrid {
    /// The desk-scale default: one variable, scales 1, 2 and 4, 64 points.
    pub fn standard() -> Self {
        build_meshgrid(&[1.0, 2.0, 4.0], 1, 64).expect("valid defaults")
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn points_per_dim(&self) -> usize {
        self.points_per_dim
    }

    pub fn coordinates(&self) -> &Array3<f64> {
        &self.coordinates
    }

    /// n_δ^d.
    pub fn points_per_channel(&self) -> usize {
        self.points_per_dim.pow(self.dims as u32)
    }

    /// Cartesian product for one channel, `[n_δ^d × d]`, last dimension fastest.
    pub fn channel_points(&self, channel: usize) -> Array2<f64> {
        let n = self.points_per_dim;
        let d = self.dims;
        Array2::from_shape_fn((self.points_per_channel(), d), |(p, j)| {
            let stride = n.pow((d - 1 - j) as u32);
            self.coordinates[[channel, j, (p / stride) % n]]
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub noise_sigma: f64,
    pub seed: u64,
    pub standardize: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            noise_sigma: DEFAULT_NOISE_SIGMA,
            seed: 0,
            standardize: true,
        }
    }
}

/// A rendered function image, `[n_s × n_δ^d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FuncImage {
    values: Array2<f64>,
    finite_mask: Array2<bool>,
    noise_sigma: f64,
    seed: u64,
    channel_mean: Vec<f64>,
    channel_std: Vec<f64>,
}

pub fn render_image(
    tree: &OperationTree,
    consts: &ConstVec,
    grid: &MeshGrid,
    noise_sigma: f64,
    seed: u64,
) -> Result<FuncImage> {
    render_with(
        tree,
        consts,
        grid,
        RenderOptions {
            noise_sigma,
            seed,
            standardize: true,
        },
    )
}

/// Evaluates every channel without noise or standardization. Non-finite
/// entries are NaN.
pub fn evaluate_channels(tree: &OperationTree, consts: &[f64], grid: &MeshGrid) -> Result<Array2<f64>> {
    let p = grid.points_per_channel();
    let mut raw = Array2::<f64>::zeros((grid.n_scales(), p));
    for s in 0..grid.n_scales() {
        let pts = grid.channel_points(s);
        let vals = eval_with_values(tree, consts, pts.view())?;
        raw.row_mut(s).assign(&ndarray::Array1::from(vals));
    }
    Ok(raw)
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn render_with(
    tree: &OperationTree,
    consts: &ConstVec,
    grid: &MeshGrid,
    opts: RenderOptions,
) -> Result<FuncImage> {
    if !(opts.noise_sigma >= 0.0 && opts.noise_sigma.is_finite()) {
        return Err(Error::Config("noise sigma must be finite and >= 0".into()));
    }
    let mut values = evaluate_channels(tree, consts.visible()?, grid)?;
    let finite_mask = values.mapv(f64::is_finite);
    let finite = finite_mask.iter().filter(|&&f| f).count();
    let total = values.len();
    if (finite as f64) < MIN_FINITE_FRACTION * total as f64 {
        return Err(Error::DegenerateImage { finite, total });
    }
    if opts.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, opts.noise_sigma).expect("sigma validated");
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for (v, &ok) in values.iter_mut().zip(finite_mask.iter()) {
            if ok {
                *v += normal.sample(&mut rng);
            }
        }
    }
    let n_s = grid.n_scales();
    let mut channel_mean = vec![0.0; n_s];
    let mut channel_std = vec![1.0; n_s];
    for s in 0..n_s {
        let mut row = values.row_mut(s);
        let mask = finite_mask.row(s);
        if opts.standardize {
            let n = mask.iter().filter(|&&f| f).count();
            if n > 0 {
                let finite: Vec<f64> = row.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
                let (mut mean, mut std) = moments(&finite);
                if !(mean.is_finite() && std.is_finite()) {
                    // Huge but finite values overflow the squares; redo the
                    // moments on values scaled into [-1, 1].
                    let scale = finite.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    let scaled: Vec<f64> = finite.iter().map(|v| v / scale).collect();
                    let (m, sd) = moments(&scaled);
                    (mean, std) = (m * scale, sd * scale);
                }
                channel_mean[s] = mean;
                channel_std[s] = if std > 1e-12 { std } else { 1.0 };
            }
        }
        let (mean, std) = (channel_mean[s], channel_std[s]);
        for (v, &ok) in row.iter_mut().zip(mask) {
            *v = if ok { (*v - mean) / std } else { 0.0 };
        }
    }
    Ok(FuncImage {
        values,
        finite_mask,
        noise_sigma: opts.noise_sigma,
        seed: opts.seed,
        channel_mean,
        channel_std,
    })
}

impl FuncImage {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn finite_mask(&self) -> &Array2<bool> {
        &self.finite_mask
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn points_per_channel(&self) -> usize {
        self.values.ncols()
    }

    pub fn channel_stats(&self) -> (&[f64], &[f64]) {
        (&self.channel_mean, &self.channel_std)
    }

    pub fn finite_fraction(&self) -> f64 {
        self.finite_mask.iter().filter(|&&f| f).count() as f64 / self.finite_mask.len() as f64
    }

    /// Undoes standardization; non-finite positions are NaN.
    pub fn raw_values(&self) -> Array2<f64> {
        let mut out = self.values.clone();
        for (s, mut row) in out.rows_mut().into_iter().enumerate() {
            let mask = self.finite_mask.row(s);
            for (v, &ok) in row.iter_mut().zip(mask) {
                *v = if ok {
                    *v * self.channel_std[s] + self.channel_mean[s]
                } else {
                    f64::NAN
                };
            }
        }
        out
    }

    pub fn meta(&self, grid: &MeshGrid, offset: u64) -> ImageMeta {
        ImageMeta {
            shape: [self.values.nrows(), self.values.ncols()],
            scales: grid.scales().to_vec(),
            dims: grid.dims(),
            points_per_dim: grid.points_per_dim(),
            sigma: self.noise_sigma,
            seed: self.seed,
            mask_rle: encode_rle(self.finite_mask.iter().copied()),
            channel_mean: self.channel_mean.clone(),
            channel_std: self.channel_std.clone(),
            offset,
        }
    }

    /// Row-major little-endian f32 values.
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        self.values
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    }

    pub fn from_parts(meta: &ImageMeta, bytes: &[u8]) -> Result<Self> {
        let [rows, cols] = meta.shape;
        if bytes.len() != rows * cols * 4 {
            return Err(Error::Shape(format!(
                "image blob has {} bytes, expected {}",
                bytes.len(),
                rows * cols * 4
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let values = Array2::from_shape_vec((rows, cols), data).expect("length checked");
        let mask: Vec<bool> = decode_rle(&meta.mask_rle);
        if mask.len() != rows * cols {
            return Err(Error::Shape("mask length does not match image shape".into()));
        }
        let finite_mask = Array2::from_shape_vec((rows, cols), mask).expect("length checked");
        Ok(FuncImage {
            values,
            finite_mask,
            noise_sigma: meta.sigma,
            seed: meta.seed,
            channel_mean: meta.channel_mean.clone(),
            channel_std: meta.channel_std.clone(),
        })
    }

    /// Writes `path` (f32 blob) and `path.json` (sidecar).
    pub fn write_blob(&self, grid: &MeshGrid, path: &Path) -> Result<()> {
        fs::File::create(path)?.write_all(&self.to_f32_bytes())?;
        let meta = self.meta(grid, 0);
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn read_blob(path: &Path) -> Result<(Self, ImageMeta)> {
        let meta: ImageMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Ok((Self::from_parts(&meta, &bytes)?, meta))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Sidecar metadata for one stored image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub shape: [usize; 2],
    pub scales: Vec<f64>,
    pub dims: usize,
    pub points_per_dim: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Alternating run lengths, starting with a run of finite entries.
    pub mask_rle: Vec<u32>,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    /// Byte offset inside a packed blob.
    #[serde(default)]
    pub offset: u64,
}

impl ImageMeta {
    pub fn grid(&self) -> Result<MeshGrid> {
        build_meshgrid(&self.scales, self.dims, self.points_per_dim)
    }

    pub fn byte_len(&self) -> usize {
        self.shape[0] * self.shape[1] * 4
    }
}

pub fn encode_rle(mask: impl IntoIterator<Item = bool>) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = true;
    let mut len = 0u32;
    for m in mask {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn decode_rle(runs: &[u32]) -> Vec<bool> {
    let mut out = Vec::new();
    let mut current = true;
    for &r in runs {
        out.extend(std::iter::repeat_n(current, r as usize));
        current = !current;
    }
    out
}
