//! Synthetic multi-center segmentation data.
//!
//! Each center renders blurred ellipsoid "organs" under its own acquisition
//! profile (gain, offset, noise, organ size, optional smooth multiplicative
//! bias field). The default scenario has six centers: four train+test centers
//! of unequal size, one of them artifact heavy, plus two test-only centers.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Rng;
use crate::volume::{ImageVolume, MaskVolume, Shape};

pub type Sample = (ImageVolume, MaskVolume);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterRole {
    TrainTest,
    TestOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterProfile {
    pub id: String,
    pub samples: usize,
    pub gain: f64,
    pub offset: f64,
    pub noise: f64,
    #[serde(default)]
    pub bias: f64,
    pub radius_mean: f64,
    pub radius_std: f64,
    pub role: CenterRole,
}

impl CenterProfile {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(char::is_whitespace) {
            return Err(Error::config(format!("invalid center id {:?}", self.id)));
        }
        if self.samples == 0 {
            return Err(Error::config(format!("center {} has no samples", self.id)));
        }
        let finite = [self.gain, self.offset, self.noise, self.bias, self.radius_mean, self.radius_std];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!("center {} has non-finite profile values", self.id)));
        }
        if self.noise < 0.0 || self.bias < 0.0 || self.radius_std < 0.0 || self.radius_mean <= 0.0 {
            return Err(Error::config(format!("center {} has a negative scale parameter", self.id)));
        }
        Ok(())
    }

    pub fn is_training(&self) -> bool {
        self.role == CenterRole::TrainTest
    }
}

/// Six-center default: sample counts 16/12/14/48 for training centers
/// (the third carries a strong bias field) and 4/18 for test-only centers.
/// Every training center is off from the test-only ones in some way: noisy
/// with large lesions, low contrast with small lesions, bias field, or
/// slightly small lesions. The test-only centers have mild bias fields.
pub fn default_profiles() -> Vec<CenterProfile> {
    let p = |id: &str, samples, gain, offset, noise, bias, radius_mean, radius_std, role| CenterProfile {
        id: id.to_string(),
        samples,
        gain,
        offset,
        noise,
        bias,
        radius_mean,
        radius_std,
        role,
    };
    use CenterRole::*;
    vec![
        p("C01", 16, 1.0, 1.0, 0.35, 0.0, 7.5, 1.0, TrainTest),
        p("C02", 12, 0.7, 1.2, 0.15, 0.0, 4.0, 0.8, TrainTest),
        p("C03", 14, 1.2, 1.0, 0.20, 1.2, 5.0, 1.0, TrainTest),
        p("C04", 48, 1.5, 0.8, 0.15, 0.0, 4.8, 0.8, TrainTest),
        p("C05", 4, 1.0, 1.0, 0.30, 0.4, 6.0, 2.0, TestOnly),
        p("C06", 18, 1.1, 0.9, 0.25, 0.3, 6.0, 2.5, TestOnly),
    ]
}

/// One center's labeled samples. Train+test centers keep every sample in
/// `train` until a fold split moves some into `test`; test-only centers keep
/// everything in `test`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub center_id: String,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
}

impl ClientDataset {
    pub fn is_test_only(&self) -> bool {
        self.train.is_empty()
    }

    pub fn shape(&self) -> Option<Shape> {
        self.train.iter().chain(&self.test).map(|(i, _)| i.shape()).next()
    }
}

pub const MIN_GENERATION_EXTENT: usize = 8;

/// Renders `profile.samples` samples. Deterministic in `(profile, rng)`.
pub fn generate_center(profile: &CenterProfile, rng: &Rng, shape: Shape) -> Result<ClientDataset> {
    profile.validate()?;
    let volumetric = !shape.is_2d();
    if shape.height < MIN_GENERATION_EXTENT
        || shape.width < MIN_GENERATION_EXTENT
        || (volumetric && shape.depth < MIN_GENERATION_EXTENT)
    {
        return Err(Error::config(format!("generation shape {shape} below {MIN_GENERATION_EXTENT} per axis")));
    }
    let samples = (0..profile.samples)
        .map(|k| render_sample(profile, &mut rng.fork(k as u64), shape))
        .collect::<Result<Vec<_>>>()?;
    let (train, test) = match profile.role {
        CenterRole::TrainTest => (samples, Vec::new()),
        CenterRole::TestOnly => (Vec::new(), samples),
    };
    Ok(ClientDataset { center_id: profile.id.clone(), train, test, seed: rng.seed() })
}

fn render_sample(profile: &CenterProfile, rng: &mut Rng, shape: Shape) -> Result<Sample> {
    let dims = [shape.depth as f64, shape.height as f64, shape.width as f64];
    let volumetric = !shape.is_2d();
    let mut center = [0.0; 3];
    for (c, &d) in center.iter_mut().zip(&dims) {
        *c = (d - 1.0) * (0.4 + 0.2 * rng.uniform());
    }
    if !volumetric {
        center[0] = 0.0;
    }
    let max_radius = 0.4 * dims[1].min(dims[2]);
    let radius = (profile.radius_mean + profile.radius_std * rng.normal()).clamp(2.5, max_radius);
    let aspect = 0.75 + 0.5 * rng.uniform();
    let ry = radius * aspect.sqrt();
    let rx = radius / aspect.sqrt();
    let rz = if volumetric { (radius * dims[0] / dims[1]).max(1.5) } else { 1.0 };
    let mask = MaskVolume::from_fn(shape, |z, y, x| {
        let dz = if volumetric { (z as f64 - center[0]) / rz } else { 0.0 };
        let dy = (y as f64 - center[1]) / ry;
        let dx = (x as f64 - center[2]) / rx;
        dz * dz + dy * dy + dx * dx <= 1.0
    });

    let blurred = box_mean(&mask.voxels().iter().map(|&v| v as f64).collect::<Vec<_>>(), None, shape, 1);
    let theta = std::f64::consts::TAU * rng.uniform();
    let (dir_y, dir_x) = (theta.sin(), theta.cos());
    let phase = std::f64::consts::TAU * rng.uniform();
    let mut voxels = Vec::with_capacity(shape.len());
    for (idx, b) in blurred.iter().enumerate() {
        let mut v = profile.offset + profile.gain * b;
        if profile.bias > 0.0 {
            let (_, y, x) = shape.coords(idx);
            let u = 2.0 * y as f64 / (dims[1] - 1.0) - 1.0;
            let w = 2.0 * x as f64 / (dims[2] - 1.0) - 1.0;
            let ramp = dir_y * u + dir_x * w;
            let wave = 0.5 * (std::f64::consts::PI * (0.5 * u - 0.5 * w) + phase).sin();
            v *= (profile.bias * (ramp + wave)).exp();
        }
        if profile.noise > 0.0 {
            v += profile.noise * rng.normal();
        }
        voxels.push(v);
    }
    Ok((ImageVolume::new(shape, voxels)?, mask))
}

/// Box mean with half-width `radius` along every spatial axis (in-plane only
/// for 2D). Voxels outside the volume, or outside `valid` when given, are
/// excluded from each window.
pub(crate) fn box_mean(values: &[f64], valid: Option<&[bool]>, shape: Shape, radius: usize) -> Vec<f64> {
    let weight: Vec<f64> = match valid {
        Some(v) => v.iter().map(|&b| b as u8 as f64).collect(),
        None => vec![1.0; values.len()],
    };
    let mut sums: Vec<f64> = values.iter().zip(&weight).map(|(v, w)| v * w).collect();
    let mut counts = weight;
    let axes: &[usize] = if shape.is_2d() { &[1, 2] } else { &[0, 1, 2] };
    for &axis in axes {
        sums = box_sum_axis(&sums, shape, axis, radius);
        counts = box_sum_axis(&counts, shape, axis, radius);
    }
    sums.iter().zip(&counts).map(|(s, c)| if *c > 0.0 { s / c } else { 0.0 }).collect()
}

fn box_sum_axis(values: &[f64], shape: Shape, axis: usize, radius: usize) -> Vec<f64> {
    let extent = [shape.depth, shape.height, shape.width][axis];
    let stride = match axis {
        0 => shape.height * shape.width,
        1 => shape.width,
        _ => 1,
    };
    let mut out = vec![0.0; values.len()];
    let mut line = vec![0.0; extent + 1];
    for idx in 0..values.len() {
        let (z, y, x) = shape.coords(idx);
        let pos = [z, y, x][axis];
        if pos != 0 {
            continue;
        }
        // prefix sums along this line
        for i in 0..extent {
            line[i + 1] = line[i] + values[idx + i * stride];
        }
        for i in 0..extent {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius + 1).min(extent);
            out[idx + i * stride] = line[hi] - line[lo];
        }
    }
    out
}

/// Preprocessing applied to every sample before training or evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessSpec {
    pub target: Shape,
    /// Half-width of the smoothing window for the bias-correction analog;
    /// `None` disables it.
    pub bias_correction: Option<usize>,
    /// Random in-plane flips (training samples only).
    pub flip: bool,
}

impl PreprocessSpec {
    pub fn new(target: Shape) -> Self {
        Self { target, bias_correction: Some(6), flip: false }
    }
}

/// Outcome flags of [`preprocess`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PreprocessReport {
    pub flat_image: bool,
    pub flipped_y: bool,
    pub flipped_x: bool,
}

/// Center crop / zero pad to the target shape, optional bias-correction
/// analog, z-score normalization over the non-padded region, then optional
/// random flips drawn from `rng`.
pub fn preprocess(
    sample: &Sample,
    spec: &PreprocessSpec,
    rng: Option<&mut Rng>,
) -> Result<(Sample, PreprocessReport)> {
    let (image, mask) = sample;
    image.shape().expect_eq(&mask.shape())?;
    let target = spec.target;
    let src = image.shape();
    let (img_vox, valid) = crop_or_pad(image.voxels(), src, target, 0.0);
    let (mask_vox, _) = crop_or_pad(mask.voxels(), src, target, 0u8);
    let mut voxels = img_vox;
    if let Some(radius) = spec.bias_correction {
        voxels = bias_correct_masked(&voxels, &valid, target, radius);
    }
    let mut report = PreprocessReport::default();
    let n_valid = valid.iter().filter(|&&v| v).count().max(1) as f64;
    let mean = voxels.iter().zip(&valid).filter(|(_, &v)| v).map(|(x, _)| x).sum::<f64>() / n_valid;
    let var = voxels.iter().zip(&valid).filter(|(_, &v)| v).map(|(x, _)| (x - mean) * (x - mean)).sum::<f64>()
        / n_valid;
    let mut std = var.sqrt();
    if !(std > 1e-12) {
        warn!("flat image during normalization; using unit std");
        report.flat_image = true;
        std = 1.0;
    }
    for (x, &v) in voxels.iter_mut().zip(&valid) {
        *x = if v { (*x - mean) / std } else { 0.0 };
    }
    let mut out = (ImageVolume::new(target, voxels)?, MaskVolume::new(target, mask_vox)?);
    if let (true, Some(rng)) = (spec.flip, rng) {
        if rng.uniform() < 0.5 {
            out = flip(&out, 1);
            report.flipped_y = true;
        }
        if rng.uniform() < 0.5 {
            out = flip(&out, 2);
            report.flipped_x = true;
        }
    }
    Ok((out, report))
}

fn crop_or_pad<T: Copy>(src: &[T], from: Shape, to: Shape, fill: T) -> (Vec<T>, Vec<bool>) {
    let mut out = vec![fill; to.len()];
    let mut valid = vec![false; to.len()];
    // offset of the source origin inside the target (may be negative = crop)
    let off = |a: usize, b: usize| (b as isize - a as isize).div_euclid(2);
    let (oz, oy, ox) = (off(from.depth, to.depth), off(from.height, to.height), off(from.width, to.width));
    for z in 0..to.depth {
        let sz = z as isize - oz;
        if sz < 0 || sz as usize >= from.depth {
            continue;
        }
        for y in 0..to.height {
            let sy = y as isize - oy;
            if sy < 0 || sy as usize >= from.height {
                continue;
            }
            for x in 0..to.width {
                let sx = x as isize - ox;
                if sx < 0 || sx as usize >= from.width {
                    continue;
                }
                let t = to.index(z, y, x);
                out[t] = src[from.index(sz as usize, sy as usize, sx as usize)];
                valid[t] = true;
            }
        }
    }
    (out, valid)
}

/// Divides by a large-window local mean, then restores the global mean level.
pub fn bias_correct(image: &ImageVolume, radius: usize) -> ImageVolume {
    let valid = vec![true; image.shape().len()];
    let v = bias_correct_masked(image.voxels(), &valid, image.shape(), radius);
    ImageVolume::new(image.shape(), v).expect("bias correction keeps values finite")
}

fn bias_correct_masked(values: &[f64], valid: &[bool], shape: Shape, radius: usize) -> Vec<f64> {
    let smooth = box_mean(values, Some(valid), shape, radius);
    let n = valid.iter().filter(|&&v| v).count().max(1) as f64;
    let level = values.iter().zip(valid).filter(|(_, &v)| v).map(|(x, _)| x.abs()).sum::<f64>() / n;
    let floor = 1e-3 * level.max(1e-12);
    values
        .iter()
        .zip(&smooth)
        .zip(valid)
        .map(|((x, s), &v)| if v { level * x / s.abs().max(floor) } else { 0.0 })
        .collect()
}

/// Mirrors image and mask along `axis` (0 = depth, 1 = rows, 2 = columns).
pub fn flip(sample: &Sample, axis: usize) -> Sample {
    let (image, mask) = sample;
    let shape = image.shape();
    let src = |idx: usize| {
        let (z, y, x) = shape.coords(idx);
        match axis {
            0 => shape.index(shape.depth - 1 - z, y, x),
            1 => shape.index(z, shape.height - 1 - y, x),
            _ => shape.index(z, y, shape.width - 1 - x),
        }
    };
    let iv = (0..shape.len()).map(|i| image.voxels()[src(i)]).collect();
    let mv = (0..shape.len()).map(|i| mask.voxels()[src(i)]).collect();
    (ImageVolume::new(shape, iv).unwrap(), MaskVolume::new(shape, mv).unwrap())
}

pub const MAGIC: &[u8; 8] = b"CLBENCH1";

/// Serializes a dataset: magic, `key=value` header closed by `end`, raw
/// row-major payload (train samples then test samples, each as f64 LE image
/// followed by u8 mask), then the CRC32 of the payload as u32 LE.
pub fn encode_dataset(ds: &ClientDataset) -> Result<Vec<u8>> {
    let shape = ds.shape().ok_or_else(|| Error::structural("dataset has no samples"))?;
    if ds.train.iter().chain(&ds.test).any(|(i, m)| i.shape() != shape || m.shape() != shape) {
        return Err(Error::structural("dataset samples disagree on shape"));
    }
    let mut payload = Vec::with_capacity((ds.train.len() + ds.test.len()) * shape.len() * 9);
    for (image, mask) in ds.train.iter().chain(&ds.test) {
        for v in image.voxels() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        payload.extend_from_slice(mask.voxels());
    }
    let mut out = Vec::with_capacity(payload.len() + 256);
    out.extend_from_slice(MAGIC);
    write!(
        out,
        "center_id={}\nseed={}\ntrain_count={}\ntest_count={}\nshape={}x{}x{}\nimage_dtype=f64\nmask_dtype=u8\npayload_len={}\nend\n",
        ds.center_id,
        ds.seed,
        ds.train.len(),
        ds.test.len(),
        shape.depth,
        shape.height,
        shape.width,
        payload.len()
    )?;
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<ClientDataset> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(0, "missing CLBENCH1 magic"));
    }
    let mut pos = MAGIC.len();
    let mut fields = std::collections::BTreeMap::new();
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(pos as u64, "unterminated header"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::format(pos as u64, "header is not UTF-8"))?;
        let line_start = pos;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(line_start as u64, format!("malformed header line {line:?}")))?;
        fields.insert(k.to_string(), (v.to_string(), line_start));
    }
    let get = |k: &str| {
        fields.get(k).ok_or_else(|| Error::format(MAGIC.len() as u64, format!("header lacks {k}")))
    };
    let num = |k: &str| -> Result<u64> {
        let (v, at) = get(k)?;
        v.parse().map_err(|_| Error::format(*at as u64, format!("bad value for {k}: {v}")))
    };
    let center_id = get("center_id")?.0.clone();
    let seed = num("seed")?;
    let train_count = num("train_count")? as usize;
    let test_count = num("test_count")? as usize;
    let payload_len = num("payload_len")? as usize;
    for (k, want) in [("image_dtype", "f64"), ("mask_dtype", "u8")] {
        let (v, at) = get(k)?;
        if v != want {
            return Err(Error::format(*at as u64, format!("unsupported {k} {v}")));
        }
    }
    let (shape_str, shape_at) = get("shape")?;
    let dims: Vec<usize> = shape_str.split('x').filter_map(|d| d.parse().ok()).collect();
    if dims.len() != 3 {
        return Err(Error::format(*shape_at as u64, format!("bad shape {shape_str}")));
    }
    let shape = Shape::new(dims[0], dims[1], dims[2]).map_err(|e| Error::format(*shape_at as u64, e.to_string()))?;
    let per_sample = shape.len() * 9;
    if payload_len != per_sample * (train_count + test_count) {
        return Err(Error::format(pos as u64, "payload_len disagrees with counts and shape"));
    }
    if bytes.len() < pos + payload_len + 4 {
        return Err(Error::format(bytes.len() as u64, "truncated payload"));
    }
    if bytes.len() > pos + payload_len + 4 {
        return Err(Error::format((pos + payload_len + 4) as u64, "trailing bytes after checksum"));
    }
    let payload = &bytes[pos..pos + payload_len];
    let stored = u32::from_le_bytes(bytes[pos + payload_len..pos + payload_len + 4].try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(Error::format((pos + payload_len) as u64, "payload checksum mismatch"));
    }
    let mut samples = Vec::with_capacity(train_count + test_count);
    for chunk in payload.chunks_exact(per_sample) {
        let (img, msk) = chunk.split_at(shape.len() * 8);
        let iv = img.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let image = ImageVolume::new(shape, iv).map_err(|e| Error::format(pos as u64, e.to_string()))?;
        let mask = MaskVolume::new(shape, msk.to_vec()).map_err(|e| Error::format(pos as u64, e.to_string()))?;
        samples.push((image, mask));
    }
    let test = samples.split_off(train_count);
    Ok(ClientDataset { center_id, train: samples, test, seed })
}

pub fn save_dataset(path: &Path, ds: &ClientDataset) -> Result<u32> {
    let bytes = encode_dataset(ds)?;
    fs::write(path, &bytes)?;
    Ok(crc32fast::hash(&bytes))
}

/// CRC-32 of a file's bytes, as recorded by [`save_dataset`].
pub fn file_checksum(path: &Path) -> Result<u32> {
    Ok(crc32fast::hash(&fs::read(path)?))
}

pub fn load_dataset(path: &Path) -> Result<ClientDataset> {
    decode_dataset(&fs::read(path)?)
}

/// Full scenario description: profiles, generation shape and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub shape: Shape,
    pub profiles: Vec<CenterProfile>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self { seed: 0, shape: Shape::plane(32, 32), profiles: default_profiles() }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() {
            return Err(Error::config("scenario has no centers"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.profiles {
            p.validate()?;
            if !seen.insert(&p.id) {
                return Err(Error::config(format!("duplicate center id {}", p.id)));
            }
        }
        if !self.profiles.iter().any(CenterProfile::is_training) {
            return Err(Error::config("scenario has no training center"));
        }
        Ok(())
    }

    /// Generates every center; a pure function of these settings.
    pub fn generate(&self) -> Result<Vec<ClientDataset>> {
        self.validate()?;
        let root = Rng::new(self.seed, 0);
        self.profiles
            .iter()
            .enumerate()
            .map(|(i, p)| generate_center(p, &root.fork(1000 + i as u64), self.shape))
            .collect()
    }
}
