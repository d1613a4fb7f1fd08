//! Seeded "organ-like" lesion images standing in for heterogeneous clients,
//! the FOSS sample file format, and dataset splitting.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Rng, Tensor};

pub const FOSS_MAGIC: &[u8; 4] = b"FOSS";
pub const FOSS_VERSION: u16 = 1;
pub const FOSS_HEADER_BYTES: usize = 14;

/// Boundary harmonics and their weights in the radial lesion outline.
const HARMONICS: [(f64, f64); 3] = [(2.0, 0.5), (3.0, 0.3), (5.0, 0.2)];
const OUTLINE_VERTICES: usize = 96;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("{n} samples are too few for non-empty train/val/test splits")]
    SplitTooSmall { n: usize },
    #[error("not a FOSS sample file")]
    BadMagic,
    #[error("sample file truncated: expected {expected} bytes, found {actual}")]
    TruncatedFile { expected: usize, actual: usize },
    #[error("unsupported FOSS version {0}")]
    VersionUnsupported(u16),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for SynthError {
    fn from(e: std::io::Error) -> Self {
        SynthError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganProfile {
    pub name: String,
    pub lesion_count_range: (u32, u32),
    /// Base lesion radius as a fraction of the image side.
    pub lesion_radius_range: (f64, f64),
    /// Relative amplitude of the radial boundary perturbation, in [0, 1).
    pub boundary_irregularity: f64,
    pub contrast: f64,
    /// Half-width of the uniform pixel noise.
    pub background_texture: f64,
    /// Lesions darker than the background instead of brighter.
    pub intensity_inversion: bool,
}

impl OrganProfile {
    /// One small, smooth, high-contrast lesion.
    pub fn breast_like() -> Self {
        OrganProfile {
            name: "breast_like".into(),
            lesion_count_range: (1, 1),
            lesion_radius_range: (0.10, 0.16),
            boundary_irregularity: 0.05,
            contrast: 0.7,
            background_texture: 0.05,
            intensity_inversion: false,
        }
    }

    /// One large, highly irregular lesion.
    pub fn brain_like() -> Self {
        OrganProfile {
            name: "brain_like".into(),
            lesion_count_range: (1, 1),
            lesion_radius_range: (0.22, 0.30),
            boundary_irregularity: 0.45,
            contrast: 0.45,
            background_texture: 0.08,
            intensity_inversion: false,
        }
    }

    /// One to three small dark lesions on a noisy background.
    pub fn liver_like() -> Self {
        OrganProfile {
            name: "liver_like".into(),
            lesion_count_range: (1, 3),
            lesion_radius_range: (0.07, 0.12),
            boundary_irregularity: 0.15,
            contrast: 0.25,
            background_texture: 0.15,
            intensity_inversion: true,
        }
    }

    /// Held out of training; used for the unseen-client experiment.
    pub fn lung_like() -> Self {
        OrganProfile {
            name: "lung_like".into(),
            lesion_count_range: (1, 2),
            lesion_radius_range: (0.13, 0.19),
            boundary_irregularity: 0.3,
            contrast: 0.55,
            background_texture: 0.08,
            intensity_inversion: true,
        }
    }

    pub fn by_name(name: &str) -> Result<Self, SynthError> {
        match name {
            "breast_like" => Ok(Self::breast_like()),
            "brain_like" => Ok(Self::brain_like()),
            "liver_like" => Ok(Self::liver_like()),
            "lung_like" => Ok(Self::lung_like()),
            other => Err(SynthError::InvalidProfile(format!("unknown profile {other}"))),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let (cmin, cmax) = self.lesion_count_range;
        let (rmin, rmax) = self.lesion_radius_range;
        let ok = cmin >= 1
            && cmin <= cmax
            && rmin > 0.0
            && rmin <= rmax
            && rmax < 0.5
            && (0.0..1.0).contains(&self.boundary_irregularity)
            && self.contrast > 0.0
            && self.contrast <= 1.0
            && self.background_texture >= 0.0
            && self.background_texture.is_finite();
        if ok {
            Ok(())
        } else {
            Err(SynthError::InvalidProfile(format!("{self:?}")))
        }
    }

    /// Background and lesion intensity levels, centred on 0.5.
    fn levels(&self) -> (f64, f64) {
        let low = (1.0 - self.contrast) / 2.0;
        let high = (1.0 + self.contrast) / 2.0;
        if self.intensity_inversion {
            (high, low)
        } else {
            (low, high)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, H, W]`, values in [0, 1] and exactly representable as f32.
    pub image: Tensor,
    /// `[H, W]` of 0/1.
    pub mask: Tensor,
    pub sample_id: u64,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.mask.shape()[0], self.mask.shape()[1])
    }
}

/// Vertices of one lesion outline in pixel coordinates.
fn lesion_outline(rng: &mut Rng, profile: &OrganProfile, size: usize) -> Vec<(f64, f64)> {
    let s = size as f64;
    let cx = rng.uniform(0.2 * s, 0.8 * s);
    let cy = rng.uniform(0.2 * s, 0.8 * s);
    let (rmin, rmax) = profile.lesion_radius_range;
    let r0 = rng.uniform(rmin, rmax) * s;
    let phases: Vec<f64> = HARMONICS.iter().map(|_| rng.uniform(0.0, 2.0 * PI)).collect();
    (0..OUTLINE_VERTICES)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / OUTLINE_VERTICES as f64;
            let wobble: f64 = HARMONICS
                .iter()
                .zip(&phases)
                .map(|(&(k, w), &p)| w * (k * theta + p).sin())
                .sum();
            let r = r0 * (1.0 + profile.boundary_irregularity * wobble);
            (cx + r * theta.cos(), cy + r * theta.sin())
        })
        .collect()
}

/// Even-odd rule for the point `(x, y)`.
fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

fn generate_sample(profile: &OrganProfile, size: usize, seed: u64, index: u64) -> Sample {
    let mut rng = Rng::derive(seed, index);
    let mut mask = vec![0.0; size * size];
    // redraw until the union is non-empty; tiny outlines can miss every
    // pixel centre
    while mask.iter().all(|&m| m == 0.0) {
        let (cmin, cmax) = profile.lesion_count_range;
        let count = cmin + rng.below((cmax - cmin + 1) as usize) as u32;
        for _ in 0..count {
            let poly = lesion_outline(&mut rng, profile, size);
            for (p, m) in mask.iter_mut().enumerate() {
                let (y, x) = ((p / size) as f64 + 0.5, (p % size) as f64 + 0.5);
                if inside(&poly, x, y) {
                    *m = 1.0;
                }
            }
        }
    }
    let (background, lesion) = profile.levels();
    let t = profile.background_texture;
    let image: Vec<f64> = mask
        .iter()
        .map(|&m| {
            let base = if m == 1.0 { lesion } else { background };
            let v = (base + rng.uniform(-t, t)).clamp(0.0, 1.0);
            v as f32 as f64
        })
        .collect();
    Sample {
        image: Tensor::new(vec![1, size, size], image).expect("finite pixels"),
        mask: Tensor::new(vec![size, size], mask).expect("binary mask"),
        sample_id: index,
    }
}

/// `n` samples of `size×size` pixels. Sample `i` depends only on
/// `(profile, size, seed, i)`.
pub fn generate_client_dataset(profile: &OrganProfile, n: usize, size: usize, seed: u64) -> Result<Vec<Sample>, SynthError> {
    profile.validate()?;
    if n == 0 || size < 4 {
        return Err(SynthError::InvalidArgument(format!("n={n}, size={size}")));
    }
    Ok((0..n as u64)
        .into_par_iter()
        .map(|i| generate_sample(profile, size, seed, i))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Split sizes for `n` samples: `test = round(test_frac·n)`,
/// `val = round(val_frac·(n − test))`, the rest train.
pub fn split_counts(n: usize, test_frac: f64, val_frac: f64) -> Result<(usize, usize, usize), SynthError> {
    if !(0.0..1.0).contains(&test_frac) || !(0.0..1.0).contains(&val_frac) {
        return Err(SynthError::InvalidArgument(format!(
            "fractions {test_frac}, {val_frac} outside [0, 1)"
        )));
    }
    let test = (test_frac * n as f64).round() as usize;
    let val = (val_frac * (n - test) as f64).round() as usize;
    let train = n - test - val;
    if test == 0 || val == 0 || train == 0 {
        return Err(SynthError::SplitTooSmall { n });
    }
    Ok((train, val, test))
}

/// Seeded shuffle, then test, val and train slices in that order.
pub fn split_dataset(samples: Vec<Sample>, test_frac: f64, val_frac: f64, seed: u64) -> Result<Splits, SynthError> {
    let (_, val, test) = split_counts(samples.len(), test_frac, val_frac)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<Sample> { idx.iter().map(|&i| slots[i].take().expect("each index once")).collect() };
    let test_set = take(&order[..test]);
    let val_set = take(&order[test..test + val]);
    let train_set = take(&order[test + val..]);
    Ok(Splits {
        train: train_set,
        val: val_set,
        test: test_set,
    })
}

pub fn encode_sample(sample: &Sample) -> Vec<u8> {
    let (h, w) = sample.size();
    let mut out = Vec::with_capacity(FOSS_HEADER_BYTES + 5 * h * w);
    out.extend_from_slice(FOSS_MAGIC);
    out.extend_from_slice(&FOSS_VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in sample.image.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend(sample.mask.data().iter().map(|&m| m as u8));
    out
}

pub fn decode_sample(bytes: &[u8], sample_id: u64) -> Result<Sample, SynthError> {
    if bytes.len() < FOSS_HEADER_BYTES {
        if !FOSS_MAGIC.starts_with(&bytes[..bytes.len().min(4)]) {
            return Err(SynthError::BadMagic);
        }
        return Err(SynthError::TruncatedFile {
            expected: FOSS_HEADER_BYTES,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != FOSS_MAGIC {
        return Err(SynthError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FOSS_VERSION {
        return Err(SynthError::VersionUnsupported(version));
    }
    let h = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    if h == 0 || w == 0 {
        return Err(SynthError::InvalidArgument(format!("zero extent {h}×{w}")));
    }
    let expected = FOSS_HEADER_BYTES + 5 * h * w;
    if bytes.len() != expected {
        return Err(SynthError::TruncatedFile {
            expected,
            actual: bytes.len(),
        });
    }
    let pixels = &bytes[FOSS_HEADER_BYTES..FOSS_HEADER_BYTES + 4 * h * w];
    let image: Vec<f64> = pixels
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if image.iter().any(|v| !v.is_finite()) {
        return Err(SynthError::InvalidArgument("non-finite pixel".into()));
    }
    let mask_bytes = &bytes[FOSS_HEADER_BYTES + 4 * h * w..];
    if let Some(&b) = mask_bytes.iter().find(|&&b| b > 1) {
        return Err(SynthError::InvalidArgument(format!("mask byte {b}")));
    }
    let mask = mask_bytes.iter().map(|&b| b as f64).collect();
    Ok(Sample {
        image: Tensor::new(vec![1, h, w], image).map_err(|e| SynthError::InvalidArgument(e.to_string()))?,
        mask: Tensor::new(vec![h, w], mask).map_err(|e| SynthError::InvalidArgument(e.to_string()))?,
        sample_id,
    })
}

pub fn write_sample(path: &Path, sample: &Sample) -> Result<(), SynthError> {
    Ok(fs::write(path, encode_sample(sample))?)
}

pub fn read_sample(path: &Path, sample_id: u64) -> Result<Sample, SynthError> {
    decode_sample(&fs::read(path)?, sample_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub sample_id: u64,
    /// Relative to the manifest's directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u16,
    pub profile: OrganProfile,
    pub seed: u64,
    pub image_size: usize,
    pub train: Vec<SplitEntry>,
    pub val: Vec<SplitEntry>,
    pub test: Vec<SplitEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every sample under `dir/<split>/` and a JSON manifest at
/// `dir/manifest.json`.
pub fn write_dataset(
    dir: &Path,
    profile: &OrganProfile,
    seed: u64,
    splits: &Splits,
) -> Result<DatasetManifest, SynthError> {
    let size = splits
        .train
        .first()
        .map(|s| s.size().0)
        .ok_or(SynthError::SplitTooSmall { n: 0 })?;
    let write_split = |name: &str, samples: &[Sample]| -> Result<Vec<SplitEntry>, SynthError> {
        fs::create_dir_all(dir.join(name))?;
        samples
            .iter()
            .map(|s| {
                let rel = format!("{name}/{:06}.foss", s.sample_id);
                write_sample(&dir.join(&rel), s)?;
                Ok(SplitEntry {
                    sample_id: s.sample_id,
                    path: rel,
                })
            })
            .collect()
    };
    let manifest = DatasetManifest {
        format_version: FOSS_VERSION,
        profile: profile.clone(),
        seed,
        image_size: size,
        train: write_split("train", &splits.train)?,
        val: write_split("val", &splits.val)?,
        test: write_split("test", &splits.test)?,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| SynthError::Io(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

/// Reads a manifest and every sample it lists.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Splits), SynthError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| SynthError::Io(e.to_string()))?;
    let load = |entries: &[SplitEntry]| -> Result<Vec<Sample>, SynthError> {
        entries
            .iter()
            .map(|e| read_sample(&PathBuf::from(dir).join(&e.path), e.sample_id))
            .collect()
    };
    let splits = Splits {
        train: load(&manifest.train)?,
        val: load(&manifest.val)?,
        test: load(&manifest.test)?,
    };
    Ok((manifest, splits))
}

/// Images `[B, 1, H, W]` and masks `[B, 1, H, W]` of the given samples.
pub fn stack_batch(samples: &[&Sample]) -> (Tensor, Tensor) {
    let (h, w) = samples[0].size();
    let mut images = Vec::with_capacity(samples.len() * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    let shape = vec![samples.len(), 1, h, w];
    (
        Tensor::new(shape.clone(), images).expect("pixels are finite"),
        Tensor::new(shape, masks).expect("mask bits are finite"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_counts(100, 0.1, 0.1).unwrap(), (81, 9, 10));
        assert_eq!(split_counts(200, 0.1, 0.1).unwrap(), (162, 18, 20));
        assert!(matches!(split_counts(4, 0.1, 0.1), Err(SynthError::SplitTooSmall { n: 4 })));
    }

    #[test]
    fn default_profiles_are_valid() {
        for name in ["breast_like", "brain_like", "liver_like", "lung_like"] {
            OrganProfile::by_name(name).unwrap().validate().unwrap();
        }
        assert!(OrganProfile::by_name("kidney_like").is_err());
    }

    #[test]
    fn polygon_rule_on_a_square() {
        let sq = [(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)];
        assert!(inside(&sq, 1.0, 1.0));
        assert!(!inside(&sq, 3.0, 1.0));
    }
}
