//! Synthetic pulsating-ellipse videos with analytically known ejection
//! fraction, cohort shift specifications, and the on-disk dataset format.
//!
//! The rendered ellipse keeps its aspect ratio while its radius oscillates
//! between a diastolic and a systolic value, so the fractional area change is
//! `1 − (r_sys / r_dia)²` regardless of shape, drift or pixel noise.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::files;
use crate::rng::{derive_seed, rng_from};

pub const DATASET_VERSION: u32 = 1;
pub const EF_MIN: f64 = 20.0;
pub const EF_MAX: f64 = 75.0;
const BACKGROUND: f64 = 0.15;
const CAVITY: f64 = 0.85;
const SUPERSAMPLE: usize = 4;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "frames.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub name: String,
    pub n_samples: usize,
    /// Diastolic radius range in pixels.
    pub base_radius_range: [f64; 2],
    pub ef_mean: f64,
    pub ef_std: f64,
    /// Cycles per sequence.
    pub heart_rate_range: [f64; 2],
    pub noise_std: f64,
    /// Maximum relative stretch of one axis (the other shrinks equally).
    pub aspect_jitter: f64,
    /// Maximum center displacement in pixels.
    pub drift_amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub frames: usize,
    pub frame_size: usize,
    pub cohorts: Vec<CohortSpec>,
}

fn cohort(
    name: &str,
    n_samples: usize,
    radius: [f64; 2],
    ef: (f64, f64),
    rate: [f64; 2],
    noise_std: f64,
) -> CohortSpec {
    CohortSpec {
        name: name.to_string(),
        n_samples,
        base_radius_range: radius,
        ef_mean: ef.0,
        ef_std: ef.1,
        heart_rate_range: rate,
        noise_std,
        aspect_jitter: 0.1,
        drift_amplitude: 0.6,
    }
}

pub const SOURCE_TRAIN: &str = "source_train";
pub const SOURCE_VAL: &str = "source_val";
pub const SOURCE_HOLDOUT: &str = "source_holdout";
/// The most strongly shifted target cohort.
pub const TARGET_PRESCHOOL: &str = "target_preschool";
pub const TARGET_SCHOOL: &str = "target_school";
pub const TARGET_ADOLESCENT: &str = "target_adolescent";

/// Source radius and heart-rate ranges and the three target shifts, which
/// shrink the heart, speed it up and add noise in increasing steps.
pub fn source_cohort(name: &str, n: usize) -> CohortSpec {
    cohort(name, n, [5.0, 6.5], (55.8, 12.4), [1.2, 2.0], 0.03)
}

/// Source statistics with radii and drift shrunk to fit 8-pixel frames.
pub fn small_frame_cohort(name: &str, n: usize) -> CohortSpec {
    CohortSpec {
        base_radius_range: [2.0, 2.8],
        drift_amplitude: 0.3,
        ..source_cohort(name, n)
    }
}

impl DatasetSpec {
    pub fn desk() -> Self {
        Self {
            frames: 16,
            frame_size: 16,
            cohorts: vec![
                source_cohort(SOURCE_TRAIN, 512),
                source_cohort(SOURCE_VAL, 128),
                source_cohort(SOURCE_HOLDOUT, 200),
                cohort(
                    TARGET_ADOLESCENT,
                    128,
                    [4.5, 6.0],
                    (61.0, 9.8),
                    [1.5, 2.4],
                    0.04,
                ),
                cohort(
                    TARGET_SCHOOL,
                    128,
                    [4.0, 5.4],
                    (62.0, 9.2),
                    [1.8, 2.8],
                    0.05,
                ),
                cohort(
                    TARGET_PRESCHOOL,
                    128,
                    [3.5, 4.8],
                    (59.6, 12.8),
                    [2.2, 3.2],
                    0.06,
                ),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.frame_size < 4 {
            return Err(Error::invalid(
                "need at least 2 frames of at least 4×4 pixels",
            ));
        }
        let mut names = std::collections::BTreeSet::new();
        for c in &self.cohorts {
            if !names.insert(c.name.as_str()) {
                return Err(Error::invalid(format!("duplicate cohort name {}", c.name)));
            }
            c.validate(self.frame_size)?;
        }
        Ok(())
    }
}

impl CohortSpec {
    pub fn validate(&self, frame_size: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("cohort {}: {msg}", self.name)));
        let [r0, r1] = self.base_radius_range;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad(format!("radius range {r0}..{r1} is invalid"));
        }
        let [h0, h1] = self.heart_rate_range;
        if !(h0 > 0.0 && h0 <= h1) {
            return bad(format!("heart-rate range {h0}..{h1} is invalid"));
        }
        if !(self.ef_std >= 0.0 && self.ef_mean.is_finite()) {
            return bad("ef distribution is invalid".into());
        }
        if !(self.noise_std >= 0.0 && self.drift_amplitude >= 0.0) {
            return bad("noise and drift must be non-negative".into());
        }
        if !(0.0..0.5).contains(&self.aspect_jitter) {
            return bad(format!(
                "aspect jitter {} outside [0, 0.5)",
                self.aspect_jitter
            ));
        }
        let extent = r1 * (1.0 + self.aspect_jitter) + self.drift_amplitude;
        if extent > frame_size as f64 / 2.0 {
            return bad(format!(
                "ellipse extent {extent:.2} px does not fit a {frame_size}-pixel frame"
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    /// `T × 1 × H × W` in `[0, 1]`.
    pub frames: Tensor,
    pub ef_true: f64,
    pub cohort: String,
    pub gen_seed: u64,
}

/// Fractional area change in percent for an ellipse of fixed aspect ratio.
pub fn ef_from_radii(r_dia: f64, r_sys: f64) -> f64 {
    (r_dia * r_dia - r_sys * r_sys) / (r_dia * r_dia) * 100.0
}

/// Systolic radius giving `ef` percent at diastolic radius `r_dia`.
pub fn systolic_radius(r_dia: f64, ef: f64) -> f64 {
    r_dia * (1.0 - ef / 100.0).sqrt()
}

/// Ellipse geometry in pixel coordinates (pixel centers at `i + 0.5`).
#[derive(Clone, Copy, Debug)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub ra: f64,
    pub rb: f64,
    pub angle: f64,
}

/// Per-pixel fraction of the ellipse interior, by `SUPERSAMPLE²` subsamples.
pub fn coverage(size: usize, e: &Ellipse) -> Vec<f64> {
    let (cos, sin) = (e.angle.cos(), e.angle.sin());
    let n = SUPERSAMPLE as f64;
    let mut out = vec![0.0; size * size];
    for py in 0..size {
        for px in 0..size {
            let mut inside = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / n - e.cx;
                    let y = py as f64 + (sy as f64 + 0.5) / n - e.cy;
                    let u = (x * cos + y * sin) / e.ra;
                    let v = (-x * sin + y * cos) / e.rb;
                    if u * u + v * v <= 1.0 {
                        inside += 1;
                    }
                }
            }
            out[py * size + px] = inside as f64 / (n * n);
        }
    }
    out
}

/// Truncated normal on `[EF_MIN, EF_MAX]` by rejection, clamped as a
/// fallback for extreme specs.
fn draw_ef(rng: &mut crate::rng::Rng, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        return mean.clamp(EF_MIN, EF_MAX);
    }
    let dist = Normal::new(mean, std).expect("validated std");
    for _ in 0..1000 {
        let v = dist.sample(rng);
        if (EF_MIN..=EF_MAX).contains(&v) {
            return v;
        }
    }
    mean.clamp(EF_MIN, EF_MAX)
}

/// Renders one sequence; all randomness comes from `seed`.
pub fn render_sequence(
    spec: &CohortSpec,
    frames: usize,
    frame_size: usize,
    id: String,
    seed: u64,
) -> Result<VideoSample> {
    spec.validate(frame_size)?;
    let mut rng = rng_from(seed);
    let ef_target = draw_ef(&mut rng, spec.ef_mean, spec.ef_std);
    let r_dia = rng.gen_range(spec.base_radius_range[0]..=spec.base_radius_range[1]);
    let r_sys = systolic_radius(r_dia, ef_target);
    let aspect = spec.aspect_jitter * rng.gen_range(-1.0..=1.0);
    let angle = rng.gen_range(0.0..PI);
    let rate = rng.gen_range(spec.heart_rate_range[0]..=spec.heart_rate_range[1]);
    let phase = rng.gen_range(0.0..1.0);
    // slow drift: under one cycle per sequence
    let drift_rate = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let drift_phase = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("validated std");

    let centre = frame_size as f64 / 2.0;
    let pixels = frame_size * frame_size;
    let mut data = Vec::with_capacity(frames * pixels);
    for k in 0..frames {
        let t = k as f64 / frames as f64;
        let squeeze = 0.5 * (1.0 + (2.0 * PI * (rate * t + phase)).cos());
        let r = r_sys + (r_dia - r_sys) * squeeze;
        let shift = |i: usize| {
            spec.drift_amplitude * (2.0 * PI * (drift_rate[i] * t + drift_phase[i])).sin()
        };
        let e = Ellipse {
            cx: centre + shift(0),
            cy: centre + shift(1),
            ra: r * (1.0 + aspect),
            rb: r * (1.0 - aspect),
            angle,
        };
        for frac in coverage(frame_size, &e) {
            let clean = BACKGROUND + (CAVITY - BACKGROUND) * frac;
            let eps = if spec.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            data.push((clean + eps).clamp(0.0, 1.0) as f32 as f64);
        }
    }
    Ok(VideoSample {
        id,
        frames: Tensor::new(&[frames, 1, frame_size, frame_size], data)?,
        ef_true: ef_from_radii(r_dia, r_sys),
        cohort: spec.name.clone(),
        gen_seed: seed,
    })
}

/// Renders every cohort in memory; sample `i` of cohort `c` uses the seed
/// derived from `(seed, c, i)`.
pub fn generate_samples(spec: &DatasetSpec, seed: u64) -> Result<Vec<VideoSample>> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = spec
        .cohorts
        .iter()
        .enumerate()
        .flat_map(|(c, cs)| (0..cs.n_samples).map(move |i| (c, i)))
        .collect();
    jobs.par_iter()
        .map(|&(c, i)| {
            let cs = &spec.cohorts[c];
            let id = format!("{}-{:05}", cs.name, i);
            render_sequence(
                cs,
                spec.frames,
                spec.frame_size,
                id,
                derive_seed(seed, c as u64, i as u64),
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub cohort: String,
    pub ef_true: f64,
    pub seed: u64,
    /// Float offset into the blob.
    pub offset: usize,
    pub len: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub frames: usize,
    pub frame_size: usize,
    pub cohorts: Vec<CohortSpec>,
    pub records: Vec<SampleRecord>,
}

/// Writes `manifest.json` and `frames.bin` into `out_dir`.
pub fn write_dataset(
    spec: &DatasetSpec,
    seed: u64,
    samples: &[VideoSample],
    out_dir: &Path,
) -> Result<DatasetManifest> {
    files::create_dir(out_dir)?;
    let mut blob = Vec::new();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let bytes = files::f32_bytes(s.frames.data());
        records.push(SampleRecord {
            id: s.id.clone(),
            cohort: s.cohort.clone(),
            ef_true: s.ef_true,
            seed: s.gen_seed,
            offset: blob.len() / 4,
            len: s.frames.len(),
            sha256: files::sha256_hex(&bytes),
        });
        blob.extend(bytes);
    }
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        seed,
        frames: spec.frames,
        frame_size: spec.frame_size,
        cohorts: spec.cohorts.clone(),
        records,
    };
    files::write_bytes(&out_dir.join(BLOB), &blob)?;
    files::write_json(&out_dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn generate_cohorts(spec: &DatasetSpec, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let samples = generate_samples(spec, seed)?;
    write_dataset(spec, seed, &samples, out_dir)
}

/// A dataset opened from disk; samples are decoded and verified on access.
#[derive(Debug)]
pub struct Dataset {
    dir: PathBuf,
    manifest: DatasetManifest,
    blob: Vec<u8>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = files::read_json(&dir.join(MANIFEST))?;
        if manifest.format_version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "dataset version {} is not supported (expected {DATASET_VERSION})",
                manifest.format_version
            )));
        }
        let blob = files::read_bytes(&dir.join(BLOB))?;
        let expected = manifest.frames * manifest.frame_size * manifest.frame_size;
        let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            if r.len != expected {
                return Err(Error::Format(format!(
                    "record {}: length {} does not match {expected}",
                    r.id, r.len
                )));
            }
            if (r.offset + r.len) * 4 > blob.len() {
                return Err(Error::Format(format!(
                    "record {}: offset past end of blob",
                    r.id
                )));
            }
            spans.push((r.offset, r.offset + r.len, &r.id));
        }
        spans.sort_unstable();
        if let Some(w) = spans.windows(2).find(|w| w[1].0 < w[0].1) {
            return Err(Error::Format(format!(
                "records {} and {} overlap",
                w[0].2, w[1].2
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            blob,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    pub fn sample(&self, index: usize) -> Result<VideoSample> {
        let r = self
            .manifest
            .records
            .get(index)
            .ok_or_else(|| Error::invalid(format!("sample index {index} out of range")))?;
        let bytes = &self.blob[r.offset * 4..(r.offset + r.len) * 4];
        if files::sha256_hex(bytes) != r.sha256 {
            return Err(Error::Format(format!("record {}: checksum mismatch", r.id)));
        }
        let data = files::read_f32s(&self.blob, r.offset, r.len)?;
        let m = &self.manifest;
        Ok(VideoSample {
            id: r.id.clone(),
            frames: Tensor::new(&[m.frames, 1, m.frame_size, m.frame_size], data)?,
            ef_true: r.ef_true,
            cohort: r.cohort.clone(),
            gen_seed: r.seed,
        })
    }

    /// All samples in manifest order.
    pub fn iter(&self) -> impl Iterator<Item = Result<VideoSample>> + '_ {
        (0..self.len()).map(move |i| self.sample(i))
    }

    /// All samples of one cohort, in manifest order.
    pub fn cohort(&self, name: &str) -> Result<Vec<VideoSample>> {
        if !self.manifest.cohorts.iter().any(|c| c.name == name) {
            return Err(Error::invalid(format!(
                "cohort {name} not in dataset {}",
                self.dir.display()
            )));
        }
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.cohort == name)
            .map(|(i, _)| self.sample(i))
            .collect()
    }
}
