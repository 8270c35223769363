//! Stochastic views of a video for test-time adaptation.
//!
//! Every transform acts on a `T × 1 × H × W` sequence with values in
//! `[0, 1]` and applies the same spatial change to every frame, so the
//! motion pattern survives. Random fields (speckle, displacement grids) are
//! drawn from the spec's own seed, which makes a spec a complete description
//! of its output.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::{child_rng, rng_from, Rng};

pub const GAMMA_RANGE: [f64; 2] = [0.8, 1.15];
pub const SPECKLE_RANGE: [f64; 2] = [0.02, 0.08];
pub const SHADOW_HALF_ANGLE_RANGE: [f64; 2] = [5.0, 15.0];
pub const SHADOW_ATTENUATION_RANGE: [f64; 2] = [0.75, 0.9];
/// Wedge direction, degrees from straight down.
pub const SHADOW_AZIMUTH_RANGE: [f64; 2] = [-30.0, 30.0];
pub const ELASTIC_MAX_AMPLITUDE: f64 = 1.0;
pub const ELASTIC_GRID: usize = 4;
pub const ROTATE_MAX_DEGREES: f64 = 10.0;
pub const BLUR_RANGE: [f64; 2] = [0.3, 0.5];
pub const GRID_DISTORT_MAX_AMPLITUDE: f64 = 0.75;
pub const GRID_DISTORT_STEPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Category {
    Geometric,
    Intensity,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugKind {
    Hflip,
    Rotate {
        degrees: f64,
    },
    Elastic {
        amplitude: f64,
    },
    GridDistort {
        amplitude: f64,
    },
    Gamma {
        gamma: f64,
    },
    Shadow {
        half_angle_deg: f64,
        azimuth_deg: f64,
        attenuation: f64,
    },
    GaussianBlur {
        sigma: f64,
    },
    /// `σ = 0` is accepted as the identity; sampling draws from
    /// [`SPECKLE_RANGE`].
    Speckle {
        sigma: f64,
    },
}

impl AugKind {
    pub fn category(&self) -> Category {
        match self {
            AugKind::Hflip
            | AugKind::Rotate { .. }
            | AugKind::Elastic { .. }
            | AugKind::GridDistort { .. } => Category::Geometric,
            AugKind::Gamma { .. } | AugKind::Shadow { .. } | AugKind::GaussianBlur { .. } => {
                Category::Intensity
            }
            AugKind::Speckle { .. } => Category::Noise,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AugKind::Hflip => "hflip",
            AugKind::Rotate { .. } => "rotate",
            AugKind::Elastic { .. } => "elastic",
            AugKind::GridDistort { .. } => "grid_distort",
            AugKind::Gamma { .. } => "gamma",
            AugKind::Shadow { .. } => "shadow",
            AugKind::GaussianBlur { .. } => "gaussian_blur",
            AugKind::Speckle { .. } => "speckle",
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn within(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} outside [{lo}, {hi}]")))
            }
        }
        match *self {
            AugKind::Hflip => Ok(()),
            AugKind::Rotate { degrees } => within(
                "rotate degrees",
                degrees,
                -ROTATE_MAX_DEGREES,
                ROTATE_MAX_DEGREES,
            ),
            AugKind::Elastic { amplitude } => {
                within("elastic amplitude", amplitude, 0.0, ELASTIC_MAX_AMPLITUDE)
            }
            AugKind::GridDistort { amplitude } => within(
                "grid_distort amplitude",
                amplitude,
                0.0,
                GRID_DISTORT_MAX_AMPLITUDE,
            ),
            AugKind::Gamma { gamma } => within("gamma", gamma, GAMMA_RANGE[0], GAMMA_RANGE[1]),
            AugKind::Shadow {
                half_angle_deg,
                azimuth_deg,
                attenuation,
            } => {
                within(
                    "shadow half-angle",
                    half_angle_deg,
                    SHADOW_HALF_ANGLE_RANGE[0],
                    SHADOW_HALF_ANGLE_RANGE[1],
                )?;
                within(
                    "shadow azimuth",
                    azimuth_deg,
                    SHADOW_AZIMUTH_RANGE[0],
                    SHADOW_AZIMUTH_RANGE[1],
                )?;
                within(
                    "shadow attenuation",
                    attenuation,
                    SHADOW_ATTENUATION_RANGE[0],
                    SHADOW_ATTENUATION_RANGE[1],
                )
            }
            AugKind::GaussianBlur { sigma } => {
                within("blur sigma", sigma, BLUR_RANGE[0], BLUR_RANGE[1])
            }
            AugKind::Speckle { sigma } => within("speckle sigma", sigma, 0.0, SPECKLE_RANGE[1]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugSpec {
    #[serde(flatten)]
    pub kind: AugKind,
    /// Seeds the random fields of speckle, elastic and grid distortion.
    pub seed: u64,
}

impl AugSpec {
    pub fn new(kind: AugKind, seed: u64) -> Self {
        Self { kind, seed }
    }
}

struct Frames {
    h: usize,
    w: usize,
}

fn frames_of(x: &Tensor) -> Result<Frames> {
    match *x.shape() {
        [_, 1, h, w] => {
            if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("augmentation input must lie in [0, 1]"));
            }
            Ok(Frames { h, w })
        }
        _ => Err(Error::Shape {
            op: "augment",
            lhs: x.shape().to_vec(),
            rhs: vec![0, 1, 0, 0],
        }),
    }
}

/// Applies one transform to every frame of `x`.
pub fn apply(spec: &AugSpec, x: &Tensor) -> Result<Tensor> {
    spec.kind.validate()?;
    let dims = frames_of(x)?;
    let mut out = match spec.kind {
        AugKind::Hflip => warp(x, &dims, |r, c| (r, (dims.w - 1) as f64 - c)),
        AugKind::Rotate { degrees } => {
            let (s, co) = (degrees * PI / 180.0).sin_cos();
            let cy = (dims.h - 1) as f64 / 2.0;
            let cx = (dims.w - 1) as f64 / 2.0;
            // inverse rotation maps output pixels to source positions
            warp(x, &dims, |r, c| {
                let (dy, dx) = (r - cy, c - cx);
                (cy + co * dy - s * dx, cx + s * dy + co * dx)
            })
        }
        AugKind::Elastic { amplitude } => {
            let field = DisplacementGrid::random(spec.seed, amplitude);
            warp(x, &dims, |r, c| {
                let (dy, dx) = field.at(
                    r / (dims.h - 1).max(1) as f64,
                    c / (dims.w - 1).max(1) as f64,
                );
                (r + dy, c + dx)
            })
        }
        AugKind::GridDistort { amplitude } => {
            let rows = StepMap::random(spec.seed, 0, amplitude);
            let cols = StepMap::random(spec.seed, 1, amplitude);
            warp(x, &dims, |r, c| {
                (
                    rows.map(r, (dims.h - 1) as f64),
                    cols.map(c, (dims.w - 1) as f64),
                )
            })
        }
        AugKind::Gamma { gamma } => x.data().iter().map(|v| v.powf(gamma)).collect(),
        AugKind::Shadow {
            half_angle_deg,
            azimuth_deg,
            attenuation,
        } => shadow(x, &dims, half_angle_deg, azimuth_deg, attenuation),
        AugKind::GaussianBlur { sigma } => blur(x, &dims, sigma),
        AugKind::Speckle { sigma } => {
            let mut rng = rng_from(spec.seed);
            let noise: Vec<f64> = (0..dims.h * dims.w)
                .map(|_| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    1.0 + sigma * n
                })
                .collect();
            x.data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * noise[i % noise.len()])
                .collect()
        }
    };
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(x.shape(), out)
}

/// Bilinear resampling with edge clamping; `source(row, col)` gives the
/// position read for each output pixel.
fn warp(x: &Tensor, d: &Frames, source: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f64> {
    let plane = d.h * d.w;
    let taps: Vec<[(usize, f64); 4]> = (0..plane)
        .map(|p| {
            let (sr, sc) = source((p / d.w) as f64, (p % d.w) as f64);
            let sr = sr.clamp(0.0, (d.h - 1) as f64);
            let sc = sc.clamp(0.0, (d.w - 1) as f64);
            let (r0, c0) = (sr.floor() as usize, sc.floor() as usize);
            let (r1, c1) = ((r0 + 1).min(d.h - 1), (c0 + 1).min(d.w - 1));
            let (fr, fc) = (sr - r0 as f64, sc - c0 as f64);
            [
                (r0 * d.w + c0, (1.0 - fr) * (1.0 - fc)),
                (r0 * d.w + c1, (1.0 - fr) * fc),
                (r1 * d.w + c0, fr * (1.0 - fc)),
                (r1 * d.w + c1, fr * fc),
            ]
        })
        .collect();
    let mut out = Vec::with_capacity(x.len());
    for frame in x.data().chunks_exact(plane) {
        out.extend(
            taps.iter()
                .map(|tap| tap.iter().map(|&(i, w)| w * frame[i]).sum::<f64>()),
        );
    }
    out
}

/// Per-pixel displacement interpolated bilinearly from a coarse grid of
/// uniform random offsets.
struct DisplacementGrid {
    dy: [[f64; ELASTIC_GRID]; ELASTIC_GRID],
    dx: [[f64; ELASTIC_GRID]; ELASTIC_GRID],
}

impl DisplacementGrid {
    fn random(seed: u64, amplitude: f64) -> Self {
        let mut rng = rng_from(seed);
        let draw = |rng: &mut Rng| {
            let mut g = [[0.0; ELASTIC_GRID]; ELASTIC_GRID];
            for v in g.iter_mut().flatten() {
                *v = amplitude * rng.gen_range(-1.0..=1.0);
            }
            g
        };
        let dy = draw(&mut rng);
        let dx = draw(&mut rng);
        Self { dy, dx }
    }

    /// `u, v` are normalized coordinates in `[0, 1]`.
    fn at(&self, u: f64, v: f64) -> (f64, f64) {
        let last = (ELASTIC_GRID - 1) as f64;
        let (gu, gv) = (u * last, v * last);
        let (i0, j0) = (
            (gu.floor() as usize).min(ELASTIC_GRID - 2),
            (gv.floor() as usize).min(ELASTIC_GRID - 2),
        );
        let (fu, fv) = (gu - i0 as f64, gv - j0 as f64);
        let lerp = |g: &[[f64; ELASTIC_GRID]; ELASTIC_GRID]| {
            (1.0 - fu) * ((1.0 - fv) * g[i0][j0] + fv * g[i0][j0 + 1])
                + fu * ((1.0 - fv) * g[i0 + 1][j0] + fv * g[i0 + 1][j0 + 1])
        };
        (lerp(&self.dy), lerp(&self.dx))
    }
}

/// Piecewise-linear monotone remapping of one axis: interior grid lines
/// move by up to `amplitude` pixels, the borders stay fixed.
struct StepMap {
    offsets: [f64; GRID_DISTORT_STEPS + 1],
}

impl StepMap {
    fn random(seed: u64, axis: u64, amplitude: f64) -> Self {
        let mut rng = child_rng(seed, 0x6772_6964, axis);
        let mut offsets = [0.0; GRID_DISTORT_STEPS + 1];
        for v in &mut offsets[1..GRID_DISTORT_STEPS] {
            *v = amplitude * rng.gen_range(-1.0..=1.0);
        }
        Self { offsets }
    }

    fn map(&self, p: f64, extent: f64) -> f64 {
        if extent <= 0.0 {
            return p;
        }
        let step = extent / GRID_DISTORT_STEPS as f64;
        let k = ((p / step).floor() as usize).min(GRID_DISTORT_STEPS - 1);
        let f = p / step - k as f64;
        // keep knots ordered so the map stays monotone
        let knot = |i: usize| i as f64 * step + self.offsets[i].clamp(-0.45 * step, 0.45 * step);
        knot(k) + f * (knot(k + 1) - knot(k))
    }
}

fn shadow(
    x: &Tensor,
    d: &Frames,
    half_angle_deg: f64,
    azimuth_deg: f64,
    attenuation: f64,
) -> Vec<f64> {
    let apex = ((d.w - 1) as f64 / 2.0, -0.5);
    let half = half_angle_deg * PI / 180.0;
    let azimuth = azimuth_deg * PI / 180.0;
    let gain: Vec<f64> = (0..d.h * d.w)
        .map(|p| {
            let (r, c) = ((p / d.w) as f64, (p % d.w) as f64);
            // angle from straight down, positive toward larger columns
            let angle = (c - apex.0).atan2(r - apex.1);
            if (angle - azimuth).abs() <= half {
                attenuation
            } else {
                1.0
            }
        })
        .collect();
    x.data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * gain[i % gain.len()])
        .collect()
}

fn blur(x: &Tensor, d: &Frames, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let plane = d.h * d.w;
    let mut out = Vec::with_capacity(x.len());
    let mut tmp = vec![0.0; plane];
    for frame in x.data().chunks_exact(plane) {
        for r in 0..d.h {
            for c in 0..d.w {
                tmp[r * d.w + c] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * frame[r * d.w + clamp(c as isize + k as isize - radius, d.w)])
                    .sum();
            }
        }
        for r in 0..d.h {
            for c in 0..d.w {
                out.push(
                    kernel
                        .iter()
                        .enumerate()
                        .map(|(k, w)| {
                            w * tmp[clamp(r as isize + k as isize - radius, d.h) * d.w + c]
                        })
                        .sum(),
                );
            }
        }
    }
    out
}

/// An ordered list of transforms: geometric first, then intensity, then
/// noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugChain {
    specs: Vec<AugSpec>,
}

impl AugChain {
    pub fn new(specs: Vec<AugSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::invalid(
                "an augmentation chain needs at least one transform",
            ));
        }
        if specs
            .windows(2)
            .any(|w| w[0].kind.category() > w[1].kind.category())
        {
            return Err(Error::invalid(
                "chain order must be geometric, intensity, noise",
            ));
        }
        for s in &specs {
            s.kind.validate()?;
        }
        Ok(Self { specs })
    }

    /// A chain whose output equals its input.
    pub fn identity() -> Self {
        Self {
            specs: vec![AugSpec::new(AugKind::Gamma { gamma: 1.0 }, 0)],
        }
    }

    pub fn specs(&self) -> &[AugSpec] {
        &self.specs
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.clone();
        for s in &self.specs {
            out = apply(s, &out)?;
        }
        Ok(out)
    }

    /// One kind drawn per category; each category is included with
    /// probability one half, and if none is, one is chosen uniformly.
    pub fn sample(rng: &mut Rng) -> Self {
        let mut include: Vec<bool> = (0..3).map(|_| rng.gen_bool(0.5)).collect();
        if !include.iter().any(|&b| b) {
            include[rng.gen_range(0..3)] = true;
        }
        let mut specs = Vec::new();
        for (category, keep) in [Category::Geometric, Category::Intensity, Category::Noise]
            .into_iter()
            .zip(include)
        {
            if keep {
                let kind = sample_kind(category, rng);
                specs.push(AugSpec::new(kind, rng.gen()));
            }
        }
        Self { specs }
    }
}

fn sample_kind(category: Category, rng: &mut Rng) -> AugKind {
    let pick = match category {
        Category::Geometric => rng.gen_range(0..4),
        Category::Intensity => rng.gen_range(0..3),
        Category::Noise => 0,
    };
    let mut u = |range: [f64; 2]| rng.gen_range(range[0]..=range[1]);
    match category {
        Category::Geometric => match pick {
            0 => AugKind::Hflip,
            1 => AugKind::Rotate {
                degrees: u([-ROTATE_MAX_DEGREES, ROTATE_MAX_DEGREES]),
            },
            2 => AugKind::Elastic {
                amplitude: u([0.0, ELASTIC_MAX_AMPLITUDE]),
            },
            _ => AugKind::GridDistort {
                amplitude: u([0.0, GRID_DISTORT_MAX_AMPLITUDE]),
            },
        },
        Category::Intensity => match pick {
            0 => AugKind::Gamma {
                gamma: u(GAMMA_RANGE),
            },
            1 => AugKind::Shadow {
                half_angle_deg: u(SHADOW_HALF_ANGLE_RANGE),
                azimuth_deg: u(SHADOW_AZIMUTH_RANGE),
                attenuation: u(SHADOW_ATTENUATION_RANGE),
            },
            _ => AugKind::GaussianBlur {
                sigma: u(BLUR_RANGE),
            },
        },
        Category::Noise => AugKind::Speckle {
            sigma: u(SPECKLE_RANGE),
        },
    }
}

/// `k` independent chains; chain `i` draws from its own sub-seed of `seed`.
pub fn sample_chains(seed: u64, k: usize) -> Result<Vec<AugChain>> {
    if k < 2 {
        return Err(Error::invalid(format!(
            "K = {k}: at least two views are needed"
        )));
    }
    Ok((0..k)
        .map(|i| AugChain::sample(&mut child_rng(seed, 0x6175_6763, i as u64)))
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn video(seed: u64) -> Tensor {
        let mut rng = rng_from(seed);
        let data = (0..4 * 16 * 16).map(|_| rng.gen_range(0.0..=1.0)).collect();
        Tensor::new(&[4, 1, 16, 16], data).unwrap()
    }

    fn ramp() -> Tensor {
        let data = (0..2 * 8 * 8)
            .map(|i| ((i % 64) % 8) as f64 / 7.0)
            .collect();
        Tensor::new(&[2, 1, 8, 8], data).unwrap()
    }

    #[test]
    fn gamma_one_and_zero_speckle_are_identities() {
        let x = video(1);
        let g = apply(&AugSpec::new(AugKind::Gamma { gamma: 1.0 }, 3), &x).unwrap();
        assert_eq!(g, x);
        let s = apply(&AugSpec::new(AugKind::Speckle { sigma: 0.0 }, 3), &x).unwrap();
        assert_eq!(s, x);
    }

    #[test]
    fn double_flip_is_identity() {
        let x = video(2);
        let f = AugSpec::new(AugKind::Hflip, 0);
        let once = apply(&f, &x).unwrap();
        assert_ne!(once, x);
        assert_eq!(apply(&f, &once).unwrap(), x);
    }

    #[test]
    fn flip_mirrors_columns() {
        let y = apply(&AugSpec::new(AugKind::Hflip, 0), &ramp()).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[7], 0.0);
    }

    #[test]
    fn zero_rotation_and_zero_displacement_are_identities() {
        let x = video(3);
        for kind in [
            AugKind::Rotate { degrees: 0.0 },
            AugKind::Elastic { amplitude: 0.0 },
            AugKind::GridDistort { amplitude: 0.0 },
        ] {
            let y = apply(&AugSpec::new(kind.clone(), 9), &x).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-12, "{}", kind.name());
            }
        }
    }

    #[test]
    fn blur_preserves_constant_frames() {
        let x = Tensor::full(&[2, 1, 8, 8], 0.4);
        let y = apply(&AugSpec::new(AugKind::GaussianBlur { sigma: 0.5 }, 0), &x).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn shadow_darkens_a_wedge_below_the_apex() {
        let x = Tensor::full(&[1, 1, 16, 16], 1.0);
        let kind = AugKind::Shadow {
            half_angle_deg: 10.0,
            azimuth_deg: 0.0,
            attenuation: 0.8,
        };
        let y = apply(&AugSpec::new(kind, 0), &x).unwrap();
        // the column under the apex is inside, the corners are outside
        assert_eq!(y.data()[15 * 16 + 7], 0.8);
        assert_eq!(y.data()[15 * 16], 1.0);
        assert_eq!(y.data()[15], 1.0);
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        let x = video(4);
        for kind in [
            AugKind::Gamma { gamma: 2.0 },
            AugKind::Speckle { sigma: 0.3 },
            AugKind::Rotate { degrees: 11.0 },
            AugKind::GaussianBlur { sigma: 0.2 },
            AugKind::Elastic { amplitude: 2.5 },
            AugKind::GridDistort {
                amplitude: f64::NAN,
            },
            AugKind::Shadow {
                half_angle_deg: 30.0,
                azimuth_deg: 0.0,
                attenuation: 0.5,
            },
        ] {
            assert!(apply(&AugSpec::new(kind, 0), &x).is_err());
        }
    }

    #[test]
    fn inputs_outside_unit_range_are_rejected() {
        let x = Tensor::full(&[1, 1, 4, 4], 1.5);
        assert!(apply(&AugSpec::new(AugKind::Hflip, 0), &x).is_err());
        assert!(apply(&AugSpec::new(AugKind::Hflip, 0), &Tensor::zeros(&[4, 4])).is_err());
    }

    #[test]
    fn chains_are_deterministic_and_distinct() {
        let a = sample_chains(11, 8).unwrap();
        assert_eq!(a, sample_chains(11, 8).unwrap());
        assert_ne!(a[0], a[1]);
        assert_ne!(a, sample_chains(12, 8).unwrap());
        assert!(sample_chains(11, 1).is_err());
    }

    #[test]
    fn chains_are_ordered_and_nonempty() {
        let mut kinds = std::collections::BTreeSet::new();
        for chain in sample_chains(5, 256).unwrap() {
            let specs = chain.specs();
            assert!((1..=3).contains(&specs.len()));
            assert!(specs
                .windows(2)
                .all(|w| w[0].kind.category() < w[1].kind.category()));
            kinds.extend(specs.iter().map(|s| s.kind.name()));
        }
        assert_eq!(kinds.len(), 8);
        let bad = vec![
            AugSpec::new(AugKind::Speckle { sigma: 0.1 }, 0),
            AugSpec::new(AugKind::Hflip, 0),
        ];
        assert!(AugChain::new(bad).is_err());
        assert!(AugChain::new(vec![]).is_err());
    }

    #[test]
    fn chains_round_trip_through_json() {
        let chains = sample_chains(21, 8).unwrap();
        let text = serde_json::to_string(&chains).unwrap();
        let back: Vec<AugChain> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, chains);
        assert!(text.contains("\"kind\""));
    }

    #[test]
    fn every_frame_gets_the_same_spatial_change() {
        let frame: Vec<f64> = video(6).data()[..256].to_vec();
        let x = Tensor::new(&[3, 1, 16, 16], frame.repeat(3)).unwrap();
        for chain in sample_chains(8, 16).unwrap() {
            let y = chain.apply(&x).unwrap();
            let d = y.data();
            assert_eq!(&d[..256], &d[256..512]);
            assert_eq!(&d[..256], &d[512..]);
        }
    }

    proptest! {
        #[test]
        fn chains_preserve_shape_and_range(seed in any::<u64>(), sample in 0u64..50) {
            let x = video(sample);
            for chain in sample_chains(seed, 2).unwrap() {
                let y = chain.apply(&x).unwrap();
                prop_assert_eq!(y.shape(), x.shape());
                prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
