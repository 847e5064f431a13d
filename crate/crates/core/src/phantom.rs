//! Synthetic atlas/target sets with known deformations.
//!
//! The base scene is an ellipsoid ("bone", label 1) wrapped in a thin shell
//! ("cartilage", label 2) on a dim background. Intensities follow the labels
//! plus Gaussian noise. Each atlas is the base label map warped by a random
//! smooth field, so `warp_labels(target_labels, true_field)` reproduces the
//! atlas labels exactly. Surrogate predictions apply one shared intensity
//! threshold rule to every volume, followed by a dilation of label 1.
//!
//! Randomness uses ChaCha8 seeded per stream with
//! `sub_seed(seed, stream) = splitmix64(seed + (stream + 1) * 0x9E3779B97F4A7C15)`.
//! Stream 0 is the target noise; atlas `i` uses stream `1 + 2i` for its field
//! and `2 + 2i` for its image noise. All generated reals are rounded to f32
//! precision so they survive a VVF1 round trip unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::volume_dice;
use crate::volume::{one_hot, GridGeometry, LabelVolume, ProbVolume, ScalarVolume};
use crate::warp::{warp_labels, DisplacementField};

pub const BACKGROUND_INTENSITY: f64 = 0.1;
pub const BONE_INTENSITY: f64 = 0.8;
pub const CARTILAGE_INTENSITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    /// Isotropic voxel size in mm.
    pub spacing: f64,
    pub num_atlases: usize,
    /// 1 (bone only) or 2 (bone and cartilage shell).
    pub num_structures: u8,
    /// Largest displacement of any atlas field, in voxels.
    pub deform_magnitude: f64,
    /// Gaussian smoothing sigma of the field noise, in voxels.
    pub deform_smoothness: f64,
    pub noise_sigma: f64,
    /// Dilation radius of label 1 in the surrogate predictions.
    pub seg_perturb_radius: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing: 0.7,
            num_atlases: 5,
            num_structures: 2,
            deform_magnitude: 3.0,
            deform_smoothness: 6.0,
            noise_sigma: 0.02,
            seg_perturb_radius: 1,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.dims.iter().any(|&d| d < 8) {
            return bad(format!("phantom dims must be >= 8 per axis, got {:?}", self.dims));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return bad(format!("spacing must be positive, got {}", self.spacing));
        }
        if self.num_atlases == 0 {
            return bad("num_atlases must be >= 1".into());
        }
        if !(1..=2).contains(&self.num_structures) {
            return bad(format!("num_structures must be 1 or 2, got {}", self.num_structures));
        }
        if !(self.deform_magnitude >= 0.0 && self.deform_magnitude.is_finite()) {
            return bad(format!("deform_magnitude must be >= 0, got {}", self.deform_magnitude));
        }
        if !(self.deform_smoothness > 0.0 && self.deform_smoothness.is_finite()) {
            return bad(format!(
                "deform_smoothness must be positive, got {}",
                self.deform_smoothness
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(self.dims, [self.spacing; 3])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomAtlas {
    pub img: ScalarVolume,
    pub labels: LabelVolume,
    pub true_field: DisplacementField,
    pub pred: ProbVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSet {
    pub config: PhantomConfig,
    pub target_img: ScalarVolume,
    pub target_labels: LabelVolume,
    pub target_pred: ProbVolume,
    pub atlases: Vec<PhantomAtlas>,
}

/// Shared intensity bands of the surrogate predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateRule {
    /// Below this: background.
    pub background_below: f64,
    /// At or above this: bone; in between: cartilage (or bone when K = 1).
    pub bone_from: f64,
    pub dilate_bone: usize,
    pub num_structures: u8,
}

impl SurrogateRule {
    pub fn for_config(cfg: &PhantomConfig) -> Self {
        Self {
            background_below: 0.3,
            bone_from: 0.65,
            dilate_bone: cfg.seg_perturb_radius,
            num_structures: cfg.num_structures,
        }
    }

    pub fn segment(&self, img: &ScalarVolume) -> LabelVolume {
        let mid = if self.num_structures >= 2 { 2 } else { 0 };
        let data = img
            .data()
            .iter()
            .map(|&v| {
                if v < self.background_below {
                    0
                } else if v < self.bone_from {
                    mid
                } else {
                    1
                }
            })
            .collect();
        let mut s = LabelVolume::from_raw(*img.geom(), data, self.num_structures);
        for _ in 0..self.dilate_bone {
            s = dilate(&s, 1);
        }
        s
    }

    pub fn predict(&self, img: &ScalarVolume) -> ProbVolume {
        one_hot(&self.segment(img))
    }
}

/// One step of 6-connected dilation of `label` over everything else.
fn dilate(s: &LabelVolume, label: u8) -> LabelVolume {
    let g = s.geom();
    let dims = g.dims();
    let src = s.data();
    let data = (0..g.len())
        .map(|i| {
            if src[i] == label {
                return label;
            }
            let p = g.coords(i);
            for a in 0..3 {
                for step in [-1isize, 1] {
                    let q = p[a] as isize + step;
                    if q >= 0 && q < dims[a] as isize {
                        let mut r = p;
                        r[a] = q as usize;
                        if src[g.index(r[0], r[1], r[2])] == label {
                            return label;
                        }
                    }
                }
            }
            src[i]
        })
        .collect();
    LabelVolume::from_raw(*g, data, s.num_structures())
}

pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, stream))
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn base_labels(cfg: &PhantomConfig, g: GridGeometry) -> LabelVolume {
    let d = g.dims().map(|n| n as f64);
    let centre = d.map(|n| (n - 1.0) / 2.0);
    let semi = [0.3 * d[0], 0.25 * d[1], 0.2 * d[2]];
    let shell = (0.05 * d[0].min(d[1]).min(d[2])).max(1.0);
    let data = (0..g.len())
        .map(|i| {
            let p = g.coords(i);
            let r = |axes: [f64; 3]| -> f64 {
                (0..3)
                    .map(|a| ((p[a] as f64 - centre[a]) / axes[a]).powi(2))
                    .sum()
            };
            if r(semi) <= 1.0 {
                1
            } else if cfg.num_structures >= 2 && r(semi.map(|s| s + shell)) <= 1.0 {
                2
            } else {
                0
            }
        })
        .collect();
    LabelVolume::from_raw(g, data, cfg.num_structures)
}

fn intensity_of(label: u8) -> f64 {
    match label {
        1 => BONE_INTENSITY,
        2 => CARTILAGE_INTENSITY,
        _ => BACKGROUND_INTENSITY,
    }
}

fn render(labels: &LabelVolume, noise_sigma: f64, rng: &mut ChaCha8Rng) -> ScalarVolume {
    let data = labels
        .data()
        .iter()
        .map(|&l| {
            let mut v = intensity_of(l);
            if noise_sigma > 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                v += noise_sigma * n;
            }
            round_f32(v.clamp(0.0, 1.0))
        })
        .collect();
    ScalarVolume::from_raw(*labels.geom(), data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn smooth_axis(data: &[f64], g: &GridGeometry, axis: usize, kernel: &[f64]) -> Vec<f64> {
    let n = g.dims()[axis] as isize;
    let r = (kernel.len() / 2) as isize;
    (0..g.len())
        .into_par_iter()
        .map(|i| {
            let mut p = g.coords(i);
            let c = p[axis] as isize;
            let mut acc = 0.0;
            for (j, w) in kernel.iter().enumerate() {
                p[axis] = (c + j as isize - r).clamp(0, n - 1) as usize;
                acc += w * data[g.index(p[0], p[1], p[2])];
            }
            acc
        })
        .collect()
}

/// Gaussian-smoothed white noise rescaled to `magnitude` maximum norm.
///
/// The noise is drawn on a grid padded by the kernel radius and cropped after
/// smoothing, so the field statistics do not change near the border.
pub fn random_smooth_field(
    g: GridGeometry,
    magnitude: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> DisplacementField {
    if magnitude == 0.0 {
        return DisplacementField::zeros(g);
    }
    let kernel = gaussian_kernel(sigma);
    let pad = kernel.len() / 2;
    let dims = g.dims();
    let padded = GridGeometry::unit(dims.map(|d| d + 2 * pad)).expect("padded grid is valid");
    let mut data = Vec::with_capacity(3 * g.len());
    for _ in 0..3 {
        let mut s: Vec<f64> = (0..padded.len()).map(|_| rng.sample(StandardNormal)).collect();
        for axis in 0..3 {
            s = smooth_axis(&s, &padded, axis, &kernel);
        }
        data.extend((0..g.len()).map(|i| {
            let [x, y, z] = g.coords(i);
            s[padded.index(x + pad, y + pad, z + pad)]
        }));
    }
    let f = DisplacementField::from_raw(g, data);
    let m = f.max_norm();
    let scale = if m > 0.0 { magnitude / m } else { 0.0 };
    let data = f.data().iter().map(|v| round_f32(v * scale)).collect();
    DisplacementField::from_raw(g, data)
}

pub fn generate(cfg: &PhantomConfig) -> Result<PhantomSet> {
    cfg.validate()?;
    let g = cfg.geometry()?;
    let rule = SurrogateRule::for_config(cfg);
    let target_labels = base_labels(cfg, g);
    let target_img = render(&target_labels, cfg.noise_sigma, &mut rng_for(cfg.seed, 0));
    let target_pred = rule.predict(&target_img);

    let atlases = (0..cfg.num_atlases as u64)
        .into_par_iter()
        .map(|i| {
            let mut field_rng = rng_for(cfg.seed, 1 + 2 * i);
            let true_field = random_smooth_field(
                g,
                cfg.deform_magnitude,
                cfg.deform_smoothness,
                &mut field_rng,
            );
            let labels = warp_labels(&target_labels, &true_field)?;
            let img = render(&labels, cfg.noise_sigma, &mut rng_for(cfg.seed, 2 + 2 * i));
            let pred = rule.predict(&img);
            Ok(PhantomAtlas {
                img,
                labels,
                true_field,
                pred,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PhantomSet {
        config: *cfg,
        target_img,
        target_labels,
        target_pred,
        atlases,
    })
}

/// Mean volume Dice over labels 1..K of the atlas labels warped by `f`
/// against the target labels.
pub fn true_residual_dice(set: &PhantomSet, f: &DisplacementField, atlas_index: usize) -> Result<f64> {
    let atlas = set.atlases.get(atlas_index).ok_or(Error::IndexOutOfRange {
        index: atlas_index,
        len: set.atlases.len(),
    })?;
    let warped = warp_labels(&atlas.labels, f)?;
    mean_dice(&warped, &set.target_labels)
}

/// Volume Dice averaged over labels 1..K.
pub fn mean_dice(pred: &LabelVolume, truth: &LabelVolume) -> Result<f64> {
    let k = truth.num_structures();
    let mut acc = 0.0;
    for label in 1..=k {
        acc += volume_dice(pred, truth, label)?;
    }
    Ok(acc / k as f64)
}
