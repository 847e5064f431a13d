//! Refinement objective: `(1 - NCC) + alpha * soft Dice loss + gamma * bending energy`,
//! with the bending energy measured in the coordinates chosen by [`RegCoords`].
//!
//! The gradient with respect to the displacement field is computed analytically
//! by chaining the loss derivatives through the trilinear sampling weights.
//! Warped soft labels are clipped to `[0, 1]`; the clip passes derivative only
//! strictly inside that interval.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::parallel::{det_sum, det_sum_n};
use crate::volume::{GridGeometry, ProbVolume, ScalarVolume};
use crate::warp::{warp_raw, warp_raw_with_grad, warp_scalar, DisplacementField};

/// Variance floor below which a volume counts as constant.
pub const VARIANCE_EPS: f64 = 1e-12;
/// Smoothing term in the soft Dice denominator.
pub const DICE_EPS: f64 = 1e-8;

/// Units of the displacement values seen by the regularizer. Second
/// differences are always taken per voxel step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegCoords {
    /// Displacements in voxels.
    Voxel,
    /// Displacements rescaled so each axis spans `[-1, 1]`: component `i` is
    /// multiplied by `2 / (n_i - 1)`.
    #[default]
    Normalized,
}

impl RegCoords {
    /// Per-component factor applied to the field before the regularizer.
    pub fn scales(&self, geom: &GridGeometry) -> [f64; 3] {
        match self {
            RegCoords::Voxel => [1.0; 3],
            RegCoords::Normalized => geom.dims().map(|n| 2.0 / (n as f64 - 1.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ObjectiveWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub reg_coords: RegCoords,
}

impl ObjectiveWeights {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        let w = Self {
            alpha,
            gamma,
            reg_coords: RegCoords::default(),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn with_coords(self, reg_coords: RegCoords) -> Self {
        Self { reg_coords, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::ConfigInvalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            alpha: 3.0,
            gamma: 20_000.0,
            reg_coords: RegCoords::default(),
        }
    }
}

/// Objective value with its three terms (unweighted).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub img_term: f64,
    pub seg_term: f64,
    pub reg_term: f64,
}

/// Borrowed, validated inputs of one atlas/target refinement problem.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    pub atlas_img: &'a ScalarVolume,
    pub target_img: &'a ScalarVolume,
    pub s_src: &'a ProbVolume,
    pub s_tar: &'a ProbVolume,
}

impl<'a> ObjectiveInputs<'a> {
    pub fn new(
        atlas_img: &'a ScalarVolume,
        target_img: &'a ScalarVolume,
        s_src: &'a ProbVolume,
        s_tar: &'a ProbVolume,
    ) -> Result<Self> {
        let g = atlas_img.geom();
        g.ensure_same(target_img.geom())?;
        g.ensure_same(s_src.geom())?;
        g.ensure_same(s_tar.geom())?;
        if s_src.channels() != s_tar.channels() {
            return Err(Error::ChannelMismatch(s_src.channels(), s_tar.channels()));
        }
        Ok(Self {
            atlas_img,
            target_img,
            s_src,
            s_tar,
        })
    }

    pub fn geom(&self) -> &GridGeometry {
        self.atlas_img.geom()
    }
}

struct Centered {
    mean_a: f64,
    mean_b: f64,
    saa: f64,
    sbb: f64,
    sab: f64,
}

fn centered_sums(a: &[f64], b: &[f64]) -> Centered {
    let n = a.len();
    let [sa, sb] = det_sum_n(n, |i| [a[i], b[i]]);
    let mean_a = sa / n as f64;
    let mean_b = sb / n as f64;
    let [saa, sbb, sab] = det_sum_n(n, |i| {
        let da = a[i] - mean_a;
        let db = b[i] - mean_b;
        [da * da, db * db, da * db]
    });
    Centered {
        mean_a,
        mean_b,
        saa,
        sbb,
        sab,
    }
}

fn ncc_raw(a: &[f64], b: &[f64]) -> Result<(f64, Centered)> {
    let c = centered_sums(a, b);
    let n = a.len() as f64;
    if c.saa / n < VARIANCE_EPS || c.sbb / n < VARIANCE_EPS {
        return Err(Error::DegenerateVariance);
    }
    let r = c.sab / (c.saa * c.sbb).sqrt();
    Ok((r.clamp(-1.0, 1.0), c))
}

/// Global Pearson correlation of two volumes.
pub fn ncc(a: &ScalarVolume, b: &ScalarVolume) -> Result<f64> {
    a.geom().ensure_same(b.geom())?;
    Ok(ncc_raw(a.data(), b.data())?.0)
}

/// `1 - NCC(atlas warped by f, target)`.
pub fn img_loss(atlas: &ScalarVolume, f: &DisplacementField, target: &ScalarVolume) -> Result<f64> {
    target.geom().ensure_same(f.geom())?;
    let warped = warp_scalar(atlas, f)?;
    Ok(1.0 - ncc(&warped, target)?)
}

struct DiceParts {
    loss: f64,
    /// Per channel: (intersection, denominator).
    per_channel: Vec<(f64, f64)>,
}

fn soft_dice_raw(refs: &[Vec<f64>], tar: &ProbVolume) -> DiceParts {
    let k = refs.len();
    let mut per_channel = Vec::with_capacity(k);
    let mut dice_sum = 0.0;
    for (c, r) in refs.iter().enumerate() {
        let t = tar.channel(c);
        let [inter, rs, ts] = det_sum_n(r.len(), |i| [r[i] * t[i], r[i], t[i]]);
        let den = rs + ts + DICE_EPS;
        dice_sum += 2.0 * inter / den;
        per_channel.push((inter, den));
    }
    DiceParts {
        loss: 1.0 - dice_sum / k as f64,
        per_channel,
    }
}

/// Soft multi-class Dice loss with the usual factor 2 in the numerator.
pub fn soft_dice_loss(s_ref: &ProbVolume, s_tar: &ProbVolume) -> Result<f64> {
    s_ref.geom().ensure_same(s_tar.geom())?;
    if s_ref.channels() != s_tar.channels() {
        return Err(Error::ChannelMismatch(s_ref.channels(), s_tar.channels()));
    }
    let refs: Vec<Vec<f64>> = (0..s_ref.channels())
        .map(|k| s_ref.channel(k).to_vec())
        .collect();
    Ok(soft_dice_raw(&refs, s_tar).loss)
}

// Hessian entries of one field component, one plane each: xx, yy, zz, xy, xz, yz.
type Planes = [Vec<f64>; 6];
type Hessians = [Planes; 3];

const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

fn hessian_planes(comp: &[f64], geom: &GridGeometry) -> Planes {
    let [nx, ny, nz] = geom.dims();
    let stride = [1, nx, nx * ny];
    let plane = |a: usize, b: usize| -> Vec<f64> {
        let mut out = vec![0.0; geom.len()];
        out.par_chunks_mut(nx).enumerate().for_each(|(r, row)| {
            let (y, z) = (r % ny, r / ny);
            let interior = |axis: usize| match axis {
                1 => y > 0 && y + 1 < ny,
                2 => z > 0 && z + 1 < nz,
                _ => true,
            };
            if !interior(a) || !interior(b) {
                return;
            }
            let xs = if a == 0 || b == 0 { 1..nx - 1 } else { 0..nx };
            let base = r * nx;
            for x in xs {
                let i = base + x;
                row[x] = if a == b {
                    let s = stride[a];
                    comp[i + s] - 2.0 * comp[i] + comp[i - s]
                } else {
                    let (sa, sb) = (stride[a], stride[b]);
                    0.25 * (comp[i + sa + sb] - comp[i + sa - sb] - comp[i - sa + sb]
                        + comp[i - sa - sb])
                };
            }
        });
        out
    };
    [
        plane(0, 0),
        plane(1, 1),
        plane(2, 2),
        plane(0, 1),
        plane(0, 2),
        plane(1, 2),
    ]
}

fn check_bending_grid(geom: &GridGeometry) -> Result<()> {
    if geom.dims().iter().any(|&n| n < 3) {
        return Err(Error::GridTooSmall(3));
    }
    Ok(())
}

fn bending_value(h: &Hessians, len: usize) -> f64 {
    det_sum(len, |i| {
        let mut e = 0.0;
        for p in h {
            e += p[0][i] * p[0][i] + p[1][i] * p[1][i] + p[2][i] * p[2][i];
            e += 2.0 * (p[3][i] * p[3][i] + p[4][i] * p[4][i] + p[5][i] * p[5][i]);
        }
        e
    }) / len as f64
}

fn all_hessians(f: &DisplacementField) -> Hessians {
    let g = f.geom();
    [
        hessian_planes(f.component(0), g),
        hessian_planes(f.component(1), g),
        hessian_planes(f.component(2), g),
    ]
}

/// Mean squared Frobenius norm of the per-component Hessians (voxel units).
pub fn bending_energy(f: &DisplacementField) -> Result<f64> {
    check_bending_grid(f.geom())?;
    Ok(bending_value(&all_hessians(f), f.geom().len()))
}

fn scale_components(f: &DisplacementField, s: [f64; 3]) -> DisplacementField {
    let n = f.geom().len();
    let data = f
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * s[i / n])
        .collect();
    DisplacementField::from_raw(*f.geom(), data)
}

/// The regularizer term: bending energy of `f` expressed in `coords`.
pub fn regularizer(f: &DisplacementField, coords: RegCoords) -> Result<f64> {
    let s = coords.scales(f.geom());
    if s == [1.0; 3] {
        bending_energy(f)
    } else {
        bending_energy(&scale_components(f, s))
    }
}

/// `out[i] += coef * src[i + d]` wherever `i + d` lies on the grid.
fn add_shifted(out: &mut [f64], src: &[f64], geom: &GridGeometry, d: [isize; 3], coef: f64) {
    let [nx, ny, nz] = geom.dims();
    let (nx_i, ny_i, nz_i) = (nx as isize, ny as isize, nz as isize);
    let lo = (-d[0]).max(0) as usize;
    let hi = (nx_i - d[0]).min(nx_i) as usize;
    out.par_chunks_mut(nx).enumerate().for_each(|(r, row)| {
        let ys = (r % ny) as isize + d[1];
        let zs = (r / ny) as isize + d[2];
        if ys < 0 || ys >= ny_i || zs < 0 || zs >= nz_i {
            return;
        }
        let src_row = &src[(zs as usize * ny + ys as usize) * nx..][..nx];
        for x in lo..hi {
            row[x] += coef * src_row[(x as isize + d[0]) as usize];
        }
    });
}

/// Gradient of the bending energy: the adjoint difference stencils applied to
/// the Hessian planes.
fn bending_gradient(hess: &Hessians, geom: &GridGeometry) -> Vec<f64> {
    let n = geom.len();
    let inv_m = 1.0 / n as f64;
    let mut out = vec![0.0; 3 * n];
    for (c, planes) in hess.iter().enumerate() {
        let g = &mut out[c * n..(c + 1) * n];
        for (a, h) in planes.iter().take(3).enumerate() {
            let mut d = [0isize; 3];
            d[a] = 1;
            add_shifted(g, h, geom, d, 2.0 * inv_m);
            d[a] = -1;
            add_shifted(g, h, geom, d, 2.0 * inv_m);
            g.par_iter_mut()
                .zip(h.par_iter())
                .for_each(|(g, h)| *g -= 4.0 * inv_m * h);
        }
        for (e, &(a, b)) in PAIRS.iter().enumerate() {
            for sa in [-1isize, 1] {
                for sb in [-1isize, 1] {
                    let mut d = [0isize; 3];
                    d[a] = -sa;
                    d[b] = -sb;
                    add_shifted(g, &planes[3 + e], geom, d, (sa * sb) as f64 * inv_m);
                }
            }
        }
    }
    out
}

/// Evaluate the objective and, optionally, its gradient in one pass.
pub fn evaluate(
    inputs: &ObjectiveInputs<'_>,
    f: &DisplacementField,
    w: &ObjectiveWeights,
    with_gradient: bool,
) -> Result<(ObjectiveValue, Option<DisplacementField>)> {
    let geom = *inputs.geom();
    geom.ensure_same(f.geom())?;
    check_bending_grid(&geom)?;
    let n = geom.len();
    let channels = inputs.s_src.channels();
    let need_seg_grad = with_gradient && w.alpha != 0.0;

    // Image term.
    let (warped, warped_grad) = if with_gradient {
        let (v, g) = warp_raw_with_grad(inputs.atlas_img.data(), f);
        (v, Some(g))
    } else {
        (warp_raw(inputs.atlas_img.data(), f), None)
    };
    let target = inputs.target_img.data();
    let (ncc_val, c) = ncc_raw(&warped, target)?;
    let img_term = 1.0 - ncc_val;

    // Segmentation term.
    let mut raw_refs = Vec::with_capacity(channels);
    let mut ref_grads = Vec::with_capacity(channels);
    for k in 0..channels {
        if need_seg_grad {
            let (v, g) = warp_raw_with_grad(inputs.s_src.channel(k), f);
            raw_refs.push(v);
            ref_grads.push(g);
        } else {
            raw_refs.push(warp_raw(inputs.s_src.channel(k), f));
        }
    }
    let clipped: Vec<Vec<f64>> = raw_refs
        .iter()
        .map(|r| r.iter().map(|v| v.clamp(0.0, 1.0)).collect())
        .collect();
    let dice = soft_dice_raw(&clipped, inputs.s_tar);
    let seg_term = dice.loss;

    // Regularizer.
    let reg_scales = w.reg_coords.scales(&geom);
    let hess = if reg_scales == [1.0; 3] {
        all_hessians(f)
    } else {
        all_hessians(&scale_components(f, reg_scales))
    };
    let reg_term = bending_value(&hess, n);

    let value = ObjectiveValue {
        total: img_term + w.alpha * seg_term + w.gamma * reg_term,
        img_term,
        seg_term,
        reg_term,
    };
    if !with_gradient {
        return Ok((value, None));
    }

    let mut grad = vec![0.0; 3 * n];
    if let Some(wg) = warped_grad {
        // d(1 - ncc)/dw_j = -(b_j / sqrt(saa sbb) - ncc * a_j / saa)
        let norm = (c.saa * c.sbb).sqrt();
        let raw_ncc = c.sab / norm;
        if raw_ncc.abs() <= 1.0 {
            let dl: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|j| {
                    let a = warped[j] - c.mean_a;
                    let b = target[j] - c.mean_b;
                    -(b / norm - raw_ncc * a / c.saa)
                })
                .collect();
            for cmp in 0..3 {
                let block = &mut grad[cmp * n..(cmp + 1) * n];
                block
                    .par_iter_mut()
                    .enumerate()
                    .for_each(|(j, g)| *g += dl[j] * wg[j][cmp]);
            }
        }
    }
    if need_seg_grad {
        let scale = -w.alpha / channels as f64;
        for k in 0..channels {
            let (inter, den) = dice.per_channel[k];
            let t = inputs.s_tar.channel(k);
            let raw = &raw_refs[k];
            let rg = &ref_grads[k];
            for cmp in 0..3 {
                let block = &mut grad[cmp * n..(cmp + 1) * n];
                block.par_iter_mut().enumerate().for_each(|(j, g)| {
                    if raw[j] > 0.0 && raw[j] < 1.0 {
                        let dl = scale * (2.0 * t[j] / den - 2.0 * inter / (den * den));
                        *g += dl * rg[j][cmp];
                    }
                });
            }
        }
    }
    if w.gamma != 0.0 {
        let rg = bending_gradient(&hess, &geom);
        grad.par_iter_mut()
            .zip(rg.par_iter())
            .enumerate()
            .for_each(|(i, (g, r))| *g += w.gamma * reg_scales[i / n] * r);
    }
    Ok((value, Some(DisplacementField::from_raw(geom, grad))))
}

pub fn objective(
    atlas_img: &ScalarVolume,
    target_img: &ScalarVolume,
    s_src: &ProbVolume,
    s_tar: &ProbVolume,
    f: &DisplacementField,
    w: &ObjectiveWeights,
) -> Result<ObjectiveValue> {
    let inputs = ObjectiveInputs::new(atlas_img, target_img, s_src, s_tar)?;
    Ok(evaluate(&inputs, f, w, false)?.0)
}

/// Gradient of the total objective with respect to every field component.
pub fn objective_gradient(
    atlas_img: &ScalarVolume,
    target_img: &ScalarVolume,
    s_src: &ProbVolume,
    s_tar: &ProbVolume,
    f: &DisplacementField,
    w: &ObjectiveWeights,
) -> Result<DisplacementField> {
    let inputs = ObjectiveInputs::new(atlas_img, target_img, s_src, s_tar)?;
    let (_, g) = evaluate(&inputs, f, w, true)?;
    Ok(g.expect("gradient requested"))
}
