//! Joint label fusion weights.
//!
//! At every voxel the pairwise atlas error dependency matrix
//! `M(i, j) = sum over the patch of |A_i - T| * |A_j - T|` is built, a ridge
//! term is added to its diagonal, and `M w = 1` is solved. Negative weights are
//! clamped to zero and the rest normalized to sum 1. Patch coordinates are
//! clamped to the grid, so every patch holds `(2r + 1)^3` samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::vote::WeightVolume;
use crate::volume::{GridGeometry, ScalarVolume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JlfConfig {
    pub patch_radius: usize,
    pub ridge_eps: f64,
}

impl Default for JlfConfig {
    fn default() -> Self {
        Self {
            patch_radius: 2,
            ridge_eps: 0.1,
        }
    }
}

impl JlfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_eps > 0.0 && self.ridge_eps.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "ridge_eps must be positive, got {}",
                self.ridge_eps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JlfOutcome {
    pub weights: WeightVolume,
    /// Voxels where the solve failed and uniform weights were used.
    pub solve_failures: usize,
}

/// Box sum over a clamped `(2r + 1)` window along one axis.
fn box_sum_axis(data: &[f64], geom: &GridGeometry, axis: usize, r: usize) -> Vec<f64> {
    let dims = geom.dims();
    let n = dims[axis] as isize;
    let r = r as isize;
    (0..geom.len())
        .into_par_iter()
        .map(|i| {
            let mut p = geom.coords(i);
            let centre = p[axis] as isize;
            let mut acc = 0.0;
            for d in -r..=r {
                p[axis] = (centre + d).clamp(0, n - 1) as usize;
                acc += data[geom.index(p[0], p[1], p[2])];
            }
            acc
        })
        .collect()
}

fn box_sum(data: &[f64], geom: &GridGeometry, r: usize) -> Vec<f64> {
    let x = box_sum_axis(data, geom, 0, r);
    let y = box_sum_axis(&x, geom, 1, r);
    box_sum_axis(&y, geom, 2, r)
}

/// In-place Cholesky of a row-major SPD matrix; `None` if not positive definite.
fn cholesky(m: &mut [f64], n: usize) -> Option<()> {
    for j in 0..n {
        let mut d = m[j * n + j];
        for k in 0..j {
            d -= m[j * n + k] * m[j * n + k];
        }
        if !(d > 0.0 && d.is_finite()) {
            return None;
        }
        let d = d.sqrt();
        m[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= m[i * n + k] * m[j * n + k];
            }
            m[i * n + j] = s / d;
        }
    }
    Some(())
}

/// Solve `M w = 1` for a full (ridge included) row-major matrix, clamp
/// negatives and normalize. `None` when the solve fails or nothing survives.
pub fn solve_weights(matrix: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = matrix.to_vec();
    cholesky(&mut l, n)?;
    // Forward then back substitution.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = 1.0;
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut w = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * w[k];
        }
        w[i] = s / l[i * n + i];
    }
    for x in w.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let sum: f64 = w.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return None;
    }
    w.iter_mut().for_each(|x| *x /= sum);
    Some(w)
}

/// Per-voxel joint label fusion weights for already-warped atlas images.
pub fn jlf_weights(
    warped_atlas_imgs: &[ScalarVolume],
    target: &ScalarVolume,
    cfg: &JlfConfig,
) -> Result<JlfOutcome> {
    cfg.validate()?;
    if warped_atlas_imgs.is_empty() {
        return Err(Error::EmptyAtlasSet);
    }
    let geom = *target.geom();
    for a in warped_atlas_imgs {
        geom.ensure_same(a.geom())?;
    }
    let n = warped_atlas_imgs.len();
    let len = geom.len();
    let errors: Vec<Vec<f64>> = warped_atlas_imgs
        .iter()
        .map(|a| {
            a.data()
                .iter()
                .zip(target.data())
                .map(|(x, t)| (x - t).abs())
                .collect()
        })
        .collect();

    // Patch sums of every pairwise error product, upper triangle.
    let mut pair_sums = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            let prod: Vec<f64> = errors[i]
                .iter()
                .zip(&errors[j])
                .map(|(a, b)| a * b)
                .collect();
            pair_sums.push(box_sum(&prod, &geom, cfg.patch_radius));
        }
    }
    let pair_index = |i: usize, j: usize| {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * n - i * (i + 1) / 2 + j
    };

    let solved: Vec<Option<Vec<f64>>> = (0..len)
        .into_par_iter()
        .map(|v| {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    m[i * n + j] = pair_sums[pair_index(i, j)][v];
                }
                m[i * n + i] += cfg.ridge_eps;
            }
            solve_weights(&m, n)
        })
        .collect();

    let mut solve_failures = 0;
    let mut data = Vec::with_capacity(len * n);
    for w in solved {
        match w {
            Some(w) => data.extend(w),
            None => {
                solve_failures += 1;
                data.extend(std::iter::repeat_n(1.0 / n as f64, n));
            }
        }
    }
    Ok(JlfOutcome {
        weights: WeightVolume::from_raw(geom, n, data),
        solve_failures,
    })
}
