//! Trilinear sampling and displacement-field warping.
//!
//! A displacement field `f` defines the sampling map `x -> x + f(x)` in voxel
//! units. Sample coordinates outside the grid are clamped to the border per
//! axis. Derivatives of the sampled value with respect to the sample position
//! follow the piecewise-linear interpolant: inside a cell they are the cell
//! difference, exactly on a grid node they are the mean of the two one-sided
//! differences, and along a clamped axis they are zero.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{argmax_labels, one_hot, GridGeometry, LabelVolume, ProbVolume, ScalarVolume};

/// Per-voxel 3-vector offsets in voxel units, stored as three component blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    geom: GridGeometry,
    data: Vec<f64>,
}

impl DisplacementField {
    pub fn new(geom: GridGeometry, data: Vec<f64>) -> Result<Self> {
        let expected = geom.len() * 3;
        if data.len() != expected {
            return Err(Error::DataLength {
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { geom, data })
    }

    pub fn zeros(geom: GridGeometry) -> Self {
        Self {
            geom,
            data: vec![0.0; geom.len() * 3],
        }
    }

    pub fn constant(geom: GridGeometry, v: [f64; 3]) -> Self {
        let n = geom.len();
        let mut data = Vec::with_capacity(3 * n);
        for c in v {
            data.extend(std::iter::repeat_n(c, n));
        }
        Self { geom, data }
    }

    pub fn from_fn(
        geom: GridGeometry,
        f: impl Fn(usize, usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let n = geom.len();
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            let [x, y, z] = geom.coords(i);
            let v = f(x, y, z);
            for c in 0..3 {
                data[c * n + i] = v[c];
            }
        }
        Self::new(geom, data)
    }

    pub(crate) fn from_raw(geom: GridGeometry, data: Vec<f64>) -> Self {
        debug_assert_eq!(geom.len() * 3, data.len());
        Self { geom, data }
    }

    pub fn geom(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.geom.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, index: usize) -> [f64; 3] {
        let n = self.geom.len();
        [
            self.data[index],
            self.data[n + index],
            self.data[2 * n + index],
        ]
    }

    /// Largest Euclidean displacement over all voxels.
    pub fn max_norm(&self) -> f64 {
        (0..self.geom.len())
            .map(|i| {
                let v = self.at(i);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            geom: self.geom,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

/// Interpolation weights and derivative stencil along one axis.
#[derive(Debug, Clone, Copy)]
struct Axis {
    idx: [usize; 2],
    w: [f64; 2],
    didx: [usize; 2],
    dw: [f64; 2],
}

impl Axis {
    #[inline]
    fn new(p: f64, n: usize) -> Self {
        let last = (n - 1) as f64;
        if p < 0.0 || p > last {
            let i = if p < 0.0 { 0 } else { n - 1 };
            return Axis {
                idx: [i, i],
                w: [1.0, 0.0],
                didx: [i, i],
                dw: [0.0, 0.0],
            };
        }
        let fl = p.floor();
        let i0 = (fl as usize).min(n - 2);
        let t = p - i0 as f64;
        let (didx, dw) = if p == fl {
            let i = fl as usize;
            if i == 0 {
                ([0, 1], [-0.5, 0.5])
            } else if i == n - 1 {
                ([n - 2, n - 1], [-0.5, 0.5])
            } else {
                ([i - 1, i + 1], [-0.5, 0.5])
            }
        } else {
            ([i0, i0 + 1], [-1.0, 1.0])
        };
        Axis {
            idx: [i0, i0 + 1],
            w: [1.0 - t, t],
            didx,
            dw,
        }
    }
}

#[inline]
fn axes(geom: &GridGeometry, p: [f64; 3]) -> [Axis; 3] {
    let d = geom.dims();
    [Axis::new(p[0], d[0]), Axis::new(p[1], d[1]), Axis::new(p[2], d[2])]
}

#[inline]
fn sample_axes(data: &[f64], geom: &GridGeometry, a: &[Axis; 3]) -> f64 {
    let mut acc = 0.0;
    for c in 0..2 {
        for b in 0..2 {
            for i in 0..2 {
                let w = a[0].w[i] * a[1].w[b] * a[2].w[c];
                acc += w * data[geom.index(a[0].idx[i], a[1].idx[b], a[2].idx[c])];
            }
        }
    }
    acc
}

#[inline]
fn gradient_axes(data: &[f64], geom: &GridGeometry, a: &[Axis; 3]) -> [f64; 3] {
    let mut g = [0.0; 3];
    for c in 0..2 {
        for b in 0..2 {
            for i in 0..2 {
                g[0] += a[0].dw[i]
                    * a[1].w[b]
                    * a[2].w[c]
                    * data[geom.index(a[0].didx[i], a[1].idx[b], a[2].idx[c])];
                g[1] += a[0].w[i]
                    * a[1].dw[b]
                    * a[2].w[c]
                    * data[geom.index(a[0].idx[i], a[1].didx[b], a[2].idx[c])];
                g[2] += a[0].w[i]
                    * a[1].w[b]
                    * a[2].dw[c]
                    * data[geom.index(a[0].idx[i], a[1].idx[b], a[2].didx[c])];
            }
        }
    }
    g
}

/// Trilinear interpolation of raw samples at a continuous voxel position.
#[inline]
pub(crate) fn sample_raw(data: &[f64], geom: &GridGeometry, p: [f64; 3]) -> f64 {
    sample_axes(data, geom, &axes(geom, p))
}

/// Value and spatial derivative at a continuous voxel position.
#[inline]
pub(crate) fn sample_raw_with_grad(
    data: &[f64],
    geom: &GridGeometry,
    p: [f64; 3],
) -> (f64, [f64; 3]) {
    let a = axes(geom, p);
    if a.iter().all(|ax| ax.didx == ax.idx) {
        return sample_cell_with_grad(data, geom, &a);
    }
    (sample_axes(data, geom, &a), gradient_axes(data, geom, &a))
}

// Value and gradient from the 8 cell corners when every derivative stencil is
// the cell difference.
#[inline]
fn sample_cell_with_grad(data: &[f64], geom: &GridGeometry, a: &[Axis; 3]) -> (f64, [f64; 3]) {
    let mut v = 0.0;
    let mut g = [0.0; 3];
    for c in 0..2 {
        for b in 0..2 {
            for i in 0..2 {
                let s = data[geom.index(a[0].idx[i], a[1].idx[b], a[2].idx[c])];
                v += a[0].w[i] * a[1].w[b] * a[2].w[c] * s;
                g[0] += a[0].dw[i] * a[1].w[b] * a[2].w[c] * s;
                g[1] += a[0].w[i] * a[1].dw[b] * a[2].w[c] * s;
                g[2] += a[0].w[i] * a[1].w[b] * a[2].dw[c] * s;
            }
        }
    }
    (v, g)
}

/// Warp one raw channel: `out(x) = sample(x + f(x))`.
pub(crate) fn warp_raw(data: &[f64], f: &DisplacementField) -> Vec<f64> {
    let geom = *f.geom();
    let [nx, ny, _] = geom.dims();
    let (fx, fy, fz) = (f.component(0), f.component(1), f.component(2));
    let mut out = vec![0.0; geom.len()];
    out.par_chunks_mut(nx).enumerate().for_each(|(r, row)| {
        let (y, z) = ((r % ny) as f64, (r / ny) as f64);
        for (x, o) in row.iter_mut().enumerate() {
            let i = r * nx + x;
            *o = sample_raw(data, &geom, [x as f64 + fx[i], y + fy[i], z + fz[i]]);
        }
    });
    out
}

/// Warp one raw channel and return the spatial derivative at every sample.
pub(crate) fn warp_raw_with_grad(data: &[f64], f: &DisplacementField) -> (Vec<f64>, Vec<[f64; 3]>) {
    let geom = *f.geom();
    let [nx, ny, _] = geom.dims();
    let (fx, fy, fz) = (f.component(0), f.component(1), f.component(2));
    let mut vals = vec![0.0; geom.len()];
    let mut grads = vec![[0.0; 3]; geom.len()];
    vals.par_chunks_mut(nx)
        .zip(grads.par_chunks_mut(nx))
        .enumerate()
        .for_each(|(r, (vrow, grow))| {
            let (y, z) = ((r % ny) as f64, (r / ny) as f64);
            for x in 0..nx {
                let i = r * nx + x;
                let p = [x as f64 + fx[i], y + fy[i], z + fz[i]];
                (vrow[x], grow[x]) = sample_raw_with_grad(data, &geom, p);
            }
        });
    (vals, grads)
}

/// Trilinear sample of `v` at voxel position `p`, clamping each axis to the grid.
pub fn trilinear_sample(v: &ScalarVolume, p: [f64; 3]) -> f64 {
    sample_raw(v.data(), v.geom(), p)
}

pub fn warp_scalar(v: &ScalarVolume, f: &DisplacementField) -> Result<ScalarVolume> {
    v.geom().ensure_same(f.geom())?;
    Ok(ScalarVolume::from_raw(*v.geom(), warp_raw(v.data(), f)))
}

/// Warp each channel independently, clipping to `[0, 1]`.
pub fn warp_prob(p: &ProbVolume, f: &DisplacementField) -> Result<ProbVolume> {
    p.geom().ensure_same(f.geom())?;
    let mut data = Vec::with_capacity(p.data().len());
    for k in 0..p.channels() {
        data.extend(warp_raw(p.channel(k), f).into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Ok(ProbVolume::from_raw(*p.geom(), p.channels(), data))
}

/// Soft warp of the one-hot channels followed by a hard decision.
pub fn warp_labels(s: &LabelVolume, f: &DisplacementField) -> Result<LabelVolume> {
    Ok(argmax_labels(&warp_prob(&one_hot(s), f)?))
}
