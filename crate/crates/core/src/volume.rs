//! Dense 3D grids: geometry, intensity, label and soft-label volumes.
//!
//! Every container stores its samples x-fastest, then y, then z. Multi-channel
//! containers store whole channel blocks one after another, so channel `k` of
//! voxel `i` lives at `k * len + i`.

use crate::error::{Error, Result};

/// Voxel counts and physical spacing of a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    dims: [usize; 3],
    spacing: [f64; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if let Some(axis) = dims.iter().position(|&n| n < 2) {
            return Err(Error::InvalidGeometry(format!(
                "axis {axis} has {} samples, at least 2 required",
                dims[axis]
            )));
        }
        if let Some(axis) = spacing.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidGeometry(format!(
                "axis {axis} spacing {} must be finite and positive",
                spacing[axis]
            )));
        }
        Ok(Self { dims, spacing })
    }

    /// Isotropic grid with unit spacing.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub(crate) fn ensure_same(&self, other: &GridGeometry) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{:?}@{:?} vs {:?}@{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }
}

fn check_len(geom: &GridGeometry, channels: usize, actual: usize) -> Result<()> {
    let expected = geom.len() * channels;
    if expected != actual {
        return Err(Error::DataLength { expected, actual });
    }
    Ok(())
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// Single-channel intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    geom: GridGeometry,
    data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(geom: GridGeometry, data: Vec<f64>) -> Result<Self> {
        check_len(&geom, 1, data.len())?;
        check_finite(&data)?;
        Ok(Self { geom, data })
    }

    pub fn filled(geom: GridGeometry, value: f64) -> Self {
        Self {
            geom,
            data: vec![value; geom.len()],
        }
    }

    /// Build from a function of voxel coordinates.
    pub fn from_fn(geom: GridGeometry, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let data = (0..geom.len())
            .map(|i| {
                let [x, y, z] = geom.coords(i);
                f(x, y, z)
            })
            .collect();
        Self::new(geom, data)
    }

    pub(crate) fn from_raw(geom: GridGeometry, data: Vec<f64>) -> Self {
        debug_assert_eq!(geom.len(), data.len());
        Self { geom, data }
    }

    pub fn geom(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.geom.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Integer label volume over `{0, ..., K}`; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geom: GridGeometry,
    data: Vec<u8>,
    num_structures: u8,
}

impl LabelVolume {
    pub fn new(geom: GridGeometry, data: Vec<u8>, num_structures: u8) -> Result<Self> {
        check_len(&geom, 1, data.len())?;
        if num_structures == 0 {
            return Err(Error::InvalidGeometry(
                "a label volume needs at least one structure".into(),
            ));
        }
        if let Some(index) = data.iter().position(|&l| l > num_structures) {
            return Err(Error::LabelOutOfRange {
                index,
                label: data[index],
                num_structures,
            });
        }
        Ok(Self {
            geom,
            data,
            num_structures,
        })
    }

    pub(crate) fn from_raw(geom: GridGeometry, data: Vec<u8>, num_structures: u8) -> Self {
        debug_assert!(data.iter().all(|&l| l <= num_structures));
        Self {
            geom,
            data,
            num_structures,
        }
    }

    pub fn geom(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn num_structures(&self) -> u8 {
        self.num_structures
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.geom.index(x, y, z)]
    }

    /// Number of voxels carrying `label`.
    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }
}

/// K-channel soft labels; background is the residual `1 - sum`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    geom: GridGeometry,
    channels: usize,
    data: Vec<f64>,
}

/// Slack allowed on the per-voxel channel sum.
pub const PROB_SUM_SLACK: f64 = 1e-6;

impl ProbVolume {
    pub fn new(geom: GridGeometry, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidGeometry("probability volume needs K >= 1".into()));
        }
        check_len(&geom, channels, data.len())?;
        if let Some(index) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidProbability {
                index,
                value: data[index],
            });
        }
        let n = geom.len();
        for i in 0..n {
            let sum: f64 = (0..channels).map(|k| data[k * n + i]).sum();
            if sum > 1.0 + PROB_SUM_SLACK {
                return Err(Error::InvalidProbability { index: i, value: sum });
            }
        }
        Ok(Self {
            geom,
            channels,
            data,
        })
    }

    pub(crate) fn from_raw(geom: GridGeometry, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(geom.len() * channels, data.len());
        Self {
            geom,
            channels,
            data,
        }
    }

    pub fn geom(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Channel `k` (0-based, i.e. structure `k + 1`).
    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.geom.len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, x: usize, y: usize, z: usize) -> f64 {
        self.channel(k)[self.geom.index(x, y, z)]
    }
}

/// Affine rescale of intensities onto `[0, 1]`.
pub fn normalize_intensity(v: &ScalarVolume) -> Result<ScalarVolume> {
    let (lo, hi) = v.min_max();
    if hi <= lo {
        return Err(Error::ConstantVolume);
    }
    let range = hi - lo;
    let data = v.data.iter().map(|&x| (x - lo) / range).collect();
    Ok(ScalarVolume::from_raw(v.geom, data))
}

/// Hard labels to K indicator channels. Background maps to all-zero channels.
pub fn one_hot(s: &LabelVolume) -> ProbVolume {
    let n = s.geom.len();
    let channels = s.num_structures as usize;
    let mut data = vec![0.0; n * channels];
    for (i, &l) in s.data.iter().enumerate() {
        if l > 0 {
            data[(l as usize - 1) * n + i] = 1.0;
        }
    }
    ProbVolume::from_raw(s.geom, channels, data)
}

/// Hard decision on soft labels: the strongest channel wins if it beats the
/// background residual, ties going to the lowest channel.
pub fn argmax_labels(p: &ProbVolume) -> LabelVolume {
    let n = p.geom.len();
    let data = (0..n)
        .map(|i| {
            let mut best = 0usize;
            let mut best_val = p.data[i];
            let mut sum = best_val;
            for k in 1..p.channels {
                let v = p.data[k * n + i];
                sum += v;
                if v > best_val {
                    best = k;
                    best_val = v;
                }
            }
            if best_val > 1.0 - sum {
                best as u8 + 1
            } else {
                0
            }
        })
        .collect();
    LabelVolume::from_raw(p.geom, data, p.channels as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(n: usize) -> GridGeometry {
        GridGeometry::unit([n, 2, 2]).unwrap()
    }

    #[test]
    fn geometry_rejects_degenerate_axes() {
        assert!(GridGeometry::unit([1, 4, 4]).is_err());
        assert!(GridGeometry::new([4, 4, 4], [0.7, 0.0, 0.7]).is_err());
        assert!(GridGeometry::new([4, 4, 4], [0.7, f64::NAN, 0.7]).is_err());
        let g = GridGeometry::new([3, 4, 5], [0.7; 3]).unwrap();
        assert_eq!(g.len(), 60);
        assert_eq!(g.coords(g.index(2, 3, 4)), [2, 3, 4]);
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 3);
    }

    #[test]
    fn normalize_examples() {
        // Pad each 1D example across the 2x2 cross-section.
        let g = line(3);
        let v = ScalarVolume::from_fn(g, |x, _, _| [0.0, 0.5, 1.0][x]).unwrap();
        assert_eq!(normalize_intensity(&v).unwrap().data(), v.data());

        let g = line(2);
        let v = ScalarVolume::from_fn(g, |x, _, _| [2.0, 4.0][x]).unwrap();
        let out = normalize_intensity(&v).unwrap();
        assert_eq!(out.get(0, 1, 1), 0.0);
        assert_eq!(out.get(1, 0, 1), 1.0);

        let v = ScalarVolume::filled(line(3), 5.0);
        assert!(matches!(normalize_intensity(&v), Err(Error::ConstantVolume)));
    }

    #[test]
    fn one_hot_examples() {
        let g = line(2);
        let s = LabelVolume::new(g, vec![1, 2, 1, 2, 1, 2, 1, 2], 2).unwrap();
        let p = one_hot(&s);
        assert_eq!(p.channels(), 2);
        assert_eq!(p.get(0, 0, 0, 0), 1.0);
        assert_eq!(p.get(0, 1, 0, 0), 0.0);
        assert_eq!(p.get(1, 0, 0, 0), 0.0);
        assert_eq!(p.get(1, 1, 0, 0), 1.0);

        let s = LabelVolume::new(g, vec![0; 8], 2).unwrap();
        assert!(one_hot(&s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn argmax_examples() {
        let g = line(2);
        let n = g.len();
        let mk = |a: f64, b: f64| {
            let mut d = vec![a; n];
            d.extend(vec![b; n]);
            argmax_labels(&ProbVolume::new(g, 2, d).unwrap()).data()[0]
        };
        assert_eq!(mk(0.2, 0.7), 2);
        assert_eq!(mk(0.1, 0.1), 0);
        assert_eq!(mk(0.4, 0.4), 1);
    }

    #[test]
    fn invalid_inputs_rejected() {
        let g = line(2);
        assert!(matches!(
            LabelVolume::new(g, vec![3; 8], 2),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(ProbVolume::new(g, 2, vec![0.6; 16]).is_err());
        assert!(ProbVolume::new(g, 1, vec![1.5; 8]).is_err());
        assert!(ScalarVolume::new(g, vec![f64::INFINITY; 8]).is_err());
        assert!(matches!(
            ScalarVolume::new(g, vec![0.0; 7]),
            Err(Error::DataLength { .. })
        ));
    }

    fn label_volume() -> impl Strategy<Value = LabelVolume> {
        (2usize..6, 2usize..6, 2usize..6, 1u8..5).prop_flat_map(|(nx, ny, nz, k)| {
            proptest::collection::vec(0..=k, nx * ny * nz).prop_map(move |data| {
                LabelVolume::new(GridGeometry::unit([nx, ny, nz]).unwrap(), data, k).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn one_hot_argmax_round_trip(s in label_volume()) {
            let back = argmax_labels(&one_hot(&s));
            prop_assert_eq!(back, s);
        }

        #[test]
        fn normalize_is_idempotent(data in proptest::collection::vec(-100.0f64..100.0, 8)) {
            let v = ScalarVolume::new(GridGeometry::unit([2, 2, 2]).unwrap(), data).unwrap();
            if let Ok(once) = normalize_intensity(&v) {
                let twice = normalize_intensity(&once).unwrap();
                prop_assert_eq!(once.data(), twice.data());
                prop_assert_eq!(once.geom(), v.geom());
            }
        }
    }
}
