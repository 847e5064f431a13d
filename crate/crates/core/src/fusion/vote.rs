use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{GridGeometry, LabelVolume};

/// Per-voxel, per-atlas nonnegative fusion weights, stored voxel-major
/// (`weights[voxel * n + atlas]`).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVolume {
    geom: GridGeometry,
    num_atlases: usize,
    data: Vec<f64>,
}

impl WeightVolume {
    pub fn new(geom: GridGeometry, num_atlases: usize, data: Vec<f64>) -> Result<Self> {
        if num_atlases == 0 {
            return Err(Error::EmptyAtlasSet);
        }
        let expected = geom.len() * num_atlases;
        if data.len() != expected {
            return Err(Error::DataLength {
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::ConfigInvalid(format!(
                "weight {} at position {i} is negative or non-finite",
                data[i]
            )));
        }
        Ok(Self {
            geom,
            num_atlases,
            data,
        })
    }

    pub fn uniform(geom: GridGeometry, num_atlases: usize) -> Self {
        let w = 1.0 / num_atlases as f64;
        Self {
            geom,
            num_atlases,
            data: vec![w; geom.len() * num_atlases],
        }
    }

    pub(crate) fn from_raw(geom: GridGeometry, num_atlases: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), geom.len() * num_atlases);
        Self {
            geom,
            num_atlases,
            data,
        }
    }

    pub fn geom(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn num_atlases(&self) -> usize {
        self.num_atlases
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Weights of every atlas at one voxel.
    pub fn at(&self, voxel: usize) -> &[f64] {
        &self.data[voxel * self.num_atlases..(voxel + 1) * self.num_atlases]
    }
}

/// Consensus labels plus the count of voxels whose weights were all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteOutcome {
    pub labels: LabelVolume,
    pub degenerate_voxels: usize,
}

pub(crate) fn check_atlases(labels: &[LabelVolume]) -> Result<(GridGeometry, u8)> {
    let first = labels.first().ok_or(Error::EmptyAtlasSet)?;
    for l in &labels[1..] {
        first.geom().ensure_same(l.geom())?;
        if l.num_structures() != first.num_structures() {
            return Err(Error::ConfigInvalid(format!(
                "atlases disagree on the number of structures: {} vs {}",
                first.num_structures(),
                l.num_structures()
            )));
        }
    }
    Ok((*first.geom(), first.num_structures()))
}

// Lowest label wins ties because only a strictly larger score replaces the best.
#[inline]
fn argmax(scores: &[f64]) -> u8 {
    let mut best = 0;
    for l in 1..scores.len() {
        if scores[l] > scores[best] {
            best = l;
        }
    }
    best as u8
}

#[inline]
fn plurality_at(labels: &[LabelVolume], i: usize, scores: &mut [f64]) -> u8 {
    scores.iter_mut().for_each(|s| *s = 0.0);
    for l in labels {
        scores[l.data()[i] as usize] += 1.0;
    }
    argmax(scores)
}

/// Most frequent label per voxel; ties go to the lowest label.
pub fn plurality_vote(labels: &[LabelVolume]) -> Result<LabelVolume> {
    let (geom, k) = check_atlases(labels)?;
    let data = (0..geom.len())
        .into_par_iter()
        .map_init(
            || vec![0.0; k as usize + 1],
            |scores, i| plurality_at(labels, i, scores),
        )
        .collect();
    Ok(LabelVolume::from_raw(geom, data, k))
}

/// Weighted argmax over labels. Voxels whose weights are all zero fall back to
/// plurality and are counted.
pub fn weighted_vote(labels: &[LabelVolume], w: &WeightVolume) -> Result<VoteOutcome> {
    let (geom, k) = check_atlases(labels)?;
    geom.ensure_same(w.geom())?;
    if w.num_atlases() != labels.len() {
        return Err(Error::ConfigInvalid(format!(
            "{} weight channels for {} atlases",
            w.num_atlases(),
            labels.len()
        )));
    }
    let voted: Vec<(u8, bool)> = (0..geom.len())
        .into_par_iter()
        .map_init(
            || vec![0.0; k as usize + 1],
            |scores, i| {
                let wi = w.at(i);
                if wi.iter().all(|&x| x == 0.0) {
                    return (plurality_at(labels, i, scores), true);
                }
                scores.iter_mut().for_each(|s| *s = 0.0);
                for (a, l) in labels.iter().enumerate() {
                    scores[l.data()[i] as usize] += wi[a];
                }
                (argmax(scores), false)
            },
        )
        .collect();
    let degenerate_voxels = voted.iter().filter(|v| v.1).count();
    let data = voted.into_iter().map(|v| v.0).collect();
    Ok(VoteOutcome {
        labels: LabelVolume::from_raw(geom, data, k),
        degenerate_voxels,
    })
}
