//! Segmentation quality metrics: volume Dice, average surface distance,
//! surface Dice at a distance tolerance, and the 95th-percentile symmetric
//! surface distance.
//!
//! A surface is the set of label voxels with at least one face neighbour of a
//! different label (the grid border counts as different), placed at voxel
//! centres in millimetres. Distances are nearest-neighbour distances between
//! two such point sets, pooled over both directions.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

pub mod kdtree;

use kdtree::KdTree;

/// Default surface Dice tolerance in millimetres.
pub const SURFACE_TOLERANCE_MM: f64 = 0.7;

/// Boundary voxel centres of one label, in millimetres.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurfacePointSet {
    pub points: Vec<[f64; 3]>,
}

impl SurfacePointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn extract_surface(s: &LabelVolume, label: u8) -> SurfacePointSet {
    let g = s.geom();
    let dims = g.dims();
    let sp = g.spacing();
    let data = s.data();
    let points = (0..g.len())
        .filter_map(|i| {
            if data[i] != label {
                return None;
            }
            let p = g.coords(i);
            let mut boundary = false;
            for a in 0..3 {
                for step in [-1isize, 1] {
                    let q = p[a] as isize + step;
                    if q < 0 || q >= dims[a] as isize {
                        boundary = true;
                    } else {
                        let mut r = p;
                        r[a] = q as usize;
                        if data[g.index(r[0], r[1], r[2])] != label {
                            boundary = true;
                        }
                    }
                }
            }
            boundary.then(|| {
                [
                    p[0] as f64 * sp[0],
                    p[1] as f64 * sp[1],
                    p[2] as f64 * sp[2],
                ]
            })
        })
        .collect();
    SurfacePointSet { points }
}

/// Directed nearest-neighbour distances in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceDistances {
    /// For every point of the first surface, distance to the second.
    pub a_to_b: Vec<f64>,
    pub b_to_a: Vec<f64>,
}

impl SurfaceDistances {
    pub fn pooled(&self) -> impl Iterator<Item = f64> + '_ {
        self.a_to_b.iter().chain(&self.b_to_a).copied()
    }

    pub fn count(&self) -> usize {
        self.a_to_b.len() + self.b_to_a.len()
    }

    pub fn average(&self) -> f64 {
        self.pooled().sum::<f64>() / self.count() as f64
    }

    pub fn within(&self, tol_mm: f64) -> f64 {
        self.pooled().filter(|&d| d <= tol_mm).count() as f64 / self.count() as f64
    }

    /// Nearest-rank 95th percentile of the pooled distances.
    pub fn percentile95(&self) -> f64 {
        let mut all: Vec<f64> = self.pooled().collect();
        all.sort_by(f64::total_cmp);
        let rank = nearest_rank(all.len(), 95);
        all[rank - 1]
    }

    pub fn max(&self) -> f64 {
        self.pooled().fold(0.0, f64::max)
    }
}

/// 1-based nearest rank `ceil(pct * n / 100)`, at least 1.
pub fn nearest_rank(n: usize, pct: usize) -> usize {
    (pct * n).div_ceil(100).max(1)
}

fn directed(from: &SurfacePointSet, to: &KdTree) -> Vec<f64> {
    from.points
        .par_iter()
        .map(|p| to.nearest_dist2(p).sqrt())
        .collect()
}

pub fn surface_distances(a: &LabelVolume, b: &LabelVolume, label: u8) -> Result<SurfaceDistances> {
    a.geom().ensure_same(b.geom())?;
    let sa = extract_surface(a, label);
    let sb = extract_surface(b, label);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::EmptySurface(label));
    }
    let ta = KdTree::new(&sa.points);
    let tb = KdTree::new(&sb.points);
    Ok(SurfaceDistances {
        a_to_b: directed(&sa, &tb),
        b_to_a: directed(&sb, &ta),
    })
}

/// `2|A ∩ B| / (|A| + |B|)`; 1 when both are empty.
pub fn volume_dice(a: &LabelVolume, b: &LabelVolume, label: u8) -> Result<f64> {
    a.geom().ensure_same(b.geom())?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

pub fn avg_surface_distance(a: &LabelVolume, b: &LabelVolume, label: u8) -> Result<f64> {
    Ok(surface_distances(a, b, label)?.average())
}

pub fn surface_dice(a: &LabelVolume, b: &LabelVolume, label: u8, tol_mm: f64) -> Result<f64> {
    Ok(surface_distances(a, b, label)?.within(tol_mm))
}

pub fn md95(a: &LabelVolume, b: &LabelVolume, label: u8) -> Result<f64> {
    Ok(surface_distances(a, b, label)?.percentile95())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceMetrics {
    pub asd: f64,
    pub sd: f64,
    pub md95: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMetrics {
    pub label: u8,
    pub vd: f64,
    /// Absent when the label is missing from either volume.
    pub surface: Option<SurfaceMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub name: String,
    pub labels: Vec<u8>,
    pub vd: f64,
    pub surface: Option<SurfaceMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub labels: Vec<LabelMetrics>,
    pub groups: Vec<GroupMetrics>,
}

impl MetricReport {
    pub fn label(&self, label: u8) -> Option<&LabelMetrics> {
        self.labels.iter().find(|m| m.label == label)
    }

    pub fn mean_vd(&self) -> f64 {
        self.labels.iter().map(|m| m.vd).sum::<f64>() / self.labels.len() as f64
    }
}

/// Named label groups for aggregate rows; bone is label 1, cartilage the rest.
pub fn default_groups(num_structures: u8) -> Vec<(String, Vec<u8>)> {
    let mut groups = vec![("bone".to_string(), vec![1])];
    if num_structures >= 2 {
        groups.push(("cartilage".to_string(), (2..=num_structures).collect()));
    }
    groups
}

pub fn evaluate(pred: &LabelVolume, truth: &LabelVolume) -> Result<MetricReport> {
    evaluate_with_groups(pred, truth, &default_groups(truth.num_structures()))
}

pub fn evaluate_with_groups(
    pred: &LabelVolume,
    truth: &LabelVolume,
    groups: &[(String, Vec<u8>)],
) -> Result<MetricReport> {
    pred.geom().ensure_same(truth.geom())?;
    let k = pred.num_structures().max(truth.num_structures());
    let mut labels = Vec::with_capacity(k as usize);
    for label in 1..=k {
        let vd = volume_dice(pred, truth, label)?;
        let surface = match surface_distances(pred, truth, label) {
            Ok(d) => Some(SurfaceMetrics {
                asd: d.average(),
                sd: d.within(SURFACE_TOLERANCE_MM),
                md95: d.percentile95(),
            }),
            Err(Error::EmptySurface(_)) => None,
            Err(e) => return Err(e),
        };
        labels.push(LabelMetrics { label, vd, surface });
    }
    let groups = groups
        .iter()
        .map(|(name, members)| {
            let rows: Vec<&LabelMetrics> = labels
                .iter()
                .filter(|m| members.contains(&m.label))
                .collect();
            let vd = rows.iter().map(|m| m.vd).sum::<f64>() / rows.len().max(1) as f64;
            let surf: Vec<SurfaceMetrics> = rows.iter().filter_map(|m| m.surface).collect();
            let surface = (!surf.is_empty()).then(|| {
                let n = surf.len() as f64;
                SurfaceMetrics {
                    asd: surf.iter().map(|s| s.asd).sum::<f64>() / n,
                    sd: surf.iter().map(|s| s.sd).sum::<f64>() / n,
                    md95: surf.iter().map(|s| s.md95).sum::<f64>() / n,
                }
            });
            GroupMetrics {
                name: name.clone(),
                labels: members.clone(),
                vd,
                surface,
            }
        })
        .collect();
    Ok(MetricReport { labels, groups })
}
