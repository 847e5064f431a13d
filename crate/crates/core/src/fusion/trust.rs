//! Per-atlas trust probabilities and how they modulate fusion weights.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fusion::vote::WeightVolume;
use crate::volume::GridGeometry;

/// Probability, per voxel, that one atlas's propagated label is correct.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustVolume {
    geom: GridGeometry,
    data: Vec<f64>,
}

impl TrustVolume {
    pub fn new(geom: GridGeometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::DataLength {
                expected: geom.len(),
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidProbability {
                index,
                value: data[index],
            });
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: GridGeometry, p: f64) -> Result<Self> {
        Self::new(geom, vec![p; geom.len()])
    }

    pub fn geom(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// How one trust probability modulates one fusion weight.
pub trait TrustCombiner: Send + Sync {
    fn name(&self) -> &'static str;
    fn combine(&self, weight: f64, trust: f64, threshold: f64) -> f64;
}

pub struct Multiply;

impl TrustCombiner for Multiply {
    fn name(&self) -> &'static str {
        "multiply"
    }

    fn combine(&self, weight: f64, trust: f64, _threshold: f64) -> f64 {
        weight * trust
    }
}

pub struct Gate;

impl TrustCombiner for Gate {
    fn name(&self) -> &'static str {
        "gate"
    }

    fn combine(&self, weight: f64, trust: f64, threshold: f64) -> f64 {
        if trust >= threshold {
            weight
        } else {
            0.0
        }
    }
}

type CombinerFactory = fn() -> Box<dyn TrustCombiner>;

/// Trust combiners by name.
pub struct TrustRegistry {
    entries: BTreeMap<&'static str, CombinerFactory>,
}

impl TrustRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register("multiply", || Box::new(Multiply));
        r.register("gate", || Box::new(Gate));
        r
    }

    pub fn register(&mut self, name: &'static str, factory: CombinerFactory) {
        self.entries.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn TrustCombiner>> {
        self.entries
            .get(name)
            .map(|f| f())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "trust",
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustOutcome {
    pub weights: WeightVolume,
    /// Voxels where every combined weight was zero and the input weights were kept.
    pub reverted_voxels: usize,
}

/// Combine weights with per-atlas trust, then renormalize each voxel.
pub fn apply_trust(
    w: &WeightVolume,
    trust: &[TrustVolume],
    threshold: f64,
    combiner: &dyn TrustCombiner,
) -> Result<TrustOutcome> {
    if trust.len() != w.num_atlases() {
        return Err(Error::ConfigInvalid(format!(
            "{} trust volumes for {} atlases",
            trust.len(),
            w.num_atlases()
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::ConfigInvalid(format!(
            "trust threshold {threshold} outside [0, 1]"
        )));
    }
    for t in trust {
        w.geom().ensure_same(t.geom())?;
    }
    let n = w.num_atlases();
    let mut reverted_voxels = 0;
    let mut data = Vec::with_capacity(w.data().len());
    let mut row = vec![0.0; n];
    for v in 0..w.geom().len() {
        let orig = w.at(v);
        for a in 0..n {
            row[a] = combiner.combine(orig[a], trust[a].data()[v], threshold);
        }
        let mut sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            reverted_voxels += 1;
            row.copy_from_slice(orig);
            sum = row.iter().sum();
        }
        if sum > 0.0 {
            data.extend(row.iter().map(|x| x / sum));
        } else {
            data.extend_from_slice(&row);
        }
    }
    Ok(TrustOutcome {
        weights: WeightVolume::from_raw(*w.geom(), n, data),
        reverted_voxels,
    })
}
