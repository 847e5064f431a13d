//! Label fusion.
//!
//! Every fusion method implements [`FusionStrategy`] and is registered by name
//! in a [`FusionRegistry`]. The pipeline and CLI pick a strategy at runtime
//! from the configured method name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ScalarVolume};

pub mod jlf;
pub mod trust;
pub mod vote;

pub use jlf::{jlf_weights, solve_weights, JlfConfig, JlfOutcome};
pub use trust::{apply_trust, Gate, Multiply, TrustCombiner, TrustOutcome, TrustRegistry, TrustVolume};
pub use vote::{plurality_vote, weighted_vote, VoteOutcome, WeightVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Registered strategy name.
    pub method: String,
    pub jlf: JlfConfig,
    pub trust_mode: String,
    pub trust_threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            method: "jlf".into(),
            jlf: JlfConfig::default(),
            trust_mode: "multiply".into(),
            trust_threshold: 0.5,
        }
    }
}

/// Everything a fusion strategy may consume. Strategies ignore what they do
/// not need and fail on what they need but is missing.
#[derive(Debug, Clone, Copy)]
pub struct FusionInput<'a> {
    pub labels: &'a [LabelVolume],
    pub images: &'a [ScalarVolume],
    pub target: Option<&'a ScalarVolume>,
    pub trust: Option<&'a [TrustVolume]>,
    pub weights: Option<&'a WeightVolume>,
}

impl<'a> FusionInput<'a> {
    pub fn labels_only(labels: &'a [LabelVolume]) -> Self {
        Self {
            labels,
            images: &[],
            target: None,
            trust: None,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FusionDiagnostics {
    pub degenerate_voxels: usize,
    pub solve_failures: usize,
    pub trust_reverted_voxels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutcome {
    pub labels: LabelVolume,
    pub diagnostics: FusionDiagnostics,
}

pub trait FusionStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn fuse(&self, input: &FusionInput<'_>) -> Result<FusionOutcome>;
}

/// Plurality voting; ignores images, trust and weights.
pub struct Plurality;

impl FusionStrategy for Plurality {
    fn name(&self) -> &'static str {
        "plurality"
    }

    fn fuse(&self, input: &FusionInput<'_>) -> Result<FusionOutcome> {
        Ok(FusionOutcome {
            labels: plurality_vote(input.labels)?,
            diagnostics: FusionDiagnostics::default(),
        })
    }
}

struct TrustStep {
    combiner: Box<dyn TrustCombiner>,
    threshold: f64,
}

impl TrustStep {
    fn from_config(cfg: &FusionConfig) -> Result<Self> {
        Ok(Self {
            combiner: TrustRegistry::with_defaults().create(&cfg.trust_mode)?,
            threshold: cfg.trust_threshold,
        })
    }

    fn vote(
        &self,
        weights: &WeightVolume,
        input: &FusionInput<'_>,
        diag: &mut FusionDiagnostics,
    ) -> Result<LabelVolume> {
        let out = match input.trust {
            Some(trust) => {
                let t = apply_trust(weights, trust, self.threshold, self.combiner.as_ref())?;
                diag.trust_reverted_voxels = t.reverted_voxels;
                weighted_vote(input.labels, &t.weights)?
            }
            None => weighted_vote(input.labels, weights)?,
        };
        diag.degenerate_voxels = out.degenerate_voxels;
        Ok(out.labels)
    }
}

/// JLF weights from warped atlas images, optional trust, weighted vote.
pub struct JointLabelFusion {
    jlf: JlfConfig,
    trust: TrustStep,
}

impl FusionStrategy for JointLabelFusion {
    fn name(&self) -> &'static str {
        "jlf"
    }

    fn fuse(&self, input: &FusionInput<'_>) -> Result<FusionOutcome> {
        let target = input
            .target
            .ok_or_else(|| Error::ConfigInvalid("jlf fusion needs the target image".into()))?;
        if input.images.len() != input.labels.len() {
            return Err(Error::ConfigInvalid(format!(
                "jlf fusion needs one image per atlas: {} images, {} label volumes",
                input.images.len(),
                input.labels.len()
            )));
        }
        let jlf = jlf_weights(input.images, target, &self.jlf)?;
        let mut diagnostics = FusionDiagnostics {
            solve_failures: jlf.solve_failures,
            ..Default::default()
        };
        let labels = self.trust.vote(&jlf.weights, input, &mut diagnostics)?;
        Ok(FusionOutcome {
            labels,
            diagnostics,
        })
    }
}

/// Weighted vote with externally supplied weights (and optional trust).
pub struct ExternalWeights {
    trust: TrustStep,
}

impl FusionStrategy for ExternalWeights {
    fn name(&self) -> &'static str {
        "weighted"
    }

    fn fuse(&self, input: &FusionInput<'_>) -> Result<FusionOutcome> {
        let weights = input
            .weights
            .ok_or_else(|| Error::ConfigInvalid("weighted fusion needs a weight volume".into()))?;
        let mut diagnostics = FusionDiagnostics::default();
        let labels = self.trust.vote(weights, input, &mut diagnostics)?;
        Ok(FusionOutcome {
            labels,
            diagnostics,
        })
    }
}

pub type StrategyFactory =
    Box<dyn Fn(&FusionConfig) -> Result<Box<dyn FusionStrategy>> + Send + Sync>;

/// Fusion strategies by name.
pub struct FusionRegistry {
    factories: BTreeMap<String, StrategyFactory>,
}

impl FusionRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// `plurality`, `jlf` and `weighted`.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register("plurality", Box::new(|_| Ok(Box::new(Plurality))));
        r.register(
            "jlf",
            Box::new(|cfg| {
                cfg.jlf.validate()?;
                Ok(Box::new(JointLabelFusion {
                    jlf: cfg.jlf,
                    trust: TrustStep::from_config(cfg)?,
                }))
            }),
        );
        r.register(
            "weighted",
            Box::new(|cfg| {
                Ok(Box::new(ExternalWeights {
                    trust: TrustStep::from_config(cfg)?,
                }))
            }),
        );
        r
    }

    pub fn register(&mut self, name: impl Into<String>, factory: StrategyFactory) {
        self.factories.insert(name.into(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, name: &str, cfg: &FusionConfig) -> Result<Box<dyn FusionStrategy>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "fusion",
                name: name.to_string(),
                available: self.names().join(", "),
            })?;
        factory(cfg)
    }
}

/// Fuse with the strategy named in `cfg.method`.
pub fn fuse(input: &FusionInput<'_>, cfg: &FusionConfig) -> Result<FusionOutcome> {
    FusionRegistry::with_defaults()
        .create(&cfg.method, cfg)?
        .fuse(input)
}
