//! TOML pipeline configuration.
//!
//! Relative paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::refine::RefineConfig;

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub target_image: PathBuf,
    /// Soft prediction for the target; required when atlas predictions are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_prediction: Option<PathBuf>,
    /// Ground-truth labels; when present a metric report is written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_labels: Option<PathBuf>,
    pub atlas_images: Vec<PathBuf>,
    pub atlas_labels: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub atlas_predictions: Vec<PathBuf>,
    /// Initial (pre-registration) fields; zero fields when omitted.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub atlas_fields: Vec<PathBuf>,
    /// Per-atlas trust maps in target space.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trust: Vec<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub refine_enabled: bool,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
}

impl PipelineConfig {
    pub fn new(target_image: PathBuf, atlas_images: Vec<PathBuf>, atlas_labels: Vec<PathBuf>, output_dir: PathBuf) -> Self {
        Self {
            target_image,
            target_prediction: None,
            truth_labels: None,
            atlas_images,
            atlas_labels,
            atlas_predictions: Vec::new(),
            atlas_fields: Vec::new(),
            trust: Vec::new(),
            output_dir,
            refine_enabled: true,
            refine: RefineConfig::default(),
            fusion: FusionConfig::default(),
        }
    }

    pub fn num_atlases(&self) -> usize {
        self.atlas_images.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.atlas_images.len();
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if n == 0 {
            return bad("at least one atlas is required".into());
        }
        if self.atlas_labels.len() != n {
            return bad(format!(
                "{n} atlas images but {} atlas label volumes",
                self.atlas_labels.len()
            ));
        }
        for (name, list) in [
            ("atlas_predictions", &self.atlas_predictions),
            ("atlas_fields", &self.atlas_fields),
            ("trust", &self.trust),
        ] {
            if !list.is_empty() && list.len() != n {
                return bad(format!("{name} has {} entries for {n} atlases", list.len()));
            }
        }
        if self.atlas_predictions.is_empty() != self.target_prediction.is_none() {
            return bad("atlas_predictions and target_prediction must be given together".into());
        }
        if self.refine_enabled && self.atlas_predictions.is_empty() && self.refine.weights.alpha != 0.0 {
            return bad("refinement with alpha > 0 needs predicted segmentations".into());
        }
        self.refine.validate()?;
        self.fusion.jlf.validate()?;
        if !(0.0..=1.0).contains(&self.fusion.trust_threshold) {
            return bad(format!(
                "trust_threshold {} outside [0, 1]",
                self.fusion.trust_threshold
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Read, resolve relative paths against the file's directory, validate.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_relative_to(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.target_image);
        fix(&mut self.output_dir);
        if let Some(p) = self.target_prediction.as_mut() {
            fix(p);
        }
        if let Some(p) = self.truth_labels.as_mut() {
            fix(p);
        }
        for list in [
            &mut self.atlas_images,
            &mut self.atlas_labels,
            &mut self.atlas_predictions,
            &mut self.atlas_fields,
            &mut self.trust,
        ] {
            list.iter_mut().for_each(fix);
        }
    }
}
