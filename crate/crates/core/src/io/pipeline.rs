//! End-to-end driver: refine every atlas, warp its labels, fuse, score.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionConfig, FusionDiagnostics, FusionInput, TrustVolume};
use crate::io::config::PipelineConfig;
use crate::io::report::{metric_report_text, objective_report_text};
use crate::io::vvf::{read_trust, read_volume, write_volume, Volume};
use crate::metrics::{evaluate, MetricReport};
use crate::phantom::PhantomSet;
use crate::refine::{refine_pyramid, ObjectiveReport, RefineConfig};
use crate::volume::{GridGeometry, LabelVolume, ProbVolume, ScalarVolume};
use crate::warp::{warp_labels, warp_scalar, DisplacementField};

pub const CONSENSUS_FILE: &str = "consensus_labels.vvf";
pub const OBJECTIVE_REPORT_FILE: &str = "objective_report.txt";
pub const METRIC_REPORT_FILE: &str = "metric_report.txt";
pub const FUSION_REPORT_FILE: &str = "fusion_report.txt";

pub fn refined_field_file(i: usize) -> String {
    format!("atlas_{i}_refined_field.vvf")
}

pub fn warped_labels_file(i: usize) -> String {
    format!("atlas_{i}_warped_labels.vvf")
}

#[derive(Debug, Clone)]
pub struct AtlasInput {
    /// Used in diagnostics.
    pub name: String,
    pub img: ScalarVolume,
    pub labels: LabelVolume,
    pub pred: Option<ProbVolume>,
    pub init_field: Option<DisplacementField>,
    pub trust: Option<TrustVolume>,
}

#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub target_name: String,
    pub target_img: ScalarVolume,
    pub target_pred: Option<ProbVolume>,
    pub truth: Option<LabelVolume>,
    pub atlases: Vec<AtlasInput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtlasResult {
    pub field: DisplacementField,
    /// Empty when refinement is disabled.
    pub reports: Vec<ObjectiveReport>,
    pub warped_labels: LabelVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub consensus: LabelVolume,
    pub atlases: Vec<AtlasResult>,
    pub diagnostics: FusionDiagnostics,
    pub metrics: Option<MetricReport>,
}

fn load<T>(stage: &'static str, path: &Path, f: impl FnOnce(Volume) -> Result<T>) -> Result<T> {
    read_volume(path)
        .and_then(f)
        .map_err(|e| e.at_stage(stage, path.display().to_string()))
}

impl PipelineInputs {
    /// In-memory inputs for a phantom set: zero initial fields, surrogate
    /// predictions, ground truth attached.
    pub fn from_phantom(set: &PhantomSet) -> Self {
        Self {
            target_name: "target".into(),
            target_img: set.target_img.clone(),
            target_pred: Some(set.target_pred.clone()),
            truth: Some(set.target_labels.clone()),
            atlases: set
                .atlases
                .iter()
                .enumerate()
                .map(|(i, a)| AtlasInput {
                    name: format!("atlas_{i}"),
                    img: a.img.clone(),
                    labels: a.labels.clone(),
                    pred: Some(a.pred.clone()),
                    init_field: None,
                    trust: None,
                })
                .collect(),
        }
    }

    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let target_img = load("load", &cfg.target_image, Volume::into_image)?;
        let target_pred = cfg
            .target_prediction
            .as_ref()
            .map(|p| load("load", p, Volume::into_prob))
            .transpose()?;
        let truth = cfg
            .truth_labels
            .as_ref()
            .map(|p| load("load", p, Volume::into_labels))
            .transpose()?;
        let atlases = (0..cfg.num_atlases())
            .map(|i| {
                let opt = |list: &[PathBuf]| list.get(i).cloned();
                Ok(AtlasInput {
                    name: cfg.atlas_images[i].display().to_string(),
                    img: load("load", &cfg.atlas_images[i], Volume::into_image)?,
                    labels: load("load", &cfg.atlas_labels[i], Volume::into_labels)?,
                    pred: opt(&cfg.atlas_predictions)
                        .map(|p| load("load", &p, Volume::into_prob))
                        .transpose()?,
                    init_field: opt(&cfg.atlas_fields)
                        .map(|p| load("load", &p, Volume::into_field))
                        .transpose()?,
                    trust: opt(&cfg.trust)
                        .map(|p| read_trust(&p).map_err(|e| e.at_stage("load", p.display().to_string())))
                        .transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            target_name: cfg.target_image.display().to_string(),
            target_img,
            target_pred,
            truth,
            atlases,
        })
    }

    fn check(&self) -> Result<()> {
        if self.atlases.is_empty() {
            return Err(Error::EmptyAtlasSet);
        }
        let g = self.target_img.geom();
        let stage = |e: Error, name: &str| e.at_stage("load", name.to_string());
        if let Some(t) = &self.truth {
            g.ensure_same(t.geom()).map_err(|e| stage(e, "truth labels"))?;
        }
        for a in &self.atlases {
            g.ensure_same(a.img.geom()).map_err(|e| stage(e, &a.name))?;
            g.ensure_same(a.labels.geom()).map_err(|e| stage(e, &a.name))?;
            if let Some(f) = &a.init_field {
                g.ensure_same(f.geom()).map_err(|e| stage(e, &a.name))?;
            }
            if let Some(t) = &a.trust {
                g.ensure_same(t.geom()).map_err(|e| stage(e, &a.name))?;
            }
        }
        let trusts = self.atlases.iter().filter(|a| a.trust.is_some()).count();
        if trusts != 0 && trusts != self.atlases.len() {
            return Err(Error::ConfigInvalid(
                "trust maps must be given for every atlas or none".into(),
            ));
        }
        Ok(())
    }
}

/// Stand-in segmentation inputs when none are supplied; only valid with alpha = 0.
fn empty_prediction(g: GridGeometry) -> ProbVolume {
    ProbVolume::from_raw(g, 1, vec![0.0; g.len()])
}

fn run_atlas(
    inputs: &PipelineInputs,
    atlas: &AtlasInput,
    refine: Option<&RefineConfig>,
) -> Result<AtlasResult> {
    let g = *inputs.target_img.geom();
    let f0 = atlas
        .init_field
        .clone()
        .unwrap_or_else(|| DisplacementField::zeros(g));
    let (field, reports) = match refine {
        Some(cfg) => {
            let fallback;
            let (s_src, s_tar) = match (&atlas.pred, &inputs.target_pred) {
                (Some(s), Some(t)) => (s, t),
                (None, None) if cfg.weights.alpha == 0.0 => {
                    fallback = empty_prediction(g);
                    (&fallback, &fallback)
                }
                _ => {
                    return Err(Error::ConfigInvalid(
                        "refinement with alpha > 0 needs atlas and target predictions".into(),
                    ))
                }
            };
            refine_pyramid(&atlas.img, &inputs.target_img, s_src, s_tar, &f0, cfg)
                .map_err(|e| e.at_stage("refine", atlas.name.clone()))?
        }
        None => (f0, Vec::new()),
    };
    let warped_labels =
        warp_labels(&atlas.labels, &field).map_err(|e| e.at_stage("warp", atlas.name.clone()))?;
    Ok(AtlasResult {
        field,
        reports,
        warped_labels,
    })
}

/// Run refinement, warping, fusion and (with truth) evaluation in memory.
/// Atlases are processed concurrently on the current rayon pool.
pub fn run_in_memory(
    inputs: &PipelineInputs,
    refine: Option<&RefineConfig>,
    fusion: &FusionConfig,
) -> Result<PipelineOutcome> {
    inputs.check()?;
    if let Some(cfg) = refine {
        cfg.validate()?;
    }
    let atlases = inputs
        .atlases
        .par_iter()
        .map(|a| run_atlas(inputs, a, refine))
        .collect::<Result<Vec<_>>>()?;

    let labels: Vec<LabelVolume> = atlases.iter().map(|a| a.warped_labels.clone()).collect();
    let images: Vec<ScalarVolume> = inputs
        .atlases
        .par_iter()
        .zip(&atlases)
        .map(|(a, r)| warp_scalar(&a.img, &r.field))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_stage("warp", inputs.target_name.clone()))?;
    let trust: Option<Vec<TrustVolume>> = inputs.atlases.iter().map(|a| a.trust.clone()).collect();
    let input = FusionInput {
        labels: &labels,
        images: &images,
        target: Some(&inputs.target_img),
        trust: trust.as_deref(),
        weights: None,
    };
    let fused = fuse(&input, fusion).map_err(|e| e.at_stage("fuse", inputs.target_name.clone()))?;
    let metrics = inputs
        .truth
        .as_ref()
        .map(|t| evaluate(&fused.labels, t))
        .transpose()
        .map_err(|e| e.at_stage("eval", "truth labels"))?;
    Ok(PipelineOutcome {
        consensus: fused.labels,
        atlases,
        diagnostics: fused.diagnostics,
        metrics,
    })
}

fn fusion_report_text(cfg: &PipelineConfig, d: &FusionDiagnostics) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "[fusion]");
    let _ = writeln!(out, "method = {}", cfg.fusion.method);
    let _ = writeln!(out, "trust_mode = {}", cfg.fusion.trust_mode);
    let _ = writeln!(out, "trust_threshold = {}", cfg.fusion.trust_threshold);
    let _ = writeln!(out, "num_atlases = {}", cfg.num_atlases());
    let _ = writeln!(out, "refinement = {}", if cfg.refine_enabled { "enabled" } else { "disabled" });
    let _ = writeln!(out, "degenerate_voxels = {}", d.degenerate_voxels);
    let _ = writeln!(out, "solve_failures = {}", d.solve_failures);
    let _ = writeln!(out, "trust_reverted_voxels = {}", d.trust_reverted_voxels);
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::io(path, e).at_stage("write", path.display().to_string()))
}

fn write_vol(v: Volume, path: &Path) -> Result<()> {
    write_volume(&v, path).map_err(|e| e.at_stage("write", path.display().to_string()))
}

/// Load inputs, run the pipeline, and write every artifact to `output_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let inputs = PipelineInputs::load(cfg)?;
    let refine = cfg.refine_enabled.then_some(&cfg.refine);
    let outcome = run_in_memory(&inputs, refine, &cfg.fusion)?;

    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(dir, e).at_stage("write", dir.display().to_string()))?;
    write_vol(outcome.consensus.clone().into(), &dir.join(CONSENSUS_FILE))?;
    let mut objective = String::new();
    for (i, a) in outcome.atlases.iter().enumerate() {
        write_vol(a.field.clone().into(), &dir.join(refined_field_file(i)))?;
        write_vol(a.warped_labels.clone().into(), &dir.join(warped_labels_file(i)))?;
        objective.push_str(&objective_report_text(i, &a.reports));
    }
    if !cfg.refine_enabled {
        objective.push_str("[objective]\nrefinement = disabled\n");
    }
    write_text(&dir.join(OBJECTIVE_REPORT_FILE), &objective)?;
    write_text(
        &dir.join(FUSION_REPORT_FILE),
        &fusion_report_text(cfg, &outcome.diagnostics),
    )?;
    if let Some(m) = &outcome.metrics {
        write_text(&dir.join(METRIC_REPORT_FILE), &metric_report_text(m))?;
    }
    Ok(outcome)
}

/// Write a phantom set as VVF1 files plus a `pipeline.toml` that runs the
/// full pipeline on it with ground truth attached.
pub fn write_phantom_set(set: &PhantomSet, dir: &Path) -> Result<PipelineConfig> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(dir, e).at_stage("write", dir.display().to_string()))?;
    let file = |name: String| PathBuf::from(name);
    write_vol(set.target_img.clone().into(), &dir.join("target_img.vvf"))?;
    write_vol(set.target_labels.clone().into(), &dir.join("target_labels.vvf"))?;
    write_vol(set.target_pred.clone().into(), &dir.join("target_pred.vvf"))?;
    let n = set.atlases.len();
    let mut cfg = PipelineConfig::new(
        file("target_img.vvf".into()),
        (0..n).map(|i| file(format!("atlas_{i}_img.vvf"))).collect(),
        (0..n).map(|i| file(format!("atlas_{i}_labels.vvf"))).collect(),
        file("out".into()),
    );
    cfg.target_prediction = Some(file("target_pred.vvf".into()));
    cfg.truth_labels = Some(file("target_labels.vvf".into()));
    cfg.atlas_predictions = (0..n).map(|i| file(format!("atlas_{i}_pred.vvf"))).collect();
    for (i, a) in set.atlases.iter().enumerate() {
        write_vol(a.img.clone().into(), &dir.join(&cfg.atlas_images[i]))?;
        write_vol(a.labels.clone().into(), &dir.join(&cfg.atlas_labels[i]))?;
        write_vol(a.pred.clone().into(), &dir.join(&cfg.atlas_predictions[i]))?;
        write_vol(
            a.true_field.clone().into(),
            &dir.join(format!("atlas_{i}_true_field.vvf")),
        )?;
    }
    write_text(&dir.join("pipeline.toml"), &cfg.to_toml_string())?;
    write_text(
        &dir.join("phantom.toml"),
        &toml::to_string(&set.config).expect("phantom config serializes"),
    )?;
    Ok(cfg)
}
