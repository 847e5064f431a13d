//! ADAM refinement of a displacement field against the composite objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{evaluate, ObjectiveInputs, ObjectiveValue, ObjectiveWeights};
use crate::volume::{GridGeometry, ProbVolume, ScalarVolume};
use crate::warp::{sample_raw, DisplacementField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    #[serde(flatten)]
    pub weights: ObjectiveWeights,
    /// Step size in voxels.
    pub lr: f64,
    pub max_iters: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub stop_rel_tol: f64,
    pub stop_window: usize,
    pub pyramid_levels: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            weights: ObjectiveWeights::default(),
            lr: 0.01,
            max_iters: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            stop_rel_tol: 1e-5,
            stop_window: 10,
            pyramid_levels: 1,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.eps_adam > 0.0 && self.eps_adam.is_finite()) {
            return bad(format!("eps_adam must be positive, got {}", self.eps_adam));
        }
        if !(self.stop_rel_tol >= 0.0 && self.stop_rel_tol.is_finite()) {
            return bad(format!("stop_rel_tol must be >= 0, got {}", self.stop_rel_tol));
        }
        if self.stop_window == 0 {
            return bad("stop_window must be >= 1".into());
        }
        if self.pyramid_levels == 0 {
            return bad("pyramid_levels must be >= 1".into());
        }
        Ok(())
    }
}

/// First and second moment accumulators of ADAM.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    geom: GridGeometry,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(geom: GridGeometry) -> Self {
        let n = 3 * geom.len();
        Self {
            geom,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// One bias-corrected ADAM update of `f` in place.
    pub fn step(
        &mut self,
        f: &mut DisplacementField,
        g: &DisplacementField,
        cfg: &RefineConfig,
    ) -> Result<()> {
        self.geom.ensure_same(f.geom())?;
        self.geom.ensure_same(g.geom())?;
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        let fd = f.data_mut();
        for (((m, v), x), &gi) in self
            .m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(fd.iter_mut())
            .zip(g.data())
        {
            *m = b1 * *m + (1.0 - b1) * gi;
            *v = b2 * *v + (1.0 - b2) * gi * gi;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps_adam);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(
    state: &AdamState,
    f: &DisplacementField,
    g: &DisplacementField,
    cfg: &RefineConfig,
) -> Result<(AdamState, DisplacementField)> {
    let mut s = state.clone();
    let mut out = f.clone();
    s.step(&mut out, g, cfg)?;
    Ok((s, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    Converged,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::MaxIters => "max_iters",
            StopReason::Converged => "converged",
        }
    }
}

/// Objective trace of one refinement run. `values[0]` is the starting field.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    pub values: Vec<ObjectiveValue>,
    pub iterations_run: usize,
    pub stop_reason: StopReason,
    /// Iteration whose field was returned.
    pub best_iteration: usize,
}

impl ObjectiveReport {
    pub fn initial(&self) -> &ObjectiveValue {
        &self.values[0]
    }

    pub fn best(&self) -> &ObjectiveValue {
        &self.values[self.best_iteration]
    }
}

/// Minimize the objective from `f0` with ADAM; returns the best iterate seen.
pub fn refine_registration(
    atlas_img: &ScalarVolume,
    target_img: &ScalarVolume,
    s_src: &ProbVolume,
    s_tar: &ProbVolume,
    f0: &DisplacementField,
    cfg: &RefineConfig,
) -> Result<(DisplacementField, ObjectiveReport)> {
    cfg.validate()?;
    let inputs = ObjectiveInputs::new(atlas_img, target_img, s_src, s_tar)?;
    run_single_level(&inputs, f0, cfg)
}

fn run_single_level(
    inputs: &ObjectiveInputs<'_>,
    f0: &DisplacementField,
    cfg: &RefineConfig,
) -> Result<(DisplacementField, ObjectiveReport)> {
    inputs.geom().ensure_same(f0.geom())?;
    let w = &cfg.weights;
    let (v0, g0) = evaluate(inputs, f0, w, true)?;
    let mut grad = g0.expect("gradient requested");
    let mut values = vec![v0];
    let mut best_hist = vec![v0.total];
    let mut best = (v0.total, 0usize, f0.clone());
    let mut f = f0.clone();
    let mut state = AdamState::new(*f0.geom());
    let mut stop_reason = StopReason::MaxIters;
    let mut iterations_run = 0;

    for it in 1..=cfg.max_iters {
        state.step(&mut f, &grad, cfg)?;
        let (v, g) = evaluate(inputs, &f, w, true)?;
        grad = g.expect("gradient requested");
        values.push(v);
        iterations_run = it;
        if v.total < best.0 {
            best = (v.total, it, f.clone());
        }
        best_hist.push(best.0);
        if it >= cfg.stop_window {
            let before = best_hist[it - cfg.stop_window];
            if before - best.0 <= cfg.stop_rel_tol * before.abs() {
                stop_reason = StopReason::Converged;
                break;
            }
        }
    }

    let report = ObjectiveReport {
        values,
        iterations_run,
        stop_reason,
        best_iteration: best.1,
    };
    Ok((best.2, report))
}

// Coarse voxel i averages fine voxels 2i and 2i + 1 (when present).
fn coarse_geom(g: &GridGeometry) -> Result<GridGeometry> {
    let d = g.dims();
    let s = g.spacing();
    GridGeometry::new(
        [d[0].div_ceil(2), d[1].div_ceil(2), d[2].div_ceil(2)],
        [2.0 * s[0], 2.0 * s[1], 2.0 * s[2]],
    )
}

fn downsample_raw(data: &[f64], fine: &GridGeometry, coarse: &GridGeometry) -> Vec<f64> {
    let fd = fine.dims();
    (0..coarse.len())
        .map(|i| {
            let [x, y, z] = coarse.coords(i);
            let mut acc = 0.0;
            let mut count = 0usize;
            for zz in (2 * z)..(2 * z + 2).min(fd[2]) {
                for yy in (2 * y)..(2 * y + 2).min(fd[1]) {
                    for xx in (2 * x)..(2 * x + 2).min(fd[0]) {
                        acc += data[fine.index(xx, yy, zz)];
                        count += 1;
                    }
                }
            }
            acc / count as f64
        })
        .collect()
}

fn downsample_prob(p: &ProbVolume, coarse: &GridGeometry) -> ProbVolume {
    let mut data = Vec::with_capacity(coarse.len() * p.channels());
    for k in 0..p.channels() {
        data.extend(downsample_raw(p.channel(k), p.geom(), coarse));
    }
    ProbVolume::from_raw(*coarse, p.channels(), data)
}

fn downsample_field(f: &DisplacementField, coarse: &GridGeometry) -> DisplacementField {
    let mut data = Vec::with_capacity(coarse.len() * 3);
    for c in 0..3 {
        data.extend(
            downsample_raw(f.component(c), f.geom(), coarse)
                .into_iter()
                .map(|v| 0.5 * v),
        );
    }
    DisplacementField::from_raw(*coarse, data)
}

/// Trilinear upsampling of a coarse field onto `fine`, doubling the offsets.
pub fn upsample_field(coarse: &DisplacementField, fine: &GridGeometry) -> DisplacementField {
    let cg = coarse.geom();
    let n = fine.len();
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        let [x, y, z] = fine.coords(i);
        let p = [
            (x as f64 - 0.5) / 2.0,
            (y as f64 - 0.5) / 2.0,
            (z as f64 - 0.5) / 2.0,
        ];
        for c in 0..3 {
            data[c * n + i] = 2.0 * sample_raw(coarse.component(c), cg, p);
        }
    }
    DisplacementField::from_raw(*fine, data)
}

/// Coarse-to-fine refinement. Returns the final field and one report per
/// level, coarsest first. With one level this is exactly
/// [`refine_registration`].
pub fn refine_pyramid(
    atlas_img: &ScalarVolume,
    target_img: &ScalarVolume,
    s_src: &ProbVolume,
    s_tar: &ProbVolume,
    f0: &DisplacementField,
    cfg: &RefineConfig,
) -> Result<(DisplacementField, Vec<ObjectiveReport>)> {
    cfg.validate()?;
    if cfg.pyramid_levels == 1 {
        let (f, r) = refine_registration(atlas_img, target_img, s_src, s_tar, f0, cfg)?;
        return Ok((f, vec![r]));
    }
    let fine_inputs = ObjectiveInputs::new(atlas_img, target_img, s_src, s_tar)?;
    fine_inputs.geom().ensure_same(f0.geom())?;

    // Level 0 is the input grid.
    let mut geoms = vec![*atlas_img.geom()];
    for _ in 1..cfg.pyramid_levels {
        let next = coarse_geom(geoms.last().unwrap())?;
        if next.dims().iter().any(|&d| d < 3) {
            return Err(Error::ConfigInvalid(format!(
                "{} pyramid levels shrink the grid below 3 voxels per axis",
                cfg.pyramid_levels
            )));
        }
        geoms.push(next);
    }
    let mut atlases = vec![atlas_img.clone()];
    let mut targets = vec![target_img.clone()];
    let mut srcs = vec![s_src.clone()];
    let mut tars = vec![s_tar.clone()];
    let mut inits = vec![f0.clone()];
    for l in 1..geoms.len() {
        let (prev, cur) = (geoms[l - 1], geoms[l]);
        atlases.push(ScalarVolume::from_raw(
            cur,
            downsample_raw(atlases[l - 1].data(), &prev, &cur),
        ));
        targets.push(ScalarVolume::from_raw(
            cur,
            downsample_raw(targets[l - 1].data(), &prev, &cur),
        ));
        srcs.push(downsample_prob(&srcs[l - 1], &cur));
        tars.push(downsample_prob(&tars[l - 1], &cur));
        inits.push(downsample_field(&inits[l - 1], &cur));
    }

    let mut reports = Vec::with_capacity(geoms.len());
    let mut current = inits.pop().unwrap();
    for l in (0..geoms.len()).rev() {
        let inputs = ObjectiveInputs::new(&atlases[l], &targets[l], &srcs[l], &tars[l])?;
        let (f, report) = run_single_level(&inputs, &current, cfg)?;
        reports.push(report);
        current = if l > 0 {
            upsample_field(&f, &geoms[l - 1])
        } else {
            f
        };
    }

    // Never hand back something worse than the starting field.
    let (start, _) = evaluate(&fine_inputs, f0, &cfg.weights, false)?;
    let (end, _) = evaluate(&fine_inputs, &current, &cfg.weights, false)?;
    if end.total > start.total {
        current = f0.clone();
    }
    Ok((current, reports))
}
