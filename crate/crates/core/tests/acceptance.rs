//! Acceptance suite. Every test checks one criterion at its stated tolerance
//! and prints a single `criterion N [...]: PASS|FAIL | details` line.
//!
//! The phantom experiments (criteria 5 to 7 and 9) run full 64³ refinements
//! and take a long time on few cores.

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use atlasrefine::fusion::{jlf_weights, plurality_vote, solve_weights, weighted_vote, FusionConfig, JlfConfig, WeightVolume};
use atlasrefine::io::vvf::{decode, encode};
use atlasrefine::io::{run_in_memory, PipelineInputs, Volume};
use atlasrefine::metrics::{extract_surface, nearest_rank, surface_distances, SURFACE_TOLERANCE_MM};
use atlasrefine::objective::{bending_energy, evaluate, img_loss, ncc, objective, soft_dice_loss, ObjectiveInputs};
use atlasrefine::phantom::{generate, mean_dice, true_residual_dice, PhantomConfig};
use atlasrefine::refine::refine_pyramid;
use atlasrefine::volume::one_hot;
use atlasrefine::{
    DisplacementField, Error, GridGeometry, LabelVolume, ObjectiveWeights, ProbVolume, RefineConfig, ScalarVolume,
};
use common::{cli, cli_ok, list_files, path_str, random_labels, unit_geom, verdict};

const PHANTOM_SEEDS: u64 = 10;

// ---------------------------------------------------------------- criterion 1

struct GradInstance {
    atlas: ScalarVolume,
    target: ScalarVolume,
    s_src: ProbVolume,
    s_tar: ProbVolume,
    f: DisplacementField,
}

fn random_prob(rng: &mut ChaCha8Rng, g: GridGeometry) -> ProbVolume {
    let data = (0..2 * g.len()).map(|_| rng.random_range(0.05..0.45)).collect();
    ProbVolume::new(g, 2, data).unwrap()
}

/// Random inputs whose sample points stay inside the grid and at least 0.1
/// voxel away from cell faces, and whose soft labels stay strictly inside
/// (0, 1), so every term is smooth around the evaluation point.
fn grad_instance(rng: &mut ChaCha8Rng) -> GradInstance {
    let n = 8;
    let g = unit_geom([n; 3]);
    let image = |rng: &mut ChaCha8Rng| {
        ScalarVolume::new(g, (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    };
    let atlas = image(rng);
    let target = image(rng);
    let s_src = random_prob(rng, g);
    let s_tar = random_prob(rng, g);
    let hi = n as f64 - 1.1;
    let mut data = vec![0.0; 3 * g.len()];
    for i in 0..g.len() {
        let x = g.coords(i);
        for c in 0..3 {
            let p = (x[c] as f64 + rng.random_range(-1.5..1.5)).clamp(0.1, hi);
            let p = p.floor() + (p - p.floor()).clamp(0.1, 0.9);
            data[c * g.len() + i] = p - x[c] as f64;
        }
    }
    let f = DisplacementField::new(g, data).unwrap();
    GradInstance {
        atlas,
        target,
        s_src,
        s_tar,
        f,
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

#[test]
fn criterion_1_gradient_matches_finite_differences() {
    let start = Instant::now();
    let h = 1e-3;
    let composite = ObjectiveWeights::new(3.0, 20000.0).unwrap();
    let grad = |inp: &ObjectiveInputs<'_>, f: &DisplacementField, a: f64, g: f64| {
        let w = ObjectiveWeights::new(a, g).unwrap();
        evaluate(inp, f, &w, true).unwrap().1.unwrap().data().to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    // img, seg, reg, composite
    let mut worst = [0.0f64; 4];
    let mut checked = [0usize; 4];
    for _ in 0..20 {
        let inst = grad_instance(&mut rng);
        let inp = ObjectiveInputs::new(&inst.atlas, &inst.target, &inst.s_src, &inst.s_tar).unwrap();
        let g00 = grad(&inp, &inst.f, 0.0, 0.0);
        let g10 = grad(&inp, &inst.f, 1.0, 0.0);
        let g01 = grad(&inp, &inst.f, 0.0, 1.0);
        let gc = grad(&inp, &inst.f, 3.0, 20000.0);
        let base = inst.f.data().to_vec();
        for c in 0..base.len() {
            let shifted = |d: f64| {
                let mut v = base.clone();
                v[c] += d;
                let f = DisplacementField::new(*inst.f.geom(), v).unwrap();
                evaluate(&inp, &f, &composite, false).unwrap().0
            };
            let (p, m) = (shifted(h), shifted(-h));
            let fd = [
                (p.img_term - m.img_term) / (2.0 * h),
                (p.seg_term - m.seg_term) / (2.0 * h),
                (p.reg_term - m.reg_term) / (2.0 * h),
                (p.total - m.total) / (2.0 * h),
            ];
            let an = [g00[c], g10[c] - g00[c], g01[c] - g00[c], gc[c]];
            for t in 0..4 {
                if an[t].abs().max(fd[t].abs()) > 1e-8 {
                    checked[t] += 1;
                    worst[t] = worst[t].max(rel_err(an[t], fd[t]));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|&e| e < 1e-4) && checked.iter().all(|&c| c > 0) && secs < 60.0;
    verdict(
        1,
        "gradient vs finite differences",
        pass,
        &format!(
            "max rel err img {:.2e} seg {:.2e} reg {:.2e} composite {:.2e} over {:?} components, {secs:.1} s",
            worst[0], worst[1], worst[2], worst[3], checked
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let g = unit_geom([9, 8, 7]);
    let mut worst_img = 0.0f64;
    let mut worst_dice = 0.0f64;
    let mut worst_ncc = 0.0f64;
    for _ in 0..20 {
        let a = ScalarVolume::new(g, (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let b = ScalarVolume::new(g, (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        worst_img = worst_img.max(img_loss(&a, &DisplacementField::zeros(g), &a).unwrap().abs());

        let labels = loop {
            let l = random_labels(&mut rng, g);
            if l.count(1) > 0 && l.count(2) > 0 {
                break l;
            }
        };
        let oh = one_hot(&labels);
        worst_dice = worst_dice.max(soft_dice_loss(&oh, &oh).unwrap());

        let (s, t) = (rng.random_range(0.1..5.0), rng.random_range(-3.0..3.0));
        let a2 = ScalarVolume::new(g, a.data().iter().map(|v| s * v + t).collect()).unwrap();
        let base = ncc(&a, &b).unwrap();
        worst_ncc = worst_ncc
            .max((ncc(&a2, &b).unwrap() - base).abs())
            .max((ncc(&b, &a).unwrap() - base).abs());
    }

    let gb = unit_geom([6, 7, 5]);
    let constant = DisplacementField::constant(gb, [1.5, -2.25, 0.75]);
    // Dyadic coefficients keep every stencil evaluation exact.
    let affine = DisplacementField::from_fn(gb, |x, y, z| {
        let (x, y, z) = (x as f64, y as f64, z as f64);
        [
            0.5 * x - 1.25 * y + 2.0 * z + 0.125,
            -0.75 * x + 0.25 * y - 0.5 * z,
            1.5 * x + 0.375 * y + 0.0625 * z - 3.0,
        ]
    })
    .unwrap();
    let be_const = bending_energy(&constant).unwrap();
    let be_affine = bending_energy(&affine).unwrap();
    let quad = DisplacementField::from_fn(unit_geom([5; 3]), |x, _, _| [(x * x) as f64, 0.0, 0.0]).unwrap();
    let be_quad = bending_energy(&quad).unwrap();

    let pass = worst_img <= 1e-12
        && worst_dice < 1e-6
        && worst_ncc <= 1e-12
        && be_const == 0.0
        && be_affine == 0.0
        && (be_quad - 2.4).abs() <= 1e-12;
    verdict(
        2,
        "loss identities",
        pass,
        &format!(
            "img_loss(a,a) {worst_img:.1e}, dice(s,s) {worst_dice:.1e}, ncc invariance/symmetry {worst_ncc:.1e}, \
             bending const {be_const} affine {be_affine} quadratic {be_quad}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 3

/// Boundary voxels of `label` (6-neighbourhood, grid faces count as
/// boundary) in mm, scanned in storage order.
fn oracle_surface(s: &LabelVolume, label: u8) -> Vec<[f64; 3]> {
    let g = s.geom();
    let [nx, ny, nz] = g.dims();
    let sp = g.spacing();
    let mut pts = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if s.get(x, y, z) != label {
                    continue;
                }
                let edge = x == 0 || y == 0 || z == 0 || x == nx - 1 || y == ny - 1 || z == nz - 1;
                let boundary = edge
                    || s.get(x - 1, y, z) != label
                    || s.get(x + 1, y, z) != label
                    || s.get(x, y - 1, z) != label
                    || s.get(x, y + 1, z) != label
                    || s.get(x, y, z - 1) != label
                    || s.get(x, y, z + 1) != label;
                if boundary {
                    pts.push([x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]]);
                }
            }
        }
    }
    pts
}

fn brute_directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    let (dx, dy, dz) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
                    dx * dx + dy * dy + dz * dz
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

#[test]
fn criterion_3_metrics_match_brute_force() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut pairs = 0;
    let mut compared = 0;
    let mut mismatches = Vec::new();
    while pairs < 50 {
        let dims = [
            rng.random_range(4..=32),
            rng.random_range(4..=32),
            rng.random_range(4..=32),
        ];
        let spacing = [
            rng.random_range(0.3..1.2),
            rng.random_range(0.3..1.2),
            rng.random_range(0.3..1.2),
        ];
        let g = GridGeometry::new(dims, spacing).unwrap();
        let a = random_labels(&mut rng, g);
        let b = random_labels(&mut rng, g);
        pairs += 1;
        for label in 1..=2u8 {
            let (sa, sb) = (oracle_surface(&a, label), oracle_surface(&b, label));
            let got = surface_distances(&a, &b, label);
            if sa.is_empty() || sb.is_empty() {
                if !matches!(got, Err(Error::EmptySurface(_))) {
                    mismatches.push(format!("pair {pairs} label {label}: expected EmptySurface"));
                }
                continue;
            }
            compared += 1;
            if extract_surface(&a, label).points != sa {
                mismatches.push(format!("pair {pairs} label {label}: surface points differ"));
            }
            let got = got.unwrap();
            let (ab, ba) = (brute_directed(&sa, &sb), brute_directed(&sb, &sa));
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            if bits(&got.a_to_b) != bits(&ab) || bits(&got.b_to_a) != bits(&ba) {
                mismatches.push(format!("pair {pairs} label {label}: distance lists differ"));
            }
            let pooled: Vec<f64> = ab.iter().chain(&ba).copied().collect();
            let total = pooled.len();
            let asd = pooled.iter().sum::<f64>() / total as f64;
            let sd = pooled.iter().filter(|&&d| d <= SURFACE_TOLERANCE_MM).count() as f64 / total as f64;
            let mut sorted = pooled.clone();
            sorted.sort_by(f64::total_cmp);
            let p95 = sorted[nearest_rank(total, 95) - 1];
            if got.average().to_bits() != asd.to_bits()
                || got.within(SURFACE_TOLERANCE_MM).to_bits() != sd.to_bits()
                || got.percentile95().to_bits() != p95.to_bits()
            {
                mismatches.push(format!("pair {pairs} label {label}: summary metrics differ"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches.is_empty() && compared > 0 && secs < 120.0;
    verdict(
        3,
        "metric oracle equivalence",
        pass,
        &format!(
            "{pairs} pairs, {compared} label comparisons bitwise, {} mismatches, {secs:.1} s {}",
            mismatches.len(),
            mismatches.first().map(String::as_str).unwrap_or("")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 4

fn oracle_jlf(imgs: &[ScalarVolume], target: &ScalarVolume, cfg: &JlfConfig, voxel: usize) -> Vec<f64> {
    let g = target.geom();
    let dims = g.dims();
    let [x, y, z] = g.coords(voxel);
    let n = imgs.len();
    let r = cfg.patch_radius as isize;
    let clamp = |c: usize, d: isize, axis: usize| (c as isize + d).clamp(0, dims[axis] as isize - 1) as usize;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                let (px, py, pz) = (clamp(x, dx, 0), clamp(y, dy, 1), clamp(z, dz, 2));
                let t = target.get(px, py, pz);
                let e: Vec<f64> = imgs.iter().map(|a| (a.get(px, py, pz) - t).abs()).collect();
                for i in 0..n {
                    for j in 0..n {
                        m[(i, j)] += e[i] * e[j];
                    }
                }
            }
        }
    }
    for i in 0..n {
        m[(i, i)] += cfg.ridge_eps;
    }
    let uniform = vec![1.0 / n as f64; n];
    let Some(w) = m.lu().solve(&DVector::from_element(n, 1.0)) else {
        return uniform;
    };
    let w: Vec<f64> = w.iter().map(|v| v.max(0.0)).collect();
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter().map(|v| v / s).collect()
    } else {
        uniform
    }
}

#[test]
fn criterion_4_fusion_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);

    let mut vote_mismatch = 0;
    for _ in 0..100 {
        let g = unit_geom([
            rng.random_range(2..=8),
            rng.random_range(2..=8),
            rng.random_range(2..=8),
        ]);
        let n = rng.random_range(1..=6);
        let labels: Vec<LabelVolume> = (0..n)
            .map(|_| {
                let data = (0..g.len()).map(|_| rng.random_range(0..=3u8)).collect();
                LabelVolume::new(g, data, 3).unwrap()
            })
            .collect();
        let weighted = weighted_vote(&labels, &WeightVolume::uniform(g, n)).unwrap().labels;
        if weighted != plurality_vote(&labels).unwrap() {
            vote_mismatch += 1;
        }
    }

    let cfg = JlfConfig::default();
    let g = unit_geom([16; 3]);
    let mut jlf_err = 0.0f64;
    for n in 1..=4 {
        for _ in 0..2 {
            let target = ScalarVolume::new(g, (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let imgs: Vec<ScalarVolume> = (0..n)
                .map(|_| {
                    let noise = rng.random_range(0.01..0.3);
                    let data = target
                        .data()
                        .iter()
                        .map(|t| (t + rng.random_range(-noise..noise)).clamp(0.0, 1.0))
                        .collect();
                    ScalarVolume::new(g, data).unwrap()
                })
                .collect();
            let got = jlf_weights(&imgs, &target, &cfg).unwrap().weights;
            for v in 0..g.len() {
                let want = oracle_jlf(&imgs, &target, &cfg, v);
                for (a, b) in got.at(v).iter().zip(&want) {
                    jlf_err = jlf_err.max((a - b).abs());
                }
            }
        }
    }

    let hand = solve_weights(&[1.0, 0.0, 0.0, 4.0], 2).unwrap();
    let hand_err = (hand[0] - 0.8).abs().max((hand[1] - 0.2).abs());

    let pass = vote_mismatch == 0 && jlf_err <= 1e-10 && hand_err <= 1e-10;
    verdict(
        4,
        "fusion correctness",
        pass,
        &format!(
            "uniform-vs-plurality mismatches {vote_mismatch}/100, jlf max abs err {jlf_err:.1e}, \
             hand case ({:.12}, {:.12})",
            hand[0], hand[1]
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------ criteria 5, 6 and 7

struct SeedRun {
    unrefined_consensus: f64,
    refined_consensus: f64,
    /// Objective at the returned field minus objective at the zero field, per atlas.
    objective_change: Vec<f64>,
    atlas_dice: Vec<f64>,
    iterations: Vec<usize>,
}

fn phantom(seed: u64, magnitude: f64) -> atlasrefine::phantom::PhantomSet {
    generate(&PhantomConfig {
        seed,
        deform_magnitude: magnitude,
        ..PhantomConfig::default()
    })
    .unwrap()
}

/// Refined and unrefined default pipelines on the default phantom, per seed.
fn default_runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let refine = RefineConfig::default();
        let fusion = FusionConfig::default();
        (0..PHANTOM_SEEDS)
            .map(|seed| {
                let set = phantom(seed, PhantomConfig::default().deform_magnitude);
                let inputs = PipelineInputs::from_phantom(&set);
                let plain = run_in_memory(&inputs, None, &fusion).unwrap();
                let refined = run_in_memory(&inputs, Some(&refine), &fusion).unwrap();
                let zero = DisplacementField::zeros(*set.target_img.geom());
                let objective_change = set
                    .atlases
                    .iter()
                    .zip(&refined.atlases)
                    .map(|(a, r)| {
                        let at = |f: &DisplacementField| {
                            objective(&a.img, &set.target_img, &a.pred, &set.target_pred, f, &refine.weights)
                                .unwrap()
                                .total
                        };
                        at(&r.field) - at(&zero)
                    })
                    .collect();
                let run = SeedRun {
                    unrefined_consensus: mean_dice(&plain.consensus, &set.target_labels).unwrap(),
                    refined_consensus: mean_dice(&refined.consensus, &set.target_labels).unwrap(),
                    objective_change,
                    atlas_dice: refined
                        .atlases
                        .iter()
                        .map(|r| mean_dice(&r.warped_labels, &set.target_labels).unwrap())
                        .collect(),
                    iterations: refined
                        .atlases
                        .iter()
                        .map(|r| r.reports.last().unwrap().iterations_run)
                        .collect(),
                };
                common::report_line(&format!(
                    "  seed {seed}: consensus {:.4} -> {:.4}, atlas dice {:?}",
                    run.unrefined_consensus,
                    run.refined_consensus,
                    run.atlas_dice.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>()
                ));
                run
            })
            .collect()
    })
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Refine atlas `i` of `set` alone; returns (warped-label Dice, iterations run).
fn refine_one(set: &atlasrefine::phantom::PhantomSet, i: usize, cfg: &RefineConfig) -> (f64, usize) {
    let a = &set.atlases[i];
    let zero = DisplacementField::zeros(*set.target_img.geom());
    let (f, reports) = refine_pyramid(&a.img, &set.target_img, &a.pred, &set.target_pred, &zero, cfg).unwrap();
    (
        true_residual_dice(set, &f, i).unwrap(),
        reports.last().unwrap().iterations_run,
    )
}

#[test]
fn criterion_5_refinement_improves_consensus() {
    let runs = default_runs();
    let before = mean(runs.iter().map(|r| r.unrefined_consensus));
    let after = mean(runs.iter().map(|r| r.refined_consensus));
    let worst_change = runs
        .iter()
        .flat_map(|r| r.objective_change.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let pass = after >= before + 0.02 && worst_change <= 0.0;
    verdict(
        5,
        "refinement improves fusion",
        pass,
        &format!(
            "mean consensus dice {before:.4} -> {after:.4} (gain {:+.4}, need +0.02) over {PHANTOM_SEEDS} seeds; \
             largest final-minus-initial objective {worst_change:.3e}",
            after - before
        ),
    );
    assert!(pass);
}

/// Atlases per seed used for the alpha comparison.
const ALPHA_ATLASES: usize = 2;

#[test]
fn criterion_6_segmentation_term_helps() {
    let runs = default_runs();
    let with_seg = mean(runs.iter().flat_map(|r| r.atlas_dice[..ALPHA_ATLASES].iter().copied()));
    let mut cfg = RefineConfig::default();
    cfg.weights.alpha = 0.0;
    let mut image_only = Vec::new();
    for seed in 0..PHANTOM_SEEDS {
        let set = phantom(seed, PhantomConfig::default().deform_magnitude);
        for i in 0..ALPHA_ATLASES {
            image_only.push(refine_one(&set, i, &cfg).0);
        }
    }
    let without_seg = mean(image_only);
    let pass = with_seg > without_seg;
    verdict(
        6,
        "segmentation term helps",
        pass,
        &format!(
            "mean warped-label dice alpha=3 {with_seg:.4} vs alpha=0 {without_seg:.4} \
             ({PHANTOM_SEEDS} seeds x {ALPHA_ATLASES} atlases)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_pre_alignment_matters() {
    let runs = default_runs();
    let cfg = RefineConfig::default();
    let mut dice = Vec::new();
    let mut iters = Vec::new();
    for magnitude in [1.0, 3.0, 6.0] {
        let (d, it): (Vec<f64>, Vec<f64>) = if magnitude == PhantomConfig::default().deform_magnitude {
            runs.iter()
                .map(|r| (r.atlas_dice[0], r.iterations[0] as f64))
                .unzip()
        } else {
            (0..PHANTOM_SEEDS)
                .map(|seed| {
                    let (d, it) = refine_one(&phantom(seed, magnitude), 0, &cfg);
                    (d, it as f64)
                })
                .unzip()
        };
        dice.push(mean(d));
        iters.push(mean(it));
    }
    let pass = dice[0] >= dice[1] && dice[1] >= dice[2] && iters[0] <= iters[1] && iters[1] <= iters[2];
    verdict(
        7,
        "pre-alignment quality matters",
        pass,
        &format!(
            "magnitudes 1/3/6: mean refined dice {:.4}/{:.4}/{:.4}, mean iterations {:.1}/{:.1}/{:.1} \
             ({PHANTOM_SEEDS} seeds, atlas 0)",
            dice[0], dice[1], dice[2], iters[0], iters[1], iters[2]
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_determinism_and_io() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("phantom");
    cli_ok(&[
        "phantom", "--out", path_str(&data), "--size", "16", "--num-atlases", "3", "--seed", "8",
        "--deform-magnitude", "1.5", "--deform-smoothness", "3",
    ]);
    let config = data.join("pipeline.toml");
    let run = |name: &str| {
        let out = dir.path().join(name);
        cli_ok(&["pipeline", "--config", path_str(&config), "--deterministic", "--out", path_str(&out)]);
        out
    };
    let (r1, r2) = (run("run1"), run("run2"));
    let files = list_files(&r1);
    let identical = files == list_files(&r2)
        && files
            .iter()
            .all(|f| std::fs::read(r1.join(f)).unwrap() == std::fs::read(r2.join(f)).unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let g = GridGeometry::new([5, 4, 3], [0.7, 0.8, 1.25]).unwrap();
    let reals = |rng: &mut ChaCha8Rng, len: usize| (0..len).map(|_| rng.random_range(0.0..0.5)).collect::<Vec<f64>>();
    let volumes: Vec<Volume> = vec![
        ScalarVolume::new(g, reals(&mut rng, g.len())).unwrap().into(),
        ScalarVolume::new(g, reals(&mut rng, g.len()).iter().map(|&v| v as f32 as f64).collect()).unwrap().into(),
        random_labels(&mut rng, g).into(),
        ProbVolume::new(g, 2, reals(&mut rng, 2 * g.len())).unwrap().into(),
        DisplacementField::new(g, reals(&mut rng, 3 * g.len())).unwrap().into(),
    ];
    let round_trip = volumes.iter().all(|v| decode(&encode(v)).unwrap() == *v);

    let good = encode(&volumes[2]);
    let mut bad_magic = good.clone();
    bad_magic[..4].copy_from_slice(b"VVF2");
    let truncated = &good[..good.len() - 1];
    let mut bad_json = good.clone();
    bad_json[8] = b'#';
    let header_len = u32::from_le_bytes(good[4..8].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&good[8..8 + header_len]).unwrap();
    header["dtype"] = "f32".into();
    let header = serde_json::to_vec(&header).unwrap();
    let mut wrong_dtype = b"VVF1".to_vec();
    wrong_dtype.extend_from_slice(&(header.len() as u32).to_le_bytes());
    wrong_dtype.extend_from_slice(&header);
    wrong_dtype.extend_from_slice(&good[8 + header_len..]);
    let errors_ok = matches!(decode(&bad_magic), Err(Error::BadMagic(_)))
        && matches!(decode(truncated), Err(Error::PayloadLengthMismatch { .. }))
        && matches!(decode(&bad_json), Err(Error::HeaderParse(_)))
        && matches!(decode(&wrong_dtype), Err(Error::KindDtypeMismatch { .. }));

    let broken = dir.path().join("broken.vvf");
    std::fs::write(&broken, &bad_magic).unwrap();
    let out = cli(&["eval", "--pred", path_str(&broken), "--truth", path_str(&broken)]);
    let cli_error = !out.status.success() && String::from_utf8_lossy(&out.stderr).contains("magic");

    let pass = identical && round_trip && errors_ok && cli_error;
    verdict(
        8,
        "determinism and I/O",
        pass,
        &format!(
            "deterministic runs identical: {identical} ({} files), round trips exact: {round_trip}, \
             malformed inputs rejected: {errors_ok}, CLI reports error: {cli_error}",
            files.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_9_end_to_end_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("phantom");
    let start = Instant::now();
    cli_ok(&["phantom", "--out", path_str(&data)]);
    let out = cli_ok(&["pipeline", "--config", path_str(&data.join("pipeline.toml"))]);
    let secs = start.elapsed().as_secs_f64();
    let run_dir = data.join("out");
    let files = list_files(&run_dir);
    let expected = ["consensus_labels.vvf", "metric_report.txt", "objective_report.txt", "fusion_report.txt"];
    let complete = expected.iter().all(|f| files.iter().any(|x| x == f));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let vd = stdout
        .lines()
        .find(|l| l.starts_with("vd = "))
        .unwrap_or("vd = ?")
        .to_string();
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let pass = complete && secs < 600.0;
    verdict(
        9,
        "end-to-end smoke",
        pass,
        &format!("64^3, 5 atlases, 200 iterations: {secs:.1} s on {threads} core(s), artifacts complete: {complete}, first {vd}"),
    );
    assert!(pass);
}
