use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use atlasrefine::fusion::{fuse, FusionConfig, FusionInput, TrustVolume, WeightVolume};
use atlasrefine::io::pipeline::{run_pipeline, write_phantom_set};
use atlasrefine::io::vvf::read_trust;
use atlasrefine::io::{metric_report_text, objective_report_text, read_volume, write_volume, PipelineConfig, Volume};
use atlasrefine::metrics::evaluate;
use atlasrefine::phantom::{generate, PhantomConfig};
use atlasrefine::refine::refine_pyramid;
use atlasrefine::warp::{warp_labels, DisplacementField};
use atlasrefine::RefineConfig;

#[derive(Parser)]
#[command(name = "atlasrefine", version, about = "Atlas registration refinement and label fusion")]
struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Single-threaded run with fixed reduction order.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct FusionFlags {
    /// Fusion method (plurality, jlf, weighted).
    #[arg(long)]
    fusion: Option<String>,
    /// How trust maps modulate weights (multiply, gate).
    #[arg(long)]
    trust_mode: Option<String>,
    #[arg(long)]
    trust_threshold: Option<f64>,
}

impl FusionFlags {
    fn apply(&self, cfg: &mut FusionConfig) {
        if let Some(m) = &self.fusion {
            cfg.method = m.clone();
        }
        if let Some(m) = &self.trust_mode {
            cfg.trust_mode = m.clone();
        }
        if let Some(t) = self.trust_threshold {
            cfg.trust_threshold = t;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic atlas/target set and a pipeline config for it.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        /// TOML phantom config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Cubic grid size.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        num_atlases: Option<usize>,
        #[arg(long)]
        deform_magnitude: Option<f64>,
        #[arg(long)]
        deform_smoothness: Option<f64>,
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
    /// Refine one atlas-to-target field.
    Refine {
        #[arg(long)]
        atlas_img: PathBuf,
        #[arg(long)]
        target_img: PathBuf,
        #[arg(long)]
        atlas_pred: Option<PathBuf>,
        #[arg(long)]
        target_pred: Option<PathBuf>,
        /// Initial field; zero when omitted.
        #[arg(long)]
        init_field: Option<PathBuf>,
        /// Atlas labels to warp with the refined field.
        #[arg(long)]
        atlas_labels: Option<PathBuf>,
        /// TOML refinement settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse label volumes already in target space.
    Fuse {
        #[arg(long, num_args = 1.., required = true)]
        labels: Vec<PathBuf>,
        /// Warped atlas images (for jlf).
        #[arg(long, num_args = 1..)]
        images: Vec<PathBuf>,
        #[arg(long)]
        target_img: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        trust: Vec<PathBuf>,
        /// Per-voxel weights as an n-channel prob volume (for weighted).
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        flags: FusionFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a segmentation against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refine, warp, fuse and evaluate from a pipeline config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        no_refine: bool,
        #[command(flatten)]
        flags: FusionFlags,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_typed<T>(path: &Path, f: impl FnOnce(Volume) -> atlasrefine::Result<T>) -> anyhow::Result<T> {
    read_volume(path)
        .and_then(f)
        .with_context(|| format!("reading {}", path.display()))
}

fn write(v: Volume, path: &Path) -> anyhow::Result<()> {
    write_volume(&v, path).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Phantom {
            out,
            config,
            seed,
            size,
            num_atlases,
            deform_magnitude,
            deform_smoothness,
            noise_sigma,
        } => {
            let mut cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => PhantomConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = size {
                cfg.dims = [n; 3];
            }
            if let Some(n) = num_atlases {
                cfg.num_atlases = n;
            }
            if let Some(m) = deform_magnitude {
                cfg.deform_magnitude = m;
            }
            if let Some(s) = deform_smoothness {
                cfg.deform_smoothness = s;
            }
            if let Some(s) = noise_sigma {
                cfg.noise_sigma = s;
            }
            let set = generate(&cfg)?;
            write_phantom_set(&set, &out)?;
            println!("wrote phantom set to {}", out.display());
        }
        Command::Refine {
            atlas_img,
            target_img,
            atlas_pred,
            target_pred,
            init_field,
            atlas_labels,
            config,
            out,
        } => {
            let cfg: RefineConfig = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => RefineConfig::default(),
            };
            let a = read_typed(&atlas_img, Volume::into_image)?;
            let t = read_typed(&target_img, Volume::into_image)?;
            let (s_src, s_tar) = match (atlas_pred, target_pred) {
                (Some(s), Some(t)) => (read_typed(&s, Volume::into_prob)?, read_typed(&t, Volume::into_prob)?),
                (None, None) => bail!("--atlas-pred and --target-pred are required"),
                _ => bail!("--atlas-pred and --target-pred must be given together"),
            };
            let f0 = match init_field {
                Some(p) => read_typed(&p, Volume::into_field)?,
                None => DisplacementField::zeros(*t.geom()),
            };
            let (f, reports) = refine_pyramid(&a, &t, &s_src, &s_tar, &f0, &cfg)?;
            create_dir(&out)?;
            write(f.clone().into(), &out.join("refined_field.vvf"))?;
            if let Some(p) = atlas_labels {
                let labels = read_typed(&p, Volume::into_labels)?;
                write(warp_labels(&labels, &f)?.into(), &out.join("warped_labels.vvf"))?;
            }
            let text = objective_report_text(0, &reports);
            std::fs::write(out.join("objective_report.txt"), &text)?;
            print!("{text}");
        }
        Command::Fuse {
            labels,
            images,
            target_img,
            trust,
            weights,
            flags,
            out,
        } => {
            let mut cfg = FusionConfig::default();
            flags.apply(&mut cfg);
            let labels = labels
                .iter()
                .map(|p| read_typed(p, Volume::into_labels))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let images = images
                .iter()
                .map(|p| read_typed(p, Volume::into_image))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let target = target_img
                .map(|p| read_typed(&p, Volume::into_image))
                .transpose()?;
            let trust: Vec<TrustVolume> = trust
                .iter()
                .map(|p| read_trust(p).with_context(|| format!("reading {}", p.display())))
                .collect::<anyhow::Result<_>>()?;
            let weights = match weights {
                Some(p) => {
                    let w = read_typed(&p, Volume::into_prob)?;
                    let (g, n) = (*w.geom(), w.channels());
                    let mut data = vec![0.0; g.len() * n];
                    for k in 0..n {
                        for (v, &x) in w.channel(k).iter().enumerate() {
                            data[v * n + k] = x;
                        }
                    }
                    Some(WeightVolume::new(g, n, data)?)
                }
                None => None,
            };
            let input = FusionInput {
                labels: &labels,
                images: &images,
                target: target.as_ref(),
                trust: (!trust.is_empty()).then_some(trust.as_slice()),
                weights: weights.as_ref(),
            };
            let fused = fuse(&input, &cfg)?;
            create_dir(&out)?;
            write(fused.labels.into(), &out.join("consensus_labels.vvf"))?;
            let d = fused.diagnostics;
            println!("method = {}", cfg.method);
            println!("degenerate_voxels = {}", d.degenerate_voxels);
            println!("solve_failures = {}", d.solve_failures);
            println!("trust_reverted_voxels = {}", d.trust_reverted_voxels);
        }
        Command::Eval { pred, truth, out } => {
            let p = read_typed(&pred, Volume::into_labels)?;
            let t = read_typed(&truth, Volume::into_labels)?;
            let text = metric_report_text(&evaluate(&p, &t)?);
            if let Some(o) = out {
                std::fs::write(&o, &text).with_context(|| format!("writing {}", o.display()))?;
            }
            print!("{text}");
        }
        Command::Pipeline {
            config,
            no_refine,
            flags,
            out,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if no_refine {
                cfg.refine_enabled = false;
            }
            flags.apply(&mut cfg.fusion);
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            cfg.validate()?;
            let outcome = run_pipeline(&cfg)?;
            println!("output_dir = {}", cfg.output_dir.display());
            if let Some(m) = &outcome.metrics {
                print!("{}", metric_report_text(m));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = if cli.deterministic { 1 } else { cli.threads };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return ExitCode::FAILURE;
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
