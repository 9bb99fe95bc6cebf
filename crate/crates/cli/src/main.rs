//! Command-line entry point for splitting, training, generation and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use wavegan::data::{build_manifest, load_image, proportional_split, scan_dataset, write_synthetic_dataset, Dataset, Partition, SplitManifest};
use wavegan::eval::classify::{augment_classify, Augmentation};
use wavegan::eval::metrics::RandomConvEmbedder;
use wavegan::eval::pipeline::{score_set, PipelineData};
use wavegan::eval::sweep::{ablate, shot_sweep, Ablation};
use wavegan::eval::visualize::visualize_bands;
use wavegan::eval::{generate_set, GenerationSet};
use wavegan::train::{run_training, RunOptions, Trainer};
use wavegan::{RunConfig, Tensor, Variant};

const INCOMPLETE: &str = "INCOMPLETE";

#[derive(Parser, Debug)]
#[command(name = "wavegan", version, about = "Few-shot image generation with wavelet skip connections")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file; defaults fill anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override such as `train.iterations=500`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Start from the small desk-scale preset instead of the full defaults.
    #[arg(long, global = true)]
    desk: bool,
    /// Name of the artifact directory under the output root.
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Sets the training, generation and split seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true, env = "WAVEGAN_OUT", default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic class-folder dataset.
    Synth {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Build the seen/unseen split manifest for `data.root`.
    Split,
    /// Train on the seen classes of `data.manifest`.
    Train {
        /// Continue the run in `--run-id` from its latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Generate images for every unseen class from its support images.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a generated set against the unseen query images.
    Evaluate {
        /// Directory written by `generate`.
        #[arg(long)]
        generated: PathBuf,
        /// Also run the augmentation classification experiment.
        #[arg(long)]
        classify: bool,
    },
    /// Write the band panel grid of one or more images.
    Decompose {
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Train and score every (variant, K) pair.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 3, 5])]
        shots: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values = ["mean", "base_index"])]
        variants: Vec<String>,
    },
    /// Train and score the ablation grid.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values = ["full", "wo_lof", "wo_ll", "wo_hl", "wo_l1"])]
        conditions: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
        seeds: Vec<u64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Split => "split",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::Decompose { .. } => "decompose",
            Command::Sweep { .. } => "sweep",
            Command::Ablate { .. } => "ablate",
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.extend([
            format!("train.seed={seed}"),
            format!("eval.generation_seed={seed}"),
            format!("data.split_seed={seed}"),
        ]);
    }
    let cfg = match (&common.config, common.desk) {
        (Some(path), _) => RunConfig::load(Some(path), &overrides)?,
        (None, true) => RunConfig::desk().with_overrides(&overrides)?,
        (None, false) => RunConfig::load(None, &overrides)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn default_run_id(command: &str) -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{command}-{secs}")
}

/// Creates `{out}/{run_id}` with the config snapshot, reproducibility record
/// and an INCOMPLETE marker that is removed only on success.
fn open_run_dir(common: &Common, command: &str, cfg: &RunConfig, reuse: bool) -> Result<PathBuf> {
    let run_id = common.run_id.clone().unwrap_or_else(|| default_run_id(command));
    if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id == "." || run_id == ".." {
        bail!("run id {run_id:?} must be a plain directory name");
    }
    let dir = common.out.join(&run_id);
    if dir.exists() && !reuse {
        bail!("{} already exists; choose another --run-id", dir.display());
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(INCOMPLETE), "").context("writing INCOMPLETE marker")?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?).context("writing config snapshot")?;
    let record = json!({
        "command": command,
        "run_id": run_id,
        "args": std::env::args().skip(1).collect::<Vec<_>>(),
        "seed": cfg.train.seed,
        "generation_seed": cfg.eval.generation_seed,
        "split_seed": cfg.data.split_seed,
        "code_version": env!("CARGO_PKG_VERSION"),
        "git_revision": option_env!("WAVEGAN_GIT_REVISION"),
    });
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)? + "\n").context("writing run record")?;
    Ok(dir)
}

fn finish(dir: &Path) -> Result<()> {
    fs::remove_file(dir.join(INCOMPLETE)).context("removing INCOMPLETE marker")
}

fn data_root(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .root
        .as_deref()
        .context("no dataset root; pass --set data.root=PATH or set it in the config")
}

fn manifest(cfg: &RunConfig) -> Result<SplitManifest> {
    let path = cfg
        .data
        .manifest
        .as_deref()
        .context("no split manifest; run `wavegan split` and pass --set data.manifest=PATH")?;
    let m = SplitManifest::read(path).with_context(|| format!("reading manifest {}", path.display()))?;
    m.validate()?;
    Ok(m)
}

fn checkpoint_label(path: &Path) -> String {
    path.display().to_string()
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Synth { root, classes, per_class, size } => {
            let seed = common.seed.unwrap_or(0);
            write_synthetic_dataset(root, *classes, *per_class, *size, seed)?;
            println!("wrote {classes} classes x {per_class} images to {}", root.display());
            Ok(())
        }
        Command::Split => {
            let cfg = load_config(common)?;
            let root = data_root(&cfg)?;
            let listing = scan_dataset(root)?;
            let (seen, unseen) = match (cfg.data.seen_count, cfg.data.unseen_count) {
                (Some(s), Some(u)) => (s, u),
                (None, None) => proportional_split(listing.len()),
                _ => bail!("set both data.seen_count and data.unseen_count, or neither"),
            };
            let dir = open_run_dir(common, "split", &cfg, false)?;
            let m = build_manifest(root, seen, unseen, cfg.data.sup_fraction, cfg.data.split_seed)?;
            let path = dir.join("manifest.json");
            m.write(&path)?;
            println!("{} seen / {} unseen classes -> {}", seen, unseen, path.display());
            finish(&dir)
        }
        Command::Train { resume } => {
            let cfg = load_config(common)?;
            let m = manifest(&cfg)?;
            let (seen, skipped) = Dataset::load(data_root(&cfg)?, &m, Partition::Seen, cfg.generator.image_size, None)?;
            if !skipped.is_empty() {
                eprintln!("warning: {} undecodable images skipped", skipped.len());
            }
            let dir = open_run_dir(common, "train", &cfg, *resume)?;
            let run_id = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let opts = RunOptions {
                run_id,
                resume: *resume,
                stop_after: None,
            };
            let outcome = run_training(&seen, &m, &cfg, &dir, &opts)?;
            match &outcome.final_checkpoint {
                Some(p) => println!("final checkpoint {}", p.display()),
                None => bail!("training stopped before the final checkpoint"),
            }
            finish(&dir)
        }
        Command::Generate { checkpoint } => {
            if !checkpoint.exists() {
                bail!("checkpoint {} not found; run `wavegan train` first", checkpoint.display());
            }
            let trainer = Trainer::load(checkpoint)?;
            let mut cfg = load_config(common)?;
            cfg.generator = trainer.config().generator.clone();
            let m = manifest(&cfg)?;
            let (support, _) = Dataset::load(data_root(&cfg)?, &m, Partition::UnseenSupport, cfg.generator.image_size, None)?;
            let dir = open_run_dir(common, "generate", &cfg, false)?;
            let set = generate_set(
                trainer.generator(),
                &support,
                cfg.generator.shots,
                cfg.eval.n_per_class,
                cfg.eval.generation_seed,
                cfg.eval.generation_batch,
                &checkpoint_label(checkpoint),
            )?;
            set.save(&dir.join("generated"))?;
            println!("{} classes x {} images -> {}", set.classes.len(), set.per_class(), dir.join("generated").display());
            finish(&dir)
        }
        Command::Evaluate { generated, classify } => {
            let cfg = load_config(common)?;
            if !generated.join("generation.json").exists() {
                bail!("{} is not a generated set; run `wavegan generate` first", generated.display());
            }
            let set = GenerationSet::load(generated, cfg.generator.image_size)?;
            let m = manifest(&cfg)?;
            let root = data_root(&cfg)?;
            let (query, _) = Dataset::load(root, &m, Partition::UnseenQuery, cfg.generator.image_size, None)?;
            let dir = open_run_dir(common, "evaluate", &cfg, false)?;
            let embedder = RandomConvEmbedder::new(cfg.generator.image_channels, cfg.eval.embed_seed)?;
            let scores = score_set(&set, &query, &embedder, cfg.eval.fid_eps)?;
            scores.write(&dir)?;
            println!("proxy FID {:.4}  perceptual-proxy {:.4}", scores.fid, scores.lpips_proxy);
            if *classify {
                let (seen, _) = Dataset::load(root, &m, Partition::Seen, cfg.generator.image_size, None)?;
                let (support, _) = Dataset::load(root, &m, Partition::UnseenSupport, cfg.generator.image_size, None)?;
                let name = root.file_name().unwrap_or_default().to_string_lossy().into_owned();
                let table = augment_classify(
                    Some(&seen),
                    &support,
                    &query,
                    &[("base", Augmentation::None), (set.provenance.variant.label(), Augmentation::Generated(&set))],
                    &name,
                    &cfg.discriminator,
                    &cfg.eval.classify,
                )?;
                table.write(&dir)?;
                for r in &table.rows {
                    println!("{:<12} accuracy {:.4}", r.condition, r.accuracy);
                }
            }
            finish(&dir)
        }
        Command::Decompose { images } => {
            let cfg = load_config(common)?;
            let dir = open_run_dir(common, "decompose", &cfg, false)?;
            let tensors = images
                .iter()
                .map(|p| load_image(p, cfg.generator.image_size).with_context(|| format!("loading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let batch = Tensor::stack(&tensors, 0)?;
            let meta = visualize_bands(&batch, &dir, "bands")?;
            println!("{}x{} panel grid -> {}", meta.rows, meta.cols, dir.join("bands.png").display());
            finish(&dir)
        }
        Command::Sweep { shots, variants } => {
            let cfg = load_config(common)?;
            let variants = variants
                .iter()
                .map(|v| parse_variant(v))
                .collect::<Result<Vec<_>>>()?;
            let m = manifest(&cfg)?;
            let data = PipelineData::load(data_root(&cfg)?, m, cfg.generator.image_size, None)?;
            let dir = open_run_dir(common, "sweep", &cfg, false)?;
            let report = shot_sweep(&data, &cfg, shots, &variants, &dir)?;
            print!("{}", report.to_csv());
            if report.rows.iter().any(|r| r.error.is_some()) {
                bail!("some sweep cells failed; partial table in {}", dir.display());
            }
            finish(&dir)
        }
        Command::Ablate { conditions, seeds } => {
            let cfg = load_config(common)?;
            let conditions = conditions
                .iter()
                .map(|c| Ablation::parse(c).with_context(|| format!("unknown ablation {c:?}")))
                .collect::<Result<Vec<_>>>()?;
            let m = manifest(&cfg)?;
            let data = PipelineData::load(data_root(&cfg)?, m, cfg.generator.image_size, None)?;
            let dir = open_run_dir(common, "ablate", &cfg, false)?;
            let table = ablate(&data, &cfg, &conditions, seeds, &dir)?;
            print!("{}", table.to_csv());
            finish(&dir)
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant> {
    match s {
        "mean" | "m" => Ok(Variant::Mean),
        "base_index" | "base" | "b" => Ok(Variant::BaseIndex),
        _ => bail!("unknown variant {s:?}; expected mean or base_index"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let command = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wavegan {command}: {e:#}");
            ExitCode::FAILURE
        }
    }
}
