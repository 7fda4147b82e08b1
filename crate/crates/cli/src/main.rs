//! `lamina`: generate phantom datasets, train and evaluate classifiers,
//! export saliency maps, attach crop boxes and run the region-finding
//! pipeline. Settings come from flags, then `LAMINA_*` environment
//! variables, then the `--config` file, then built-in defaults.

mod commands;
mod config;
mod exit;
mod rundir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use exit::Failure;
use rundir::{sha256_hex, RunDir};

#[derive(Parser, Debug)]
#[command(name = "lamina", version, about = "3D OCT glaucoma classification and region finding", after_help = exit::TABLE)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration. Relative paths inside it resolve against its directory.
    #[arg(long, global = true, env = "LAMINA_CONFIG")]
    config: Option<PathBuf>,
    /// Single seed (shorthand for --seeds N).
    #[arg(long, global = true, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds; `train` fits one model per seed.
    #[arg(long, global = true, env = "LAMINA_SEEDS", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory. Defaults to runs/<command>-<hash of the resolved config>.
    #[arg(long, global = true, env = "LAMINA_RUN_DIR")]
    run_dir: Option<PathBuf>,
    /// Worker threads for evaluation and saliency.
    #[arg(long, global = true, env = "LAMINA_THREADS")]
    threads: Option<usize>,
    /// Force a single worker thread.
    #[arg(long, global = true, env = "LAMINA_DETERMINISTIC", num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic optic-nerve-head dataset split by patient.
    Generate {
        /// Number of patients.
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Train one classifier per seed and report test metrics.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate checkpoints on a dataset, or score a precomputed CSV.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Repeatable; several checkpoints report mean (±std).
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// CSV of scan_id,label,score[,split].
        #[arg(long, conflicts_with_all = ["checkpoints", "manifest"])]
        scores: Option<PathBuf>,
        /// Crop each scan to its recorded crop box first.
        #[arg(long)]
        cropped: bool,
    },
    /// Export Grad-CAM maps and slice images.
    Saliency {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long = "checkpoint")]
        checkpoint: Option<PathBuf>,
        /// Repeatable scan id; defaults to the test split.
        #[arg(long = "scan")]
        scans: Vec<String>,
        #[arg(long)]
        layer: Option<String>,
    },
    /// Attach crop boxes from a JSON-lines file to a manifest.
    Crop {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Lines of {"scan_id": ..., "box": {"z": [a, b], "y": [..], "x": [..]}}; "*" matches every scan.
        #[arg(long = "box")]
        box_file: Option<PathBuf>,
    },
    /// Train, find the salient region, retrain with crop augmentation and
    /// test whether the region alone carries signal. Resumable.
    Diagfind {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Cropped evaluation set (scans with crop boxes).
        #[arg(long)]
        eval_manifest: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Saliency { .. } => "saliency",
            Command::Crop { .. } => "crop",
            Command::Diagfind { .. } => "diagfind",
        }
    }
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn resolve_paths(cfg: &mut RunConfig, base: &Path) {
    let fix = |p: &mut Option<PathBuf>| {
        if let Some(v) = p {
            *v = absolute(base, v);
        }
    };
    fix(&mut cfg.inputs.manifest);
    fix(&mut cfg.inputs.eval_manifest);
    fix(&mut cfg.inputs.box_file);
    fix(&mut cfg.inputs.scores);
    fix(&mut cfg.run_dir);
    for c in &mut cfg.inputs.checkpoints {
        *c = absolute(base, c);
    }
}

/// Merge the config file, environment and flags into one configuration.
fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let cwd = std::env::current_dir()?;
    let mut cfg = match &cli.global.config {
        Some(path) => {
            let path = absolute(&cwd, path);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
            let mut c = RunConfig::from_toml(&text, &path)?;
            resolve_paths(&mut c, path.parent().unwrap_or(&cwd));
            c
        }
        None => RunConfig::default(),
    };
    let g = &cli.global;
    if let Some(s) = g.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = &g.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    if let Some(d) = g.deterministic {
        cfg.deterministic = d;
    }
    if let Some(r) = &g.run_dir {
        cfg.run_dir = Some(absolute(&cwd, r));
    }
    let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if let Some(p) = v {
            *slot = Some(absolute(&cwd, p));
        }
    };
    match &cli.command {
        Command::Generate { patients } => {
            if let Some(n) = patients {
                cfg.dataset.patients = *n;
            }
        }
        Command::Train { manifest } => set(&mut cfg.inputs.manifest, manifest),
        Command::Eval { manifest, checkpoints, scores, cropped } => {
            set(&mut cfg.inputs.manifest, manifest);
            set(&mut cfg.inputs.scores, scores);
            if !checkpoints.is_empty() {
                cfg.inputs.checkpoints = checkpoints.iter().map(|c| absolute(&cwd, c)).collect();
            }
            if scores.is_some() {
                cfg.inputs.checkpoints.clear();
            }
            if *cropped {
                cfg.eval.cropped = true;
            }
        }
        Command::Saliency { manifest, checkpoint, scans, layer } => {
            set(&mut cfg.inputs.manifest, manifest);
            if let Some(c) = checkpoint {
                cfg.inputs.checkpoints = vec![absolute(&cwd, c)];
            }
            if !scans.is_empty() {
                cfg.saliency.scans = scans.clone();
            }
            if layer.is_some() {
                cfg.saliency.layer = layer.clone();
            }
        }
        Command::Crop { manifest, box_file } => {
            set(&mut cfg.inputs.manifest, manifest);
            set(&mut cfg.inputs.box_file, box_file);
        }
        Command::Diagfind { manifest, eval_manifest } => {
            set(&mut cfg.inputs.manifest, manifest);
            set(&mut cfg.inputs.eval_manifest, eval_manifest);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = resolve(&cli)?;
    let command = cli.command.name();
    // The stored config omits the directory so it can be replayed elsewhere.
    let run_dir = cfg.run_dir.take();
    let run_dir = match run_dir {
        Some(d) => d,
        None => {
            let hash = sha256_hex(cfg.to_toml()?.as_bytes());
            std::env::current_dir()?.join("runs").join(format!("{command}-{}", &hash[..12]))
        }
    };
    let mut dir = RunDir::open(&run_dir, command, &cfg)?;
    match cli.command {
        Command::Generate { .. } => commands::generate_dataset(&cfg, &mut dir)?,
        Command::Train { .. } => commands::train(&cfg, &mut dir)?,
        Command::Eval { .. } => commands::eval(&cfg, &mut dir)?,
        Command::Saliency { .. } => commands::saliency(&cfg, &mut dir)?,
        Command::Crop { .. } => commands::crop(&cfg, &mut dir)?,
        Command::Diagfind { .. } => commands::diagfind(&cfg, &mut dir)?,
    }
    dir.finish()?;
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(exit::USAGE as u8) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
