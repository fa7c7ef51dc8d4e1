//! `sfp`: train the toy network, extract keypoints, build and shrink maps,
//! localize queries and score the results.

mod commands;
mod config;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sfp_core::pyramid::DescriptorMode;

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration (exit 2).
    Usage(String),
    /// Missing, unreadable or corrupt files (exit 3).
    Io(String),
    /// The pipeline could not produce a result (exit 4).
    Pipeline(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Pipeline(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
            Failure::Pipeline(m) => write!(f, "pipeline failure: {m}"),
        }
    }
}

impl From<sfp_core::Error> for Failure {
    fn from(e: sfp_core::Error) -> Self {
        use sfp_core::Error as E;
        match e {
            E::Io(_) | E::Corrupt(_) | E::Version { .. } => Failure::Io(e.to_string()),
            _ => Failure::Pipeline(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Short,
}

impl From<ModeArg> for DescriptorMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => DescriptorMode::Full,
            ModeArg::Short => DescriptorMode::Short,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sfp", version, about = "Sparse feature pyramid keypoints, maps and localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML settings file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pyramid levels, comma separated (e.g. 3,2,1).
    #[arg(long, global = true, value_delimiter = ',')]
    levels: Option<Vec<u8>>,
    /// Descriptor mode.
    #[arg(long, global = true)]
    mode: Option<ModeArg>,
    /// Keypoint score threshold.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Compression weight for training.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Map frames retrieved per query.
    #[arg(long, global = true)]
    top_k: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the toy autoencoder and write a checkpoint and loss trace.
    TrainToy {
        /// Directory of PNG images; synthetic images are used when absent.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Loss trace path (JSON lines); defaults next to the checkpoint.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Extract keypoint files from images with a trained checkpoint.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of `<stem>.png` or `<stem>.color.png` images, with
        /// optional `<stem>.pose.txt` and `<stem>.depth.png`.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a landmark map from posed keypoint files.
    BuildMap {
        /// Directory of `<stem>.kp` with `<stem>.pose.txt` and optional `<stem>.kpdepth`.
        #[arg(long)]
        keypoints: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the byte accounting of a map.
    MapStats {
        map: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Convert a map to short descriptors.
    Shorten {
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localize query keypoint files against a map.
    Localize {
        #[arg(long)]
        map: PathBuf,
        /// Directory of query `<stem>.kp` files.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        /// Report path (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Exit with status 4 when any query fails to localize.
        #[arg(long)]
        strict: bool,
    },
    /// Score a localization report against ground-truth poses.
    Evaluate {
        #[arg(long)]
        reports: PathBuf,
        /// Directory of `<query>.pose.txt` files.
        #[arg(long)]
        ground_truth: PathBuf,
        /// Map used, for the size column.
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long, default_value = "sfp")]
        method: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Emit the summary as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Write synthetic data to disk.
    Synth {
        #[command(subcommand)]
        kind: SynthKind,
    },
    /// Mean matching accuracy over image pairs related by homographies.
    Mma {
        /// Directory of pair folders (`a.kp`, `b.kp`, `H.txt`) or of image
        /// sequences (`1.*` .. `N.*`, `H_1_k`).
        #[arg(long)]
        pairs: PathBuf,
        /// Checkpoint used to extract keypoints from image sequences.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum SynthKind {
    /// Posed mapping frames, held-out queries and intrinsics.
    Scene {
        #[arg(long)]
        out: PathBuf,
        /// Level-1 pixel noise sigma.
        #[arg(long)]
        noise: Option<f64>,
        /// Fraction of displaced observations.
        #[arg(long)]
        outliers: Option<f64>,
        /// Also write a query looking at an unmapped volume.
        #[arg(long)]
        disjoint: bool,
    },
    /// Keypoint pairs related by random homographies.
    Homography {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        noise: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let flags = config::Overrides {
        seed: cli.seed,
        levels: cli.levels,
        mode: cli.mode.map(Into::into),
        tau: cli.tau,
        lambda: cli.lambda,
        top_k: cli.top_k,
    };
    let mut settings = config::Settings::load(cli.config.as_deref(), &flags)?;
    match cli.command {
        Command::TrainToy { images, steps, lr, out, trace } => {
            if let Some(s) = steps {
                settings.train.steps = s;
            }
            if let Some(lr) = lr {
                settings.train.learning_rate = lr;
            }
            commands::train_toy(&settings, images.as_deref(), &out, trace.as_deref())
        }
        Command::Extract { checkpoint, images, out } => commands::extract(&settings, &checkpoint, &images, &out),
        Command::BuildMap { keypoints, intrinsics, out } => commands::build_map(&settings, &keypoints, &intrinsics, &out),
        Command::MapStats { map, json } => commands::map_stats(&map, json),
        Command::Shorten { map, out } => commands::shorten(&map, &out),
        Command::Localize { map, queries, intrinsics, out, strict } => {
            commands::localize(&settings, &map, &queries, &intrinsics, &out, strict)
        }
        Command::Evaluate { reports, ground_truth, map, method, out, json } => {
            commands::evaluate(&reports, &ground_truth, map.as_deref(), &method, out.as_deref(), json)
        }
        Command::Synth { kind: SynthKind::Scene { out, noise, outliers, disjoint } } => {
            if let Some(n) = noise {
                settings.synth.noise_px = n;
            }
            if let Some(r) = outliers {
                settings.synth.outlier_rate = r;
            }
            commands::synth_scene(&settings, &out, disjoint)
        }
        Command::Synth { kind: SynthKind::Homography { out, noise } } => {
            if let Some(n) = noise {
                settings.homography.noise_px = n;
            }
            commands::synth_homography(&settings, &out)
        }
        Command::Mma { pairs, checkpoint, out } => commands::mma(&settings, &pairs, checkpoint.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("sfp: {f}");
            ExitCode::from(f.code())
        }
    }
}
