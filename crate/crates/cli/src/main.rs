use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use maskfield_cli::commands;
use maskfield_cli::config::RunConfig;
use maskfield_cli::input::ClassifierSource;

#[derive(Parser)]
#[command(name = "maskfield", version, about = "Area-conditioned attribution masks from implicit neural representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command; each overrides the config file.
#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// `key = value` config file applied before the flags below.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Single seed (shorthand for --seeds N).
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated, strictly increasing raw areas.
    #[arg(long, value_delimiter = ',')]
    area_grid: Option<Vec<f64>>,
    /// Absolute probability threshold Φ₀.
    #[arg(long, conflicts_with = "phi0_rel")]
    phi0: Option<f64>,
    /// Relative threshold τ, Φ₀ = τ·Φ(I).
    #[arg(long)]
    phi0_rel: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_r: Option<f64>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    blur_sigma_frac: Option<f64>,
    #[arg(long)]
    filter_radius_frac: Option<f64>,
    #[arg(long)]
    cutoff: Option<f64>,
    /// Any config key, as KEY=VALUE; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write the effective configuration to stdout and exit.
    #[arg(long)]
    dump_config: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut flags: Vec<(&str, String)> = Vec::new();
        if let Some(s) = self.seed {
            flags.push(("seeds", s.to_string()));
        }
        if let Some(s) = &self.seeds {
            flags.push(("seeds", s.iter().map(u64::to_string).collect::<Vec<_>>().join(",")));
        }
        if let Some(o) = &self.out {
            flags.push(("out", o.display().to_string()));
        }
        if let Some(g) = &self.area_grid {
            flags.push(("area_grid", join(g)));
        }
        if let Some(p) = self.phi0 {
            flags.push(("threshold", format!("absolute:{p}")));
        }
        if let Some(t) = self.phi0_rel {
            flags.push(("threshold", format!("relative:{t}")));
        }
        let scalars = [
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("lambda_r", self.lambda_r.map(|v| v.to_string())),
            ("lambda_d", self.lambda_d.map(|v| v.to_string())),
            ("blur_sigma_frac", self.blur_sigma_frac.map(|v| v.to_string())),
            ("filter_radius_frac", self.filter_radius_frac.map(|v| v.to_string())),
            ("cutoff", self.cutoff.map(|v| v.to_string())),
        ];
        flags.extend(scalars.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        for (key, value) in flags {
            c.set(key, &value, 0)?;
        }
        for kv in &self.overrides {
            let (key, value) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            c.set(key.trim(), value, 0)?;
        }
        Ok(c)
    }
}

#[derive(Args, Clone, Debug)]
struct ClassifierArgs {
    /// Toy classifier weights written by train-toy.
    #[arg(long, value_name = "WEIGHTS")]
    model: Option<PathBuf>,
    /// Oracle region mask (PGM); repeat for several evidence regions.
    #[arg(long, value_name = "REGION.pgm")]
    oracle: Vec<PathBuf>,
    /// Class to explain (default: oracle target class / model prediction).
    #[arg(long)]
    class: Option<usize>,
    /// Reference segmentation (PGM) for precision in the reports.
    #[arg(long, value_name = "PATH")]
    segmentation: Option<PathBuf>,
}

impl ClassifierArgs {
    fn source(&self) -> ClassifierSource {
        ClassifierSource {
            model: self.model.clone(),
            oracle: self.oracle.clone(),
            class: self.class,
            segmentation: self.segmentation.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic planted-shape dataset.
    GenDataset {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy classifier on a generated dataset.
    TrainToy {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the mask network and select the smallest sufficient area.
    Attribute {
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        classifier: ClassifierArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Produce several mutually exclusive explanations.
    MultiExplain {
        #[arg(long)]
        image: PathBuf,
        /// Number of explanations.
        #[arg(short = 'n', long, default_value_t = 2)]
        count: usize,
        #[command(flatten)]
        classifier: ClassifierArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Score mask files against reference segmentations.
    Evaluate {
        #[arg(long, value_name = "DIR")]
        masks: PathBuf,
        #[arg(long, value_name = "DIR")]
        segmentations: PathBuf,
        /// Method label written into the records.
        #[arg(long, default_value = "mask")]
        method: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run the network method and the direct-parameterization baseline over the area grid.
    CompareBaseline {
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        classifier: ClassifierArgs,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenDataset { common, .. }
            | Command::TrainToy { common, .. }
            | Command::Attribute { common, .. }
            | Command::MultiExplain { common, .. }
            | Command::Evaluate { common, .. }
            | Command::CompareBaseline { common, .. } => common,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    let mut config = common.resolve()?;
    if let Command::GenDataset { classes, size, per_class, .. } = &cli.command {
        for (key, value) in [("dataset_classes", classes), ("dataset_size", size), ("dataset_per_class", per_class)] {
            if let Some(v) = value {
                config.set(key, &v.to_string(), 0)?;
            }
        }
    }
    if common.dump_config {
        print!("{}", config.dump());
        return Ok(());
    }
    match &cli.command {
        Command::GenDataset { .. } => commands::gen_dataset(&config),
        Command::TrainToy { data, .. } => commands::train_toy(data, &config),
        Command::Attribute { image, classifier, .. } => commands::attribute(image, &classifier.source(), &config),
        Command::MultiExplain { image, count, classifier, .. } => {
            commands::multi(image, &classifier.source(), *count, &config)
        }
        Command::Evaluate { masks, segmentations, method, .. } => {
            commands::evaluate(masks, segmentations, method, &config)
        }
        Command::CompareBaseline { image, classifier, .. } => commands::compare(image, &classifier.source(), &config),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
