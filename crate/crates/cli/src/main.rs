mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::List;

/// H&E stain normalization and tissue classification.
#[derive(Debug, Parser)]
#[command(name = "histostain", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// key=value file with defaults for the options below; flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Random seed (default 42).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Single-threaded reductions for bit-reproducible runs.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the stain appearance of a template image.
    FitTemplate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        estimation: EstimationArgs,
    },
    /// Normalize an image to a template.
    Normalize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        estimation: EstimationArgs,
    },
    /// Bake the mapping between two templates into a look-up table.
    BakeLut {
        /// Template of the images the table will be applied to.
        #[arg(long)]
        source: PathBuf,
        /// Template to normalize towards.
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a baked look-up table to an image.
    ApplyLut {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lut: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on a dataset directory (one subdirectory per class).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write; class names go to `<out>.classes`.
        #[arg(long)]
        out: PathBuf,
        /// Training log file.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Classify a tile densely and render the class map.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Class-map image (one color block per output cell).
        #[arg(long)]
        out: PathBuf,
        /// Per-cell probabilities in CLM1 format.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Class colors blended over the input tile.
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[command(flatten)]
        normalization: NormalizationArgs,
        #[command(flatten)]
        estimation: EstimationArgs,
    },
    /// Evaluate a model on a dataset directory.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Class grouping file (`group = model classes -> data classes`).
        #[arg(long, conflicts_with = "preset")]
        mapping: Option<PathBuf>,
        /// Built-in class grouping.
        #[arg(long)]
        preset: Option<MappingPreset>,
        /// Metrics file (printed to stdout as well).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        normalization: NormalizationArgs,
        #[command(flatten)]
        estimation: EstimationArgs,
    },
    /// Train with and without stain normalization and test both ways.
    Grid {
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long)]
        template: PathBuf,
        /// Table file (printed to stdout as well).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Generate a synthetic two-stain dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Texture set.
        #[arg(long, value_enum, default_value_t = TextureSet::Catalogue)]
        textures: TextureSet,
        /// Number of catalogue textures (2-9).
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        patches_per_class: Option<usize>,
        /// Gaussian pixel noise in intensity levels.
        #[arg(long)]
        noise_sd: Option<f64>,
        /// Stain appearance.
        #[arg(long, value_enum, default_value_t = PaletteChoice::Reference)]
        palette: PaletteChoice,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MappingPreset {
    /// 9 rectal-cancer classes onto the 8 colorectal-cancer classes.
    RcToCrc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TextureSet {
    /// General-purpose tissue textures.
    Catalogue,
    /// Textures distinguished by stain identity, for stain-shift experiments.
    StainShift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PaletteChoice {
    /// The reference stain basis, unvarying.
    Reference,
    /// The reference basis with per-patch variation.
    Varied,
    /// A different lab: shifted stain colors with per-patch variation.
    Shifted,
}

#[derive(Clone, Debug, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Disable random 90-degree rotations.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub validation_interval: Option<usize>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// Six comma-separated convolution widths.
    #[arg(long)]
    pub widths: Option<List<usize>>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct EstimationArgs {
    /// Tissue threshold in OD units.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Angle percentile trimmed at each extreme.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Robust maximum concentration percentile.
    #[arg(long)]
    pub cpct: Option<f64>,
    #[arg(long)]
    pub min_tissue_pixels: Option<usize>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct NormalizationArgs {
    /// Normalize inputs to this template first.
    #[arg(long, conflicts_with = "lut")]
    pub template: Option<PathBuf>,
    /// Normalize inputs with this baked table first.
    #[arg(long)]
    pub lut: Option<PathBuf>,
}

/// Errors caused by the command line or configuration file (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Condenses a clap error to a single line that still names the flag.
fn one_line(err: &clap::Error) -> String {
    err.render()
        .to_string()
        .lines()
        .map(str::trim)
        .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = err.print();
            return ExitCode::SUCCESS;
        }
        Err(err) => {
            eprintln!("{}", one_line(&err));
            return ExitCode::from(1);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if err.is::<UsageError>() {
                eprintln!("error: {err}");
                ExitCode::from(1)
            } else {
                eprintln!("error: {err:#}");
                ExitCode::from(2)
            }
        }
    }
}
