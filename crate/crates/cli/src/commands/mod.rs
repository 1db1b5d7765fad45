//! Command-line definition and dispatch.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{self, LoadedConfig};
use crate::error::{CliError, Result};
use crate::provenance::RunRecord;

mod data;
mod measure;
mod plots;
mod survival;
mod train;

#[derive(Debug, Parser)]
#[command(name = "atn", version, about = "Airway refinement, measurement and survival analysis")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration (must contain `schema_version`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set cnr_train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Top-level seed; replaces the configuration's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single worker thread and no wall-clock fields in run.json.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic patch bundle.
    SynthGenerate {
        #[arg(long)]
        n: usize,
    },
    /// Generate a labelled pseudo-real patch bundle (textured stand-in for clinical CT).
    PseudorealGenerate {
        #[arg(long)]
        n: usize,
    },
    /// Train the refiner on synthetic inputs with style targets from real patches.
    TrainRefiner {
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long)]
        real: PathBuf,
    },
    /// Apply a trained refiner to a bundle (output is standardized).
    Refine {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the ellipse regressor, optionally on refined inputs.
    TrainCnr {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        refiner: Option<PathBuf>,
    },
    /// Measure every patch of a bundle with a trained regressor.
    Measure {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Measure every patch of a bundle with the FWHM baseline.
    Fwhm {
        #[arg(long)]
        input: PathBuf,
    },
    /// Sample cross-sectional patches along airway centrelines.
    ExtractPatches {
        /// Cohort directory written by `simulate-cohort`.
        #[arg(long, conflicts_with_all = ["volume", "centerlines"])]
        cohort: Option<PathBuf>,
        /// Volume directory (volume.bin and manifest.txt) of a single patient.
        #[arg(long, requires = "centerlines")]
        volume: Option<PathBuf>,
        #[arg(long, requires = "volume")]
        centerlines: Option<PathBuf>,
        #[arg(long, default_value = "patient")]
        patient_id: String,
    },
    /// Per-segment series and per-patient biomarkers from patch measurements.
    Biomarkers {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        /// Method name recorded in the outputs (e.g. `cnr-b`, `fwhm`).
        #[arg(long)]
        method: String,
    },
    /// Cox models of survival on clinical covariates and biomarkers.
    Survival {
        #[arg(long)]
        clinical: PathBuf,
        /// biomarkers.csv files; repeat for several methods.
        #[arg(long)]
        biomarkers: Vec<PathBuf>,
    },
    /// Train one refiner per cumulative style-layer set and compare outputs.
    AblateStyleLayers {
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long)]
        real: PathBuf,
    },
    /// Simulate a cohort of airway volumes with clinical and survival data.
    SimulateCohort,
    /// Figures.
    #[command(subcommand)]
    Plot(PlotCommand),
}

#[derive(Debug, Subcommand)]
pub enum PlotCommand {
    /// Training curves from history.csv files.
    Loss {
        #[arg(long, required = true)]
        history: Vec<PathBuf>,
    },
    /// Original and refined patches side by side.
    Pairs {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        refined: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Patches with measured ellipses drawn on top.
    Overlay {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthGenerate { .. } => "synth-generate",
            Command::PseudorealGenerate { .. } => "pseudoreal-generate",
            Command::TrainRefiner { .. } => "train-refiner",
            Command::Refine { .. } => "refine",
            Command::TrainCnr { .. } => "train-cnr",
            Command::Measure { .. } => "measure",
            Command::Fwhm { .. } => "fwhm",
            Command::ExtractPatches { .. } => "extract-patches",
            Command::Biomarkers { .. } => "biomarkers",
            Command::Survival { .. } => "survival",
            Command::AblateStyleLayers { .. } => "ablate-style-layers",
            Command::SimulateCohort => "simulate-cohort",
            Command::Plot(PlotCommand::Loss { .. }) => "plot loss",
            Command::Plot(PlotCommand::Pairs { .. }) => "plot pairs",
            Command::Plot(PlotCommand::Overlay { .. }) => "plot overlay",
        }
    }
}

/// Everything a command needs: configuration, output directory and the
/// provenance record it fills in.
pub struct Ctx {
    pub cfg: LoadedConfig,
    pub out: PathBuf,
    pub record: RunRecord,
}

impl Ctx {
    pub fn seed(&self) -> u64 {
        self.cfg.config.seed
    }

    /// Seed of a named stream, recorded in run.json.
    pub fn stream(&mut self, name: &str) -> u64 {
        let s = atn_core::rng::stream_seed(self.seed(), name);
        self.record.seed(name, s);
        s
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn mkdir(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        fs::create_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        self.record.output(name);
        Ok(())
    }
}

pub fn require_input(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

fn dispatch(cmd: Command, ctx: &mut Ctx) -> Result<()> {
    match cmd {
        Command::SynthGenerate { n } => data::synth_generate(ctx, n),
        Command::PseudorealGenerate { n } => data::pseudoreal_generate(ctx, n),
        Command::SimulateCohort => data::simulate_cohort(ctx),
        Command::ExtractPatches {
            cohort,
            volume,
            centerlines,
            patient_id,
        } => data::extract_patches(ctx, cohort, volume.zip(centerlines), &patient_id),
        Command::TrainRefiner { synthetic, real } => train::train_refiner(ctx, &synthetic, &real),
        Command::Refine { model, input } => train::refine(ctx, &model, &input),
        Command::TrainCnr { train, refiner } => train::train_cnr(ctx, &train, refiner.as_deref()),
        Command::AblateStyleLayers { synthetic, real } => train::ablate_style_layers(ctx, &synthetic, &real),
        Command::Measure { model, input } => measure::measure(ctx, &model, &input),
        Command::Fwhm { input } => measure::fwhm(ctx, &input),
        Command::Biomarkers {
            index,
            measurements,
            method,
        } => measure::biomarkers(ctx, &index, &measurements, &method),
        Command::Survival { clinical, biomarkers } => survival::survival(ctx, &clinical, &biomarkers),
        Command::Plot(PlotCommand::Loss { history }) => plots::loss(ctx, &history),
        Command::Plot(PlotCommand::Pairs { input, refined, count }) => plots::pairs(ctx, &input, &refined, count),
        Command::Plot(PlotCommand::Overlay {
            input,
            measurements,
            count,
        }) => plots::overlay(ctx, &input, &measurements, count),
    }
}

/// Run a parsed command line.
pub fn execute(cli: Cli, argv: Vec<String>) -> Result<()> {
    let g = cli.global;
    let cfg = config::load(g.config.as_deref(), &g.overrides, g.seed)?;
    let out = g
        .out
        .ok_or_else(|| CliError::Config("--out is required".into()))?;
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let threads = if g.deterministic { Some(1) } else { cfg.config.threads };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    let name = cli.command.name();
    let mut ctx = Ctx {
        cfg,
        out,
        record: RunRecord::new(name, argv, g.deterministic),
    };
    log::info!("{name}: writing to {}", ctx.out.display());
    let result = pool.install(|| dispatch(cli.command, &mut ctx));
    // provenance is written even when the command fails part way
    let written = ctx.record.write(&ctx.out, &ctx.cfg);
    result.and(written)
}

/// Parse `args`, run, and return the process exit code. Errors are printed to
/// stdout as a single JSON line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let err = CliError::Config(e.to_string().trim().to_string());
            println!("{}", err.to_json_line());
            return err.exit_code();
        }
    };
    match execute(cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            println!("{}", e.to_json_line());
            e.exit_code()
        }
    }
}
