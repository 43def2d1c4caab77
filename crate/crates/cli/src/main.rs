use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use koopman_fusion::dictionary::DEFAULT_COVER_FACTOR;
use koopman_fusion::io;
use koopman_fusion::pipeline::{self, DictionarySpec, RunConfig, RunPaths};
use koopman_fusion::Error;

/// Data fusion of heterogeneous measurements through Koopman eigenfunctions.
#[derive(Parser)]
#[command(name = "kfusion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate both training sets, the joint pair and the held-out run.
    Simulate(SimulateArgs),
    /// PCA of stored field snapshots.
    Pca(PcaArgs),
    /// Fit a Koopman decomposition to one measurement series.
    Edmd(EdmdArgs),
    /// Build a fusion model from two decompositions and a joint pair.
    FuseBuild(FuseBuildArgs),
    /// Translate source measurements with a fusion model.
    FuseApply(FuseApplyArgs),
    /// Relative reconstruction errors of a prediction.
    Evaluate(EvaluateArgs),
    /// Run every stage end to end.
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; fields left out keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    burn_in: Option<f64>,
    #[arg(long)]
    heldout_pairs: Option<usize>,
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long)]
    dt_integration: Option<f64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut c: RunConfig = match &self.config {
            Some(p) => io::read_json(p)?,
            None => RunConfig::default(),
        };
        if let Some(n) = self.trajectories {
            c.trajectories.n_trajectories = n;
        }
        if let Some(n) = self.pairs {
            c.trajectories.pairs_per_trajectory = n;
        }
        if let Some(t) = self.burn_in {
            c.trajectories.burn_in = t;
        }
        if let Some(n) = self.heldout_pairs {
            c.heldout_pairs = n;
        }
        if let Some(n) = self.grid_points {
            c.fhn.grid_points = n;
        }
        if let Some(dt) = self.dt_integration {
            c.fhn.dt_integration = dt;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    seed: u64,
    /// Output directory for the datasets.
    #[arg(long, default_value = "run/data")]
    out: PathBuf,
    /// Also write the raw fields of the PCA batch (input of `pca`).
    #[arg(long)]
    keep_fields: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct PcaArgs {
    /// Field file written by `simulate --keep-fields`.
    #[arg(long)]
    fields: PathBuf,
    #[arg(long, default_value_t = 3)]
    modes: usize,
    /// Sampling interval recorded in the projected series.
    #[arg(long, default_value_t = 2.0)]
    dt: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DictionaryKind {
    Mls,
    Rbf,
    Affine,
}

#[derive(Args)]
struct DictionaryArgs {
    #[arg(long, value_enum, default_value = "mls")]
    dictionary: DictionaryKind,
    /// Largest number of training points in an unrefined quadtree cell.
    #[arg(long, default_value_t = 25)]
    max_per_cell: usize,
    /// Support radius as a multiple of the cell half-diagonal.
    #[arg(long, default_value_t = DEFAULT_COVER_FACTOR)]
    cover_factor: f64,
    #[arg(long, default_value_t = 500)]
    rbf_centers: usize,
    #[arg(long, default_value_t = 1.0)]
    rbf_shape: f64,
}

impl DictionaryArgs {
    fn spec(&self) -> DictionarySpec {
        match self.dictionary {
            DictionaryKind::Mls => DictionarySpec::Mls { max_per_cell: self.max_per_cell, cover_factor: self.cover_factor },
            DictionaryKind::Rbf => DictionarySpec::Rbf { centers: self.rbf_centers, shape_parameter: self.rbf_shape },
            DictionaryKind::Affine => DictionarySpec::Affine,
        }
    }
}

#[derive(Args)]
struct EdmdArgs {
    /// Measurement series CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    dictionary: DictionaryArgs,
    #[arg(long, default_value_t = koopman_fusion::edmd::DEFAULT_SVD_TOL)]
    svd_tol: f64,
}

#[derive(Args)]
struct FuseBuildArgs {
    /// Decomposition directory of the target sensor set.
    #[arg(long)]
    tilde: PathBuf,
    /// Decomposition directory of the source sensor set.
    #[arg(long)]
    hat: PathBuf,
    #[arg(long)]
    joint_tilde: PathBuf,
    #[arg(long)]
    joint_hat: PathBuf,
    /// Target training series; its rows become the inverse map's samples.
    #[arg(long)]
    training: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trust_threshold: Option<f64>,
    #[arg(long)]
    match_relative: Option<f64>,
    #[arg(long)]
    match_absolute: Option<f64>,
    #[arg(long)]
    coordinate_scale: Option<f64>,
}

#[derive(Args)]
struct FuseApplyArgs {
    #[arg(long)]
    model: PathBuf,
    /// Source measurement series CSV.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    prediction: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 400.0)]
    window: f64,
    /// Fusion model whose eigenvalues and constants go into the report.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReproduceArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Root directory; `data/`, `model/` and `report/` are created below it.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    keep_fields: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Simulate(a) => {
            let mut config = a.config.load()?;
            config.seed = a.seed;
            config.keep_fields = a.keep_fields;
            let out = pipeline::simulate(&config)?;
            pipeline::write_simulation(&a.out, &config, &out)?;
            println!(
                "wrote {} pca and {} pointwise snapshots to {} (pca energy {:.4})",
                out.tilde.len(),
                out.hat.len(),
                a.out.display(),
                out.basis.energy_fraction
            );
        }
        Command::Pca(a) => {
            let fields = io::read_fields(&a.fields)?;
            let (basis, series) = pipeline::pca_stage(&fields, a.modes, a.dt)?;
            pipeline::write_pca(&a.out, &basis)?;
            io::write_series_csv(&a.out.join("tilde.csv"), &series)?;
            println!("{} modes capture {:.4} of the energy", basis.retained, basis.energy_fraction);
        }
        Command::Edmd(a) => {
            let series = io::read_series_csv(&a.data, "data", None)?;
            let out = pipeline::edmd_stage(&series, &a.dictionary.spec(), a.svd_tol)?;
            pipeline::write_edmd(&a.out, &out)?;
            let d = &out.decomposition;
            println!("{} eigenvalues (rank {}) written to {}", d.len(), d.svd_rank_used, a.out.display());
        }
        Command::FuseBuild(a) => {
            let mut config = koopman_fusion::fusion::FusionConfig::default();
            if let Some(t) = a.trust_threshold {
                config.trust_threshold = t;
            }
            if let Some(r) = a.match_relative {
                config.match_tolerance.relative = r;
            }
            if let Some(r) = a.match_absolute {
                config.match_tolerance.absolute = r;
            }
            config.coordinate_scale = a.coordinate_scale;
            let training = io::read_series_csv(&a.training, "training", None)?;
            let model = pipeline::fuse_build(
                pipeline::read_edmd(&a.tilde)?,
                pipeline::read_edmd(&a.hat)?,
                &io::read_series_csv(&a.joint_tilde, "joint", Some(training.dt))?,
                &io::read_series_csv(&a.joint_hat, "joint", Some(training.dt))?,
                &training,
                &config,
            )?;
            io::write_fusion_model(&a.out, &model, &training.components)?;
            println!(
                "matched lambda {:.4e} / {:.4e} and {:.4e}i / {:.4e}i",
                model.decaying.lambda_tilde.re,
                model.decaying.lambda_hat.re,
                model.oscillatory.lambda_tilde.im,
                model.oscillatory.lambda_hat.im
            );
        }
        Command::FuseApply(a) => {
            let (model, components) = io::read_fusion_model(&a.model)?;
            let input = io::read_series_csv(&a.input, "input", None)?;
            let prediction = pipeline::fuse_apply(&model, &components, &input)?;
            create_parent(&a.out)?;
            io::write_series_csv(&a.out, &prediction)?;
        }
        Command::Evaluate(a) => {
            let prediction = io::read_series_csv(&a.prediction, "prediction", None)?;
            let truth = io::read_series_csv(&a.truth, "truth", None)?;
            let mut report = pipeline::evaluate(&prediction, &truth, a.window)?;
            if let Some(dir) = &a.model {
                report = report.with_model(&io::read_fusion_model(dir)?.0);
            }
            create_parent(&a.out)?;
            io::write_json(&a.out, &report)?;
            print_report(&report);
        }
        Command::Reproduce(a) => {
            let mut config = a.config.load()?;
            if let Some(seed) = a.seed {
                config.seed = seed;
            }
            config.keep_fields |= a.keep_fields;
            config.paths = RunPaths::under(&a.out);
            let r = pipeline::reproduce(&config)?;
            io::write_json(&a.out.join("config.json"), &config)?;
            println!("pca energy {:.4}", r.pca_energy_fraction);
            for m in &r.reports[0].eigenvalues {
                println!(
                    "{:<12} lambda_tilde {:+.4e}{:+.4e}i  lambda_hat {:+.4e}{:+.4e}i",
                    m.role, m.lambda_tilde.re, m.lambda_tilde.im, m.lambda_hat.re, m.lambda_hat.im
                );
            }
            for report in &r.reports {
                print_report(report);
            }
        }
    }
    Ok(())
}

fn create_parent(path: &Path) -> Result<(), Error> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    Ok(())
}

fn print_report(r: &pipeline::ErrorReport) {
    let fmt = |v: &[f64]| v.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>().join(" ");
    println!(
        "t in [0, {}]: e = {} (trusted only: {}), {} of {} points flagged",
        r.window[1],
        fmt(&r.errors),
        fmt(&r.errors_trusted),
        r.flagged,
        r.points
    );
}
