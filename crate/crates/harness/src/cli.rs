//! `dope` command line. Exit status: 0 success, 1 usage, 2 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use dope_core::data::{Dataset, Observation};
use dope_core::estimator::{dope_crossfit, plugin_estimate, CrossFitConfig, SolutionSource};
use dope_core::functional::FunctionalSpec;
use dope_core::grid::Domain;
use dope_core::operators::{train_solution_operator, BackboneConfig, Operator, TrainConfig};
use dope_core::riesz::{BetaMode, RieszConfig};
use dope_core::rng::Role;

use crate::config::{backbone_config, Backbone, Dgp, ExperimentConfig, Method};
use crate::error::{HarnessError, Result};
use crate::results::{format_summary, summarize, write_atomic};
use crate::runner::{run_experiment, simulate};
use crate::verify::{require_all, run_all, SuiteSizes};

#[derive(Debug, Parser)]
#[command(name = "dope", version, about = "Debiased estimation of functionals of neural-operator predictions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DgpArg {
    Pk,
    Darcy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackboneArg {
    Fno,
    Deeponet,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FunctionalArg {
    Auc,
    Tat,
    SoftCmax,
    SmoothExcess,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset and write it as JSON.
    Generate {
        #[arg(long, value_enum)]
        dgp: DgpArg,
        /// Design irregularity (PK only).
        #[arg(long, default_value_t = 0.0)]
        rho: f64,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Include the latent trajectories.
        #[arg(long)]
        with_oracle: bool,
    },
    /// Fit a solution operator on a dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "fno")]
        backbone: BackboneArg,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate a functional on a dataset and write the report as JSON.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        /// Solution operator fitted on other data; without it the operator
        /// is cross-fitted inside the folds.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "fno")]
        backbone: BackboneArg,
        #[arg(long, default_value = "dope")]
        method: String,
        #[arg(long, value_enum, default_value = "auc")]
        functional: FunctionalArg,
        /// Sharpness of the smooth excess functional.
        #[arg(long, default_value_t = 0.0)]
        kappa: f64,
        #[arg(long, default_value_t = 2)]
        folds: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a configured experiment and write its CSV and plot.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides unset output paths of the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the oracle and invariant suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parse `args` (program name first), run, and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::MissingFile {
        path: path.to_path_buf(),
        source,
    })
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_json(&read(path)?).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))
}

fn backbone_for(domain: &Domain, b: BackboneArg) -> BackboneConfig {
    let dgp = match domain {
        Domain::Line(_) => Dgp::Pk,
        Domain::Square(_) => Dgp::Darcy,
    };
    let backbone = match b {
        BackboneArg::Fno => Backbone::Fno,
        BackboneArg::Deeponet => Backbone::Deeponet,
    };
    backbone_config(dgp, backbone)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate {
            dgp,
            rho,
            n,
            seed,
            out,
            with_oracle,
        } => {
            if !(0.0..=1.0).contains(&rho) {
                return Err(HarnessError::Usage(format!("rho {rho} outside [0, 1]")));
            }
            if n == 0 {
                return Err(HarnessError::Usage("--n must be positive".into()));
            }
            let dgp = match dgp {
                DgpArg::Pk => Dgp::Pk,
                DgpArg::Darcy => Dgp::Darcy,
            };
            let ds = simulate(dgp, n, rho, seed, Role::Test)?;
            write_atomic(&out, &ds.to_json(with_oracle)?)?;
            eprintln!("wrote {} {} samples to {}", n, dgp.name(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            backbone,
            epochs,
            seed,
            out,
        } => {
            let ds = load_dataset(&data)?;
            let cfg = backbone_for(&ds.domain, backbone);
            let train = TrainConfig {
                epochs,
                ..Default::default()
            };
            let op = train_solution_operator(&ds.samples, &ds.domain, cfg, &train, seed, 0)?;
            write_atomic(&out, &op.to_checkpoint()?)?;
            eprintln!(
                "trained on {} samples, final loss {:.3e}; checkpoint {}",
                ds.len(),
                op.meta().final_loss().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::Estimate {
            data,
            checkpoint,
            backbone,
            method,
            functional,
            kappa,
            folds,
            epochs,
            seed,
            out,
        } => {
            let method = Method::parse(&method).ok_or_else(|| HarnessError::Usage(format!("unknown method {method}")))?;
            let spec = match functional {
                FunctionalArg::Auc => FunctionalSpec::auc(),
                FunctionalArg::Tat => FunctionalSpec::tat(),
                FunctionalArg::SoftCmax => FunctionalSpec::soft_cmax(),
                FunctionalArg::SmoothExcess => {
                    if !(0.0..=1.0).contains(&kappa) {
                        return Err(HarnessError::Usage(format!("kappa {kappa} outside [0, 1]")));
                    }
                    FunctionalSpec::smooth_excess_sweep(kappa)
                }
            };
            let ds = load_dataset(&data)?;
            let cfg = backbone_for(&ds.domain, backbone);
            let s_hat = match &checkpoint {
                Some(p) => Some(Arc::new(
                    Operator::from_checkpoint(&read(p)?, &cfg, &ds.domain)
                        .map_err(|e| HarnessError::Usage(format!("{}: {e}", p.display())))?,
                )),
                None => None,
            };
            let train = TrainConfig {
                epochs,
                ..Default::default()
            };
            let report = estimate(&ds.samples, &ds.domain, method, &spec, s_hat, cfg, train, folds, seed)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => write_atomic(&p, &text)?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Experiment { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(dir) = out {
                cfg.output.csv.get_or_insert(dir.join("results.csv"));
                cfg.output.plot.get_or_insert(dir.join("rmse.svg"));
                cfg.output.cache_dir.get_or_insert(dir.join("cache"));
            }
            let rows = run_experiment(&cfg)?;
            print!("{}", format_summary(&summarize(&rows)));
            if let Some(p) = &cfg.output.csv {
                eprintln!("rows written to {}", p.display());
            }
            Ok(())
        }
        Command::Verify { seed } => {
            let outcomes = run_all(SuiteSizes::full(), seed, |o| println!("{}", o.line()));
            require_all(&outcomes)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn estimate(
    data: &[Observation],
    domain: &Domain,
    method: Method,
    spec: &FunctionalSpec,
    s_hat: Option<Arc<Operator>>,
    backbone: BackboneConfig,
    train: TrainConfig,
    folds: usize,
    seed: u64,
) -> Result<dope_core::estimator::EstimateReport> {
    let mode = match method {
        Method::Plugin => {
            let s = s_hat.ok_or_else(|| HarnessError::Usage("the plug-in estimate needs --checkpoint".into()))?;
            let inputs: Vec<_> = data.iter().map(|o| &o.input).collect();
            return Ok(plugin_estimate(&s, &inputs, spec, &domain.weights())?);
        }
        Method::Dope => BetaMode::Unstructured,
        Method::DopeStructured => BetaMode::Structured,
        Method::DopeOracle => BetaMode::Oracle,
        Method::DopePpi => {
            return Err(HarnessError::Usage(
                "dope_ppi needs an unlabeled pool; run it through an experiment config".into(),
            ))
        }
    };
    let solution = match s_hat {
        Some(s) => SolutionSource::Pretrained(s),
        None => SolutionSource::CrossFit { backbone, train },
    };
    let cf = CrossFitConfig {
        folds,
        beta_mode: mode,
        beta_backbone: backbone,
        riesz: RieszConfig {
            lambda: 0.1,
            train,
        },
        seed,
        index: 0,
    };
    dope_crossfit(data, domain, spec, &solution, &cf).map_err(|e| match e {
        dope_core::DopeError::Config(m) => HarnessError::Usage(m),
        other => other.into(),
    })
}
