use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use slungload::data::{load_log, make_windows, Dataset, DatasetSplits, Split, Windowing};
use slungload::eval::{compare_predictors, ModelPredictor, PhysicsBaseline, Predictor};
use slungload::experiment::{generate_logs, train_variant, write_dataset, Variant};
use slungload::{Error, Model, Profile, Result, RunConfig};

#[derive(Parser)]
#[command(name = "slungload", version, about = "Multi-step prediction for a quadrotor carrying a cable-suspended load")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file overriding the profile's settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base settings.
    #[arg(long, global = true, default_value = "desk")]
    profile: Profile,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate synthetic flights and write them with a split manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model variant on a dataset manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest (`dataset.toml`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against the physics baseline on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 50)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one window of a flight log and print the trajectory as CSV.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Flight log CSV.
        #[arg(long)]
        log: PathBuf,
        /// First row of the window's history.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 25)]
        horizon: usize,
        /// Roll out the physical model instead of the network.
        #[arg(long)]
        physics: bool,
    },
    /// Train every variant and compare them with the physics baseline.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        horizon: usize,
        /// Number of consecutive seeds per variant, starting at the run seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let base = RunConfig::profile(common.profile);
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p, &base)?,
        None => base,
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.data.seed = s;
    }
    Ok(cfg)
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    Dataset::open(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("cannot read dataset {}: {io}", path.display())),
        other => other,
    })
}

fn require(split: Split, splits: &DatasetSplits, what: &str) -> Result<()> {
    if splits.get(split).is_empty() {
        return Err(Error::Data(format!("the dataset has no {split} windows for {what}")));
    }
    Ok(())
}

fn training_windows(cfg: &RunConfig, ds: &Dataset) -> Result<DatasetSplits> {
    let w = Windowing {
        history: cfg.model.history,
        horizon: cfg.model.horizon,
        stride: ds.manifest.stride,
    };
    let splits = ds.windows_with(&w, &cfg.physics)?;
    require(Split::Train, &splits, "training")?;
    require(Split::Validation, &splits, "early stopping")?;
    Ok(splits)
}

fn test_windows(ds: &Dataset, history: usize, horizon: usize, cfg: &RunConfig) -> Result<Vec<slungload::data::SequenceWindow>> {
    let w = Windowing {
        history,
        horizon,
        stride: ds.manifest.stride,
    };
    let splits = ds.windows_with(&w, &cfg.physics)?;
    require(Split::Test, &splits, &format!("evaluation at horizon {horizon}"))?;
    Ok(splits.test)
}

fn save_run(run: &slungload::experiment::TrainedRun, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    run.model.save(&dir.join("model.json"))?;
    let mut last = run.model.clone();
    last.params = run.report.final_params.clone();
    last.save(&dir.join("final.json"))?;
    run.report.save_csv(&dir.join("training_log.csv"))?;
    run.manifest.save(&dir.join("run.json"))?;
    std::fs::write(dir.join("config.toml"), run.manifest.config.to_toml()?)?;
    Ok(())
}

fn log_epoch(tag: &str) -> impl FnMut(&slungload::trainer::EpochRecord) + '_ {
    move |r| {
        info!(
            "{tag} epoch {:>4}  train {:.5}  validation {:.5}",
            r.epoch, r.train.total, r.validation.total
        )
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out } => {
            let cfg = resolve(&common)?;
            let logs = generate_logs(&cfg)?;
            let manifest = write_dataset(&cfg, &logs, &out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            println!("{}", manifest.display());
        }
        Command::Train {
            common,
            data,
            variant,
            out,
        } => {
            let cfg = resolve(&common)?;
            let ds = open_dataset(&data)?;
            let splits = training_windows(&cfg, &ds)?;
            let run = train_variant(&cfg, variant, cfg.train.seed, &splits, &ds.hash()?, log_epoch(variant.name()))?;
            save_run(&run, &out)?;
            println!(
                "best epoch {} validation {:.6} ({} parameters) -> {}",
                run.report.best_epoch,
                run.report.best_validation.total,
                run.model.param_count(),
                out.join("model.json").display()
            );
        }
        Command::Eval {
            common,
            data,
            model,
            horizon,
            out,
        } => {
            let cfg = resolve(&common)?;
            let ds = open_dataset(&data)?;
            let net = Model::load(&model)?;
            let windows = test_windows(&ds, net.config.history, horizon, &cfg)?;
            let mp = ModelPredictor::new("model", &net);
            let physics = PhysicsBaseline { params: cfg.physics.clone() };
            let report = compare_predictors(&[&mp], &physics, &windows, horizon)?;
            let run_manifest = model.with_file_name("run.json");
            report.write(&out, run_manifest.exists().then_some(run_manifest.as_path()))?;
            print_table(&report);
        }
        Command::Predict {
            common,
            model,
            log,
            start,
            horizon,
            physics,
        } => {
            let cfg = resolve(&common)?;
            let net = Model::load(&model)?;
            let flight = load_log(&log)?;
            let m = net.config.history;
            if start + m + horizon > flight.len() {
                return Err(Error::Data(format!(
                    "{} has {} rows; a window at row {start} needs {}",
                    log.display(),
                    flight.len(),
                    start + m + horizon
                )));
            }
            let sub = slungload::data::FlightLog {
                rows: flight.rows[start..start + m + horizon].to_vec(),
                ..flight
            };
            let window = make_windows(&sub, m, horizon, 1, &cfg.physics)?.remove(0);
            let states = if physics {
                PhysicsBaseline { params: cfg.physics.clone() }.predict(&[&window], horizon)?
            } else {
                ModelPredictor::new("model", &net).predict(&[&window], horizon)?
            };
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            writeln!(out, "k,px,py,pz,vx,vy,vz,qw,qx,qy,qz,plx,ply,plz")?;
            for (k, s) in states[0].iter().enumerate() {
                let v: Vec<String> = s.to_vector().iter().map(|x| format!("{x:?}")).collect();
                writeln!(out, "{},{}", k + 1, v.join(","))?;
            }
        }
        Command::Compare {
            common,
            data,
            horizon,
            seeds,
            out,
        } => {
            let cfg = resolve(&common)?;
            let ds = open_dataset(&data)?;
            let splits = training_windows(&cfg, &ds)?;
            let windows = test_windows(&ds, cfg.model.history, horizon, &cfg)?;
            let hash = ds.hash()?;
            let physics = PhysicsBaseline { params: cfg.physics.clone() };
            let mut runs = Vec::new();
            for seed in cfg.train.seed..cfg.train.seed + seeds.max(1) {
                for v in Variant::ALL {
                    let tag = format!("{}_s{seed}", v.name());
                    let run = train_variant(&cfg, v, seed, &splits, &hash, log_epoch(&tag))?;
                    save_run(&run, &out.join(&tag))?;
                    runs.push((tag, run.model));
                }
            }
            let predictors: Vec<ModelPredictor> = runs.iter().map(|(t, m)| ModelPredictor::new(t.clone(), m)).collect();
            let refs: Vec<&dyn Predictor> = predictors.iter().map(|p| p as &dyn Predictor).collect();
            let report = compare_predictors(&refs, &physics, &windows, horizon)?;
            report.write(&out.join("report"), None)?;
            let mut means = serde_json::Map::new();
            for v in Variant::ALL {
                let vals: Vec<f64> = report
                    .evaluations
                    .iter()
                    .filter(|e| e.name.rsplit_once("_s").is_some_and(|(n, _)| n == v.name()))
                    .map(|e| e.rmse.combined)
                    .collect();
                means.insert(v.name().into(), (vals.iter().sum::<f64>() / vals.len() as f64).into());
            }
            means.insert("physics".into(), report.evaluations[0].rmse.combined.into());
            std::fs::write(
                out.join("report").join("mean_combined_rmse.json"),
                serde_json::to_string_pretty(&means)?,
            )?;
            print_table(&report);
        }
    }
    Ok(())
}

fn print_table(report: &slungload::eval::Comparison) {
    println!(
        "{:<16} {:>9} {:>9} {:>10} {:>9} {:>9}  crossing (N = {}, {} windows)",
        "model", "position", "velocity", "quaternion", "payload", "combined", report.horizon, report.windows
    );
    for e in &report.evaluations {
        let r = e.rmse;
        let cross = match report.crossings.get(&e.name) {
            Some(Some(k)) => k.to_string(),
            Some(None) => "none".into(),
            None => "-".into(),
        };
        println!(
            "{:<16} {:>9.4} {:>9.4} {:>10.4} {:>9.4} {:>9.4}  {cross}",
            e.name, r.position, r.velocity, r.quaternion, r.payload, r.combined
        );
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else if matches!(e, Error::Config(_)) {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
