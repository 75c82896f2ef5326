//! Command-line pipeline: `gen` writes datasets, `train` fits the learned
//! model and the two baselines, `eval` scores checkpoints.
//!
//! Output layout under the configured `out` directory:
//!
//! ```text
//! data/<set>/              one dataset per SNR (`snr30`, ...; `clean` if none)
//! models/<set>/            proposed.json nominal.json fbedmd.json loss.csv
//!                          source.json, timing.csv (wall clock, not reproducible)
//! eval/                    predict.csv, track.csv, track/<set>_<method>.csv,
//!                          bias_mc.json, report.csv, report.txt, *_timing.csv
//! ```
//!
//! Everything except the timing files is a pure function of the config and
//! the root seed.
//!
//! Exit status: 0 success, 2 configuration or malformed input, 3 numerical
//! failure, 4 closed-loop divergence, 5 filesystem error.

pub mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use koopman_core::bench::{bias_mc, evaluate, track_error, EvalSet, Metrics, Report, TrackingSetup};
use koopman_core::datagen::{build_triplets, excite, corrupt_dataset};
use koopman_core::lifting::{Dictionary, Lift};
use koopman_core::mpc::track;
use koopman_core::operator::{drkn_synthesize, fb_edmd_fit, nominal_fit, KoopmanModel};
use koopman_core::persist::{load_model, loss_history_csv, read_dataset, save_model, write_dataset, write_text};
use koopman_core::Error;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("closed loop diverged: {0}")]
    Divergence(String),
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 4,
            CliError::Io(_) => 5,
            CliError::Core(e) => match e {
                Error::Io(_) => 5,
                Error::Format(_) | Error::DimensionMismatch(_) | Error::Precondition(_) => 2,
                Error::Diverged { .. } => 4,
                _ => 3,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "koopman", version, about = "Noise-robust Koopman models: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the root seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory of the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate and corrupt training datasets.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train the encoder and fit all three models.
    Train {
        #[command(flatten)]
        common: Common,
        /// A single dataset directory; defaults to every set under `out/data`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Score checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Mode,
        /// A single checkpoint; defaults to every model under `out/models`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Predict,
    Track,
    BiasMc,
    Compare,
}

/// Checkpoint file names, in report column order.
pub const MODEL_FILES: [(&str, &str); 3] = [("Proposed", "proposed.json"), ("NominalLS", "nominal.json"), ("FBEDMD-fixed", "fbedmd.json")];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Source {
    pub dataset: String,
    pub snr_db: Option<f64>,
}

fn load_config(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common } => cmd_gen(&load_config(&common)?).map(|_| ()),
        Command::Train { common, dataset } => cmd_train(&load_config(&common)?, dataset.as_deref()).map(|_| ()),
        Command::Eval { common, mode, checkpoint } => cmd_eval(&load_config(&common)?, mode, checkpoint.as_deref()),
    }
}

pub fn set_name(snr_db: Option<f64>) -> String {
    snr_db.map_or_else(|| "clean".to_string(), |s| format!("snr{s}"))
}

/// Writes one dataset per configured SNR from a shared set of clean
/// trajectories. Returns the dataset directories.
pub fn cmd_gen(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let d = &cfg.dataset;
    let ex = cfg.excitation();
    let seed = cfg.data_seed();
    let clean = (0..d.n_traj as u64).map(|i| excite(&cfg.system, d.n_snap, d.dt, &ex, seed, i)).collect::<Result<Vec<_>, _>>()?;
    let levels: Vec<Option<f64>> = if d.snr_db.is_empty() { vec![None] } else { d.snr_db.iter().map(|s| Some(*s)).collect() };
    let mut dirs = Vec::new();
    for snr in levels {
        let noise = cfg.noise(snr);
        let data = corrupt_dataset(clean.clone(), &noise)?;
        let dir = cfg.out.join("data").join(set_name(snr));
        write_dataset(&dir, &cfg.system, &ex, &noise, seed, &data)?;
        info!("wrote {} trajectories to {}", data.noisy.len(), dir.display());
        dirs.push(dir);
    }
    Ok(dirs)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    out.sort();
    Ok(out)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map_or_else(|| "data".to_string(), |s| s.to_string_lossy().into_owned())
}

/// Trains on one dataset (or all under `out/data`) and writes the three
/// checkpoints. Returns the model directories.
pub fn cmd_train(cfg: &RunConfig, dataset: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let sets = match dataset {
        Some(d) => vec![d.to_path_buf()],
        None => subdirs(&cfg.out.join("data"))?,
    };
    if sets.is_empty() {
        return Err(CliError::Io(format!("no datasets under {}", cfg.out.join("data").display())));
    }
    let mut out = Vec::new();
    for set in sets {
        let (meta, data) = read_dataset(&set)?;
        if meta.system != cfg.system {
            return Err(CliError::Config(format!("{} was generated for a different system", set.display())));
        }
        let batch = build_triplets(&data.noisy)?;
        let dir = cfg.out.join("models").join(dir_name(&set));
        let start = Instant::now();
        let (st, history) = koopman_core::training::train(&batch, &cfg.train_config(cfg.train_seed()))?;
        let proposed = drkn_synthesize(&st, &batch, cfg.training.synthesis)?;
        let train_seconds = start.elapsed().as_secs_f64();
        write_text(&dir.join("loss.csv"), &loss_history_csv(&history))?;
        save_model(&dir.join("proposed.json"), &proposed)?;
        // baselines may fail on their own; compare then shows a dash
        let shared = Lift::Neural(st.encoder.clone());
        let dict = Lift::Dictionary(Dictionary::monomials(cfg.system.state_dim(), cfg.training.dictionary_degree));
        for (file, fit) in [("nominal.json", nominal_fit(&batch, &shared)), ("fbedmd.json", fb_edmd_fit(&batch, &dict))] {
            let path = dir.join(file);
            match fit {
                Ok(m) => save_model(&path, &m)?,
                Err(e) => {
                    warn!("{}: baseline fit failed: {e}", path.display());
                    remove_stale(&path)?;
                }
            }
        }
        let source = Source { dataset: dir_name(&set), snr_db: meta.noise.snr_db };
        write_text(&dir.join("source.json"), &(to_json(&source)? + "\n"))?;
        write_text(&dir.join("timing.csv"), &format!("train_seconds\n{train_seconds}\n"))?;
        info!("trained {} in {train_seconds:.1} s", dir.display());
        out.push(dir);
    }
    Ok(out)
}

fn remove_stale(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        std::fs::remove_file(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Core(e.into()))
}

/// `(set, method, model)` for one checkpoint or every model under `out/models`.
fn collect_models(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<(String, String, KoopmanModel)>, CliError> {
    if let Some(p) = checkpoint {
        let model = load_model(p)?;
        let set = p.parent().map_or_else(|| "-".to_string(), dir_name);
        return Ok(vec![(set, model.provenance.to_string(), model)]);
    }
    let mut out = Vec::new();
    for dir in subdirs(&cfg.out.join("models"))? {
        for (method, file) in MODEL_FILES {
            let p = dir.join(file);
            if p.exists() {
                out.push((dir_name(&dir), method.to_string(), load_model(&p)?));
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Io(format!("no checkpoints under {}", cfg.out.join("models").display())));
    }
    Ok(out)
}

fn check_model(cfg: &RunConfig, model: &KoopmanModel) -> Result<(), CliError> {
    if model.state_dim() != cfg.system.state_dim() || model.input_dim() != cfg.system.input_dim() {
        return Err(CliError::Config(format!(
            "checkpoint has {} states / {} inputs, the configured system {} / {}",
            model.state_dim(),
            model.input_dim(),
            cfg.system.state_dim(),
            cfg.system.input_dim()
        )));
    }
    Ok(())
}

fn eval_set(cfg: &RunConfig) -> Result<EvalSet, CliError> {
    let e = &cfg.evaluation;
    Ok(EvalSet::generate(&cfg.system, cfg.dataset.dt, &cfg.excitation(), cfg.eval_seed(), e.rollouts, e.steps)?)
}

pub fn cmd_eval(cfg: &RunConfig, mode: Mode, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let dir = cfg.out.join("eval");
    match mode {
        Mode::Predict => {
            let eval = eval_set(cfg)?;
            let mut csv = String::from("set,method,e_pred\n");
            for (set, method, model) in collect_models(cfg, checkpoint)? {
                check_model(cfg, &model)?;
                let e = eval.mean_pred_error(&model)?;
                println!("{set:>10}  {method:<14} e_pred {e:.6}");
                csv.push_str(&format!("{set},{method},{e}\n"));
            }
            write_text(&dir.join("predict.csv"), &csv)?;
        }
        Mode::Track => {
            let reference = cfg.reference()?;
            let mpc = cfg.mpc_config(cfg.feedback_seed())?;
            let channels = cfg.tracked_channels();
            let mut csv = String::from("set,method,e_track,effort_mean,effort_integral,unconverged,diverged_at\n");
            let mut timing = String::from("set,method,mean_solve_seconds\n");
            let mut diverged = Vec::new();
            for (set, method, model) in collect_models(cfg, checkpoint)? {
                check_model(cfg, &model)?;
                let res = track(&cfg.system, &model, &reference, &mpc, cfg.feedback_seed())?;
                let e = track_error(&res, &channels)?;
                write_text(&dir.join("track").join(format!("{set}_{method}.csv")), &res.to_csv())?;
                write_text(&dir.join("track").join(format!("{set}_{method}_timing.csv")), &res.timing_csv())?;
                let at = res.diverged_at.map_or_else(String::new, |k| k.to_string());
                println!("{set:>10}  {method:<14} e_track {e:.6}{}", if at.is_empty() { String::new() } else { format!("  diverged at step {at}") });
                csv.push_str(&format!("{set},{method},{e},{},{},{},{at}\n", res.effort_mean(), res.effort_integral(), res.unconverged));
                timing.push_str(&format!("{set},{method},{}\n", res.mean_solve_seconds()));
                if res.diverged_at.is_some() {
                    diverged.push(format!("{set}/{method}"));
                }
            }
            write_text(&dir.join("track.csv"), &csv)?;
            write_text(&dir.join("track_timing.csv"), &timing)?;
            if !diverged.is_empty() {
                return Err(CliError::Divergence(diverged.join(", ")));
            }
        }
        Mode::BiasMc => {
            let d = bias_mc(&cfg.bias_mc_config())?;
            println!(
                "ratio {:.4} (defined: {})  wins {}/{}  sign-test p {:.3e}  violations {}",
                d.ratio, d.ratio_defined, d.wins, d.n_draws, d.sign_test_p, d.violations
            );
            write_text(&dir.join("bias_mc.json"), &(to_json(&d)? + "\n"))?;
        }
        Mode::Compare => {
            let report = compare(cfg)?;
            print!("{}", report.to_text());
            write_text(&dir.join("report.csv"), &report.to_csv())?;
            write_text(&dir.join("report.txt"), &report.to_text())?;
            write_text(&dir.join("report_timing.csv"), &report.timing_csv())?;
        }
    }
    Ok(())
}

/// Report over every trained set; missing or failing models become dashes.
pub fn compare(cfg: &RunConfig) -> Result<Report, CliError> {
    let eval = eval_set(cfg)?;
    let tracking = match &cfg.mpc {
        Some(_) => Some((cfg.reference()?, cfg.mpc_config(cfg.feedback_seed())?, cfg.tracked_channels())),
        None => None,
    };
    let mut report = Report::default();
    let sets = subdirs(&cfg.out.join("models"))?;
    if sets.is_empty() {
        return Err(CliError::Io(format!("no models under {}", cfg.out.join("models").display())));
    }
    for dir in sets {
        let src: Source = serde_json::from_str(&read(&dir.join("source.json"))?).map_err(|e| CliError::Core(e.into()))?;
        let train_time = read(&dir.join("timing.csv")).ok().and_then(|s| s.lines().nth(1).and_then(|l| l.parse().ok()));
        for (method, file) in MODEL_FILES {
            let p = dir.join(file);
            let metrics = match p.exists().then(|| load_model(&p)).transpose() {
                Ok(Some(model)) => {
                    check_model(cfg, &model)?;
                    let setup = tracking.as_ref().map(|(reference, mpc, channels)| TrackingSetup {
                        system: &cfg.system,
                        reference,
                        cfg: mpc,
                        channels,
                        seed: cfg.feedback_seed(),
                    });
                    let mut m = evaluate(&model, Some(&eval), setup.as_ref());
                    if method == "Proposed" {
                        m.train_time = train_time;
                    }
                    m
                }
                Ok(None) => Metrics::default(),
                Err(e) => {
                    warn!("{}: {e}", p.display());
                    Metrics::default()
                }
            };
            report.push(src.snr_db, method, metrics);
        }
    }
    Ok(report)
}

fn read(p: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
}
