//! Command-line front end: argument parsing, the experiment config tree and
//! the six subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checks::{run_gradcheck, run_verify, GradcheckConfig, VerifyConfig};
use crate::error::{LabError, Result};
use crate::eval::{config_hash, EvalReport};
use crate::synth::Dataset;
use crate::theory::{fmt_f64, run_sweep, InstanceSpec, OptimConfig, SweepPoint, SWEEP_HEADER};
use crate::trainer::{
    load_checkpoint, save_checkpoint, split, train, write_log_csv, DataConfig, EmaSchedule, EncoderConfig, EvalSuite,
    LoggingConfig, LossesSection, Metrics, OptimSettings, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_CONFIG: i32 = 64;

#[derive(Debug, Parser)]
#[command(
    name = "cotap-lab",
    version,
    about = "Dense self-supervised semantic-concentration laboratory"
)]
pub struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for data-parallel sections.
    #[arg(long, global = true, env = "COTAP_LAB_THREADS", default_value_t = 1)]
    pub threads: usize,
    /// Directory receiving the output files.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference checks of every hand-derived gradient.
    Gradcheck(GradcheckArgs),
    /// Randomized oracle checks (AP oracle, bound fuzzing, Sinkhorn marginals, rank invariance).
    Verify(VerifyArgs),
    /// Self-distillation training on the synthetic corpus.
    Train(TrainArgs),
    /// Downstream metrics of a saved checkpoint.
    Eval(EvalArgs),
    /// Optimise embedding-theory instances and evaluate the error bound.
    Theory(TheoryArgs),
    /// Generate and save the synthetic corpus.
    GenData,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Comma-separated loss names.
    #[arg(long, value_delimiter = ',')]
    pub losses: Option<Vec<String>>,
    /// Random evaluation points per loss.
    #[arg(long)]
    pub points: Option<usize>,
    /// Largest accepted relative gradient error.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Random instances per check.
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Ablation preset `line1` … `line7`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the number of optimisation steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Load the corpus from a `gen-data` directory instead of generating it.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint stem written by `train` (e.g. `out/checkpoint`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Load the corpus from a `gen-data` directory instead of generating it.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    /// Keep only the first `n` grid points.
    #[arg(long)]
    pub limit: Option<usize>,
}

/// Sweep grid plus optimiser settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub points: Vec<SweepPoint>,
    pub optim: OptimConfig,
}

/// Instance family whose optima satisfy the theorem's preconditions.
pub fn concentrated_spec() -> InstanceSpec {
    InstanceSpec {
        k: 2,
        n: 40,
        m: 2,
        d: 2,
        image_spread: 0.05,
        view_spread: 0.02,
        ..InstanceSpec::default()
    }
}

impl Default for TheoryConfig {
    fn default() -> Self {
        let spec = concentrated_spec();
        let points = [(0.95, 0.99), (0.99, 0.999), (0.99, 0.9999)]
            .into_iter()
            .map(|(d_t, delta_t)| SweepPoint {
                spec: spec.clone(),
                d_t,
                delta_t,
            })
            .collect();
        Self {
            points,
            optim: OptimConfig {
                restarts: 1,
                rel_tol: 1e-12,
                ..OptimConfig::default()
            },
        }
    }
}

/// The whole config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub losses: LossesSection,
    pub ema: EmaSchedule,
    pub optim: OptimSettings,
    pub logging: LoggingConfig,
    pub gradcheck: GradcheckConfig,
    pub verify: VerifyConfig,
    pub theory: TheoryConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LabError::ConfigError(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            data: self.data.clone(),
            encoder: self.encoder.clone(),
            losses: self.losses.clone(),
            ema: self.ema,
            optim: self.optim.clone(),
            logging: self.logging.clone(),
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &LabError) -> i32 {
    match e {
        LabError::ConfigError(_) => EXIT_CONFIG,
        LabError::TrainingDiverged { .. } => EXIT_DIVERGED,
        _ => EXIT_VERIFY_FAILED,
    }
}

fn load_config(path: Option<&Path>) -> Result<(ExperimentConfig, String)> {
    match path {
        None => Ok((ExperimentConfig::default(), String::new())),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| LabError::ConfigError(format!("cannot read {}: {e}", p.display())))?;
            Ok((ExperimentConfig::from_toml(&text)?, text))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<i32> {
    let seed = cli
        .seed
        .ok_or_else(|| LabError::ConfigError("--seed is required".into()))?;
    if cli.threads == 0 {
        return Err(LabError::ConfigError("--threads must be at least 1".into()));
    }
    // the global pool can only be sized once per process
    let _ = crate::par::set_threads(cli.threads);
    let (mut cfg, text) = load_config(cli.config.as_deref())?;
    fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Gradcheck(a) => {
            if let Some(l) = &a.losses {
                cfg.gradcheck.losses = l.clone();
            }
            if let Some(p) = a.points {
                cfg.gradcheck.points = p;
            }
            if let Some(t) = a.threshold {
                cfg.gradcheck.threshold = t;
            }
            let report = run_gradcheck(&cfg.gradcheck, seed)?;
            for c in &report.cases {
                println!(
                    "{:<12} max_rel_error={} threshold={} {}",
                    c.loss,
                    fmt_f64(c.max_rel_error),
                    fmt_f64(c.threshold),
                    if c.passed { "PASS" } else { "FAIL" }
                );
            }
            write_json(&cli.out.join("gradcheck.json"), &report)?;
            Ok(if report.passed { EXIT_OK } else { EXIT_VERIFY_FAILED })
        }
        Command::Verify(a) => {
            if let Some(t) = a.trials {
                cfg.verify.trials = t;
            }
            if cfg.verify.trials == 0 {
                eprintln!("warning: zero trials, every check passes vacuously");
            }
            let report = run_verify(&cfg.verify, seed)?;
            for (name, c) in [
                ("ap_oracle", report.ap_oracle),
                ("proposition_bound", report.proposition_bound),
                ("sinkhorn_marginals", report.sinkhorn_marginals),
                ("rank_invariance", report.rank_invariance),
            ] {
                println!("{name:<19} trials={} violations={}", c.trials, c.violations);
            }
            write_json(&cli.out.join("verify.json"), &report)?;
            Ok(if report.passed { EXIT_OK } else { EXIT_VERIFY_FAILED })
        }
        Command::Train(a) => {
            let mut tc = cfg.train_config();
            if let Some(p) = &a.preset {
                let preset = TrainConfig::preset(p)?;
                tc.losses.weights = preset.losses.weights;
                tc.encoder.oaf = preset.encoder.oaf;
            }
            if let Some(s) = a.steps {
                tc.optim.steps = s;
            }
            tc.validate()?;
            let ds = match &a.data {
                Some(dir) => Dataset::load(dir)?,
                None => Dataset::generate(&tc.data.world, tc.data.seed)?,
            };
            let csv_path = cli.out.join("train_log.csv");
            let mut csv = std::io::BufWriter::new(fs::File::create(&csv_path)?);
            write_log_csv(&mut csv, &[])?;
            let outcome = train(&tc, seed, &ds, |row| {
                writeln!(csv, "{}", row.to_csv())?;
                Ok(())
            });
            csv.flush()?;
            let outcome = outcome?;
            save_checkpoint(&cli.out.join("checkpoint"), &outcome.online, &outcome.target)?;
            let report = eval_report(&text, a.preset.as_deref(), seed, &outcome.final_metrics);
            write_json(&cli.out.join("train_metrics.json"), &report)?;
            println!("{}", serde_json::to_string(&report.metrics)?);
            Ok(EXIT_OK)
        }
        Command::Eval(a) => {
            let tc = cfg.train_config();
            tc.validate()?;
            let ds = match &a.data {
                Some(dir) => Dataset::load(dir)?,
                None => Dataset::generate(&tc.data.world, tc.data.seed)?,
            };
            let (online, _) = load_checkpoint(&a.checkpoint)?;
            let (train_idx, eval_idx) = split(&ds, tc.data.eval_scenes);
            let suite = EvalSuite::new(&ds, &train_idx, &eval_idx, tc.data.knn_k)?;
            let m = suite.evaluate(&online, &tc.logging.features)?;
            let report = eval_report(&text, None, seed, &m);
            write_json(&cli.out.join("eval.json"), &report)?;
            println!("{}", serde_json::to_string(&report.metrics)?);
            Ok(EXIT_OK)
        }
        Command::Theory(a) => {
            let mut points = cfg.theory.points.clone();
            if let Some(n) = a.limit {
                points.truncate(n);
            }
            if points.is_empty() {
                return Err(LabError::ConfigError("theory sweep grid is empty".into()));
            }
            let rows = run_sweep(&points, &cfg.theory.optim, seed)?;
            let mut out = String::from(SWEEP_HEADER);
            out.push('\n');
            for r in &rows {
                out.push_str(&r.to_csv());
                out.push('\n');
            }
            fs::write(cli.out.join("theory.csv"), &out)?;
            let ok = rows.iter().filter(|r| r.ok).count();
            println!("{ok}/{} rows with err <= bound", rows.len());
            Ok(EXIT_OK)
        }
        Command::GenData => {
            let ds = Dataset::generate(&cfg.data.world, seed)?;
            let dir = cli.out.join("data");
            ds.save(&dir)?;
            println!("{} scenes written to {}", ds.scenes.len(), dir.display());
            Ok(EXIT_OK)
        }
    }
}

fn eval_report(config_text: &str, preset: Option<&str>, seed: u64, m: &Metrics) -> EvalReport {
    let key = format!("{config_text}\npreset={}", preset.unwrap_or(""));
    EvalReport {
        config_hash: config_hash(&key),
        seed,
        metrics: [
            ("intra_instance_cos", m.intra_instance_cos),
            ("intra_class_cos", m.intra_class_cos),
            ("inter_class_cos", m.inter_class_cos),
            ("knn_patch_acc", m.knn_patch_acc),
            ("knn_image_acc", m.knn_image_acc),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = ExperimentConfig::from_toml("[optim]\nstepz = 3\n").unwrap_err();
        assert_eq!(exit_code(&e), EXIT_CONFIG);
        let e = ExperimentConfig::from_toml("[bogus]\n").unwrap_err();
        assert!(matches!(e, LabError::ConfigError(_)));
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ExperimentConfig::from_toml("[optim]\nsteps = 7\n[verify]\ntrials = 3\n").unwrap();
        assert_eq!(cfg.optim.steps, 7);
        assert_eq!(cfg.verify.trials, 3);
        assert_eq!(cfg.data, DataConfig::default());
    }

    #[test]
    fn missing_seed_is_a_config_error() {
        assert_eq!(run_from_args(["cotap-lab", "verify", "--trials", "1"]), EXIT_CONFIG);
        assert_eq!(run_from_args(["cotap-lab", "no-such-command"]), EXIT_CONFIG);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&LabError::TrainingDiverged { step: 3 }), EXIT_DIVERGED);
        assert_eq!(exit_code(&LabError::NoOverlap), EXIT_VERIFY_FAILED);
    }
}
