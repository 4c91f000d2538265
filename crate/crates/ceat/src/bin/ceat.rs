//! Command-line front end. Every subcommand prints a single JSON object
//! on stdout; operational failures print `{"error": ...}` on stderr and
//! exit 1, failed verifications exit 2.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use ceat::absorb::{self, AbsorptionPlan};
use ceat::checkpoint::Checkpoint;
use ceat::config::RunConfig;
use ceat::gradcheck::{check_loss_gradients, DEFAULT_FD_STEP};
use ceat::metrics;
use ceat::report::{self, RunReport};
use ceat::rng;
use ceat::tensor::{Element, Precision, Tensor};
use ceat::trainer::{self, Schedule};
use ceat::{Error, Result};

#[derive(Parser)]
#[command(name = "ceat", version, about = "Continual expansion-absorption training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full incremental protocol and write reports to the output
    /// directory.
    Train {
        /// TOML run configuration; omitted fields take defaults
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory
        #[arg(long)]
        resume: bool,
        /// Stop after this many tasks (for staged runs)
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a checkpointed model on the test split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint file; defaults to <output_dir>/checkpoint.json
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Confirm that folding expansion branches into the checkpointed
    /// model preserves its logits.
    VerifyAbsorb {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of random probe images
        #[arg(long, default_value_t = 100)]
        probes: usize,
    },
    /// Finite-difference checks on every loss term.
    Gradcheck {
        #[arg(long, default_value_t = 1993)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_FD_STEP)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Recompute metrics from a run directory's accuracy matrix and
    /// compare them with its report.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string() }));
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Train { config, resume, stop_after } => {
            let cfg = load_config(&config)?;
            let report = match (resume, stop_after) {
                (true, _) => trainer::resume(&cfg)?,
                (false, Some(n)) => trainer::run_until(&cfg, n)?,
                (false, None) => trainer::run(&cfg)?,
            };
            println!(
                "{}",
                json!({
                    "output_dir": cfg.effective_output_dir(),
                    "tasks": report.tasks.len(),
                    "average_incremental_accuracy": report.average_incremental_accuracy,
                    "average_forgetting": report.average_forgetting,
                    "baseline_average_incremental_accuracy":
                        report.baseline.as_ref().map(|b| b.average_incremental_accuracy),
                    "data_access_violations": report.data_access_violations.len(),
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { config, checkpoint } => {
            let cfg = load_config(&config)?;
            let ckpt = Checkpoint::load(&checkpoint.unwrap_or_else(|| trainer::checkpoint_path(&cfg)))?;
            let out = match ckpt.precision {
                Precision::Single => eval_typed::<f32>(&cfg, &ckpt)?,
                Precision::Double => eval_typed::<f64>(&cfg, &ckpt)?,
            };
            println!("{out}");
            Ok(ExitCode::SUCCESS)
        }
        Cmd::VerifyAbsorb { config, checkpoint, probes } => {
            let cfg = load_config(&config)?;
            let ckpt = Checkpoint::load(&checkpoint.unwrap_or_else(|| trainer::checkpoint_path(&cfg)))?;
            let (out, ok) = match ckpt.precision {
                Precision::Single => verify_absorb_typed::<f32>(&ckpt, probes, 1e-5)?,
                Precision::Double => verify_absorb_typed::<f64>(&ckpt, probes, 1e-10)?,
            };
            println!("{out}");
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Cmd::Gradcheck { seed, step, tolerance } => {
            let terms = check_loss_gradients(seed, step)?;
            let worst = terms.iter().map(|(_, e)| *e).fold(0.0f64, f64::max);
            let ok = worst < tolerance;
            println!(
                "{}",
                json!({
                    "ok": ok,
                    "max_rel_err": worst,
                    "tolerance": tolerance,
                    "terms": terms.iter().map(|(n, e)| (n.clone(), *e)).collect::<std::collections::BTreeMap<_, _>>(),
                })
            );
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Cmd::Report { run_dir } => {
            let stored = RunReport::load(&run_dir.join("report.json"))?;
            let matrix = report::read_matrix_csv(&run_dir.join("matrix.csv"))?;
            let aia = metrics::average_incremental_accuracy(&matrix, &stored.test_sizes)?;
            let af = metrics::average_forgetting(&matrix)?;
            let consistent = matrix.rows() == stored.matrix.as_slice()
                && aia.to_bits() == stored.average_incremental_accuracy.to_bits()
                && af.to_bits() == stored.average_forgetting.to_bits();
            let overall: Vec<f64> = matrix
                .rows()
                .iter()
                .enumerate()
                .map(|(t, row)| metrics::overall_accuracy(row, &stored.test_sizes[..=t]))
                .collect::<Result<_>>()?;
            let baseline_overall = stored.baseline.as_ref().map(|b| b.per_step_overall.clone());
            report::write_accuracy_series_csv(
                &run_dir.join("accuracy_series.csv"),
                &overall,
                baseline_overall.as_deref(),
            )?;
            println!(
                "{}",
                json!({
                    "consistent": consistent,
                    "average_incremental_accuracy": aia,
                    "average_forgetting": af,
                    "per_step_overall": overall,
                })
            );
            Ok(if consistent { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn eval_typed<T: Element>(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<serde_json::Value> {
    if ckpt.tasks_completed == 0 {
        return Err(Error::Checkpoint("checkpoint has no completed tasks".into()));
    }
    let model = ceat::checkpoint::decode_model::<T>(&ckpt.shape, &ckpt.head_sizes, &ckpt.tensors)?;
    let (_, test) = trainer::load_datasets(cfg)?;
    let schedule = Schedule::split(test.num_classes, cfg.base_classes, cfg.classes_per_task, cfg.seed)?;
    let t = ckpt.tasks_completed - 1;
    let row = trainer::evaluate_through(&model, &test, &schedule, t)?;
    let sizes = trainer::test_sizes(&test, &schedule);
    let overall = metrics::overall_accuracy(&row, &sizes[..=t])?;
    Ok(json!({
        "tasks_completed": ckpt.tasks_completed,
        "classes": model.num_classes(),
        "per_task_accuracy": row,
        "overall_accuracy": overall,
    }))
}

fn verify_absorb_typed<T: Element>(
    ckpt: &Checkpoint,
    probes: usize,
    tolerance: f64,
) -> Result<(serde_json::Value, bool)> {
    if probes == 0 {
        return Err(Error::invalid("verify-absorb", "need at least one probe"));
    }
    let model = ceat::checkpoint::decode_model::<T>(&ckpt.shape, &ckpt.head_sizes, &ckpt.tensors)?;
    if model.num_classes() == 0 {
        return Err(Error::Checkpoint("checkpoint has no classifier heads".into()));
    }
    let mut stream = rng::stream(ckpt.seed, ckpt.tasks_completed, "verify-absorb");
    let pixels = ckpt.shape.image_pixels();
    let data: Vec<T> = (0..probes * pixels)
        .map(|_| T::from_f64(stream.random_range(0.0..1.0)))
        .collect();
    let images = Tensor::from_vec(vec![probes, pixels], data)?;

    // branch weights start at zero, so folding them must leave the
    // logits untouched; then again with random branch weights
    let fold_classes = 5;
    let lambda = absorb::lambda_for(fold_classes)?;
    let task = ckpt.tasks_completed.max(1);
    let sites = model.default_sites();

    let mut expanded = model.clone();
    expanded.attach_exfusion(T::from_f64(lambda), &sites)?;
    let mut absorbed = expanded.clone();
    absorb::absorb_all(&mut absorbed, &AbsorptionPlan::new(task, fold_classes, sites.clone())?)?;
    let zero_residual = absorb::verify_equivalence(&expanded, &absorbed, &images)?;

    let noise = Normal::new(0.0, 0.05).map_err(|e| Error::invalid("verify-absorb", e.to_string()))?;
    for (name, p) in expanded.named_params_mut() {
        if name.starts_with("ex.") {
            for v in p.data_mut() {
                *v = T::from_f64(noise.sample(&mut stream));
            }
        }
    }
    let mut absorbed = expanded.clone();
    absorb::absorb_all(&mut absorbed, &AbsorptionPlan::new(task, fold_classes, sites)?)?;
    let random_residual = absorb::verify_equivalence(&expanded, &absorbed, &images)?;

    let ok = zero_residual == 0.0 && random_residual <= tolerance;
    Ok((
        json!({
            "ok": ok,
            "zero_branch_residual": zero_residual,
            "random_branch_residual": random_residual,
            "tolerance": tolerance,
            "probes": probes,
        }),
        ok,
    ))
}
