//! The continual-learning protocol: class schedule, per-task training
//! cycle (snapshot, freeze, expand, optimize, absorb, verify,
//! prototype), evaluation, the fine-tuning baseline, and checkpointed
//! runs.

use std::collections::HashMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::absorb::{self, AbsorptionPlan};
use crate::checkpoint::{self, Checkpoint, CHECKPOINT_VERSION};
use crate::config::RunConfig;
use crate::data::{self, DataAccessLedger, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::metrics::{self, AccuracyMatrix};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::prototypes::{self, PrototypeStore};
use crate::report::{self, BaselineReport, RunReport, TaskRecord};
use crate::rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Element, Precision, Tensor};
use crate::vit::IncrementalViT;

const EVAL_BATCH: usize = 256;
/// Random probe inputs used to verify absorption equivalence.
const VERIFY_INPUTS: usize = 100;

/// Disjoint class lists per task; `tasks[0]` is the base task.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub tasks: Vec<Vec<usize>>,
}

impl Schedule {
    /// Shuffles the label set by seed, takes `base` classes for the base
    /// task, then as many `per_task` chunks as fit. Leftover classes are
    /// unused.
    pub fn split(num_classes: usize, base: usize, per_task: usize, seed: u64) -> Result<Self> {
        if base == 0 || per_task == 0 || base > num_classes {
            return Err(Error::Schedule(format!(
                "base {base} / step {per_task} over {num_classes} classes"
            )));
        }
        let mut ids: Vec<usize> = (0..num_classes).collect();
        let mut order = rng::stream(seed, 0, "class-order");
        ids.shuffle(&mut order);
        let mut tasks = vec![ids[..base].to_vec()];
        let mut rest = &ids[base..];
        while rest.len() >= per_task {
            tasks.push(rest[..per_task].to_vec());
            rest = &rest[per_task..];
        }
        Ok(Schedule { tasks })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn incremental_tasks(&self) -> usize {
        self.tasks.len() - 1
    }

    /// Classifier column of each class: tasks occupy contiguous column
    /// ranges in schedule order.
    pub fn class_to_col(&self) -> HashMap<usize, usize> {
        let mut map = HashMap::new();
        for class in self.tasks.iter().flatten() {
            let col = map.len();
            map.insert(*class, col);
        }
        map
    }

    /// First classifier column of task `t`.
    pub fn col_start(&self, t: usize) -> usize {
        self.tasks[..t].iter().map(|c| c.len()).sum()
    }

    /// Total classes through task `t` inclusive.
    pub fn classes_through(&self, t: usize) -> usize {
        self.col_start(t) + self.tasks[t].len()
    }
}

/// Builds train/test splits from the config: synthetic generation when no
/// dataset path is set, otherwise `{path}.train` / `{path}.test`.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = if cfg.dataset_path.is_empty() {
        let base = SyntheticSpec {
            classes: cfg.synthetic_classes,
            samples_per_class: cfg.synthetic_train_per_class,
            height: cfg.image_size,
            width: cfg.image_size,
            channels: cfg.channels,
            noise_sigma: cfg.noise_sigma,
            template_seed: cfg.seed,
            noise_seed: rng::derive_seed(cfg.seed, 0, "train-noise"),
        };
        let train = data::generate_synthetic(&base)?;
        let test = data::generate_synthetic(&SyntheticSpec {
            samples_per_class: cfg.synthetic_test_per_class,
            noise_seed: rng::derive_seed(cfg.seed, 0, "test-noise"),
            ..base
        })?;
        (train, test)
    } else {
        let train = Dataset::load(&PathBuf::from(format!("{}.train", cfg.dataset_path)))?;
        let test = Dataset::load(&PathBuf::from(format!("{}.test", cfg.dataset_path)))?;
        (train, test)
    };
    if train.height != cfg.image_size || train.width != cfg.image_size || train.channels != cfg.channels {
        return Err(Error::Dataset(format!(
            "train split is {}x{}x{}, config wants {}x{}x{}",
            train.height, train.width, train.channels, cfg.image_size, cfg.image_size, cfg.channels
        )));
    }
    if test.height != train.height || test.width != train.width || test.channels != train.channels
        || test.num_classes != train.num_classes
    {
        return Err(Error::Dataset("train and test splits disagree on shape".into()));
    }
    Ok((train, test))
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.effective_output_dir().join("checkpoint.json")
}

/// Fresh end-to-end run; writes report, matrices, and checkpoints under
/// the output directory.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    match cfg.precision {
        Precision::Single => run_typed::<f32>(cfg, None, None),
        Precision::Double => run_typed::<f64>(cfg, None, None),
    }
}

/// Trains only the first `tasks` tasks, leaving a checkpoint to resume
/// from. The report written covers the completed prefix.
pub fn run_until(cfg: &RunConfig, tasks: usize) -> Result<RunReport> {
    match cfg.precision {
        Precision::Single => run_typed::<f32>(cfg, None, Some(tasks)),
        Precision::Double => run_typed::<f64>(cfg, None, Some(tasks)),
    }
}

/// Continues a run from the checkpoint in the output directory.
pub fn resume(cfg: &RunConfig) -> Result<RunReport> {
    let ckpt = Checkpoint::load(&checkpoint_path(cfg))?;
    match cfg.precision {
        Precision::Single => run_typed::<f32>(cfg, Some(ckpt), None),
        Precision::Double => run_typed::<f64>(cfg, Some(ckpt), None),
    }
}

struct RunState<T: Element> {
    model: IncrementalViT<T>,
    store: PrototypeStore<T>,
    matrix: AccuracyMatrix,
    records: Vec<TaskRecord>,
    ledger: DataAccessLedger,
    baseline_model: Option<IncrementalViT<T>>,
    baseline_matrix: AccuracyMatrix,
    tasks_completed: usize,
}

fn fresh_state<T: Element>(cfg: &RunConfig) -> Result<RunState<T>> {
    let shape = cfg.model_shape();
    Ok(RunState {
        model: IncrementalViT::new(shape.clone(), cfg.seed)?,
        store: PrototypeStore::new(),
        matrix: AccuracyMatrix::new(),
        records: Vec::new(),
        ledger: DataAccessLedger::new(),
        baseline_model: if cfg.run_baseline {
            Some(IncrementalViT::new(shape, cfg.seed)?)
        } else {
            None
        },
        baseline_matrix: AccuracyMatrix::new(),
        tasks_completed: 0,
    })
}

fn restore_state<T: Element>(cfg: &RunConfig, ckpt: Checkpoint) -> Result<RunState<T>> {
    if ckpt.seed != cfg.seed || ckpt.precision != cfg.precision || ckpt.shape != cfg.model_shape() {
        return Err(Error::Checkpoint(
            "checkpoint was produced under a different configuration".into(),
        ));
    }
    let model = checkpoint::decode_model(&ckpt.shape, &ckpt.head_sizes, &ckpt.tensors)?;
    let baseline_model = if cfg.run_baseline {
        if ckpt.baseline_tensors.is_empty() {
            return Err(Error::Checkpoint("checkpoint has no baseline state".into()));
        }
        Some(checkpoint::decode_model(
            &ckpt.shape,
            &ckpt.baseline_head_sizes,
            &ckpt.baseline_tensors,
        )?)
    } else {
        None
    };
    Ok(RunState {
        model,
        store: checkpoint::decode_prototypes(&ckpt.prototypes, ckpt.shape.dim)?,
        matrix: checkpoint::decode_matrix(&ckpt.matrix_bits)?,
        records: ckpt.task_records,
        ledger: DataAccessLedger::from_parts(&ckpt.ledger_summary, ckpt.ledger_violations),
        baseline_model,
        baseline_matrix: checkpoint::decode_matrix(&ckpt.baseline_matrix_bits)?,
        tasks_completed: ckpt.tasks_completed,
    })
}

fn run_typed<T: Element>(
    cfg: &RunConfig,
    resume_from: Option<Checkpoint>,
    stop_after: Option<usize>,
) -> Result<RunReport> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    let schedule = Schedule::split(train.num_classes, cfg.base_classes, cfg.classes_per_task, cfg.seed)?;
    let sizes = test_sizes(&test, &schedule);
    let out_dir = cfg.effective_output_dir();

    let mut state: RunState<T> = match resume_from {
        Some(ckpt) => restore_state(cfg, ckpt)?,
        None => fresh_state(cfg)?,
    };

    let last = stop_after.unwrap_or(schedule.num_tasks()).min(schedule.num_tasks());
    if state.tasks_completed >= schedule.num_tasks() {
        return Err(Error::Train("checkpoint already covers every task".into()));
    }
    for t in state.tasks_completed..last {
        let residual = train_ceat_task(cfg, &train, &schedule, t, &mut state)?;
        let row = evaluate_through(&state.model, &test, &schedule, t)?;
        let overall = metrics::overall_accuracy(&row, &sizes[..=t])?;
        state.records.push(TaskRecord {
            task: t,
            classes: schedule.tasks[t].clone(),
            lambda: if t == 0 { None } else { Some(absorb::lambda_for(schedule.tasks[t].len())?) },
            backbone_params: state.model.backbone_param_count(),
            total_params: state.model.named_params().iter().map(|(_, p)| p.numel()).sum(),
            absorption_residual: residual,
            per_task_accuracy: row.clone(),
            overall_accuracy: overall,
        });
        state.matrix.push_row(row)?;

        if state.baseline_model.is_some() {
            train_baseline_task(cfg, &train, &schedule, t, state.baseline_model.as_mut().unwrap())?;
            let row = evaluate_through(state.baseline_model.as_ref().unwrap(), &test, &schedule, t)?;
            state.baseline_matrix.push_row(row)?;
        }

        state.tasks_completed = t + 1;
        save_checkpoint(cfg, &schedule, &state, &sizes)?;
    }

    let report = assemble_report(cfg, &schedule, &state, &sizes)?;
    report.save(&out_dir.join("report.json"))?;
    report::write_matrix_csv(&out_dir.join("matrix.csv"), &state.matrix)?;
    let overall: Vec<f64> = state.records.iter().map(|r| r.overall_accuracy).collect();
    let baseline_overall = report.baseline.as_ref().map(|b| b.per_step_overall.clone());
    report::write_accuracy_series_csv(
        &out_dir.join("accuracy_series.csv"),
        &overall,
        baseline_overall.as_deref(),
    )?;
    Ok(report)
}

/// Test-set sample count per task.
pub fn test_sizes(test: &Dataset, schedule: &Schedule) -> Vec<usize> {
    schedule
        .tasks
        .iter()
        .map(|classes| classes.iter().map(|&c| test.indices_of_class(c).len()).sum())
        .collect()
}

fn save_checkpoint<T: Element>(
    cfg: &RunConfig,
    schedule: &Schedule,
    state: &RunState<T>,
    sizes: &[usize],
) -> Result<()> {
    let head_sizes: Vec<usize> = schedule.tasks[..state.tasks_completed]
        .iter()
        .map(|c| c.len())
        .collect();
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        precision: cfg.precision,
        seed: cfg.seed,
        tasks_completed: state.tasks_completed,
        shape: cfg.model_shape(),
        head_sizes: head_sizes.clone(),
        tensors: checkpoint::encode_model(&state.model)?,
        baseline_head_sizes: if state.baseline_model.is_some() { head_sizes } else { vec![] },
        baseline_tensors: match &state.baseline_model {
            Some(m) => checkpoint::encode_model(m)?,
            None => vec![],
        },
        prototypes: checkpoint::encode_prototypes(&state.store),
        matrix_bits: checkpoint::encode_matrix(&state.matrix),
        baseline_matrix_bits: checkpoint::encode_matrix(&state.baseline_matrix),
        test_sizes: sizes.to_vec(),
        task_records: state.records.clone(),
        ledger_summary: state.ledger.summary(),
        ledger_violations: state.ledger.violations().to_vec(),
    };
    ckpt.save(&checkpoint_path(cfg))
}

fn assemble_report<T: Element>(
    cfg: &RunConfig,
    schedule: &Schedule,
    state: &RunState<T>,
    sizes: &[usize],
) -> Result<RunReport> {
    let baseline = match &state.baseline_model {
        Some(_) => {
            let per_step_overall: Vec<f64> = state
                .baseline_matrix
                .rows()
                .iter()
                .enumerate()
                .map(|(t, row)| metrics::overall_accuracy(row, &sizes[..=t]))
                .collect::<Result<_>>()?;
            Some(BaselineReport {
                matrix: state.baseline_matrix.rows().to_vec(),
                per_step_overall,
                average_incremental_accuracy: metrics::average_incremental_accuracy(
                    &state.baseline_matrix,
                    sizes,
                )?,
                average_forgetting: metrics::average_forgetting(&state.baseline_matrix)?,
            })
        }
        None => None,
    };
    Ok(RunReport {
        config: cfg.clone(),
        schedule: schedule.tasks.clone(),
        test_sizes: sizes.to_vec(),
        tasks: state.records.clone(),
        matrix: state.matrix.rows().to_vec(),
        average_incremental_accuracy: metrics::average_incremental_accuracy(&state.matrix, sizes)?,
        average_forgetting: metrics::average_forgetting(&state.matrix)?,
        baseline,
        deviations: deviations_in_effect(cfg),
        data_access_summary: state.ledger.summary(),
        data_access_violations: state.ledger.violations().to_vec(),
    })
}

/// Defaulted design choices echoed into every report.
fn deviations_in_effect(cfg: &RunConfig) -> Vec<String> {
    vec![
        format!(
            "optimizer: AdamW lr={} beta1={} beta2={} weight_decay={} with per-task cosine decay",
            cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay
        ),
        format!(
            "epochs: {} base / {} incremental",
            cfg.epochs_base, cfg.epochs_incremental
        ),
        "distillation snapshot: post-absorption end-of-previous-task model".into(),
        format!(
            "logit distillation: plain KL at temperature {} averaged over the batch",
            cfg.distill_temperature
        ),
        "prototypes computed after absorption, from the absorbed backbone".into(),
        "pseudo-feature count per step equals the real batch size".into(),
        format!(
            "contrastive positives from {} labels; feature normalization {}",
            if cfg.pcl_predicted_positives { "predicted" } else { "ground-truth" },
            if cfg.pcl_normalize { "on" } else { "off" }
        ),
        format!(
            "contrastive terms averaged over anchors instead of summed: {}",
            cfg.pcl_anchor_mean
        ),
        format!("contrastive loss on the base task: {}", cfg.pcl_on_base),
        "baseline: same architecture, plain per-task fine-tuning without freeze, expansion, prototypes, or contrastive loss".into(),
    ]
}

// ---- per-task training ----

enum StepMode<'a, T: Element> {
    Base {
        use_pcl: bool,
        weights: LossWeights,
    },
    Incremental {
        snapshot: &'a IncrementalViT<T>,
        store: &'a PrototypeStore<T>,
        zeta: f64,
        n_old: usize,
        weights: LossWeights,
    },
    PlainFineTune,
}

fn train_ceat_task<T: Element>(
    cfg: &RunConfig,
    train: &Dataset,
    schedule: &Schedule,
    t: usize,
    state: &mut RunState<T>,
) -> Result<Option<f64>> {
    let classes = &schedule.tasks[t];
    let weights = LossWeights::for_task(schedule.classes_through(t), classes.len(), cfg.tau)?;
    let residual;
    if t == 0 {
        state.model.expand_classifier(classes.len(), cfg.seed, 0)?;
        state.model.set_backbone_trainable(true);
        let mode = StepMode::Base { use_pcl: cfg.pcl_on_base, weights };
        train_epochs(
            cfg, train, schedule, t, &mut state.model, mode, cfg.epochs_base,
            Some(&mut state.ledger), "ceat",
        )?;
        residual = None;
    } else {
        let snapshot = state.model.clone();
        absorb::freeze_backbone(&mut state.model, t)?;
        let lambda = absorb::lambda_for(classes.len())?;
        let sites = state.model.default_sites();
        state.model.attach_exfusion(T::from_f64(lambda), &sites)?;
        state.model.expand_classifier(classes.len(), cfg.seed, t)?;
        let mode = StepMode::Incremental {
            snapshot: &snapshot,
            store: &state.store,
            zeta: prototypes::zeta_for_task(t, schedule.incremental_tasks())?,
            n_old: schedule.col_start(t),
            weights,
        };
        train_epochs(
            cfg, train, schedule, t, &mut state.model, mode, cfg.epochs_incremental,
            Some(&mut state.ledger), "ceat",
        )?;
        audit_backbone_frozen(&snapshot, &state.model, t)?;
        let expanded = state.model.clone();
        let plan = AbsorptionPlan::new(t, classes.len(), sites)?;
        absorb::absorb_all(&mut state.model, &plan)?;
        let probes = uniform_rows::<T>(
            &mut rng::stream(cfg.seed, t, "verify"),
            VERIFY_INPUTS,
            cfg.model_shape().image_pixels(),
        )?;
        residual = Some(absorb::verify_equivalence(&expanded, &state.model, &probes)?);
    }

    // prototypes come from the absorbed backbone, so the features they
    // freeze are exactly the ones later tasks will reproduce
    let class_to_col = schedule.class_to_col();
    let idx: Vec<usize> = classes
        .iter()
        .flat_map(|&c| train.indices_of_class(c).iter().copied())
        .collect();
    let features = extract_features(&state.model, train, &idx)?;
    let labels_cols: Vec<usize> = idx.iter().map(|&i| class_to_col[&train.label(i)]).collect();
    let cols: Vec<usize> = classes.iter().map(|c| class_to_col[c]).collect();
    let protos = prototypes::compute_prototypes(&features, &labels_cols, &cols, t)?;
    state.store.extend(protos)?;
    Ok(residual)
}

fn train_baseline_task<T: Element>(
    cfg: &RunConfig,
    train: &Dataset,
    schedule: &Schedule,
    t: usize,
    model: &mut IncrementalViT<T>,
) -> Result<()> {
    model.expand_classifier(schedule.tasks[t].len(), cfg.seed, t)?;
    model.set_backbone_trainable(true);
    let epochs = if t == 0 { cfg.epochs_base } else { cfg.epochs_incremental };
    train_epochs(cfg, train, schedule, t, model, StepMode::PlainFineTune, epochs, None, "baseline")
}

fn audit_backbone_frozen<T: Element>(
    before: &IncrementalViT<T>,
    after: &IncrementalViT<T>,
    task: usize,
) -> Result<()> {
    let head_prefix = "head";
    let trained: HashMap<String, &Tensor<T>> = after
        .named_params()
        .into_iter()
        .filter(|(n, _)| !n.starts_with(head_prefix) && !n.starts_with("ex."))
        .collect();
    for (name, param) in before.named_params() {
        if name.starts_with(head_prefix) {
            continue;
        }
        let now = trained
            .get(&name)
            .ok_or_else(|| Error::Train(format!("task {task}: backbone parameter {name} vanished")))?;
        if !param.bitwise_eq(now) {
            return Err(Error::Train(format!(
                "task {task}: frozen backbone parameter {name} changed during training"
            )));
        }
    }
    Ok(())
}

fn train_epochs<T: Element>(
    cfg: &RunConfig,
    train: &Dataset,
    schedule: &Schedule,
    task: usize,
    model: &mut IncrementalViT<T>,
    mode: StepMode<'_, T>,
    epochs: usize,
    mut ledger: Option<&mut DataAccessLedger>,
    purpose: &str,
) -> Result<()> {
    let classes = &schedule.tasks[task];
    let class_to_col = schedule.class_to_col();
    let idx: Vec<usize> = classes
        .iter()
        .flat_map(|&c| train.indices_of_class(c).iter().copied())
        .collect();
    if idx.is_empty() {
        return Err(Error::Train(format!("task {task} has no training samples")));
    }
    let cols: Vec<usize> = idx.iter().map(|&i| class_to_col[&train.label(i)]).collect();

    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    })?;
    let mut order_rng = rng::stream(cfg.seed, task, &format!("{purpose}-batch-order"));
    let mut augment_rng = rng::stream(cfg.seed, task, &format!("{purpose}-augment"));
    let mut pseudo_rng = rng::stream(cfg.seed, task, &format!("{purpose}-pseudo"));
    let mut order: Vec<usize> = (0..idx.len()).collect();

    for epoch in 0..epochs {
        let lr = cosine_lr(cfg.lr, epoch, epochs)?;
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let ds_idx: Vec<usize> = chunk.iter().map(|&i| idx[i]).collect();
            let batch_cols: Vec<usize> = chunk.iter().map(|&i| cols[i]).collect();
            if let Some(ledger) = ledger.as_deref_mut() {
                let raw: Vec<usize> = ds_idx.iter().map(|&i| train.label(i)).collect();
                ledger.record_training_batch(task, &raw, classes);
            }
            let images = train.image_rows::<T>(&ds_idx)?;
            train_step(cfg, model, &images, &batch_cols, &mode, &mut augment_rng, &mut pseudo_rng, &mut opt, lr)
                .map_err(|e| Error::Train(format!("task {task} epoch {epoch}: {e}")))?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_step<T: Element>(
    cfg: &RunConfig,
    model: &mut IncrementalViT<T>,
    images: &Tensor<T>,
    cols: &[usize],
    mode: &StepMode<'_, T>,
    augment_rng: &mut ChaCha8Rng,
    pseudo_rng: &mut ChaCha8Rng,
    opt: &mut AdamW,
    lr: f64,
) -> Result<()> {
    let n = images.rows();
    let mut tape: Tape<T> = Tape::new();
    match mode {
        StepMode::PlainFineTune => {
            let pass = model.forward(&mut tape, images)?;
            let loss = losses::classification_loss(&mut tape, pass.logits, cols)?;
            let grads = tape.backward(loss)?;
            apply_grads(opt, model, grads, vec![pass.params], lr)
        }
        StepMode::Base { use_pcl, weights } => {
            if !use_pcl {
                let pass = model.forward(&mut tape, images)?;
                let loss = losses::classification_loss(&mut tape, pass.logits, cols)?;
                let grads = tape.backward(loss)?;
                return apply_grads(opt, model, grads, vec![pass.params], lr);
            }
            let views = data::augment_batch(images, cfg.image_size, cfg.image_size, cfg.channels, augment_rng)?;
            let both = vstack(images, &views)?;
            let pass = model.forward(&mut tape, &both)?;
            let logits_real = tape.slice_rows(pass.logits, 0, n)?;
            let bce = losses::classification_loss(&mut tape, logits_real, cols)?;
            let pcl_labels = contrastive_labels(cfg, &tape, pass.logits, cols)?;
            let no_protos: Tensor<T> = Tensor::zeros(vec![1, tape.value(pass.features).cols()]);
            let pcl = losses::pcl(
                &mut tape, pass.features, &pcl_labels, &no_protos, &[], weights.tau,
                cfg.pcl_normalize, cfg.pcl_anchor_mean,
            )?;
            let total = losses::total_loss(&mut tape, bce, None, None, Some(pcl), weights)?;
            let grads = tape.backward(total)?;
            apply_grads(opt, model, grads, vec![pass.params], lr)
        }
        StepMode::Incremental { snapshot, store, zeta, n_old, weights } => {
            let views = data::augment_batch(images, cfg.image_size, cfg.image_size, cfg.channels, augment_rng)?;
            let both = vstack(images, &views)?;
            let pass = model.forward(&mut tape, &both)?;
            let features_real = tape.slice_rows(pass.features, 0, n)?;
            let logits_real = tape.slice_rows(pass.logits, 0, n)?;
            let bce = losses::classification_loss(&mut tape, logits_real, cols)?;

            let (old_features, old_logits) = {
                let mut old_tape: Tape<T> = Tape::new();
                let old_pass = snapshot.forward(&mut old_tape, images)?;
                (
                    old_tape.value(old_pass.features).clone(),
                    old_tape.value(old_pass.logits).clone(),
                )
            };
            let kd = losses::kd_losses(
                &mut tape, features_real, logits_real, &old_features, &old_logits,
                *n_old, cfg.distill_temperature,
            )?;

            let real_features_now = take_rows(tape.value(pass.features), n)?;
            let (pseudo, pseudo_labels) =
                prototypes::generate_pseudo_batch(store, &real_features_now, cols, *zeta, pseudo_rng)?;
            let pseudo_var = tape.constant(&pseudo)?;
            let (pseudo_logits, head_params) = model.classify(&mut tape, pseudo_var)?;
            let ipf = losses::ipf_loss(&mut tape, Some((pseudo_logits, pseudo_labels.as_slice())), *n_old)?;

            let (proto_mat, proto_labels) = store.as_matrix()?;
            let pcl_labels = contrastive_labels(cfg, &tape, pass.logits, cols)?;
            let pcl = losses::pcl(
                &mut tape, pass.features, &pcl_labels, &proto_mat, &proto_labels,
                weights.tau, cfg.pcl_normalize, cfg.pcl_anchor_mean,
            )?;

            let total = losses::total_loss(&mut tape, bce, Some(kd), Some(ipf), Some(pcl), weights)?;
            let grads = tape.backward(total)?;
            apply_grads(opt, model, grads, vec![pass.params, head_params], lr)
        }
    }
}

/// Labels for the contrastive term over the doubled batch: ground truth
/// repeats the batch labels onto the views; predicted mode takes each
/// row's argmax from the live logits.
fn contrastive_labels<T: Element>(
    cfg: &RunConfig,
    tape: &Tape<T>,
    logits_all: Var,
    cols: &[usize],
) -> Result<Vec<usize>> {
    if cfg.pcl_predicted_positives {
        Ok(argmax_rows(tape.value(logits_all)))
    } else {
        let mut labels = cols.to_vec();
        labels.extend_from_slice(cols);
        Ok(labels)
    }
}

fn argmax_rows<T: Element>(t: &Tensor<T>) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row_slice(i);
            let mut best = 0usize;
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn apply_grads<T: Element>(
    opt: &mut AdamW,
    model: &mut IncrementalViT<T>,
    mut grads: Gradients<T>,
    param_lists: Vec<Vec<(String, Var)>>,
    lr: f64,
) -> Result<()> {
    // the same parameter may appear as several tape leaves (e.g. heads
    // used for both real and pseudo logits); its total gradient is the sum
    let mut acc: HashMap<String, Tensor<T>> = HashMap::new();
    for (name, var) in param_lists.into_iter().flatten() {
        if let Some(g) = grads.take(var) {
            match acc.get_mut(&name) {
                Some(t) => add_assign(t, &g)?,
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    for (name, param) in model.named_params_mut() {
        if let Some(g) = acc.remove(&name) {
            opt.step(&name, param, &g, lr)?;
        }
    }
    if let Some(name) = acc.keys().next() {
        return Err(Error::Train(format!("gradient for unknown parameter {name}")));
    }
    Ok(())
}

fn add_assign<T: Element>(a: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "grad_accumulate",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x = T::from_f64(x.to_f64() + y.to_f64());
    }
    Ok(())
}

fn vstack<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.cols() != b.cols() {
        return Err(Error::shape("vstack", format!("{} vs {} columns", a.cols(), b.cols())));
    }
    let mut data = Vec::with_capacity((a.rows() + b.rows()) * a.cols());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(vec![a.rows() + b.rows(), a.cols()], data)
}

fn take_rows<T: Element>(t: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    if n == 0 || n > t.rows() {
        return Err(Error::shape("take_rows", format!("{n} of {}", t.rows())));
    }
    Tensor::from_vec(vec![n, t.cols()], t.data()[..n * t.cols()].to_vec())
}

fn uniform_rows<T: Element>(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<Tensor<T>> {
    let data: Vec<T> = (0..n * d).map(|_| T::from_f64(rng.random_range(0.0..1.0))).collect();
    Tensor::from_vec(vec![n, d], data)
}

/// Features for a list of dataset indices, batched through the model.
pub fn extract_features<T: Element>(
    model: &IncrementalViT<T>,
    ds: &Dataset,
    idx: &[usize],
) -> Result<Tensor<T>> {
    let mut out: Option<Tensor<T>> = None;
    for chunk in idx.chunks(EVAL_BATCH) {
        let images = ds.image_rows::<T>(chunk)?;
        let mut tape: Tape<T> = Tape::new();
        let (features, _) = model.forward_features(&mut tape, &images)?;
        let values = tape.value(features).clone();
        out = Some(match out {
            None => values,
            Some(acc) => vstack(&acc, &values)?,
        });
    }
    out.ok_or_else(|| Error::Train("no indices to extract features for".into()))
}

/// Per-task accuracies of `model` on the test split, tasks 0..=t.
pub fn evaluate_through<T: Element>(
    model: &IncrementalViT<T>,
    test: &Dataset,
    schedule: &Schedule,
    t: usize,
) -> Result<Vec<f64>> {
    let class_to_col = schedule.class_to_col();
    let mut row = Vec::with_capacity(t + 1);
    for classes in &schedule.tasks[..=t] {
        let idx: Vec<usize> = classes
            .iter()
            .flat_map(|&c| test.indices_of_class(c).iter().copied())
            .collect();
        if idx.is_empty() {
            return Err(Error::Train("task has no test samples".into()));
        }
        let mut correct = 0usize;
        for chunk in idx.chunks(EVAL_BATCH) {
            let images = test.image_rows::<T>(chunk)?;
            let mut tape: Tape<T> = Tape::new();
            let pass = model.forward(&mut tape, &images)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| class_to_col[&test.label(i)]).collect();
            correct += metrics::top1_correct(tape.value(pass.logits), &labels)?;
        }
        row.push(correct as f64 / idx.len() as f64);
    }
    Ok(row)
}
