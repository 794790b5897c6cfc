//! The training driver: epoch loop, batching, per-step reports, per-epoch
//! validation, best/final checkpoints, and resume.

use crate::checkpoint::Checkpoint;
use crate::config::{Mode, RunConfig, Task};
use crate::dataio::{build_data, TaskData};
use crate::error::{CliError, Result};
use serde_json::{json, Value};
use std::io::Write;
use std::path::{Path, PathBuf};
use tandem_core::distill::{Adam, DistillConfig, ModelPair, PairConfig, StepReport, TrainMode};
use tandem_core::encoder::EncoderConfig;
use tandem_core::metrics::{aggregate, auc, macro_f1, mrr, ndcg_at_k, MetricReport, RankedImpression};
use tandem_core::tasks::{
    classify_predictions, recsys_impression_scores, retrieval_score, ClassifySample,
    ImpressionSample, ModelSide, RetrievalSample,
};
use tandem_core::distill::Trainer;
use tandem_core::Rng;

/// FNV-1a over an index sequence; identifies a training data order.
pub fn fingerprint(order: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &i in order {
        for b in (i as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

pub struct Rngs {
    pub train: Rng,
    pub data: Rng,
    pub teacher_data: Rng,
}

impl Rngs {
    pub fn fresh(seed: u64) -> Self {
        let root = Rng::new(seed);
        Rngs {
            train: root.fork(1),
            data: root.fork(2),
            teacher_data: root.fork(3),
        }
    }

    fn states(&self) -> [[u64; 4]; 3] {
        [
            self.train.state(),
            self.data.state(),
            self.teacher_data.state(),
        ]
    }

    fn restore(states: [[u64; 4]; 3]) -> Self {
        Rngs {
            train: Rng::restore(states[0]),
            data: Rng::restore(states[1]),
            teacher_data: Rng::restore(states[2]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Joint,
    TeacherOnly,
    StudentAlone,
    DistillFrozen,
    Retrieval,
}

fn teacher_epochs(cfg: &RunConfig) -> usize {
    cfg.teacher_epochs.unwrap_or(cfg.epochs)
}

fn total_epochs(cfg: &RunConfig) -> usize {
    match cfg.mode {
        Mode::Disjoint if cfg.task != Task::Retrieval => teacher_epochs(cfg) + cfg.epochs,
        _ => cfg.epochs,
    }
}

fn phase_of(cfg: &RunConfig, epoch: usize) -> Phase {
    if cfg.task == Task::Retrieval {
        return Phase::Retrieval;
    }
    match cfg.mode {
        Mode::Joint => Phase::Joint,
        Mode::TeacherOnly => Phase::TeacherOnly,
        Mode::StudentOnly => Phase::StudentAlone,
        Mode::Disjoint => {
            if epoch < teacher_epochs(cfg) {
                Phase::TeacherOnly
            } else {
                Phase::DistillFrozen
            }
        }
    }
}

pub fn distill_config(cfg: &RunConfig) -> DistillConfig {
    DistillConfig {
        temperature: cfg.temperature,
        beta: cfg.beta,
        enable_hidden_layer_loss: cfg.enable_hidden_layer_loss,
        enable_pooled_hidden_loss: cfg.enable_pooled_hidden_loss,
        enable_distill_loss: cfg.enable_distill_loss,
        enable_momentum: cfg.enable_momentum,
        mode: if cfg.mode == Mode::Disjoint {
            TrainMode::Disjoint
        } else {
            TrainMode::Joint
        },
        prob_temperature: cfg.prob_temperature,
        mix_embedding: cfg.mix_embedding,
    }
}

pub fn build_pair(cfg: &RunConfig, data: &TaskData) -> Result<ModelPair> {
    let encoder = EncoderConfig {
        vocab_size: data.vocab_size(),
        max_seq_len: cfg.max_seq_len,
        hidden_dim: cfg.hidden_dim,
        num_heads: cfg.num_heads,
        ffn_dim: cfg.ffn_dim,
        num_layers: cfg.teacher_layers,
        dropout: cfg.dropout,
    };
    let pair_cfg = PairConfig {
        encoder,
        k: cfg.k,
        num_classes: data.num_classes(),
        attn_dim: cfg.attn_dim,
        with_user_pool: cfg.task == Task::Recsys,
    };
    let mut init_rng = Rng::new(cfg.seed).fork(0);
    Ok(ModelPair::init(&pair_cfg, &mut init_rng)?)
}

/// Which parameter partitions a checkpoint of this run carries.
fn saved_param(cfg: &RunConfig, name: &str) -> bool {
    match (cfg.task, cfg.mode) {
        (Task::Retrieval, _) => name.starts_with("student.") || name.starts_with("pool."),
        (_, Mode::TeacherOnly) => !name.starts_with("student."),
        (_, Mode::StudentOnly) => !name.starts_with("teacher."),
        _ => true,
    }
}

fn make_checkpoint(
    cfg: &RunConfig,
    trainer: &Trainer,
    rngs: &Rngs,
    next_epoch: usize,
) -> Checkpoint {
    let params = trainer
        .pair
        .params()
        .into_iter()
        .filter(|(name, _)| saved_param(cfg, name))
        .map(|(name, t)| (name, t.clone()))
        .collect();
    let moments = trainer
        .opt
        .first_moments()
        .iter()
        .map(|(name, m)| {
            let v = trainer.opt.second_moments()[name].clone();
            (name.clone(), m.clone(), v)
        })
        .collect();
    Checkpoint {
        config_text: cfg.to_text(),
        epoch: next_epoch as u64,
        step: trainer.step,
        rng_states: rngs.states(),
        params,
        adam_step: trainer.opt.step_count(),
        moments,
    }
}

/// Copy every matching named parameter from a checkpoint into the pair.
/// Returns how many were applied.
pub fn apply_params(pair: &mut ModelPair, ckpt: &Checkpoint) -> Result<usize> {
    let mut applied = 0;
    let mut params = pair.params_mut();
    for (name, tensor) in &ckpt.params {
        if let Some((_, slot)) = params.iter_mut().find(|(n, _)| n == name) {
            if slot.shape() != tensor.shape() {
                return Err(CliError::Data(format!(
                    "checkpoint parameter {name} has shape {:?}, model wants {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(tensor.data());
            applied += 1;
        }
    }
    if applied == 0 {
        return Err(CliError::Data(
            "checkpoint shares no parameters with this model".into(),
        ));
    }
    Ok(applied)
}

fn metric_records(records: &[(&str, MetricReport)]) -> Value {
    Value::Array(
        records
            .iter()
            .map(|(name, r)| {
                json!({
                    "metric": name,
                    "value": r.value,
                    "n_instances": r.n_instances,
                    "n_excluded": r.n_excluded,
                })
            })
            .collect(),
    )
}

fn empty_report(metrics: &[&'static str]) -> Vec<(&'static str, MetricReport)> {
    metrics
        .iter()
        .map(|&m| {
            (
                m,
                MetricReport {
                    value: f64::NAN,
                    n_instances: 0,
                    n_excluded: 0,
                },
            )
        })
        .collect()
}

pub fn eval_classify(
    pair: &ModelPair,
    side: ModelSide,
    samples: &[ClassifySample],
) -> Result<Vec<(&'static str, MetricReport)>> {
    if samples.is_empty() {
        return Ok(empty_report(&["accuracy", "macro_f1"]));
    }
    let preds = classify_predictions(pair, side, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let acc = tandem_core::metrics::accuracy(&preds, &labels)?;
    let f1 = macro_f1(&preds, &labels, pair.dense.num_classes())?;
    let n = samples.len();
    Ok(vec![
        (
            "accuracy",
            MetricReport {
                value: acc,
                n_instances: n,
                n_excluded: 0,
            },
        ),
        (
            "macro_f1",
            MetricReport {
                value: f1,
                n_instances: n,
                n_excluded: 0,
            },
        ),
    ])
}

pub fn eval_recsys(
    pair: &ModelPair,
    side: ModelSide,
    impressions: &[ImpressionSample],
) -> Result<Vec<(&'static str, MetricReport)>> {
    if impressions.is_empty() {
        return Ok(empty_report(&["auc", "mrr", "ndcg@5", "ndcg@10"]));
    }
    let scored: Vec<RankedImpression> = impressions
        .iter()
        .map(|imp| recsys_impression_scores(pair, side, imp))
        .collect::<tandem_core::Result<_>>()?;
    // a metric undefined on every impression reports NaN, not an error
    let lenient = |r: tandem_core::Result<MetricReport>| -> Result<MetricReport> {
        match r {
            Ok(report) => Ok(report),
            Err(tandem_core::CoreError::Input(_)) => Ok(MetricReport {
                value: f64::NAN,
                n_instances: 0,
                n_excluded: scored.len(),
            }),
            Err(e) => Err(e.into()),
        }
    };
    Ok(vec![
        ("auc", lenient(aggregate(&scored, auc))?),
        ("mrr", lenient(aggregate(&scored, mrr))?),
        ("ndcg@5", lenient(aggregate(&scored, |i| ndcg_at_k(i, 5)))?),
        (
            "ndcg@10",
            lenient(aggregate(&scored, |i| ndcg_at_k(i, 10)))?,
        ),
    ])
}

pub fn eval_retrieval(
    pair: &ModelPair,
    samples: &[RetrievalSample],
) -> Result<Vec<(&'static str, MetricReport)>> {
    if samples.is_empty() {
        return Ok(empty_report(&["auc"]));
    }
    let scores: Vec<f64> = samples
        .iter()
        .map(|s| retrieval_score(pair, s))
        .collect::<tandem_core::Result<_>>()?;
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let imp = RankedImpression::new(scores, labels)?;
    let value = auc(&imp)?;
    Ok(vec![(
        "auc",
        MetricReport {
            value,
            n_instances: samples.len(),
            n_excluded: 0,
        },
    )])
}

fn sides_trained(phase: Phase) -> Vec<(ModelSide, &'static str)> {
    match phase {
        Phase::Joint | Phase::DistillFrozen => vec![
            (ModelSide::Teacher, "teacher"),
            (ModelSide::Student, "student"),
        ],
        Phase::TeacherOnly => vec![(ModelSide::Teacher, "teacher")],
        Phase::StudentAlone | Phase::Retrieval => vec![(ModelSide::Student, "student")],
    }
}

fn eval_sides(
    pair: &ModelPair,
    data: &TaskData,
    sides: &[(ModelSide, &'static str)],
    test: bool,
) -> Result<Value> {
    let mut obj = serde_json::Map::new();
    for &(side, side_name) in sides {
        let records = match data {
            TaskData::Classify(d) => {
                eval_classify(pair, side, if test { &d.test } else { &d.val })?
            }
            TaskData::Recsys(d) => eval_recsys(pair, side, if test { &d.test } else { &d.val })?,
            TaskData::Retrieval(d) => {
                if side == ModelSide::Teacher {
                    continue;
                }
                eval_retrieval(pair, &d.test)?
            }
        };
        obj.insert(side_name.to_string(), metric_records(&records));
    }
    Ok(Value::Object(obj))
}

fn eval_split(
    pair: &ModelPair,
    data: &TaskData,
    phase: Phase,
    test: bool,
) -> Result<Value> {
    eval_sides(pair, data, &sides_trained(phase), test)
}

/// Test-split evaluation of whichever sides make sense for the task; the
/// eval command decides the sides from the checkpoint contents.
pub fn eval_split_public(cfg: &RunConfig, pair: &ModelPair, data: &TaskData) -> Result<Value> {
    let phase = phase_of(cfg, total_epochs(cfg).saturating_sub(1));
    eval_sides(pair, data, &sides_trained(phase), true)
}

/// Evaluate exactly the given sides on the test split.
pub fn eval_split_sides(
    pair: &ModelPair,
    data: &TaskData,
    sides: &[(ModelSide, &'static str)],
) -> Result<Value> {
    eval_sides(pair, data, sides, true)
}

/// Headline validation number used for the best checkpoint: the primary
/// (student when trained, else teacher) model's accuracy or AUC.
fn primary_metric(value: &Value) -> f64 {
    let side = value
        .get("student")
        .or_else(|| value.get("teacher"))
        .and_then(|v| v.as_array());
    side.and_then(|records| {
        records
            .iter()
            .find(|r| {
                matches!(
                    r.get("metric").and_then(|m| m.as_str()),
                    Some("accuracy") | Some("auc")
                )
            })
            .and_then(|r| r.get("value"))
            .and_then(|v| v.as_f64())
    })
    .unwrap_or(f64::NEG_INFINITY)
}

pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub metrics: Value,
    pub final_report: Option<StepReport>,
}

pub fn step_report_json(r: &StepReport) -> Value {
    json!({
        "step": r.step,
        "L_t": r.loss_teacher,
        "L_s": r.loss_student,
        "L_hidden_l": r.loss_hidden_layer,
        "L_hidden_p": r.loss_hidden_pooled,
        "L_distill": r.loss_distill,
        "grad_norm_teacher": r.grad_norm_teacher,
        "grad_norm_student": r.grad_norm_student,
    })
}

fn neutral_config_text(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.out_dir = String::new();
    c.resume_from = None;
    c.to_text()
}

pub fn run_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let out = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;

    let data = build_data(cfg)?;
    let mut pair = build_pair(cfg, &data)?;

    if let Some(init_path) = &cfg.init_from {
        let ckpt = Checkpoint::load(Path::new(init_path))?;
        apply_params(&mut pair, &ckpt)?;
    }

    let mut rngs = Rngs::fresh(cfg.seed);
    let mut start_epoch = 0usize;
    let mut trainer = Trainer::new(pair, cfg.lr, distill_config(cfg))?;

    if let Some(resume_path) = &cfg.resume_from {
        let ckpt = Checkpoint::load(Path::new(resume_path))?;
        let saved_cfg = RunConfig::from_text(&ckpt.config_text)?;
        if neutral_config_text(&saved_cfg) != neutral_config_text(cfg) {
            return Err(CliError::Config(
                "resume checkpoint was written by a different configuration".into(),
            ));
        }
        apply_params(&mut trainer.pair, &ckpt)?;
        let m = ckpt
            .moments
            .iter()
            .map(|(n, m, _)| (n.clone(), m.clone()))
            .collect();
        let v = ckpt
            .moments
            .iter()
            .map(|(n, _, v)| (n.clone(), v.clone()))
            .collect();
        trainer.opt = Adam::restore(cfg.lr, ckpt.adam_step, m, v);
        trainer.step = ckpt.step;
        rngs = Rngs::restore(ckpt.rng_states);
        start_epoch = ckpt.epoch as usize;
    }

    let steps_path = out.join("steps.jsonl");
    let epochs_path = out.join("epochs.jsonl");
    let mut steps_file = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&steps_path)?,
    );
    let mut epochs_file = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&epochs_path)?,
    );

    let epochs_total = total_epochs(cfg);
    let mut best = f64::NEG_INFINITY;
    let mut last_report = None;

    for epoch in start_epoch..epochs_total {
        let phase = phase_of(cfg, epoch);
        let n_train = match &data {
            TaskData::Classify(d) => d.train.len(),
            TaskData::Recsys(d) => d.train.len(),
            TaskData::Retrieval(d) => d.train.len(),
        };
        if n_train == 0 {
            return Err(CliError::Data("training split is empty".into()));
        }
        let mut order: Vec<usize> = (0..n_train).collect();
        if phase == Phase::TeacherOnly && cfg.mode == Mode::Disjoint {
            rngs.teacher_data.shuffle(&mut order);
        } else {
            rngs.data.shuffle(&mut order);
        }
        let order_fingerprint = fingerprint(&order);

        for chunk in order.chunks(cfg.batch_size) {
            let report = match (&data, phase) {
                (TaskData::Classify(d), Phase::Joint) => {
                    let batch: Vec<ClassifySample> =
                        chunk.iter().map(|&i| d.train[i].clone()).collect();
                    trainer.joint_step(&batch, &mut rngs.train)?
                }
                (TaskData::Classify(d), Phase::TeacherOnly) => {
                    let batch: Vec<ClassifySample> =
                        chunk.iter().map(|&i| d.train[i].clone()).collect();
                    trainer.teacher_step(&batch, &mut rngs.train)?
                }
                (TaskData::Classify(d), Phase::StudentAlone) => {
                    let batch: Vec<ClassifySample> =
                        chunk.iter().map(|&i| d.train[i].clone()).collect();
                    trainer.student_alone_step(&batch, &mut rngs.train)?
                }
                (TaskData::Classify(d), Phase::DistillFrozen) => {
                    let batch: Vec<ClassifySample> =
                        chunk.iter().map(|&i| d.train[i].clone()).collect();
                    trainer.distill_from_frozen_step(&batch, &mut rngs.train)?
                }
                (TaskData::Recsys(d), Phase::Joint) => {
                    let batch: Vec<ImpressionSample> =
                        chunk.iter().map(|&i| d.train[i].clone()).collect();
                    trainer.recsys_joint_step(&batch, &mut rngs.train)?
                }
                (TaskData::Recsys(d), Phase::TeacherOnly) => {
                    let batch: Vec<ImpressionSample> =
                        chunk.iter().map(|&i| d.train[i].clone()).collect();
                    trainer.recsys_teacher_step(&batch, &mut rngs.train)?
                }
                (TaskData::Recsys(d), Phase::StudentAlone) => {
                    let batch: Vec<ImpressionSample> =
                        chunk.iter().map(|&i| d.train[i].clone()).collect();
                    trainer.recsys_student_alone_step(&batch, &mut rngs.train)?
                }
                (TaskData::Recsys(d), Phase::DistillFrozen) => {
                    let batch: Vec<ImpressionSample> =
                        chunk.iter().map(|&i| d.train[i].clone()).collect();
                    trainer.recsys_distill_from_frozen_step(&batch, &mut rngs.train)?
                }
                (TaskData::Retrieval(d), _) => {
                    let batch: Vec<RetrievalSample> =
                        chunk.iter().map(|&i| d.train[i].clone()).collect();
                    trainer.retrieval_step(&batch, &mut rngs.train)?
                }
                (_, Phase::Retrieval) => unreachable!("retrieval phase implies retrieval data"),
            };
            writeln!(steps_file, "{}", step_report_json(&report))?;
            last_report = Some(report);
        }
        steps_file.flush()?;

        let do_eval = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == epochs_total;
        if do_eval {
            let val = eval_split(&trainer.pair, &data, phase, false)?;
            let record = json!({
                "epoch": epoch,
                "phase": match phase {
                    Phase::Joint => "joint",
                    Phase::TeacherOnly => "teacher",
                    Phase::StudentAlone => "student-alone",
                    Phase::DistillFrozen => "distill-frozen",
                    Phase::Retrieval => "retrieval",
                },
                "data_order": format!("{order_fingerprint:016x}"),
                "val": val,
            });
            writeln!(epochs_file, "{record}")?;
            epochs_file.flush()?;

            let score = primary_metric(&val);
            if score >= best {
                best = score;
                make_checkpoint(cfg, &trainer, &rngs, epoch + 1).save(&out.join("best.ckpt"))?;
            }
        }
        // rolling checkpoint so an interrupted run can resume at an epoch
        // boundary
        make_checkpoint(cfg, &trainer, &rngs, epoch + 1).save(&out.join("final.ckpt"))?;
    }

    let final_phase = phase_of(cfg, epochs_total.saturating_sub(1));
    let test_metrics = eval_split(&trainer.pair, &data, final_phase, true)?;
    let val_metrics = eval_split(&trainer.pair, &data, final_phase, false)?;
    let mut metrics = serde_json::Map::new();
    metrics.insert("task".into(), json!(cfg.task.as_str()));
    metrics.insert("mode".into(), json!(cfg.mode.as_str()));
    metrics.insert("seed".into(), json!(cfg.seed));
    match &data {
        TaskData::Classify(d) => {
            if let Some(b) = d.bayes_accuracy {
                metrics.insert("bayes_accuracy".into(), json!(b));
            }
        }
        TaskData::Recsys(d) => {
            if let Some(a) = d.planted_auc {
                metrics.insert("planted_auc".into(), json!(a));
            }
        }
        TaskData::Retrieval(_) => {}
    }
    metrics.insert("val".into(), val_metrics);
    metrics.insert("test".into(), test_metrics);
    let metrics = Value::Object(metrics);
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics).expect("serializable") + "\n",
    )?;

    Ok(TrainSummary {
        out_dir: out,
        metrics,
        final_report: last_report,
    })
}

/// Pull one named metric value out of a metrics JSON blob.
pub fn metric_value(metrics: &Value, split: &str, side: &str, metric: &str) -> Option<f64> {
    metrics
        .get(split)?
        .get(side)?
        .as_array()?
        .iter()
        .find(|r| r.get("metric").and_then(|m| m.as_str()) == Some(metric))?
        .get("value")?
        .as_f64()
}
