//! Subcommand implementations: train, eval, sweep-beta, ablate, gradcheck,
//! bench.

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Task};
use crate::dataio::build_data;
use crate::error::{CliError, Result};
use crate::runner::{apply_params, build_pair, metric_value, run_train, TrainSummary};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::time::Instant;
use tandem_core::data::ClassifySample;
use tandem_core::distill::{gradcheck_loss, DistillConfig, LossKind};
use tandem_core::encoder::encode;
use tandem_core::heads::attentive_pool;
use tandem_core::tasks::{recsys_gradcheck, ImpressionSample, NewsText};
use tandem_core::{Rng, Tape};

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let summary = run_train(cfg)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary.metrics).expect("serializable")
    );
    Ok(summary)
}

pub fn cmd_eval(checkpoint_path: &Path, override_cfg: Option<&RunConfig>, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let saved_cfg = RunConfig::from_text(&ckpt.config_text)?;
    let cfg = override_cfg.unwrap_or(&saved_cfg);
    let data = build_data(cfg)?;
    let mut pair = build_pair(&saved_cfg, &data)?;
    apply_params(&mut pair, &ckpt)?;
    // evaluate exactly the sides the checkpoint carries
    let mut sides = Vec::new();
    if ckpt.params.iter().any(|(n, _)| n.starts_with("teacher.")) {
        sides.push((tandem_core::tasks::ModelSide::Teacher, "teacher"));
    }
    if ckpt.params.iter().any(|(n, _)| n.starts_with("student.")) {
        sides.push((tandem_core::tasks::ModelSide::Student, "student"));
    }
    let metrics = crate::runner::eval_split_sides(&pair, &data, &sides)?;
    let report = json!({
        "task": cfg.task.as_str(),
        "checkpoint": checkpoint_path.display().to_string(),
        "test": metrics,
    });
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("eval_metrics.json"),
        serde_json::to_string_pretty(&report).expect("serializable") + "\n",
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("serializable")
    );
    Ok(())
}

fn csv_metrics_header(task: Task) -> &'static str {
    match task {
        Task::Classify => "student_accuracy,student_macro_f1,teacher_accuracy,teacher_macro_f1",
        Task::Recsys => "student_auc,student_mrr,student_ndcg5,student_ndcg10",
        Task::Retrieval => "student_auc",
    }
}

fn csv_metrics_row(task: Task, metrics: &serde_json::Value) -> String {
    let f = |side: &str, metric: &str| {
        metric_value(metrics, "test", side, metric)
            .map(|v| format!("{v:?}"))
            .unwrap_or_else(|| "nan".into())
    };
    match task {
        Task::Classify => format!(
            "{},{},{},{}",
            f("student", "accuracy"),
            f("student", "macro_f1"),
            f("teacher", "accuracy"),
            f("teacher", "macro_f1"),
        ),
        Task::Recsys => format!(
            "{},{},{},{}",
            f("student", "auc"),
            f("student", "mrr"),
            f("student", "ndcg@5"),
            f("student", "ndcg@10"),
        ),
        Task::Retrieval => f("student", "auc"),
    }
}

/// One training run per beta value, shared seed, results as a CSV table.
pub fn cmd_sweep_beta(cfg: &RunConfig, betas: &[f64]) -> Result<PathBuf> {
    if betas.is_empty() {
        return Err(CliError::Usage("beta list is empty".into()));
    }
    let out = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out)?;
    let mut csv = format!("beta,seed,{}\n", csv_metrics_header(cfg.task));
    for &beta in betas {
        if !(0.0..=1.0).contains(&beta) {
            return Err(CliError::Config(format!("beta {beta} outside [0, 1]")));
        }
        let mut run_cfg = cfg.clone();
        run_cfg.beta = beta;
        run_cfg.enable_momentum = true;
        run_cfg.out_dir = out
            .join(format!("beta_{beta:?}"))
            .to_string_lossy()
            .into_owned();
        let summary = run_train(&run_cfg)?;
        csv.push_str(&format!(
            "{beta:?},{},{}\n",
            cfg.seed,
            csv_metrics_row(cfg.task, &summary.metrics)
        ));
    }
    let path = out.join("sweep.csv");
    std::fs::write(&path, &csv)?;
    print!("{csv}");
    Ok(path)
}

/// Full model plus the three single-component removals, shared seed.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<PathBuf> {
    let out = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out)?;
    let variants: [(&str, fn(&mut RunConfig)); 4] = [
        ("full", |_| {}),
        ("no_momentum", |c| c.enable_momentum = false),
        ("no_distill_loss", |c| c.enable_distill_loss = false),
        ("no_hidden_loss", |c| {
            c.enable_hidden_layer_loss = false;
            c.enable_pooled_hidden_loss = false;
        }),
    ];
    let mut csv = format!("variant,seed,{}\n", csv_metrics_header(cfg.task));
    for (name, tweak) in variants {
        let mut run_cfg = cfg.clone();
        tweak(&mut run_cfg);
        run_cfg.out_dir = out.join(name).to_string_lossy().into_owned();
        let summary = run_train(&run_cfg)?;
        csv.push_str(&format!(
            "{name},{},{}\n",
            cfg.seed,
            csv_metrics_row(cfg.task, &summary.metrics)
        ));
    }
    let path = out.join("ablate.csv");
    std::fs::write(&path, &csv)?;
    print!("{csv}");
    Ok(path)
}

/// Finite-difference audit of every loss; nonzero exit above the 1e-3
/// threshold.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let out = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out)?;
    let mut rng = Rng::new(cfg.seed);

    // desk-scale classification pair straight from the config geometry
    let mut classify_cfg = cfg.clone();
    classify_cfg.task = Task::Classify;
    classify_cfg.synthetic_train = 1;
    classify_cfg.synthetic_val = 1;
    classify_cfg.synthetic_test = 1;
    let data = build_data(&classify_cfg)?;
    let mut pair = build_pair(&classify_cfg, &data)?;
    let token_span = classify_cfg.synthetic_vocab.saturating_sub(2).max(1);
    let sample = ClassifySample {
        tokens: (0..8).map(|_| 2 + rng.below(token_span.min(30))).collect(),
        mask: vec![true; 8],
        label: rng.below(4),
    };
    let distill_cfg = DistillConfig {
        temperature: cfg.temperature,
        beta: cfg.beta,
        ..DistillConfig::default()
    };

    let threshold = 1e-3;
    let mut results = Vec::new();
    let mut all_pass = true;
    for kind in LossKind::all() {
        let check = gradcheck_loss(
            &mut pair,
            &sample,
            &distill_cfg,
            kind,
            cfg.gradcheck_coords,
            1e-5,
            &mut rng,
        )?;
        let pass = check.max_rel_err < threshold;
        all_pass &= pass;
        println!(
            "gradcheck {}: max_rel_err={:.3e} over {} coords ({}) {}",
            check.loss,
            check.max_rel_err,
            check.n_checked,
            check.worst_param,
            if pass { "PASS" } else { "FAIL" }
        );
        results.push(json!({
            "loss": check.loss,
            "max_rel_err": check.max_rel_err,
            "n_checked": check.n_checked,
            "worst_param": check.worst_param,
            "pass": pass,
        }));
    }

    // the recommendation objective, audited on a small impression
    let mut recsys_cfg = cfg.clone();
    recsys_cfg.task = Task::Recsys;
    recsys_cfg.synthetic_train = 1;
    recsys_cfg.synthetic_val = 1;
    recsys_cfg.synthetic_test = 1;
    let recsys_data = build_data(&recsys_cfg)?;
    let mut recsys_pair = build_pair(&recsys_cfg, &recsys_data)?;
    let recsys_span = recsys_cfg.synthetic_vocab.saturating_sub(2).max(1).min(30);
    let gen_news = |rng: &mut Rng| NewsText {
        tokens: (0..6).map(|_| 2 + rng.below(recsys_span)).collect(),
        mask: vec![true; 6],
    };
    let impression = ImpressionSample {
        history: vec![gen_news(&mut rng)],
        candidates: vec![gen_news(&mut rng), gen_news(&mut rng)],
        labels: vec![true, false],
    };
    let check = recsys_gradcheck(
        &mut recsys_pair,
        &impression,
        &distill_cfg,
        cfg.gradcheck_coords,
        1e-5,
        &mut rng,
    )?;
    let pass = check.max_rel_err < threshold;
    all_pass &= pass;
    println!(
        "gradcheck {}: max_rel_err={:.3e} over {} coords ({}) {}",
        check.loss,
        check.max_rel_err,
        check.n_checked,
        check.worst_param,
        if pass { "PASS" } else { "FAIL" }
    );
    results.push(json!({
        "loss": check.loss,
        "max_rel_err": check.max_rel_err,
        "n_checked": check.n_checked,
        "worst_param": check.worst_param,
        "pass": pass,
    }));

    std::fs::write(
        out.join("gradcheck.json"),
        serde_json::to_string_pretty(&json!({ "threshold": threshold, "results": results }))
            .expect("serializable")
            + "\n",
    )?;

    if all_pass {
        println!("gradcheck: all losses PASS at threshold {threshold:.0e}");
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check exceeded the {threshold:.0e} threshold"
        )))
    }
}

fn median_nanos(mut samples: Vec<u128>) -> u128 {
    samples.sort_unstable();
    samples[samples.len() / 2]
}

/// Median single-sequence forward latency of teacher vs student.
pub fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let out = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out)?;
    let mut bench_cfg = cfg.clone();
    bench_cfg.task = Task::Classify;
    bench_cfg.synthetic_train = 1;
    bench_cfg.synthetic_val = 1;
    bench_cfg.synthetic_test = 1;
    let data = build_data(&bench_cfg)?;
    let pair = build_pair(&bench_cfg, &data)?;

    let bench_span = bench_cfg.synthetic_vocab.saturating_sub(2).max(1).min(30);
    let tokens: Vec<usize> = (0..cfg.max_seq_len).map(|i| 2 + (i % bench_span)).collect();
    let mask = vec![true; tokens.len()];

    let measure = |teacher: bool| -> Result<Vec<u128>> {
        let params = if teacher { &pair.teacher } else { &pair.student };
        let mut timings = Vec::with_capacity(cfg.bench_passes);
        let mut sink = 0.0f64;
        for i in 0..cfg.bench_warmup + cfg.bench_passes {
            let start = Instant::now();
            let mut tape = Tape::new();
            let vars = params.lease(&mut tape, "enc", false)?;
            let pool = pair.pool.lease(&mut tape, "pool", false)?;
            let mut rng = Rng::new(0);
            let run = encode(&mut tape, &vars, &tokens, &mask, 0.0, &mut rng)?;
            let h = attentive_pool(&mut tape, &pool, run.last(), &mask)?;
            sink += tape.value(h).data()[0];
            let elapsed = start.elapsed().as_nanos();
            if i >= cfg.bench_warmup {
                timings.push(elapsed);
            }
        }
        // keep the measured work observable
        if !sink.is_finite() {
            return Err(CliError::Numeric("non-finite forward output".into()));
        }
        Ok(timings)
    };

    let teacher_ns = median_nanos(measure(true)?);
    let student_ns = median_nanos(measure(false)?);
    let ratio = teacher_ns as f64 / student_ns as f64;
    let report = json!({
        "teacher_depth": pair.teacher.cfg.num_layers,
        "student_depth": pair.student.cfg.num_layers,
        "k": pair.map.k,
        "passes": cfg.bench_passes,
        "warmup": cfg.bench_warmup,
        "seq_len": tokens.len(),
        "teacher_median_ns": teacher_ns as u64,
        "student_median_ns": student_ns as u64,
        "speedup_ratio": ratio,
    });
    std::fs::write(
        out.join("bench.json"),
        serde_json::to_string_pretty(&report).expect("serializable") + "\n",
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("serializable")
    );
    Ok(())
}

