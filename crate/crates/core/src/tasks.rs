//! Task pipelines: news topic classification, two-tower news
//! recommendation, and two-tower news retrieval fine-tuning.
//!
//! Recommendation wiring: teacher and student encoders each embed every
//! history and candidate news through the shared attentive pooling; a
//! shared user encoder (another attentive pooling) turns clicked-news
//! embeddings into a user vector; the click predictor is the inner
//! product. Distillation applies to the candidate score vectors, hidden
//! losses to every news embedding and the user embedding.

pub use crate::data::{ClassifySample, ImpressionSample, NewsText, RetrievalSample};

use crate::data::PAD;
use crate::distill::{
    apply_momentum, distillation_loss, hidden_layer_loss, pooled_hidden_loss, student_loss,
    total_distill_loss, DistillConfig, ModelPair, StepReport, TeacherRole,
    TrainMode, Trainer,
};
use crate::encoder::{encode, EncoderRun, EncoderVars};
use crate::error::{CoreError, Result};
use crate::heads::{attentive_pool, classify, PoolVars};
use crate::metrics::RankedImpression;
use crate::rng::Rng;
use crate::tape::{GradientSet, Tape, Var};
use crate::tensor::Tensor;
use alloc::vec::Vec;

/// Which encoder of the pair to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSide {
    Teacher,
    Student,
}

/// Encode one news text and pool it into a single embedding.
pub fn news_embed(
    tape: &mut Tape,
    enc: &EncoderVars,
    pool: &PoolVars,
    news: &NewsText,
    dropout: f64,
    rng: &mut Rng,
) -> Result<Var> {
    let run = encode(tape, enc, &news.tokens, &news.mask, dropout, rng)?;
    attentive_pool(tape, pool, run.last(), &news.mask)
}

fn news_embed_with_run(
    tape: &mut Tape,
    enc: &EncoderVars,
    pool: &PoolVars,
    news: &NewsText,
    dropout: f64,
    rng: &mut Rng,
) -> Result<(EncoderRun, Var)> {
    let run = encode(tape, enc, &news.tokens, &news.mask, dropout, rng)?;
    let h = attentive_pool(tape, pool, run.last(), &news.mask)?;
    Ok((run, h))
}

/// Pool clicked-news embeddings into a user vector. An empty history is a
/// cold user and maps to the zero vector. The clicked embeddings are
/// stacked in a canonical value order, so the result is bit-stable under
/// any permutation of the history.
pub fn user_encode(
    tape: &mut Tape,
    user_pool: &PoolVars,
    clicked: &[Var],
    hidden_dim: usize,
) -> Result<Var> {
    if clicked.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[hidden_dim])));
    }
    let mut order: Vec<usize> = (0..clicked.len()).collect();
    order.sort_by(|&a, &b| {
        let (va, vb) = (tape.value(clicked[a]).data(), tape.value(clicked[b]).data());
        va.iter()
            .zip(vb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let ordered: Vec<Var> = order.iter().map(|&i| clicked[i]).collect();
    let h = tape.stack_rows(&ordered)?;
    let mask = alloc::vec![true; ordered.len()];
    attentive_pool(tape, user_pool, h, &mask)
}

/// Click probability score: inner product of user and candidate embedding.
pub fn click_score(tape: &mut Tape, user: Var, candidate: Var) -> Result<Var> {
    tape.dot(user, candidate)
}

/// Class logits for one sample with dropout off; used by evaluation.
pub fn classify_logits(
    pair: &ModelPair,
    side: ModelSide,
    sample: &ClassifySample,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let enc = match side {
        ModelSide::Teacher => pair.teacher.lease(&mut tape, "enc", false)?,
        ModelSide::Student => pair.student.lease(&mut tape, "enc", false)?,
    };
    let pool = pair.pool.lease(&mut tape, "pool", false)?;
    let dense = pair.dense.lease(&mut tape, "dense", false)?;
    let mut rng = Rng::new(0);
    let run = encode(&mut tape, &enc, &sample.tokens, &sample.mask, 0.0, &mut rng)?;
    let h = attentive_pool(&mut tape, &pool, run.last(), &sample.mask)?;
    let logits = classify(&mut tape, &dense, h)?;
    Ok(tape.value(logits).data().to_vec())
}

/// Argmax predictions over a sample slice, ties to the lowest class index.
pub fn classify_predictions(
    pair: &ModelPair,
    side: ModelSide,
    samples: &[ClassifySample],
) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            let logits = classify_logits(pair, side, s)?;
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            Ok(best)
        })
        .collect()
}

/// Candidate scores for one impression with dropout off.
pub fn recsys_impression_scores(
    pair: &ModelPair,
    side: ModelSide,
    sample: &ImpressionSample,
) -> Result<RankedImpression> {
    let user_pool_params = pair.user_pool.as_ref().ok_or_else(|| {
        CoreError::Config("recommendation needs a user pooling layer".into())
    })?;
    let mut tape = Tape::new();
    let enc = match side {
        ModelSide::Teacher => pair.teacher.lease(&mut tape, "enc", false)?,
        ModelSide::Student => pair.student.lease(&mut tape, "enc", false)?,
    };
    let pool = pair.pool.lease(&mut tape, "pool", false)?;
    let user_pool = user_pool_params.lease(&mut tape, "user_pool", false)?;
    let mut rng = Rng::new(0);
    let clicked: Vec<Var> = sample
        .history
        .iter()
        .map(|news| news_embed(&mut tape, &enc, &pool, news, 0.0, &mut rng))
        .collect::<Result<_>>()?;
    let u = user_encode(&mut tape, &user_pool, &clicked, pair.teacher.cfg.hidden_dim)?;
    let scores = sample
        .candidates
        .iter()
        .map(|news| {
            let h = news_embed(&mut tape, &enc, &pool, news, 0.0, &mut rng)?;
            let s = click_score(&mut tape, u, h)?;
            Ok(tape.scalar_value(s))
        })
        .collect::<Result<Vec<f64>>>()?;
    RankedImpression::new(scores, sample.labels.clone())
}

/// Two-tower relevance score of a retrieval pair under the student
/// encoder, dropout off.
pub fn retrieval_score(pair: &ModelPair, sample: &RetrievalSample) -> Result<f64> {
    let mut tape = Tape::new();
    let enc = pair.student.lease(&mut tape, "enc", false)?;
    let pool = pair.pool.lease(&mut tape, "pool", false)?;
    let mut rng = Rng::new(0);
    let q = news_embed(&mut tape, &enc, &pool, &sample.query, 0.0, &mut rng)?;
    let d = news_embed(&mut tape, &enc, &pool, &sample.doc, 0.0, &mut rng)?;
    let s = click_score(&mut tape, q, d)?;
    Ok(tape.scalar_value(s))
}

struct RecsysPathOutputs {
    run_per_news: Vec<EncoderRun>,
    embed_per_news: Vec<Var>,
    user: Var,
    scores: Var,
}

fn recsys_forward_path(
    tape: &mut Tape,
    enc: &EncoderVars,
    pool: &PoolVars,
    user_pool: &PoolVars,
    sample: &ImpressionSample,
    dropout: f64,
    rng: &mut Rng,
) -> Result<RecsysPathOutputs> {
    let mut run_per_news = Vec::new();
    let mut embed_per_news = Vec::new();
    let mut clicked = Vec::with_capacity(sample.history.len());
    for news in &sample.history {
        let (run, h) = news_embed_with_run(tape, enc, pool, news, dropout, rng)?;
        run_per_news.push(run);
        embed_per_news.push(h);
        clicked.push(h);
    }
    let user = user_encode(tape, user_pool, &clicked, enc.cfg.hidden_dim)?;
    let mut score_vars = Vec::with_capacity(sample.candidates.len());
    for news in &sample.candidates {
        let (run, h) = news_embed_with_run(tape, enc, pool, news, dropout, rng)?;
        let s = click_score(tape, user, h)?;
        run_per_news.push(run);
        embed_per_news.push(h);
        score_vars.push(s);
    }
    let scores = tape.stack_scalars(&score_vars)?;
    Ok(RecsysPathOutputs {
        run_per_news,
        embed_per_news,
        user,
        scores,
    })
}

impl Trainer {
    /// One joint optimization step on an impression batch, mirroring the
    /// classification joint step: candidate-set softmax cross-entropy per
    /// path, distillation on the score vectors, hidden losses on every
    /// news embedding and the user embedding, momentum on student layers.
    pub fn recsys_joint_step(
        &mut self,
        batch: &[ImpressionSample],
        rng: &mut Rng,
    ) -> Result<StepReport> {
        if self.cfg.mode != TrainMode::Joint {
            return Err(CoreError::Contract(
                "recsys_joint_step called while configured for disjoint training".into(),
            ));
        }
        self.recsys_step(batch, rng, TeacherRole::Trained, true, true)
    }

    pub fn recsys_teacher_step(
        &mut self,
        batch: &[ImpressionSample],
        rng: &mut Rng,
    ) -> Result<StepReport> {
        self.recsys_step(batch, rng, TeacherRole::Trained, false, true)
    }

    pub fn recsys_student_alone_step(
        &mut self,
        batch: &[ImpressionSample],
        rng: &mut Rng,
    ) -> Result<StepReport> {
        self.recsys_step(batch, rng, TeacherRole::Absent, true, false)
    }

    pub fn recsys_distill_from_frozen_step(
        &mut self,
        batch: &[ImpressionSample],
        rng: &mut Rng,
    ) -> Result<StepReport> {
        let role = if self.cfg.enable_momentum {
            TeacherRole::FrozenWithGrads
        } else {
            TeacherRole::Frozen
        };
        self.recsys_step(batch, rng, role, true, true)
    }

    fn recsys_step(
        &mut self,
        batch: &[ImpressionSample],
        rng: &mut Rng,
        teacher_role: TeacherRole,
        with_student: bool,
        with_distill: bool,
    ) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(CoreError::Input("empty batch".into()));
        }
        let cfg = self.cfg.clone();
        let pair = &self.pair;
        let user_pool_params = pair.user_pool.as_ref().ok_or_else(|| {
            CoreError::Config("recommendation needs a user pooling layer".into())
        })?;
        let dropout = pair.teacher.cfg.dropout;

        let mut tape = Tape::new();
        let teacher_vars = match teacher_role {
            TeacherRole::Absent => None,
            TeacherRole::Trained => Some(pair.teacher.lease(&mut tape, "teacher", true)?),
            TeacherRole::Frozen | TeacherRole::FrozenWithGrads => {
                Some(pair.teacher.lease(&mut tape, "teacher", false)?)
            }
        };
        let student_vars = with_student
            .then(|| pair.student.lease(&mut tape, "student", true))
            .transpose()?;
        let pool_vars = pair.pool.lease(&mut tape, "pool", true)?;
        let user_pool_vars = user_pool_params.lease(&mut tape, "user_pool", true)?;

        let teacher_trains = teacher_role == TeacherRole::Trained;
        let teacher_dropout = if teacher_trains { dropout } else { 0.0 };
        let distill_active = with_distill && with_student && teacher_vars.is_some();

        let mut l_t_terms = Vec::new();
        let mut l_s_terms = Vec::new();
        let mut hid_l_terms = Vec::new();
        let mut hid_p_terms = Vec::new();
        let mut dist_terms = Vec::new();

        for sample in batch {
            let pos = sample.positive_index().ok_or_else(|| {
                CoreError::Input("training impression needs a positive candidate".into())
            })?;

            let teacher_out = match &teacher_vars {
                Some(tv) => {
                    let out = recsys_forward_path(
                        &mut tape,
                        tv,
                        &pool_vars,
                        &user_pool_vars,
                        sample,
                        teacher_dropout,
                        rng,
                    )?;
                    if teacher_trains {
                        l_t_terms.push(tape.ce_one_hot(out.scores, pos)?);
                    }
                    Some(out)
                }
                None => None,
            };

            if let Some(sv) = &student_vars {
                let out = recsys_forward_path(
                    &mut tape,
                    sv,
                    &pool_vars,
                    &user_pool_vars,
                    sample,
                    dropout,
                    rng,
                )?;

                let (mut hid_l, mut hid_p, mut dist) = (None, None, None);
                if distill_active {
                    let t_out = teacher_out.as_ref().expect("teacher present");
                    if cfg.enable_hidden_layer_loss {
                        let mut terms = Vec::new();
                        for (t_run, s_run) in t_out.run_per_news.iter().zip(&out.run_per_news) {
                            terms.push(hidden_layer_loss(&mut tape, t_run, s_run, &pair.map)?);
                        }
                        let v = tape.sum_vars(&terms)?;
                        hid_l_terms.push(v);
                        hid_l = Some(v);
                    }
                    if cfg.enable_pooled_hidden_loss {
                        let mut terms = Vec::new();
                        for (t_h, s_h) in t_out.embed_per_news.iter().zip(&out.embed_per_news) {
                            terms.push(pooled_hidden_loss(&mut tape, *t_h, *s_h)?);
                        }
                        terms.push(pooled_hidden_loss(&mut tape, t_out.user, out.user)?);
                        let v = tape.sum_vars(&terms)?;
                        hid_p_terms.push(v);
                        hid_p = Some(v);
                    }
                    if cfg.enable_distill_loss {
                        let v = distillation_loss(
                            &mut tape,
                            t_out.scores,
                            out.scores,
                            cfg.temperature,
                            cfg.prob_temperature,
                        )?;
                        dist_terms.push(v);
                        dist = Some(v);
                    }
                }
                let l_d = total_distill_loss(&mut tape, hid_l, hid_p, dist)?;
                let ce = tape.ce_one_hot(out.scores, pos)?;
                l_s_terms.push(tape.sum_vars(&[l_d, ce])?);
            }
        }

        let mean_of = |tape: &mut Tape, terms: &[Var]| -> Result<Option<Var>> {
            if terms.is_empty() {
                return Ok(None);
            }
            let stacked = tape.stack_scalars(terms)?;
            Ok(Some(tape.mean(stacked)))
        };
        let l_t = mean_of(&mut tape, &l_t_terms)?;
        let l_s = mean_of(&mut tape, &l_s_terms)?;
        let hid_l_mean = mean_of(&mut tape, &hid_l_terms)?;
        let hid_p_mean = mean_of(&mut tape, &hid_p_terms)?;
        let dist_mean = mean_of(&mut tape, &dist_terms)?;

        if let Some(l_t) = l_t {
            tape.backward(l_t)?;
        }
        if let Some(l_s) = l_s {
            tape.backward(l_s)?;
        }
        let mut grads = tape.gradients();

        if teacher_role == TeacherRole::FrozenWithGrads {
            let side = self.frozen_teacher_recsys_gradients(batch)?;
            for (name, g) in side.iter() {
                grads.insert(name.clone(), g.clone());
            }
        }

        let grad_norm_teacher = grads.norm("teacher.");
        let grad_norm_student = grads.norm("student.");

        if cfg.enable_momentum && with_student && teacher_vars.is_some() {
            apply_momentum(&mut grads, &pair.map, cfg.beta, cfg.mix_embedding)?;
        }

        let teacher_owned = teacher_trains;
        let owned = grads.filtered(|name| {
            if name.starts_with("teacher.") {
                teacher_owned
            } else {
                true
            }
        });
        let mut params = self.pair.params_mut_filtered(|name| {
            if name.starts_with("teacher.") {
                teacher_owned
            } else if name.starts_with("student.") {
                with_student
            } else {
                name.starts_with("pool.") || name.starts_with("user_pool.")
            }
        });
        self.opt.step(&mut params, &owned)?;
        self.step += 1;

        let value = |v: Option<Var>, tape: &Tape| v.map(|v| tape.scalar_value(v)).unwrap_or(0.0);
        let report = StepReport {
            step: self.step,
            loss_teacher: value(l_t, &tape),
            loss_student: value(l_s, &tape),
            loss_hidden_layer: value(hid_l_mean, &tape),
            loss_hidden_pooled: value(hid_p_mean, &tape),
            loss_distill: value(dist_mean, &tape),
            grad_norm_teacher,
            grad_norm_student,
        };
        if !report.all_finite() {
            return Err(CoreError::Contract(
                "non-finite loss or gradient norm in training step".into(),
            ));
        }
        Ok(report)
    }

    fn frozen_teacher_recsys_gradients(
        &self,
        batch: &[ImpressionSample],
    ) -> Result<GradientSet> {
        let user_pool_params = self.pair.user_pool.as_ref().ok_or_else(|| {
            CoreError::Config("recommendation needs a user pooling layer".into())
        })?;
        let mut tape = Tape::new();
        let tv = self.pair.teacher.lease(&mut tape, "teacher", true)?;
        let pool_vars = self.pair.pool.lease(&mut tape, "pool", false)?;
        let user_pool_vars = user_pool_params.lease(&mut tape, "user_pool", false)?;
        let mut rng = Rng::new(0);
        let mut terms = Vec::with_capacity(batch.len());
        for sample in batch {
            let pos = sample.positive_index().ok_or_else(|| {
                CoreError::Input("training impression needs a positive candidate".into())
            })?;
            let out = recsys_forward_path(
                &mut tape,
                &tv,
                &pool_vars,
                &user_pool_vars,
                sample,
                0.0,
                &mut rng,
            )?;
            terms.push(tape.ce_one_hot(out.scores, pos)?);
        }
        let stacked = tape.stack_scalars(&terms)?;
        let l_t = tape.mean(stacked);
        tape.backward(l_t)
    }

    /// One fine-tuning step of the student two-tower retriever: binary
    /// cross-entropy on the sigmoid of the query-document inner product.
    /// Updates the student encoder and the shared pooling layer.
    pub fn retrieval_step(
        &mut self,
        batch: &[RetrievalSample],
        rng: &mut Rng,
    ) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(CoreError::Input("empty batch".into()));
        }
        let dropout = self.pair.student.cfg.dropout;
        let mut tape = Tape::new();
        let sv = self.pair.student.lease(&mut tape, "student", true)?;
        let pool_vars = self.pair.pool.lease(&mut tape, "pool", true)?;
        let mut terms = Vec::with_capacity(batch.len());
        for sample in batch {
            let q = news_embed(&mut tape, &sv, &pool_vars, &sample.query, dropout, rng)?;
            let d = news_embed(&mut tape, &sv, &pool_vars, &sample.doc, dropout, rng)?;
            let score = click_score(&mut tape, q, d)?;
            terms.push(tape.bce_logit(score, if sample.label { 1.0 } else { 0.0 })?);
        }
        let stacked = tape.stack_scalars(&terms)?;
        let loss = tape.mean(stacked);
        tape.backward(loss)?;
        let grads = tape.gradients();
        let grad_norm_student = grads.norm("student.");

        let mut params = self
            .pair
            .params_mut_filtered(|name| name.starts_with("student.") || name.starts_with("pool."));
        self.opt.step(&mut params, &grads)?;
        self.step += 1;

        let report = StepReport {
            step: self.step,
            loss_teacher: 0.0,
            loss_student: tape.scalar_value(loss),
            loss_hidden_layer: 0.0,
            loss_hidden_pooled: 0.0,
            loss_distill: 0.0,
            grad_norm_teacher: 0.0,
            grad_norm_student,
        };
        if !report.all_finite() {
            return Err(CoreError::Contract(
                "non-finite loss in retrieval step".into(),
            ));
        }
        Ok(report)
    }
}

fn recsys_student_objective(
    tape: &mut Tape,
    t_out: &RecsysPathOutputs,
    s_out: &RecsysPathOutputs,
    pair: &ModelPair,
    cfg: &DistillConfig,
    pos: usize,
) -> Result<Var> {
    let mut hid_l_terms = Vec::new();
    for (t_run, s_run) in t_out.run_per_news.iter().zip(&s_out.run_per_news) {
        hid_l_terms.push(hidden_layer_loss(tape, t_run, s_run, &pair.map)?);
    }
    let hid_l = tape.sum_vars(&hid_l_terms)?;
    let mut hid_p_terms = Vec::new();
    for (t_h, s_h) in t_out.embed_per_news.iter().zip(&s_out.embed_per_news) {
        hid_p_terms.push(pooled_hidden_loss(tape, *t_h, *s_h)?);
    }
    hid_p_terms.push(pooled_hidden_loss(tape, t_out.user, s_out.user)?);
    let hid_p = tape.sum_vars(&hid_p_terms)?;
    let dist = distillation_loss(
        tape,
        t_out.scores,
        s_out.scores,
        cfg.temperature,
        cfg.prob_temperature,
    )?;
    let total = total_distill_loss(
        tape,
        cfg.enable_hidden_layer_loss.then_some(hid_l),
        cfg.enable_pooled_hidden_loss.then_some(hid_p),
        cfg.enable_distill_loss.then_some(dist),
    )?;
    // student_loss composes L_d with a softmax CE over candidate scores,
    // which is exactly the task objective here
    student_loss(tape, total, s_out.scores, pos)
}

/// Teacher-path outputs of one impression, frozen as plain tensors.
pub struct RecsysTeacherSnapshot {
    runs: Vec<(Tensor, Vec<Tensor>, Vec<bool>)>,
    embeds: Vec<Tensor>,
    user: Tensor,
    scores: Tensor,
}

/// Run the teacher path once, dropout off, and materialize its outputs.
pub fn recsys_teacher_snapshot(
    pair: &ModelPair,
    sample: &ImpressionSample,
) -> Result<RecsysTeacherSnapshot> {
    let user_pool_params = pair.user_pool.as_ref().ok_or_else(|| {
        CoreError::Config("recommendation needs a user pooling layer".into())
    })?;
    let mut tape = Tape::new();
    let tv = pair.teacher.lease(&mut tape, "teacher", false)?;
    let pool_vars = pair.pool.lease(&mut tape, "pool", false)?;
    let user_pool_vars = user_pool_params.lease(&mut tape, "user_pool", false)?;
    let mut rng = Rng::new(0);
    let out = recsys_forward_path(
        &mut tape,
        &tv,
        &pool_vars,
        &user_pool_vars,
        sample,
        0.0,
        &mut rng,
    )?;
    Ok(RecsysTeacherSnapshot {
        runs: out
            .run_per_news
            .iter()
            .map(|run| {
                (
                    tape.materialize(run.embeddings),
                    run.layer_hidden.iter().map(|&v| tape.materialize(v)).collect(),
                    run.mask.clone(),
                )
            })
            .collect(),
        embeds: out
            .embed_per_news
            .iter()
            .map(|&v| tape.materialize(v))
            .collect(),
        user: tape.materialize(out.user),
        scores: tape.materialize(out.scores),
    })
}

fn snapshot_as_path(tape: &mut Tape, snap: &RecsysTeacherSnapshot) -> RecsysPathOutputs {
    RecsysPathOutputs {
        run_per_news: snap
            .runs
            .iter()
            .map(|(emb, hidden, mask)| EncoderRun {
                embeddings: tape.input(emb),
                layer_hidden: hidden.iter().map(|t| tape.input(t)).collect(),
                mask: mask.clone(),
            })
            .collect(),
        embed_per_news: snap.embeds.iter().map(|t| tape.input(t)).collect(),
        user: tape.input(&snap.user),
        scores: tape.input(&snap.scores),
    }
}

/// Value and gradients of the full recommendation student loss (task CE
/// plus all enabled distillation terms). The teacher path runs with live
/// parameter values but every teacher quantity is detached, so the
/// gradient is the partial derivative at frozen teacher activations.
pub fn recsys_student_loss_with_gradients(
    pair: &ModelPair,
    sample: &ImpressionSample,
    cfg: &DistillConfig,
) -> Result<(f64, GradientSet)> {
    let user_pool_params = pair.user_pool.as_ref().ok_or_else(|| {
        CoreError::Config("recommendation needs a user pooling layer".into())
    })?;
    let pos = sample.positive_index().ok_or_else(|| {
        CoreError::Input("impression needs a positive candidate".into())
    })?;
    let mut tape = Tape::new();
    let tv = pair.teacher.lease(&mut tape, "teacher", false)?;
    let sv = pair.student.lease(&mut tape, "student", true)?;
    let pool_vars = pair.pool.lease(&mut tape, "pool", true)?;
    let user_pool_vars = user_pool_params.lease(&mut tape, "user_pool", true)?;
    let mut rng = Rng::new(0);

    let t_out = recsys_forward_path(
        &mut tape,
        &tv,
        &pool_vars,
        &user_pool_vars,
        sample,
        0.0,
        &mut rng,
    )?;
    let s_out = recsys_forward_path(
        &mut tape,
        &sv,
        &pool_vars,
        &user_pool_vars,
        sample,
        0.0,
        &mut rng,
    )?;
    let loss = recsys_student_objective(&mut tape, &t_out, &s_out, pair, cfg, pos)?;
    let value = tape.scalar_value(loss);
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// Loss value with the teacher path pinned to a snapshot; the function the
/// finite-difference probes must evaluate.
fn recsys_student_loss_value_frozen(
    pair: &ModelPair,
    sample: &ImpressionSample,
    cfg: &DistillConfig,
    snap: &RecsysTeacherSnapshot,
) -> Result<f64> {
    let user_pool_params = pair.user_pool.as_ref().ok_or_else(|| {
        CoreError::Config("recommendation needs a user pooling layer".into())
    })?;
    let pos = sample.positive_index().ok_or_else(|| {
        CoreError::Input("impression needs a positive candidate".into())
    })?;
    let mut tape = Tape::new();
    let sv = pair.student.lease(&mut tape, "student", true)?;
    let pool_vars = pair.pool.lease(&mut tape, "pool", true)?;
    let user_pool_vars = user_pool_params.lease(&mut tape, "user_pool", true)?;
    let mut rng = Rng::new(0);

    let t_out = snapshot_as_path(&mut tape, snap);
    let s_out = recsys_forward_path(
        &mut tape,
        &sv,
        &pool_vars,
        &user_pool_vars,
        sample,
        0.0,
        &mut rng,
    )?;
    let loss = recsys_student_objective(&mut tape, &t_out, &s_out, pair, cfg, pos)?;
    Ok(tape.scalar_value(loss))
}

/// Finite-difference audit of the recommendation student loss over
/// `n_coords` random student/head parameter coordinates. The teacher path
/// is frozen, so the probed function matches what the backward pass
/// differentiates.
pub fn recsys_gradcheck(
    pair: &mut ModelPair,
    sample: &ImpressionSample,
    cfg: &DistillConfig,
    n_coords: usize,
    h: f64,
    rng: &mut Rng,
) -> Result<crate::distill::GradCheck> {
    let (_, analytic) = recsys_student_loss_with_gradients(pair, sample, cfg)?;
    let snap = recsys_teacher_snapshot(pair, sample)?;

    // probe exactly the parameters the objective is differentiated by
    let layout: Vec<(alloc::string::String, usize)> = analytic
        .iter()
        .map(|(name, t)| (name.clone(), t.len()))
        .collect();
    let total: usize = layout.iter().map(|(_, n)| n).sum();

    let mut max_rel_err = 0.0;
    let mut worst_param = alloc::string::String::new();
    let mut checked = 0;
    for _ in 0..n_coords {
        let flat = rng.below(total);
        let mut offset = flat;
        let (name, coord) = layout
            .iter()
            .find_map(|(name, n)| {
                if offset < *n {
                    Some((name.clone(), offset))
                } else {
                    offset -= n;
                    None
                }
            })
            .expect("flat index within total");

        let set_coord = |pair: &mut ModelPair, value: f64| {
            let mut params = pair.params_mut();
            let slot = params.iter_mut().find(|(n, _)| *n == name).unwrap();
            slot.1.data_mut()[coord] = value;
        };
        let original = {
            let params = pair.params();
            let (_, t) = params.iter().find(|(n, _)| *n == name).unwrap();
            t.data()[coord]
        };
        set_coord(pair, original + h);
        let plus = recsys_student_loss_value_frozen(pair, sample, cfg, &snap)?;
        set_coord(pair, original - h);
        let minus = recsys_student_loss_value_frozen(pair, sample, cfg, &snap)?;
        set_coord(pair, original);

        let fd = (plus - minus) / (2.0 * h);
        let a = analytic.get(&name).expect("gradient exists").data()[coord];
        let err = crate::check::rel_err(a, fd);
        if err > max_rel_err {
            max_rel_err = err;
            worst_param = alloc::format!("{name}[{coord}]");
        }
        checked += 1;
    }
    Ok(crate::distill::GradCheck {
        loss: "recsys_student_loss",
        max_rel_err,
        worst_param,
        n_checked: checked,
    })
}

/// True when a query or document would be all padding.
pub fn retrieval_sample_valid(sample: &RetrievalSample) -> bool {
    sample.query.tokens.iter().any(|&t| t != PAD) && sample.doc.tokens.iter().any(|&t| t != PAD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_impressions, ImpressionSpec};
    use crate::distill::PairConfig;
    use crate::heads::PoolingParams;

    fn desk_recsys_pair(seed: u64, depth: usize, k: usize) -> ModelPair {
        let mut rng = Rng::new(seed);
        let mut cfg = PairConfig::desk_scale(depth, k, 4);
        cfg.encoder.dropout = 0.0;
        cfg.with_user_pool = true;
        ModelPair::init(&cfg, &mut rng).unwrap()
    }

    fn news(tokens: &[usize]) -> NewsText {
        NewsText {
            tokens: tokens.to_vec(),
            mask: alloc::vec![true; tokens.len()],
        }
    }

    #[test]
    fn news_embed_shape_and_determinism() {
        let pair = desk_recsys_pair(1, 2, 2);
        let mut tape = Tape::new();
        let enc = pair.student.lease(&mut tape, "enc", false).unwrap();
        let pool = pair.pool.lease(&mut tape, "pool", false).unwrap();
        let mut rng = Rng::new(0);
        for len in [1usize, 3, 7] {
            let n = news(&alloc::vec![2; len]);
            let h = news_embed(&mut tape, &enc, &pool, &n, 0.0, &mut rng).unwrap();
            assert_eq!(tape.value(h).shape(), &[32]);
        }
        let a = news_embed(&mut tape, &enc, &pool, &news(&[3, 4, 5]), 0.0, &mut rng).unwrap();
        let b = news_embed(&mut tape, &enc, &pool, &news(&[3, 4, 5]), 0.0, &mut rng).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn user_encode_singleton_and_symmetry() {
        let mut rng = Rng::new(5);
        let user_pool = PoolingParams::init(4, 3, &mut rng);
        let mut tape = Tape::new();
        let up = user_pool.lease(&mut tape, "user_pool", false).unwrap();

        let single = tape.input(&Tensor::vector(alloc::vec![0.3, -1.0, 0.5, 2.0]));
        let u = user_encode(&mut tape, &up, &[single], 4).unwrap();
        assert_eq!(tape.value(u).data(), &[0.3, -1.0, 0.5, 2.0]);

        // all clicked embeddings identical
        let twin = tape.input(&Tensor::vector(alloc::vec![0.3, -1.0, 0.5, 2.0]));
        let u2 = user_encode(&mut tape, &up, &[single, twin, single], 4).unwrap();
        for (got, want) in tape.value(u2).data().iter().zip(&[0.3, -1.0, 0.5, 2.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn user_encode_is_bitwise_permutation_invariant() {
        let mut rng = Rng::new(6);
        let user_pool = PoolingParams::init(4, 3, &mut rng);
        let mut tape = Tape::new();
        let up = user_pool.lease(&mut tape, "user_pool", false).unwrap();
        let clicked: Vec<Var> = (0..5)
            .map(|_| tape.input(&Tensor::randn(&[4], 1.0, &mut rng)))
            .collect();
        let base = user_encode(&mut tape, &up, &clicked, 4).unwrap();
        let mut permuted = clicked.clone();
        permuted.swap(0, 4);
        permuted.swap(1, 3);
        let swapped = user_encode(&mut tape, &up, &permuted, 4).unwrap();
        assert_eq!(tape.value(base).data(), tape.value(swapped).data());
    }

    #[test]
    fn cold_user_maps_to_zero_vector() {
        let mut rng = Rng::new(7);
        let user_pool = PoolingParams::init(4, 3, &mut rng);
        let mut tape = Tape::new();
        let up = user_pool.lease(&mut tape, "user_pool", false).unwrap();
        let u = user_encode(&mut tape, &up, &[], 4).unwrap();
        assert_eq!(tape.value(u).data(), &[0.0; 4]);
    }

    #[test]
    fn click_score_cases() {
        let mut tape = Tape::new();
        let zero = tape.input(&Tensor::vector(alloc::vec![0.0, 0.0]));
        let any = tape.input(&Tensor::vector(alloc::vec![3.0, -4.0]));
        let s = click_score(&mut tape, zero, any).unwrap();
        assert_eq!(tape.scalar_value(s), 0.0);

        let e1 = tape.input(&Tensor::vector(alloc::vec![1.0, 0.0]));
        let e2 = tape.input(&Tensor::vector(alloc::vec![0.0, 1.0]));
        let orth = click_score(&mut tape, e1, e2).unwrap();
        assert_eq!(tape.scalar_value(orth), 0.0);

        let u = tape.input(&Tensor::vector(alloc::vec![1.0, 2.0]));
        let h = tape.input(&Tensor::vector(alloc::vec![3.0, 4.0]));
        let s2 = click_score(&mut tape, u, h).unwrap();
        assert_eq!(tape.scalar_value(s2), 11.0);
    }

    #[test]
    fn click_score_is_bilinear() {
        let mut rng = Rng::new(9);
        let mut tape = Tape::new();
        let u = Tensor::randn(&[8], 1.0, &mut rng);
        let h = Tensor::randn(&[8], 1.0, &mut rng);
        for alpha in [0.0, 0.5, 2.0, -3.0] {
            let uv = tape.input(&u);
            let hv = tape.input(&h);
            let su = click_score(&mut tape, uv, hv).unwrap();
            let scaled = Tensor::vector(u.data().iter().map(|v| alpha * v).collect());
            let sv = tape.input(&scaled);
            let s_scaled = click_score(&mut tape, sv, hv).unwrap();
            let lhs = tape.scalar_value(s_scaled);
            let rhs = alpha * tape.scalar_value(su);
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn equal_scores_give_ln2_task_loss() {
        // one positive + one negative with identical tokens: both paths
        // must produce CE = ln 2
        let pair = desk_recsys_pair(11, 2, 2);
        let mut trainer = Trainer::new(pair, 1e-3, DistillConfig::default()).unwrap();
        let sample = ImpressionSample {
            history: alloc::vec![news(&[2, 3])],
            candidates: alloc::vec![news(&[4, 5]), news(&[4, 5])],
            labels: alloc::vec![true, false],
        };
        let mut rng = Rng::new(1);
        let report = trainer.recsys_joint_step(&[sample], &mut rng).unwrap();
        assert!((report.loss_teacher - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn identical_networks_degenerate_in_recsys() {
        let pair = desk_recsys_pair(13, 2, 1); // K = 1, student is a copy
        let sample = ImpressionSample {
            history: alloc::vec![news(&[2, 3]), news(&[7, 8, 9])],
            candidates: alloc::vec![news(&[4, 5]), news(&[6]), news(&[10, 11])],
            labels: alloc::vec![false, true, false],
        };
        // entropy of the teacher's candidate softmax before any update
        let scores = recsys_impression_scores(&pair, ModelSide::Teacher, &sample).unwrap();
        let max = scores.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.scores.iter().map(|s| libm::exp(s - max)).collect();
        let sum: f64 = exps.iter().sum();
        let entropy: f64 = -exps
            .iter()
            .map(|e| {
                let p = e / sum;
                p * libm::log(p)
            })
            .sum::<f64>();

        let mut trainer = Trainer::new(pair, 1e-3, DistillConfig::default()).unwrap();
        let mut rng = Rng::new(1);
        let report = trainer.recsys_joint_step(&[sample], &mut rng).unwrap();
        assert_eq!(report.loss_hidden_layer, 0.0);
        assert_eq!(report.loss_hidden_pooled, 0.0);
        assert!((report.loss_distill - entropy).abs() < 1e-10);
    }

    #[test]
    fn recsys_joint_step_smoke_on_generated_impressions() {
        let spec = ImpressionSpec {
            seed: 3,
            num_topics: 4,
            vocab_size: 64,
            seq_len: 6,
            history_max: 4,
            negatives_per_positive: 3,
            topic_affinity: 1.0,
            train_size: 4,
            test_size: 1,
        };
        let data = gen_synthetic_impressions(&spec).unwrap();
        let pair = desk_recsys_pair(17, 4, 2);
        let mut trainer = Trainer::new(pair, 1e-3, DistillConfig::default()).unwrap();
        let mut rng = Rng::new(2);
        let report = trainer.recsys_joint_step(&data.train, &mut rng).unwrap();
        assert!(report.all_finite());
        assert!(report.grad_norm_teacher > 0.0);
        assert!(report.grad_norm_student > 0.0);
    }

    #[test]
    fn recsys_with_toggles_off_is_plain_two_tower_supervision() {
        // loss decomposition: no distillation terms, and the student loss
        // equals the bare candidate-softmax cross-entropy
        let pair = desk_recsys_pair(41, 2, 2);
        let sample = ImpressionSample {
            history: alloc::vec![news(&[2, 3])],
            candidates: alloc::vec![news(&[4, 5]), news(&[6, 7]), news(&[8])],
            labels: alloc::vec![false, true, false],
        };
        let ce_only = {
            let scores = recsys_impression_scores(&pair, ModelSide::Student, &sample).unwrap();
            let max = scores.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.scores.iter().map(|s| libm::exp(s - max)).collect();
            let sum: f64 = exps.iter().sum();
            -libm::log(exps[1] / sum)
        };
        let cfg = DistillConfig {
            enable_hidden_layer_loss: false,
            enable_pooled_hidden_loss: false,
            enable_distill_loss: false,
            enable_momentum: false,
            ..DistillConfig::default()
        };
        let mut trainer = Trainer::new(pair, 1e-3, cfg).unwrap();
        let mut rng = Rng::new(1);
        let report = trainer
            .recsys_joint_step(&[sample], &mut rng)
            .unwrap();
        assert_eq!(report.loss_hidden_layer, 0.0);
        assert_eq!(report.loss_hidden_pooled, 0.0);
        assert_eq!(report.loss_distill, 0.0);
        assert!((report.loss_student - ce_only).abs() < 1e-12);
    }

    #[test]
    fn recsys_student_gradients_match_finite_differences() {
        let mut pair = desk_recsys_pair(23, 2, 2);
        let sample = ImpressionSample {
            history: alloc::vec![news(&[2, 3])],
            candidates: alloc::vec![news(&[4, 5]), news(&[6, 7])],
            labels: alloc::vec![true, false],
        };
        let cfg = DistillConfig::default();
        let mut rng = Rng::new(3);
        let check = recsys_gradcheck(&mut pair, &sample, &cfg, 32, 1e-5, &mut rng).unwrap();
        assert!(
            check.max_rel_err < 1e-4,
            "max rel err {} at {}",
            check.max_rel_err,
            check.worst_param
        );
    }

    #[test]
    fn retrieval_step_learns_separable_pairs() {
        let mut rng = Rng::new(31);
        let pair = desk_recsys_pair(29, 2, 2);
        let mut trainer = Trainer::new(pair, 1e-2, DistillConfig::default()).unwrap();
        // two topics, matched pairs positive
        let make = |topic: usize, other: usize| RetrievalSample {
            query: news(&[2 + topic, 10, 11]),
            doc: news(&[12, 2 + other, 13]),
            label: topic == other,
        };
        let batch: Vec<RetrievalSample> = (0..8)
            .map(|i| make(i % 2, (i / 2) % 2))
            .collect();
        let first = trainer.retrieval_step(&batch, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = trainer.retrieval_step(&batch, &mut rng).unwrap();
        }
        assert!(last.loss_student < first.loss_student);
        assert!(last.loss_student < 0.3, "loss {}", last.loss_student);
    }

    #[test]
    fn untrained_retrieval_auc_is_chance_level() {
        let pair = desk_recsys_pair(37, 2, 2);
        let mut rng = Rng::new(41);
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..400 {
            let q: Vec<usize> = (0..4).map(|_| 2 + rng.below(60)).collect();
            let d: Vec<usize> = (0..4).map(|_| 2 + rng.below(60)).collect();
            let sample = RetrievalSample {
                query: news(&q),
                doc: news(&d),
                label: rng.below(2) == 1,
            };
            scores.push(retrieval_score(&pair, &sample).unwrap());
            labels.push(sample.label);
        }
        let auc =
            crate::metrics::auc(&RankedImpression::new(scores, labels).unwrap()).unwrap();
        assert!((auc - 0.5).abs() < 0.1, "auc {auc}");
    }

    #[test]
    fn recsys_scores_reject_missing_user_pool() {
        let mut rng = Rng::new(43);
        let cfg = PairConfig::desk_scale(2, 2, 4);
        let pair = ModelPair::init(&cfg, &mut rng).unwrap();
        let sample = ImpressionSample {
            history: alloc::vec![],
            candidates: alloc::vec![news(&[2])],
            labels: alloc::vec![true],
        };
        assert!(matches!(
            recsys_impression_scores(&pair, ModelSide::Student, &sample),
            Err(CoreError::Config(_))
        ));
    }
}
