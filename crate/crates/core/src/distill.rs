//! The distillation machinery: the hidden-alignment and temperature
//! distillation losses, their composition into the student and teacher
//! objectives, gradient-momentum mixing of teacher block gradients into
//! student layer gradients, the Adam optimizer, and the joint training step
//! that wires it all together.
//!
//! Loss-side convention: teacher activations and logits entering any
//! student-side loss are detached, so the student objective conditions on
//! the teacher without optimizing it. The teacher trains only through its
//! own classification loss.

use crate::data::ClassifySample;
use crate::encoder::{
    encode, init_student_from_teacher, BlockMap, EncoderConfig, EncoderParams, EncoderRun,
    LayerParams,
};
use crate::error::{CoreError, Result};
use crate::heads::{attentive_pool, classify, DenseParams, PoolingParams};
use crate::rng::Rng;
use crate::tape::{GradientSet, Tape, Var};
use crate::tensor::Tensor;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Momentum strength recommended for classification runs.
pub const BETA_CLASSIFY: f64 = 0.1;
/// Momentum strength recommended for recommendation runs.
pub const BETA_RECSYS: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Joint,
    Disjoint,
}

/// Loss toggles, temperature and momentum configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    pub beta: f64,
    pub enable_hidden_layer_loss: bool,
    pub enable_pooled_hidden_loss: bool,
    pub enable_distill_loss: bool,
    pub enable_momentum: bool,
    pub mode: TrainMode,
    /// Alternate reading of the distillation loss where the temperature
    /// divides the soft labels instead of the logits. Off by default; the
    /// two coincide at temperature 1.
    pub prob_temperature: bool,
    /// Also mix embedding-table gradients (the momentum equations are
    /// indexed by layers, so embeddings are excluded by default).
    pub mix_embedding: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 1.0,
            beta: BETA_CLASSIFY,
            enable_hidden_layer_loss: true,
            enable_pooled_hidden_loss: true,
            enable_distill_loss: true,
            enable_momentum: true,
            mode: TrainMode::Joint,
            prob_temperature: false,
            mix_embedding: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(CoreError::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(CoreError::Config(format!(
                "beta {} outside [0, 1]",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Teacher parameters, student parameters and the shared heads, plus the
/// block map tying their depths together.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub teacher: EncoderParams,
    pub student: EncoderParams,
    pub pool: PoolingParams,
    pub dense: DenseParams,
    pub user_pool: Option<PoolingParams>,
    pub map: BlockMap,
}

/// Geometry for building a [`ModelPair`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairConfig {
    /// Teacher encoder geometry; `num_layers` is the teacher depth N*K.
    pub encoder: EncoderConfig,
    pub k: usize,
    pub num_classes: usize,
    pub attn_dim: usize,
    pub with_user_pool: bool,
}

impl PairConfig {
    pub fn desk_scale(teacher_depth: usize, k: usize, num_classes: usize) -> Self {
        PairConfig {
            encoder: EncoderConfig::desk_scale(teacher_depth),
            k,
            num_classes,
            attn_dim: 16,
            with_user_pool: false,
        }
    }
}

impl ModelPair {
    /// Random teacher, student initialized from the teacher's first N
    /// layers, fresh shared heads.
    pub fn init(cfg: &PairConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.k == 0 || cfg.encoder.num_layers % cfg.k != 0 {
            return Err(CoreError::Config(format!(
                "teacher depth {} not divisible by K={}",
                cfg.encoder.num_layers, cfg.k
            )));
        }
        let n = cfg.encoder.num_layers / cfg.k;
        let map = BlockMap::new(cfg.k, n)?;
        let teacher = EncoderParams::init(cfg.encoder.clone(), rng)?;
        let student = init_student_from_teacher(&teacher, n)?;
        let pool = PoolingParams::init(cfg.encoder.hidden_dim, cfg.attn_dim, rng);
        let dense = DenseParams::init(cfg.encoder.hidden_dim, cfg.num_classes, rng);
        let user_pool = cfg
            .with_user_pool
            .then(|| PoolingParams::init(cfg.encoder.hidden_dim, cfg.attn_dim, rng));
        Ok(ModelPair {
            teacher,
            student,
            pool,
            dense,
            user_pool,
            map,
        })
    }

    /// Every parameter with its full name, fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, t) in self.teacher.params() {
            out.push((format!("teacher.{name}"), t));
        }
        for (name, t) in self.student.params() {
            out.push((format!("student.{name}"), t));
        }
        for (name, t) in self.pool.params() {
            out.push((format!("pool.{name}"), t));
        }
        for (name, t) in self.dense.params() {
            out.push((format!("dense.{name}"), t));
        }
        if let Some(up) = &self.user_pool {
            for (name, t) in up.params() {
                out.push((format!("user_pool.{name}"), t));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (name, t) in self.teacher.params_mut() {
            out.push((format!("teacher.{name}"), t));
        }
        for (name, t) in self.student.params_mut() {
            out.push((format!("student.{name}"), t));
        }
        for (name, t) in self.pool.params_mut() {
            out.push((format!("pool.{name}"), t));
        }
        for (name, t) in self.dense.params_mut() {
            out.push((format!("dense.{name}"), t));
        }
        if let Some(up) = &mut self.user_pool {
            for (name, t) in up.params_mut() {
                out.push((format!("user_pool.{name}"), t));
            }
        }
        out
    }

    /// Parameters whose names match the predicate, mutable.
    pub fn params_mut_filtered(
        &mut self,
        keep: impl Fn(&str) -> bool,
    ) -> Vec<(String, &mut Tensor)> {
        self.params_mut()
            .into_iter()
            .filter(|(name, _)| keep(name))
            .collect()
    }
}

/// Sum of mean-squared errors between the student's embedding output and
/// every student layer against the matching teacher block output. Teacher
/// activations are detached; the gradient drives the student only.
pub fn hidden_layer_loss(
    tape: &mut Tape,
    teacher_run: &EncoderRun,
    student_run: &EncoderRun,
    map: &BlockMap,
) -> Result<Var> {
    if teacher_run.layer_hidden.len() != map.teacher_depth()
        || student_run.layer_hidden.len() != map.n
    {
        return Err(CoreError::Contract(format!(
            "hidden_layer_loss wants teacher depth {} and student depth {}, got {} and {}",
            map.teacher_depth(),
            map.n,
            teacher_run.layer_hidden.len(),
            student_run.layer_hidden.len()
        )));
    }
    let mut terms = Vec::with_capacity(map.n + 1);
    let te = tape.detach(teacher_run.embeddings);
    terms.push(tape.mse(student_run.embeddings, te)?);
    for i in 1..=map.n {
        let t_top = teacher_run.layer_hidden[i * map.k - 1];
        let t_top = tape.detach(t_top);
        terms.push(tape.mse(student_run.layer_hidden[i - 1], t_top)?);
    }
    tape.sum_vars(&terms)
}

/// MSE between the teacher's and student's pooled embeddings, teacher side
/// detached.
pub fn pooled_hidden_loss(tape: &mut Tape, h_teacher: Var, h_student: Var) -> Result<Var> {
    let ht = tape.detach(h_teacher);
    tape.mse(h_student, ht)
}

/// Cross-entropy between temperature-softened teacher and student output
/// distributions. The teacher side is a constant target.
///
/// Default reading applies the temperature to logits before the softmax.
/// The alternate reading (`prob_temperature`) divides the probability
/// vectors themselves; at `t = 1` both coincide.
pub fn distillation_loss(
    tape: &mut Tape,
    teacher_logits: Var,
    student_logits: Var,
    temperature: f64,
    prob_temperature: bool,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(CoreError::Config(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let t_const = tape.detach(teacher_logits);
    if prob_temperature {
        let p_t = tape.softmax(t_const, 0)?;
        let target = tape.scale(p_t, 1.0 / temperature);
        let ce = tape.ce_logits(student_logits, target)?;
        // -sum a_i log(q_i / t) = -sum a_i log q_i + (sum a_i) log t
        Ok(tape.add_scalar(ce, libm::log(temperature) / temperature))
    } else {
        let t_scaled = tape.scale(t_const, 1.0 / temperature);
        let target = tape.softmax(t_scaled, 0)?;
        let s_scaled = tape.scale(student_logits, 1.0 / temperature);
        tape.ce_logits(s_scaled, target)
    }
}

/// Sum of whichever distillation components are enabled; zero when none are.
pub fn total_distill_loss(
    tape: &mut Tape,
    hidden_layer: Option<Var>,
    pooled_hidden: Option<Var>,
    distill: Option<Var>,
) -> Result<Var> {
    let terms: Vec<Var> = [hidden_layer, pooled_hidden, distill]
        .into_iter()
        .flatten()
        .collect();
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    tape.sum_vars(&terms)
}

/// Student objective: distillation total plus hard-label cross-entropy.
pub fn student_loss(
    tape: &mut Tape,
    total_distill: Var,
    student_logits: Var,
    label: usize,
) -> Result<Var> {
    let ce = tape.ce_one_hot(student_logits, label)?;
    tape.sum_vars(&[total_distill, ce])
}

/// Teacher objective: hard-label cross-entropy only.
pub fn teacher_loss(tape: &mut Tape, teacher_logits: Var, label: usize) -> Result<Var> {
    tape.ce_one_hot(teacher_logits, label)
}

/// Average the per-role gradients of every teacher layer in block `i`.
/// All layers share the same parameter geometry, so this is an elementwise
/// mean per role.
pub fn block_gradient_average(
    teacher_grads: &GradientSet,
    map: &BlockMap,
    block: usize,
) -> Result<BTreeMap<String, Tensor>> {
    let layers = map.block_of(block)?;
    let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
    for role in LayerParams::roles() {
        let mut avg: Option<Tensor> = None;
        for &j in &layers {
            let name = format!("teacher.layer{j}.{role}");
            let g = teacher_grads.get(&name).ok_or_else(|| {
                CoreError::Contract(format!("missing gradient for {name} in block {block}"))
            })?;
            match &mut avg {
                None => avg = Some(g.clone()),
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(CoreError::ShapeMismatch {
                            op: "block_gradient_average",
                            lhs: acc.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
        }
        let mut acc = avg.expect("block has at least one layer");
        let scale = 1.0 / layers.len() as f64;
        for v in acc.data_mut() {
            *v *= scale;
        }
        out.insert(role.to_string(), acc);
    }
    Ok(out)
}

/// `beta * block_grad + (1 - beta) * student_grad`, elementwise. The
/// boundary values short-circuit so beta = 0 returns the student gradient
/// bit-identically and beta = 1 returns the block average exactly.
pub fn momentum_mix(student_grad: &Tensor, block_grad: &Tensor, beta: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(CoreError::Config(format!("beta {beta} outside [0, 1]")));
    }
    if student_grad.shape() != block_grad.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "momentum_mix",
            lhs: student_grad.shape().to_vec(),
            rhs: block_grad.shape().to_vec(),
        });
    }
    if beta == 0.0 {
        return Ok(student_grad.clone());
    }
    if beta == 1.0 {
        return Ok(block_grad.clone());
    }
    let data = student_grad
        .data()
        .iter()
        .zip(block_grad.data())
        .map(|(s, t)| beta * t + (1.0 - beta) * s)
        .collect();
    Tensor::new(student_grad.shape().to_vec(), data)
}

/// Rewrite every student layer gradient in `grads` with its momentum mix
/// against the matching teacher block average. Expects `grads` to hold the
/// teacher layer gradients (from the teacher loss) alongside the student
/// ones.
pub fn apply_momentum(
    grads: &mut GradientSet,
    map: &BlockMap,
    beta: f64,
    mix_embedding: bool,
) -> Result<()> {
    for k in 1..=map.n {
        let block = block_gradient_average(grads, map, k)?;
        for (role, block_grad) in &block {
            let name = format!("student.layer{k}.{role}");
            let student_grad = grads.get(&name).ok_or_else(|| {
                CoreError::Contract(format!("missing student gradient for {name}"))
            })?;
            let mixed = momentum_mix(student_grad, block_grad, beta)?;
            grads.insert(name, mixed);
        }
    }
    if mix_embedding {
        for role in ["embed.tok", "embed.pos"] {
            let t_name = format!("teacher.{role}");
            let s_name = format!("student.{role}");
            let (Some(tg), Some(sg)) = (grads.get(&t_name), grads.get(&s_name)) else {
                return Err(CoreError::Contract(format!(
                    "embedding mix needs gradients for {t_name} and {s_name}"
                )));
            };
            let mixed = momentum_mix(sg, tg, beta)?;
            grads.insert(s_name, mixed);
        }
    }
    Ok(())
}

/// Adam with bias correction, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.m
    }

    pub fn second_moments(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.v
    }

    pub fn restore(
        lr: f64,
        step: u64,
        m: BTreeMap<String, Vec<f64>>,
        v: BTreeMap<String, Vec<f64>>,
    ) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            m,
            v,
        }
    }

    /// One update over exactly the parameters this optimizer owns; the
    /// gradient set must cover them one for one.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &GradientSet,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(CoreError::Contract(format!(
                "optimizer owns {} parameters but received {} gradients",
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (name, tensor) in params.iter_mut() {
            let grad = grads.get(name).ok_or_else(|| {
                CoreError::Contract(format!("no gradient for owned parameter {name}"))
            })?;
            if grad.shape() != tensor.shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "adam_step",
                    lhs: tensor.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let n = tensor.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| {
                let mut z = Vec::new();
                z.resize(n, 0.0);
                z
            });
            let v = self.v.entry(name.clone()).or_insert_with(|| {
                let mut z = Vec::new();
                z.resize(n, 0.0);
                z
            });
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

/// Per-step record of losses and gradient norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss_teacher: f64,
    pub loss_student: f64,
    pub loss_hidden_layer: f64,
    pub loss_hidden_pooled: f64,
    pub loss_distill: f64,
    pub grad_norm_teacher: f64,
    pub grad_norm_student: f64,
}

impl StepReport {
    pub fn all_finite(&self) -> bool {
        [
            self.loss_teacher,
            self.loss_student,
            self.loss_hidden_layer,
            self.loss_hidden_pooled,
            self.loss_distill,
            self.grad_norm_teacher,
            self.grad_norm_student,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// How the teacher participates in one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherRole {
    /// No teacher forward at all (plain student training).
    Absent,
    /// Teacher trains through its classification loss.
    Trained,
    /// Teacher provides targets only.
    Frozen,
    /// Teacher provides targets, and its would-be training gradients are
    /// recomputed on the side for momentum mixing.
    FrozenWithGrads,
}

/// Bundles a model pair with its optimizer and distillation settings.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub pair: ModelPair,
    pub opt: Adam,
    pub cfg: DistillConfig,
    pub step: u64,
}

impl Trainer {
    pub fn new(pair: ModelPair, lr: f64, cfg: DistillConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            pair,
            opt: Adam::new(lr),
            cfg,
            step: 0,
        })
    }

    /// One joint optimization step on a classification batch: forward both
    /// models through the shared heads, backward the teacher loss, backward
    /// the student loss (shared-head gradients sum), momentum-mix student
    /// layer gradients with teacher block averages, then one Adam update
    /// over all partitions.
    pub fn joint_step(&mut self, batch: &[ClassifySample], rng: &mut Rng) -> Result<StepReport> {
        if self.cfg.mode != TrainMode::Joint {
            return Err(CoreError::Contract(
                "joint_step called while configured for disjoint training".to_string(),
            ));
        }
        self.classify_step(batch, rng, TeacherRole::Trained, true, true)
    }

    /// Teacher-phase step: classification loss only, heads train with it.
    pub fn teacher_step(&mut self, batch: &[ClassifySample], rng: &mut Rng) -> Result<StepReport> {
        self.classify_step(batch, rng, TeacherRole::Trained, false, true)
    }

    /// Plain supervised student step with the shared heads; no teacher.
    pub fn student_alone_step(
        &mut self,
        batch: &[ClassifySample],
        rng: &mut Rng,
    ) -> Result<StepReport> {
        self.classify_step(batch, rng, TeacherRole::Absent, true, false)
    }

    /// Disjoint-mode student phase: the teacher is frozen, the student
    /// trains with the full distillation objective against it. When
    /// momentum is enabled the frozen teacher's gradients are recomputed
    /// per batch on a side tape and mixed in.
    pub fn distill_from_frozen_step(
        &mut self,
        batch: &[ClassifySample],
        rng: &mut Rng,
    ) -> Result<StepReport> {
        let role = if self.cfg.enable_momentum {
            TeacherRole::FrozenWithGrads
        } else {
            TeacherRole::Frozen
        };
        self.classify_step(batch, rng, role, true, true)
    }

    fn classify_step(
        &mut self,
        batch: &[ClassifySample],
        rng: &mut Rng,
        teacher_role: TeacherRole,
        with_student: bool,
        with_distill: bool,
    ) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(CoreError::Input("empty batch".to_string()));
        }
        let cfg = self.cfg.clone();
        let pair = &self.pair;
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
        let dense_vars = pair.dense.lease(&mut tape, "dense", true)?;

        let teacher_trains = teacher_role == TeacherRole::Trained;
        let teacher_dropout = if teacher_trains { dropout } else { 0.0 };
        let distill_active = with_distill && with_student && teacher_vars.is_some();

        let mut l_t_terms = Vec::new();
        let mut l_s_terms = Vec::new();
        let mut hid_l_terms = Vec::new();
        let mut hid_p_terms = Vec::new();
        let mut dist_terms = Vec::new();

        for sample in batch {
            let teacher_out = match &teacher_vars {
                Some(tv) => {
                    let run = encode(
                        &mut tape,
                        tv,
                        &sample.tokens,
                        &sample.mask,
                        teacher_dropout,
                        rng,
                    )?;
                    let h = attentive_pool(&mut tape, &pool_vars, run.last(), &sample.mask)?;
                    let logits = classify(&mut tape, &dense_vars, h)?;
                    if teacher_trains {
                        l_t_terms.push(teacher_loss(&mut tape, logits, sample.label)?);
                    }
                    Some((run, h, logits))
                }
                None => None,
            };

            if let Some(sv) = &student_vars {
                let run = encode(&mut tape, sv, &sample.tokens, &sample.mask, dropout, rng)?;
                let h = attentive_pool(&mut tape, &pool_vars, run.last(), &sample.mask)?;
                let logits = classify(&mut tape, &dense_vars, h)?;

                let (mut hid_l, mut hid_p, mut dist) = (None, None, None);
                if distill_active {
                    let (t_run, t_h, t_logits) =
                        teacher_out.as_ref().expect("teacher present when distilling");
                    if cfg.enable_hidden_layer_loss {
                        let v = hidden_layer_loss(&mut tape, t_run, &run, &pair.map)?;
                        hid_l_terms.push(v);
                        hid_l = Some(v);
                    }
                    if cfg.enable_pooled_hidden_loss {
                        let v = pooled_hidden_loss(&mut tape, *t_h, h)?;
                        hid_p_terms.push(v);
                        hid_p = Some(v);
                    }
                    if cfg.enable_distill_loss {
                        let v = distillation_loss(
                            &mut tape,
                            *t_logits,
                            logits,
                            cfg.temperature,
                            cfg.prob_temperature,
                        )?;
                        dist_terms.push(v);
                        dist = Some(v);
                    }
                }
                let l_d = total_distill_loss(&mut tape, hid_l, hid_p, dist)?;
                l_s_terms.push(student_loss(&mut tape, l_d, logits, sample.label)?);
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

        // Disjoint student phase with momentum: the frozen teacher's
        // hypothetical training gradients, recomputed on a side tape.
        if teacher_role == TeacherRole::FrozenWithGrads {
            let side = self.frozen_teacher_gradients(batch)?;
            for (name, g) in side.iter() {
                grads.insert(name.clone(), g.clone());
            }
        }

        let grad_norm_teacher = grads.norm("teacher.");
        let grad_norm_student = grads.norm("student.");

        if cfg.enable_momentum && with_student && teacher_vars.is_some() {
            apply_momentum(&mut grads, &pair.map, cfg.beta, cfg.mix_embedding)?;
        }

        // The optimizer owns exactly the trainable partitions of this step.
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
                !name.starts_with("user_pool.")
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
                "non-finite loss or gradient norm in training step".to_string(),
            ));
        }
        Ok(report)
    }

    /// Gradients of the frozen teacher's classification loss for a batch,
    /// computed with frozen head values and no dropout.
    fn frozen_teacher_gradients(&self, batch: &[ClassifySample]) -> Result<GradientSet> {
        let mut tape = Tape::new();
        let tv = self.pair.teacher.lease(&mut tape, "teacher", true)?;
        let pool_vars = self.pair.pool.lease(&mut tape, "pool", false)?;
        let dense_vars = self.pair.dense.lease(&mut tape, "dense", false)?;
        let mut rng = Rng::new(0); // unused: dropout is 0
        let mut terms = Vec::with_capacity(batch.len());
        for sample in batch {
            let run = encode(&mut tape, &tv, &sample.tokens, &sample.mask, 0.0, &mut rng)?;
            let h = attentive_pool(&mut tape, &pool_vars, run.last(), &sample.mask)?;
            let logits = classify(&mut tape, &dense_vars, h)?;
            terms.push(teacher_loss(&mut tape, logits, sample.label)?);
        }
        let stacked = tape.stack_scalars(&terms)?;
        let l_t = tape.mean(stacked);
        tape.backward(l_t)
    }
}

/// The losses audited by the gradient checker, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    HiddenLayer,
    PooledHidden,
    Distill,
    TotalDistill,
    Student,
    Teacher,
}

impl LossKind {
    pub fn all() -> [LossKind; 6] {
        [
            LossKind::HiddenLayer,
            LossKind::PooledHidden,
            LossKind::Distill,
            LossKind::TotalDistill,
            LossKind::Student,
            LossKind::Teacher,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::HiddenLayer => "hidden_layer_loss",
            LossKind::PooledHidden => "pooled_hidden_loss",
            LossKind::Distill => "distillation_loss",
            LossKind::TotalDistill => "total_distill_loss",
            LossKind::Student => "student_loss",
            LossKind::Teacher => "teacher_loss",
        }
    }
}

/// Evaluate one loss and return its value together with the gradients of
/// every pair parameter. Dropout is off: the checker needs a deterministic
/// function of the parameters.
pub fn loss_with_gradients(
    pair: &ModelPair,
    sample: &ClassifySample,
    cfg: &DistillConfig,
    kind: LossKind,
) -> Result<(f64, GradientSet)> {
    let mut tape = Tape::new();
    let tv = pair.teacher.lease(&mut tape, "teacher", true)?;
    let sv = pair.student.lease(&mut tape, "student", true)?;
    let pool_vars = pair.pool.lease(&mut tape, "pool", true)?;
    let dense_vars = pair.dense.lease(&mut tape, "dense", true)?;
    let mut rng = Rng::new(0); // unused: dropout is 0

    let t_run = encode(&mut tape, &tv, &sample.tokens, &sample.mask, 0.0, &mut rng)?;
    let t_h = attentive_pool(&mut tape, &pool_vars, t_run.last(), &sample.mask)?;
    let t_logits = classify(&mut tape, &dense_vars, t_h)?;
    let s_run = encode(&mut tape, &sv, &sample.tokens, &sample.mask, 0.0, &mut rng)?;
    let s_h = attentive_pool(&mut tape, &pool_vars, s_run.last(), &sample.mask)?;
    let s_logits = classify(&mut tape, &dense_vars, s_h)?;

    let loss = match kind {
        LossKind::HiddenLayer => hidden_layer_loss(&mut tape, &t_run, &s_run, &pair.map)?,
        LossKind::PooledHidden => pooled_hidden_loss(&mut tape, t_h, s_h)?,
        LossKind::Distill => distillation_loss(
            &mut tape,
            t_logits,
            s_logits,
            cfg.temperature,
            cfg.prob_temperature,
        )?,
        LossKind::TotalDistill | LossKind::Student => {
            let hid_l = hidden_layer_loss(&mut tape, &t_run, &s_run, &pair.map)?;
            let hid_p = pooled_hidden_loss(&mut tape, t_h, s_h)?;
            let dist = distillation_loss(
                &mut tape,
                t_logits,
                s_logits,
                cfg.temperature,
                cfg.prob_temperature,
            )?;
            let total =
                total_distill_loss(&mut tape, Some(hid_l), Some(hid_p), Some(dist))?;
            if kind == LossKind::Student {
                student_loss(&mut tape, total, s_logits, sample.label)?
            } else {
                total
            }
        }
        LossKind::Teacher => teacher_loss(&mut tape, t_logits, sample.label)?,
    };
    let value = tape.scalar_value(loss);
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// Teacher-side quantities captured at the current parameters. The student
/// losses treat these as constants, so the finite-difference oracle must
/// hold them fixed while probing: the training gradient is the partial
/// derivative at frozen teacher activations, not the total derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot {
    pub embeddings: Tensor,
    pub layer_hidden: Vec<Tensor>,
    pub pooled: Tensor,
    pub logits: Tensor,
}

/// Run the teacher path once, dropout off, and materialize its outputs.
pub fn teacher_snapshot(pair: &ModelPair, sample: &ClassifySample) -> Result<TeacherSnapshot> {
    let mut tape = Tape::new();
    let tv = pair.teacher.lease(&mut tape, "teacher", false)?;
    let pool_vars = pair.pool.lease(&mut tape, "pool", false)?;
    let dense_vars = pair.dense.lease(&mut tape, "dense", false)?;
    let mut rng = Rng::new(0); // unused: dropout is 0
    let run = encode(&mut tape, &tv, &sample.tokens, &sample.mask, 0.0, &mut rng)?;
    let h = attentive_pool(&mut tape, &pool_vars, run.last(), &sample.mask)?;
    let logits = classify(&mut tape, &dense_vars, h)?;
    Ok(TeacherSnapshot {
        embeddings: tape.materialize(run.embeddings),
        layer_hidden: run
            .layer_hidden
            .iter()
            .map(|&v| tape.materialize(v))
            .collect(),
        pooled: tape.materialize(h),
        logits: tape.materialize(logits),
    })
}

/// Value of a student-side loss as a function of the student and head
/// parameters, with the teacher activations frozen to `snap`.
fn student_side_loss_value(
    pair: &ModelPair,
    sample: &ClassifySample,
    cfg: &DistillConfig,
    kind: LossKind,
    snap: &TeacherSnapshot,
) -> Result<f64> {
    let mut tape = Tape::new();
    let sv = pair.student.lease(&mut tape, "student", true)?;
    let pool_vars = pair.pool.lease(&mut tape, "pool", true)?;
    let dense_vars = pair.dense.lease(&mut tape, "dense", true)?;
    let mut rng = Rng::new(0); // unused: dropout is 0

    let t_run = EncoderRun {
        embeddings: tape.input(&snap.embeddings),
        layer_hidden: snap.layer_hidden.iter().map(|t| tape.input(t)).collect(),
        mask: sample.mask.clone(),
    };
    let t_h = tape.input(&snap.pooled);
    let t_logits = tape.input(&snap.logits);

    let s_run = encode(&mut tape, &sv, &sample.tokens, &sample.mask, 0.0, &mut rng)?;
    let s_h = attentive_pool(&mut tape, &pool_vars, s_run.last(), &sample.mask)?;
    let s_logits = classify(&mut tape, &dense_vars, s_h)?;

    let loss = match kind {
        LossKind::HiddenLayer => hidden_layer_loss(&mut tape, &t_run, &s_run, &pair.map)?,
        LossKind::PooledHidden => pooled_hidden_loss(&mut tape, t_h, s_h)?,
        LossKind::Distill => distillation_loss(
            &mut tape,
            t_logits,
            s_logits,
            cfg.temperature,
            cfg.prob_temperature,
        )?,
        LossKind::TotalDistill | LossKind::Student => {
            let hid_l = hidden_layer_loss(&mut tape, &t_run, &s_run, &pair.map)?;
            let hid_p = pooled_hidden_loss(&mut tape, t_h, s_h)?;
            let dist = distillation_loss(
                &mut tape,
                t_logits,
                s_logits,
                cfg.temperature,
                cfg.prob_temperature,
            )?;
            let total = total_distill_loss(&mut tape, Some(hid_l), Some(hid_p), Some(dist))?;
            if kind == LossKind::Student {
                student_loss(&mut tape, total, s_logits, sample.label)?
            } else {
                total
            }
        }
        LossKind::Teacher => {
            return Err(CoreError::Contract(
                "teacher loss has no frozen-teacher reading".to_string(),
            ))
        }
    };
    Ok(tape.scalar_value(loss))
}

/// Teacher-loss value recomputed from scratch; no detachment is involved,
/// so the plain finite difference applies to every parameter.
fn teacher_loss_value(pair: &ModelPair, sample: &ClassifySample) -> Result<f64> {
    let mut tape = Tape::new();
    let tv = pair.teacher.lease(&mut tape, "teacher", false)?;
    let pool_vars = pair.pool.lease(&mut tape, "pool", false)?;
    let dense_vars = pair.dense.lease(&mut tape, "dense", false)?;
    let mut rng = Rng::new(0);
    let run = encode(&mut tape, &tv, &sample.tokens, &sample.mask, 0.0, &mut rng)?;
    let h = attentive_pool(&mut tape, &pool_vars, run.last(), &sample.mask)?;
    let logits = classify(&mut tape, &dense_vars, h)?;
    let loss = teacher_loss(&mut tape, logits, sample.label)?;
    Ok(tape.scalar_value(loss))
}

/// Result of auditing one loss against central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub loss: &'static str,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub n_checked: usize,
}

/// Audit `kind` on `n_coords` randomly chosen parameter coordinates with
/// central finite differences (step `h`). Probes for student-side losses
/// hold the teacher activations at their unperturbed snapshot, matching
/// the detachment semantics; the pair is restored exactly afterwards.
pub fn gradcheck_loss(
    pair: &mut ModelPair,
    sample: &ClassifySample,
    cfg: &DistillConfig,
    kind: LossKind,
    n_coords: usize,
    h: f64,
    rng: &mut Rng,
) -> Result<GradCheck> {
    let (_, analytic) = loss_with_gradients(pair, sample, cfg, kind)?;
    let snap = if kind == LossKind::Teacher {
        None
    } else {
        Some(teacher_snapshot(pair, sample)?)
    };

    // flat index space over all coordinates of all parameters
    let layout: Vec<(String, usize)> = pair
        .params()
        .iter()
        .map(|(name, t)| (name.clone(), t.len()))
        .collect();
    let total: usize = layout.iter().map(|(_, n)| n).sum();

    let set_coord = |pair: &mut ModelPair, name: &str, coord: usize, value: f64| {
        let mut params = pair.params_mut();
        let slot = params
            .iter_mut()
            .find(|(n, _)| n == name)
            .expect("parameter exists");
        slot.1.data_mut()[coord] = value;
    };
    let probe = |pair: &ModelPair| -> Result<f64> {
        match &snap {
            None => teacher_loss_value(pair, sample),
            Some(snap) => student_side_loss_value(pair, sample, cfg, kind, snap),
        }
    };

    let mut max_rel_err = 0.0;
    let mut worst_param = String::new();
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

        let original = {
            let params = pair.params();
            let (_, t) = params.iter().find(|(n, _)| *n == name).unwrap();
            t.data()[coord]
        };
        set_coord(pair, &name, coord, original + h);
        let plus = probe(pair)?;
        set_coord(pair, &name, coord, original - h);
        let minus = probe(pair)?;
        set_coord(pair, &name, coord, original);

        let fd = (plus - minus) / (2.0 * h);
        let a = analytic.get(&name).expect("gradient exists").data()[coord];
        let err = crate::check::rel_err(a, fd);
        if err > max_rel_err {
            max_rel_err = err;
            worst_param = format!("{name}[{coord}]");
        }
        checked += 1;
    }
    Ok(GradCheck {
        loss: kind.name(),
        max_rel_err,
        worst_param,
        n_checked: checked,
    })
}
