//! Loss composition and the training, distillation and probing loops.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{MemoryBuffer, Side};
use crate::critic::{gckt_loss, nce_loss, Critic, CriticOutput, CriticParams, PairBatch};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{MlpSpec, Model, ModelParams, Projection};
use crate::ot::{cosine_cost_var, lckt_loss, SinkhornConfig, NORM_FLOOR};
use crate::tensor::{softmax_rows, Tape, Tensor, Var};

const STREAM_STUDENT: u64 = 1;
const STREAM_PROJECTION: u64 = 2;
const STREAM_CRITIC: u64 = 3;
const STREAM_BUFFER: u64 = 4;
const STREAM_SHUFFLE: u64 = 5;
const STREAM_TEACHER: u64 = 6;
const STREAM_PROBE: u64 = 7;

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn derive_seed(seed: u64, s: u64) -> u64 {
    stream(seed, s).next_u64()
}

/// Plain minibatch SGD settings shared by teacher training and probing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 0.05, epochs: 30, batch_size: 64, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// KD weight on the softened KL term.
    pub alpha: f64,
    /// KD temperature.
    pub rho: f64,
    /// Weight on the critic term.
    pub lambda1: f64,
    /// Weight on the transport term.
    pub lambda2: f64,
    /// Incongruent pairs per congruent pair.
    pub m: usize,
    pub sinkhorn: SinkhornConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub critic_hidden: usize,
    /// Defaults to the training-set size.
    pub buffer_capacity: Option<usize>,
    /// When false the cross-entropy term is dropped (unlabeled student data).
    pub use_labels: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 1.0,
            rho: 4.0,
            lambda1: 0.8,
            lambda2: 0.05,
            m: 1,
            sinkhorn: SinkhornConfig::default(),
            lr: 0.05,
            epochs: 40,
            batch_size: 64,
            seed: 0,
            critic_hidden: 128,
            buffer_capacity: None,
            use_labels: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: String| Err(Error::Config { pointer: format!("/{field}"), detail });
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("rho", format!("temperature must be positive, got {}", self.rho));
        }
        for (name, v) in [("alpha", self.alpha), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, format!("weight must be finite and non-negative, got {v}"));
            }
        }
        if self.m == 0 {
            return bad("m", "need at least one incongruent pair".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || (self.lambda2 > 0.0 && self.batch_size < 2) {
            return bad("batch_size", format!("batch_size {} is too small", self.batch_size));
        }
        if self.critic_hidden == 0 {
            return bad("critic_hidden", "must be at least 1".into());
        }
        if self.buffer_capacity == Some(0) {
            return bad("buffer_capacity", "must be at least 1".into());
        }
        self.sinkhorn.validate().map_err(|e| Error::Config {
            pointer: "/sinkhorn".into(),
            detail: e.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    CeOnly,
    Kd,
    Nce,
    Gckt,
    Lckt,
    Wcord,
    WcordKd,
}

impl Objective {
    pub const ALL: [Objective; 7] = [
        Objective::CeOnly,
        Objective::Kd,
        Objective::Nce,
        Objective::Gckt,
        Objective::Lckt,
        Objective::Wcord,
        Objective::WcordKd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::CeOnly => "ce_only",
            Objective::Kd => "kd",
            Objective::Nce => "nce",
            Objective::Gckt => "gckt",
            Objective::Lckt => "lckt",
            Objective::Wcord => "wcord",
            Objective::WcordKd => "wcord_kd",
        }
    }

    /// Term weights this objective selects from `cfg`.
    pub fn weights(self, cfg: &DistillConfig) -> TermWeights {
        use Objective::*;
        let pick = |on: bool, w: f64| if on { w } else { 0.0 };
        TermWeights {
            ce: cfg.use_labels,
            critic: pick(matches!(self, Nce | Gckt | Wcord | WcordKd), cfg.lambda1),
            nce: self == Nce,
            transport: pick(matches!(self, Lckt | Wcord | WcordKd), cfg.lambda2),
            kd: pick(matches!(self, Kd | WcordKd), cfg.alpha),
            teacher: self != CeOnly,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown objective {s:?}")))
    }
}

/// Which terms enter the total and with what weight. A zero weight removes
/// the term entirely (it is neither computed nor logged).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub ce: bool,
    /// Weight on the critic term (GCKT, or NCE when `nce` is set).
    pub critic: f64,
    pub nce: bool,
    pub transport: f64,
    pub kd: f64,
    /// Whether the teacher is run at all.
    pub teacher: bool,
}

/// Scalar values of one step's terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub ce: f64,
    /// Critic term: GCKT, or the NCE objective for NCE runs.
    pub gckt: f64,
    pub lckt: f64,
    /// Softened teacher-to-student KL. Logged whenever the teacher runs,
    /// weighted into the total only for KD objectives.
    pub kdkl: f64,
    pub total: f64,
}

impl Components {
    /// `ce - lambda1 * gckt + lambda2 * lckt + alpha * kdkl`, evaluated in
    /// the same order as the tape composition.
    pub fn recompose(&self, w: &TermWeights) -> f64 {
        self.ce - w.critic * self.gckt + w.transport * self.lckt + w.kd * self.kdkl
    }

    fn all_finite(&self) -> bool {
        [self.ce, self.gckt, self.lckt, self.kdkl, self.total].iter().all(|v| v.is_finite())
    }
}

fn check_labels(z: &Tensor, y: &[usize]) -> Result<()> {
    if z.rows() != y.len() {
        return Err(Error::contract(format!("{} logit rows for {} labels", z.rows(), y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= z.cols()) {
        return Err(Error::contract(format!("label {bad} out of range for {} classes", z.cols())));
    }
    Ok(())
}

/// Mean negative log-softmax probability of the true class.
pub fn ce_loss<'t>(z: Var<'t>, y: &[usize]) -> Result<Var<'t>> {
    check_labels(&z.value(), y)?;
    Ok(z.log_softmax_rows(1.0)?.pick_per_row(y)?.mean().neg())
}

/// Batch mean of `KL(softmax(z_t / rho) || softmax(z_s / rho))`; the teacher
/// side is a constant.
pub fn kd_kl<'t>(z_s: Var<'t>, z_t: &Tensor, rho: f64) -> Result<Var<'t>> {
    let s_shape = z_s.shape();
    if z_t.shape() != s_shape.as_slice() {
        return Err(Error::Shape {
            op: "kd_kl",
            left: s_shape,
            right: z_t.shape().to_vec(),
        });
    }
    let tape = z_s.tape();
    let p_t = softmax_rows(z_t, rho)?;
    let log_p_t = tape.constant(z_t.clone()).log_softmax_rows(rho)?.value();
    let entropy_part: f64 = p_t.data().iter().zip(log_p_t.data()).map(|(p, l)| p * l).sum();
    let cross = tape.constant(p_t).mul(z_s.log_softmax_rows(rho)?)?.sum();
    let n = z_t.rows() as f64;
    Ok(cross.neg().shift(entropy_part).scale(1.0 / n))
}

/// `CE(y, z_s) + alpha * KL(softmax(z_t / rho) || softmax(z_s / rho))`.
pub fn kd_loss<'t>(z_s: Var<'t>, z_t: &Tensor, y: &[usize], alpha: f64, rho: f64) -> Result<Var<'t>> {
    let ce = ce_loss(z_s, y)?;
    if alpha == 0.0 {
        return Ok(ce);
    }
    ce.add(kd_kl(z_s, z_t, rho)?.scale(alpha))
}

/// Per-term tape values feeding [`wcord_loss`].
pub struct Terms<'t> {
    pub ce: Option<Var<'t>>,
    pub critic: Option<Var<'t>>,
    pub transport: Option<Var<'t>>,
    pub kdkl: Option<Var<'t>>,
}

/// `CE - lambda1 * critic + lambda2 * transport (+ alpha * KL)`. The critic
/// term enters negated because it is maximized. Absent terms are skipped and
/// logged as zero.
pub fn wcord_loss<'t>(tape: &'t Tape, terms: &Terms<'t>, w: &TermWeights) -> Result<(Var<'t>, Components)> {
    let mut total = match terms.ce {
        Some(ce) => ce,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    if let Some(g) = terms.critic {
        total = total.sub(g.scale(w.critic))?;
    }
    if let Some(l) = terms.transport {
        total = total.add(l.scale(w.transport))?;
    }
    if let (Some(k), true) = (terms.kdkl, w.kd > 0.0) {
        total = total.add(k.scale(w.kd))?;
    }
    let val = |v: Option<Var<'t>>| v.map_or(0.0, |v| v.value().item());
    let comps = Components {
        ce: val(terms.ce),
        gckt: val(terms.critic),
        lckt: val(terms.transport),
        kdkl: val(terms.kdkl),
        total: total.value().item(),
    };
    Ok((total, comps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub components: Components,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub gckt: f64,
    pub lckt: f64,
    pub kdkl: f64,
    pub test_acc: f64,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective: String,
    pub seed: u64,
    pub weights: Option<TermWeights>,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub final_test_acc: f64,
}

pub const REPORT_HEADER: &str = "epoch,ce,gckt,lckt,kdkl,test_acc,elapsed_s";

impl TrainReport {
    /// One row per epoch. Wall-clock times are written as 0 unless `timing`
    /// is set, so that replays produce identical files.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let t = if timing { e.elapsed_s } else { 0.0 };
            let _ = writeln!(out, "{},{},{},{},{},{},{}", e.epoch, e.ce, e.gckt, e.lckt, e.kdkl, e.test_acc, t);
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("epoch,elapsed_s\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{}", e.epoch, e.elapsed_s);
        }
        out
    }
}

/// Indices of `0..n` in seeded random order, cut into batches. A trailing
/// batch smaller than `min_batch` is dropped.
fn batches(n: usize, batch_size: usize, min_batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= min_batch)
        .map(|c| c.to_vec())
        .collect()
}

/// Fraction of rows whose argmax logit (lowest index on ties) equals the
/// label.
pub fn accuracy(z: &Tensor, y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let correct = (0..z.rows())
        .filter(|&i| {
            let row = z.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == y[i]
        })
        .count();
    correct as f64 / y.len() as f64
}

pub fn evaluate(model: &Model, ds: &Dataset) -> Result<f64> {
    let (_, z) = model.forward(&ds.x)?;
    Ok(accuracy(&z, &ds.y))
}

fn divergence(epoch: usize, step: usize, detail: String) -> Error {
    Error::Divergence {
        epoch,
        step,
        last_finite_epoch: epoch.checked_sub(1).filter(|&e| e > 0),
        detail,
    }
}

fn epoch_log(epoch: usize, steps: &[StepLog], test_acc: f64, started: Instant) -> EpochLog {
    let n = steps.len().max(1) as f64;
    let mean = |f: fn(&Components) -> f64| steps.iter().map(|s| f(&s.components)).sum::<f64>() / n;
    EpochLog {
        epoch,
        ce: mean(|c| c.ce),
        gckt: mean(|c| c.gckt),
        lckt: mean(|c| c.lckt),
        kdkl: mean(|c| c.kdkl),
        test_acc,
        elapsed_s: started.elapsed().as_secs_f64(),
    }
}

/// Seed of the student's initial weights for a distillation run.
pub fn student_init_seed(seed: u64) -> u64 {
    derive_seed(seed, STREAM_STUDENT)
}

/// Cross-entropy SGD on a freshly initialized model; the result is frozen.
pub fn train_teacher(train: &Dataset, test: &Dataset, spec: MlpSpec, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let model = Model::init(spec, derive_seed(cfg.seed, STREAM_TEACHER));
    let (mut model, report) = fit_supervised(model, train, test, cfg, "teacher")?;
    model.freeze();
    Ok((model, report))
}

/// Plain cross-entropy SGD starting from `model`. Batches are drawn from the
/// same shuffle stream as distillation runs.
pub fn fit_supervised(
    mut model: Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    label: &str,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let mut shuffle = stream(cfg.seed, STREAM_SHUFFLE);
    let started = Instant::now();
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    for epoch in 1..=cfg.epochs {
        let first = steps.len();
        for (step, idx) in batches(train.len(), cfg.batch_size, 1, &mut shuffle).into_iter().enumerate() {
            let tape = Tape::new();
            let params = model.register(&tape);
            let x = tape.constant(train.x.gather_rows(&idx));
            let y: Vec<usize> = idx.iter().map(|&i| train.y[i]).collect();
            let (_, z) = model.forward_var(&params, x)?;
            let loss = ce_loss(z, &y)?;
            let ce = loss.value().item();
            if !ce.is_finite() {
                return Err(divergence(epoch, step, format!("ce={ce}")));
            }
            let grads = tape.backward(loss)?;
            model.sgd_step(&params, &grads, cfg.lr)?;
            steps.push(StepLog {
                epoch,
                step,
                components: Components { ce, total: ce, ..Default::default() },
            });
        }
        let acc = evaluate(&model, test)?;
        epochs.push(epoch_log(epoch, &steps[first..], acc, started));
    }
    let final_test_acc = evaluate(&model, test)?;
    Ok((
        model,
        TrainReport {
            objective: label.into(),
            seed: cfg.seed,
            weights: None,
            epochs,
            steps,
            final_test_acc,
        },
    ))
}

/// One mini-batch with everything that stays fixed while its loss is
/// evaluated: teacher outputs and the sampled negatives.
pub struct PreparedBatch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub ids: Vec<u64>,
    pub teacher_h: Tensor,
    pub teacher_z: Tensor,
    /// Teacher features of the incongruent partners, `(n*M) x d`, and their
    /// ids.
    pub negatives: Option<(Tensor, Vec<u64>)>,
}

/// Student, projection, critic and buffer for one distillation run.
#[derive(Clone, Debug)]
pub struct Distiller {
    pub student: Model,
    pub projection: Option<Projection>,
    pub critic: Option<Critic>,
    pub buffer: Option<MemoryBuffer>,
    pub cfg: DistillConfig,
    pub weights: TermWeights,
}

/// Tape handles of the trainable parameters in one step.
pub struct StepParams<'t> {
    pub student: ModelParams<'t>,
    pub projection: Option<Var<'t>>,
    pub critic: Option<CriticParams<'t>>,
}

impl Distiller {
    pub fn new(
        student_spec: MlpSpec,
        teacher_embedding: usize,
        cfg: &DistillConfig,
        objective: Objective,
        train_size: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let weights = objective.weights(cfg);
        if !weights.ce && weights.critic == 0.0 && weights.transport == 0.0 && weights.kd == 0.0 {
            return Err(Error::contract(format!(
                "objective {objective} without labels has no active loss term"
            )));
        }
        let student = Model::init(student_spec.clone(), derive_seed(cfg.seed, STREAM_STUDENT));
        let uses_features = weights.critic > 0.0 || weights.transport > 0.0;
        let projection = uses_features.then(|| {
            Projection::init(
                student_spec.embedding(),
                teacher_embedding,
                derive_seed(cfg.seed, STREAM_PROJECTION),
            )
        });
        let (critic, buffer) = if weights.critic > 0.0 {
            let output = if weights.nce { CriticOutput::Sigmoid } else { CriticOutput::Linear };
            let critic = Critic::new(
                2 * teacher_embedding,
                &[cfg.critic_hidden],
                !weights.nce,
                output,
                &mut stream(cfg.seed, STREAM_CRITIC),
            );
            let capacity = cfg.buffer_capacity.unwrap_or(train_size).max(1);
            let buffer = MemoryBuffer::new(teacher_embedding, capacity, derive_seed(cfg.seed, STREAM_BUFFER))?;
            (Some(critic), Some(buffer))
        } else {
            (None, None)
        };
        Ok(Distiller {
            student,
            projection,
            critic,
            buffer,
            cfg: cfg.clone(),
            weights,
        })
    }

    /// Runs the frozen teacher, writes the batch into the buffer and draws
    /// negatives.
    pub fn prepare(
        &mut self,
        teacher: &Model,
        x: Tensor,
        teacher_x: &Tensor,
        y: Vec<usize>,
        ids: Vec<u64>,
    ) -> Result<PreparedBatch> {
        let (teacher_h, teacher_z) = if self.weights.teacher {
            teacher.forward(teacher_x)?
        } else {
            (Tensor::zeros(&[x.rows(), 1]), Tensor::zeros(&[x.rows(), 1]))
        };
        let mut negatives = None;
        if let Some(buffer) = self.buffer.as_mut() {
            let proj = self.projection.as_ref().expect("critic runs imply a projection");
            let (h_s, _) = self.student.forward(&x)?;
            let s_feat = proj.forward(&h_s)?.normalize_rows_floored(NORM_FLOOR);
            let t_feat = teacher_h.normalize_rows_floored(NORM_FLOOR);
            buffer.upsert_batch(&ids, &t_feat, &s_feat)?;
            negatives = Some(buffer.sample_for_batch(&ids, self.cfg.m, Side::Teacher)?);
        }
        Ok(PreparedBatch { x, y, ids, teacher_h, teacher_z, negatives })
    }

    pub fn register<'t>(&self, tape: &'t Tape) -> StepParams<'t> {
        StepParams {
            student: self.student.register(tape),
            projection: self.projection.as_ref().map(|p| p.register(tape)),
            critic: self.critic.as_ref().map(|c| c.register(tape)),
        }
    }

    /// Total loss and components for a prepared batch. With `plan` given the
    /// transport term uses that coupling instead of solving for one.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        params: &StepParams<'t>,
        batch: &PreparedBatch,
        plan: Option<&Tensor>,
    ) -> Result<(Var<'t>, Components, Option<Tensor>)> {
        let w = &self.weights;
        let x = tape.constant(batch.x.clone());
        let (h_s, z_s) = self.student.forward_var(&params.student, x)?;
        let ce = if w.ce { Some(ce_loss(z_s, &batch.y)?) } else { None };
        let kdkl = if w.teacher { Some(kd_kl(z_s, &batch.teacher_z, self.cfg.rho)?) } else { None };
        let proj = params.projection.map(|p| h_s.matmul(p)).transpose()?;

        let mut critic_term = None;
        if let (Some(critic), Some(cp), Some(proj)) = (&self.critic, &params.critic, proj) {
            let (neg, neg_ids) = batch.negatives.as_ref().expect("prepared with a buffer");
            let t_feat = tape.constant(batch.teacher_h.normalize_rows_floored(NORM_FLOOR));
            let s_feat = proj.normalize_rows_floored(NORM_FLOOR);
            let pairs = PairBatch::assemble(t_feat, s_feat, &batch.ids, tape.constant(neg.clone()), neg_ids, self.cfg.m)?;
            critic_term = Some(if w.nce { nce_loss(critic, cp, &pairs)? } else { gckt_loss(critic, cp, &pairs)? });
        }

        let mut transport = None;
        let mut used_plan = None;
        if let (true, Some(proj)) = (w.transport > 0.0, proj) {
            match plan {
                Some(pi) => {
                    let c = cosine_cost_var(tape.constant(batch.teacher_h.clone()), proj)?;
                    transport = Some(c.mul(tape.constant(pi.clone()))?.sum());
                    used_plan = Some(pi.clone());
                }
                None => {
                    let out = lckt_loss(&batch.teacher_h, proj, &self.cfg.sinkhorn)?;
                    transport = Some(out.loss);
                    used_plan = Some(out.plan.pi);
                }
            }
        }
        let terms = Terms { ce, critic: critic_term, transport, kdkl };
        let (total, comps) = wcord_loss(tape, &terms, w)?;
        Ok((total, comps, used_plan))
    }

    /// Applies one SGD step to every trainable parameter.
    pub fn apply(&mut self, params: &StepParams<'_>, grads: &crate::tensor::Gradients) -> Result<()> {
        let lr = self.cfg.lr;
        self.student.sgd_step(&params.student, grads, lr)?;
        if let (Some(p), Some(v)) = (self.projection.as_mut(), params.projection) {
            p.sgd_step(v, grads, lr)?;
        }
        if let (Some(c), Some(cp)) = (self.critic.as_mut(), &params.critic) {
            c.sgd_step(cp, grads, lr)?;
        }
        Ok(())
    }

    /// Prepare, refresh the critic's singular vectors, evaluate, step.
    pub fn step(&mut self, batch: &PreparedBatch, epoch: usize, step: usize) -> Result<Components> {
        if let Some(c) = self.critic.as_mut() {
            c.refresh();
        }
        let tape = Tape::new();
        let params = self.register(&tape);
        let (total, comps, _) = self.loss(&tape, &params, batch, None)?;
        if !comps.all_finite() {
            return Err(divergence(
                epoch,
                step,
                format!(
                    "non-finite loss: ce={} gckt={} lckt={} kdkl={} total={}",
                    comps.ce, comps.gckt, comps.lckt, comps.kdkl, comps.total
                ),
            ));
        }
        let grads = tape.backward(total)?;
        self.apply(&params, &grads)?;
        Ok(comps)
    }
}

/// Distills `teacher` into a fresh student. `teacher_x`, when given, holds
/// the teacher's view of the training rows (same order as `train`).
pub fn distill_student(
    train: &Dataset,
    teacher_x: Option<&Tensor>,
    test: &Dataset,
    teacher: &Model,
    student_spec: MlpSpec,
    cfg: &DistillConfig,
    objective: Objective,
) -> Result<(Model, TrainReport)> {
    if !teacher.is_frozen() {
        return Err(Error::contract("the teacher must be frozen before distillation"));
    }
    let teacher_x = teacher_x.unwrap_or(&train.x);
    if teacher_x.rows() != train.len() {
        return Err(Error::contract(format!(
            "teacher view has {} rows, training set has {}",
            teacher_x.rows(),
            train.len()
        )));
    }
    let mut d = Distiller::new(student_spec, teacher.spec().embedding(), cfg, objective, train.len())?;
    let mut shuffle = stream(cfg.seed, STREAM_SHUFFLE);
    let min_batch = if d.weights.transport > 0.0 || d.weights.critic > 0.0 { 2 } else { 1 };
    let started = Instant::now();
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    for epoch in 1..=cfg.epochs {
        let first = steps.len();
        for (step, idx) in batches(train.len(), cfg.batch_size, min_batch, &mut shuffle).into_iter().enumerate() {
            let batch = d.prepare(
                teacher,
                train.x.gather_rows(&idx),
                &teacher_x.gather_rows(&idx),
                idx.iter().map(|&i| train.y[i]).collect(),
                idx.iter().map(|&i| train.ids[i]).collect(),
            )?;
            let components = d.step(&batch, epoch, step)?;
            steps.push(StepLog { epoch, step, components });
        }
        let acc = evaluate(&d.student, test)?;
        epochs.push(epoch_log(epoch, &steps[first..], acc, started));
    }
    let final_test_acc = evaluate(&d.student, test)?;
    Ok((
        d.student,
        TrainReport {
            objective: objective.name().into(),
            seed: cfg.seed,
            weights: Some(d.weights),
            epochs,
            steps,
            final_test_acc,
        },
    ))
}

/// Softmax regression on fixed features, trained by SGD; returns test
/// accuracy.
pub fn linear_probe_features(train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    cfg.validate()?;
    if train.dim() != test.dim() {
        return Err(Error::contract("probe train and test features differ in width"));
    }
    let classes = train.classes.max(test.classes);
    let mut w = Tensor::zeros(&[train.dim(), classes]);
    let mut b = Tensor::zeros(&[classes]);
    let mut shuffle = stream(cfg.seed, STREAM_PROBE);
    for _ in 0..cfg.epochs {
        for idx in batches(train.len(), cfg.batch_size, 1, &mut shuffle) {
            let tape = Tape::new();
            let (wv, bv) = (tape.param(w.clone()), tape.param(b.clone()));
            let x = tape.constant(train.x.gather_rows(&idx));
            let y: Vec<usize> = idx.iter().map(|&i| train.y[i]).collect();
            let loss = ce_loss(x.matmul(wv)?.add_row(bv)?, &y)?;
            let grads = tape.backward(loss)?;
            for (target, var) in [(&mut w, wv), (&mut b, bv)] {
                let g = grads.get(var).expect("probe parameters are tracked");
                target.data_mut().iter_mut().zip(g.data()).for_each(|(p, d)| *p -= cfg.lr * d);
            }
        }
    }
    let mut z = test.x.matmul(&w)?;
    let c = z.cols();
    z.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += b.data()[i % c]);
    Ok(accuracy(&z, &test.y))
}

/// Linear probe on the frozen model's penultimate embeddings.
pub fn linear_probe(model: &Model, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    if !model.is_frozen() {
        return Err(Error::contract("linear probing needs a frozen model"));
    }
    let embed = |ds: &Dataset| -> Result<Dataset> {
        let (h, _) = model.forward(&ds.x)?;
        Ok(Dataset { x: h, ..ds.clone() })
    };
    linear_probe_features(&embed(train)?, &embed(test)?, cfg)
}
