//! Spectrally normalized critic and the pair-based contrastive losses.
//!
//! The critic scores a concatenated `(teacher, student)` feature pair. With
//! spectral normalization every linear map is divided by an estimate of its
//! largest singular value, so the composed network (with relu in between) is
//! 1-Lipschitz up to the accuracy of that estimate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Clamp applied to sigmoid critic outputs before taking logs.
pub const NCE_CLAMP: f64 = 1e-7;

/// Upper bound on iterations for [`SpectralLayer::converge`].
const CONVERGE_MAX_ITERS: usize = 200_000;

/// Result of [`power_iteration`].
#[derive(Clone, Debug)]
pub struct PowerEstimate {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Set when the matrix annihilated the iterate (zero matrix, or a start
    /// vector in its left null space); `sigma` is then 0.
    pub degenerate: bool,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn unit(mut x: Vec<f64>) -> Option<Vec<f64>> {
    let n = norm(&x);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    x.iter_mut().for_each(|a| *a /= n);
    Some(x)
}

/// `W^T u` for row-major `W` (`rows x cols`).
fn mul_t(w: &Tensor, u: &[f64]) -> Vec<f64> {
    let cols = w.cols();
    let mut out = vec![0.0; cols];
    for (i, &ui) in u.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += ui * wij;
        }
    }
    out
}

fn mul(w: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| w.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Estimates the largest singular value of `w` by alternating
/// `v = W^T u / |W^T u|`, `u = W v / |W v|`, returning `sigma = |W v|`.
///
/// The estimate never exceeds the true value and does not decrease with more
/// iterations from the same `u0`.
pub fn power_iteration(w: &Tensor, u0: &[f64], iters: usize) -> Result<PowerEstimate> {
    if w.shape().len() != 2 || u0.len() != w.rows() {
        return Err(Error::Shape {
            op: "power_iteration",
            left: w.shape().to_vec(),
            right: vec![u0.len()],
        });
    }
    if iters == 0 {
        return Err(Error::contract("power_iteration needs at least one iteration"));
    }
    let mut u = unit(u0.to_vec()).ok_or_else(|| Error::domain("power_iteration", "start vector has zero norm"))?;
    let degenerate = |u: Vec<f64>| {
        let mut v = vec![0.0; w.cols()];
        v[0] = 1.0;
        PowerEstimate { sigma: 0.0, u, v, degenerate: true }
    };
    let mut v = Vec::new();
    let mut sigma = 0.0;
    for _ in 0..iters {
        let Some(nv) = unit(mul_t(w, &u)) else {
            return Ok(degenerate(u));
        };
        v = nv;
        let wv = mul(w, &v);
        sigma = norm(&wv);
        let Some(nu) = unit(wv) else {
            return Ok(degenerate(u));
        };
        u = nu;
    }
    Ok(PowerEstimate { sigma, u, v, degenerate: false })
}

/// Affine layer `x W^T + b` with cached singular-vector estimates.
#[derive(Clone, Debug)]
pub struct SpectralLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    u: Vec<f64>,
    v: Vec<f64>,
    pub power_iters: usize,
}

impl SpectralLayer {
    /// Glorot-uniform weights, zero bias, random unit `u`.
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = Tensor::matrix(
            outputs,
            inputs,
            (0..inputs * outputs).map(|_| rng.random_range(-limit..limit)).collect(),
        );
        let u: Vec<f64> = (0..outputs).map(|_| rng.sample(StandardNormal)).collect();
        let u = unit(u).unwrap_or_else(|| {
            let mut e = vec![0.0; outputs];
            e[0] = 1.0;
            e
        });
        let mut v = vec![0.0; inputs];
        v[0] = 1.0;
        let mut layer = SpectralLayer {
            weight,
            bias: Tensor::zeros(&[outputs]),
            u,
            v,
            power_iters: 1,
        };
        layer.refresh();
        layer
    }

    /// Builds a layer from explicit parameters; `u` starts at the first basis
    /// vector.
    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.rows() {
            return Err(Error::Shape {
                op: "spectral_layer",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let mut u = vec![0.0; weight.rows()];
        u[0] = 1.0;
        let mut v = vec![0.0; weight.cols()];
        v[0] = 1.0;
        let bias = Tensor::vector(bias.into_data());
        let mut layer = SpectralLayer { weight, bias, u, v, power_iters: 1 };
        layer.refresh();
        Ok(layer)
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// Runs `power_iters` steps from the cached `u` and stores the result.
    pub fn refresh(&mut self) -> f64 {
        self.iterate(self.power_iters.max(1))
    }

    fn iterate(&mut self, iters: usize) -> f64 {
        // Shapes are fixed at construction, so only degeneracy can occur.
        let est = power_iteration(&self.weight, &self.u, iters).expect("layer shapes are consistent");
        self.u = est.u;
        self.v = est.v;
        est.sigma
    }

    /// Iterates until the estimate stops improving (at least 50 steps).
    pub fn converge(&mut self) -> f64 {
        let mut sigma = self.iterate(50);
        for _ in 0..CONVERGE_MAX_ITERS / 50 {
            let next = self.iterate(50);
            if next - sigma <= 1e-15 * next {
                return next;
            }
            sigma = next;
        }
        sigma
    }

    /// `u^T W v` for the cached vectors.
    pub fn sigma_estimate(&self) -> f64 {
        self.u.iter().zip(mul(&self.weight, &self.v)).map(|(a, b)| a * b).sum()
    }

    /// `W / sigma_estimate`, or `W` unchanged when the estimate is not
    /// positive (a zero matrix stays zero).
    pub fn normalized_weight(&self) -> Tensor {
        let s = self.sigma_estimate();
        if s > 0.0 {
            self.weight.map(|w| w / s)
        } else {
            self.weight.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticOutput {
    /// Unbounded real score.
    Linear,
    /// Score squashed into (0, 1).
    Sigmoid,
}

/// Multi-layer perceptron scoring feature pairs, relu between layers.
#[derive(Clone, Debug)]
pub struct Critic {
    layers: Vec<SpectralLayer>,
    spectral: bool,
    output: CriticOutput,
}

/// Tape handles for one critic forward.
pub struct CriticParams<'t> {
    pub weights: Vec<Var<'t>>,
    pub biases: Vec<Var<'t>>,
}

impl Critic {
    /// `input -> hidden[0] -> ... -> 1`.
    pub fn new(input: usize, hidden: &[usize], spectral: bool, output: CriticOutput, rng: &mut ChaCha8Rng) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths.windows(2).map(|w| SpectralLayer::new(w[0], w[1], rng)).collect();
        Critic { layers, spectral, output }
    }

    pub fn from_layers(layers: Vec<SpectralLayer>, spectral: bool, output: CriticOutput) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("critic needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape {
                    op: "critic",
                    left: pair[0].weight.shape().to_vec(),
                    right: pair[1].weight.shape().to_vec(),
                });
            }
        }
        if layers[layers.len() - 1].outputs() != 1 {
            return Err(Error::contract("critic must end in a scalar output"));
        }
        Ok(Critic { layers, spectral, output })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn is_spectral(&self) -> bool {
        self.spectral
    }

    pub fn output(&self) -> CriticOutput {
        self.output
    }

    pub fn layers(&self) -> &[SpectralLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [SpectralLayer] {
        &mut self.layers
    }

    /// One training-time refresh of every layer's singular vectors.
    pub fn refresh(&mut self) {
        if self.spectral {
            self.layers.iter_mut().for_each(|l| {
                l.refresh();
            });
        }
    }

    /// Converges every layer's estimate (verification mode).
    pub fn converge(&mut self) {
        self.layers.iter_mut().for_each(|l| {
            l.converge();
        });
    }

    /// Weights actually applied in the forward pass.
    pub fn effective_weights(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .map(|l| if self.spectral { l.normalized_weight() } else { l.weight.clone() })
            .collect()
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::contract(format!(
                "critic expects {} input features, got {cols}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Scores every row of `x` (`p x input`) without recording gradients.
    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x.cols())?;
        let mut h = Tensor::matrix(x.rows(), x.cols(), x.data().to_vec());
        let weights = self.effective_weights();
        let last = self.layers.len() - 1;
        for (k, (layer, w)) in self.layers.iter().zip(&weights).enumerate() {
            let mut z = h.matmul(&w.transpose())?;
            let c = z.cols();
            for (i, val) in z.data_mut().iter_mut().enumerate() {
                *val += layer.bias.data()[i % c];
            }
            h = if k < last { z.map(|a| a.max(0.0)) } else { z };
        }
        let out = h.into_data();
        Ok(match self.output {
            CriticOutput::Linear => out,
            CriticOutput::Sigmoid => out.into_iter().map(|a| 1.0 / (1.0 + (-a).exp())).collect(),
        })
    }

    /// Score of the single pair `concat(h_t, h_s)`.
    pub fn critic_forward(&self, h_t: &[f64], h_s: &[f64]) -> Result<f64> {
        self.check_input(h_t.len() + h_s.len())?;
        if h_t.len() != h_s.len() {
            return Err(Error::contract(format!(
                "teacher and student features differ in length: {} vs {}",
                h_t.len(),
                h_s.len()
            )));
        }
        let x = Tensor::matrix(1, h_t.len() * 2, [h_t, h_s].concat());
        Ok(self.score(&x)?[0])
    }

    /// Registers the critic parameters on `tape`.
    pub fn register<'t>(&self, tape: &'t Tape) -> CriticParams<'t> {
        CriticParams {
            weights: self.layers.iter().map(|l| tape.param(l.weight.clone())).collect(),
            biases: self.layers.iter().map(|l| tape.param(l.bias.clone())).collect(),
        }
    }

    /// Scores rows of `x` on the tape, returning a `p x 1` column.
    ///
    /// The normalizer `u^T W v` is differentiated through `W`; `u` and `v`
    /// are constants.
    pub fn score_var<'t>(&self, params: &CriticParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.check_input(x.value().cols())?;
        let tape = x.tape();
        let last = self.layers.len() - 1;
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut w = params.weights[k];
            if self.spectral && layer.sigma_estimate() > 0.0 {
                let u = tape.constant(Tensor::matrix(1, layer.outputs(), layer.u.clone()));
                let v = tape.constant(Tensor::matrix(layer.inputs(), 1, layer.v.clone()));
                let sigma = u.matmul(w)?.matmul(v)?;
                w = w.div(sigma)?;
            }
            let z = h.matmul(w.t()?)?.add_row(params.biases[k])?;
            h = if k < last { z.relu() } else { z };
        }
        Ok(match self.output {
            CriticOutput::Linear => h,
            CriticOutput::Sigmoid => h.sigmoid(),
        })
    }

    /// Plain SGD: `p -= lr * grad` for every critic parameter.
    pub fn sgd_step(&mut self, params: &CriticParams<'_>, grads: &Gradients, lr: f64) -> Result<()> {
        for (k, layer) in self.layers.iter_mut().enumerate() {
            for (var, target) in [(params.weights[k], &mut layer.weight), (params.biases[k], &mut layer.bias)] {
                let g = grads
                    .get(var)
                    .ok_or_else(|| Error::contract("critic parameter missing from gradients"))?;
                for (p, d) in target.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * d;
                }
            }
        }
        Ok(())
    }
}

/// Congruent and incongruent feature pairs for one step.
///
/// Rows are `concat(h_t, h_s)`.
pub struct PairBatch<'t> {
    pub congruent: Var<'t>,
    pub incongruent: Var<'t>,
    pub m: usize,
}

impl<'t> PairBatch<'t> {
    pub fn new(congruent: Var<'t>, incongruent: Var<'t>, m: usize) -> Result<Self> {
        let (c, i) = (congruent.value(), incongruent.value());
        if c.shape().len() != 2 || i.shape().len() != 2 || c.cols() != i.cols() {
            return Err(Error::Shape {
                op: "pair_batch",
                left: c.shape().to_vec(),
                right: i.shape().to_vec(),
            });
        }
        if m == 0 {
            return Err(Error::contract("M must be at least 1"));
        }
        Ok(PairBatch { congruent, incongruent, m })
    }

    /// Pairs each teacher row with its own student row, and each student row
    /// `i` with the `m` buffered teacher rows `negatives[i*m .. (i+1)*m]`.
    ///
    /// Fails if a negative carries the same sample id as its anchor.
    pub fn assemble(
        teacher: Var<'t>,
        student: Var<'t>,
        ids: &[u64],
        negatives: Var<'t>,
        negative_ids: &[u64],
        m: usize,
    ) -> Result<Self> {
        let n = student.value().rows();
        if teacher.value().rows() != n || ids.len() != n {
            return Err(Error::contract(format!(
                "batch has {n} student rows, {} teacher rows and {} ids",
                teacher.value().rows(),
                ids.len()
            )));
        }
        if m == 0 {
            return Err(Error::contract("M must be at least 1"));
        }
        if negatives.value().rows() != n * m || negative_ids.len() != n * m {
            return Err(Error::contract(format!(
                "expected {} negatives, got {} rows and {} ids",
                n * m,
                negatives.value().rows(),
                negative_ids.len()
            )));
        }
        for (k, &neg) in negative_ids.iter().enumerate() {
            if neg == ids[k / m] {
                return Err(Error::contract(format!("incongruent pair {k} reuses sample id {neg}")));
            }
        }
        let congruent = teacher.concat_cols(student)?;
        let repeat: Vec<usize> = (0..n * m).map(|k| k / m).collect();
        let incongruent = negatives.concat_cols(student.gather_rows(&repeat)?)?;
        PairBatch::new(congruent, incongruent, m)
    }
}

/// `mean(g(congruent)) - M * mean(g(incongruent))`.
pub fn gckt_loss<'t>(critic: &Critic, params: &CriticParams<'t>, batch: &PairBatch<'t>) -> Result<Var<'t>> {
    let pos = critic.score_var(params, batch.congruent)?.mean();
    let neg = critic.score_var(params, batch.incongruent)?.mean();
    pos.sub(neg.scale(batch.m as f64))
}

/// `mean(log g(congruent)) + mean(log(1 - g(incongruent)))` with `g`
/// clamped to `[1e-7, 1 - 1e-7]`.
pub fn nce_loss<'t>(critic: &Critic, params: &CriticParams<'t>, batch: &PairBatch<'t>) -> Result<Var<'t>> {
    if critic.output() != CriticOutput::Sigmoid {
        return Err(Error::contract("nce_loss needs a sigmoid-output critic"));
    }
    let lo = NCE_CLAMP;
    let hi = 1.0 - NCE_CLAMP;
    let pos = critic.score_var(params, batch.congruent)?.clamp(lo, hi).log()?.mean();
    let neg = critic
        .score_var(params, batch.incongruent)?
        .clamp(lo, hi)
        .neg()
        .shift(1.0)
        .log()?
        .mean();
    pos.add(neg)
}

/// Lower bound and exact mutual information of a discrete joint table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiBound {
    /// `E_p[log(p / (p + mu nu))]`, from the Bayes posterior of the pair
    /// being congruent.
    pub bound: f64,
    /// `sum p log(p / (mu nu))`.
    pub exact_mi: f64,
}

pub fn mi_bound_discrete(joint: &Tensor) -> Result<MiBound> {
    if joint.shape().len() != 2 || joint.rows() > 16 || joint.cols() > 16 {
        return Err(Error::contract(format!(
            "joint table must be a matrix of at most 16x16, got {:?}",
            joint.shape()
        )));
    }
    if joint.data().iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::contract("joint table has negative or non-finite entries"));
    }
    let total = joint.sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("joint table sums to {total}, not 1")));
    }
    let (r, c) = (joint.rows(), joint.cols());
    let mu: Vec<f64> = (0..r).map(|i| joint.row(i).iter().sum()).collect();
    let nu: Vec<f64> = (0..c).map(|j| (0..r).map(|i| joint.get(i, j)).sum()).collect();
    let (mut bound, mut exact_mi) = (0.0, 0.0);
    for i in 0..r {
        for j in 0..c {
            let p = joint.get(i, j);
            if p > 0.0 {
                let q = mu[i] * nu[j];
                bound += p * (p / (p + q)).ln();
                exact_mi += p * (p / q).ln();
            }
        }
    }
    Ok(MiBound { bound, exact_mi })
}
