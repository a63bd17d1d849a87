//! Small relu MLPs exposing penultimate embeddings and logits.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

const MAGIC: &[u8; 4] = b"WCRD";
const FORMAT_VERSION: u32 = 1;

/// Layer widths `[input, hidden..., embedding, classes]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MlpSpec {
    widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::contract(format!(
                "an MLP needs at least input, embedding and class widths, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::contract(format!("layer widths must be positive, got {widths:?}")));
        }
        Ok(MlpSpec { widths })
    }

    /// Three hidden layers of 128 and a 64-wide embedding.
    pub fn teacher(input: usize, classes: usize) -> Result<Self> {
        MlpSpec::new(vec![input, 128, 128, 128, 64, classes])
    }

    /// One hidden layer of 32 and a 16-wide embedding.
    pub fn student(input: usize, classes: usize) -> Result<Self> {
        MlpSpec::new(vec![input, 32, 16, classes])
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn embedding(&self) -> usize {
        self.widths[self.widths.len() - 2]
    }

    pub fn classes(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::matrix(
        fan_in,
        fan_out,
        (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect(),
    )
}

fn sgd(target: &mut Tensor, grad: &Tensor, lr: f64) {
    for (p, g) in target.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
}

/// Weights are stored `fan_in x fan_out`, so a layer computes `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: MlpSpec,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    frozen: bool,
}

pub struct ModelParams<'t> {
    pub weights: Vec<Var<'t>>,
    pub biases: Vec<Var<'t>>,
}

impl Model {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn init(spec: MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = spec.widths.windows(2).map(|w| glorot(&mut rng, w[0], w[1])).collect();
        let biases = spec.widths[1..].iter().map(|&w| Tensor::zeros(&[w])).collect();
        Model { spec, weights, biases, frozen: false }
    }

    pub fn from_parts(spec: MlpSpec, weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        let layers = spec.widths.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::contract(format!(
                "spec has {layers} layers, got {} weights and {} biases",
                weights.len(),
                biases.len()
            )));
        }
        for (k, w) in spec.widths.windows(2).enumerate() {
            if weights[k].shape() != [w[0], w[1]] || biases[k].len() != w[1] {
                return Err(Error::Shape {
                    op: "model layer",
                    left: vec![w[0], w[1]],
                    right: weights[k].shape().to_vec(),
                });
            }
        }
        let biases = biases.into_iter().map(|b| Tensor::vector(b.into_data())).collect();
        Ok(Model { spec, weights, biases, frozen: false })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.spec.input() {
            return Err(Error::contract(format!(
                "model expects {} input features, got shape {:?}",
                self.spec.input(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// `(H, Z)`: post-relu penultimate activations and logits.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        for k in 0..last {
            h = affine(&h, &self.weights[k], &self.biases[k])?.map(|a| a.max(0.0));
        }
        let z = affine(&h, &self.weights[last], &self.biases[last])?;
        Ok((h, z))
    }

    /// Registers parameters; a frozen model contributes constants only.
    pub fn register<'t>(&self, tape: &'t Tape) -> ModelParams<'t> {
        let leaf = |t: &Tensor| {
            if self.frozen {
                tape.constant(t.clone())
            } else {
                tape.param(t.clone())
            }
        };
        ModelParams {
            weights: self.weights.iter().map(leaf).collect(),
            biases: self.biases.iter().map(leaf).collect(),
        }
    }

    pub fn forward_var<'t>(&self, params: &ModelParams<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.check_input(&x.value())?;
        let last = self.weights.len() - 1;
        let mut h = x;
        for k in 0..last {
            h = h.matmul(params.weights[k])?.add_row(params.biases[k])?.relu();
        }
        let z = h.matmul(params.weights[last])?.add_row(params.biases[last])?;
        Ok((h, z))
    }

    pub fn sgd_step(&mut self, params: &ModelParams<'_>, grads: &Gradients, lr: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::contract("attempted to update a frozen model"));
        }
        for k in 0..self.weights.len() {
            let gw = grads.get(params.weights[k]);
            let gb = grads.get(params.biases[k]);
            let (Some(gw), Some(gb)) = (gw, gb) else {
                return Err(Error::contract("model parameter missing from gradients"));
            };
            sgd(&mut self.weights[k], gw, lr);
            sgd(&mut self.biases[k], gb, lr);
        }
        Ok(())
    }

    /// Header (`WCRD`, version, width count, widths as u32 LE) followed by
    /// each layer's weight then bias as f64 LE, in layer order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.spec.widths.len() as u32).to_le_bytes());
        for &w in &self.spec.widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for x in w.data().iter().chain(b.data()) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::contract("not a model file (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::contract(format!("unsupported model format version {version}")));
        }
        let n = r.u32()? as usize;
        if n > 64 {
            return Err(Error::contract(format!("implausible layer count {n}")));
        }
        let widths = (0..n).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        let spec = MlpSpec::new(widths)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in spec.widths.windows(2) {
            weights.push(Tensor::matrix(w[0], w[1], r.f64s(w[0] * w[1])?));
            biases.push(Tensor::vector(r.f64s(w[1])?));
        }
        if r.pos != bytes.len() {
            return Err(Error::contract(format!("{} trailing bytes in model file", bytes.len() - r.pos)));
        }
        Model::from_parts(spec, weights, biases)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_bytes(&fs::read(path)?)
    }
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut z = x.matmul(w)?;
    let c = z.cols();
    for (i, v) in z.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % c];
    }
    Ok(z)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::contract("model file is truncated"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::contract("model file is truncated"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Bias-free linear map from student embeddings to the teacher's width.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub weight: Tensor,
}

impl Projection {
    pub fn init(inputs: usize, outputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Projection { weight: glorot(&mut rng, inputs, outputs) }
    }

    pub fn register<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.param(self.weight.clone())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)
    }

    pub fn sgd_step(&mut self, param: Var<'_>, grads: &Gradients, lr: f64) -> Result<()> {
        let g = grads
            .get(param)
            .ok_or_else(|| Error::contract("projection missing from gradients"))?;
        sgd(&mut self.weight, g, lr);
        Ok(())
    }
}
