use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, LearnerError};
use crate::param::{GradVector, LayerPartition, ParamVector, DEFAULT_BYTES_PER_ELEMENT};
use crate::seed::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    Mse,
}

/// Fully connected network. Hidden layers use `activation`; the output layer
/// is linear and feeds `loss`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
}

impl MlpSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        activation: Activation,
        loss: LossKind,
    ) -> Result<Self, LearnerError> {
        let spec = Self {
            layer_widths,
            activation,
            loss,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.layer_widths.len() < 2 {
            return Err(LearnerError::InvalidSpec(
                "need at least input and output widths".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(LearnerError::InvalidSpec("widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    fn dense_count(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Element counts in storage order: weights of dense layer 0, its biases,
    /// weights of dense layer 1, ...
    pub fn layer_counts(&self) -> Vec<usize> {
        self.layer_widths
            .windows(2)
            .flat_map(|w| [w[0] * w[1], w[1]])
            .collect()
    }

    pub fn partition(&self, bytes_per_element: u64) -> Result<LayerPartition, LearnerError> {
        Ok(LayerPartition::new(&self.layer_counts(), bytes_per_element)?)
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_counts().iter().sum()
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<ParamVector, LearnerError> {
    init_params_with(spec, seed, DEFAULT_BYTES_PER_ELEMENT)
}

pub fn init_params_with(
    spec: &MlpSpec,
    seed: u64,
    bytes_per_element: u64,
) -> Result<ParamVector, LearnerError> {
    spec.validate()?;
    let partition = Arc::new(spec.partition(bytes_per_element)?);
    let mut rng = seed::rng(seed, Purpose::Init, &[]);
    let mut values = Vec::with_capacity(partition.total_count());
    for w in spec.layer_widths.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    Ok(ParamVector::new(values, partition)?)
}

struct View<'a> {
    spec: &'a MlpSpec,
    values: &'a [f64],
    offsets: Vec<usize>,
}

impl<'a> View<'a> {
    fn new(spec: &'a MlpSpec, params: &'a ParamVector) -> Result<Self, LearnerError> {
        if params.partition().total_count() != spec.parameter_count()
            || params.partition().layer_count() != 2 * spec.dense_count()
        {
            return Err(LearnerError::InvalidSpec(
                "parameter vector does not match the network".into(),
            ));
        }
        let offsets = params.partition().layers().iter().map(|s| s.offset).collect();
        Ok(Self {
            spec,
            values: params.values(),
            offsets,
        })
    }

    fn weights(&self, k: usize) -> &'a [f64] {
        let (i, o) = (self.spec.layer_widths[k], self.spec.layer_widths[k + 1]);
        &self.values[self.offsets[2 * k]..self.offsets[2 * k] + i * o]
    }

    fn biases(&self, k: usize) -> &'a [f64] {
        let o = self.spec.layer_widths[k + 1];
        &self.values[self.offsets[2 * k + 1]..self.offsets[2 * k + 1] + o]
    }

    /// Returns post-activation outputs of every layer, input first. The last
    /// entry holds the raw output-layer values.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n = self.spec.dense_count();
        let mut acts = Vec::with_capacity(n + 1);
        acts.push(x.to_vec());
        for k in 0..n {
            let (w, b) = (self.weights(k), self.biases(k));
            let input = &acts[k];
            let fan_in = input.len();
            let mut out: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, &bias)| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    bias + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if k + 1 < n {
                for z in &mut out {
                    *z = match self.spec.activation {
                        Activation::Relu => z.max(0.0),
                        Activation::Tanh => z.tanh(),
                    };
                }
            }
            acts.push(out);
        }
        acts
    }
}

fn output_loss(loss: LossKind, out: &[f64], label: usize) -> (f64, Vec<f64>) {
    match loss {
        LossKind::SoftmaxCrossEntropy => {
            let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = out.iter().map(|z| (z - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let label = label.min(out.len() - 1);
            let loss = -((exps[label] / sum).ln());
            let grad = exps
                .iter()
                .enumerate()
                .map(|(c, e)| e / sum - if c == label { 1.0 } else { 0.0 })
                .collect();
            (loss, grad)
        }
        LossKind::Mse => {
            // Single-output networks regress the label value; wider outputs
            // regress a one-hot target.
            let target = |c: usize| {
                if out.len() == 1 {
                    label as f64
                } else if c == label {
                    1.0
                } else {
                    0.0
                }
            };
            let loss = out.iter().enumerate().map(|(c, z)| (z - target(c)).powi(2)).sum();
            let grad = out
                .iter()
                .enumerate()
                .map(|(c, z)| 2.0 * (z - target(c)))
                .collect();
            (loss, grad)
        }
    }
}

fn check_batch(spec: &MlpSpec, data: &Dataset, batch: &[usize]) -> Result<(), LearnerError> {
    if batch.is_empty() {
        return Err(LearnerError::InvalidData("empty batch".into()));
    }
    if data.dim() != spec.input_width() {
        return Err(LearnerError::InvalidData(format!(
            "dataset has {} features, network expects {}",
            data.dim(),
            spec.input_width()
        )));
    }
    if let Some(&bad) = batch.iter().find(|&&r| r >= data.len()) {
        return Err(LearnerError::InvalidData(format!(
            "row {bad} out of range ({} rows)",
            data.len()
        )));
    }
    Ok(())
}

/// Mean batch loss only.
pub fn batch_loss(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
    batch: &[usize],
) -> Result<f64, LearnerError> {
    check_batch(spec, data, batch)?;
    let view = View::new(spec, params)?;
    let total: f64 = batch
        .iter()
        .map(|&r| {
            let acts = view.forward(data.row(r));
            output_loss(spec.loss, acts.last().unwrap(), data.label(r)).0
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Mean batch loss and its gradient by backpropagation.
pub fn forward_backward(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
    batch: &[usize],
) -> Result<(f64, GradVector), LearnerError> {
    check_batch(spec, data, batch)?;
    let view = View::new(spec, params)?;
    let n = spec.dense_count();
    let mut grad = GradVector::zeros(params.partition().clone());
    let mut total_loss = 0.0;

    for &r in batch {
        let acts = view.forward(data.row(r));
        let (loss, mut delta) = output_loss(spec.loss, &acts[n], data.label(r));
        total_loss += loss;
        for k in (0..n).rev() {
            let input = &acts[k];
            let fan_in = input.len();
            {
                let gw = grad.layer_values_mut(2 * k);
                for (o, d) in delta.iter().enumerate() {
                    for (g, a) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
            }
            for (g, d) in grad.layer_values_mut(2 * k + 1).iter_mut().zip(&delta) {
                *g += d;
            }
            if k == 0 {
                break;
            }
            let w = view.weights(k);
            let mut prev = vec![0.0; fan_in];
            for (o, d) in delta.iter().enumerate() {
                for (p, wv) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *p += wv * d;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= match spec.activation {
                    Activation::Relu => {
                        if *a > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Activation::Tanh => 1.0 - a * a,
                };
            }
            delta = prev;
        }
    }

    let scale = 1.0 / batch.len() as f64;
    let loss = total_loss * scale;
    let mut values = grad.into_values();
    for (i, g) in values.iter_mut().enumerate() {
        *g *= scale;
        if !g.is_finite() {
            return Err(LearnerError::NumericOverflow(format!(
                "gradient element {i} is not finite"
            )));
        }
    }
    if !loss.is_finite() {
        return Err(LearnerError::NumericOverflow("loss is not finite".into()));
    }
    Ok((loss, GradVector::new(values, params.partition().clone())?))
}

/// Central differences `(L(p + eps e_k) - L(p - eps e_k)) / 2 eps` for every
/// coordinate. Independent of the backpropagation path.
pub fn finite_diff_grad(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &Dataset,
    batch: &[usize],
    eps: f64,
) -> Result<GradVector, LearnerError> {
    if eps <= 0.0 {
        return Err(LearnerError::InvalidSpec("eps must be positive".into()));
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.values().len());
    for k in 0..params.values().len() {
        let original = params.values()[k];
        probe.values_mut()[k] = original + eps;
        let plus = batch_loss(spec, &probe, data, batch)?;
        probe.values_mut()[k] = original - eps;
        let minus = batch_loss(spec, &probe, data, batch)?;
        probe.values_mut()[k] = original;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(GradVector::new(out, params.partition().clone())?)
}

/// Index of the largest output; ties go to the lowest class id.
pub fn predict(spec: &MlpSpec, params: &ParamVector, x: &[f64]) -> Result<usize, LearnerError> {
    let view = View::new(spec, params)?;
    let acts = view.forward(x);
    let out = acts.last().unwrap();
    let mut best = 0;
    for (c, &z) in out.iter().enumerate() {
        if z > out[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Top-1 accuracy over the whole dataset.
pub fn evaluate(spec: &MlpSpec, params: &ParamVector, data: &Dataset) -> Result<f64, LearnerError> {
    if data.dim() != spec.input_width() {
        return Err(LearnerError::InvalidData("feature width mismatch".into()));
    }
    let mut correct = 0usize;
    for i in 0..data.len() {
        if predict(spec, params, data.row(i))? == data.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
