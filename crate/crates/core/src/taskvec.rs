//! Task vectors: per-layer parameter deltas `θ_ft − θ_pre`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container::{decode_field, Container, Tensor};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{spec_fingerprint, Model, ModelSpec, TrajectoryLog};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    /// `d_out x d_in` weight delta per layer.
    pub weights: Vec<Matrix>,
    /// Bias delta per layer; empty for bias-free layers.
    pub biases: Vec<Vec<f64>>,
    /// Fingerprint of the spec whose coordinates the deltas live in.
    pub fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaiveMode {
    Pad,
    Crop,
}

impl TaskVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            weights: spec
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.d_out, l.d_in))
                .collect(),
            biases: spec
                .layers
                .iter()
                .map(|l| {
                    if l.has_bias {
                        vec![0.0; l.d_out]
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
            fingerprint: spec_fingerprint(spec),
        }
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Frobenius norm of each layer's weight delta.
    pub fn weight_norms(&self) -> Vec<f64> {
        self.weights.iter().map(Matrix::frobenius_norm).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.max_abs() == 0.0)
            && self.biases.iter().flatten().all(|&b| b == 0.0)
    }

    pub fn check_shapes(&self, spec: &ModelSpec) -> Result<()> {
        if self.depth() != spec.depth() || self.biases.len() != spec.depth() {
            return Err(Error::shape(format!(
                "task vector has {} layers, model has {}",
                self.depth(),
                spec.depth()
            )));
        }
        for (i, l) in spec.layers.iter().enumerate() {
            if self.weights[i].shape() != (l.d_out, l.d_in) {
                return Err(Error::shape(format!(
                    "layer {}: delta is {}x{}, weight is {}x{}",
                    l.name,
                    self.weights[i].rows(),
                    self.weights[i].cols(),
                    l.d_out,
                    l.d_in
                )));
            }
            let want = if l.has_bias { l.d_out } else { 0 };
            if self.biases[i].len() != want {
                return Err(Error::shape(format!(
                    "layer {}: bias delta has {} entries, expected {}",
                    l.name,
                    self.biases[i].len(),
                    want
                )));
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("taskvector")
            .with_field("fingerprint", Value::from(self.fingerprint.clone()))
            .with_field("depth", Value::from(self.depth()));
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            c.push(Tensor::matrix(format!("layer{i}.delta_weight"), w));
            c.push(Tensor::vector(format!("layer{i}.delta_bias"), b));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("taskvector")?;
        let fingerprint: String = decode_field(c, "fingerprint")?;
        let depth: usize = decode_field(c, "depth")?;
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        for i in 0..depth {
            weights.push(c.matrix(&format!("layer{i}.delta_weight"))?);
            biases.push(c.vector(&format!("layer{i}.delta_bias"))?);
        }
        Ok(Self {
            weights,
            biases,
            fingerprint,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// `ft − pre`, layer by layer.
pub fn extract(pre: &Model, ft: &Model) -> Result<TaskVector> {
    if pre.spec != ft.spec {
        return Err(Error::shape(
            "pre-trained and fine-tuned models have different specs",
        ));
    }
    let weights = ft
        .weights
        .iter()
        .zip(&pre.weights)
        .map(|(f, p)| f.sub(p))
        .collect::<Result<Vec<_>>>()?;
    let biases = ft
        .biases
        .iter()
        .zip(&pre.biases)
        .map(|(f, p)| f.iter().zip(p).map(|(a, b)| a - b).collect())
        .collect();
    Ok(TaskVector {
        weights,
        biases,
        fingerprint: spec_fingerprint(&pre.spec),
    })
}

/// Rebuilds the task vector from a complete plain-SGD trajectory as
/// `−Σ_t η_t · Ḡ_tᵀ X̄_t` (bias: `−Σ_t η_t · colsum(Ḡ_t)`).
pub fn reconstruct_from_trajectory(log: &TrajectoryLog) -> Result<TaskVector> {
    if !log.is_exact_sgd() {
        return Err(Error::Precondition(format!(
            "trajectory reconstruction needs every step of weight-decay-free SGD \
             (optimizer {:?}, weight decay {}, stride {}, {} of {} steps logged)",
            log.optimizer,
            log.weight_decay,
            log.stride,
            log.steps.len(),
            log.total_steps
        )));
    }
    let mut tau = TaskVector::zeros(&log.spec);
    for step in &log.steps {
        if step.factors.len() != tau.depth() {
            return Err(Error::Precondition(format!(
                "step {} has no recorded gradient/input factors",
                step.step
            )));
        }
        for (l, f) in step.factors.iter().enumerate() {
            let grad = f.grads.t_matmul(&f.inputs)?;
            tau.weights[l].axpy(-step.learning_rate, &grad)?;
            if !tau.biases[l].is_empty() {
                for (b, g) in tau.biases[l].iter_mut().zip(f.grads.column_sums()) {
                    *b -= step.learning_rate * g;
                }
            }
        }
    }
    Ok(tau)
}

/// Zero-pads or crops every layer delta, anchored at index `(0, 0)`, to the
/// target's shapes. Layer counts must already agree.
pub fn naive_transfer(tau: &TaskVector, target: &ModelSpec, mode: NaiveMode) -> Result<TaskVector> {
    if tau.depth() != target.depth() {
        return Err(Error::shape(format!(
            "naive transfer needs equal depth, got {} source and {} target layers",
            tau.depth(),
            target.depth()
        )));
    }
    let mut out = TaskVector::zeros(target);
    for (l, layer) in target.layers.iter().enumerate() {
        let w = &tau.weights[l];
        out.weights[l] = match mode {
            NaiveMode::Pad => w.zero_pad(layer.d_out, layer.d_in)?,
            NaiveMode::Crop => w.top_left(layer.d_out, layer.d_in)?,
        };
        if layer.has_bias {
            let b = &tau.biases[l];
            let n = layer.d_out;
            out.biases[l] = match mode {
                NaiveMode::Pad if b.len() <= n => {
                    let mut v = b.clone();
                    v.resize(n, 0.0);
                    v
                }
                NaiveMode::Crop if b.len() >= n => b[..n].to_vec(),
                _ => {
                    return Err(Error::shape(format!(
                        "layer {}: cannot {:?} bias of length {} to {}",
                        layer.name,
                        mode,
                        b.len(),
                        n
                    )))
                }
            };
        }
    }
    Ok(out)
}

/// `θ_pre + τ̂` with no scaling.
pub fn apply(target_pre: &Model, tau: &TaskVector) -> Result<Model> {
    tau.check_shapes(&target_pre.spec)?;
    let mut out = target_pre.clone();
    for l in 0..out.depth() {
        out.weights[l] = out.weights[l].add(&tau.weights[l])?;
        out.biases[l]
            .iter_mut()
            .zip(&tau.biases[l])
            .for_each(|(b, d)| *b += d);
    }
    out.validate()?;
    Ok(out)
}
