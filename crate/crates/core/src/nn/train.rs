use serde::{Deserialize, Serialize};

use super::{backward, forward, Dataset, Model};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

/// Defaults follow the usual task-vector fine-tuning recipe: AdamW, 2000
/// steps, batch 128, learning rate 1e-5, weight decay 0.1, cosine decay after
/// 200 warm-up steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            learning_rate: 1e-5,
            steps: 2000,
            batch_size: 128,
            weight_decay: 0.1,
            warmup_steps: 200,
            schedule: Schedule::Cosine,
            seed: 0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, steps: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            steps,
            batch_size,
            weight_decay: 0.0,
            warmup_steps: 0,
            schedule: Schedule::Constant,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be >= 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::arg("weight decay must be nonnegative"));
        }
        Ok(())
    }

    /// Learning rate used at step `t` (0-based): linear warm-up, then the schedule.
    pub fn learning_rate_at(&self, t: usize) -> f64 {
        if t < self.warmup_steps {
            return self.learning_rate * (t + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let progress = (t - self.warmup_steps) as f64 / span;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// What to record while training.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryOptions {
    /// Log every `stride`-th step (>= 1).
    pub stride: usize,
    /// Keep the flattened `(Ḡ_t, X̄_t)` pair of every layer at logged steps.
    pub record_factors: bool,
    /// Raw inputs whose layer activations are snapshotted at logged steps
    /// and once more after the last step.
    pub snapshot_inputs: Option<Matrix>,
}

impl TrajectoryOptions {
    pub fn every_step() -> Self {
        Self {
            stride: 1,
            record_factors: true,
            snapshot_inputs: None,
        }
    }
}

/// Output-gradient and input factors of one layer at one step.
#[derive(Debug, Clone)]
pub struct LayerFactors {
    pub grads: Matrix,
    pub inputs: Matrix,
}

#[derive(Debug, Clone)]
pub struct LoggedStep {
    pub step: usize,
    pub learning_rate: f64,
    /// Empty unless factors were requested.
    pub factors: Vec<LayerFactors>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryLog {
    /// Spec of the model being trained.
    pub spec: super::ModelSpec,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub stride: usize,
    pub total_steps: usize,
    pub steps: Vec<LoggedStep>,
    /// `(step, per-layer inputs)` on the snapshot batch, parameters as they
    /// were before that step ran.
    pub snapshots: Vec<(usize, Vec<Matrix>)>,
}

impl TrajectoryLog {
    /// True when every step was logged under plain SGD without weight decay.
    pub fn is_exact_sgd(&self) -> bool {
        self.optimizer == OptimizerKind::Sgd
            && self.weight_decay == 0.0
            && self.stride == 1
            && self.steps.len() == self.total_steps
            && self.steps.iter().enumerate().all(|(i, s)| s.step == i)
    }
}

struct Batcher {
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    fn next(&mut self, size: usize, rng: &mut Rng) -> Vec<usize> {
        let n = self.order.len();
        if size >= n {
            return (0..n).collect();
        }
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == n {
                rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Minibatch training from a copy of `model`. The input model is not touched.
pub fn train(
    model: &Model,
    data: &Dataset,
    config: &OptimizerConfig,
    logging: Option<&TrajectoryOptions>,
) -> Result<(Model, Option<TrajectoryLog>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::arg("cannot train on an empty dataset"));
    }
    if data.num_classes != model.spec.num_classes {
        return Err(Error::shape(format!(
            "dataset has {} classes, model has {}",
            data.num_classes, model.spec.num_classes
        )));
    }
    if let Some(opts) = logging {
        if opts.stride == 0 {
            return Err(Error::arg("trajectory stride must be >= 1"));
        }
    }

    let mut current = model.clone();
    let mut log = logging.map(|opts| TrajectoryLog {
        spec: model.spec.clone(),
        optimizer: config.kind,
        weight_decay: config.weight_decay,
        stride: opts.stride,
        total_steps: config.steps,
        steps: Vec::new(),
        snapshots: Vec::new(),
    });

    let mut rng = Rng::new(config.seed);
    let mut batcher = Batcher {
        order: rng.permutation(data.len()),
        cursor: 0,
    };
    let depth = model.depth();
    let mut m_w: Vec<Matrix> = current
        .weights
        .iter()
        .map(|w| Matrix::zeros(w.rows(), w.cols()))
        .collect();
    let mut v_w = m_w.clone();
    let mut m_b: Vec<Vec<f64>> = current.biases.iter().map(|b| vec![0.0; b.len()]).collect();
    let mut v_b = m_b.clone();

    for t in 0..config.steps {
        let lr = config.learning_rate_at(t);
        let logged = logging.is_some_and(|o| t % o.stride == 0);
        if logged {
            snapshot(&current, logging.unwrap(), log.as_mut().unwrap(), t)?;
        }

        let idx = batcher.next(config.batch_size, &mut rng);
        let batch = data.subset(&idx);
        let fwd = forward(&current, &batch.inputs)?;
        let grads = backward(&current, &fwd, &batch.labels)?;

        if logged {
            let opts = logging.unwrap();
            let factors = if opts.record_factors {
                grads
                    .output_grads
                    .iter()
                    .zip(fwd.inputs)
                    .map(|(g, x)| LayerFactors {
                        grads: g.clone(),
                        inputs: x,
                    })
                    .collect()
            } else {
                Vec::new()
            };
            log.as_mut().unwrap().steps.push(LoggedStep {
                step: t,
                learning_rate: lr,
                factors,
            });
        }

        match config.kind {
            OptimizerKind::Sgd => {
                for l in 0..depth {
                    let w = &mut current.weights[l];
                    if config.weight_decay != 0.0 {
                        let decay = w.clone();
                        w.axpy(-lr * config.weight_decay, &decay)?;
                    }
                    w.axpy(-lr, &grads.weight_grads[l])?;
                    for (b, gb) in current.biases[l].iter_mut().zip(&grads.bias_grads[l]) {
                        *b -= lr * gb;
                    }
                }
            }
            OptimizerKind::Adamw => {
                let step = (t + 1) as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(step);
                let c2 = 1.0 - ADAM_BETA2.powi(step);
                for l in 0..depth {
                    adamw_update(
                        current.weights[l].as_mut_slice(),
                        grads.weight_grads[l].as_slice(),
                        m_w[l].as_mut_slice(),
                        v_w[l].as_mut_slice(),
                        lr,
                        config.weight_decay,
                        c1,
                        c2,
                    );
                    adamw_update(
                        &mut current.biases[l],
                        &grads.bias_grads[l],
                        &mut m_b[l],
                        &mut v_b[l],
                        lr,
                        0.0,
                        c1,
                        c2,
                    );
                }
            }
        }
    }

    if let (Some(opts), Some(log)) = (logging, log.as_mut()) {
        snapshot(&current, opts, log, config.steps)?;
    }
    current.validate()?;
    Ok((current, log))
}

fn snapshot(
    model: &Model,
    opts: &TrajectoryOptions,
    log: &mut TrajectoryLog,
    step: usize,
) -> Result<()> {
    if let Some(inputs) = &opts.snapshot_inputs {
        if log.snapshots.last().is_some_and(|(s, _)| *s == step) {
            return Ok(());
        }
        let trace = forward(model, inputs)?;
        log.snapshots.push((step, trace.inputs));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    weight_decay: f64,
    c1: f64,
    c2: f64,
) {
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * param[i]);
    }
}

/// Top-1 accuracy of `model` on `data`, in `[0, 1]`.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::arg("accuracy of an empty dataset"));
    }
    let pred = model.predict(&data.inputs)?;
    let hits = pred
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, InputKind, ModelSpec};

    fn toy() -> (Model, Dataset) {
        let mut rng = Rng::new(12);
        let spec = ModelSpec::mlp(InputKind::Vector { dim: 3 }, &[4], 2, Activation::Relu);
        let model = Model::init(spec, &mut rng).unwrap();
        let x = Matrix::from_fn(10, 3, |_, _| rng.normal());
        let labels = (0..10).map(|i| i % 2).collect();
        (model, Dataset::new(x, labels, 2).unwrap())
    }

    #[test]
    fn zero_steps_is_identity() {
        let (m, d) = toy();
        let cfg = OptimizerConfig::sgd(0.1, 0, 4, 1);
        let (out, log) = train(&m, &d, &cfg, Some(&TrajectoryOptions::every_step())).unwrap();
        assert_eq!(out, m);
        assert!(log.unwrap().steps.is_empty());
    }

    #[test]
    fn one_sgd_step_by_hand() {
        let (m, d) = toy();
        let cfg = OptimizerConfig::sgd(0.3, 1, 100, 1);
        let (out, _) = train(&m, &d, &cfg, None).unwrap();
        let fwd = forward(&m, &d.inputs).unwrap();
        let g = backward(&m, &fwd, &d.labels).unwrap();
        for l in 0..m.depth() {
            let expect = m.weights[l].sub(&g.weight_grads[l].scale(0.3)).unwrap();
            assert_eq!(out.weights[l], expect);
        }
    }

    #[test]
    fn deterministic() {
        let (m, d) = toy();
        let cfg = OptimizerConfig {
            steps: 30,
            batch_size: 3,
            learning_rate: 1e-2,
            warmup_steps: 5,
            ..OptimizerConfig::default()
        };
        let (a, _) = train(&m, &d, &cfg, None).unwrap();
        let (b, _) = train(&m, &d, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, m);
    }

    #[test]
    fn schedule_shape() {
        let cfg = OptimizerConfig {
            learning_rate: 1.0,
            steps: 10,
            warmup_steps: 2,
            ..OptimizerConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 0.5);
        assert_eq!(cfg.learning_rate_at(1), 1.0);
        assert_eq!(cfg.learning_rate_at(2), 1.0);
        assert!(cfg.learning_rate_at(9) < 0.05);
    }

    #[test]
    fn invalid_config() {
        let (m, d) = toy();
        let cfg = OptimizerConfig::sgd(0.0, 1, 1, 0);
        assert!(train(&m, &d, &cfg, None).is_err());
    }
}
