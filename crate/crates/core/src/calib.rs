//! Synthetic task suites, calibration-set selection, and the single
//! forward/backward pass that captures layer inputs and output gradients.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container::{decode_field, Container, Tensor};
use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix, Rng};
use crate::nn::{backward, forward, Dataset, Model};

/// Raw input family of a generated suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataShape {
    /// Class-conditional Gaussian mixture in `dim` dimensions.
    Vector { dim: usize },
    /// Oriented gratings, `height x width` grayscale.
    Image { height: usize, width: usize },
}

impl DataShape {
    pub fn raw_dim(&self) -> usize {
        match *self {
            DataShape::Vector { dim } => dim,
            DataShape::Image { height, width } => height * width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSuiteConfig {
    pub shape: DataShape,
    pub num_classes: usize,
    pub pretrain_size: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    /// Norm of the shared class prototypes (vectors) or grating amplitude (images).
    pub separation: f64,
    /// How far each pre-training corpus moves the prototypes.
    pub pretrain_shift: f64,
    /// How far the downstream task moves the prototypes.
    pub downstream_shift: f64,
    /// Gaussian components per class.
    pub modes_per_class: usize,
}

impl Default for TaskSuiteConfig {
    fn default() -> Self {
        Self {
            shape: DataShape::Vector { dim: 16 },
            num_classes: 4,
            pretrain_size: 2000,
            train_size: 1000,
            test_size: 1000,
            noise: 1.0,
            separation: 3.0,
            pretrain_shift: 0.5,
            downstream_shift: 1.5,
            modes_per_class: 1,
        }
    }
}

impl TaskSuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::arg("a task suite needs at least 2 classes"));
        }
        if self.shape.raw_dim() == 0 {
            return Err(Error::arg("input dimension must be >= 1"));
        }
        if self.modes_per_class == 0 {
            return Err(Error::arg("modes_per_class must be >= 1"));
        }
        if self.pretrain_size == 0 || self.train_size == 0 || self.test_size == 0 {
            return Err(Error::arg("every split needs at least one example"));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("separation", self.separation),
            ("pretrain_shift", self.pretrain_shift),
            ("downstream_shift", self.downstream_shift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Two pre-training corpora from different distributions plus a shifted
/// downstream task, all over the same label space.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub pretrain_a: Dataset,
    pub pretrain_b: Dataset,
    pub downstream_train: Dataset,
    pub downstream_test: Dataset,
    pub num_classes: usize,
    pub seed: u64,
}

impl TaskSuite {
    pub fn splits(&self) -> [(&'static str, &Dataset); 4] {
        [
            ("pretrain_a", &self.pretrain_a),
            ("pretrain_b", &self.pretrain_b),
            ("downstream_train", &self.downstream_train),
            ("downstream_test", &self.downstream_test),
        ]
    }
}

/// Per-distribution generative parameters.
enum Prototypes {
    /// `[class][mode]` mean vectors.
    Means(Vec<Vec<Vec<f64>>>),
    /// `[class]` (angle, frequency in cycles per image).
    Gratings(Vec<(f64, f64)>),
}

fn random_unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let n = norm(&v).max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / n).collect()
}

fn shifted(base: &Prototypes, shift: f64, rng: &mut Rng) -> Prototypes {
    match base {
        Prototypes::Means(m) => Prototypes::Means(
            m.iter()
                .map(|modes| {
                    modes
                        .iter()
                        .map(|mu| {
                            let d = random_unit(mu.len(), rng);
                            mu.iter().zip(d).map(|(a, b)| a + shift * b).collect()
                        })
                        .collect()
                })
                .collect(),
        ),
        Prototypes::Gratings(g) => Prototypes::Gratings(
            g.iter()
                .map(|&(angle, freq)| {
                    (
                        angle + shift * 0.25 * rng.normal(),
                        (freq * (1.0 + 0.2 * shift * rng.normal())).max(0.5),
                    )
                })
                .collect(),
        ),
    }
}

fn sample(cfg: &TaskSuiteConfig, protos: &Prototypes, n: usize, rng: &mut Rng) -> Result<Dataset> {
    let c = cfg.num_classes;
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    rng.shuffle(&mut labels);
    let dim = cfg.shape.raw_dim();
    let mut inputs = Matrix::zeros(n, dim);
    for (i, &label) in labels.iter().enumerate() {
        let row = inputs.row_mut(i);
        match (protos, cfg.shape) {
            (Prototypes::Means(m), _) => {
                let mode = &m[label][rng.below(m[label].len())];
                for (x, mu) in row.iter_mut().zip(mode) {
                    *x = mu + cfg.noise * rng.normal();
                }
            }
            (Prototypes::Gratings(g), DataShape::Image { height, width }) => {
                let (angle, freq) = g[label];
                let phase = rng.uniform() * std::f64::consts::TAU;
                let (s, co) = angle.sin_cos();
                let size = height.max(width) as f64;
                for r in 0..height {
                    for col in 0..width {
                        let u = (r as f64 * co + col as f64 * s) / size;
                        row[r * width + col] = cfg.separation
                            * (std::f64::consts::TAU * freq * u + phase).cos()
                            + cfg.noise * rng.normal();
                    }
                }
            }
            (Prototypes::Gratings(_), DataShape::Vector { .. }) => unreachable!(),
        }
    }
    Dataset::new(inputs, labels, c)
}

/// Deterministic synthetic suite for `seed`.
pub fn generate_task_suite(cfg: &TaskSuiteConfig, seed: u64) -> Result<TaskSuite> {
    cfg.validate()?;
    let mut rng = Rng::derive(seed, 0x5017e);
    let base = match cfg.shape {
        DataShape::Vector { dim } => Prototypes::Means(
            (0..cfg.num_classes)
                .map(|_| {
                    (0..cfg.modes_per_class)
                        .map(|_| {
                            random_unit(dim, &mut rng)
                                .into_iter()
                                .map(|x| x * cfg.separation)
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        ),
        DataShape::Image { .. } => Prototypes::Gratings(
            (0..cfg.num_classes)
                .map(|k| {
                    let angle = std::f64::consts::PI * k as f64 / cfg.num_classes as f64;
                    (angle, 2.0 + (k % 3) as f64)
                })
                .collect(),
        ),
    };
    let dist_a = shifted(&base, cfg.pretrain_shift, &mut rng);
    let dist_b = shifted(&base, cfg.pretrain_shift, &mut rng);
    let dist_d = shifted(&base, cfg.downstream_shift, &mut rng);

    let split_rng = |stream: u64| Rng::derive(seed, stream);
    Ok(TaskSuite {
        pretrain_a: sample(cfg, &dist_a, cfg.pretrain_size, &mut split_rng(1))?,
        pretrain_b: sample(cfg, &dist_b, cfg.pretrain_size, &mut split_rng(2))?,
        downstream_train: sample(cfg, &dist_d, cfg.train_size, &mut split_rng(3))?,
        downstream_test: sample(cfg, &dist_d, cfg.test_size, &mut split_rng(4))?,
        num_classes: cfg.num_classes,
        seed,
    })
}

pub fn dataset_to_container(d: &Dataset) -> Container {
    let mut c = Container::new("dataset").with_field("num_classes", Value::from(d.num_classes));
    c.push(Tensor::matrix("inputs", &d.inputs));
    let labels: Vec<i64> = d.labels.iter().map(|&l| l as i64).collect();
    c.push(Tensor::ints("labels", &labels));
    c
}

pub fn dataset_from_container(c: &Container) -> Result<Dataset> {
    c.expect_kind("dataset")?;
    let num_classes: usize = decode_field(c, "num_classes")?;
    let inputs = c.matrix("inputs")?;
    let labels = c
        .ints("labels")?
        .into_iter()
        .map(|l| usize::try_from(l).map_err(|_| Error::arg(format!("negative label {l}"))))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(inputs, labels, num_classes)
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    dataset_to_container(d).save(path)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    dataset_from_container(&Container::load(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    ClassBalanced,
    CentroidNear,
    CentroidFar,
    HalfClass,
    OneClass,
}

/// Calibration size: `N` examples in total, or `K` per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Total(usize),
    PerClass(usize),
}

impl Budget {
    pub fn total(&self, num_classes: usize) -> usize {
        match *self {
            Budget::Total(n) => n,
            Budget::PerClass(k) => k * num_classes,
        }
    }
}

impl std::fmt::Display for Budget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Budget::Total(n) => write!(f, "N={n}"),
            Budget::PerClass(k) => write!(f, "K={k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub data: Dataset,
    /// Positions of the chosen examples in the source dataset.
    pub indices: Vec<usize>,
    pub strategy: Strategy,
    pub budget: Budget,
}

/// Per-class quotas: as even as possible, remainder to the lowest class indices.
pub fn balanced_quotas(total: usize, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|k| total / classes + usize::from(k < total % classes))
        .collect()
}

fn take_quota(groups: &[Vec<usize>], quotas: &[usize], rng: &mut Rng) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (k, (g, &q)) in groups.iter().zip(quotas).enumerate() {
        if q > g.len() {
            return Err(Error::arg(format!(
                "class {k} has {} examples, calibration needs {q}",
                g.len()
            )));
        }
        let mut pool = g.clone();
        rng.shuffle(&mut pool);
        out.extend_from_slice(&pool[..q]);
    }
    Ok(out)
}

/// Per-example features used by the centroid strategies: the input to the
/// final layer, averaged over tokens.
fn head_features(model: &Model, data: &Dataset) -> Result<Matrix> {
    let trace = forward(model, &data.inputs)?;
    let x = trace.inputs.last().unwrap();
    let l = trace.tokens;
    let mut out = Matrix::zeros(data.len(), x.cols());
    for e in 0..data.len() {
        for t in 0..l {
            out.row_mut(e)
                .iter_mut()
                .zip(x.row(e * l + t))
                .for_each(|(o, v)| *o += v / l as f64);
        }
    }
    Ok(out)
}

pub fn select_calibration(
    data: &Dataset,
    strategy: Strategy,
    budget: Budget,
    feature_model: Option<&Model>,
    seed: u64,
) -> Result<CalibrationSet> {
    let c = data.num_classes;
    let total = budget.total(c);
    if total == 0 {
        return Err(Error::arg("calibration budget must be >= 1"));
    }
    if total > data.len() {
        return Err(Error::arg(format!(
            "calibration budget {total} exceeds dataset size {}",
            data.len()
        )));
    }
    let mut rng = Rng::derive(seed, 0xca1b);
    let groups = data.indices_by_class();

    let indices = match (strategy, budget) {
        (Strategy::Random, Budget::Total(n)) => {
            let mut all = rng.permutation(data.len());
            all.truncate(n);
            all
        }
        (Strategy::Random, Budget::PerClass(k))
        | (Strategy::ClassBalanced, Budget::PerClass(k)) => {
            take_quota(&groups, &vec![k; c], &mut rng)?
        }
        (Strategy::ClassBalanced, Budget::Total(n)) => {
            take_quota(&groups, &balanced_quotas(n, c), &mut rng)?
        }
        (Strategy::CentroidNear | Strategy::CentroidFar, _) => {
            let model = feature_model
                .ok_or_else(|| Error::arg("centroid strategies need a feature model"))?;
            let feats = head_features(model, data)?;
            let dist: Vec<f64> = {
                let mut centroids = vec![vec![0.0; feats.cols()]; c];
                for (k, g) in groups.iter().enumerate() {
                    for &i in g {
                        centroids[k]
                            .iter_mut()
                            .zip(feats.row(i))
                            .for_each(|(m, v)| *m += v / g.len() as f64);
                    }
                }
                (0..data.len())
                    .map(|i| {
                        let mu = &centroids[data.labels[i]];
                        feats
                            .row(i)
                            .iter()
                            .zip(mu)
                            .map(|(a, b)| (a - b).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect()
            };
            let far = strategy == Strategy::CentroidFar;
            let rank = |group: &[usize]| {
                let mut g = group.to_vec();
                g.sort_by(|&a, &b| {
                    let o = dist[a].partial_cmp(&dist[b]).unwrap();
                    if far { o.reverse() } else { o }.then(a.cmp(&b))
                });
                g
            };
            match budget {
                Budget::Total(n) => {
                    let all: Vec<usize> = (0..data.len()).collect();
                    rank(&all)[..n].to_vec()
                }
                Budget::PerClass(k) => {
                    let mut out = Vec::new();
                    for (cls, g) in groups.iter().enumerate() {
                        if g.len() < k {
                            return Err(Error::arg(format!(
                                "class {cls} has {} examples, calibration needs {k}",
                                g.len()
                            )));
                        }
                        out.extend_from_slice(&rank(g)[..k]);
                    }
                    out
                }
            }
        }
        (Strategy::HalfClass, _) => {
            let kept = c.div_ceil(2);
            match budget {
                Budget::Total(n) => {
                    let mut pool: Vec<usize> = groups[..kept].concat();
                    if pool.len() < n {
                        return Err(Error::arg(format!(
                            "classes 0..{} hold {} examples, calibration needs {n}",
                            kept - 1,
                            pool.len()
                        )));
                    }
                    rng.shuffle(&mut pool);
                    pool.truncate(n);
                    pool
                }
                Budget::PerClass(k) => {
                    let mut q = vec![0; c];
                    q[..kept].iter_mut().for_each(|x| *x = k);
                    take_quota(&groups, &q, &mut rng)?
                }
            }
        }
        (Strategy::OneClass, _) => {
            let n = match budget {
                Budget::Total(n) => n,
                Budget::PerClass(k) => k,
            };
            let mut q = vec![0; c];
            q[0] = n;
            take_quota(&groups, &q, &mut rng)?
        }
    };

    Ok(CalibrationSet {
        data: data.subset(&indices),
        indices,
        strategy,
        budget,
    })
}

/// Layer inputs and output gradients of one model on a calibration batch,
/// flattened to `M = N·L` rows (batch-major, then token).
#[derive(Debug, Clone)]
pub struct CalibrationCapture {
    pub examples: usize,
    pub tokens: usize,
    /// `X̄` per layer, `M x d_in`.
    pub inputs: Vec<Matrix>,
    /// `Ḡ` per layer, `M x d_out`.
    pub output_grads: Vec<Matrix>,
    /// `∂loss/∂x` per layer, `M x d_in`, when requested.
    pub input_grads: Option<Vec<Matrix>>,
    pub loss: f64,
}

impl CalibrationCapture {
    pub fn rows(&self) -> usize {
        self.examples * self.tokens
    }

    pub fn depth(&self) -> usize {
        self.inputs.len()
    }

    /// Resamples every captured tensor along the token axis to `tokens`.
    pub fn resampled(&self, tokens: usize) -> Result<CalibrationCapture> {
        if tokens == self.tokens {
            return Ok(self.clone());
        }
        let re = |ms: &[Matrix]| -> Result<Vec<Matrix>> {
            ms.iter()
                .map(|m| interpolate_sequence(m, self.tokens, tokens))
                .collect()
        };
        Ok(CalibrationCapture {
            examples: self.examples,
            tokens,
            inputs: re(&self.inputs)?,
            output_grads: re(&self.output_grads)?,
            input_grads: self.input_grads.as_deref().map(re).transpose()?,
            loss: self.loss,
        })
    }
}

/// One forward and one backward pass of `model` on the calibration batch at
/// its current parameters. No parameter is updated.
pub fn collect(
    model: &Model,
    calib: &Dataset,
    capture_input_grads: bool,
) -> Result<CalibrationCapture> {
    if calib.num_classes != model.spec.num_classes {
        return Err(Error::shape(format!(
            "calibration labels span {} classes, model predicts {}",
            calib.num_classes, model.spec.num_classes
        )));
    }
    let trace = forward(model, &calib.inputs)?;
    let grads = backward(model, &trace, &calib.labels)?;
    Ok(CalibrationCapture {
        examples: trace.examples,
        tokens: trace.tokens,
        inputs: trace.inputs,
        output_grads: grads.output_grads,
        input_grads: capture_input_grads.then_some(grads.input_grads),
        loss: grads.loss,
    })
}

/// Linear resampling of token sequences with aligned endpoints.
///
/// `x` holds `N` sequences of `from` tokens each (rows batch-major). Output
/// token `j` reads source position `j·(from−1)/(to−1)`; `to == 1` keeps token 0.
pub fn interpolate_sequence(x: &Matrix, from: usize, to: usize) -> Result<Matrix> {
    if from == 0 || to == 0 {
        return Err(Error::arg("sequence lengths must be >= 1"));
    }
    if x.rows() == 0 || !x.rows().is_multiple_of(from) {
        return Err(Error::shape(format!(
            "{} rows do not split into sequences of {from} tokens",
            x.rows()
        )));
    }
    if from == to {
        return Ok(x.clone());
    }
    let n = x.rows() / from;
    let d = x.cols();
    let mut out = Matrix::zeros(n * to, d);
    for e in 0..n {
        for j in 0..to {
            let pos = if to == 1 {
                0.0
            } else {
                j as f64 * (from - 1) as f64 / (to - 1) as f64
            };
            let lo = (pos.floor() as usize).min(from - 1);
            let hi = (lo + 1).min(from - 1);
            let frac = pos - lo as f64;
            let a = x.row(e * from + lo);
            let b = x.row(e * from + hi);
            let dst = out.row_mut(e * to + j);
            for k in 0..d {
                dst[k] = if frac == 0.0 {
                    a[k]
                } else {
                    a[k] + frac * (b[k] - a[k])
                };
            }
        }
    }
    Ok(out)
}
