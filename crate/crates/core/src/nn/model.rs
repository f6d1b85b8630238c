use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// tanh approximation
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub activation: Activation,
    pub has_bias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputKind {
    Vector {
        dim: usize,
    },
    /// Single-channel image, row-major pixels, cut into `patch x patch` tiles.
    Image {
        height: usize,
        width: usize,
        patch: usize,
    },
}

impl InputKind {
    /// Length of one raw input row.
    pub fn raw_dim(&self) -> usize {
        match *self {
            InputKind::Vector { dim } => dim,
            InputKind::Image { height, width, .. } => height * width,
        }
    }

    /// Tokens per example (`L`).
    pub fn tokens(&self) -> usize {
        match *self {
            InputKind::Vector { .. } => 1,
            InputKind::Image {
                height,
                width,
                patch,
            } => (height / patch) * (width / patch),
        }
    }

    /// Width of one token as seen by the first layer.
    pub fn token_dim(&self) -> usize {
        match *self {
            InputKind::Vector { dim } => dim,
            InputKind::Image { patch, .. } => patch * patch,
        }
    }

    /// Reshapes raw rows (`N x raw_dim`) into token rows (`N·L x token_dim`),
    /// batch-major then token-major.
    pub fn tokenize(&self, raw: &Matrix) -> Result<Matrix> {
        if raw.cols() != self.raw_dim() {
            return Err(Error::shape(format!(
                "input rows have {} values, model expects {}",
                raw.cols(),
                self.raw_dim()
            )));
        }
        match *self {
            InputKind::Vector { .. } => Ok(raw.clone()),
            InputKind::Image {
                height,
                width,
                patch,
            } => {
                let (ph, pw) = (height / patch, width / patch);
                let n = raw.rows();
                let mut out = Matrix::zeros(n * ph * pw, patch * patch);
                for e in 0..n {
                    let img = raw.row(e);
                    for pr in 0..ph {
                        for pc in 0..pw {
                            let tok = out.row_mut(e * ph * pw + pr * pw + pc);
                            for r in 0..patch {
                                let src = (pr * patch + r) * width + pc * patch;
                                tok[r * patch..(r + 1) * patch]
                                    .copy_from_slice(&img[src..src + patch]);
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputKind,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl ModelSpec {
    /// Chain of `hidden.len() + 1` linear layers with biases: `token_dim → hidden[0]
    /// → … → num_classes`, every hidden layer followed by `activation`.
    pub fn mlp(
        input: InputKind,
        hidden: &[usize],
        num_classes: usize,
        activation: Activation,
    ) -> Self {
        let mut dims = vec![input.token_dim()];
        dims.extend_from_slice(hidden);
        dims.push(num_classes);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                name: if i == last {
                    "head".to_string()
                } else {
                    format!("block{i}")
                },
                d_in: w[0],
                d_out: w[1],
                activation: if i == last {
                    Activation::Identity
                } else {
                    activation
                },
                has_bias: true,
            })
            .collect();
        Self {
            input,
            layers,
            num_classes,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::arg("model needs at least one layer"));
        }
        if let InputKind::Image {
            height,
            width,
            patch,
        } = self.input
        {
            if patch == 0 || height % patch != 0 || width % patch != 0 {
                return Err(Error::arg(format!(
                    "image {height}x{width} is not divisible into {patch}x{patch} patches"
                )));
            }
        }
        if self.input.raw_dim() == 0 {
            return Err(Error::arg("input dimension must be >= 1"));
        }
        let mut prev = self.input.token_dim();
        for l in &self.layers {
            if l.d_in == 0 || l.d_out == 0 {
                return Err(Error::arg(format!("layer {} has a zero dimension", l.name)));
            }
            if l.d_in != prev {
                return Err(Error::shape(format!(
                    "layer {} expects width {} but receives {}",
                    l.name, l.d_in, prev
                )));
            }
            prev = l.d_out;
        }
        let head = self.layers.last().unwrap();
        if head.d_out != self.num_classes {
            return Err(Error::shape(format!(
                "head emits {} logits for {} classes",
                head.d_out, self.num_classes
            )));
        }
        if head.activation != Activation::Identity {
            return Err(Error::arg("head layer must use the identity activation"));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.d_in * l.d_out + if l.has_bias { l.d_out } else { 0 })
            .sum()
    }
}

/// Parameters of a [`ModelSpec`]: `weights[l]` is `d_out x d_in`, `biases[l]`
/// has `d_out` entries (empty for bias-free layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Model {
    /// He-style initialization for rectified layers, `1/d_in` variance otherwise;
    /// biases start at zero.
    pub fn init(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::with_capacity(spec.depth());
        let mut biases = Vec::with_capacity(spec.depth());
        for l in &spec.layers {
            let gain = match l.activation {
                Activation::Identity => 1.0,
                Activation::Relu | Activation::Gelu => 2.0,
            };
            let std = (gain / l.d_in as f64).sqrt();
            weights.push(Matrix::from_fn(l.d_out, l.d_in, |_, _| std * rng.normal()));
            biases.push(if l.has_bias {
                vec![0.0; l.d_out]
            } else {
                Vec::new()
            });
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn from_parts(
        spec: ModelSpec,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        spec.validate()?;
        let m = Self {
            spec,
            weights,
            biases,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.spec.depth() || self.biases.len() != self.spec.depth() {
            return Err(Error::shape(format!(
                "{} weight and {} bias tensors for {} layers",
                self.weights.len(),
                self.biases.len(),
                self.spec.depth()
            )));
        }
        for ((l, w), b) in self.spec.layers.iter().zip(&self.weights).zip(&self.biases) {
            if w.shape() != (l.d_out, l.d_in) {
                return Err(Error::shape(format!(
                    "layer {} weight is {}x{}, expected {}x{}",
                    l.name,
                    w.rows(),
                    w.cols(),
                    l.d_out,
                    l.d_in
                )));
            }
            let want = if l.has_bias { l.d_out } else { 0 };
            if b.len() != want {
                return Err(Error::shape(format!(
                    "layer {} bias has {} entries, expected {}",
                    l.name,
                    b.len(),
                    want
                )));
            }
            if !w.is_finite() || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "layer {} has non-finite parameters",
                    l.name
                )));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.spec.depth()
    }

    /// Class scores for raw inputs, without keeping a trace.
    pub fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(super::forward(self, inputs)?.logits)
    }

    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(inputs)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_are_row_major_tiles() {
        let kind = InputKind::Image {
            height: 4,
            width: 4,
            patch: 2,
        };
        let raw = Matrix::from_fn(1, 16, |_, j| j as f64);
        let t = kind.tokenize(&raw).unwrap();
        assert_eq!(t.shape(), (4, 4));
        assert_eq!(t.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(t.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(t.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn spec_validation() {
        let spec = ModelSpec::mlp(InputKind::Vector { dim: 3 }, &[4, 5], 2, Activation::Relu);
        spec.validate().unwrap();
        assert_eq!(spec.depth(), 3);
        assert_eq!(spec.num_parameters(), 3 * 4 + 4 + 4 * 5 + 5 + 5 * 2 + 2);

        let mut bad = spec.clone();
        bad.layers[1].d_in = 7;
        assert!(bad.validate().is_err());

        let mut bad = spec.clone();
        bad.layers[2].activation = Activation::Relu;
        assert!(bad.validate().is_err());

        let img = ModelSpec::mlp(
            InputKind::Image {
                height: 6,
                width: 6,
                patch: 4,
            },
            &[4],
            2,
            Activation::Relu,
        );
        assert!(img.validate().is_err());
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(x)).abs() < 1e-8);
        }
    }
}
