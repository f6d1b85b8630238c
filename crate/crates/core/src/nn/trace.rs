use super::Model;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Everything a forward pass saw. Token rows are ordered batch-major, then
/// token-major, so row `e·L + t` is token `t` of example `e`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub examples: usize,
    pub tokens: usize,
    /// Input to layer `l` (`N·L x d_in`).
    pub inputs: Vec<Matrix>,
    /// Pre-activation output of layer `l` (`N·L x d_out`).
    pub outputs: Vec<Matrix>,
    /// `N x num_classes`: per-example mean of the head outputs over tokens.
    pub logits: Matrix,
}

#[derive(Debug, Clone)]
pub struct BackwardTrace {
    pub loss: f64,
    /// `∂loss/∂y` for every layer, same layout as [`ForwardTrace::outputs`].
    pub output_grads: Vec<Matrix>,
    /// `∂loss/∂x` for every layer, same layout as [`ForwardTrace::inputs`].
    pub input_grads: Vec<Matrix>,
    pub weight_grads: Vec<Matrix>,
    pub bias_grads: Vec<Vec<f64>>,
}

pub fn forward(model: &Model, inputs: &Matrix) -> Result<ForwardTrace> {
    let kind = model.spec.input;
    let tokens = kind.tokens();
    let mut x = kind.tokenize(inputs)?;
    let n = inputs.rows();

    let mut trace_in = Vec::with_capacity(model.depth());
    let mut trace_out = Vec::with_capacity(model.depth());
    for ((layer, w), b) in model
        .spec
        .layers
        .iter()
        .zip(&model.weights)
        .zip(&model.biases)
    {
        let mut y = x.matmul_t(w)?;
        if !b.is_empty() {
            for i in 0..y.rows() {
                y.row_mut(i).iter_mut().zip(b).for_each(|(v, bj)| *v += bj);
            }
        }
        let act = layer.activation;
        let next = y.map(|v| act.apply(v));
        trace_in.push(x);
        trace_out.push(y);
        x = next;
    }

    let head = trace_out.last().unwrap();
    let classes = head.cols();
    let mut logits = Matrix::zeros(n, classes);
    let inv = 1.0 / tokens as f64;
    for e in 0..n {
        let out = logits.row_mut(e);
        for t in 0..tokens {
            out.iter_mut()
                .zip(head.row(e * tokens + t))
                .for_each(|(o, v)| *o += v * inv);
        }
    }

    Ok(ForwardTrace {
        examples: n,
        tokens,
        inputs: trace_in,
        outputs: trace_out,
        logits,
    })
}

/// Mean softmax cross-entropy over examples and its gradients.
///
/// The loss is averaged over examples; within an example the per-token head
/// outputs are averaged into the logits, so every token's output gradient
/// carries a `1/(N·L)` factor and `∇W = Σ_tokens gᵀx` exactly.
pub fn backward(model: &Model, trace: &ForwardTrace, labels: &[usize]) -> Result<BackwardTrace> {
    let n = trace.examples;
    let tokens = trace.tokens;
    let classes = model.spec.num_classes;
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {} examples",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::arg(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    if trace.inputs.len() != model.depth() {
        return Err(Error::shape("trace does not belong to this model"));
    }

    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(n, classes);
    for e in 0..n {
        let row = trace.logits.row(e);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - row[labels[e]];
        let d = dlogits.row_mut(e);
        for (j, dj) in d.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *dj = (p - if j == labels[e] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    loss /= n as f64;

    let depth = model.depth();
    let mut g = Matrix::zeros(n * tokens, classes);
    let inv = 1.0 / tokens as f64;
    for e in 0..n {
        for t in 0..tokens {
            g.row_mut(e * tokens + t)
                .iter_mut()
                .zip(dlogits.row(e))
                .for_each(|(gi, d)| *gi = d * inv);
        }
    }

    let mut output_grads = vec![Matrix::zeros(0, 0); depth];
    let mut input_grads = vec![Matrix::zeros(0, 0); depth];
    let mut weight_grads = vec![Matrix::zeros(0, 0); depth];
    let mut bias_grads = vec![Vec::new(); depth];
    for l in (0..depth).rev() {
        let x = &trace.inputs[l];
        weight_grads[l] = g.t_matmul(x)?;
        if model.spec.layers[l].has_bias {
            bias_grads[l] = g.column_sums();
        }
        let dx = g.matmul(&model.weights[l])?;
        if l > 0 {
            let act = model.spec.layers[l - 1].activation;
            let y_prev = &trace.outputs[l - 1];
            let mut g_prev = dx.clone();
            g_prev
                .as_mut_slice()
                .iter_mut()
                .zip(y_prev.as_slice())
                .for_each(|(gv, &yv)| *gv *= act.derivative(yv));
            output_grads[l] = std::mem::replace(&mut g, g_prev);
        } else {
            output_grads[l] = std::mem::replace(&mut g, Matrix::zeros(0, 0));
        }
        input_grads[l] = dx;
    }

    Ok(BackwardTrace {
        loss,
        output_grads,
        input_grads,
        weight_grads,
        bias_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;
    use crate::nn::{Activation, InputKind, LayerSpec, ModelSpec};

    fn single(w: Matrix, b: Vec<f64>, act: Activation) -> Model {
        let spec = ModelSpec {
            input: InputKind::Vector { dim: w.cols() },
            layers: vec![LayerSpec {
                name: "head".into(),
                d_in: w.cols(),
                d_out: w.rows(),
                activation: act,
                has_bias: true,
            }],
            num_classes: w.rows(),
        };
        Model::from_parts(spec, vec![w], vec![b]).unwrap()
    }

    #[test]
    fn identity_layer() {
        let m = single(Matrix::identity(2), vec![0.0, 0.0], Activation::Identity);
        let t = forward(&m, &Matrix::from_rows(&[[1.0, 2.0]])).unwrap();
        assert_eq!(t.logits.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn affine_by_hand() {
        let m = single(
            Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]),
            vec![0.0, 1.0],
            Activation::Identity,
        );
        let t = forward(&m, &Matrix::from_rows(&[[2.0, 3.0]])).unwrap();
        assert_eq!(t.outputs[0].row(0), &[2.0, 6.0]);
    }

    #[test]
    fn relu_trace_records_layer_inputs() {
        let spec = ModelSpec::mlp(InputKind::Vector { dim: 2 }, &[2], 2, Activation::Relu);
        let m = Model::from_parts(
            spec,
            vec![Matrix::identity(2), Matrix::identity(2)],
            vec![vec![0.0; 2], vec![0.0; 2]],
        )
        .unwrap();
        let t = forward(&m, &Matrix::from_rows(&[[-1.0, 1.0]])).unwrap();
        assert_eq!(t.inputs[0].row(0), &[-1.0, 1.0]);
        assert_eq!(t.inputs[1].row(0), &[0.0, 1.0]);
    }

    #[test]
    fn two_class_closed_form() {
        let m = single(Matrix::zeros(2, 1), vec![0.0, 0.0], Activation::Identity);
        let t = forward(&m, &Matrix::from_rows(&[[1.0]])).unwrap();
        let b = backward(&m, &t, &[0]).unwrap();
        assert!((b.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(b.output_grads[0].row(0), &[-0.5, 0.5]);
    }

    #[test]
    fn saturated_logits_give_zero_gradient() {
        let m = single(Matrix::identity(2), vec![0.0, 0.0], Activation::Identity);
        let t = forward(&m, &Matrix::from_rows(&[[800.0, -800.0]])).unwrap();
        let b = backward(&m, &t, &[0]).unwrap();
        assert!(b.loss.abs() < 1e-300);
        assert!(b.output_grads[0].max_abs() < 1e-300);
    }

    #[test]
    fn label_out_of_range() {
        let m = single(Matrix::identity(2), vec![0.0, 0.0], Activation::Identity);
        let t = forward(&m, &Matrix::from_rows(&[[1.0, 0.0]])).unwrap();
        assert!(matches!(backward(&m, &t, &[2]), Err(Error::Argument(_))));
    }

    #[test]
    fn input_shape_mismatch() {
        let m = single(Matrix::identity(2), vec![0.0, 0.0], Activation::Identity);
        assert!(matches!(
            forward(&m, &Matrix::zeros(1, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn weight_gradient_is_token_sum_of_outer_products() {
        let spec = ModelSpec::mlp(
            InputKind::Image {
                height: 4,
                width: 4,
                patch: 2,
            },
            &[5, 3],
            3,
            Activation::Gelu,
        );
        let mut rng = Rng::new(4);
        let m = Model::init(spec, &mut rng).unwrap();
        let x = Matrix::from_fn(3, 16, |_, _| rng.normal());
        let t = forward(&m, &x).unwrap();
        let b = backward(&m, &t, &[0, 2, 1]).unwrap();
        for l in 0..m.depth() {
            let mut manual = Matrix::zeros(m.weights[l].rows(), m.weights[l].cols());
            for r in 0..t.inputs[l].rows() {
                for i in 0..manual.rows() {
                    for j in 0..manual.cols() {
                        manual[(i, j)] += b.output_grads[l][(r, i)] * t.inputs[l][(r, j)];
                    }
                }
            }
            assert!(manual.max_abs_diff(&b.weight_grads[l]) <= 1e-10);
        }
    }
}
