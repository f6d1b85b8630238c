//! Representation diagnostics and the compute-cost estimate.

use serde::{Deserialize, Serialize};

use crate::align::AlignmentMaps;
use crate::calib::CalibrationCapture;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::nn::{forward, Model, TrajectoryLog};

/// Linear CKA with column centering. Zero when either centered side vanishes.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::shape(format!(
            "cka needs paired rows, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() < 2 {
        return Err(Error::shape("cka needs at least two rows"));
    }
    let xc = x.center_columns();
    let yc = y.center_columns();
    let xx = xc.t_matmul(&xc)?.frobenius_norm();
    let yy = yc.t_matmul(&yc)?.frobenius_norm();
    if xx == 0.0 || yy == 0.0 {
        return Ok(0.0);
    }
    let yx = yc.t_matmul(&xc)?.frobenius_norm();
    Ok(yx * yx / (xx * yy))
}

/// Mean over rows of the cosine between paired rows; rows where either side
/// has zero norm contribute 0.
pub fn mean_row_cosine(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!(
            "cosine needs equal shapes, got {}x{} and {}x{}",
            x.rows(),
            x.cols(),
            y.rows(),
            y.cols()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::shape("cosine of empty matrices"));
    }
    let total: f64 = (0..x.rows())
        .map(|i| {
            let (a, b) = (x.row(i), y.row(i));
            let n = norm(a) * norm(b);
            if n == 0.0 {
                0.0
            } else {
                dot(a, b) / n
            }
        })
        .sum();
    Ok(total / x.rows() as f64)
}

/// Per-layer mean row cosine between the pre-activation outputs of two
/// equally shaped models on the same inputs.
pub fn layer_output_similarity(
    candidate: &Model,
    reference: &Model,
    inputs: &Matrix,
) -> Result<Vec<f64>> {
    if candidate.depth() != reference.depth() {
        return Err(Error::shape(format!(
            "models have {} and {} layers",
            candidate.depth(),
            reference.depth()
        )));
    }
    let a = forward(candidate, inputs)?;
    let b = forward(reference, inputs)?;
    a.outputs
        .iter()
        .zip(&b.outputs)
        .map(|(ya, yb)| mean_row_cosine(ya, yb))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    BeforeAlign,
    AfterAlign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub target_layer: usize,
    pub source_layer: usize,
    pub stage: Stage,
    pub cka: f64,
    /// Only defined when the compared widths agree.
    pub cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub layers: Vec<LayerSimilarity>,
}

impl SimilarityProfile {
    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &LayerSimilarity> {
        self.layers.iter().filter(move |l| l.stage == stage)
    }

    /// Mean cosine over rows of `stage` that have one.
    pub fn mean_cosine(&self, stage: Stage) -> Option<f64> {
        let v: Vec<f64> = self.stage(stage).filter_map(|l| l.cosine).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_cka(&self, stage: Stage) -> f64 {
        let v: Vec<f64> = self.stage(stage).map(|l| l.cka).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Compares layer inputs of source and target captures before and after
/// mapping the source through `R_in`. The captures must have equal row
/// counts (resample the source first).
pub fn similarity_profile(
    source: &CalibrationCapture,
    target: &CalibrationCapture,
    maps: &AlignmentMaps,
) -> Result<SimilarityProfile> {
    let mut layers = Vec::with_capacity(2 * maps.layers.len());
    for m in &maps.layers {
        let xa = &source.inputs[m.source_layer];
        let xb = &target.inputs[m.target_layer];
        let cosine = |a: &Matrix| -> Result<Option<f64>> {
            if a.cols() == xb.cols() {
                mean_row_cosine(a, xb).map(Some)
            } else {
                Ok(None)
            }
        };
        layers.push(LayerSimilarity {
            target_layer: m.target_layer,
            source_layer: m.source_layer,
            stage: Stage::BeforeAlign,
            cka: linear_cka(xa, xb)?,
            cosine: cosine(xa)?,
        });
        let aligned = xa.matmul(&m.r_in)?;
        layers.push(LayerSimilarity {
            target_layer: m.target_layer,
            source_layer: m.source_layer,
            stage: Stage::AfterAlign,
            cka: linear_cka(&aligned, xb)?,
            cosine: cosine(&aligned)?,
        });
    }
    Ok(SimilarityProfile { layers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPoint {
    pub layer: usize,
    pub step: usize,
    pub delta_direction: f64,
    pub delta_magnitude: f64,
    /// Rows whose pre-trained activation had zero norm, left out of the magnitude.
    pub skipped_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyProfile {
    pub points: Vec<ConsistencyPoint>,
}

/// `(1 − mean cosine, mean relative norm change, rows skipped)`. Rows whose
/// pre-trained activation is zero have no direction to drift from and are
/// left out of both means.
pub fn consistency_metrics(current: &Matrix, pre: &Matrix) -> Result<(f64, f64, usize)> {
    if current.shape() != pre.shape() {
        return Err(Error::shape(format!(
            "activations are {}x{} and {}x{}",
            current.rows(),
            current.cols(),
            pre.rows(),
            pre.cols()
        )));
    }
    let (mut cos, mut mag) = (0.0, 0.0);
    let mut counted = 0usize;
    for i in 0..pre.rows() {
        let (x, x0) = (current.row(i), pre.row(i));
        let n0 = norm(x0);
        if n0 == 0.0 {
            continue;
        }
        let n = norm(x);
        if n > 0.0 {
            cos += dot(x, x0) / (n * n0);
        }
        mag += (n - n0).abs() / n0;
        counted += 1;
    }
    if counted == 0 {
        return Ok((0.0, 0.0, pre.rows()));
    }
    let c = counted as f64;
    Ok((1.0 - cos / c, mag / c, pre.rows() - counted))
}

/// Direction and magnitude drift of every layer's inputs over fine-tuning,
/// relative to the pre-trained activations on the same batch.
pub fn activation_consistency(
    log: &TrajectoryLog,
    pre: &CalibrationCapture,
) -> Result<ConsistencyProfile> {
    consistency_against(log, &pre.inputs)
}

/// As [`activation_consistency`], with the step-0 snapshot as the baseline.
pub fn snapshot_consistency(log: &TrajectoryLog) -> Result<ConsistencyProfile> {
    match log.snapshots.first() {
        Some((0, base)) => consistency_against(log, base),
        _ => Err(Error::Precondition(
            "trajectory has no step-0 snapshot".into(),
        )),
    }
}

fn consistency_against(log: &TrajectoryLog, baseline: &[Matrix]) -> Result<ConsistencyProfile> {
    if log.snapshots.is_empty() {
        return Err(Error::Precondition(
            "trajectory has no activation snapshots; log with snapshot inputs".into(),
        ));
    }
    let mut points = Vec::new();
    for (step, acts) in &log.snapshots {
        if acts.len() != baseline.len() {
            return Err(Error::shape(format!(
                "snapshot has {} layers, baseline {}",
                acts.len(),
                baseline.len()
            )));
        }
        for (layer, (x, x0)) in acts.iter().zip(baseline).enumerate() {
            let (delta_direction, delta_magnitude, skipped_rows) = consistency_metrics(x, x0)?;
            points.push(ConsistencyPoint {
                layer,
                step: *step,
                delta_direction,
                delta_magnitude,
                skipped_rows,
            });
        }
    }
    Ok(ConsistencyProfile { points })
}

/// FLOP estimates with every big-O constant set to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub calib_flops: f64,
    pub alignment_flops: f64,
    pub bico_total: f64,
    pub finetune_flops: f64,
}

/// One forward-backward of each model on calibration data, `L` Procrustes
/// solves and map applications of `d_a x d_b` maps from `M` tokens, versus
/// `ft_steps` steps of fine-tuning the target.
pub fn estimate_cost(
    p_a: u64,
    p_b: u64,
    num_matrices: u64,
    tokens: u64,
    d_a: u64,
    d_b: u64,
    ft_steps: u64,
) -> CostEstimate {
    let (pa, pb, l, m, da, db) = (
        p_a as f64,
        p_b as f64,
        num_matrices as f64,
        tokens as f64,
        d_a as f64,
        d_b as f64,
    );
    let calib_flops = 6.0 * pa + 6.0 * pb;
    let alignment_flops =
        2.0 * l * (m * da * db + da * da * db) + l * (da * da * db + da * db * db);
    CostEstimate {
        calib_flops,
        alignment_flops,
        bico_total: calib_flops + alignment_flops,
        finetune_flops: ft_steps as f64 * 16.0 * pb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian, random_orthogonal, Rng};

    #[test]
    fn cka_self_and_rotation() {
        let mut rng = Rng::new(5);
        let x = gaussian(10, 4, &mut rng);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() <= 1e-12);
        let q = random_orthogonal(4, &mut rng).unwrap();
        assert!((linear_cka(&x, &x.matmul(&q).unwrap()).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cka_constant_is_zero() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        let y = Matrix::from_rows(&[[0.0], [1.0], [3.0]]);
        assert_eq!(linear_cka(&x, &y).unwrap(), 0.0);
        assert!(linear_cka(&x, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn cosine_examples() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(mean_row_cosine(&x, &x).unwrap(), 1.0);
        assert_eq!(mean_row_cosine(&x, &x.scale(-1.0)).unwrap(), -1.0);
        let y = Matrix::from_rows(&[[3.0, 0.0], [1.0, 0.0]]);
        assert_eq!(mean_row_cosine(&x, &y).unwrap(), 0.5);
        let z = Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0]]);
        assert_eq!(mean_row_cosine(&z, &x).unwrap(), 0.5);
    }

    #[test]
    fn consistency_fixed_points() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [0.0, 0.0], [-3.0, 1.0]]);
        let (d, m, s) = consistency_metrics(&x, &x).unwrap();
        assert!(d.abs() <= 1e-15 && m == 0.0 && s == 1);
        let (d, m, _) = consistency_metrics(&x.scale(2.0), &x).unwrap();
        assert!(d.abs() <= 1e-15 && (m - 1.0).abs() <= 1e-12);
        let (d, _, _) = consistency_metrics(&Matrix::zeros(3, 2), &x).unwrap();
        assert_eq!(d, 1.0);
        let y = Matrix::from_rows(&[[1.0, 2.0], [-3.0, 1.0]]);
        let (d, m, _) = consistency_metrics(&y.scale(-1.0), &y).unwrap();
        assert!((d - 2.0).abs() <= 1e-12 && m == 0.0);
    }

    #[test]
    fn cost_examples() {
        let c = estimate_cost(1_000_000, 1_000_000, 0, 0, 0, 0, 0);
        assert_eq!(c.bico_total, 1.2e7);
        let c = estimate_cost(0, 1_000_000, 0, 0, 0, 0, 2000);
        assert_eq!(c.finetune_flops, 3.2e10);
        let c = estimate_cost(0, 0, 0, 0, 0, 0, 0);
        assert_eq!(
            c,
            CostEstimate {
                calib_flops: 0.0,
                alignment_flops: 0.0,
                bico_total: 0.0,
                finetune_flops: 0.0
            }
        );
        let c = estimate_cost(0, 0, 1, 2, 3, 4, 0);
        assert_eq!(c.alignment_flops, 2.0 * (24.0 + 36.0) + (36.0 + 48.0));
    }
}
