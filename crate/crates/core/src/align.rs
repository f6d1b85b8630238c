//! Bilinear coordinate alignment.
//!
//! For every target layer `j` matched to source layer `i(j)`, two orthogonal
//! Procrustes maps are fitted on calibration data:
//!
//! - `R_in` (`d_in,A x d_in,B`) aligns the layer inputs `X̄_A · R ≈ X̄_B`,
//! - `R_out` (`d_out,A x d_out,B`) aligns the output gradients `Ḡ_A · R ≈ Ḡ_B`,
//!
//! and the source update moves across as `τ̂ = R_outᵀ · τ · R_in`. Each map is
//! `U·Vᵀ` from the thin SVD of the cross-covariance, so it has orthonormal rows
//! when the source side is narrower (expansion) and orthonormal columns when it
//! is wider (reduction).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calib::{collect, CalibrationCapture};
use crate::container::{decode_field, Container, Tensor};
use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::nn::{spec_fingerprint, Dataset, Model, ModelSpec};
use crate::taskvec::{apply, extract, naive_transfer, NaiveMode, TaskVector};

/// Singular values at or below this fraction of the largest count as zero
/// when reporting the numerical rank of a cross-covariance.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `d_A <= d_B`: `R·Rᵀ = I`.
    Expansion,
    /// `d_A > d_B`: `Rᵀ·R = I`.
    Reduction,
}

impl Direction {
    pub fn of(d_source: usize, d_target: usize) -> Self {
        if d_source <= d_target {
            Direction::Expansion
        } else {
            Direction::Reduction
        }
    }

    /// Max-abs deviation of `map` from the orthonormality its direction requires.
    pub fn orthonormality_error(self, map: &Matrix) -> f64 {
        match self {
            Direction::Expansion => map.row_orthonormality_error(),
            Direction::Reduction => map.column_orthonormality_error(),
        }
    }
}

/// A fitted Procrustes map with the rank of the cross-covariance it came from.
#[derive(Debug, Clone)]
pub struct ProcrustesFit {
    pub map: Matrix,
    pub direction: Direction,
    /// Numerical rank of `sourceᵀ·target` at [`RANK_TOL`].
    pub rank: usize,
}

impl ProcrustesFit {
    /// Full rank means the map is unique.
    pub fn is_full_rank(&self) -> bool {
        self.rank == self.map.rows().min(self.map.cols())
    }
}

/// `argmin_R ‖source·R − target‖_F` over semi-orthogonal `R`, i.e. `U·Vᵀ` for
/// `sourceᵀ·target = U·Σ·Vᵀ`. No centering, no scaling.
pub fn procrustes(source: &Matrix, target: &Matrix) -> Result<ProcrustesFit> {
    if source.rows() != target.rows() {
        return Err(Error::shape(format!(
            "procrustes needs paired rows, got {} source and {} target",
            source.rows(),
            target.rows()
        )));
    }
    if source.rows() == 0 {
        return Err(Error::shape("procrustes needs at least one row"));
    }
    let cross = source.t_matmul(target)?;
    let dec = svd(&cross)?;
    Ok(ProcrustesFit {
        map: dec.u.matmul_t(&dec.v)?,
        direction: Direction::of(source.cols(), target.cols()),
        rank: dec.rank(RANK_TOL),
    })
}

/// Pairing of every target layer with a source layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthMatching {
    pub source_depth: usize,
    pub target_depth: usize,
    /// `(source_layer, target_layer)` for target layers `0..target_depth`.
    pub pairs: Vec<(usize, usize)>,
}

impl DepthMatching {
    pub fn source_for(&self, target_layer: usize) -> usize {
        self.pairs[target_layer].0
    }

    pub fn check_invariants(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Precondition(format!("depth matching: {m}")));
        if self.pairs.len() != self.target_depth {
            return bad("one pair per target layer");
        }
        for (j, &(i, jj)) in self.pairs.iter().enumerate() {
            if jj != j || i >= self.source_depth {
                return bad("pair out of range");
            }
        }
        if self.pairs[0].0 != 0 || self.pairs.last().unwrap().0 != self.source_depth - 1 {
            return bad("endpoints must match");
        }
        if self.pairs.windows(2).any(|w| w[1].0 < w[0].0) {
            return bad("source index must be nondecreasing");
        }
        Ok(())
    }
}

/// `i(j) = round(j·(D_A−1)/(D_B−1))`, halves rounded up.
pub fn depth_match(source_depth: usize, target_depth: usize) -> Result<DepthMatching> {
    if source_depth == 0 || target_depth == 0 {
        return Err(Error::arg("depths must be >= 1"));
    }
    if target_depth == 1 && source_depth != 1 {
        return Err(Error::arg(format!(
            "a single target layer cannot cover {source_depth} source layers"
        )));
    }
    let pairs = (0..target_depth)
        .map(|j| {
            if target_depth == 1 {
                return (0, 0);
            }
            let num = 2 * j * (source_depth - 1) + (target_depth - 1);
            (num / (2 * (target_depth - 1)), j)
        })
        .collect();
    Ok(DepthMatching {
        source_depth,
        target_depth,
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    /// `R_in` from input activations.
    Activations,
    /// `R_in` from input-side gradients `∂loss/∂x`.
    InputGradients,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Input,
    Output,
}

/// Emitted when a cross-covariance is rank deficient, so the map is not unique.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankWarning {
    pub target_layer: usize,
    pub side: Side,
    pub rank: usize,
    pub full_rank: usize,
}

#[derive(Debug, Clone)]
pub struct LayerMaps {
    pub source_layer: usize,
    pub target_layer: usize,
    pub r_in: Matrix,
    pub r_out: Matrix,
    pub in_direction: Direction,
    pub out_direction: Direction,
}

#[derive(Debug, Clone)]
pub struct AlignmentMaps {
    pub matching: DepthMatching,
    pub layers: Vec<LayerMaps>,
    pub warnings: Vec<RankWarning>,
}

impl AlignmentMaps {
    /// Largest orthonormality defect over every map.
    pub fn max_orthonormality_error(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.in_direction
                    .orthonormality_error(&l.r_in)
                    .max(l.out_direction.orthonormality_error(&l.r_out))
            })
            .fold(0.0, f64::max)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("maps")
            .with_field(
                "matching",
                serde_json::to_value(&self.matching).expect("matching serializes"),
            )
            .with_field(
                "warnings",
                serde_json::to_value(&self.warnings).expect("warnings serialize"),
            );
        for l in &self.layers {
            c.push(Tensor::matrix(
                format!("layer{}.r_in", l.target_layer),
                &l.r_in,
            ));
            c.push(Tensor::matrix(
                format!("layer{}.r_out", l.target_layer),
                &l.r_out,
            ));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("maps")?;
        let matching: DepthMatching = decode_field(c, "matching")?;
        let warnings: Vec<RankWarning> = decode_field(c, "warnings")?;
        let layers = matching
            .pairs
            .iter()
            .map(|&(i, j)| {
                let r_in = c.matrix(&format!("layer{j}.r_in"))?;
                let r_out = c.matrix(&format!("layer{j}.r_out"))?;
                Ok(LayerMaps {
                    source_layer: i,
                    target_layer: j,
                    in_direction: Direction::of(r_in.rows(), r_in.cols()),
                    out_direction: Direction::of(r_out.rows(), r_out.cols()),
                    r_in,
                    r_out,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            matching,
            layers,
            warnings,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Fits `R_in` and `R_out` for every matched pair. The target's last layer is
/// the classifier head: its `R_out` is the identity because both models share
/// the label space.
pub fn estimate_maps(
    source: &CalibrationCapture,
    target: &CalibrationCapture,
    matching: &DepthMatching,
    map_source: MapSource,
) -> Result<AlignmentMaps> {
    matching.check_invariants()?;
    if source.rows() != target.rows() {
        return Err(Error::shape(format!(
            "captures have {} and {} rows; resample the source to the target's token count first",
            source.rows(),
            target.rows()
        )));
    }
    if source.depth() != matching.source_depth || target.depth() != matching.target_depth {
        return Err(Error::shape("captures do not match the depth matching"));
    }
    let (src_in, tgt_in) = match map_source {
        MapSource::Activations => (&source.inputs, &target.inputs),
        MapSource::InputGradients => match (&source.input_grads, &target.input_grads) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Precondition(
                    "gradient-based input maps need captures with input gradients".into(),
                ))
            }
        },
    };
    let head = matching.target_depth - 1;

    let fitted = matching
        .pairs
        .par_iter()
        .map(|&(i, j)| -> Result<(LayerMaps, Vec<RankWarning>)> {
            let mut warnings = Vec::new();
            let fit_in = procrustes(&src_in[i], &tgt_in[j])?;
            if !fit_in.is_full_rank() {
                warnings.push(RankWarning {
                    target_layer: j,
                    side: Side::Input,
                    rank: fit_in.rank,
                    full_rank: fit_in.map.rows().min(fit_in.map.cols()),
                });
            }
            let (r_out, out_direction) = if j == head {
                let (da, db) = (source.output_grads[i].cols(), target.output_grads[j].cols());
                if da != db {
                    return Err(Error::shape(format!(
                        "classifier heads emit {da} and {db} classes"
                    )));
                }
                (Matrix::identity(db), Direction::Expansion)
            } else {
                let fit_out = procrustes(&source.output_grads[i], &target.output_grads[j])?;
                if !fit_out.is_full_rank() {
                    warnings.push(RankWarning {
                        target_layer: j,
                        side: Side::Output,
                        rank: fit_out.rank,
                        full_rank: fit_out.map.rows().min(fit_out.map.cols()),
                    });
                }
                (fit_out.map, fit_out.direction)
            };
            Ok((
                LayerMaps {
                    source_layer: i,
                    target_layer: j,
                    r_in: fit_in.map,
                    r_out,
                    in_direction: fit_in.direction,
                    out_direction,
                },
                warnings,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut layers = Vec::with_capacity(fitted.len());
    let mut warnings = Vec::new();
    for (l, w) in fitted {
        layers.push(l);
        warnings.extend(w);
    }
    Ok(AlignmentMaps {
        matching: matching.clone(),
        layers,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferVariant {
    /// Both maps: `R_outᵀ · τ · R_in`.
    Bico,
    /// `τ · R_in` only; output widths must agree.
    InputOnly,
    /// `R_outᵀ · τ` only; input widths must agree.
    OutputOnly,
    /// Both maps, with `R_in` fitted on input gradients instead of activations.
    GradientOnly,
}

impl TransferVariant {
    pub fn map_source(self) -> MapSource {
        match self {
            TransferVariant::GradientOnly => MapSource::InputGradients,
            _ => MapSource::Activations,
        }
    }
}

/// Moves `tau` (source coordinates) into the target's coordinates. A source
/// layer matched to several target layers is reused for each of them.
pub fn transfer(
    tau: &TaskVector,
    maps: &AlignmentMaps,
    target: &ModelSpec,
    variant: TransferVariant,
) -> Result<TaskVector> {
    if maps.layers.len() != target.depth() {
        return Err(Error::shape(format!(
            "{} maps for a {}-layer target",
            maps.layers.len(),
            target.depth()
        )));
    }
    if tau.depth() != maps.matching.source_depth {
        return Err(Error::shape(format!(
            "task vector has {} layers, matching expects {}",
            tau.depth(),
            maps.matching.source_depth
        )));
    }
    let layers: Vec<(Matrix, Vec<f64>)> = maps
        .layers
        .par_iter()
        .map(|m| -> Result<(Matrix, Vec<f64>)> {
            let dw = &tau.weights[m.source_layer];
            let db = &tau.biases[m.source_layer];
            let spec = &target.layers[m.target_layer];
            if dw.shape() != (m.r_out.rows(), m.r_in.rows()) {
                return Err(Error::shape(format!(
                    "layer {}: delta {}x{} does not fit maps from {}x{}",
                    spec.name,
                    dw.rows(),
                    dw.cols(),
                    m.r_out.rows(),
                    m.r_in.rows()
                )));
            }
            let map_bias = |b: &[f64]| -> Result<Vec<f64>> {
                if b.is_empty() {
                    return Ok(vec![0.0; m.r_out.cols()]);
                }
                let row = Matrix::from_vec(1, b.len(), b.to_vec())?;
                Ok(row.matmul(&m.r_out)?.into_vec())
            };
            let (w, b) = match variant {
                TransferVariant::Bico | TransferVariant::GradientOnly => {
                    let w = m.r_out.t_matmul(&dw.matmul(&m.r_in)?)?;
                    (w, map_bias(db)?)
                }
                TransferVariant::InputOnly => {
                    if dw.rows() != spec.d_out {
                        return Err(Error::shape(format!(
                            "input_only needs equal output widths, layer {} has {} source and {} target",
                            spec.name,
                            dw.rows(),
                            spec.d_out
                        )));
                    }
                    let b = if db.is_empty() { vec![0.0; spec.d_out] } else { db.clone() };
                    (dw.matmul(&m.r_in)?, b)
                }
                TransferVariant::OutputOnly => {
                    if dw.cols() != spec.d_in {
                        return Err(Error::shape(format!(
                            "output_only needs equal input widths, layer {} has {} source and {} target",
                            spec.name,
                            dw.cols(),
                            spec.d_in
                        )));
                    }
                    (m.r_out.t_matmul(dw)?, map_bias(db)?)
                }
            };
            let b = if spec.has_bias { b } else { Vec::new() };
            Ok((w, b))
        })
        .collect::<Result<Vec<_>>>()?;

    let (weights, biases) = layers.into_iter().unzip();
    let out = TaskVector {
        weights,
        biases,
        fingerprint: spec_fingerprint(target),
    };
    out.check_shapes(target)?;
    Ok(out)
}

/// Source task vector re-indexed by a depth matching, one entry per target layer.
pub fn reindex(tau: &TaskVector, matching: &DepthMatching) -> TaskVector {
    TaskVector {
        weights: matching
            .pairs
            .iter()
            .map(|&(i, _)| tau.weights[i].clone())
            .collect(),
        biases: matching
            .pairs
            .iter()
            .map(|&(i, _)| tau.biases[i].clone())
            .collect(),
        fingerprint: tau.fingerprint.clone(),
    }
}

/// Depth-matched zero-pad / crop baseline.
pub fn naive_baseline(tau: &TaskVector, target: &ModelSpec, mode: NaiveMode) -> Result<TaskVector> {
    let matching = depth_match(tau.depth(), target.depth())?;
    naive_transfer(&reindex(tau, &matching), target, mode)
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub model: Model,
    pub maps: AlignmentMaps,
    pub task_vector: TaskVector,
}

/// Full transfer: extract the source task vector, capture both pre-trained
/// models on the calibration batch, match depths, fit maps, map the update,
/// and add it to the target.
pub fn bico_pipeline(
    source_pre: &Model,
    source_ft: &Model,
    target_pre: &Model,
    calib: &Dataset,
    variant: TransferVariant,
) -> Result<TransferOutcome> {
    if source_pre.spec.num_classes != target_pre.spec.num_classes {
        return Err(Error::shape(format!(
            "source predicts {} classes, target {}",
            source_pre.spec.num_classes, target_pre.spec.num_classes
        )));
    }
    let tau = extract(source_pre, source_ft)?;
    let grads = variant.map_source() == MapSource::InputGradients;
    let cap_b = collect(target_pre, calib, grads)?;
    let cap_a = collect(source_pre, calib, grads)?.resampled(cap_b.tokens)?;
    let matching = depth_match(source_pre.depth(), target_pre.depth())?;
    let maps = estimate_maps(&cap_a, &cap_b, &matching, variant.map_source())?;
    let tau_hat = transfer(&tau, &maps, &target_pre.spec, variant)?;
    let model = apply(target_pre, &tau_hat)?;
    Ok(TransferOutcome {
        model,
        maps,
        task_vector: tau_hat,
    })
}

/// Manifest value naming a transfer variant, for reports.
pub fn variant_name(v: TransferVariant) -> Value {
    serde_json::to_value(v).expect("variant serializes")
}
