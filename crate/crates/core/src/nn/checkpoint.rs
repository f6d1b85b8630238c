use std::path::Path;

use serde_json::Value;

use super::{LayerFactors, LoggedStep, Model, ModelSpec, TrajectoryLog};
use crate::container::{decode_field, Container, Tensor};
use crate::error::Result;

pub fn model_to_container(model: &Model) -> Container {
    let mut c = Container::new("model").with_field(
        "spec",
        serde_json::to_value(&model.spec).expect("spec serializes"),
    );
    for ((l, w), b) in model
        .spec
        .layers
        .iter()
        .zip(&model.weights)
        .zip(&model.biases)
    {
        c.push(Tensor::matrix(format!("{}.weight", l.name), w));
        if l.has_bias {
            c.push(Tensor::vector(format!("{}.bias", l.name), b));
        }
    }
    c
}

pub fn model_from_container(c: &Container) -> Result<Model> {
    c.expect_kind("model")?;
    let spec: ModelSpec = decode_field(c, "spec")?;
    let mut weights = Vec::with_capacity(spec.depth());
    let mut biases = Vec::with_capacity(spec.depth());
    for l in &spec.layers {
        weights.push(c.matrix(&format!("{}.weight", l.name))?);
        biases.push(if l.has_bias {
            c.vector(&format!("{}.bias", l.name))?
        } else {
            Vec::new()
        });
    }
    Model::from_parts(spec, weights, biases)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    model_to_container(model).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    model_from_container(&Container::load(path)?)
}

/// JSON value of a spec, for embedding in other manifests.
pub(crate) fn spec_value(spec: &ModelSpec) -> Value {
    serde_json::to_value(spec).expect("spec serializes")
}

/// Hex SHA-256 of the canonical JSON encoding of `spec`.
pub fn spec_fingerprint(spec: &ModelSpec) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(&spec_value(spec)).expect("spec serializes");
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(serde::Serialize, serde::Deserialize)]
struct StepMeta {
    step: usize,
    learning_rate: f64,
    factors: bool,
}

/// Trajectory container: per logged step its learning rate and, when
/// recorded, `step{t}.layer{l}.grads` / `.inputs`; snapshots as
/// `snapshot{t}.layer{l}`.
pub fn trajectory_to_container(log: &TrajectoryLog) -> Container {
    let steps: Vec<StepMeta> = log
        .steps
        .iter()
        .map(|s| StepMeta {
            step: s.step,
            learning_rate: s.learning_rate,
            factors: !s.factors.is_empty(),
        })
        .collect();
    let snapshot_steps: Vec<usize> = log.snapshots.iter().map(|(s, _)| *s).collect();
    let mut c = Container::new("trajectory")
        .with_field("spec", spec_value(&log.spec))
        .with_field(
            "optimizer",
            serde_json::to_value(log.optimizer).expect("kind serializes"),
        )
        .with_field("weight_decay", log.weight_decay.into())
        .with_field("stride", log.stride.into())
        .with_field("total_steps", log.total_steps.into())
        .with_field(
            "steps",
            serde_json::to_value(steps).expect("steps serialize"),
        )
        .with_field(
            "snapshot_steps",
            serde_json::to_value(snapshot_steps).expect("steps serialize"),
        );
    for s in &log.steps {
        for (l, f) in s.factors.iter().enumerate() {
            c.push(Tensor::matrix(
                format!("step{}.layer{l}.grads", s.step),
                &f.grads,
            ));
            c.push(Tensor::matrix(
                format!("step{}.layer{l}.inputs", s.step),
                &f.inputs,
            ));
        }
    }
    for (t, acts) in &log.snapshots {
        for (l, x) in acts.iter().enumerate() {
            c.push(Tensor::matrix(format!("snapshot{t}.layer{l}"), x));
        }
    }
    c
}

pub fn trajectory_from_container(c: &Container) -> Result<TrajectoryLog> {
    c.expect_kind("trajectory")?;
    let spec: ModelSpec = decode_field(c, "spec")?;
    let depth = spec.depth();
    let metas: Vec<StepMeta> = decode_field(c, "steps")?;
    let snapshot_steps: Vec<usize> = decode_field(c, "snapshot_steps")?;
    let steps = metas
        .into_iter()
        .map(|m| {
            let factors = if m.factors {
                (0..depth)
                    .map(|l| {
                        Ok(LayerFactors {
                            grads: c.matrix(&format!("step{}.layer{l}.grads", m.step))?,
                            inputs: c.matrix(&format!("step{}.layer{l}.inputs", m.step))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            Ok(LoggedStep {
                step: m.step,
                learning_rate: m.learning_rate,
                factors,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let snapshots = snapshot_steps
        .into_iter()
        .map(|t| {
            let acts = (0..depth)
                .map(|l| c.matrix(&format!("snapshot{t}.layer{l}")))
                .collect::<Result<Vec<_>>>()?;
            Ok((t, acts))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryLog {
        optimizer: decode_field(c, "optimizer")?,
        weight_decay: decode_field(c, "weight_decay")?,
        stride: decode_field(c, "stride")?,
        total_steps: decode_field(c, "total_steps")?,
        spec,
        steps,
        snapshots,
    })
}

pub fn save_trajectory(log: &TrajectoryLog, path: impl AsRef<Path>) -> Result<()> {
    trajectory_to_container(log).save(path)
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<TrajectoryLog> {
    trajectory_from_container(&Container::load(path)?)
}
