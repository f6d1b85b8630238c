//! Transfers a fine-tuned task vector from a 2-layer-deep, 24-wide source to
//! a 4-deep, 40-wide target and compares against zero-padding.

use bico::align::{bico_pipeline, naive_baseline, TransferVariant};
use bico::calib::{generate_task_suite, select_calibration, Budget, Strategy, TaskSuiteConfig};
use bico::linalg::Rng;
use bico::nn::{
    accuracy, train, Activation, InputKind, Model, ModelSpec, OptimizerConfig, OptimizerKind,
};
use bico::taskvec::{apply, extract, NaiveMode};

fn pretrain(spec: ModelSpec, data: &bico::nn::Dataset, seed: u64) -> bico::Result<Model> {
    let pre = Model::init(spec, &mut Rng::new(seed))?;
    let opt = OptimizerConfig {
        kind: OptimizerKind::Adamw,
        learning_rate: 3e-3,
        steps: 600,
        batch_size: 64,
        weight_decay: 0.0,
        warmup_steps: 0,
        ..OptimizerConfig::default()
    };
    Ok(train(&pre, data, &opt, None)?.0)
}

fn main() -> bico::Result<()> {
    let cfg = TaskSuiteConfig {
        noise: 1.5,
        downstream_shift: 3.0,
        ..TaskSuiteConfig::default()
    };
    let suite = generate_task_suite(&cfg, 7)?;
    let input = InputKind::Vector { dim: 16 };
    let a_pre = pretrain(
        ModelSpec::mlp(input, &[24, 24], 4, Activation::Relu),
        &suite.pretrain_a,
        1,
    )?;
    let b_pre = pretrain(
        ModelSpec::mlp(input, &[40, 40, 40, 40], 4, Activation::Relu),
        &suite.pretrain_b,
        2,
    )?;

    let ft_opt = OptimizerConfig {
        kind: OptimizerKind::Adamw,
        learning_rate: 1e-3,
        steps: 200,
        batch_size: 64,
        weight_decay: 0.0,
        warmup_steps: 0,
        ..OptimizerConfig::default()
    };
    let (a_ft, _) = train(&a_pre, &suite.downstream_train, &ft_opt, None)?;

    let calib = select_calibration(
        &suite.downstream_train,
        Strategy::Random,
        Budget::Total(64),
        None,
        0,
    )?;
    let out = bico_pipeline(&a_pre, &a_ft, &b_pre, &calib.data, TransferVariant::Bico)?;
    println!(
        "depth matching (source, target): {:?}",
        out.maps.matching.pairs
    );
    println!(
        "max map orthonormality error {:.2e}",
        out.maps.max_orthonormality_error()
    );

    let padded = apply(
        &b_pre,
        &naive_baseline(&extract(&a_pre, &a_ft)?, &b_pre.spec, NaiveMode::Pad)?,
    )?;
    let test = &suite.downstream_test;
    println!("zero-shot   {:.4}", accuracy(&b_pre, test)?);
    println!("naive pad   {:.4}", accuracy(&padded, test)?);
    println!("transferred {:.4}", accuracy(&out.model, test)?);
    Ok(())
}
