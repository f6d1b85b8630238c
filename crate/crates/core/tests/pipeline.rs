use bico::align::{bico_pipeline, TransferVariant};
use bico::calib::{generate_task_suite, TaskSuiteConfig};
use bico::linalg::Rng;
use bico::nn::{
    accuracy, train, Activation, InputKind, Model, ModelSpec, OptimizerConfig, OptimizerKind,
    TrajectoryOptions,
};
use bico::taskvec::{extract, reconstruct_from_trajectory};
use bico::Error;

fn suite() -> bico::calib::TaskSuite {
    let cfg = TaskSuiteConfig {
        pretrain_size: 200,
        train_size: 200,
        test_size: 200,
        ..TaskSuiteConfig::default()
    };
    generate_task_suite(&cfg, 11).unwrap()
}

fn spec(hidden: &[usize]) -> ModelSpec {
    ModelSpec::mlp(InputKind::Vector { dim: 16 }, hidden, 4, Activation::Relu)
}

#[test]
fn self_transfer_reproduces_the_finetuned_model() {
    let s = suite();
    let pre = Model::init(spec(&[12, 12]), &mut Rng::new(0)).unwrap();
    let (ft, _) = train(
        &pre,
        &s.downstream_train,
        &OptimizerConfig::sgd(0.05, 50, 32, 1),
        None,
    )
    .unwrap();
    let calib = s.downstream_train.subset(&(0..64).collect::<Vec<_>>());
    let out = bico_pipeline(&pre, &ft, &pre, &calib, TransferVariant::Bico).unwrap();
    for (a, b) in out.model.weights.iter().zip(&ft.weights) {
        assert!(a.max_abs_diff(b) <= 1e-6);
    }
    for (a, b) in out.model.biases.iter().zip(&ft.biases) {
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6));
    }
    assert!(out.maps.warnings.is_empty());
}

#[test]
fn zero_task_vector_leaves_target_untouched() {
    let s = suite();
    let a = Model::init(spec(&[8]), &mut Rng::new(0)).unwrap();
    let b = Model::init(spec(&[12, 10]), &mut Rng::new(1)).unwrap();
    let calib = s.downstream_train.subset(&(0..32).collect::<Vec<_>>());
    for v in [TransferVariant::Bico, TransferVariant::GradientOnly] {
        let out = bico_pipeline(&a, &a, &b, &calib, v).unwrap();
        assert_eq!(out.model, b);
        assert!(out.task_vector.is_zero());
    }
}

#[test]
fn mismatched_classes_are_rejected() {
    let s = suite();
    let a = Model::init(spec(&[8]), &mut Rng::new(0)).unwrap();
    let b = Model::init(
        ModelSpec::mlp(InputKind::Vector { dim: 16 }, &[8], 3, Activation::Relu),
        &mut Rng::new(1),
    )
    .unwrap();
    assert!(bico_pipeline(&a, &a, &b, &s.downstream_train, TransferVariant::Bico).is_err());
}

#[test]
fn trajectory_reconstruction_needs_plain_sgd() {
    let s = suite();
    let pre = Model::init(spec(&[6]), &mut Rng::new(2)).unwrap();
    let logging = TrajectoryOptions::every_step();

    let sgd = OptimizerConfig::sgd(0.05, 30, 16, 3);
    let (ft, log) = train(&pre, &s.downstream_train, &sgd, Some(&logging)).unwrap();
    let rebuilt = reconstruct_from_trajectory(&log.unwrap()).unwrap();
    let tau = extract(&pre, &ft).unwrap();
    for (a, b) in rebuilt.weights.iter().zip(&tau.weights) {
        assert!(a.max_abs_diff(b) <= 1e-10);
    }

    let adamw = OptimizerConfig {
        kind: OptimizerKind::Adamw,
        warmup_steps: 0,
        ..OptimizerConfig::sgd(1e-3, 10, 16, 3)
    };
    let (_, log) = train(&pre, &s.downstream_train, &adamw, Some(&logging)).unwrap();
    assert!(matches!(
        reconstruct_from_trajectory(&log.unwrap()),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn finetuning_helps_on_the_downstream_task() {
    let s = suite();
    let pre = Model::init(spec(&[16]), &mut Rng::new(4)).unwrap();
    let (ft, _) = train(
        &pre,
        &s.downstream_train,
        &OptimizerConfig::sgd(0.1, 200, 32, 5),
        None,
    )
    .unwrap();
    assert!(
        accuracy(&ft, &s.downstream_test).unwrap() > accuracy(&pre, &s.downstream_test).unwrap()
    );
}
