//! Fine-tunes with plain SGD while logging every step, then rebuilds the task
//! vector from the logged gradient and input factors alone.

use bico::calib::{generate_task_suite, TaskSuiteConfig};
use bico::linalg::Rng;
use bico::nn::{
    train, Activation, InputKind, Model, ModelSpec, OptimizerConfig, TrajectoryOptions,
};
use bico::taskvec::{extract, reconstruct_from_trajectory};

fn main() -> bico::Result<()> {
    let suite = generate_task_suite(&TaskSuiteConfig::default(), 1)?;
    let spec = ModelSpec::mlp(
        InputKind::Vector { dim: 16 },
        &[24, 24],
        4,
        Activation::Gelu,
    );
    let pre = Model::init(spec, &mut Rng::new(0))?;

    let opt = OptimizerConfig::sgd(0.05, 100, 32, 7);
    let (ft, log) = train(
        &pre,
        &suite.downstream_train,
        &opt,
        Some(&TrajectoryOptions::every_step()),
    )?;
    let log = log.expect("logging was requested");

    let tau = extract(&pre, &ft)?;
    let rebuilt = reconstruct_from_trajectory(&log)?;
    for (l, (a, b)) in tau.weights.iter().zip(&rebuilt.weights).enumerate() {
        println!(
            "layer {l}: |tau| = {:.4}, max |tau - rebuilt| = {:.2e}",
            a.frobenius_norm(),
            a.max_abs_diff(b)
        );
    }
    Ok(())
}
