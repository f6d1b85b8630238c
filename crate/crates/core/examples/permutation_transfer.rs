//! A target that is a hidden-unit permutation of the source: the fitted maps
//! are the permutation and the transferred model matches the fine-tuned one.

use bico::align::{bico_pipeline, TransferVariant};
use bico::calib::{generate_task_suite, TaskSuiteConfig};
use bico::linalg::{permutation_matrix, Rng};
use bico::nn::{accuracy, train, Activation, InputKind, Model, ModelSpec, OptimizerConfig};

fn main() -> bico::Result<()> {
    let suite = generate_task_suite(&TaskSuiteConfig::default(), 3)?;
    let spec = ModelSpec::mlp(InputKind::Vector { dim: 16 }, &[20], 4, Activation::Relu);
    let mut rng = Rng::new(5);
    let a_pre = Model::init(spec, &mut rng)?;
    let (a_ft, _) = train(
        &a_pre,
        &suite.downstream_train,
        &OptimizerConfig::sgd(0.05, 150, 32, 1),
        None,
    )?;

    // hidden rows map as h' = h P: W0' = Pᵀ W0, b0' = b0 P, W1' = W1 P
    let perm = rng.permutation(20);
    let p = permutation_matrix(&perm);
    let mut b_pre = a_pre.clone();
    b_pre.weights[0] = p.transpose().matmul(&a_pre.weights[0])?;
    for (i, &j) in perm.iter().enumerate() {
        b_pre.biases[0][j] = a_pre.biases[0][i];
    }
    b_pre.weights[1] = a_pre.weights[1].matmul(&p)?;
    // sanity: the permuted model computes the same function
    assert!(
        b_pre
            .logits(&suite.downstream_test.inputs)?
            .max_abs_diff(&a_pre.logits(&suite.downstream_test.inputs)?)
            < 1e-9
    );

    let calib = suite.downstream_train.subset(&(0..128).collect::<Vec<_>>());
    let out = bico_pipeline(&a_pre, &a_ft, &b_pre, &calib, TransferVariant::Bico)?;
    let r = &out.maps.layers[0].r_out;
    println!("|R_out - P|max = {:.2e}", r.max_abs_diff(&p));

    let test = &suite.downstream_test;
    println!("source fine-tuned accuracy {:.4}", accuracy(&a_ft, test)?);
    println!("target zero-shot accuracy  {:.4}", accuracy(&b_pre, test)?);
    println!(
        "target transferred         {:.4}",
        accuracy(&out.model, test)?
    );
    Ok(())
}
