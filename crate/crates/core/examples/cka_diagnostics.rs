//! Layer-input similarity between two independently pre-trained models,
//! before and after mapping the source through its Procrustes map.

use bico::align::{depth_match, estimate_maps, MapSource};
use bico::calib::{collect, generate_task_suite, TaskSuiteConfig};
use bico::diag::{similarity_profile, Stage};
use bico::linalg::Rng;
use bico::nn::{train, Activation, InputKind, Model, ModelSpec, OptimizerConfig};

fn main() -> bico::Result<()> {
    let suite = generate_task_suite(&TaskSuiteConfig::default(), 2)?;
    let spec = ModelSpec::mlp(
        InputKind::Vector { dim: 16 },
        &[32, 32, 32],
        4,
        Activation::Relu,
    );
    let opt = OptimizerConfig::sgd(0.05, 400, 64, 0);
    let (a, _) = train(
        &Model::init(spec.clone(), &mut Rng::new(1))?,
        &suite.pretrain_a,
        &opt,
        None,
    )?;
    let (b, _) = train(
        &Model::init(spec, &mut Rng::new(2))?,
        &suite.pretrain_b,
        &opt,
        None,
    )?;

    let calib = suite.downstream_train.subset(&(0..256).collect::<Vec<_>>());
    let (cap_a, cap_b) = (collect(&a, &calib, false)?, collect(&b, &calib, false)?);
    let maps = estimate_maps(
        &cap_a,
        &cap_b,
        &depth_match(a.depth(), b.depth())?,
        MapSource::Activations,
    )?;
    let profile = similarity_profile(&cap_a, &cap_b, &maps)?;

    println!("layer  stage   cka     cosine");
    for l in &profile.layers {
        println!(
            "{:>5}  {:<6}  {:.3}   {}",
            l.target_layer,
            if l.stage == Stage::BeforeAlign {
                "before"
            } else {
                "after"
            },
            l.cka,
            l.cosine.map_or("-".into(), |c| format!("{c:.3}"))
        );
    }
    Ok(())
}
