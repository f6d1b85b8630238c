//! Writes a checkpoint and walks its bytes: magic, version, manifest, payload.

use bico::linalg::Rng;
use bico::nn::{
    load_checkpoint, model_to_container, save_checkpoint, Activation, InputKind, Model, ModelSpec,
};

fn main() -> bico::Result<()> {
    let spec = ModelSpec::mlp(
        InputKind::Image {
            height: 8,
            width: 8,
            patch: 4,
        },
        &[6],
        3,
        Activation::Gelu,
    );
    let model = Model::init(spec, &mut Rng::new(0))?;
    let bytes = model_to_container(&model).to_bytes();

    let mlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    println!(
        "magic {:?}, version {}",
        std::str::from_utf8(&bytes[..4]).unwrap(),
        bytes[4]
    );
    println!(
        "manifest ({mlen} bytes):\n{}",
        std::str::from_utf8(&bytes[13..13 + mlen]).unwrap()
    );
    println!("payload {} bytes", bytes.len() - 13 - mlen);

    let path = std::env::temp_dir().join("bico_example.bico");
    save_checkpoint(&model, &path)?;
    assert_eq!(load_checkpoint(&path)?, model);
    println!("round trip through {} ok", path.display());
    Ok(())
}
