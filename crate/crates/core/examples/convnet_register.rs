//! Registers one synthetic pair with the convolutional parameterization:
//! the network weights are the optimization variables, and its output head
//! starts at zero so the first prediction is the identity.
//!
//! ```text
//! cargo run --release --example convnet_register -- [out_dir]
//! ```

use defreg::eval::{landmark_errors, transform_landmarks};
use defreg::model::{load_checkpoint, save_checkpoint, ConvNetConfig};
use defreg::register::{register, RegistrationConfig, RegistrationMode};
use defreg::synth::{generate_case, SynthConfig};

fn main() -> defreg::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "convnet_out".into());
    std::fs::create_dir_all(&out).map_err(|e| defreg::Error::io(&out, e))?;

    let case = generate_case(&SynthConfig {
        dims: [32, 32, 32],
        max_displacement: 3.0,
        seed: 4,
        ..Default::default()
    })?;

    let mut cfg = RegistrationConfig::for_mode(RegistrationMode::Convnet);
    cfg.convnet = ConvNetConfig { levels: 2, base_filters: 4, ..Default::default() };
    cfg.iterations_per_level = 60;
    cfg.learning_rate = 3e-3;
    let report = register(&case.fixed, &case.moving, &cfg)?;

    let trace = &report.levels[0].trace;
    println!("iterations {}  stop {:?}", report.iterations, report.stop_reason);
    println!("loss  first {:.5}  best {:.5}", trace[0].total, report.levels[0].best.total);

    let before = landmark_errors(&case.fixed_landmarks, &case.moving_landmarks)?;
    let mapped = transform_landmarks(&case.fixed_landmarks, &report.field).landmarks;
    let after = landmark_errors(&mapped, &case.moving_landmarks)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mean landmark error {:.3} -> {:.3} mm", mean(&before), mean(&after));

    let net = report.network.as_ref().expect("convnet mode keeps its weights");
    let path = std::path::Path::new(&out).join("weights.ckpt");
    save_checkpoint(net, &path)?;
    let back = load_checkpoint(&path)?;
    println!("checkpoint {} ({} trainable values)", path.display(), back.num_trainable());
    Ok(())
}
