//! Manual throughput probe for sizing experiments; not part of the suite.
//!
//!   cargo test -p worldrep --test bench_speed -- --ignored --nocapture

use std::time::Instant;

use ndarray::Array2;
use worldrep::model::{AdamState, Gradients, Model, ModelConfig};
use worldrep::trainer::adamw_step;

fn time_steps(cfg: ModelConfig, batch: usize, seq: usize, label: &str) {
    let mut model: Model<f32> = Model::new(cfg.clone(), 1).unwrap();
    let tokens = Array2::from_shape_fn((batch, seq), |(b, t)| ((b * 7 + t * 3) % 98) as u32);
    let mut grads = Gradients::zeros(&cfg);
    let mut state = AdamState::zeros_like(&model.params);
    for _ in 0..3 {
        model.loss_and_grad(&tokens, &mut grads).unwrap();
    }
    let start = Instant::now();
    let n = 20;
    for _ in 0..n {
        model.loss_and_grad(&tokens, &mut grads).unwrap();
        adamw_step(&mut model, &grads, &mut state, 3e-4, 0.01, 0.9, 0.999, 1e-8);
    }
    let dt = start.elapsed().as_secs_f64() / n as f64;
    println!("{label}: {:.1} ms/step ({:.0} rows/s)", dt * 1000.0, batch as f64 / dt);
}

#[test]
#[ignore]
fn step_throughput() {
    time_steps(
        ModelConfig {
            hidden: 64,
            heads: 4,
            layers: 2,
            intermediate: 256,
            vocab: 101,
            max_seq: 32,
            init_std: 0.1,
            rope_theta: 10_000.0,
            rms_eps: 1e-6,
        },
        128,
        26,
        "hidden64/2L batch128 T26",
    );
    time_steps(ModelConfig::full_scale(), 128, 40, "full-scale batch128 T40");
}
