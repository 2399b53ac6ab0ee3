//! Quick wall-clock probe of one training step at full size.
use f2m_core::datamodel::Taxonomy;
use f2m_core::networks::NetConfig;
use f2m_core::synthdata::{synth_dataset, SynthConfig};
use f2m_core::training::{train_step, ModelState, TrainConfig};
use std::time::Instant;

fn main() {
    let taxonomy = Taxonomy::default();
    let data = synth_dataset(
        &SynthConfig {
            seed: 1,
            per_category_count: 8,
            ..Default::default()
        },
        &taxonomy,
    )
    .unwrap();
    let mut state: ModelState<f32> =
        ModelState::init(taxonomy, NetConfig::paper(3, 3), 1).unwrap();
    let mut cfg = TrainConfig::desk_scale();
    cfg.batch_size = 64;
    let refs: Vec<_> = data.iter().take(64).collect();

    // warmup
    train_step(&mut state, &refs, &cfg).unwrap();
    let t0 = Instant::now();
    let n = 3;
    for _ in 0..n {
        train_step(&mut state, &refs, &cfg).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("batch-64 step: {:.2} s  ({:.1} s per 540-image epoch)", dt, dt * 540.0 / 64.0);
}
