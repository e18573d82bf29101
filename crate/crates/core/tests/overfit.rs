//! Capacity sanity run: the default network memorises 32 desk-scale samples.

use gcnspline_core::dataset::{generate_dataset, load_dataset, GenConfig};
use gcnspline_core::model::{ArchConfig, ModelParams};
use gcnspline_core::train::{
    adam_step, batch_gradients, mean_loss, prepare_samples, AdamState, TrainConfig,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn thirty_two_samples_fit_within_2000_steps() {
    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig {
        samples_per_size: 16,
        ..GenConfig::desk_scale()
    };
    generate_dataset(&gen, dir.path()).unwrap();
    let (_, samples) = load_dataset(dir.path()).unwrap();
    assert_eq!(samples.len(), 32);

    let arch = ArchConfig::default();
    let cfg = TrainConfig::default();
    let prepared = prepare_samples(&samples, &arch).unwrap();
    let mut params = ModelParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(0));
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    let mut steps = 0;
    let mut loss = mean_loss(&params, &arch, &prepared, cfg.w_pad);
    while steps < 2000 && loss >= 1e-3 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (_, grads) = batch_gradients(&params, &arch, &batch, cfg.w_pad, 1.0);
            adam_step(&mut params, &grads, &mut state, &cfg);
            steps += 1;
        }
        if steps % 50 == 0 || steps >= 2000 {
            loss = mean_loss(&params, &arch, &prepared, cfg.w_pad);
        }
    }
    assert!(loss < 1e-3, "train loss {loss:e} after {steps} steps");
}
