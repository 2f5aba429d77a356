//! Public-API round trips across modules: phantom to file and back,
//! preprocessing, blocks, a short training run, checkpoints and whole-volume
//! inference scored by the metrics.

use ctsynth_core::cgan::{
    infer_volume, load_checkpoint, load_generator, save_checkpoint, DiscriminatorConfig, GeneratorConfig, TrainConfig, Trainer,
};
use ctsynth_core::degrade::{build_training_set_with, ConditionKind, TrainingSetOptions, DEFAULT_PEAK};
use ctsynth_core::metrics::{evaluate_pair, EvalOptions};
use ctsynth_core::synth::{generate_dataset, generate_phantom, PhantomSpec};
use ctsynth_core::volume::{denormalize_and_unequalize, load_volume, partition, preprocess, save_volume, stitch, Volume, DEFAULT_PAD};

fn small_trainer(epochs: usize) -> Trainer<f64> {
    let g = GeneratorConfig { base_channels: 2, ..GeneratorConfig::for_edge(8) };
    let d = DiscriminatorConfig { base_channels: 2, ..DiscriminatorConfig::for_edge(8) };
    let cfg = TrainConfig { epochs, batch_size: 4, seed: 3, checkpoint_every: 0, ..Default::default() };
    Trainer::new(g, d, cfg).unwrap()
}

#[test]
fn phantom_file_preprocess_blocks_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let raw = generate_phantom(&PhantomSpec::new([20, 18, 16], 5)).unwrap();
    let path = dir.path().join("p.ctv");
    save_volume(&raw, &path).unwrap();
    let loaded = load_volume(&path).unwrap();
    assert_eq!(loaded.dims(), raw.dims());

    let (norm, params, bounds) = preprocess(&loaded).unwrap();
    let (grid, blocks) = partition(&norm, 8, DEFAULT_PAD).unwrap();
    let back = stitch(&grid, &blocks).unwrap();
    assert_eq!(back.data(), norm.data());

    let restored = denormalize_and_unequalize(&back, &params, bounds).unwrap();
    let (lo, hi) = loaded.min_max();
    let bin = (hi - lo) / params.bins as f64;
    let worst = restored.data().iter().zip(loaded.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= bin, "worst {worst} vs bin width {bin}");
}

#[test]
fn train_checkpoint_and_infer_volume() {
    let dir = tempfile::tempdir().unwrap();
    let vols: Vec<Volume> = generate_dataset(2, [16, 16, 16], 8).unwrap().iter().map(|v| preprocess(v).unwrap().0).collect();
    let opts = TrainingSetOptions { edge: 8, ..TrainingSetOptions::new(ConditionKind::Noisy, 2) };
    let keep = |k: &ctsynth_core::degrade::PairKey| k.transform == 0;
    let pairs = build_training_set_with(&vols, &opts, Some(&keep)).unwrap();
    assert_eq!(pairs.len(), 16);

    let mut t = small_trainer(2);
    t.train(&pairs, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(t.history.len(), 2);
    assert!(t.history.iter().all(|e| e.g_loss.is_finite() && e.d_loss.is_finite()));

    let ckpt = dir.path().join("again.ckpt");
    save_checkpoint(&t, &ckpt).unwrap();
    let reloaded: Trainer<f64> = load_checkpoint(&ckpt).unwrap();
    assert_eq!(reloaded.gen.params, t.gen.params);
    assert_eq!(reloaded.epoch, t.epoch);

    let gen = load_generator::<f64>(&ckpt).unwrap();
    let raw = generate_dataset(1, [20, 17, 16], 99).unwrap().remove(0);
    let (_, params, bounds) = preprocess(&raw).unwrap();
    let out = infer_volume(&gen, &raw, &params, bounds, ConditionKind::Noisy, 4, DEFAULT_PEAK).unwrap();
    assert_eq!(out.dims(), raw.dims());
    let again = infer_volume(&gen, &raw, &params, bounds, ConditionKind::Noisy, 4, DEFAULT_PEAK).unwrap();
    assert_eq!(out.data(), again.data());

    let report = evaluate_pair(&raw, &out, &EvalOptions::default()).unwrap();
    assert!(report.psnr_db.is_finite() && report.ssim <= 1.0);
    assert_eq!(report.per_slice.len(), 16);
}
