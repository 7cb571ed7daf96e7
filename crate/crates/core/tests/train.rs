//! Training loop bookkeeping, reproducibility and convergence on a fixed set.

use std::path::Path;

use dvae_core::data::{Dataset, SpeakerData, Utterance};
use dvae_core::dsp::MelSpectrogram;
use dvae_core::model::{Model, ModelConfig, PairNoise};
use dvae_core::train::{checkpoint_path, resume, train_loop, train_step, Precision, TrainConfig, LOSS_LOG};
use dvae_nn::Adam;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        enc_conv_channels: 8,
        enc_lstm_hidden: 4,
        enc_fc: 16,
        dec_fc: 16,
        dec_frame_width: 4,
        dec_lstm1_hidden: 8,
        dec_conv_channels: 8,
        dec_lstm2_hidden: 8,
        postnet_channels: 8,
        ..ModelConfig::default()
    }
}

fn random_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speakers = (0..2)
        .map(|s| SpeakerData {
            id: format!("s{s}"),
            utterances: (0..3)
                .map(|u| {
                    let n = 64 + 8 * u;
                    Utterance {
                        id: format!("s{s}_{u}"),
                        mel: MelSpectrogram::new(n, 80, (0..n * 80).map(|_| rng.gen()).collect(), true).unwrap(),
                    }
                })
                .collect(),
        })
        .collect();
    Dataset::new(speakers, 64).unwrap()
}

fn cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        lr: 1e-3,
        total_steps: steps,
        checkpoint_every: 4,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::<f32>::new(small(), 1).unwrap();
    let s = train_loop(&random_dataset(0), &mut m, &cfg(0), dir.path()).unwrap();
    assert_eq!(s.checkpoints, vec![checkpoint_path(dir.path(), 0)]);
    assert!(s.first.is_none());
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["ckpt_0000000.dvc", LOSS_LOG]);
    assert_eq!(std::fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap(), "step,total,recon,kl\n");
}

#[test]
fn log_has_one_row_per_step_and_checkpoints_follow_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::<f32>::new(small(), 1).unwrap();
    let s = train_loop(&random_dataset(0), &mut m, &cfg(10), dir.path()).unwrap();
    let log = std::fs::read_to_string(&s.loss_log).unwrap();
    let rows: Vec<&str> = log.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    for (i, row) in rows.iter().enumerate() {
        let f: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(f[0] as usize, i);
        assert!(f[1].is_finite() && f[3] >= 0.0, "{row}");
    }
    let steps: Vec<u64> = [0, 4, 8, 10].to_vec();
    assert_eq!(s.checkpoints, steps.iter().map(|&k| checkpoint_path(dir.path(), k)).collect::<Vec<_>>());
    assert_eq!(s.final_checkpoint, checkpoint_path(dir.path(), 10));
}

#[test]
fn same_seed_same_bytes_and_resume_matches_uninterrupted() {
    let ds = random_dataset(0);
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    train_loop(&ds, &mut Model::<f32>::new(small(), 1).unwrap(), &cfg(12), &a).unwrap();
    train_loop(&ds, &mut Model::<f32>::new(small(), 1).unwrap(), &cfg(12), &b).unwrap();
    for k in [0, 4, 8, 12] {
        assert_eq!(read(&checkpoint_path(&a, k)), read(&checkpoint_path(&b, k)), "step {k}");
    }
    assert_eq!(read(&a.join(LOSS_LOG)), read(&b.join(LOSS_LOG)));

    train_loop(&ds, &mut Model::<f32>::new(small(), 1).unwrap(), &cfg(4), &c).unwrap();
    let (mut m, step) = resume::<f32>(checkpoint_path(&c, 4)).unwrap();
    assert_eq!(step, 4);
    train_loop(&ds, &mut m, &cfg(12), &c).unwrap();
    assert_eq!(read(&checkpoint_path(&a, 12)), read(&checkpoint_path(&c, 12)));
    assert_eq!(read(&a.join(LOSS_LOG)), read(&c.join(LOSS_LOG)));
}

#[test]
fn different_seeds_diverge() {
    let ds = random_dataset(0);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_loop(&ds, &mut Model::<f32>::new(small(), 1).unwrap(), &cfg(2), &a).unwrap();
    train_loop(&ds, &mut Model::<f32>::new(small(), 1).unwrap(), &TrainConfig { seed: 4, ..cfg(2) }, &b).unwrap();
    assert_ne!(read(&a.join(LOSS_LOG)), read(&b.join(LOSS_LOG)));
}

#[test]
fn resuming_past_the_target_is_rejected() {
    let ds = random_dataset(0);
    let dir = tempfile::tempdir().unwrap();
    train_loop(&ds, &mut Model::<f32>::new(small(), 1).unwrap(), &cfg(4), dir.path()).unwrap();
    let (mut m, _) = resume::<f32>(checkpoint_path(dir.path(), 4)).unwrap();
    assert!(train_loop(&ds, &mut m, &cfg(2), dir.path()).is_err());
}

#[test]
fn fixed_pairs_are_fit() {
    let ds = random_dataset(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (batch, _) = ds.sample_batch(4, &mut rng);
    let mut m = Model::<f32>::new(small(), 2).unwrap();
    let adam = Adam::new(1e-3);
    let mut first = None;
    let mut last = Vec::new();
    for step in 0..500u64 {
        let noise = PairNoise::sample(m.config(), 4, &mut ChaCha8Rng::seed_from_u64(step));
        let s = train_step(&mut m, &batch, &noise, &adam, None).unwrap();
        assert!(s.kl_s >= 0.0 && s.kl_c >= 0.0);
        first.get_or_insert(s.total);
        if step >= 490 {
            last.push(s.total);
        }
    }
    let end = last.iter().sum::<f64>() / last.len() as f64;
    assert!(end < 0.5 * first.unwrap(), "initial {} final {end}", first.unwrap());
}

#[test]
fn float64_training_runs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::<f64>::new(small(), 1).unwrap();
    let c = TrainConfig {
        precision: Precision::F64,
        ..cfg(3)
    };
    let s = train_loop(&random_dataset(0), &mut m, &c, dir.path()).unwrap();
    assert!(s.last.unwrap().total.is_finite());
    let (back, step) = resume::<f64>(&s.final_checkpoint).unwrap();
    assert_eq!(step, 3);
    assert_eq!(back.config(), m.config());
}
