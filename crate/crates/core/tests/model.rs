//! Loss terms, latent handling and gradients of the full model.

use dvae_core::model::{
    kl_divergence, reparameterize, LatentPosterior, LossVars, Model, ModelConfig, PairBatch, PairNoise,
    ReconReduction,
};
use dvae_nn::{gradient_check, GradCheckConfig, Graph, Mode, NnError, Scalar};
use proptest::prelude::*;
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

fn random_batch<F: Scalar>(cfg: &ModelConfig, pairs: usize, seed: u64) -> PairBatch<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PairBatch {
        pairs,
        data: (0..2 * pairs * cfg.segment_len()).map(|_| F::lit(rng.gen::<f64>())).collect(),
    }
}

struct Losses {
    total: f64,
    elbo_recon: f64,
    postnet_recon: f64,
    kl_s: f64,
    kl_c: f64,
    coarse: Vec<f64>,
    refined: Vec<f64>,
}

fn losses<F: Scalar>(model: &mut Model<F>, batch: &PairBatch<F>, noise: &PairNoise<F>, mode: Mode) -> Losses {
    let mut g = Graph::new();
    let l: LossVars = model.net.pair_loss(&mut g, &mut model.params, batch, noise, mode).unwrap();
    let s = |v| g.scalar(v).to_f64().unwrap();
    let all = |v| g.value(v).iter().map(|x: &F| x.to_f64().unwrap()).collect();
    Losses {
        total: s(l.total),
        elbo_recon: s(l.elbo_recon),
        postnet_recon: s(l.postnet_recon),
        kl_s: s(l.kl_s),
        kl_c: s(l.kl_c),
        coarse: all(l.coarse),
        refined: all(l.refined),
    }
}

#[test]
fn posterior_dimensions_and_flatten_width() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.flatten_width(), 2048);
    let mut m = Model::<f32>::new(small(), 1).unwrap();
    let batch = random_batch::<f32>(m.config(), 1, 2);
    let post = m.encode(&batch.data, Mode::Eval).unwrap();
    assert_eq!(post.len(), 2);
    for p in &post {
        assert_eq!((p.mu_s.len(), p.logvar_s.len(), p.mu_c.len(), p.logvar_c.len()), (8, 8, 56, 56));
    }
}

#[test]
fn postnet_squeezes_back_to_mel_channels() {
    let m = Model::<f32>::new(small(), 1).unwrap();
    let last = format!("postnet.conv.{}.weight", m.config().postnet_layers - 1);
    let id = m.params.id(&last).unwrap();
    assert_eq!(m.params.get(id).shape[0], 80);
}

#[test]
fn fixed_seed_gives_identical_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let post = LatentPosterior {
        mu_s: (0..8).map(|_| rng.gen()).collect(),
        logvar_s: (0..8).map(|_| rng.gen()).collect(),
        mu_c: (0..56).map(|_| rng.gen()).collect(),
        logvar_c: (0..56).map(|_| rng.gen()).collect(),
    };
    let a = reparameterize(&post, &mut ChaCha8Rng::seed_from_u64(9));
    let b = reparameterize(&post, &mut ChaCha8Rng::seed_from_u64(9));
    let c = reparameterize(&post, &mut ChaCha8Rng::seed_from_u64(10));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn zero_network_on_zero_input_has_zero_loss() {
    let mut m = Model::<f64>::new(small(), 1).unwrap();
    m.zero_params("");
    let cfg = m.config().clone();
    let batch = PairBatch {
        pairs: 2,
        data: vec![0.0; 4 * cfg.segment_len()],
    };
    let noise = PairNoise::sample(&cfg, 2, &mut ChaCha8Rng::seed_from_u64(0));
    let l = losses(&mut m, &batch, &noise, Mode::Train);
    assert_eq!((l.kl_s, l.kl_c), (0.0, 0.0));
    assert_eq!(l.total, 0.0);
}

#[test]
fn unit_offset_gives_unit_loss_per_input() {
    // A zero network outputs zeros, so an all −1 target is off by exactly 1
    // in every entry of both inputs.
    let mut m = Model::<f64>::new(small(), 1).unwrap();
    m.zero_params("");
    let cfg = m.config().clone();
    let batch = PairBatch {
        pairs: 1,
        data: vec![-1.0; 2 * cfg.segment_len()],
    };
    let l = losses(&mut m, &batch, &PairNoise::zeros(&cfg, 1), Mode::Train);
    assert_eq!(l.postnet_recon, 2.0);
    assert_eq!(l.elbo_recon, 2.0);
}

/// Recomputes every term from the forward values and an independent
/// encoder pass.
fn check_against_scalar_oracle(reduction: ReconReduction) {
    let cfg = ModelConfig {
        recon_reduction: reduction,
        beta: 2.5,
        ..small()
    };
    let mut m = Model::<f64>::new(cfg.clone(), 4).unwrap();
    let pairs = 3;
    let batch = random_batch::<f64>(&cfg, pairs, 5);
    let noise = PairNoise::sample(&cfg, pairs, &mut ChaCha8Rng::seed_from_u64(6));
    let l = losses(&mut m, &batch, &noise, Mode::Train);

    let n = cfg.segment_len() as f64;
    let sq: f64 = l.coarse.iter().zip(&batch.data).map(|(a, b)| (a - b).powi(2)).sum();
    let abs: f64 = l.refined.iter().zip(&batch.data).map(|(a, b)| (a - b).abs()).sum();
    let elbo = match reduction {
        ReconReduction::Mean => sq / (pairs as f64 * n),
        ReconReduction::GaussianNll => 0.5 * sq / pairs as f64,
    };
    assert!((l.elbo_recon - elbo).abs() <= 1e-12 * elbo.max(1.0), "{} vs {elbo}", l.elbo_recon);
    let post_l1 = abs / (pairs as f64 * n);
    assert!((l.postnet_recon - post_l1).abs() <= 1e-12, "{} vs {post_l1}", l.postnet_recon);

    // Independent f64 encoder pass over the same 2B batch.
    let mut store = m.params.clone();
    let mut g = Graph::<f64>::new();
    let x = g.constant(&[2 * pairs, cfg.segment_frames, cfg.n_mels], batch.data.clone()).unwrap();
    let post = m.net.encode(&mut g, &mut store, x, Mode::Train).unwrap();
    let rows = |v, k: usize| -> Vec<Vec<f64>> { g.value(v).chunks(k).map(<[f64]>::to_vec).collect() };
    let (mu_s, lv_s) = (rows(post.mu_s, cfg.k1), rows(post.logvar_s, cfg.k1));
    let (mu_c, lv_c) = (rows(post.mu_c, cfg.k2), rows(post.logvar_c, cfg.k2));
    let (mut kl_s, mut kl_c) = (0.0, 0.0);
    for p in 0..pairs {
        let (a, b) = (p, pairs + p);
        let mu: Vec<f64> = mu_s[a].iter().zip(&mu_s[b]).map(|(x, y)| 0.5 * (x + y)).collect();
        let lv: Vec<f64> = lv_s[a]
            .iter()
            .zip(&lv_s[b])
            .map(|(x, y)| (0.5 * (x.exp() + y.exp())).ln())
            .collect();
        kl_s += 2.0 * kl_divergence(&mu, &lv);
    }
    for (mu, lv) in mu_c.iter().zip(&lv_c) {
        kl_c += kl_divergence(mu, lv);
    }
    kl_s /= pairs as f64;
    kl_c /= pairs as f64;
    assert!((l.kl_s - kl_s).abs() <= 1e-10 * kl_s.max(1.0), "{} vs {kl_s}", l.kl_s);
    assert!((l.kl_c - kl_c).abs() <= 1e-10 * kl_c.max(1.0), "{} vs {kl_c}", l.kl_c);

    let total = l.elbo_recon + l.postnet_recon + 2.5 * (l.kl_s + l.kl_c);
    assert!((l.total - total).abs() <= 1e-12 * total.max(1.0));
    assert!(l.total.is_finite() && l.total > 0.0);
}

#[test]
fn loss_terms_match_scalar_oracle_mean() {
    check_against_scalar_oracle(ReconReduction::Mean);
}

#[test]
fn loss_terms_match_scalar_oracle_gaussian_nll() {
    check_against_scalar_oracle(ReconReduction::GaussianNll);
}

#[test]
fn swapping_pair_order_leaves_the_speaker_kl_unchanged() {
    let cfg = small();
    let mut m = Model::<f64>::new(cfg.clone(), 7).unwrap();
    let batch = random_batch::<f64>(&cfg, 1, 8);
    let half = cfg.segment_len();
    let swapped = PairBatch {
        pairs: 1,
        data: [&batch.data[half..], &batch.data[..half]].concat(),
    };
    let noise = PairNoise::zeros(&cfg, 1);
    let a = losses(&mut m, &batch, &noise, Mode::Eval);
    let b = losses(&mut m, &swapped, &noise, Mode::Eval);
    assert_eq!(a.kl_s, b.kl_s);
    // Content terms are summed in a different order.
    assert!((a.kl_c - b.kl_c).abs() <= 1e-12 * a.kl_c.max(1.0));
    assert!((a.total - b.total).abs() <= 1e-12 * a.total.max(1.0));
}

#[test]
fn batch_norm_running_stats_do_not_leak_into_eval_loss() {
    let cfg = small();
    let mut m = Model::<f64>::new(cfg.clone(), 7).unwrap();
    let batch = random_batch::<f64>(&cfg, 2, 8);
    let noise = PairNoise::zeros(&cfg, 2);
    let a = losses(&mut m, &batch, &noise, Mode::Eval);
    let b = losses(&mut m, &batch, &noise, Mode::Eval);
    assert_eq!(a.total, b.total);
}

fn end_to_end_check(inject_fault: bool) -> f64 {
    let cfg = small();
    let model = Model::<f64>::new(cfg.clone(), 11).unwrap();
    let mut store = model.params.clone();
    let batch = random_batch::<f64>(&cfg, 2, 12);
    let noise = PairNoise::sample(&cfg, 2, &mut ChaCha8Rng::seed_from_u64(13));
    let net = model.net.clone();
    // Gradients here are as small as 1e-5, and steps shrunk at kinks leave
    // rounding noise near 1e-9, so the floor sits at 1e-4.
    let check = GradCheckConfig {
        epsilon: 1e-4,
        coords_per_param: 32,
        abs_floor: 1e-4,
        seed: 1,
        kink_retries: 3,
    };
    gradient_check(
        &mut store,
        |g: &mut Graph<f64>, s| {
            if inject_fault {
                g.inject_tanh_adjoint_fault(1.5);
            }
            net.pair_loss(g, s, &batch, &noise, Mode::Train)
                .map(|l| l.total)
                .map_err(|e| NnError::State(e.to_string()))
        },
        &check,
    )
    .unwrap()
    .max_rel_error
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let err = end_to_end_check(false);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn broken_backward_rule_is_caught() {
    let err = end_to_end_check(true);
    assert!(err > 1e-1, "{err}");
}

proptest! {
    #[test]
    fn kl_is_nonnegative(
        mu in prop::collection::vec(-5.0f64..5.0, 1..16),
        lv in prop::collection::vec(-8.0f64..8.0, 16),
    ) {
        let lv = &lv[..mu.len()];
        prop_assert!(kl_divergence(&mu, lv) >= 0.0);
    }

    #[test]
    fn kl_vanishes_only_at_the_prior(mu in -1.0f64..1.0, lv in -1.0f64..1.0) {
        prop_assume!(mu.abs() > 1e-3 || lv.abs() > 1e-3);
        prop_assert!(kl_divergence(&[mu], &[lv]) > 0.0);
        prop_assert!(kl_divergence(&[0.0], &[0.0]).abs() < 1e-7);
    }
}
