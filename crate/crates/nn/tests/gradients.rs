//! Every primitive and fused layer checked against central differences in
//! f64.

use dvae_nn::{
    gradient_check, BnMode, GradCheckConfig, Graph, ParamId, ParamStore, Result, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn cfg() -> GradCheckConfig {
    GradCheckConfig {
        epsilon: 1e-6,
        coords_per_param: 48,
        abs_floor: 1e-7,
        seed: 11,
        kink_retries: 0,
    }
}

fn random_store(specs: &[(&str, &[usize])], seed: u64) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = specs
        .iter()
        .map(|(name, shape)| store.add_uniform(*name, shape, 1.0, &mut rng).unwrap())
        .collect();
    (store, ids)
}

/// `sum(y ⊙ probe)` with a fixed pseudo-random probe so every output
/// coordinate carries a distinct weight.
fn probe_loss(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = g.constant(&shape, probe)?;
    let m = g.mul(y, p)?;
    g.sum(m)
}

fn check<B>(specs: &[(&str, &[usize])], mut build: B) -> f64
where
    B: FnMut(&mut Graph<f64>, &mut ParamStore<f64>, &[ParamId]) -> Result<Var>,
{
    let (mut store, ids) = random_store(specs, 5);
    let report = gradient_check(&mut store, |g, s| build(g, s, &ids), &cfg()).unwrap();
    assert!(report.coords_checked > 0);
    assert!(
        report.max_rel_error < TOL,
        "max rel error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
    report.max_rel_error
}

macro_rules! unary_case {
    ($name:ident, $method:ident) => {
        #[test]
        fn $name() {
            check(&[("a", &[3, 5])], |g, s, ids| {
                let a = g.param(s, ids[0])?;
                let y = g.$method(a)?;
                probe_loss(g, y)
            });
        }
    };
}

unary_case!(tanh_gradient, tanh);
unary_case!(sigmoid_gradient, sigmoid);
unary_case!(exp_gradient, exp);
unary_case!(square_gradient, square);
unary_case!(abs_gradient, abs);
unary_case!(swap_last_gradient, swap_last);

macro_rules! binary_case {
    ($name:ident, $method:ident) => {
        #[test]
        fn $name() {
            check(&[("a", &[4, 3]), ("b", &[4, 3])], |g, s, ids| {
                let a = g.param(s, ids[0])?;
                let b = g.param(s, ids[1])?;
                let y = g.$method(a, b)?;
                probe_loss(g, y)
            });
        }
    };
}

binary_case!(add_gradient, add);
binary_case!(sub_gradient, sub);
binary_case!(mul_gradient, mul);
binary_case!(log_mean_exp_gradient, log_mean_exp);

#[test]
fn log_gradient_on_positive_inputs() {
    check(&[("a", &[6])], |g, s, ids| {
        let a = g.param(s, ids[0])?;
        let pos = g.exp(a)?;
        let y = g.log(pos)?;
        let y = g.scale(y, 0.5)?;
        let y = g.add_scalar(y, 2.0)?;
        probe_loss(g, y)
    });
}

#[test]
fn clamp_gradient_inside_and_outside() {
    check(&[("a", &[8])], |g, s, ids| {
        let a = g.param(s, ids[0])?;
        let wide = g.scale(a, 3.0)?;
        let y = g.clamp(wide, -1.5, 1.5)?;
        probe_loss(g, y)
    });
}

#[test]
fn reductions_gradient() {
    check(&[("a", &[2, 7])], |g, s, ids| {
        let a = g.param(s, ids[0])?;
        let s1 = g.sum(a)?;
        let s2 = g.mean(a)?;
        let s3 = g.abs_sum(a)?;
        let t = g.add(s1, s2)?;
        let t = g.scale(t, 0.3)?;
        g.add(t, s3)
    });
}

#[test]
fn matmul_and_linear_gradient() {
    check(&[("a", &[3, 4]), ("b", &[4, 2]), ("w", &[5, 2]), ("bias", &[5])], |g, s, ids| {
        let a = g.param(s, ids[0])?;
        let b = g.param(s, ids[1])?;
        let w = g.param(s, ids[2])?;
        let bias = g.param(s, ids[3])?;
        let m = g.matmul(a, b)?;
        let y = g.linear(m, w, Some(bias))?;
        probe_loss(g, y)
    });
}

#[test]
fn concat_slice_reshape_repeat_gradient() {
    check(&[("a", &[2, 3, 4]), ("b", &[2, 3, 2])], |g, s, ids| {
        let a = g.param(s, ids[0])?;
        let b = g.param(s, ids[1])?;
        let c = g.concat(&[a, b], 2)?;
        let sl = g.slice(c, 2, 1, 5)?;
        let sl = g.slice(sl, 1, 1, 3)?;
        let r = g.reshape(sl, &[2, 2, 4])?;
        let rep = g.repeat_frames(r, 3)?;
        let c0 = g.concat(&[rep, rep], 0)?;
        probe_loss(g, c0)
    });
}

#[test]
fn conv1d_gradient_strides_and_padding() {
    for (stride, pad) in [(1, 2), (2, 2), (2, 0), (3, 1)] {
        check(&[("x", &[2, 3, 11]), ("w", &[4, 3, 5]), ("b", &[4])], |g, s, ids| {
            let x = g.param(s, ids[0])?;
            let w = g.param(s, ids[1])?;
            let b = g.param(s, ids[2])?;
            let y = g.conv1d(x, w, Some(b), stride, pad)?;
            probe_loss(g, y)
        });
    }
}

#[test]
fn batch_norm_gradient_train_and_eval() {
    check(&[("x", &[3, 4, 5]), ("gamma", &[4]), ("beta", &[4])], |g, s, ids| {
        let x = g.param(s, ids[0])?;
        let gamma = g.param(s, ids[1])?;
        let beta = g.param(s, ids[2])?;
        let (y, _) = g.batch_norm(x, gamma, beta, BnMode::Train)?;
        probe_loss(g, y)
    });
    let mean = [0.1, -0.2, 0.3, 0.0];
    let var = [1.5, 0.5, 2.0, 1.0];
    check(&[("x", &[3, 4, 5]), ("gamma", &[4]), ("beta", &[4])], |g, s, ids| {
        let x = g.param(s, ids[0])?;
        let gamma = g.param(s, ids[1])?;
        let beta = g.param(s, ids[2])?;
        let (y, _) = g.batch_norm(x, gamma, beta, BnMode::Eval { mean: &mean, var: &var })?;
        probe_loss(g, y)
    });
}

#[test]
fn lstm_gradient_both_directions_with_initial_state() {
    for reverse in [false, true] {
        check(
            &[
                ("x", &[2, 5, 3]),
                ("w_ih", &[16, 3]),
                ("w_hh", &[16, 4]),
                ("b", &[16]),
                ("h0", &[2, 4]),
                ("c0", &[2, 4]),
            ],
            |g, s, ids| {
                let v: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect::<Result<_>>()?;
                let y = g.lstm(v[0], v[1], v[2], v[3], Some(v[4]), Some(v[5]), reverse)?;
                probe_loss(g, y)
            },
        );
    }
}

#[test]
fn lstm_single_step_gradient_in_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f32>::new();
    let x = store.add_uniform("x", &[1, 1, 6], 1.0, &mut rng).unwrap();
    let w_ih = store.add_uniform("w_ih", &[20, 6], 0.5, &mut rng).unwrap();
    let w_hh = store.add_uniform("w_hh", &[20, 5], 0.5, &mut rng).unwrap();
    let b = store.add_uniform("b", &[20], 0.5, &mut rng).unwrap();
    let cfg = GradCheckConfig {
        epsilon: 1e-2,
        coords_per_param: 200,
        abs_floor: 1e-2,
        seed: 3,
        kink_retries: 0,
    };
    let report = gradient_check(
        &mut store,
        |g, s| {
            let xv = g.param(s, x)?;
            let (wi, wh, bv) = (g.param(s, w_ih)?, g.param(s, w_hh)?, g.param(s, b)?);
            let y = g.lstm(xv, wi, wh, bv, None, None, false)?;
            let y2 = g.square(y)?;
            g.sum(y2)
        },
        &cfg,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn composite_quadratic_is_tight() {
    let err = check(&[("w", &[10])], |g, s, ids| {
        let w = g.param(s, ids[0])?;
        let sq = g.square(w)?;
        let t = g.scale(sq, 1.7)?;
        g.sum(t)
    });
    assert!(err < 1e-6);
}

#[test]
fn corrupted_backward_rule_is_detected() {
    let (mut store, ids) = random_store(&[("a", &[3, 5])], 5);
    let report = gradient_check(
        &mut store,
        |g, s| {
            g.inject_tanh_adjoint_fault(1.5);
            let a = g.param(s, ids[0])?;
            let y = g.tanh(a)?;
            probe_loss(g, y)
        },
        &cfg(),
    )
    .unwrap();
    assert!(report.max_rel_error > 1e-1, "{report:?}");
}

#[test]
fn kink_retry_shrinks_steps_that_straddle_a_kink() {
    // sum|a − 0.3| + exp(a) has a kink 3e-5 away from a = 0.30003, which a
    // step of 1e-4 straddles.
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let id = store.add_uniform("a", &[1], 1.0, &mut rng).unwrap();
    store.get_mut(id).value[0] = 0.30003;
    let build = |g: &mut Graph<f64>, s: &mut ParamStore<f64>| {
        let a = g.param(s, id)?;
        let d = g.add_scalar(a, -0.3)?;
        let k = g.abs_sum(d)?;
        let e = g.exp(a)?;
        let e = g.sum(e)?;
        g.add(k, e)
    };
    let plain = GradCheckConfig {
        epsilon: 1e-4,
        coords_per_param: 1,
        abs_floor: 1e-6,
        seed: 1,
        kink_retries: 0,
    };
    let report = gradient_check(&mut store, build, &plain).unwrap();
    assert!(report.max_rel_error > 0.1, "{}", report.max_rel_error);
    let retry = GradCheckConfig {
        kink_retries: 2,
        ..plain
    };
    let report = gradient_check(&mut store, build, &retry).unwrap();
    assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
}

#[test]
fn branch_pattern_tracks_abs_and_clamp_sides() {
    let mut g = Graph::<f64>::new();
    let x = g.input(&[4], vec![-1.0, 0.0, 2.0, 5.0]).unwrap();
    g.abs(x).unwrap();
    g.clamp(x, 0.0, 3.0).unwrap();
    assert_eq!(g.branch_pattern(), vec![-1, 0, 1, 1, -2, -1, 0, 2]);
    let c = g.constant(&[1], vec![-1.0]).unwrap();
    g.abs(c).unwrap();
    assert_eq!(g.branch_pattern().len(), 8);
}
