//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Coordinates sampled per parameter; smaller parameters are checked
    /// exhaustively.
    pub coords_per_param: usize,
    /// Lower bound on the relative-error denominator, so coordinates with a
    /// vanishing gradient are compared in absolute terms.
    pub abs_floor: f64,
    pub seed: u64,
    /// When a perturbed evaluation lands on a different smooth piece (see
    /// `Graph::branch_pattern`), retry with the step divided by 10, at most
    /// this many times. Zero disables the retry.
    pub kink_retries: u32,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            coords_per_param: 32,
            abs_floor: 1e-6,
            seed: 0,
            kink_retries: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub coords_checked: usize,
    /// Step reductions made because a perturbation crossed a kink.
    pub steps_shrunk: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward-pass gradients of the scalar built by `build` against
/// central differences. `build` must be deterministic: any sampling inside
/// has to use a fixed seed. Store values are restored before returning.
pub fn gradient_check<F, B>(store: &mut ParamStore<F>, mut build: B, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Scalar,
    B: FnMut(&mut Graph<F>, &mut ParamStore<F>) -> Result<Var>,
{
    let snapshot: Vec<Vec<F>> = store.iter().map(|p| p.value.clone()).collect();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    grads.write_to(store);

    let base_pattern = g.branch_pattern();
    drop(g);

    let mut eval = |store: &mut ParamStore<F>| -> Result<(f64, bool)> {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        let same_piece = g.branch_pattern() == base_pattern;
        Ok((g.scalar(loss).to_f64().unwrap_or(f64::NAN), same_piece))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        steps_shrunk: 0,
    };
    for id in store.ids().collect::<Vec<_>>() {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let analytic = store.get(id).grad.clone().expect("written above");
        for i in coords {
            let mut h = cfg.epsilon;
            let mut retries = cfg.kink_retries;
            let numeric = loop {
                let orig = store.get(id).value[i];
                store.get_mut(id).value[i] = orig + F::lit(h);
                let (plus, plus_same) = eval(store)?;
                store.get_mut(id).value[i] = orig - F::lit(h);
                let (minus, minus_same) = eval(store)?;
                store.get_mut(id).value[i] = orig;
                if (plus_same && minus_same) || retries == 0 {
                    break (plus - minus) / (2.0 * h);
                }
                retries -= 1;
                h /= 10.0;
                report.steps_shrunk += 1;
            };
            let a = analytic[i].to_f64().unwrap_or(f64::NAN);
            let rel = relative_error(a, numeric, cfg.abs_floor);
            report.coords_checked += 1;
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = Some(Mismatch {
                    param: store.get(id).name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    for (p, v) in store.iter_mut().zip(snapshot) {
        p.value = v;
    }
    Ok(report)
}
