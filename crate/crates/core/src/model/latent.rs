use rand::Rng;
use rand_distr::StandardNormal;

/// Diagonal Gaussian posterior over the speaker and content blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mu_s: Vec<f32>,
    pub logvar_s: Vec<f32>,
    pub mu_c: Vec<f32>,
    pub logvar_c: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z_s: Vec<f32>,
    pub z_c: Vec<f32>,
}

impl LatentSample {
    /// Decoder input: speaker block followed by content block.
    pub fn z(&self) -> Vec<f32> {
        let mut z = self.z_s.clone();
        z.extend_from_slice(&self.z_c);
        z
    }
}

/// `log((eᵃ + eᵇ)/2)`, shifted by the larger argument for stability.
pub fn log_mean_exp(a: f32, b: f32) -> f32 {
    let m = a.max(b);
    m + (0.5 * ((a - m).exp() + (b - m).exp())).ln()
}

/// Shared speaker block of a same-speaker pair: the means are averaged and
/// the variances are averaged in the σ² domain.
pub fn average_posteriors(p1: &LatentPosterior, p2: &LatentPosterior) -> (Vec<f32>, Vec<f32>) {
    let mu = p1.mu_s.iter().zip(&p2.mu_s).map(|(a, b)| (a + b) * 0.5).collect();
    let logvar = p1
        .logvar_s
        .iter()
        .zip(&p2.logvar_s)
        .map(|(&a, &b)| log_mean_exp(a, b))
        .collect();
    (mu, logvar)
}

/// `μ + exp(logvar/2)·ε` with `ε ~ N(0, I)`, speaker block drawn first.
pub fn reparameterize<R: Rng>(post: &LatentPosterior, rng: &mut R) -> LatentSample {
    let mut draw = |mu: &[f32], logvar: &[f32]| -> Vec<f32> {
        mu.iter()
            .zip(logvar)
            .map(|(&m, &lv)| {
                let e: f32 = rng.sample(StandardNormal);
                m + (0.5 * lv).exp() * e
            })
            .collect()
    };
    let z_s = draw(&post.mu_s, &post.logvar_s);
    let z_c = draw(&post.mu_c, &post.logvar_c);
    LatentSample { z_s, z_c }
}

/// KL divergence from `N(μ, diag(exp(logvar)))` to the standard normal.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}
