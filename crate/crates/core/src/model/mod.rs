//! The disentangled VAE: encoder with speaker and content heads, pair
//! averaging of the speaker posterior, decoder, residual post-net, losses,
//! and self-describing checkpoints.

mod config;
mod latent;
mod network;

use std::path::Path;

use dvae_nn::{load_checkpoint, save_checkpoint, Graph, Mode, ParamStore, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{ModelConfig, ReconReduction};
pub use latent::{average_posteriors, kl_divergence, log_mean_exp, reparameterize, LatentPosterior, LatentSample};
pub use network::{kl_sum, DisentangledVae, LossVars, PairBatch, PairNoise, PosteriorVars};

use crate::error::{Error, Result};

/// Decoder output before and after post-net refinement, each `[N, frames, mels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PostnetOutput {
    pub coarse: Vec<f32>,
    /// What the post-net's last layer emitted.
    pub raw_residual: Vec<f32>,
    /// `coarse + raw_residual`.
    pub refined: Vec<f32>,
}

impl PostnetOutput {
    /// Residual actually applied, `refined − coarse`. Differs from
    /// `raw_residual` only by rounding in the addition.
    pub fn residual(&self) -> Vec<f32> {
        self.refined.iter().zip(&self.coarse).map(|(r, c)| r - c).collect()
    }
}

/// JSON stored in every checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub seed: u64,
    pub step: u64,
}

/// Network architecture plus its parameter values.
#[derive(Clone, Debug)]
pub struct Model<F: Scalar = f32> {
    pub net: DisentangledVae,
    pub params: ParamStore<F>,
}

fn to_f32<F: Scalar>(v: &[F]) -> Vec<f32> {
    v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()
}

fn from_f32<F: Scalar>(v: &[f32]) -> Vec<F> {
    v.iter().map(|&x| F::lit(x as f64)).collect()
}

impl<F: Scalar> Model<F> {
    /// Fresh weights drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = DisentangledVae::new(config, &mut params, &mut rng)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Same weights in another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    fn segment_input(&self, g: &mut Graph<F>, segments: &[f32]) -> Result<dvae_nn::Var> {
        let len = self.config().segment_len();
        if segments.is_empty() || segments.len() % len != 0 {
            return Err(Error::Length(format!(
                "{} values is not a whole number of {}×{} segments",
                segments.len(),
                self.config().segment_frames,
                self.config().n_mels
            )));
        }
        let n = segments.len() / len;
        let c = self.config();
        Ok(g.constant(&[n, c.segment_frames, c.n_mels], from_f32(segments))?)
    }

    /// Posteriors of `[N, frames, mels]` segments, one per segment.
    pub fn encode(&mut self, segments: &[f32], mode: Mode) -> Result<Vec<LatentPosterior>> {
        let mut g = Graph::new();
        let x = self.segment_input(&mut g, segments)?;
        let p = self.net.encode(&mut g, &mut self.params, x, mode)?;
        let (k1, k2) = (self.config().k1, self.config().k2);
        let rows = |v: dvae_nn::Var, k: usize| -> Vec<Vec<f32>> { to_f32(g.value(v)).chunks(k).map(<[f32]>::to_vec).collect() };
        let (mu_s, lv_s, mu_c, lv_c) = (rows(p.mu_s, k1), rows(p.logvar_s, k1), rows(p.mu_c, k2), rows(p.logvar_c, k2));
        Ok(mu_s
            .into_iter()
            .zip(lv_s)
            .zip(mu_c.into_iter().zip(lv_c))
            .map(|((mu_s, logvar_s), (mu_c, logvar_c))| LatentPosterior {
                mu_s,
                logvar_s,
                mu_c,
                logvar_c,
            })
            .collect())
    }

    /// Coarse spectrograms for `[N, k1 + k2]` latents.
    pub fn decode(&mut self, z: &[f32], mode: Mode) -> Result<Vec<f32>> {
        let k = self.config().latent_dim();
        if z.is_empty() || z.len() % k != 0 {
            return Err(Error::Length(format!("{} latent values is not a multiple of {k}", z.len())));
        }
        let mut g = Graph::new();
        let zv = g.constant(&[z.len() / k, k], from_f32(z))?;
        let y = self.net.decode(&mut g, &mut self.params, zv, mode)?;
        Ok(to_f32(g.value(y)))
    }

    pub fn postnet_refine(&mut self, coarse: &[f32], mode: Mode) -> Result<PostnetOutput> {
        let mut g = Graph::new();
        let x = self.segment_input(&mut g, coarse)?;
        let r = self.net.postnet(&mut g, &mut self.params, x, mode)?;
        let refined = g.add(x, r)?;
        Ok(PostnetOutput {
            coarse: coarse.to_vec(),
            raw_residual: to_f32(g.value(r)),
            refined: to_f32(g.value(refined)),
        })
    }

    /// Decoder and post-net in one pass.
    pub fn generate(&mut self, z: &[f32], mode: Mode) -> Result<PostnetOutput> {
        let coarse = self.decode(z, mode)?;
        self.postnet_refine(&coarse, mode)
    }

    /// Parameter names starting with `prefix` set to zero, buffers included.
    pub fn zero_params(&mut self, prefix: &str) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.value.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Writes weights, buffers and optimizer state, with the configuration
    /// in the header.
    pub fn save(&self, path: impl AsRef<Path>, seed: u64) -> Result<()> {
        let path = path.as_ref();
        let step = self.params.iter().map(|p| p.step_count).max().unwrap_or(0);
        let header = CheckpointHeader {
            model: self.config().clone(),
            seed,
            step,
        };
        let json = serde_json::to_string(&header)?;
        save_checkpoint(path, &json, &self.params).map_err(|e| Error::from(e).at(path))
    }

    /// Rebuilds the model described by a checkpoint and restores its state.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointHeader)> {
        let path = path.as_ref();
        let inner = || -> Result<(Self, CheckpointHeader)> {
            let data = load_checkpoint(path)?;
            let header: CheckpointHeader = serde_json::from_str(&data.header)?;
            let mut model = Self::new(header.model.clone(), 0)?;
            data.restore_into(&mut model.params)?;
            Ok((model, header))
        };
        inner().map_err(|e| e.at(path))
    }
}
