use dvae_nn::{BatchNorm1d, BiLstm, Conv1d, Graph, Linear, Lstm, Mode, ParamStore, Scalar, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, ReconReduction};

/// Conv → batch norm → tanh over `[N, C, T]`.
#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv1d,
    bn: BatchNorm1d,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        index: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Conv1d::new(store, &format!("{name}.conv.{index}"), c_in, c_out, kernel, stride, kernel / 2, rng)?;
        let bn = BatchNorm1d::new(store, &format!("{name}.bn.{index}"), c_out)?;
        Ok(Self { conv, bn })
    }

    fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &mut ParamStore<F>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, mode)?;
        Ok(g.tanh(y)?)
    }
}

/// Graph handles of an encoder posterior for a batch of segments, each `[N, k]`.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mu_s: Var,
    pub logvar_s: Var,
    pub mu_c: Var,
    pub logvar_c: Var,
}

/// Graph handles of one loss evaluation. All are scalars averaged over pairs.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    /// Decoder reconstruction term of the ELBO.
    pub elbo_recon: Var,
    /// L1 term on the post-net output.
    pub postnet_recon: Var,
    /// KL of the shared speaker block, counted once per input.
    pub kl_s: Var,
    pub kl_c: Var,
    pub coarse: Var,
    pub refined: Var,
}

/// A batch of same-speaker pairs laid out as `[2B, frames, mels]`: rows
/// `0..B` hold the first segment of each pair, rows `B..2B` the second.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch<F> {
    pub pairs: usize,
    pub data: Vec<F>,
}

/// Standard-normal draws for one loss evaluation: one speaker draw per pair
/// (shared by both segments) and one content draw per segment.
#[derive(Clone, Debug, PartialEq)]
pub struct PairNoise<F> {
    pub eps_s: Vec<F>,
    pub eps_c: Vec<F>,
}

impl<F: Scalar> PairNoise<F> {
    pub fn sample<R: Rng>(cfg: &ModelConfig, pairs: usize, rng: &mut R) -> Self {
        let mut draw = |n: usize| -> Vec<F> {
            (0..n)
                .map(|_| F::lit(rng.sample::<f64, _>(rand_distr::StandardNormal)))
                .collect()
        };
        let eps_s = draw(pairs * cfg.k1);
        let eps_c = draw(2 * pairs * cfg.k2);
        Self { eps_s, eps_c }
    }

    pub fn zeros(cfg: &ModelConfig, pairs: usize) -> Self {
        Self {
            eps_s: vec![F::zero(); pairs * cfg.k1],
            eps_c: vec![F::zero(); 2 * pairs * cfg.k2],
        }
    }
}

/// Encoder, decoder and post-net. Holds only parameter handles; values live
/// in a [`ParamStore`] built alongside.
#[derive(Clone, Debug)]
pub struct DisentangledVae {
    pub config: ModelConfig,
    enc_convs: Vec<ConvBlock>,
    enc_lstm: BiLstm,
    enc_fc: Linear,
    head_mu_c: Linear,
    head_logvar_c: Linear,
    head_mu_s: Linear,
    head_logvar_s: Linear,
    dec_fc1: Linear,
    dec_fc2: Linear,
    dec_lstm1: Lstm,
    dec_convs: Vec<ConvBlock>,
    dec_lstm2: Lstm,
    dec_out: Linear,
    post_blocks: Vec<ConvBlock>,
    post_out: Conv1d,
}

impl DisentangledVae {
    pub fn new<F: Scalar, R: Rng>(config: ModelConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let k = c.kernel;
        let mut enc_convs = Vec::new();
        let mut c_in = c.n_mels;
        for (i, stride) in [2, 2, 1].into_iter().enumerate() {
            enc_convs.push(ConvBlock::new(store, "encoder", i, c_in, c.enc_conv_channels, k, stride, rng)?);
            c_in = c.enc_conv_channels;
        }
        let enc_lstm = BiLstm::new(store, "encoder.lstm", c_in, c.enc_lstm_hidden, c.enc_lstm_layers, rng)?;
        let enc_fc = Linear::new(store, "encoder.fc", c.flatten_width(), c.enc_fc, rng)?;
        let head_mu_c = Linear::new(store, "encoder.mu_c", c.enc_fc, c.k2, rng)?;
        let head_logvar_c = Linear::new(store, "encoder.logvar_c", c.enc_fc, c.k2, rng)?;
        let head_mu_s = Linear::new(store, "encoder.mu_s", c.enc_fc, c.k1, rng)?;
        let head_logvar_s = Linear::new(store, "encoder.logvar_s", c.enc_fc, c.k1, rng)?;

        let dec_fc1 = Linear::new(store, "decoder.fc.0", c.latent_dim(), c.dec_fc, rng)?;
        let dec_fc2 = Linear::new(store, "decoder.fc.1", c.dec_fc, c.coarse_frames() * c.dec_frame_width, rng)?;
        let dec_lstm1 = Lstm::new(store, "decoder.lstm.0", c.dec_frame_width, c.dec_lstm1_hidden, 1, rng)?;
        let mut dec_convs = Vec::new();
        let mut c_in = c.dec_lstm1_hidden;
        for i in 0..3 {
            dec_convs.push(ConvBlock::new(store, "decoder", i, c_in, c.dec_conv_channels, k, 1, rng)?);
            c_in = c.dec_conv_channels;
        }
        let dec_lstm2 = Lstm::new(store, "decoder.lstm.1", c_in, c.dec_lstm2_hidden, c.dec_lstm2_layers, rng)?;
        let dec_out = Linear::new(store, "decoder.out", c.dec_lstm2_hidden, c.n_mels, rng)?;

        let mut post_blocks = Vec::new();
        let mut c_in = c.n_mels;
        for i in 0..c.postnet_layers - 1 {
            post_blocks.push(ConvBlock::new(store, "postnet", i, c_in, c.postnet_channels, k, 1, rng)?);
            c_in = c.postnet_channels;
        }
        let post_out = Conv1d::new(
            store,
            &format!("postnet.conv.{}", c.postnet_layers - 1),
            c_in,
            c.n_mels,
            k,
            1,
            k / 2,
            rng,
        )?;
        Ok(Self {
            config,
            enc_convs,
            enc_lstm,
            enc_fc,
            head_mu_c,
            head_logvar_c,
            head_mu_s,
            head_logvar_s,
            dec_fc1,
            dec_fc2,
            dec_lstm1,
            dec_convs,
            dec_lstm2,
            dec_out,
            post_blocks,
            post_out,
        })
    }

    fn check_segments<F: Scalar>(&self, g: &Graph<F>, x: Var) -> Result<usize> {
        let s = g.shape(x);
        let c = &self.config;
        if s.len() != 3 || s[1] != c.segment_frames || s[2] != c.n_mels {
            return Err(Error::Length(format!(
                "expected segments of shape [N, {}, {}], got {s:?}",
                c.segment_frames, c.n_mels
            )));
        }
        Ok(s[0])
    }

    /// `[N, frames, mels]` segments to posterior parameters.
    pub fn encode<F: Scalar>(&self, g: &mut Graph<F>, store: &mut ParamStore<F>, x: Var, mode: Mode) -> Result<PosteriorVars> {
        let n = self.check_segments(g, x)?;
        let mut h = g.swap_last(x)?;
        for block in &self.enc_convs {
            h = block.forward(g, store, h, mode)?;
        }
        let h = g.swap_last(h)?;
        let h = self.enc_lstm.forward(g, store, h)?;
        let h = g.reshape(h, &[n, self.config.flatten_width()])?;
        let h = self.enc_fc.forward(g, store, h)?;
        let h = g.tanh(h)?;
        let lim = F::lit(self.config.logvar_limit);
        let mu_c = self.head_mu_c.forward(g, store, h)?;
        let logvar_c = self.head_logvar_c.forward(g, store, h)?;
        let logvar_c = g.clamp(logvar_c, -lim, lim)?;
        let mu_s = self.head_mu_s.forward(g, store, h)?;
        let logvar_s = self.head_logvar_s.forward(g, store, h)?;
        let logvar_s = g.clamp(logvar_s, -lim, lim)?;
        Ok(PosteriorVars {
            mu_s,
            logvar_s,
            mu_c,
            logvar_c,
        })
    }

    /// `[N, k1 + k2]` latents to coarse spectrograms `[N, frames, mels]`.
    pub fn decode<F: Scalar>(&self, g: &mut Graph<F>, store: &mut ParamStore<F>, z: Var, mode: Mode) -> Result<Var> {
        let c = &self.config;
        let s = g.shape(z).to_vec();
        if s.len() != 2 || s[1] != c.latent_dim() {
            return Err(Error::Length(format!("expected latents [N, {}], got {s:?}", c.latent_dim())));
        }
        let n = s[0];
        let h = self.dec_fc1.forward(g, store, z)?;
        let h = g.tanh(h)?;
        let h = self.dec_fc2.forward(g, store, h)?;
        let h = g.reshape(h, &[n, c.coarse_frames(), c.dec_frame_width])?;
        let h = g.repeat_frames(h, c.segment_frames / c.coarse_frames())?;
        let h = self.dec_lstm1.forward(g, store, h)?;
        let mut h = g.swap_last(h)?;
        for block in &self.dec_convs {
            h = block.forward(g, store, h, mode)?;
        }
        let h = g.swap_last(h)?;
        let h = self.dec_lstm2.forward(g, store, h)?;
        Ok(self.dec_out.forward(g, store, h)?)
    }

    /// Residual predicted by the post-net for coarse spectrograms
    /// `[N, frames, mels]`; the refined output is `coarse + residual`.
    pub fn postnet<F: Scalar>(&self, g: &mut Graph<F>, store: &mut ParamStore<F>, coarse: Var, mode: Mode) -> Result<Var> {
        self.check_segments(g, coarse)?;
        let mut h = g.swap_last(coarse)?;
        for block in &self.post_blocks {
            h = block.forward(g, store, h, mode)?;
        }
        let h = self.post_out.forward(g, store, h)?;
        Ok(g.swap_last(h)?)
    }

    /// Training objective for a batch of pairs, averaged over pairs.
    pub fn pair_loss<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &mut ParamStore<F>,
        batch: &PairBatch<F>,
        noise: &PairNoise<F>,
        mode: Mode,
    ) -> Result<LossVars> {
        let c = &self.config;
        let b = batch.pairs;
        if b == 0 || batch.data.len() != 2 * b * c.segment_len() {
            return Err(Error::Length(format!(
                "{} values for {b} pairs of {}×{} segments",
                batch.data.len(),
                c.segment_frames,
                c.n_mels
            )));
        }
        if noise.eps_s.len() != b * c.k1 || noise.eps_c.len() != 2 * b * c.k2 {
            return Err(Error::Length("noise does not match batch".into()));
        }
        let x = g.constant(&[2 * b, c.segment_frames, c.n_mels], batch.data.clone())?;
        let post = self.encode(g, store, x, mode)?;

        // Shared speaker block per pair.
        let mu_s1 = g.slice(post.mu_s, 0, 0, b)?;
        let mu_s2 = g.slice(post.mu_s, 0, b, 2 * b)?;
        let lv_s1 = g.slice(post.logvar_s, 0, 0, b)?;
        let lv_s2 = g.slice(post.logvar_s, 0, b, 2 * b)?;
        let mu_sum = g.add(mu_s1, mu_s2)?;
        let mu_s = g.scale(mu_sum, F::lit(0.5))?;
        let lv_s = g.log_mean_exp(lv_s1, lv_s2)?;

        let eps_s = g.constant(&[b, c.k1], noise.eps_s.clone())?;
        let z_s = self.sample(g, mu_s, lv_s, eps_s)?;
        let eps_c = g.constant(&[2 * b, c.k2], noise.eps_c.clone())?;
        let z_c = self.sample(g, post.mu_c, post.logvar_c, eps_c)?;
        let z_s_both = g.concat(&[z_s, z_s], 0)?;
        let z = g.concat(&[z_s_both, z_c], 1)?;

        let coarse = self.decode(g, store, z, mode)?;
        let residual = self.postnet(g, store, coarse, mode)?;
        let refined = g.add(coarse, residual)?;

        let per_pair = F::lit(1.0 / b as f64);
        let entries = F::lit(c.segment_len() as f64);
        let diff = g.sub(coarse, x)?;
        let sq = g.square(diff)?;
        let sq = g.sum(sq)?;
        let elbo_recon = match c.recon_reduction {
            ReconReduction::Mean => g.scale(sq, per_pair / entries)?,
            ReconReduction::GaussianNll => g.scale(sq, per_pair * F::lit(0.5))?,
        };
        let diff = g.sub(refined, x)?;
        let abs = g.abs_sum(diff)?;
        let postnet_recon = g.scale(abs, per_pair / entries)?;

        // The shared speaker block enters both inputs' KL terms.
        let kl_s = kl_sum(g, mu_s, lv_s)?;
        let kl_s = g.scale(kl_s, F::lit(2.0) * per_pair)?;
        let kl_c = kl_sum(g, post.mu_c, post.logvar_c)?;
        let kl_c = g.scale(kl_c, per_pair)?;

        let kl = g.add(kl_s, kl_c)?;
        let weighted = g.scale(kl, F::lit(c.beta))?;
        let recon = g.add(elbo_recon, postnet_recon)?;
        let total = g.add(recon, weighted)?;
        Ok(LossVars {
            total,
            elbo_recon,
            postnet_recon,
            kl_s,
            kl_c,
            coarse,
            refined,
        })
    }

    fn sample<F: Scalar>(&self, g: &mut Graph<F>, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
        let half = g.scale(logvar, F::lit(0.5))?;
        let sigma = g.exp(half)?;
        let noise = g.mul(sigma, eps)?;
        Ok(g.add(mu, noise)?)
    }
}

/// `0.5·Σ(μ² + e^{logvar} − 1 − logvar)` over every entry.
pub fn kl_sum<F: Scalar>(g: &mut Graph<F>, mu: Var, logvar: Var) -> Result<Var> {
    let count = g.value(mu).len() as f64;
    let mu2 = g.square(mu)?;
    let ev = g.exp(logvar)?;
    let a = g.add(mu2, ev)?;
    let a = g.sub(a, logvar)?;
    let s = g.sum(a)?;
    let s = g.add_scalar(s, F::lit(-count))?;
    Ok(g.scale(s, F::lit(0.5))?)
}
