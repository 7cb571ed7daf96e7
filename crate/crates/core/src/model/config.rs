use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the decoder's reconstruction term is reduced over the 64×80 entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconReduction {
    /// Mean squared error over entries.
    Mean,
    /// Unit-variance Gaussian negative log-likelihood, `0.5·Σ(x − x̃)²`.
    GaussianNll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Speaker block size.
    pub k1: usize,
    /// Content block size.
    pub k2: usize,
    pub segment_frames: usize,
    pub n_mels: usize,
    pub beta: f64,
    pub recon_reduction: ReconReduction,
    pub logvar_limit: f64,

    pub kernel: usize,
    pub enc_conv_channels: usize,
    pub enc_lstm_hidden: usize,
    pub enc_lstm_layers: usize,
    pub enc_fc: usize,

    pub dec_fc: usize,
    /// Width of each of the `segment_frames / 4` frames the latent expands into.
    pub dec_frame_width: usize,
    pub dec_lstm1_hidden: usize,
    pub dec_conv_channels: usize,
    pub dec_lstm2_hidden: usize,
    pub dec_lstm2_layers: usize,

    pub postnet_channels: usize,
    pub postnet_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k1: 8,
            k2: 56,
            segment_frames: 64,
            n_mels: 80,
            beta: 1.0,
            recon_reduction: ReconReduction::Mean,
            logvar_limit: 8.0,
            kernel: 5,
            enc_conv_channels: 512,
            enc_lstm_hidden: 64,
            enc_lstm_layers: 2,
            enc_fc: 256,
            dec_fc: 256,
            dec_frame_width: 128,
            dec_lstm1_hidden: 512,
            dec_conv_channels: 512,
            dec_lstm2_hidden: 1024,
            dec_lstm2_layers: 2,
            postnet_channels: 512,
            postnet_layers: 5,
        }
    }
}

impl ModelConfig {
    /// Same topology with narrow layers, sized for single-core CPU runs.
    /// The reconstruction term is the summed Gaussian log-likelihood: with
    /// the per-entry mean, the KL term dominates a small run and the
    /// posterior collapses onto the prior.
    pub fn toy() -> Self {
        Self {
            recon_reduction: ReconReduction::GaussianNll,
            enc_conv_channels: 64,
            enc_lstm_hidden: 32,
            enc_fc: 128,
            dec_fc: 128,
            dec_frame_width: 32,
            dec_lstm1_hidden: 64,
            dec_conv_channels: 64,
            dec_lstm2_hidden: 128,
            postnet_channels: 64,
            ..Self::default()
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.k1 + self.k2
    }

    /// Frames left after the two stride-2 encoder convolutions.
    pub fn coarse_frames(&self) -> usize {
        self.segment_frames / 4
    }

    pub fn flatten_width(&self) -> usize {
        self.coarse_frames() * 2 * self.enc_lstm_hidden
    }

    pub fn segment_len(&self) -> usize {
        self.segment_frames * self.n_mels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k1", self.k1),
            ("k2", self.k2),
            ("enc_conv_channels", self.enc_conv_channels),
            ("enc_lstm_hidden", self.enc_lstm_hidden),
            ("enc_lstm_layers", self.enc_lstm_layers),
            ("enc_fc", self.enc_fc),
            ("dec_fc", self.dec_fc),
            ("dec_frame_width", self.dec_frame_width),
            ("dec_lstm1_hidden", self.dec_lstm1_hidden),
            ("dec_conv_channels", self.dec_conv_channels),
            ("dec_lstm2_hidden", self.dec_lstm2_hidden),
            ("dec_lstm2_layers", self.dec_lstm2_layers),
            ("postnet_channels", self.postnet_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Param(format!("model.{name} must be positive")));
        }
        if self.segment_frames == 0 || self.segment_frames % 4 != 0 {
            return Err(Error::Param(format!(
                "model.segment_frames {} must be a positive multiple of 4",
                self.segment_frames
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Param(format!("model.kernel {} must be odd", self.kernel)));
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return Err(Error::Param(format!("model.beta {} must be >= 1", self.beta)));
        }
        if !(self.logvar_limit > 0.0) {
            return Err(Error::Param("model.logvar_limit must be positive".into()));
        }
        if self.postnet_layers < 2 {
            return Err(Error::Param("model.postnet_layers must be at least 2".into()));
        }
        Ok(())
    }
}
