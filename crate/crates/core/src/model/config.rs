use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::pixeltok::WindowConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceMode {
    Pixel,
    Subword,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub source_mode: SourceMode,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub ff_width: usize,
    pub heads: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    /// Source vocabulary size; subword mode only.
    pub v_src: Option<usize>,
    pub v_tgt: usize,
    pub window: WindowConfig,
    pub conv_channels: usize,
    /// Share the target embedding with the output projection.
    #[serde(default)]
    pub tie_target: bool,
}

impl ModelConfig {
    pub fn pixel(enc: usize, dec: usize, d: usize, ff: usize, heads: usize, v_tgt: usize) -> Self {
        Self {
            source_mode: SourceMode::Pixel,
            enc_layers: enc,
            dec_layers: dec,
            d_model: d,
            ff_width: ff,
            heads,
            dropout: 0.1,
            label_smoothing: 0.2,
            v_src: None,
            v_tgt,
            window: WindowConfig::default(),
            conv_channels: 1,
            tie_target: false,
        }
    }

    pub fn subword(enc: usize, dec: usize, d: usize, ff: usize, heads: usize, v_src: usize, v_tgt: usize) -> Self {
        Self {
            source_mode: SourceMode::Subword,
            v_src: Some(v_src),
            ..Self::pixel(enc, dec, d, ff, heads, v_tgt)
        }
    }

    /// Named presets for the full-size TED-7 and TED-59 settings.
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "ted7-pixel" => Self::pixel(12, 3, 512, 4096, 4, 5000),
            "ted7-bpe" => Self::subword(6, 6, 512, 1024, 4, 35000, 5000),
            "ted59-pixel" => Self::pixel(15, 6, 512, 4096, 8, 10000),
            "ted59-bpe" => Self::subword(6, 6, 512, 2048, 8, 64000, 10000),
            _ => return None,
        })
    }

    pub const PRESETS: [&'static str; 4] = ["ted7-pixel", "ted7-bpe", "ted59-pixel", "ted59-bpe"];

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    /// Height of the conv output for a 3x1 valid kernel.
    pub fn conv_out_height(&self) -> usize {
        self.window.h.saturating_sub(2)
    }

    pub fn projection_in(&self) -> usize {
        self.conv_channels * self.conv_out_height() * self.window.w
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return config(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.ff_width == 0 {
            return config("layer counts and ff_width must be positive");
        }
        if self.v_tgt <= 4 {
            return config("v_tgt must exceed the 4 special tokens");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return config("dropout must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return config("label_smoothing must be in [0, 1]");
        }
        match (self.source_mode, self.v_src) {
            (SourceMode::Pixel, Some(_)) => return config("pixel mode has no v_src"),
            (SourceMode::Subword, None) => return config("subword mode needs v_src"),
            (SourceMode::Subword, Some(v)) if v <= 4 => return config("v_src must exceed the 4 special tokens"),
            _ => {}
        }
        if self.source_mode == SourceMode::Pixel {
            self.window.validate()?;
            if self.window.h < 3 || self.conv_channels == 0 {
                return config("pixel mode needs window.h >= 3 and conv_channels > 0");
            }
        }
        Ok(())
    }
}

/// Closed-form parameter count.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let ff = cfg.ff_width;
    let attn = 4 * d * d + 4 * d;
    let ffn = 2 * d * ff + ff + d;
    let ln = 2 * d;
    let enc = cfg.enc_layers * (attn + ffn + 2 * ln) + ln;
    let dec = cfg.dec_layers * (2 * attn + ffn + 3 * ln) + ln;
    let tgt_emb = cfg.v_tgt * d;
    let out = if cfg.tie_target {
        cfg.v_tgt
    } else {
        d * cfg.v_tgt + cfg.v_tgt
    };
    src_embedder_params(cfg) + enc + dec + tgt_emb + out
}

/// Parameters of the source embedder alone.
pub fn src_embedder_params(cfg: &ModelConfig) -> usize {
    match cfg.source_mode {
        SourceMode::Subword => cfg.v_src.unwrap_or(0) * cfg.d_model,
        SourceMode::Pixel => {
            let c = cfg.conv_channels;
            // conv kernel, batch-norm affine, projection with bias
            c * 3 + 2 * c + cfg.projection_in() * cfg.d_model + cfg.d_model
        }
    }
}
