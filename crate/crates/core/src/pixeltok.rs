//! Sliding-window image tokens.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::textimage::SentenceImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub h: usize,
    pub w: usize,
    pub s: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { h: 32, w: 32, s: 16 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.s == 0 || self.s > self.w {
            return config(format!(
                "window needs h, w > 0 and 0 < s <= w, got h={} w={} s={}",
                self.h, self.w, self.s
            ));
        }
        Ok(())
    }
}

/// Number of windows covering `width` columns.
pub fn window_count(width: usize, cfg: &WindowConfig) -> usize {
    if width <= cfg.w {
        1
    } else {
        (width - cfg.w).div_ceil(cfg.s) + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// Each window is row-major `h x w`.
    pub windows: Vec<Vec<f32>>,
    pub source_width: usize,
}

impl TokenSequence {
    pub fn n_tokens(&self) -> usize {
        self.windows.len()
    }
}

pub fn tokenize(img: &SentenceImage, cfg: &WindowConfig) -> Result<TokenSequence> {
    cfg.validate()?;
    if img.height != cfg.h {
        return config(format!(
            "image height {} does not match window height {}",
            img.height, cfg.h
        ));
    }
    let n = window_count(img.width, cfg);
    let windows = (0..n)
        .map(|k| {
            let x0 = k * cfg.s;
            let mut win = vec![0.0f32; cfg.h * cfg.w];
            let cols = img.width.saturating_sub(x0).min(cfg.w);
            for y in 0..cfg.h {
                let src = &img.pixels[y * img.width + x0..][..cols];
                win[y * cfg.w..][..cols].copy_from_slice(src);
            }
            win
        })
        .collect();
    Ok(TokenSequence {
        windows,
        source_width: img.width,
    })
}

/// Padded batch of window sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelBatch {
    /// `[B, t_max, h, w]`, row-major.
    pub data: Vec<f32>,
    /// `[B, t_max]`, true at padding.
    pub pad_mask: Vec<bool>,
    pub lang_tags: Vec<String>,
    pub batch: usize,
    pub t_max: usize,
    pub h: usize,
    pub w: usize,
}

impl PixelBatch {
    pub fn lengths(&self) -> Vec<usize> {
        self.pad_mask
            .chunks(self.t_max)
            .map(|r| r.iter().filter(|&&p| !p).count())
            .collect()
    }

    pub fn window(&self, b: usize, t: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.data[(b * self.t_max + t) * n..][..n]
    }
}

pub fn collate(seqs: &[&TokenSequence], tags: &[String], cfg: &WindowConfig) -> Result<PixelBatch> {
    if seqs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if tags.len() != seqs.len() {
        return config(format!("{} tags for {} sequences", tags.len(), seqs.len()));
    }
    let n = cfg.h * cfg.w;
    let t_max = seqs.iter().map(|s| s.n_tokens()).max().unwrap_or(1);
    let mut data = vec![0.0f32; seqs.len() * t_max * n];
    let mut pad_mask = vec![true; seqs.len() * t_max];
    for (b, s) in seqs.iter().enumerate() {
        for (t, win) in s.windows.iter().enumerate() {
            if win.len() != n {
                return config(format!("window of {} values, expected {n}", win.len()));
            }
            data[(b * t_max + t) * n..][..n].copy_from_slice(win);
            pad_mask[b * t_max + t] = false;
        }
    }
    Ok(PixelBatch {
        data,
        pad_mask,
        lang_tags: tags.to_vec(),
        batch: seqs.len(),
        t_max,
        h: cfg.h,
        w: cfg.w,
    })
}
