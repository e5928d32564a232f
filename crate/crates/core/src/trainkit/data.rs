use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{temperature_probs, ParallelCorpus, SamplerConfig};
use crate::error::{config, Error, Result};
use crate::model::{SourceInput, SubwordBatch, TargetBatch};
use crate::pixeltok::{window_count, PixelBatch, WindowConfig};
use crate::subword::SubwordModel;
use crate::textimage::{quantize, render_sentence, FontAtlas, RenderConfig};

/// How source text becomes model input.
#[derive(Clone, Copy, Debug)]
pub enum SourceSide<'a> {
    Pixel {
        atlas: &'a FontAtlas,
        render: &'a RenderConfig,
        window: WindowConfig,
    },
    Subword(&'a SubwordModel),
}

/// Stored source. Pixel images are kept quantized and windowed on demand.
#[derive(Clone, Debug, PartialEq)]
pub enum SourceRep {
    Pixel { width: usize, pixels: Vec<u8> },
    Ids(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub lang: usize,
    pub src: SourceRep,
    pub tgt: Vec<u32>,
    /// Source tokens: windows or subword ids.
    pub src_tokens: usize,
}

impl Prepared {
    /// Budget cost: source tokens plus target tokens with EOS.
    pub fn cost(&self) -> usize {
        self.src_tokens + self.tgt.len() + 1
    }
}

/// A corpus converted to model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub langs: Vec<String>,
    pub items: Vec<Prepared>,
    /// Set for pixel data.
    pub window: Option<WindowConfig>,
}

/// Renders or segments one source sentence.
pub fn prepare_source(text: &str, lang: &str, side: &SourceSide<'_>) -> Result<(SourceRep, usize)> {
    match side {
        SourceSide::Pixel { atlas, render, window } => {
            if render.canvas_height as usize != window.h {
                return config("canvas height must equal window height");
            }
            let img = render_sentence(text, atlas, render)?;
            let n = window_count(img.width, window);
            let pixels = img.pixels.iter().map(|&v| quantize(v)).collect();
            Ok((
                SourceRep::Pixel {
                    width: img.width,
                    pixels,
                },
                n,
            ))
        }
        SourceSide::Subword(m) => {
            if text.trim().is_empty() {
                return Err(Error::EmptyInput);
            }
            let ids = m.encode_lang(text, Some(lang));
            let n = ids.len().max(1);
            Ok((SourceRep::Ids(ids), n))
        }
    }
}

impl Dataset {
    pub fn prepare(corpus: &ParallelCorpus, side: &SourceSide<'_>, tgt_vocab: &SubwordModel) -> Result<Self> {
        let mut items = Vec::with_capacity(corpus.len());
        for e in &corpus.examples {
            let lang = corpus
                .langs
                .iter()
                .position(|l| *l == e.lang)
                .expect("declared language");
            let (src, src_tokens) = prepare_source(&e.source, &e.lang, side)?;
            items.push(Prepared {
                lang,
                src,
                tgt: tgt_vocab.encode(&e.target),
                src_tokens,
            });
        }
        let window = match side {
            SourceSide::Pixel { window, .. } => Some(*window),
            SourceSide::Subword(_) => None,
        };
        Ok(Self {
            langs: corpus.langs.clone(),
            items,
            window,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.langs.len()];
        for it in &self.items {
            c[it.lang] += 1;
        }
        c
    }

    pub fn total_cost(&self) -> usize {
        self.items.iter().map(Prepared::cost).sum()
    }

    /// Source input for the given examples.
    pub fn source(&self, idx: &[usize]) -> Result<SourceInput> {
        if idx.is_empty() {
            return Err(Error::EmptyBatch);
        }
        match self.window {
            Some(win) => {
                let n = win.h * win.w;
                let t_max = idx.iter().map(|&i| self.items[i].src_tokens).max().unwrap_or(1);
                let mut data = vec![0.0f32; idx.len() * t_max * n];
                let mut pad_mask = vec![true; idx.len() * t_max];
                for (b, &i) in idx.iter().enumerate() {
                    let it = &self.items[i];
                    let SourceRep::Pixel { width, pixels } = &it.src else {
                        return config("subword item in a pixel dataset");
                    };
                    for t in 0..it.src_tokens {
                        let x0 = t * win.s;
                        let cols = width.saturating_sub(x0).min(win.w);
                        let out = &mut data[(b * t_max + t) * n..][..n];
                        for y in 0..win.h {
                            let row = &pixels[y * width + x0..][..cols];
                            for (o, &p) in out[y * win.w..][..cols].iter_mut().zip(row) {
                                *o = p as f32 / 255.0;
                            }
                        }
                        pad_mask[b * t_max + t] = false;
                    }
                }
                Ok(SourceInput::Pixel(PixelBatch {
                    data,
                    pad_mask,
                    lang_tags: idx.iter().map(|&i| self.langs[self.items[i].lang].clone()).collect(),
                    batch: idx.len(),
                    t_max,
                    h: win.h,
                    w: win.w,
                }))
            }
            None => {
                let seqs = idx
                    .iter()
                    .map(|&i| match &self.items[i].src {
                        SourceRep::Ids(ids) => Ok(ids.clone()),
                        SourceRep::Pixel { .. } => config("pixel item in a subword dataset"),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SourceInput::Subword(SubwordBatch::from_sequences(&seqs)?))
            }
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(SourceInput, TargetBatch)> {
        let src = self.source(idx)?;
        let tgt: Vec<Vec<u32>> = idx.iter().map(|&i| self.items[i].tgt.clone()).collect();
        Ok((src, TargetBatch::from_sequences(&tgt)?))
    }

    /// In-order batches under the token budget, for evaluation.
    pub fn sequential_batches(&self, budget: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut cur = Vec::new();
        let mut used = 0;
        for (i, it) in self.items.iter().enumerate() {
            if !cur.is_empty() && used + it.cost() > budget {
                out.push(std::mem::take(&mut cur));
                used = 0;
            }
            cur.push(i);
            used += it.cost();
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }
}

/// Endless stream of example-index batches. Each slot draws a language from
/// the temperature distribution, then the next example from that language's
/// shuffled pool.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    pub probs: Vec<f64>,
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    costs: Vec<usize>,
    budget: usize,
    rng: ChaCha8Rng,
    pending: Option<usize>,
}

impl BatchSampler {
    /// `langs[i]` and `costs[i]` describe example `i`.
    pub fn new(langs: &[usize], costs: &[usize], n_langs: usize, budget: usize, cfg: &SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        if langs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if budget == 0 {
            return config("batch token budget must be positive");
        }
        let mut pools = vec![Vec::new(); n_langs];
        for (i, &l) in langs.iter().enumerate() {
            pools[l].push(i);
        }
        let counts: Vec<f64> = pools.iter().map(|p| p.len() as f64).collect();
        let probs = temperature_probs(&counts, cfg.temperature)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for p in &mut pools {
            p.shuffle(&mut rng);
        }
        Ok(Self {
            probs,
            cursors: vec![0; n_langs],
            pools,
            costs: costs.to_vec(),
            budget,
            rng,
            pending: None,
        })
    }

    pub fn for_dataset(ds: &Dataset, budget: usize, cfg: &SamplerConfig) -> Result<Self> {
        let langs: Vec<usize> = ds.items.iter().map(|i| i.lang).collect();
        let costs: Vec<usize> = ds.items.iter().map(Prepared::cost).collect();
        Self::new(&langs, &costs, ds.langs.len(), budget, cfg)
    }

    pub fn draw_lang(&mut self) -> usize {
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (l, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = l;
                if u < acc {
                    return l;
                }
            }
        }
        last
    }

    fn draw_example(&mut self) -> usize {
        let l = self.draw_lang();
        if self.cursors[l] == self.pools[l].len() {
            let rng = &mut self.rng;
            self.pools[l].shuffle(rng);
            self.cursors[l] = 0;
        }
        let i = self.pools[l][self.cursors[l]];
        self.cursors[l] += 1;
        i
    }

    /// Packs examples until the next one would exceed the budget. The
    /// overflowing example opens the following batch. A batch always holds
    /// at least one example.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::new();
        let mut used = 0;
        loop {
            let i = match self.pending.take() {
                Some(i) => i,
                None => self.draw_example(),
            };
            if !batch.is_empty() && used + self.costs[i] > self.budget {
                self.pending = Some(i);
                return batch;
            }
            used += self.costs[i];
            batch.push(i);
            if used >= self.budget {
                return batch;
            }
        }
    }
}
