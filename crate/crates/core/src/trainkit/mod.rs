//! Corpora, language sampling, batching, training and finetuning.

mod data;
mod synth;
mod train;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{prepare_source, BatchSampler, Dataset, Prepared, SourceRep, SourceSide};
pub use synth::{make_synthetic_corpus, script_map, Script, SynthSpec, Task, LEXICON};
pub use train::{
    evaluate, finetune, observe_validation, source_side, train, translate_dataset, EvalReport, FinetuneMode,
    TrainOutcome, Verdict,
};

use crate::error::{config, format_err, PathContext, Result};

/// `p_l ∝ (n_l / Σn)^(1/T)`. Zero counts get probability 0 and a warning.
/// `T = ∞` yields the uniform distribution over non-empty languages.
pub fn temperature_probs(counts: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature.is_nan() || temperature < 1.0 {
        return config(format!("temperature must be >= 1, got {temperature}"));
    }
    if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return config("language counts must be finite and non-negative");
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return config("all language counts are zero");
    }
    for (i, &c) in counts.iter().enumerate() {
        if c == 0.0 {
            log::warn!("language {i} has no examples and is excluded from sampling");
        }
    }
    let inv_t = 1.0 / temperature;
    let w: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if c == 0.0 {
                0.0
            } else if temperature.is_infinite() {
                1.0
            } else {
                (c / total).powf(inv_t)
            }
        })
        .collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub lang: String,
    pub source: String,
    pub target: String,
}

/// Parallel examples with a declared language set.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub langs: Vec<String>,
    pub examples: Vec<Example>,
}

impl ParallelCorpus {
    /// Languages are declared in order of first appearance.
    pub fn from_examples(examples: Vec<Example>) -> Self {
        let mut langs: Vec<String> = Vec::new();
        for e in &examples {
            if !langs.contains(&e.lang) {
                langs.push(e.lang.clone());
            }
        }
        Self { langs, examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Per-language example counts `n_l`, in `langs` order.
    pub fn counts(&self) -> Vec<usize> {
        let mut m: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &self.examples {
            *m.entry(&e.lang).or_default() += 1;
        }
        self.langs
            .iter()
            .map(|l| m.get(l.as_str()).copied().unwrap_or(0))
            .collect()
    }

    pub fn for_lang(&self, lang: &str) -> Self {
        Self::from_examples(self.examples.iter().filter(|e| e.lang == lang).cloned().collect())
    }

    pub fn sources(&self) -> Vec<&str> {
        self.examples.iter().map(|e| e.source.as_str()).collect()
    }

    pub fn targets(&self) -> Vec<&str> {
        self.examples.iter().map(|e| e.target.as_str()).collect()
    }

    /// Seeded sample without replacement. Sizes above the corpus size return
    /// the whole corpus with a warning.
    pub fn sample(&self, n: usize, seed: u64) -> Self {
        if n >= self.len() {
            if n > self.len() {
                log::warn!("sample size {n} exceeds corpus size {}; using all examples", self.len());
            }
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut keep = idx[..n].to_vec();
        keep.sort_unstable();
        Self {
            langs: self.langs.clone(),
            examples: keep.into_iter().map(|i| self.examples[i].clone()).collect(),
        }
    }

    /// Deterministic split: every `k`-th example per language goes to the
    /// second part, for `k = round(1 / fraction)`.
    pub fn split(&self, fraction: f64) -> (Self, Self) {
        let k = (1.0 / fraction.clamp(1e-6, 1.0)).round().max(1.0) as usize;
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for e in &self.examples {
            let c = seen.entry(e.lang.clone()).or_default();
            if *c % k == k - 1 {
                b.push(e.clone());
            } else {
                a.push(e.clone());
            }
            *c += 1;
        }
        (
            Self {
                langs: self.langs.clone(),
                examples: a,
            },
            Self {
                langs: self.langs.clone(),
                examples: b,
            },
        )
    }

    /// `lang<TAB>source<TAB>target` per line.
    pub fn write_tsv(&self, w: &mut impl Write) -> Result<()> {
        for e in &self.examples {
            writeln!(w, "{}\t{}\t{}", e.lang, e.source, e.target)?;
        }
        Ok(())
    }

    pub fn read_tsv(r: impl BufRead) -> Result<Self> {
        let mut examples = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return format_err("corpus", format!("line {}: expected 3 tab-separated fields", i + 1));
            }
            examples.push(Example {
                lang: parts[0].to_string(),
                source: parts[1].to_string(),
                target: parts[2].to_string(),
            });
        }
        Ok(Self::from_examples(examples))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf)?;
        std::fs::write(path, buf).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).at(path)?;
        Self::read_tsv(std::io::BufReader::new(f))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 5.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature < 1.0 {
            return config("sampler.temperature must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Source plus target tokens per batch.
    pub batch_tokens: usize,
    pub validate_every: u64,
    /// Non-improving validations tolerated before stopping.
    pub patience: usize,
    pub max_steps: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Hold the peak rate after warm-up instead of inverse-sqrt decay.
    pub constant_lr: bool,
    pub clip_norm: Option<f64>,
    pub log_every: u64,
    /// Decoding length cap when translating validation or test data.
    pub max_len: usize,
    pub finetune: FinetuneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_tokens: 4000,
            validate_every: 200,
            patience: 10,
            max_steps: 5000,
            peak_lr: 5e-4,
            warmup_steps: 4000,
            constant_lr: false,
            clip_norm: None,
            log_every: 50,
            max_len: 64,
            finetune: FinetuneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_tokens == 0 || self.validate_every == 0 || self.patience == 0 {
            return config("train: batch_tokens, validate_every and patience must be positive");
        }
        if self.max_steps == 0 || self.log_every == 0 || self.max_len == 0 {
            return config("train: max_steps, log_every and max_len must be positive");
        }
        if self.peak_lr.is_nan() || self.peak_lr <= 0.0 {
            return config("train.peak_lr must be positive");
        }
        self.finetune.validate()
    }

    pub fn adam(&self) -> pixelrep_tensor::AdamConfig {
        pixelrep_tensor::AdamConfig {
            schedule: pixelrep_tensor::Schedule {
                peak_lr: self.peak_lr,
                warmup_steps: self.warmup_steps,
                decay: if self.constant_lr {
                    pixelrep_tensor::Decay::Constant
                } else {
                    pixelrep_tensor::Decay::InverseSqrt
                },
            },
            clip_norm: self.clip_norm,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub max_epochs: usize,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub sample_size: Option<usize>,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Subword model size trained on the new language in expand mode.
    pub expand_vocab_size: usize,
    /// Amplitude of the uniform noise added to new embedding rows.
    pub expand_noise: f32,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            patience: 5,
            sample_size: None,
            peak_lr: 5e-4,
            warmup_steps: 100,
            expand_vocab_size: 5000,
            expand_noise: 0.01,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 {
            return config("finetune: max_epochs and patience must be positive");
        }
        if self.sample_size == Some(0) {
            return config("finetune.sample_size must be positive");
        }
        if self.expand_vocab_size <= 5 {
            return config("finetune.expand_vocab_size is too small");
        }
        Ok(())
    }
}
