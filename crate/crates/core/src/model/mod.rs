//! Encoder-decoder translation model with a pixel or subword source side.

mod checkpoint;
mod config;
mod decode;
mod graph;

use std::collections::HashMap;

use pixelrep_tensor::{grad_check, GradCheckReport, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, TrainState, ValidRecord};
pub use config::{count_params, src_embedder_params, ModelConfig, SourceMode};
pub use decode::Hypothesis;
pub use graph::{Graph, SourceInput, SubwordBatch, TargetBatch};

use crate::error::{config as config_err, Result};

pub const BN_MOMENTUM: f64 = 0.1;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn push(&mut self, name: &str, t: Tensor<T>) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn replace(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        match self.index.get(name) {
            Some(&i) => {
                self.tensors[i] = t;
                Ok(())
            }
            None => config_err(format!("no parameter named {name}")),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub bn_mean: Vec<T>,
    pub bn_var: Vec<T>,
}

/// Prefix of every source-embedder parameter name.
pub const SRC_PREFIX: &str = "src.";

fn xavier<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, rng)
}

fn push_attn<T: Scalar>(p: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    for w in ["wq", "wk", "wv", "wo"] {
        p.push(&format!("{prefix}.{w}"), xavier(d, d, rng));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        p.push(&format!("{prefix}.{b}"), Tensor::zeros(&[d]));
    }
}

fn push_ln<T: Scalar>(p: &mut ParamStore<T>, prefix: &str, d: usize) {
    p.push(&format!("{prefix}.g"), Tensor::ones(&[d]));
    p.push(&format!("{prefix}.b"), Tensor::zeros(&[d]));
}

fn push_ff<T: Scalar>(p: &mut ParamStore<T>, prefix: &str, d: usize, ff: usize, rng: &mut ChaCha8Rng) {
    p.push(&format!("{prefix}.w1"), xavier(d, ff, rng));
    p.push(&format!("{prefix}.b1"), Tensor::zeros(&[ff]));
    p.push(&format!("{prefix}.w2"), xavier(ff, d, rng));
    p.push(&format!("{prefix}.b2"), Tensor::zeros(&[d]));
}

impl<T: Scalar> Model<T> {
    /// Fresh model with seeded initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let emb_std = (d as f64).powf(-0.5);
        let mut p = ParamStore::default();
        match cfg.source_mode {
            SourceMode::Pixel => {
                let c = cfg.conv_channels;
                // fan_in of a 1x3x1 kernel is 3
                p.push(
                    "src.conv.w",
                    Tensor::uniform(&[c, 1, 3, 1], (1.0f64 / 3.0).sqrt(), &mut rng),
                );
                p.push("src.bn.gamma", Tensor::ones(&[c]));
                p.push("src.bn.beta", Tensor::zeros(&[c]));
                p.push("src.proj.w", xavier(cfg.projection_in(), d, &mut rng));
                p.push("src.proj.b", Tensor::zeros(&[d]));
            }
            SourceMode::Subword => {
                let v = cfg.v_src.expect("validated");
                p.push("src.emb", Tensor::normal(&[v, d], emb_std, &mut rng));
            }
        }
        for i in 0..cfg.enc_layers {
            push_ln(&mut p, &format!("enc.{i}.ln1"), d);
            push_attn(&mut p, &format!("enc.{i}.attn"), d, &mut rng);
            push_ln(&mut p, &format!("enc.{i}.ln2"), d);
            push_ff(&mut p, &format!("enc.{i}.ff"), d, cfg.ff_width, &mut rng);
        }
        push_ln(&mut p, "enc.ln", d);
        for i in 0..cfg.dec_layers {
            push_ln(&mut p, &format!("dec.{i}.ln1"), d);
            push_attn(&mut p, &format!("dec.{i}.self"), d, &mut rng);
            push_ln(&mut p, &format!("dec.{i}.ln2"), d);
            push_attn(&mut p, &format!("dec.{i}.cross"), d, &mut rng);
            push_ln(&mut p, &format!("dec.{i}.ln3"), d);
            push_ff(&mut p, &format!("dec.{i}.ff"), d, cfg.ff_width, &mut rng);
        }
        push_ln(&mut p, "dec.ln", d);
        p.push("tgt.emb", Tensor::normal(&[cfg.v_tgt, d], emb_std, &mut rng));
        if !cfg.tie_target {
            p.push("out.w", xavier(d, cfg.v_tgt, &mut rng));
        }
        p.push("out.b", Tensor::zeros(&[cfg.v_tgt]));
        let c = if cfg.source_mode == SourceMode::Pixel {
            cfg.conv_channels
        } else {
            0
        };
        Ok(Self {
            cfg,
            params: p,
            bn_mean: vec![T::zero(); c],
            bn_var: vec![T::one(); c],
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Indices of source-embedder parameters.
    pub fn src_param_indices(&self) -> Vec<usize> {
        self.params
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(SRC_PREFIX))
            .map(|(i, _)| i)
            .collect()
    }

    /// All parameters concatenated in store order.
    pub fn flat_params(&self) -> Vec<T> {
        self.params
            .tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut off = 0;
        for t in self.params.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            bn_mean: self.bn_mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            bn_var: self.bn_var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_bn(&mut self, stats: &pixelrep_tensor::BnStats<T>) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &b) in self.bn_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.bn_var.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b;
        }
    }

    /// Replaces the source embedding with `rows` (row-major `[v, d]`) and
    /// updates `v_src`. Subword mode only.
    pub fn resize_source_vocab(&mut self, rows: Vec<T>) -> Result<()> {
        if self.cfg.source_mode != SourceMode::Subword {
            return config_err("pixel models are vocabulary-free");
        }
        let d = self.cfg.d_model;
        if !rows.len().is_multiple_of(d) {
            return config_err("embedding rows do not match d_model");
        }
        let v = rows.len() / d;
        self.params.replace("src.emb", Tensor::new(&[v, d], rows)?)?;
        self.cfg.v_src = Some(v);
        Ok(())
    }
}

impl Model<f64> {
    /// Central-difference check of the training loss gradient with respect
    /// to every parameter. Dropout must be zero for the loss to be a
    /// deterministic function of the parameters.
    pub fn grad_check(&self, src: &SourceInput, tgt: &TargetBatch, h: f64) -> Result<GradCheckReport> {
        if self.cfg.dropout != 0.0 {
            return config_err("gradient check needs dropout 0");
        }
        let mut probe = self.clone();
        let mut failure = None;
        let report = grad_check(
            |x| {
                probe.set_flat_params(x);
                match loss_and_grad(&probe, src, tgt) {
                    Ok(v) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        (f64::NAN, vec![f64::NAN; x.len()])
                    }
                }
            },
            &self.flat_params(),
            h,
        );
        match failure {
            Some(e) => Err(e),
            None => Ok(report),
        }
    }
}

/// Training-mode loss and its gradient flattened in parameter order.
pub fn loss_and_grad(model: &Model<f64>, src: &SourceInput, tgt: &TargetBatch) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new(model, true, 0);
    let (loss, _) = g.loss(src, tgt)?;
    let value = g.tape.value(loss).item();
    let vars = g.param_vars().to_vec();
    let grads = g.tape.backward(loss)?;
    let mut flat = Vec::with_capacity(model.num_params());
    for (v, p) in vars.iter().zip(model.params.tensors()) {
        match grads.get(*v) {
            Some(t) => flat.extend_from_slice(t.data()),
            None => flat.extend(std::iter::repeat_n(0.0, p.numel())),
        }
    }
    Ok((value, flat))
}

/// Fixed sinusoidal position table `[len, d]`.
pub fn sinusoid<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = T::from_f64_lossy(angle.sin());
            data[pos * d + 2 * i + 1] = T::from_f64_lossy(angle.cos());
        }
    }
    Tensor::new(&[len, d], data).expect("sized")
}
