use pixelrep_tensor::{BnMode, BnStats, Scalar, Tape, Tensor, Var};

use super::{sinusoid, Model, SourceMode};
use crate::error::{config, Result};
use crate::pixeltok::PixelBatch;
use crate::subword::{BOS, EOS, PAD};

/// Additive attention mask value.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct SubwordBatch {
    /// `[batch, t_max]`, PAD-filled.
    pub ids: Vec<u32>,
    pub pad_mask: Vec<bool>,
    pub batch: usize,
    pub t_max: usize,
}

impl SubwordBatch {
    /// Pads id sequences; empty sequences become a single EOS.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(crate::Error::EmptyBatch);
        }
        let t_max = seqs.iter().map(|s| s.len().max(1)).max().unwrap_or(1);
        let mut ids = vec![PAD; seqs.len() * t_max];
        let mut pad_mask = vec![true; seqs.len() * t_max];
        for (b, s) in seqs.iter().enumerate() {
            let s: &[u32] = if s.is_empty() { &[EOS] } else { s };
            for (t, &id) in s.iter().enumerate() {
                ids[b * t_max + t] = id;
                pad_mask[b * t_max + t] = false;
            }
        }
        Ok(Self {
            ids,
            pad_mask,
            batch: seqs.len(),
            t_max,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SourceInput {
    Pixel(PixelBatch),
    Subword(SubwordBatch),
}

impl SourceInput {
    pub fn batch(&self) -> usize {
        match self {
            Self::Pixel(p) => p.batch,
            Self::Subword(s) => s.batch,
        }
    }

    pub fn t_max(&self) -> usize {
        match self {
            Self::Pixel(p) => p.t_max,
            Self::Subword(s) => s.t_max,
        }
    }

    pub fn pad_mask(&self) -> &[bool] {
        match self {
            Self::Pixel(p) => &p.pad_mask,
            Self::Subword(s) => &s.pad_mask,
        }
    }

    /// Non-pad source positions.
    pub fn tokens(&self) -> usize {
        self.pad_mask().iter().filter(|&&p| !p).count()
    }
}

/// Teacher-forcing pair: `input = BOS y`, `output = y EOS`, PAD-filled.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    pub input: Vec<u32>,
    pub output: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

impl TargetBatch {
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(crate::Error::EmptyBatch);
        }
        let len = seqs.iter().map(|s| s.len() + 1).max().unwrap_or(1);
        let mut input = vec![PAD; seqs.len() * len];
        let mut output = vec![PAD; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            input[b * len] = BOS;
            for (t, &id) in s.iter().enumerate() {
                input[b * len + t + 1] = id;
                output[b * len + t] = id;
            }
            output[b * len + s.len()] = EOS;
        }
        Ok(Self {
            input,
            output,
            batch: seqs.len(),
            len,
        })
    }

    /// Target tokens that count toward the loss.
    pub fn tokens(&self) -> usize {
        self.output.iter().filter(|&&t| t != PAD).count()
    }
}

/// One forward pass over a model. Parameters are bound as tape leaves.
pub struct Graph<'m, T: Scalar> {
    pub tape: Tape<T>,
    pub model: &'m Model<T>,
    vars: Vec<Var>,
    training: bool,
    dropout: f64,
    /// Batch-norm statistics seen in training mode.
    pub bn_stats: Option<BnStats<T>>,
}

impl<'m, T: Scalar> Graph<'m, T> {
    /// `training` enables dropout, batch statistics and gradient recording.
    pub fn new(model: &'m Model<T>, training: bool, seed: u64) -> Self {
        let mut tape = Tape::new(training, seed);
        let vars = model
            .params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone(), training))
            .collect();
        Self {
            tape,
            model,
            vars,
            training,
            dropout: model.cfg.dropout,
            bn_stats: None,
        }
    }

    /// Training-mode pass with dropout switched off.
    pub fn without_dropout(mut self) -> Self {
        self.dropout = 0.0;
        self
    }

    pub fn param(&self, name: &str) -> Var {
        let i = self
            .model
            .params
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    /// Tape handles of every parameter, in store order.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn d(&self) -> usize {
        self.model.cfg.d_model
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        Ok(self.tape.dropout(x, self.dropout)?)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.param(w), self.param(b));
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add(y, b)?)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.g"));
        let b = self.param(&format!("{prefix}.b"));
        Ok(self.tape.layer_norm(x, g, b)?)
    }

    /// Post-ReLU conv activations `[N, C, h-2, w]` for windows `[N, h, w]`.
    pub fn conv_features(&mut self, windows: Vec<T>, n: usize, include: &[bool]) -> Result<Var> {
        let cfg = &self.model.cfg;
        let (h, w) = (cfg.window.h, cfg.window.w);
        let x = self.tape.constant(Tensor::new(&[n, 1, h, w], windows)?);
        let y = self.tape.conv2d(x, self.param("src.conv.w"), None, (1, 1))?;
        let (g, b) = (self.param("src.bn.gamma"), self.param("src.bn.beta"));
        let (y, stats) = if self.training {
            self.tape
                .batch_norm2d(y, g, b, BnMode::Train { include: Some(include) })?
        } else {
            let (m, v) = (&self.model.bn_mean, &self.model.bn_var);
            self.tape.batch_norm2d(y, g, b, BnMode::Eval { mean: m, var: v })?
        };
        if stats.is_some() {
            self.bn_stats = stats;
        }
        Ok(self.tape.relu(y))
    }

    /// Source vectors `[B, T, d]` before positions are added.
    pub fn embed_source(&mut self, src: &SourceInput) -> Result<Var> {
        let cfg = &self.model.cfg;
        let d = cfg.d_model;
        let (b, t) = (src.batch(), src.t_max());
        match (cfg.source_mode, src) {
            (SourceMode::Pixel, SourceInput::Pixel(p)) => {
                if p.h != cfg.window.h || p.w != cfg.window.w {
                    return config(format!(
                        "pixel batch windows {}x{} do not match model {}x{}",
                        p.h, p.w, cfg.window.h, cfg.window.w
                    ));
                }
                if p.pad_mask.iter().all(|&m| m) {
                    return Err(crate::Error::EmptyBatch);
                }
                let include: Vec<bool> = p.pad_mask.iter().map(|&m| !m).collect();
                let data = p.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
                let feats = self.conv_features(data, b * t, &include)?;
                let flat = self.tape.reshape(feats, &[b * t, cfg.projection_in()])?;
                let proj = self.linear(flat, "src.proj.w", "src.proj.b")?;
                Ok(self.tape.reshape(proj, &[b, t, d])?)
            }
            (SourceMode::Subword, SourceInput::Subword(s)) => {
                let ids: Vec<usize> = s.ids.iter().map(|&i| i as usize).collect();
                let e = self.tape.embedding(self.param("src.emb"), &ids)?;
                let e = self.tape.scale(e, T::from_f64_lossy((d as f64).sqrt()));
                Ok(self.tape.reshape(e, &[b, t, d])?)
            }
            _ => config("source input does not match the model's source mode"),
        }
    }

    fn add_positions(&mut self, x: Var, len: usize) -> Result<Var> {
        let pe = self.tape.constant(sinusoid(len, self.d()));
        Ok(self.tape.add(x, pe)?)
    }

    fn split_heads(&mut self, x: Var, b: usize, t: usize) -> Result<Var> {
        let h = self.model.cfg.heads;
        let dh = self.model.cfg.head_dim();
        let x = self.tape.reshape(x, &[b, t, h, dh])?;
        let x = self.tape.permute(x, &[0, 2, 1, 3])?;
        Ok(self.tape.reshape(x, &[b * h, t, dh])?)
    }

    /// Multi-head attention. `mask` is additive, `[B*H, Tq, Tk]`.
    fn attention(&mut self, prefix: &str, xq: Var, xkv: Var, mask: Var) -> Result<Var> {
        let (b, tq) = (self.tape.shape(xq)[0], self.tape.shape(xq)[1]);
        let tk = self.tape.shape(xkv)[1];
        let h = self.model.cfg.heads;
        let dh = self.model.cfg.head_dim();
        let q = self.linear(xq, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(xkv, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(xkv, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let q = self.split_heads(q, b, tq)?;
        let k = self.split_heads(k, b, tk)?;
        let v = self.split_heads(v, b, tk)?;
        let s = self.tape.matmul_nt(q, k)?;
        let s = self.tape.scale(s, T::from_f64_lossy(1.0 / (dh as f64).sqrt()));
        let s = self.tape.add(s, mask)?;
        let a = self.tape.softmax(s);
        let o = self.tape.matmul(a, v)?;
        let o = self.tape.reshape(o, &[b, h, tq, dh])?;
        let o = self.tape.permute(o, &[0, 2, 1, 3])?;
        let o = self.tape.reshape(o, &[b, tq, h * dh])?;
        self.linear(o, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let y = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let y = self.tape.relu(y);
        self.linear(y, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn mask_tensor(&mut self, b: usize, tq: usize, key_pad: &[bool], tk: usize, causal: bool) -> Var {
        let h = self.model.cfg.heads;
        let neg = T::from_f64_lossy(MASKED);
        let mut data = vec![T::zero(); b * h * tq * tk];
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..tq {
                    for j in 0..tk {
                        if key_pad[bi * tk + j] || (causal && j > i) {
                            data[((bi * h + hi) * tq + i) * tk + j] = neg;
                        }
                    }
                }
            }
        }
        self.tape.constant(Tensor::new(&[b * h, tq, tk], data).expect("sized"))
    }

    /// Encoder memory `[B, T, d]`.
    pub fn encode(&mut self, src: &SourceInput) -> Result<Var> {
        let (b, t) = (src.batch(), src.t_max());
        let x = self.embed_source(src)?;
        let x = self.add_positions(x, t)?;
        let mut x = self.dropout(x)?;
        let mask = self.mask_tensor(b, t, src.pad_mask(), t, false);
        for i in 0..self.model.cfg.enc_layers {
            let y = self.layer_norm(x, &format!("enc.{i}.ln1"))?;
            let y = self.attention(&format!("enc.{i}.attn"), y, y, mask)?;
            let y = self.dropout(y)?;
            x = self.tape.add(x, y)?;
            let y = self.layer_norm(x, &format!("enc.{i}.ln2"))?;
            let y = self.feed_forward(y, &format!("enc.{i}.ff"))?;
            let y = self.dropout(y)?;
            x = self.tape.add(x, y)?;
        }
        self.layer_norm(x, "enc.ln")
    }

    /// Decoder logits `[B * L, V_tgt]` for target prefixes `input: [B, L]`.
    pub fn decode(&mut self, memory: Var, src_pad: &[bool], input: &[u32], len: usize) -> Result<Var> {
        let d = self.d();
        let b = self.tape.shape(memory)[0];
        let tk = self.tape.shape(memory)[1];
        if input.len() != b * len {
            return config("target input does not match batch size");
        }
        let ids: Vec<usize> = input.iter().map(|&i| i as usize).collect();
        let e = self.tape.embedding(self.param("tgt.emb"), &ids)?;
        let e = self.tape.scale(e, T::from_f64_lossy((d as f64).sqrt()));
        let e = self.tape.reshape(e, &[b, len, d])?;
        let e = self.add_positions(e, len)?;
        let mut x = self.dropout(e)?;
        let no_pad = vec![false; b * len];
        let self_mask = self.mask_tensor(b, len, &no_pad, len, true);
        let cross_mask = self.mask_tensor(b, len, src_pad, tk, false);
        for i in 0..self.model.cfg.dec_layers {
            let y = self.layer_norm(x, &format!("dec.{i}.ln1"))?;
            let y = self.attention(&format!("dec.{i}.self"), y, y, self_mask)?;
            let y = self.dropout(y)?;
            x = self.tape.add(x, y)?;
            let y = self.layer_norm(x, &format!("dec.{i}.ln2"))?;
            let y = self.attention(&format!("dec.{i}.cross"), y, memory, cross_mask)?;
            let y = self.dropout(y)?;
            x = self.tape.add(x, y)?;
            let y = self.layer_norm(x, &format!("dec.{i}.ln3"))?;
            let y = self.feed_forward(y, &format!("dec.{i}.ff"))?;
            let y = self.dropout(y)?;
            x = self.tape.add(x, y)?;
        }
        let x = self.layer_norm(x, "dec.ln")?;
        let x = self.tape.reshape(x, &[b * len, d])?;
        let logits = if self.model.cfg.tie_target {
            self.tape.matmul_nt(x, self.param("tgt.emb"))?
        } else {
            self.tape.matmul(x, self.param("out.w"))?
        };
        Ok(self.tape.add(logits, self.param("out.b"))?)
    }

    /// Label-smoothed training loss and the logits it was computed from.
    pub fn loss(&mut self, src: &SourceInput, tgt: &TargetBatch) -> Result<(Var, Var)> {
        let logits = self.logits(src, tgt)?;
        let targets: Vec<usize> = tgt.output.iter().map(|&t| t as usize).collect();
        let eps = self.model.cfg.label_smoothing;
        let loss = self.tape.cross_entropy(logits, &targets, eps, Some(PAD as usize))?;
        Ok((loss, logits))
    }

    pub fn logits(&mut self, src: &SourceInput, tgt: &TargetBatch) -> Result<Var> {
        if src.batch() != tgt.batch {
            return config("source and target batch sizes differ");
        }
        let memory = self.encode(src)?;
        self.decode(memory, src.pad_mask(), &tgt.input, tgt.len)
    }
}

impl<T: Scalar> Model<T> {
    /// Per-sentence mean over non-pad positions of the source vectors, taken
    /// before positions are added: embedding rows for subwords, projected
    /// conv outputs for pixels.
    pub fn mean_pooled_repr(&self, src: &SourceInput) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(self, false, 0);
        let e = g.embed_source(src)?;
        let d = self.cfg.d_model;
        let t = src.t_max();
        let data = g.tape.value(e).data();
        let mask = src.pad_mask();
        Ok((0..src.batch())
            .map(|b| {
                let mut acc = vec![0.0f64; d];
                let mut n = 0usize;
                for ti in 0..t {
                    if mask[b * t + ti] {
                        continue;
                    }
                    n += 1;
                    for (a, &x) in acc.iter_mut().zip(&data[(b * t + ti) * d..][..d]) {
                        *a += x.as_f64();
                    }
                }
                acc.iter().map(|a| a / n.max(1) as f64).collect()
            })
            .collect())
    }
}
