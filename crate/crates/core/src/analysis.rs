//! Translation metrics and representation analyses.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use nalgebra::DMatrix;
use pixelrep_tensor::Tensor;
use serde::Serialize;

use crate::error::{config, Error, Result};
use crate::model::{Graph, Model, SourceInput, SourceMode, TargetBatch};
use crate::pixeltok::{collate, tokenize};
use crate::subword::{SubwordModel, MARKER, SPECIALS};
use crate::textimage::{render_sentence, FontAtlas, RenderConfig};

fn check_lengths(h: usize, r: usize) -> Result<()> {
    if h != r {
        return config(format!("{h} hypotheses for {r} references"));
    }
    Ok(())
}

fn ngram_counts<T: std::hash::Hash + Eq + Clone>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn clipped_matches<T: std::hash::Hash + Eq + Clone>(hyp: &[T], r: &[T], n: usize) -> (usize, usize, usize) {
    let hc = ngram_counts(hyp, n);
    let rc = ngram_counts(r, n);
    let matched = hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1), r.len().saturating_sub(n - 1))
}

/// Corpus BLEU over whitespace tokens: clipped 1-4-gram precisions,
/// geometric mean, brevity penalty. An order with zero matches uses
/// exponential smoothing, `1 / (2^k * total)` for the k-th such order.
pub fn bleu<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<f64> {
    check_lengths(hyps.len(), refs.len())?;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let (m, t, _) = clipped_matches(&h, &r, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    let mut k = 1.0;
    for n in 0..4 {
        let p = if totals[n] == 0 {
            // shorter than n tokens everywhere
            return Ok(0.0);
        } else if matches[n] == 0 {
            k *= 2.0;
            1.0 / (k * totals[n] as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_p += p.ln() / 4.0;
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_p.exp())
}

pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

/// Corpus chrF: character n-gram statistics (whitespace removed) summed
/// over the corpus for n = 1..6, an F-beta score per order, averaged over
/// the orders that occur on both sides.
pub fn chrf<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<f64> {
    check_lengths(hyps.len(), refs.len())?;
    let mut stats = [[0usize; 3]; CHRF_ORDER];
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<char> = h.as_ref().chars().filter(|c| !c.is_whitespace()).collect();
        let r: Vec<char> = r.as_ref().chars().filter(|c| !c.is_whitespace()).collect();
        for n in 1..=CHRF_ORDER {
            let (m, th, tr) = clipped_matches(&h, &r, n);
            stats[n - 1][0] += m;
            stats[n - 1][1] += th;
            stats[n - 1][2] += tr;
        }
    }
    let b2 = CHRF_BETA * CHRF_BETA;
    let mut sum = 0.0;
    let mut orders = 0;
    for [m, th, tr] in stats {
        if th == 0 || tr == 0 {
            continue;
        }
        orders += 1;
        let p = m as f64 / th as f64;
        let r = m as f64 / tr as f64;
        if p + r > 0.0 {
            sum += (1.0 + b2) * p * r / (b2 * p + r);
        }
    }
    if orders == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * sum / orders as f64)
}

/// Vectors with labels and optional frequency ranks (1 = most frequent).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<String>,
    pub freq_rank: Option<Vec<usize>>,
}

impl EmbeddingSet {
    pub fn validate(&self) -> Result<()> {
        if self.vectors.len() != self.labels.len() {
            return config("one label per vector");
        }
        if let Some(r) = &self.freq_rank {
            let mut s = r.clone();
            s.sort_unstable();
            if s.iter().enumerate().any(|(i, &x)| x != i + 1) {
                return config("frequency ranks must be a permutation of 1..N");
            }
        }
        Ok(())
    }

    pub fn write_tsv(&self, w: &mut impl Write) -> Result<()> {
        for (i, (v, l)) in self.vectors.iter().zip(&self.labels).enumerate() {
            let rank = self.freq_rank.as_ref().map_or(String::new(), |r| r[i].to_string());
            let vals: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
            writeln!(w, "{}\t{}\t{}", escape_label(l), rank, vals.join("\t"))?;
        }
        Ok(())
    }
}

fn escape_label(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Svd2d {
    /// Row indices of the input that were kept after trimming.
    pub kept: Vec<usize>,
    pub coords: Vec<[f64; 2]>,
    pub singular_values: [f64; 2],
    /// Share of total variance carried by each component.
    pub explained: [f64; 2],
}

impl Svd2d {
    pub fn write_tsv(&self, labels: &[String], w: &mut impl Write) -> Result<()> {
        for (&i, c) in self.kept.iter().zip(&self.coords) {
            writeln!(w, "{}\t{:.6}\t{:.6}", escape_label(&labels[i]), c[0], c[1])?;
        }
        Ok(())
    }
}

/// Mean-centred rank-2 SVD projection. Each axis is signed so that its
/// largest-magnitude coordinate is positive. With `keep_percent < 100`,
/// only the points whose 2-D norm is within that percentile are returned.
pub fn svd2d(vectors: &[Vec<f64>], keep_percent: f64) -> Result<Svd2d> {
    let n = vectors.len();
    if n < 2 {
        return config("svd2d needs at least two vectors");
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return config("vectors must share a positive dimension");
    }
    if !(keep_percent > 0.0 && keep_percent <= 100.0) {
        return config("keep_percent must be in (0, 100]");
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let svd = x.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let mut coords = vec![[0.0; 2]; n];
    let mut sv = [0.0; 2];
    for (axis, &k) in order.iter().take(2).enumerate() {
        let s = svd.singular_values[k];
        sv[axis] = s;
        let col: Vec<f64> = (0..n).map(|i| u[(i, k)] * s).collect();
        let pivot = col
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > col[best].abs() { i } else { best });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i][axis] = sign * col[i];
        }
    }
    let explained = if total > 0.0 {
        [sv[0] * sv[0] / total, sv[1] * sv[1] / total]
    } else {
        [0.0, 0.0]
    };
    let mut kept: Vec<usize> = (0..n).collect();
    if keep_percent < 100.0 {
        let mut norms: Vec<f64> = coords.iter().map(|c| c[0].hypot(c[1])).collect();
        let orig = norms.clone();
        norms.sort_by(f64::total_cmp);
        let idx = ((keep_percent / 100.0) * n as f64).ceil() as usize;
        let cut = norms[idx.clamp(1, n) - 1];
        kept.retain(|&i| orig[i] <= cut);
    }
    let coords = kept.iter().map(|&i| coords[i]).collect();
    Ok(Svd2d {
        kept,
        coords,
        singular_values: sv,
        explained,
    })
}

/// Rank of every vocabulary id by its count in `corpus` (1 = most frequent),
/// ties broken by id.
pub fn frequency_ranks<S: AsRef<str>>(vocab: &SubwordModel, corpus: &[(S, Option<S>)]) -> Vec<usize> {
    let mut counts = vec![0u64; vocab.size()];
    for (text, lang) in corpus {
        for id in vocab.encode_lang(text.as_ref(), lang.as_ref().map(|l| l.as_ref())) {
            counts[id as usize] += 1;
        }
    }
    let mut ids: Vec<usize> = (0..counts.len()).collect();
    ids.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut rank = vec![0; counts.len()];
    for (r, &id) in ids.iter().enumerate() {
        rank[id] = r + 1;
    }
    rank
}

/// Re-ranks a subset so ranks form a permutation of 1..N again.
pub fn rerank(ranks: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ranks.len()).collect();
    idx.sort_by_key(|&i| (ranks[i], i));
    let mut out = vec![0; ranks.len()];
    for (r, &i) in idx.iter().enumerate() {
        out[i] = r + 1;
    }
    out
}

/// Renders a subword piece for display: marker stripped.
fn piece_text(piece: &str) -> String {
    piece.replace(MARKER, "")
}

/// Mean-pooled pixel-model embeddings of every renderable vocabulary piece.
/// Specials and pieces that are empty after marker stripping are skipped.
/// `ranks` holds a frequency rank per vocabulary id.
pub fn pixel_token_embeddings_for_vocab(
    model: &Model<f32>,
    atlas: &FontAtlas,
    render: &RenderConfig,
    vocab: &SubwordModel,
    ranks: Option<&[usize]>,
) -> Result<(EmbeddingSet, Vec<u32>)> {
    if model.cfg.source_mode != SourceMode::Pixel {
        return config("pixel embeddings need a pixel model");
    }
    let win = model.cfg.window;
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let pieces = vocab.vocab.pieces();
    let mut pending: Vec<(u32, String, crate::pixeltok::TokenSequence)> = Vec::new();
    let flush = |pending: &mut Vec<(u32, String, crate::pixeltok::TokenSequence)>,
                 vectors: &mut Vec<Vec<f64>>,
                 labels: &mut Vec<String>,
                 ids: &mut Vec<u32>|
     -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let seqs: Vec<&crate::pixeltok::TokenSequence> = pending.iter().map(|p| &p.2).collect();
        let tags = vec![String::new(); seqs.len()];
        let batch = collate(&seqs, &tags, &win)?;
        let reps = model.mean_pooled_repr(&SourceInput::Pixel(batch))?;
        for ((id, label, _), v) in pending.drain(..).zip(reps) {
            ids.push(id);
            labels.push(label);
            vectors.push(v);
        }
        Ok(())
    };
    for (id, piece) in pieces.iter().enumerate().skip(SPECIALS.len()) {
        let text = piece_text(piece);
        if text.trim().is_empty() {
            log::info!("skipping unrenderable piece {piece:?}");
            continue;
        }
        let img = render_sentence(&text, atlas, render)?;
        pending.push((id as u32, piece.clone(), tokenize(&img, &win)?));
        if pending.len() == 64 {
            flush(&mut pending, &mut vectors, &mut labels, &mut ids)?;
        }
    }
    flush(&mut pending, &mut vectors, &mut labels, &mut ids)?;
    let freq_rank = ranks.map(|r| rerank(&ids.iter().map(|&i| r[i as usize]).collect::<Vec<_>>()));
    Ok((
        EmbeddingSet {
            vectors,
            labels,
            freq_rank,
        },
        ids,
    ))
}

/// Subword source embedding rows for the given ids, scaled as the encoder
/// sees them.
pub fn subword_embeddings(model: &Model<f32>, ids: &[u32]) -> Result<Vec<Vec<f64>>> {
    let table = model
        .params
        .get("src.emb")
        .ok_or_else(|| Error::Config("subword embeddings need a subword model".into()))?;
    let scale = (model.cfg.d_model as f64).sqrt();
    Ok(ids
        .iter()
        .map(|&i| table.row(i as usize).iter().map(|&x| x as f64 * scale).collect())
        .collect())
}

/// Nonzero-gradient scalars of one source-embedder tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateCount {
    pub name: String,
    pub nonzero: usize,
    pub total: usize,
}

/// Per-tensor nonzero-gradient counts of the source embedder after one
/// forward and backward pass. Batch norm uses batch statistics; dropout is off
/// so that a looked-up row never loses entries to the mask.
pub fn update_counts(model: &Model<f32>, src: &SourceInput, tgt: &TargetBatch) -> Result<Vec<UpdateCount>> {
    if src.tokens() == 0 || tgt.batch == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut g = Graph::new(model, true, 0).without_dropout();
    let (loss, _) = g.loss(src, tgt)?;
    let vars = g.param_vars().to_vec();
    let grads = g.tape.backward(loss)?;
    Ok(model
        .src_param_indices()
        .into_iter()
        .map(|i| UpdateCount {
            name: model.params.names()[i].clone(),
            nonzero: grads
                .get(vars[i])
                .map_or(0, |gr| gr.data().iter().filter(|&&x| x != 0.0).count()),
            total: model.params.tensors()[i].numel(),
        })
        .collect())
}

/// Percentage of source-embedder scalars with a nonzero gradient.
pub fn update_fraction(model: &Model<f32>, src: &SourceInput, tgt: &TargetBatch) -> Result<f64> {
    let counts = update_counts(model, src, tgt)?;
    let nonzero: usize = counts.iter().map(|c| c.nonzero).sum();
    let total: usize = counts.iter().map(|c| c.total).sum();
    Ok(100.0 * nonzero as f64 / total.max(1) as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

/// Post-ReLU conv activations of a rendered word, mean-pooled over its windows.
pub fn conv_activations(model: &Model<f32>, atlas: &FontAtlas, render: &RenderConfig, word: &str) -> Result<Vec<f64>> {
    if model.cfg.source_mode != SourceMode::Pixel {
        return config("conv activations need a pixel model");
    }
    let win = model.cfg.window;
    let seq = tokenize(&render_sentence(word, atlas, render)?, &win)?;
    let n = seq.n_tokens();
    let data: Vec<f32> = seq.windows.concat();
    let mut g = Graph::new(model, false, 0);
    let include = vec![true; n];
    let f = g.conv_features(data, n, &include)?;
    let v = g.tape.value(f);
    let per = v.numel() / n;
    let mut acc = vec![0.0f64; per];
    for k in 0..n {
        for (a, &x) in acc.iter_mut().zip(&v.data()[k * per..][..per]) {
            *a += x as f64 / n as f64;
        }
    }
    Ok(acc)
}

/// Cosine similarity of mean-pooled conv activations. Two all-zero
/// activation vectors count as identical (1.0); one zero vector gives 0.
pub fn activation_similarity(
    model: &Model<f32>,
    atlas: &FontAtlas,
    render: &RenderConfig,
    word_a: &str,
    word_b: &str,
) -> Result<f64> {
    let a = conv_activations(model, atlas, render, word_a)?;
    let b = conv_activations(model, atlas, render, word_b)?;
    let za = a.iter().all(|&x| x == 0.0);
    let zb = b.iter().all(|&x| x == 0.0);
    Ok(match (za, zb) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => cosine(&a, &b).unwrap_or(0.0),
    })
}

/// Mean cosine over all unordered pairs, after subtracting `center`.
pub fn mean_pairwise_cosine(vectors: &[Vec<f64>], center: Option<&[f64]>) -> f64 {
    let shifted: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| match center {
            Some(c) => v.iter().zip(c).map(|(x, m)| x - m).collect(),
            None => v.clone(),
        })
        .collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..shifted.len() {
        for j in i + 1..shifted.len() {
            if let Some(c) = cosine(&shifted[i], &shifted[j]) {
                sum += c;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn mean_vector(vectors: &[Vec<f64>]) -> Vec<f64> {
    let d = vectors.first().map_or(0, Vec::len);
    let mut m = vec![0.0; d];
    for v in vectors {
        for (a, x) in m.iter_mut().zip(v) {
            *a += x / vectors.len() as f64;
        }
    }
    m
}

/// Character n-gram types of a corpus. Unigrams are characters; longer
/// n-grams run over each whitespace word wrapped in boundary markers.
pub fn char_ngrams<S: AsRef<str>>(corpus: &[S], n: usize) -> HashMap<String, u64> {
    let mut m = HashMap::new();
    for line in corpus {
        for word in line.as_ref().split_whitespace() {
            let chars: Vec<char> = if n == 1 {
                word.chars().collect()
            } else {
                std::iter::once(MARKER)
                    .chain(word.chars())
                    .chain(std::iter::once(MARKER))
                    .collect()
            };
            if chars.len() >= n {
                for w in chars.windows(n) {
                    *m.entry(w.iter().collect()).or_insert(0) += 1;
                }
            }
        }
    }
    m
}

/// Percentage of the new corpus's n-grams found in the pretraining corpus,
/// counted over types, or over occurrences when `token_weighted`.
pub fn script_coverage<S: AsRef<str>>(pretrain: &[S], new: &[S], n: usize, token_weighted: bool) -> Result<f64> {
    if n == 0 {
        return config("n-gram order must be positive");
    }
    let seen: HashSet<String> = char_ngrams(pretrain, n).into_keys().collect();
    let fresh = char_ngrams(new, n);
    let (mut hit, mut total) = (0u64, 0u64);
    for (g, c) in fresh {
        let w = if token_weighted { c } else { 1 };
        total += w;
        if seen.contains(&g) {
            hit += w;
        }
    }
    if total == 0 {
        return config("new corpus has no n-grams of this order");
    }
    Ok(100.0 * hit as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageReport {
    pub lang: String,
    /// Coverage percentages for n = 1, 2, 3.
    pub percent: [f64; 3],
}

pub fn coverage_report<S: AsRef<str>>(
    lang: &str,
    pretrain: &[S],
    new: &[S],
    token_weighted: bool,
) -> Result<CoverageReport> {
    let mut percent = [0.0; 3];
    for (i, p) in percent.iter_mut().enumerate() {
        *p = script_coverage(pretrain, new, i + 1, token_weighted)?;
    }
    Ok(CoverageReport {
        lang: lang.to_string(),
        percent,
    })
}

pub fn write_coverage_tsv(reports: &[CoverageReport], w: &mut impl Write) -> Result<()> {
    writeln!(w, "lang\tn1\tn2\tn3")?;
    for r in reports {
        writeln!(
            w,
            "{}\t{:.2}\t{:.2}\t{:.2}",
            r.lang, r.percent[0], r.percent[1], r.percent[2]
        )?;
    }
    Ok(())
}

/// Flattened tensor helper for callers holding raw rows.
pub fn rows_of(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(d)
        .map(|r| r.iter().map(|&x| x as f64).collect())
        .collect()
}
