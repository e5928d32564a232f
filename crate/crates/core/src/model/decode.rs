use pixelrep_tensor::{Scalar, Tensor};

use super::{Graph, Model, SourceInput};
use crate::error::{Error, Result};
use crate::subword::{BOS, EOS};

/// A decoded target sequence. `tokens` excludes BOS and EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities, EOS included when emitted.
    pub log_prob: f64,
    /// `log_prob` divided by the number of scored tokens.
    pub score: f64,
}

impl Hypothesis {
    fn new(tokens: Vec<u32>, log_prob: f64, scored: usize) -> Self {
        Self {
            tokens,
            log_prob,
            score: log_prob / scored.max(1) as f64,
        }
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Copies example `b` of `[B, T, d]` `k` times.
fn repeat_row<T: Scalar>(mem: &Tensor<T>, b: usize, k: usize) -> Tensor<T> {
    let s = mem.shape();
    let n = s[1] * s[2];
    let row = &mem.data()[b * n..][..n];
    let mut data = Vec::with_capacity(k * n);
    for _ in 0..k {
        data.extend_from_slice(row);
    }
    Tensor::new(&[k, s[1], s[2]], data).expect("sized")
}

impl<T: Scalar> Model<T> {
    /// Encoder memory in inference mode.
    pub fn memory(&self, src: &SourceInput) -> Result<Tensor<T>> {
        let lengths_ok = src
            .pad_mask()
            .chunks(src.t_max().max(1))
            .all(|row| row.iter().any(|&p| !p));
        if !lengths_ok {
            return Err(Error::EmptyInput);
        }
        let mut g = Graph::new(self, false, 0);
        let m = g.encode(src)?;
        Ok(g.tape.value(m).clone())
    }

    /// Next-token log-probabilities for equal-length `prefixes` (BOS first).
    pub fn next_log_probs(&self, memory: &Tensor<T>, src_pad: &[bool], prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let len = prefixes[0].len();
        let input: Vec<u32> = prefixes.iter().flatten().copied().collect();
        let mut g = Graph::new(self, false, 0);
        let mem = g.tape.constant(memory.clone());
        let logits = g.decode(mem, src_pad, &input, len)?;
        let v = self.cfg.v_tgt;
        let data = g.tape.value(logits).data();
        Ok((0..prefixes.len())
            .map(|b| {
                let row: Vec<f64> = data[(b * len + len - 1) * v..][..v]
                    .iter()
                    .map(|x| x.as_f64())
                    .collect();
                log_softmax(&row)
            })
            .collect())
    }

    /// Argmax decoding of every example in the batch.
    pub fn greedy(&self, src: &SourceInput, max_len: usize) -> Result<Vec<Hypothesis>> {
        let memory = self.memory(src)?;
        self.greedy_from(&memory, src.pad_mask(), max_len)
    }

    fn greedy_from(&self, memory: &Tensor<T>, src_pad: &[bool], max_len: usize) -> Result<Vec<Hypothesis>> {
        let b = memory.shape()[0];
        let mut prefixes = vec![vec![BOS]; b];
        let mut lp = vec![0.0; b];
        let mut done = vec![false; b];
        for _ in 0..max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let rows = self.next_log_probs(memory, src_pad, &prefixes)?;
            for (i, row) in rows.iter().enumerate() {
                if done[i] {
                    // keep lengths aligned; the token is never reported
                    prefixes[i].push(EOS);
                    continue;
                }
                let t = argmax(row);
                lp[i] += row[t];
                prefixes[i].push(t as u32);
                done[i] = t as u32 == EOS;
            }
        }
        Ok(prefixes
            .into_iter()
            .zip(lp)
            .map(|(p, lp)| {
                let body: Vec<u32> = p[1..].iter().take_while(|&&t| t != EOS).copied().collect();
                let scored = (body.len() + 1).min(p.len() - 1);
                Hypothesis::new(body, lp, scored)
            })
            .collect())
    }

    /// Length-normalized beam search. The greedy path is always among the
    /// final candidates.
    pub fn beam_search(&self, src: &SourceInput, beam: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
        let memory = self.memory(src)?;
        let t = src.t_max();
        let greedy = self.greedy_from(&memory, src.pad_mask(), max_len)?;
        let mut out = Vec::with_capacity(src.batch());
        for (b, g) in greedy.into_iter().enumerate() {
            let pad = &src.pad_mask()[b * t..][..t];
            let mut finished = self.beam_one(&memory, b, pad, beam.max(1), max_len)?;
            finished.push(g);
            let best = finished
                .into_iter()
                .reduce(|a, c| if c.score > a.score { c } else { a })
                .expect("non-empty");
            out.push(best);
        }
        Ok(out)
    }

    fn beam_one(
        &self,
        memory: &Tensor<T>,
        b: usize,
        pad: &[bool],
        k: usize,
        max_len: usize,
    ) -> Result<Vec<Hypothesis>> {
        let mut alive: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
        let mut finished = Vec::new();
        for _ in 0..max_len {
            if alive.is_empty() {
                break;
            }
            let mem = repeat_row(memory, b, alive.len());
            let pads: Vec<bool> = (0..alive.len()).flat_map(|_| pad.iter().copied()).collect();
            let prefixes: Vec<Vec<u32>> = alive.iter().map(|(p, _)| p.clone()).collect();
            let rows = self.next_log_probs(&mem, &pads, &prefixes)?;
            let mut cand: Vec<(usize, usize, f64)> = Vec::new();
            for (i, row) in rows.iter().enumerate() {
                let mut idx: Vec<usize> = (0..row.len()).collect();
                idx.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
                for &tok in idx.iter().take(k) {
                    cand.push((i, tok, alive[i].1 + row[tok]));
                }
            }
            cand.sort_by(|x, y| y.2.total_cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
            let mut next = Vec::with_capacity(k);
            for (i, tok, lp) in cand.into_iter().take(k) {
                let mut p = alive[i].0.clone();
                if tok as u32 == EOS {
                    let body = p[1..].to_vec();
                    let n = body.len() + 1;
                    finished.push(Hypothesis::new(body, lp, n));
                } else {
                    p.push(tok as u32);
                    next.push((p, lp));
                }
            }
            alive = next;
        }
        for (p, lp) in alive {
            let body = p[1..].to_vec();
            let n = body.len();
            finished.push(Hypothesis::new(body, lp, n));
        }
        Ok(finished)
    }

    /// Greedy when `beam <= 1`, beam search otherwise.
    pub fn translate(&self, src: &SourceInput, max_len: usize, beam: usize) -> Result<Vec<Hypothesis>> {
        if beam <= 1 {
            self.greedy(src, max_len)
        } else {
            self.beam_search(src, beam, max_len)
        }
    }
}
