use std::io::Write;

use pixelrep_tensor::{AdamState, Tensor};
use serde::Serialize;

use super::data::{BatchSampler, Dataset, SourceSide};
use super::{ParallelCorpus, SamplerConfig, TrainConfig};
use crate::error::{config, Error, Result};
use crate::model::{Checkpoint, Graph, Model, SourceMode, TrainState, ValidRecord};
use crate::subword::{expand_vocabulary, grow_rows, train_segmenter, SubwordModel, PAD};
use crate::textimage::{FontAtlas, RenderConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub ppl: f64,
    /// Teacher-forced argmax accuracy over non-pad target tokens.
    pub token_acc: f64,
    pub tokens: usize,
}

/// Unsmoothed perplexity and token accuracy in inference mode.
pub fn evaluate(model: &Model<f32>, ds: &Dataset, budget: usize) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let v = model.cfg.v_tgt;
    let (mut nll, mut correct, mut tokens) = (0.0f64, 0usize, 0usize);
    for idx in ds.sequential_batches(budget) {
        let (src, tgt) = ds.batch(&idx)?;
        let mut g = Graph::new(model, false, 0);
        let logits = g.logits(&src, &tgt)?;
        let data = g.tape.value(logits).data();
        for (r, &t) in tgt.output.iter().enumerate() {
            if t == PAD {
                continue;
            }
            let row = &data[r * v..][..v];
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let lse = m + row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln();
            nll += lse - row[t as usize] as f64;
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            correct += (best == t as usize) as usize;
            tokens += 1;
        }
    }
    Ok(EvalReport {
        ppl: (nll / tokens.max(1) as f64).exp(),
        token_acc: correct as f64 / tokens.max(1) as f64,
        tokens,
    })
}

/// Decodes every example and detokenizes with `tgt_vocab`.
pub fn translate_dataset(
    model: &Model<f32>,
    ds: &Dataset,
    tgt_vocab: &SubwordModel,
    max_len: usize,
    beam: usize,
    budget: usize,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(ds.len());
    for idx in ds.sequential_batches(budget) {
        let src = ds.source(&idx)?;
        for h in model.translate(&src, max_len, beam)? {
            out.push(tgt_vocab.decode(&h.tokens));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps_run: u64,
    pub stopped_early: bool,
    pub best_ppl: Option<f64>,
    pub last_loss: f64,
}

#[derive(Serialize)]
struct LogLine {
    step: u64,
    loss: f64,
    lr: f64,
    valid_ppl: Option<f64>,
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step)
}

/// Runs training from `ckpt.state.step` up to `cfg.max_steps`. The model with
/// the best validation perplexity is left in `ckpt.model`.
pub fn train(
    ckpt: &mut Checkpoint,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut opt = match ckpt.optimizer.take() {
        Some(o) => o,
        None => AdamState::new(cfg.adam(), ckpt.model.params.tensors()),
    };
    let mut sampler_cfg = *sampler;
    sampler_cfg.seed = step_seed(sampler.seed, ckpt.state.step);
    let mut batches = BatchSampler::for_dataset(train, cfg.batch_tokens, &sampler_cfg)?;

    let start = ckpt.state.step;
    let mut best: Option<Model<f32>> = None;
    let mut stopped_early = false;
    let (mut loss_sum, mut loss_n, mut last_loss) = (0.0, 0u64, f64::NAN);
    let mut last_validated = None;

    while ckpt.state.step < cfg.max_steps {
        let idx = batches.next_batch();
        let (src, tgt) = train.batch(&idx)?;
        let seed = step_seed(sampler.seed ^ 0x5EED, ckpt.state.step);
        let mut g = Graph::new(&ckpt.model, true, seed);
        let (loss, _) = g.loss(&src, &tgt)?;
        let loss_val = g.tape.value(loss).item() as f64;
        if !loss_val.is_finite() {
            return Err(Error::Diverged {
                step: ckpt.state.step + 1,
                loss: loss_val,
            });
        }
        let vars = g.param_vars().to_vec();
        let bn = g.bn_stats.take();
        let grads = g.tape.backward(loss)?;
        let zeros: Vec<Option<Tensor<f32>>> = vars
            .iter()
            .zip(ckpt.model.params.tensors())
            .map(|(&v, p)| grads.get(v).is_none().then(|| Tensor::zeros(p.shape())))
            .collect();
        let grad_refs: Vec<&Tensor<f32>> = vars
            .iter()
            .zip(&zeros)
            .map(|(&v, z)| grads.get(v).unwrap_or_else(|| z.as_ref().expect("zero fill")))
            .collect();
        let mut params: Vec<&mut Tensor<f32>> = ckpt.model.params.tensors_mut().iter_mut().collect();
        let lr = opt.step(&mut params, &grad_refs)?;
        if let Some(stats) = bn {
            ckpt.model.update_bn(&stats);
        }
        ckpt.state.step += 1;
        let step = ckpt.state.step;
        loss_sum += loss_val;
        loss_n += 1;
        last_loss = loss_val;

        let validate_now = step.is_multiple_of(cfg.validate_every) || step == cfg.max_steps;
        if validate_now {
            let rep = evaluate(&ckpt.model, valid, cfg.batch_tokens)?;
            last_validated = Some(step);
            ckpt.state.history.push(ValidRecord {
                step,
                valid_ppl: rep.ppl,
                valid_acc: rep.token_acc,
            });
            write_log(log, step, loss_sum / loss_n as f64, lr, Some(rep.ppl))?;
            loss_sum = 0.0;
            loss_n = 0;
            log::info!("step {step}: valid ppl {:.4}, acc {:.4}", rep.ppl, rep.token_acc);
            match observe_validation(&mut ckpt.state, rep.ppl, cfg.patience) {
                Verdict::Improved => best = Some(ckpt.model.clone()),
                Verdict::Worse => {}
                Verdict::Stop => {
                    stopped_early = true;
                    break;
                }
            }
        } else if step.is_multiple_of(cfg.log_every) {
            write_log(log, step, loss_sum / loss_n as f64, lr, None)?;
            loss_sum = 0.0;
            loss_n = 0;
        }
    }
    debug_assert!(last_validated.is_none() || last_validated <= Some(ckpt.state.step));
    if let Some(m) = best {
        ckpt.model = m;
    }
    ckpt.optimizer = Some(opt);
    Ok(TrainOutcome {
        steps_run: ckpt.state.step - start,
        stopped_early,
        best_ppl: ckpt.state.best_ppl,
        last_loss,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Worse,
    Stop,
}

/// Early-stopping bookkeeping for one validation perplexity.
pub fn observe_validation(state: &mut TrainState, ppl: f64, patience: usize) -> Verdict {
    if state.best_ppl.is_none_or(|b| ppl < b) {
        state.best_ppl = Some(ppl);
        state.bad_validations = 0;
        return Verdict::Improved;
    }
    state.bad_validations += 1;
    if state.bad_validations >= patience {
        Verdict::Stop
    } else {
        Verdict::Worse
    }
}

fn write_log(w: &mut dyn Write, step: u64, loss: f64, lr: f64, valid_ppl: Option<f64>) -> Result<()> {
    let line = serde_json::to_string(&LogLine {
        step,
        loss,
        lr,
        valid_ppl,
    })?;
    writeln!(w, "{line}")?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    /// Same architecture and vocabulary.
    Direct,
    /// Grow the source embedding with a segmenter trained on the new data.
    VocabExpand,
}

impl FinetuneMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "expand" | "vocab_expand" | "vocab-expand" => Ok(Self::VocabExpand),
            _ => config(format!("unknown finetune mode {s:?}")),
        }
    }
}

/// Source side for a checkpoint: its render settings for pixel models, its
/// source vocabulary for subword models.
pub fn source_side<'a>(
    ckpt: &'a Checkpoint,
    atlas: &'a FontAtlas,
    default_render: &'a RenderConfig,
) -> Result<SourceSide<'a>> {
    match ckpt.model.cfg.source_mode {
        SourceMode::Pixel => Ok(SourceSide::Pixel {
            atlas,
            render: ckpt.render.as_ref().unwrap_or(default_render),
            window: ckpt.model.cfg.window,
        }),
        SourceMode::Subword => match &ckpt.src_vocab {
            Some(v) => Ok(SourceSide::Subword(v)),
            None => config("subword checkpoint has no source vocabulary"),
        },
    }
}

/// Adapts a trained checkpoint to a new corpus, epoch by epoch with early
/// stopping on validation perplexity.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    ckpt: &mut Checkpoint,
    corpus: &ParallelCorpus,
    valid: &ParallelCorpus,
    mode: FinetuneMode,
    cfg: &TrainConfig,
    atlas: &FontAtlas,
    seed: u64,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ft = &cfg.finetune;
    if corpus.is_empty() || valid.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let corpus = match ft.sample_size {
        Some(n) => corpus.sample(n, seed),
        None => corpus.clone(),
    };
    let shapes_before: Vec<Vec<usize>> = ckpt.model.params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    if mode == FinetuneMode::VocabExpand {
        if ckpt.model.cfg.source_mode == SourceMode::Pixel {
            return config("pixel models are vocabulary-free");
        }
        let mut vocab = ckpt.src_vocab.clone().expect("subword checkpoint has a vocabulary");
        let d = ckpt.model.cfg.d_model;
        for lang in &corpus.langs {
            let part = corpus.for_lang(lang);
            let addition = train_segmenter(&part.sources(), ft.expand_vocab_size)?;
            let (grown, plan) = expand_vocabulary(&vocab, &addition, lang);
            let table = ckpt
                .model
                .params
                .get("src.emb")
                .expect("subword embedding")
                .data()
                .to_vec();
            let rows = grow_rows(&table, d, &plan, ft.expand_noise, seed);
            ckpt.model.resize_source_vocab(rows)?;
            log::info!("expanded source vocabulary by {} rows for {lang}", plan.new_ids.len());
            vocab = grown;
        }
        ckpt.src_vocab = Some(vocab);
    }
    let default_render = RenderConfig::with_height(ckpt.model.cfg.window.h as u32);
    let (train_ds, valid_ds) = {
        let side = source_side(ckpt, atlas, &default_render)?;
        (
            Dataset::prepare(&corpus, &side, &ckpt.tgt_vocab)?,
            Dataset::prepare(valid, &side, &ckpt.tgt_vocab)?,
        )
    };
    if mode == FinetuneMode::Direct {
        let after: Vec<Vec<usize>> = ckpt.model.params.tensors().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes_before, after, "direct finetuning changed a parameter shape");
    }
    let steps_per_epoch = train_ds.total_cost().div_ceil(cfg.batch_tokens).max(1) as u64;
    let mut run = cfg.clone();
    run.validate_every = steps_per_epoch;
    run.patience = ft.patience;
    run.max_steps = ckpt.state.step + steps_per_epoch * ft.max_epochs as u64;
    run.peak_lr = ft.peak_lr;
    run.warmup_steps = ft.warmup_steps;
    ckpt.optimizer = Some(AdamState::new(run.adam(), ckpt.model.params.tensors()));
    ckpt.state.best_ppl = None;
    ckpt.state.bad_validations = 0;
    let sampler = SamplerConfig { temperature: 1.0, seed };
    train(ckpt, &train_ds, &valid_ds, &run, &sampler, log)
}
