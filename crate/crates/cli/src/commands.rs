use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pixelrep::analysis;
use pixelrep::model::{count_params, Checkpoint, Model, SourceInput, SourceMode};
use pixelrep::subword::{self, SubwordModel};
use pixelrep::textimage::{load_fonts, render_sentence, write_cache_file, FontAtlas, RenderConfig, SentenceImage};
use pixelrep::trainkit::{
    self, make_synthetic_corpus, source_side, BatchSampler, Dataset, Example, FinetuneMode, ParallelCorpus,
    SamplerConfig, Script, SynthSpec, Task, TrainConfig,
};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{ExperimentConfig, SourceVocab};
use crate::manifest::ManifestBuilder;
use crate::{
    AnalyzeCmd, Column, EvaluateArgs, FinetuneArgs, Global, ParamsArgs, RenderArgs, SynthArgs, TrainArgs,
    TranslateArgs, VocabCmd,
};

fn out_dir(g: &Global) -> Result<PathBuf> {
    let out = g.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(std::io::BufReader::new(f).lines().collect::<std::io::Result<_>>()?)
}

fn load_corpus(path: &Path) -> Result<ParallelCorpus> {
    ParallelCorpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn column_lines(path: &Path, column: Option<Column>) -> Result<Vec<String>> {
    Ok(match column {
        None => read_lines(path)?,
        Some(c) => {
            let corpus = load_corpus(path)?;
            let v = match c {
                Column::Source => corpus.sources(),
                Column::Target => corpus.targets(),
            };
            v.into_iter().map(String::from).collect()
        }
    })
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

pub fn render(g: &Global, a: RenderArgs) -> Result<()> {
    let lines = match (&a.text, &a.input) {
        (Some(t), _) => vec![t.clone()],
        (None, Some(p)) => read_lines(p)?,
        (None, None) => bail!("give --in or --text"),
    };
    let atlas = if a.font.is_empty() {
        FontAtlas::bundled()
    } else {
        load_fonts(&a.font)?
    };
    let rc = RenderConfig::with_height(a.height);
    rc.validate()?;
    let images = lines
        .par_iter()
        .map(|l| render_sentence(l, &atlas, &rc))
        .collect::<pixelrep::Result<Vec<SentenceImage>>>()?;
    let out = out_dir(g)?;
    write_cache_file(&out.join("render.cache"), a.height, &images)?;
    if a.pgm {
        if let Some(img) = images.first() {
            write_pgm(&out.join("first.pgm"), img)?;
        }
    }
    let widths: usize = images.iter().map(|i| i.width).sum();
    ManifestBuilder::new("render", g.seed.unwrap_or(0))
        .param("lines", images.len())
        .param("height", a.height)
        .write(&out)?;
    log::info!("rendered {} lines, {widths} columns", images.len());
    Ok(())
}

/// Ink is drawn black on white.
fn write_pgm(path: &Path, img: &SentenceImage) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&v| 255 - pixelrep::textimage::quantize(v))
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

pub fn vocab(g: &Global, c: VocabCmd) -> Result<()> {
    let (model, output) = match c {
        VocabCmd::Train {
            input,
            column,
            size,
            output,
        } => {
            let lines = column_lines(&input, column)?;
            (subword::train_segmenter(&lines, size)?, output)
        }
        VocabCmd::Union { models, output } => {
            let mut parts = Vec::new();
            for m in &models {
                let Some((lang, path)) = m.split_once('=') else {
                    bail!("--model expects lang=path, got {m:?}");
                };
                parts.push((lang.to_string(), SubwordModel::load(Path::new(path))?));
            }
            (subword::build_union(&parts)?, output)
        }
        VocabCmd::Joint {
            data,
            column,
            per_lang,
            temperature,
            output,
        } => {
            let corpus = load_corpus(&data)?;
            let per: Vec<(String, Vec<String>)> = corpus
                .langs
                .iter()
                .map(|l| {
                    let part = corpus.for_lang(l);
                    let v = match column {
                        Column::Source => part.sources(),
                        Column::Target => part.targets(),
                    };
                    (l.clone(), v.into_iter().map(String::from).collect())
                })
                .collect();
            let total = subword::joint_total_size(per_lang, per.len());
            (subword::build_joint(&per, total, temperature)?, output)
        }
        VocabCmd::Expand {
            base,
            addition,
            lang,
            output,
        } => {
            let base = SubwordModel::load(&base)?;
            let add = SubwordModel::load(&addition)?;
            let (m, plan) = subword::expand_vocabulary(&base, &add, &lang);
            log::info!("added {} tokens to {}", plan.new_ids.len(), plan.old_size);
            (m, output)
        }
    };
    model.save(&output)?;
    let _ = g;
    println!("{} tokens -> {}", model.size(), output.display());
    Ok(())
}

fn source_vocab(cfg: &ExperimentConfig, corpus: &ParallelCorpus) -> Result<SubwordModel> {
    let per: Vec<(String, Vec<&str>)> = corpus
        .langs
        .iter()
        .map(|l| {
            (
                l.clone(),
                corpus
                    .examples
                    .iter()
                    .filter(|e| &e.lang == l)
                    .map(|e| e.source.as_str())
                    .collect(),
            )
        })
        .collect();
    Ok(match cfg.vocab.src_kind {
        SourceVocab::Joint => subword::build_joint(&per, cfg.vocab.src_size, cfg.sampler.temperature)?,
        SourceVocab::Union => {
            let parts = per
                .iter()
                .map(|(l, lines)| Ok((l.clone(), subword::train_segmenter(lines, cfg.vocab.src_size)?)))
                .collect::<pixelrep::Result<Vec<_>>>()?;
            subword::build_union(&parts)?
        }
    })
}

pub fn train(g: &Global, a: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.sampler.seed = cfg.seed;
    let dir = match a.data.or_else(|| cfg.data.dir.clone()) {
        Some(d) => d,
        None => bail!("data.dir: not set and no --data given"),
    };
    let train_c = load_corpus(&dir.join("train.tsv"))?;
    let valid_c = load_corpus(&dir.join("valid.tsv"))?;

    let tgt = subword::train_segmenter(&train_c.targets(), cfg.vocab.tgt_size)?;
    cfg.model.v_tgt = tgt.size();
    let src = match cfg.model.source_mode {
        SourceMode::Subword => {
            let v = source_vocab(&cfg, &train_c)?;
            cfg.model.v_src = Some(v.size());
            Some(v)
        }
        SourceMode::Pixel => None,
    };
    let mut ckpt = Checkpoint::new(Model::new(cfg.model.clone(), cfg.seed)?, tgt);
    ckpt.src_vocab = src;
    if cfg.model.source_mode == SourceMode::Pixel {
        ckpt.render = Some(cfg.render.clone());
    }
    log::info!("{} parameters", ckpt.model.num_params());

    let atlas = FontAtlas::bundled();
    let (tr, va) = {
        let side = source_side(&ckpt, &atlas, &cfg.render)?;
        (
            Dataset::prepare(&train_c, &side, &ckpt.tgt_vocab)?,
            Dataset::prepare(&valid_c, &side, &ckpt.tgt_vocab)?,
        )
    };
    let out = out_dir(g)?;
    let mut log_file = std::io::BufWriter::new(fs::File::create(out.join("train.jsonl"))?);
    let outcome = trainkit::train(&mut ckpt, &tr, &va, &cfg.train, &cfg.sampler, &mut log_file)?;
    log_file.flush()?;
    drop(log_file);
    ckpt.save(&out.join("ckpt"))?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let m = ManifestBuilder::new("train", cfg.seed)
        .config(cfg.hash(), serde_json::to_value(&cfg)?)
        .param("data", dir.display())
        .param("steps", outcome.steps_run)
        .write(&out)?;
    print_json(&json!({
        "steps": outcome.steps_run,
        "stopped_early": outcome.stopped_early,
        "best_valid_ppl": outcome.best_ppl,
        "outputs_hash": m.outputs_hash,
    }));
    Ok(())
}

pub fn finetune(g: &Global, a: FinetuneArgs) -> Result<()> {
    let mut ckpt = Checkpoint::load(&a.ckpt)?;
    let mode = FinetuneMode::parse(&a.mode)?;
    let mut tc = match &a.config {
        Some(p) => ExperimentConfig::load(p)?.train,
        None => TrainConfig::default(),
    };
    if a.samples.is_some() {
        tc.finetune.sample_size = a.samples;
    }
    let seed = g.seed.unwrap_or(0);
    let corpus = load_corpus(&a.data.join("train.tsv"))?;
    let valid = load_corpus(&a.data.join("valid.tsv"))?;
    let before = ckpt.model.num_params();
    let out = out_dir(g)?;
    let mut log_file = std::io::BufWriter::new(fs::File::create(out.join("finetune.jsonl"))?);
    let atlas = FontAtlas::bundled();
    let outcome = trainkit::finetune(&mut ckpt, &corpus, &valid, mode, &tc, &atlas, seed, &mut log_file)?;
    log_file.flush()?;
    drop(log_file);
    ckpt.save(&out.join("ckpt"))?;
    let m = ManifestBuilder::new("finetune", seed)
        .param("mode", &a.mode)
        .param("samples", a.samples.map_or("all".into(), |n| n.to_string()))
        .param("base", a.ckpt.display())
        .write(&out)?;
    print_json(&json!({
        "steps": outcome.steps_run,
        "params_before": before,
        "params_after": ckpt.model.num_params(),
        "best_valid_ppl": outcome.best_ppl,
        "outputs_hash": m.outputs_hash,
    }));
    Ok(())
}

fn source_dataset(ckpt: &Checkpoint, atlas: &FontAtlas, lines: &[String], lang: &str) -> Result<Dataset> {
    let corpus = ParallelCorpus::from_examples(
        lines
            .iter()
            .map(|l| Example {
                lang: lang.to_string(),
                source: l.clone(),
                target: String::new(),
            })
            .collect(),
    );
    let rc = RenderConfig::with_height(ckpt.model.cfg.window.h as u32);
    let side = source_side(ckpt, atlas, &rc)?;
    Ok(Dataset::prepare(&corpus, &side, &ckpt.tgt_vocab)?)
}

pub fn translate(_g: &Global, a: TranslateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let lines = read_lines(&a.input)?;
    if lines.is_empty() {
        bail!("{} is empty", a.input.display());
    }
    let atlas = FontAtlas::bundled();
    let ds = source_dataset(&ckpt, &atlas, &lines, &a.lang)?;
    let hyps = trainkit::translate_dataset(&ckpt.model, &ds, &ckpt.tgt_vocab, a.max_len, a.beam, 4000)?;
    let mut text = hyps.join("\n");
    text.push('\n');
    match &a.output {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn metrics(names: &[String], hyps: &[String], refs: &[String]) -> Result<serde_json::Map<String, serde_json::Value>> {
    let mut m = serde_json::Map::new();
    for name in names {
        let v = match name.trim() {
            "bleu" => analysis::bleu(hyps, refs)?,
            "chrf" => analysis::chrf(hyps, refs)?,
            other => bail!("unknown metric {other:?} (expected bleu or chrf)"),
        };
        m.insert(name.trim().to_string(), json!(v));
    }
    Ok(m)
}

pub fn evaluate(g: &Global, a: EvaluateArgs) -> Result<()> {
    let result = if let (Some(h), Some(r)) = (&a.hyp, &a.reference) {
        let hyps = read_lines(h)?;
        let refs = read_lines(r)?;
        serde_json::Value::Object(metrics(&a.metric, &hyps, &refs)?)
    } else if let (Some(c), Some(d)) = (&a.ckpt, &a.data) {
        let ckpt = Checkpoint::load(c)?;
        let corpus = load_corpus(d)?;
        let atlas = FontAtlas::bundled();
        let rc = RenderConfig::with_height(ckpt.model.cfg.window.h as u32);
        let side = source_side(&ckpt, &atlas, &rc)?;
        let ds = Dataset::prepare(&corpus, &side, &ckpt.tgt_vocab)?;
        let rep = trainkit::evaluate(&ckpt.model, &ds, 4000)?;
        let hyps = trainkit::translate_dataset(&ckpt.model, &ds, &ckpt.tgt_vocab, a.max_len, a.beam, 4000)?;
        let refs: Vec<String> = corpus.targets().into_iter().map(String::from).collect();
        let mut m = metrics(&a.metric, &hyps, &refs)?;
        m.insert("ppl".into(), json!(rep.ppl));
        m.insert("token_acc".into(), json!(rep.token_acc));
        if let Some(out) = &g.out {
            fs::create_dir_all(out)?;
            fs::write(out.join("hyp.txt"), hyps.join("\n") + "\n")?;
        }
        serde_json::Value::Object(m)
    } else {
        bail!("give --hyp and --ref, or --ckpt and --data");
    };
    if let Some(out) = &g.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("eval.json"), serde_json::to_string_pretty(&result)?)?;
    }
    print_json(&result);
    Ok(())
}

fn atlas_and_render(ckpt: &Checkpoint) -> (FontAtlas, RenderConfig) {
    let rc = ckpt
        .render
        .clone()
        .unwrap_or_else(|| RenderConfig::with_height(ckpt.model.cfg.window.h as u32));
    (FontAtlas::bundled(), rc)
}

pub fn analyze(g: &Global, c: AnalyzeCmd) -> Result<()> {
    match c {
        AnalyzeCmd::Svd {
            ckpt,
            vocab,
            corpus,
            keep,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let vocab = match (&vocab, &ck.src_vocab) {
                (Some(p), _) => SubwordModel::load(p)?,
                (None, Some(v)) => v.clone(),
                (None, None) => bail!("pixel checkpoints need --vocab"),
            };
            let ranks = match &corpus {
                Some(p) => {
                    let c = load_corpus(p)?;
                    let pairs: Vec<(&str, Option<&str>)> = c
                        .examples
                        .iter()
                        .map(|e| (e.source.as_str(), Some(e.lang.as_str())))
                        .collect();
                    Some(analysis::frequency_ranks(&vocab, &pairs))
                }
                None => None,
            };
            let set = match ck.model.cfg.source_mode {
                SourceMode::Pixel => {
                    let (atlas, rc) = atlas_and_render(&ck);
                    analysis::pixel_token_embeddings_for_vocab(&ck.model, &atlas, &rc, &vocab, ranks.as_deref())?.0
                }
                SourceMode::Subword => {
                    let ids: Vec<u32> = (subword::SPECIALS.len() as u32..vocab.size() as u32).collect();
                    let vectors = analysis::subword_embeddings(&ck.model, &ids)?;
                    let labels = ids
                        .iter()
                        .map(|&i| vocab.vocab.token(i).unwrap_or("").to_string())
                        .collect();
                    let freq_rank =
                        ranks.map(|r| analysis::rerank(&ids.iter().map(|&i| r[i as usize]).collect::<Vec<_>>()));
                    analysis::EmbeddingSet {
                        vectors,
                        labels,
                        freq_rank,
                    }
                }
            };
            let s = analysis::svd2d(&set.vectors, keep)?;
            let out = out_dir(g)?;
            let mut f = std::io::BufWriter::new(fs::File::create(out.join("svd.tsv"))?);
            writeln!(f, "label\trank\tx\ty")?;
            for (&i, xy) in s.kept.iter().zip(&s.coords) {
                let rank = set.freq_rank.as_ref().map_or(String::new(), |r| r[i].to_string());
                writeln!(
                    f,
                    "{}\t{rank}\t{:.6}\t{:.6}",
                    set.labels[i].replace('\t', " "),
                    xy[0],
                    xy[1]
                )?;
            }
            f.flush()?;
            let summary = json!({
                "points": s.kept.len(),
                "singular_values": s.singular_values,
                "explained": s.explained,
            });
            fs::write(out.join("svd.json"), serde_json::to_string_pretty(&summary)?)?;
            print_json(&summary);
        }
        AnalyzeCmd::Coverage {
            pretrain,
            new,
            token_weighted,
        } => {
            let pre = load_corpus(&pretrain)?;
            let new = load_corpus(&new)?;
            let reports = new
                .langs
                .iter()
                .map(|l| analysis::coverage_report(l, &pre.sources(), &new.for_lang(l).sources(), token_weighted))
                .collect::<pixelrep::Result<Vec<_>>>()?;
            let out = out_dir(g)?;
            let mut f = fs::File::create(out.join("coverage.tsv"))?;
            analysis::write_coverage_tsv(&reports, &mut f)?;
            let v = serde_json::to_value(&reports)?;
            fs::write(out.join("coverage.json"), serde_json::to_string_pretty(&v)?)?;
            print_json(&v);
        }
        AnalyzeCmd::Updates {
            ckpt,
            data,
            batches,
            batch_tokens,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let corpus = load_corpus(&data)?;
            let (atlas, rc) = atlas_and_render(&ck);
            let side = source_side(&ck, &atlas, &rc)?;
            let ds = Dataset::prepare(&corpus, &side, &ck.tgt_vocab)?;
            let seed = g.seed.unwrap_or(0);
            let cfg = SamplerConfig { temperature: 5.0, seed };
            let mut sampler = BatchSampler::for_dataset(&ds, batch_tokens, &cfg)?;
            let mut fractions = Vec::with_capacity(batches);
            for _ in 0..batches {
                let idx = sampler.next_batch();
                let (src, tgt) = ds.batch(&idx)?;
                fractions.push(analysis::update_fraction(&ck.model, &src, &tgt)?);
            }
            let mean = fractions.iter().sum::<f64>() / fractions.len().max(1) as f64;
            let v = json!({ "mode": ck.model.cfg.source_mode, "mean_percent": mean, "per_batch": fractions });
            print_json(&v);
        }
        AnalyzeCmd::Similarity { ckpt, a, b } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (atlas, rc) = atlas_and_render(&ck);
            let s = analysis::activation_similarity(&ck.model, &atlas, &rc, &a, &b)?;
            print_json(&json!({ "a": a, "b": b, "cosine": s }));
        }
        AnalyzeCmd::ReprExport { ckpt, data } => {
            let ck = Checkpoint::load(&ckpt)?;
            let corpus = load_corpus(&data)?;
            let (atlas, rc) = atlas_and_render(&ck);
            let side = source_side(&ck, &atlas, &rc)?;
            let ds = Dataset::prepare(&corpus, &side, &ck.tgt_vocab)?;
            let out = out_dir(g)?;
            let mut f = std::io::BufWriter::new(fs::File::create(out.join("repr.tsv"))?);
            for idx in ds.sequential_batches(4000) {
                let src: SourceInput = ds.source(&idx)?;
                for (&i, v) in idx.iter().zip(ck.model.mean_pooled_repr(&src)?) {
                    let e = &corpus.examples[i];
                    let vals: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
                    writeln!(f, "{}\t{}\t{}", e.lang, e.source.replace('\t', " "), vals.join("\t"))?;
                }
            }
            f.flush()?;
        }
    }
    Ok(())
}

pub fn params(a: ParamsArgs) -> Result<()> {
    let cfg = match (&a.config, &a.preset) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(name)) => match ExperimentConfig::preset(name) {
            Some(c) => c,
            None => bail!(
                "unknown preset {name:?}; known: {}",
                pixelrep::model::ModelConfig::PRESETS.join(", ")
            ),
        },
        (None, None) => bail!("give --config or --preset"),
    };
    if let Some(p) = &a.emit {
        fs::write(p, cfg.to_json() + "\n")?;
    }
    let n = count_params(&cfg.model);
    println!("{n} parameters ({:.1}M)", n as f64 / 1e6);
    Ok(())
}

pub fn synth(g: &Global, a: SynthArgs) -> Result<()> {
    let scripts = a
        .scripts
        .iter()
        .map(|s| Script::parse(s))
        .collect::<pixelrep::Result<Vec<_>>>()?;
    let task = Task::parse(&a.task)?;
    let seed = g.seed.unwrap_or(0);
    if !(a.holdout > 0.0 && a.holdout < 0.5) {
        bail!("--holdout must be in (0, 0.5)");
    }
    let corpus = make_synthetic_corpus(&SynthSpec::new(scripts, a.n, task, seed))?;
    let (train, rest) = corpus.split(a.holdout * 2.0);
    let (valid, test) = rest.split(0.5);
    let out = out_dir(g)?;
    train.save(&out.join("train.tsv"))?;
    valid.save(&out.join("valid.tsv"))?;
    test.save(&out.join("test.tsv"))?;
    let m = ManifestBuilder::new("synth", seed)
        .param("scripts", a.scripts.join(","))
        .param("n", a.n)
        .param("task", &a.task)
        .write(&out)?;
    print_json(&json!({
        "train": train.len(), "valid": valid.len(), "test": test.len(), "outputs_hash": m.outputs_hash
    }));
    Ok(())
}
