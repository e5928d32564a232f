use pixelrep::model::{Checkpoint, Model, ModelConfig, TrainState};
use pixelrep::subword::{train_segmenter, SubwordModel};
use pixelrep::textimage::{FontAtlas, RenderConfig};
use pixelrep::trainkit::*;
use proptest::prelude::*;

#[test]
fn temperature_reference_values() {
    let p1 = temperature_probs(&[100.0, 6400.0], 1.0).unwrap();
    assert!((p1[0] - 100.0 / 6500.0).abs() < 1e-12);
    assert!((p1[0] - 0.0154).abs() < 1e-4);
    let p5 = temperature_probs(&[100.0, 6400.0], 5.0).unwrap();
    // independent evaluation: 100^0.2 and 6400^0.2
    let a = 100f64.powf(0.2);
    let b = 6400f64.powf(0.2);
    assert!((p5[0] - a / (a + b)).abs() < 1e-12);
    assert!((p5[0] - 0.303).abs() < 1e-3 && (p5[1] - 0.697).abs() < 1e-3, "{p5:?}");
}

#[test]
fn temperature_limits_and_errors() {
    let inf = temperature_probs(&[1.0, 50.0, 900.0], f64::INFINITY).unwrap();
    assert!(inf.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
    let eq = temperature_probs(&[7.0, 7.0], 2.5).unwrap();
    assert_eq!(eq, vec![0.5, 0.5]);
    let z = temperature_probs(&[0.0, 3.0], 5.0).unwrap();
    assert_eq!(z, vec![0.0, 1.0]);
    assert!(temperature_probs(&[1.0, 2.0], 0.5).is_err());
    assert!(temperature_probs(&[0.0, 0.0], 5.0).is_err());
}

proptest! {
    #[test]
    fn temperature_probs_sum_to_one_and_are_monotone(
        counts in proptest::collection::vec(1u32..100_000, 1..8),
        t in 1.0f64..20.0,
    ) {
        let c: Vec<f64> = counts.iter().map(|&x| x as f64).collect();
        let p = temperature_probs(&c, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..c.len() {
            for j in 0..c.len() {
                if c[i] > c[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }
}

#[test]
fn monte_carlo_language_frequencies() {
    let mut langs = vec![0usize; 100];
    langs.extend(std::iter::repeat_n(1, 6400));
    let costs = vec![5; langs.len()];
    let cfg = SamplerConfig {
        temperature: 5.0,
        seed: 11,
    };
    let mut s = BatchSampler::new(&langs, &costs, 2, 5, &cfg).unwrap();
    let n = 10_000;
    let mut hits = 0;
    for _ in 0..n {
        let b = s.next_batch();
        assert_eq!(b.len(), 1);
        hits += (langs[b[0]] == 0) as usize;
    }
    let freq = hits as f64 / n as f64;
    assert!((freq - s.probs[0]).abs() < 0.02, "{freq} vs {}", s.probs[0]);
}

#[test]
fn batches_respect_the_budget() {
    let langs = vec![0; 50];
    let costs = vec![4; 50];
    let cfg = SamplerConfig::default();
    let mut s = BatchSampler::new(&langs, &costs, 1, 10, &cfg).unwrap();
    for _ in 0..100 {
        let b = s.next_batch();
        assert!(!b.is_empty() && b.len() <= 2);
        assert!(b.iter().map(|&i| costs[i]).sum::<usize>() <= 10);
    }
    // an example larger than the budget still forms a batch of its own
    let mut s = BatchSampler::new(&[0, 0], &[30, 30], 1, 10, &cfg).unwrap();
    assert_eq!(s.next_batch().len(), 1);
}

#[test]
fn batch_stream_is_deterministic_under_seed() {
    let langs: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let costs: Vec<usize> = (0..300).map(|i| 3 + i % 7).collect();
    let cfg = SamplerConfig {
        temperature: 5.0,
        seed: 42,
    };
    let run = |cfg: &SamplerConfig| {
        let mut s = BatchSampler::new(&langs, &costs, 3, 40, cfg).unwrap();
        (0..50).map(|_| s.next_batch()).collect::<Vec<_>>()
    };
    assert_eq!(run(&cfg), run(&cfg));
    assert_ne!(run(&cfg), run(&SamplerConfig { seed: 43, ..cfg }));
}

#[test]
fn patience_one_stops_on_second_worse_validation() {
    let mut st = TrainState::default();
    let mut seen = 0;
    for ppl in [10.0, 11.0, 12.0, 13.0] {
        seen += 1;
        if observe_validation(&mut st, ppl, 1) == Verdict::Stop {
            break;
        }
    }
    assert_eq!(seen, 2);
    let mut st = TrainState::default();
    let v: Vec<Verdict> = [5.0, 6.0, 4.0, 4.5, 4.6, 4.7]
        .iter()
        .map(|&p| observe_validation(&mut st, p, 3))
        .collect();
    use Verdict::*;
    assert_eq!(v, vec![Improved, Worse, Improved, Worse, Worse, Stop]);
    assert_eq!(st.best_ppl, Some(4.0));
}

#[test]
fn synthetic_corpus_properties() {
    let spec = SynthSpec::new(vec![Script::Latin, Script::Greek], 50, Task::Transliterate, 9);
    let a = make_synthetic_corpus(&spec).unwrap();
    let b = make_synthetic_corpus(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.counts(), vec![50, 50]);
    assert!(make_synthetic_corpus(&SynthSpec::new(vec![Script::Latin], 0, Task::Copy, 0)).is_err());
    for script in [Script::Latin, Script::Greek] {
        let map = script_map(script);
        for e in &a.for_lang(script.name()).examples {
            let back: String = e
                .source
                .chars()
                .map(|c| map.iter().position(|&m| m == c).map_or(c, |i| (b'a' + i as u8) as char))
                .collect();
            assert_eq!(back, e.target);
        }
    }
    let nums = make_synthetic_corpus(&SynthSpec::new(vec![Script::Hebrew], 20, Task::NumberWords, 1)).unwrap();
    for e in &nums.examples {
        assert!(e.source.split(' ').all(|w| w.parse::<u32>().is_ok()));
    }
}

#[test]
fn corpus_tsv_roundtrip_sample_and_split() {
    let c = make_synthetic_corpus(&SynthSpec::new(
        vec![Script::Cyrillic, Script::Latin],
        30,
        Task::Copy,
        2,
    ))
    .unwrap();
    let mut buf = Vec::new();
    c.write_tsv(&mut buf).unwrap();
    let back = ParallelCorpus::read_tsv(&buf[..]).unwrap();
    assert_eq!(back, c);
    assert_eq!(c.sample(1000, 0), c);
    assert_eq!(c.sample(10, 0).len(), 10);
    assert_eq!(c.sample(10, 0), c.sample(10, 0));
    let (tr, va) = c.split(0.1);
    assert_eq!(tr.len() + va.len(), c.len());
    assert_eq!(va.counts(), vec![3, 3]);
    assert!(ParallelCorpus::read_tsv(&b"only\ttwo\n"[..]).is_err());
}

struct Toy {
    atlas: FontAtlas,
    render: RenderConfig,
    corpus: ParallelCorpus,
    tgt: SubwordModel,
}

fn toy(scripts: Vec<Script>, n: usize) -> Toy {
    let mut spec = SynthSpec::new(scripts, n, Task::Transliterate, 5);
    spec.max_words = 3;
    let corpus = make_synthetic_corpus(&spec).unwrap();
    let tgt = train_segmenter(&corpus.targets(), 60).unwrap();
    Toy {
        atlas: FontAtlas::bundled(),
        render: RenderConfig::default(),
        corpus,
        tgt,
    }
}

fn pixel_ckpt(t: &Toy, seed: u64) -> Checkpoint {
    let cfg = ModelConfig::pixel(1, 1, 16, 32, 2, t.tgt.size());
    let mut c = Checkpoint::new(Model::new(cfg, seed).unwrap(), t.tgt.clone());
    c.render = Some(t.render.clone());
    c
}

fn subword_ckpt(t: &Toy, seed: u64) -> Checkpoint {
    let src = train_segmenter(&t.corpus.sources(), 80).unwrap();
    let cfg = ModelConfig::subword(1, 1, 16, 32, 2, src.size(), t.tgt.size());
    let mut c = Checkpoint::new(Model::new(cfg, seed).unwrap(), t.tgt.clone());
    c.src_vocab = Some(src);
    c
}

fn quick_cfg(max_steps: u64) -> TrainConfig {
    TrainConfig {
        batch_tokens: 200,
        validate_every: 5,
        max_steps,
        warmup_steps: 5,
        peak_lr: 2e-3,
        log_every: 2,
        max_len: 12,
        ..Default::default()
    }
}

fn datasets(ck: &Checkpoint, t: &Toy) -> (Dataset, Dataset) {
    let (tr, va) = t.corpus.split(0.2);
    let side = source_side(ck, &t.atlas, &t.render).unwrap();
    (
        Dataset::prepare(&tr, &side, &t.tgt).unwrap(),
        Dataset::prepare(&va, &side, &t.tgt).unwrap(),
    )
}

#[test]
fn training_is_deterministic_and_resumes_the_step_counter() {
    let t = toy(vec![Script::Latin], 20);
    let sampler = SamplerConfig {
        temperature: 5.0,
        seed: 3,
    };
    let mut a = pixel_ckpt(&t, 1);
    let (tr, va) = datasets(&a, &t);
    let mut log = Vec::new();
    let out = train(&mut a, &tr, &va, &quick_cfg(6), &sampler, &mut log).unwrap();
    assert_eq!(out.steps_run, 6);
    assert_eq!(a.state.step, 6);
    let lines: Vec<serde_json::Value> = std::str::from_utf8(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.iter().all(|l| l.get("step").is_some() && l.get("lr").is_some()));
    assert_eq!(lines.iter().filter(|l| !l["valid_ppl"].is_null()).count(), 2);

    let mut b = pixel_ckpt(&t, 1);
    train(&mut b, &tr, &va, &quick_cfg(6), &sampler, &mut Vec::new()).unwrap();
    assert_eq!(a.model.flat_params(), b.model.flat_params());

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let mut resumed = Checkpoint::load(dir.path()).unwrap();
    let out = train(&mut resumed, &tr, &va, &quick_cfg(9), &sampler, &mut Vec::new()).unwrap();
    assert_eq!(out.steps_run, 3);
    assert_eq!(resumed.state.step, 9);
    assert!(resumed.state.history.iter().any(|r| r.step == 9));
}

#[test]
fn evaluation_reports_finite_perplexity() {
    let t = toy(vec![Script::Latin], 10);
    let ck = subword_ckpt(&t, 2);
    let (_, va) = datasets(&ck, &t);
    let r = evaluate(&ck.model, &va, 100).unwrap();
    assert!(r.ppl.is_finite() && r.ppl > 1.0);
    assert!((0.0..=1.0).contains(&r.token_acc));
    let out = translate_dataset(&ck.model, &va, &t.tgt, 5, 1, 100).unwrap();
    assert_eq!(out.len(), va.len());
}

fn ft_cfg() -> TrainConfig {
    let mut c = quick_cfg(1000);
    c.finetune.max_epochs = 1;
    c.finetune.expand_vocab_size = 40;
    c
}

#[test]
fn pixel_direct_finetuning_keeps_every_shape() {
    let t = toy(vec![Script::Latin], 10);
    let new = toy(vec![Script::Hebrew], 10).corpus;
    let mut ck = pixel_ckpt(&t, 1);
    let before = ck.model.num_params();
    let (tr, va) = new.split(0.3);
    finetune(
        &mut ck,
        &tr,
        &va,
        FinetuneMode::Direct,
        &ft_cfg(),
        &t.atlas,
        0,
        &mut Vec::new(),
    )
    .unwrap();
    assert_eq!(ck.model.num_params(), before);
    assert!(ck.state.step > 0);
    let err = finetune(
        &mut ck,
        &tr,
        &va,
        FinetuneMode::VocabExpand,
        &ft_cfg(),
        &t.atlas,
        0,
        &mut Vec::new(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("pixel models are vocabulary-free"));
}

#[test]
fn vocabulary_expansion_grows_only_source_rows() {
    let t = toy(vec![Script::Latin], 10);
    let new = toy(vec![Script::Greek], 10).corpus;
    let mut ck = subword_ckpt(&t, 1);
    let v_before = ck.src_vocab.as_ref().unwrap().size();
    let before = ck.model.num_params();
    let (tr, va) = new.split(0.3);
    finetune(
        &mut ck,
        &tr,
        &va,
        FinetuneMode::VocabExpand,
        &ft_cfg(),
        &t.atlas,
        0,
        &mut Vec::new(),
    )
    .unwrap();
    let v_after = ck.src_vocab.as_ref().unwrap().size();
    assert!(v_after > v_before);
    assert_eq!(ck.model.num_params() - before, (v_after - v_before) * 16);
    assert_eq!(ck.model.cfg.v_src, Some(v_after));
}

#[test]
fn finetune_mode_names() {
    assert_eq!(FinetuneMode::parse("direct").unwrap(), FinetuneMode::Direct);
    assert_eq!(FinetuneMode::parse("expand").unwrap(), FinetuneMode::VocabExpand);
    assert!(FinetuneMode::parse("grow").is_err());
}
