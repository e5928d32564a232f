use std::collections::{BTreeMap, HashMap};

use pixelrep::subword::*;
use proptest::prelude::*;

/// Plain string BPE used as the reference: full pair recount each round,
/// left-to-right non-overlapping replacement.
fn naive_bpe(corpus: &[&str], target: usize) -> Vec<(String, String)> {
    let mut words: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    for line in corpus {
        for w in line.split_whitespace() {
            let syms = std::iter::once("\u{2581}".to_string())
                .chain(w.chars().map(|c| c.to_string()))
                .collect();
            *words.entry(syms).or_default() += 1;
        }
    }
    let mut alphabet: Vec<char> = corpus
        .iter()
        .flat_map(|l| l.chars())
        .filter(|c| !c.is_whitespace())
        .collect();
    alphabet.sort();
    alphabet.dedup();
    let mut size = 4 + 1 + alphabet.len();
    let mut merges = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    while size < target {
        let mut pairs: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (w, n) in &words {
            for p in w.windows(2) {
                *pairs.entry((p[0].clone(), p[1].clone())).or_default() += n;
            }
        }
        let mut best: Option<((String, String), u64)> = None;
        for (p, &n) in &pairs {
            if merges.contains(p) {
                continue;
            }
            // BTreeMap order is lexicographic, so only a strictly larger count wins
            if best.as_ref().is_none_or(|(_, b)| n > *b) {
                best = Some((p.clone(), n));
            }
        }
        let Some(((a, b), n)) = best else { break };
        if n < 2 {
            break;
        }
        let joined = format!("{a}{b}");
        if !tokens.contains(&joined) && !alphabet.iter().any(|c| c.to_string() == joined) {
            tokens.push(joined.clone());
            size += 1;
        }
        merges.push((a.clone(), b.clone()));
        let mut next = BTreeMap::new();
        for (w, cnt) in words {
            let mut out = Vec::new();
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
                    out.push(joined.clone());
                    i += 2;
                } else {
                    out.push(w[i].clone());
                    i += 1;
                }
            }
            *next.entry(out).or_default() += cnt;
        }
        words = next;
    }
    merges
}

fn merges_of(m: &SubwordModel) -> Vec<(String, String)> {
    m.segmenters[0].1.merges.clone()
}

fn pair(a: &str, b: &str) -> (String, String) {
    (a.to_string(), b.to_string())
}

#[test]
fn specials_have_fixed_ids() {
    let m = train_segmenter(&["ab ab"], 10).unwrap();
    for (i, s) in SPECIALS.iter().enumerate() {
        assert_eq!(m.vocab.id(s), Some(i as u32));
    }
    assert_eq!(m.vocab.id(&MARKER.to_string()), Some(4));
}

#[test]
fn hand_traced_merges() {
    // ▁aaab + ▁aab: (a,a)=3 beats (▁,a)=2 and (a,b)=2.
    let m = train_segmenter(&["aaab", "aab"], 8).unwrap();
    assert_eq!(merges_of(&m), vec![pair("a", "a")]);
    assert_eq!(m.size(), 8);
    // After it: ▁ aa a b / ▁ aa b, so (▁,aa)=2 is the unique maximum.
    let m = train_segmenter(&["aaab", "aab"], 9).unwrap();
    assert_eq!(merges_of(&m), vec![pair("a", "a"), pair("\u{2581}", "aa")]);
    assert_eq!(merges_of(&m), naive_bpe(&["aaab", "aab"], 9));
    // Nothing else occurs twice.
    let m = train_segmenter(&["aaab", "aab"], 50).unwrap();
    assert_eq!(m.size(), 9);
}

#[test]
fn ties_break_lexicographically() {
    // (a,b) and (c,d) both occur twice; (▁,a) and (▁,c) too.
    let m = train_segmenter(&["ab cd ab cd"], 11).unwrap();
    assert_eq!(merges_of(&m)[0], pair("a", "b"));
    assert_eq!(merges_of(&m), naive_bpe(&["ab cd ab cd"], 11));
}

#[test]
fn target_too_small_is_rejected() {
    // 4 specials + marker + {a, b}
    assert!(train_segmenter(&["aab"], 7).is_err());
    assert!(train_segmenter(&["aab"], 8).is_ok());
    assert!(train_segmenter::<&str>(&[], 100).is_err());
}

#[test]
fn empty_text_encodes_to_nothing() {
    let m = train_segmenter(&["low lower lowest"], 20).unwrap();
    assert!(m.encode("").is_empty());
    assert!(m.encode("   ").is_empty());
}

#[test]
fn decode_inverts_encode() {
    let m = train_segmenter(&["low lower lowest newer wider"], 30).unwrap();
    let ids = m.encode("low lower");
    assert!(!ids.contains(&UNK));
    assert_eq!(m.decode(&ids), "low lower");
    assert_eq!(m.encode(&m.decode(&ids)), ids);
}

#[test]
fn unseen_script_is_all_unk() {
    let m = train_segmenter(&["the cat sat on the mat"], 30).unwrap();
    let ids = m.encode("αβγ δε");
    assert_eq!(ids, vec![UNK; 5]);
    assert_eq!(m.decode(&ids), "⁇⁇⁇⁇⁇");
}

#[test]
fn joint_total_matches_paper_setting() {
    assert_eq!(joint_total_size(5000, 7), 35000);
}

#[test]
fn joint_with_one_language_equals_single_training() {
    let corpus = vec!["low lower lowest", "newer wider low", "lower lowest"];
    let single = train_segmenter(&corpus, 25).unwrap();
    let joint = build_joint(&[("en".to_string(), corpus.clone())], 25, 5.0).unwrap();
    assert_eq!(single.vocab, joint.vocab);
    assert_eq!(merges_of(&single), merges_of(&joint));
}

#[test]
fn joint_over_identical_corpora_equals_single_training() {
    let corpus = vec!["low lower lowest", "newer wider low", "lower lowest"];
    let single = train_segmenter(&corpus, 25).unwrap();
    let langs: Vec<(String, Vec<&str>)> = ["a", "b", "c"]
        .iter()
        .map(|l| (l.to_string(), corpus.clone()))
        .collect();
    let joint = build_joint(&langs, 25, 5.0).unwrap();
    let set = |m: &SubwordModel| {
        m.vocab
            .pieces()
            .iter()
            .cloned()
            .collect::<std::collections::BTreeSet<_>>()
    };
    assert_eq!(set(&single), set(&joint));
    assert!(build_joint(&langs, 0, 5.0).is_err());
}

fn tiny(tokens: &[&str]) -> SubwordModel {
    let mut vocab = Vocabulary::new();
    for t in tokens {
        vocab.insert(t);
    }
    let alphabet = tokens.iter().flat_map(|t| t.chars()).filter(|&c| c != MARKER).collect();
    SubwordModel {
        vocab,
        segmenters: vec![(ANY_LANG.to_string(), Segmenter::new(alphabet, vec![]).unwrap())],
    }
}

#[test]
fn union_deduplicates_shared_tokens() {
    let a = tiny(&["▁a", "▁b"]);
    let b = tiny(&["▁b", "▁c"]);
    let u = build_union(&[("x".into(), a.clone()), ("y".into(), b)]).unwrap();
    assert_eq!(u.size(), 4 + 3);
    // ids follow language order
    assert_eq!(u.vocab.id("▁a"), Some(4));
    assert_eq!(u.vocab.id("▁b"), Some(5));
    assert_eq!(u.vocab.id("▁c"), Some(6));

    let d1 = tiny(&["p", "q", "r", "s", "t"]);
    let d2 = tiny(&["u", "v", "w", "x", "y"]);
    let u = build_union(&[("x".into(), d1), ("y".into(), d2)]).unwrap();
    assert_eq!(u.size(), 4 + 10);
    assert!(build_union(&[]).is_err());
}

#[test]
fn union_keeps_per_language_segmenters() {
    let en = train_segmenter(&["low lower lowest low"], 20).unwrap();
    let el = train_segmenter(&["λοω λοωερ λοω"], 20).unwrap();
    let u = build_union(&[("en".into(), en.clone()), ("el".into(), el.clone())]).unwrap();
    let pieces = |m: &SubwordModel, ids: &[u32]| -> Vec<String> {
        ids.iter().map(|&i| m.vocab.token(i).unwrap().to_string()).collect()
    };
    assert_eq!(
        pieces(&u, &u.encode_lang("lower", Some("en"))),
        pieces(&en, &en.encode("lower"))
    );
    assert_eq!(
        pieces(&u, &u.encode_lang("λοωερ", Some("el"))),
        pieces(&el, &el.encode("λοωερ"))
    );
}

#[test]
fn expansion_appends_only_missing_tokens() {
    let base = tiny(&["▁a", "▁b"]);
    let add = tiny(&["▁b", "▁c"]);
    let (grown, plan) = expand_vocabulary(&base, &add, "new");
    assert_eq!(plan.old_size, 6);
    assert_eq!(plan.new_ids, vec![6]);
    assert_eq!(grown.vocab.id("▁c"), Some(6));
    for t in base.vocab.pieces() {
        assert_eq!(grown.vocab.id(t), base.vocab.id(t));
    }
    let (_, none) = expand_vocabulary(&base, &tiny(&["▁a"]), "new");
    assert!(none.new_ids.is_empty());
}

#[test]
fn grown_rows_keep_base_rows_bitwise() {
    let base = tiny(&["▁a", "▁b"]);
    let (_, plan) = expand_vocabulary(&base, &tiny(&["▁c", "▁d"]), "new");
    let d = 3;
    let table: Vec<f32> = (0..6 * d).map(|i| i as f32 * 0.37 - 1.0).collect();
    let rows = grow_rows(&table, d, &plan, 0.0, 7);
    assert_eq!(rows.len(), 8 * d);
    assert_eq!(&rows[..6 * d], &table[..]);
    // zero noise leaves the plain mean
    for j in 0..d {
        let mean: f32 = (0..6).map(|r| table[r * d + j]).sum::<f32>() / 6.0;
        assert!((rows[6 * d + j] - mean).abs() < 1e-5);
    }
    let a = grow_rows(&table, d, &plan, 0.1, 7);
    let b = grow_rows(&table, d, &plan, 0.1, 7);
    assert_eq!(a, b);
}

#[test]
fn model_file_roundtrip() {
    let en = train_segmenter(&["low lower lowest tab\\x"], 25).unwrap();
    let el = train_segmenter(&["λοω λοωερ λοω"], 15).unwrap();
    let u = build_union(&[("en".into(), en), ("el".into(), el)]).unwrap();
    let text = u.to_text();
    assert!(text.starts_with("#pixelrep-bpe v1"));
    let back = SubwordModel::from_text(&text).unwrap();
    assert_eq!(back, u);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.bpe");
    u.save(&p).unwrap();
    assert_eq!(SubwordModel::load(&p).unwrap(), u);
    assert!(SubwordModel::from_text("garbage").is_err());
}

fn corpus_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[abcd]{1,6}( [abcd]{1,6}){0,3}", 1..8)
}

proptest! {
    #[test]
    fn training_matches_reference(corpus in corpus_strategy(), extra in 1usize..15) {
        let refs: Vec<&str> = corpus.iter().map(String::as_str).collect();
        let alpha: std::collections::BTreeSet<char> = refs.iter().flat_map(|l| l.chars()).filter(|c| *c != ' ').collect();
        let target = 5 + alpha.len() + extra;
        let m = train_segmenter(&refs, target).unwrap();
        prop_assert_eq!(merges_of(&m), naive_bpe(&refs, target));
    }

    #[test]
    fn encode_is_deterministic_and_invertible(corpus in corpus_strategy(), extra in 1usize..15) {
        let refs: Vec<&str> = corpus.iter().map(String::as_str).collect();
        let alpha: std::collections::BTreeSet<char> = refs.iter().flat_map(|l| l.chars()).filter(|c| *c != ' ').collect();
        let m = train_segmenter(&refs, 5 + alpha.len() + extra).unwrap();
        for line in &refs {
            let ids = m.encode(line);
            prop_assert_eq!(&ids, &m.encode(line));
            prop_assert!(!ids.contains(&UNK));
            let norm: Vec<&str> = line.split_whitespace().collect();
            prop_assert_eq!(m.decode(&ids), norm.join(" "));
        }
    }

    #[test]
    fn union_is_no_larger_than_parts(a in corpus_strategy(), b in corpus_strategy()) {
        let ra: Vec<&str> = a.iter().map(String::as_str).collect();
        let rb: Vec<&str> = b.iter().map(String::as_str).collect();
        let ma = train_segmenter(&ra, 30).unwrap();
        let mb = train_segmenter(&rb, 30).unwrap();
        let u = build_union(&[("a".into(), ma.clone()), ("b".into(), mb.clone())]).unwrap();
        prop_assert!(u.size() <= ma.size() + mb.size() - 5);
        prop_assert!(u.size() >= ma.size().max(mb.size()));
    }
}

#[test]
fn word_counts_split_on_whitespace() {
    let c = word_counts(&["a b  a", "b\tc"]);
    let expect: HashMap<String, u64> = [("a", 2), ("b", 2), ("c", 1)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    assert_eq!(c, expect);
}
