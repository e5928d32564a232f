//! Greedy BPE segmentation and multilingual vocabularies.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config, format_err, PathContext, Result};
use crate::trainkit::temperature_probs;

pub const MARKER: char = '\u{2581}';
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
/// Decoded form of an unknown piece.
pub const UNK_TEXT: &str = "\u{2047}";

/// Token inventory with fixed special ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Only the specials.
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            id_of: HashMap::new(),
        };
        for s in SPECIALS {
            v.insert(s);
        }
        v
    }

    /// Adds `token` if absent; returns its id.
    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.id_of.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.id_of.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id_of.contains_key(token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Non-special tokens in id order.
    pub fn pieces(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Tok(String),
    Unk,
}

/// Ordered merge rules over a character alphabet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmenter {
    pub merges: Vec<(String, String)>,
    pub alphabet: BTreeSet<char>,
    ranks: HashMap<(String, String), usize>,
}

impl Segmenter {
    pub fn new(alphabet: BTreeSet<char>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), i).is_some() {
                return config(format!("duplicate merge {} {}", m.0, m.1));
            }
        }
        Ok(Self {
            merges,
            alphabet,
            ranks,
        })
    }

    fn segment_word(&self, word: &str) -> Vec<Piece> {
        let mut syms: Vec<Piece> = std::iter::once(MARKER)
            .chain(word.chars())
            .map(|c| {
                if c == MARKER || self.alphabet.contains(&c) {
                    Piece::Tok(c.to_string())
                } else {
                    Piece::Unk
                }
            })
            .collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| match (&w[0], &w[1]) {
                    (Piece::Tok(a), Piece::Tok(b)) => self.ranks.get(&(a.clone(), b.clone())).map(|&r| (r, a, b)),
                    _ => None,
                })
                .min_by_key(|x| x.0)
                .map(|(_, a, b)| (a.clone(), b.clone()));
            let Some((a, b)) = best else { break };
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() {
                    if let (Piece::Tok(x), Piece::Tok(y)) = (&syms[i], &syms[i + 1]) {
                        if *x == a && *y == b {
                            out.push(Piece::Tok(format!("{a}{b}")));
                            i += 2;
                            continue;
                        }
                    }
                }
                out.push(syms[i].clone());
                i += 1;
            }
            syms = out;
        }
        // A bare marker in front of an unknown character carries no information.
        if syms.len() > 1 && syms[1] == Piece::Unk && syms[0] == Piece::Tok(MARKER.to_string()) {
            syms.remove(0);
        }
        syms
    }

    fn segment(&self, text: &str) -> Vec<Piece> {
        text.split_whitespace().flat_map(|w| self.segment_word(w)).collect()
    }

    /// Pieces as strings, unknown characters shown as `<unk>`.
    pub fn pieces(&self, text: &str) -> Vec<String> {
        self.segment(text)
            .into_iter()
            .map(|p| match p {
                Piece::Tok(s) => s,
                Piece::Unk => SPECIALS[UNK as usize].to_string(),
            })
            .collect()
    }
}

/// Vocabulary plus one segmenter per language. A model trained on a single
/// (or jointly sampled) corpus has one segmenter that serves every language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordModel {
    pub vocab: Vocabulary,
    pub segmenters: Vec<(String, Segmenter)>,
}

pub const ANY_LANG: &str = "*";

impl SubwordModel {
    fn segmenter(&self, lang: Option<&str>) -> &Segmenter {
        lang.and_then(|l| self.segmenters.iter().find(|(n, _)| n == l))
            .or_else(|| self.segmenters.first())
            .map(|(_, s)| s)
            .expect("model has a segmenter")
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_lang(text, None)
    }

    pub fn encode_lang(&self, text: &str, lang: Option<&str>) -> Vec<u32> {
        self.segmenter(lang)
            .segment(text)
            .into_iter()
            .map(|p| match p {
                Piece::Tok(s) => self.vocab.id(&s).unwrap_or(UNK),
                Piece::Unk => UNK,
            })
            .collect()
    }

    /// Inverse of `encode` up to unknown pieces. Specials other than UNK are skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                UNK => s.push_str(UNK_TEXT),
                _ => s.push_str(self.vocab.token(id).unwrap_or(UNK_TEXT)),
            }
        }
        let s = s.replace(MARKER, " ");
        s.trim_start_matches(' ').to_string()
    }

    pub fn size(&self) -> usize {
        self.vocab.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).at(path)?)
    }

    /// Plain-text model: header, per-language alphabet and merges, vocabulary.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "#pixelrep-bpe v1 marker={MARKER} langs={} vocab={}\n",
            self.segmenters.len(),
            self.vocab.len()
        );
        for (lang, seg) in &self.segmenters {
            let _ = writeln!(out, "@lang {lang} merges={}", seg.merges.len());
            let alpha: String = seg.alphabet.iter().collect();
            let _ = writeln!(out, "{}", escape(&alpha));
            for (a, b) in &seg.merges {
                let _ = writeln!(out, "{} {}", escape(a), escape(b));
            }
        }
        out.push_str("@vocab\n");
        for (i, t) in self.vocab.tokens.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{}", escape(t));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines.next().unwrap_or_default();
        if !head.starts_with("#pixelrep-bpe v1") {
            return format_err("subword model", "missing header");
        }
        let mut segmenters = Vec::new();
        let mut vocab_tokens = Vec::new();
        let mut in_vocab = false;
        while let Some(line) = lines.next() {
            if in_vocab {
                let (id, tok) = line.split_once('\t').ok_or_else(|| bad("vocab line without tab"))?;
                let id: usize = id.parse().map_err(|_| bad("bad vocab id"))?;
                if id != vocab_tokens.len() {
                    return format_err("subword model", "vocab ids out of order");
                }
                vocab_tokens.push(unescape(tok));
            } else if line == "@vocab" {
                in_vocab = true;
            } else if let Some(rest) = line.strip_prefix("@lang ") {
                let (lang, n) = rest.rsplit_once(" merges=").ok_or_else(|| bad("bad language header"))?;
                let n: usize = n.parse().map_err(|_| bad("bad merge count"))?;
                let alpha = lines.next().ok_or_else(|| bad("missing alphabet"))?;
                let alphabet: BTreeSet<char> = unescape(alpha).chars().collect();
                let mut merges = Vec::with_capacity(n);
                for _ in 0..n {
                    let m = lines.next().ok_or_else(|| bad("truncated merges"))?;
                    let (a, b) = m.split_once(' ').ok_or_else(|| bad("bad merge line"))?;
                    merges.push((unescape(a), unescape(b)));
                }
                segmenters.push((lang.to_string(), Segmenter::new(alphabet, merges)?));
            } else {
                return format_err("subword model", format!("unexpected line {line:?}"));
            }
        }
        if segmenters.is_empty() || vocab_tokens.len() < SPECIALS.len() {
            return format_err("subword model", "no segmenter or vocabulary");
        }
        if vocab_tokens[..4] != SPECIALS {
            return format_err("subword model", "special tokens must occupy ids 0-3");
        }
        let mut vocab = Vocabulary::new();
        for t in &vocab_tokens[4..] {
            let before = vocab.len();
            if vocab.insert(t) as usize != before {
                return format_err("subword model", format!("duplicate token {t}"));
            }
        }
        Ok(Self { vocab, segmenters })
    }
}

fn bad(msg: &str) -> crate::Error {
    crate::Error::Format {
        what: "subword model",
        msg: msg.into(),
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\")
        .replace(' ', "\\s")
        .replace('\t', "\\t")
        .replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('s') => out.push(' '),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some(o) => out.push(o),
            None => out.push('\\'),
        }
    }
    out
}

/// Whitespace word counts of a corpus.
pub fn word_counts<S: AsRef<str>>(corpus: &[S]) -> HashMap<String, u64> {
    let mut m = HashMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *m.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    m
}

pub fn train_segmenter<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<SubwordModel> {
    train_from_counts(&word_counts(corpus), target_size)
}

/// BPE on a word-frequency table: merge the most frequent adjacent pair
/// until the vocabulary reaches `target_size` or no pair occurs twice.
/// Ties go to the lexicographically smallest `(left, right)`.
pub fn train_from_counts(counts: &HashMap<String, u64>, target_size: usize) -> Result<SubwordModel> {
    if counts.is_empty() {
        return config("corpus is empty");
    }
    let alphabet: BTreeSet<char> = counts.keys().flat_map(|w| w.chars()).collect();
    let base = SPECIALS.len() + 1 + alphabet.iter().filter(|&&c| c != MARKER).count();
    if target_size <= base {
        return config(format!(
            "target size {target_size} must exceed alphabet plus specials ({base})"
        ));
    }
    let mut vocab = Vocabulary::new();
    let mut syms: Vec<String> = Vec::new();
    let mut sym_id: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: String, syms: &mut Vec<String>| -> u32 {
        *sym_id.entry(s.clone()).or_insert_with(|| {
            syms.push(s);
            syms.len() as u32 - 1
        })
    };
    vocab.insert(&MARKER.to_string());
    for c in &alphabet {
        vocab.insert(&c.to_string());
    }
    let mut words: Vec<(Vec<u32>, u64)> = {
        let mut ws: Vec<(&String, &u64)> = counts.iter().collect();
        ws.sort();
        ws.into_iter()
            .map(|(w, &n)| {
                let s = std::iter::once(MARKER)
                    .chain(w.chars())
                    .map(|c| intern(c.to_string(), &mut syms))
                    .collect();
                (s, n)
            })
            .collect()
    };
    let mut merges = Vec::new();
    let mut seen = std::collections::HashSet::new();
    while vocab.len() < target_size {
        let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
        for (w, n) in &words {
            for p in w.windows(2) {
                *pairs.entry((p[0], p[1])).or_insert(0) += n;
            }
        }
        let best = pairs
            .iter()
            .filter(|(p, _)| !seen.contains(*p))
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    (&syms[pb.0 as usize], &syms[pb.1 as usize]).cmp(&(&syms[pa.0 as usize], &syms[pa.1 as usize]))
                })
            })
            .map(|(p, c)| (*p, *c));
        let Some(((a, b), freq)) = best else { break };
        if freq < 2 {
            break;
        }
        seen.insert((a, b));
        let merged = format!("{}{}", syms[a as usize], syms[b as usize]);
        let m = intern(merged.clone(), &mut syms);
        merges.push((syms[a as usize].clone(), syms[b as usize].clone()));
        vocab.insert(&merged);
        for (w, _) in words.iter_mut() {
            if w.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
                    out.push(m);
                    i += 2;
                } else {
                    out.push(w[i]);
                    i += 1;
                }
            }
            *w = out;
        }
    }
    let mut alpha = alphabet;
    alpha.remove(&MARKER);
    Ok(SubwordModel {
        vocab,
        segmenters: vec![(ANY_LANG.to_string(), Segmenter::new(alpha, merges)?)],
    })
}

/// Paper-scale joint size: per-language size times language count.
pub fn joint_total_size(per_language: usize, languages: usize) -> usize {
    per_language * languages
}

/// One segmenter trained on all languages, with each language's word
/// frequencies reweighted by temperature sampling over line counts.
///
/// Word weights are `round(n_mean * sum_l p_l * c_l(w) / n_l)`, at least 1,
/// so identical per-language corpora reproduce single-corpus counts exactly.
pub fn build_joint<S: AsRef<str>>(
    corpora: &[(String, Vec<S>)],
    total_size: usize,
    temperature: f64,
) -> Result<SubwordModel> {
    if total_size == 0 {
        return config("joint vocabulary size must be positive");
    }
    if corpora.is_empty() {
        return config("no corpora");
    }
    let lines: Vec<f64> = corpora.iter().map(|(_, c)| c.len() as f64).collect();
    let probs = temperature_probs(&lines, temperature)?;
    let n_mean = lines.iter().sum::<f64>() / lines.len() as f64;
    let mut weights: HashMap<String, f64> = HashMap::new();
    for ((_, corpus), (&p, &n)) in corpora.iter().zip(probs.iter().zip(&lines)) {
        if n == 0.0 {
            continue;
        }
        for (w, c) in word_counts(corpus) {
            *weights.entry(w).or_insert(0.0) += p * c as f64 / n;
        }
    }
    let counts: HashMap<String, u64> = weights
        .into_iter()
        .map(|(w, x)| (w, ((n_mean * x).round() as u64).max(1)))
        .collect();
    train_from_counts(&counts, total_size)
}

/// Set union of per-language vocabularies. Ids follow language order, then
/// each language's own id order; each language keeps its own segmenter.
pub fn build_union(models: &[(String, SubwordModel)]) -> Result<SubwordModel> {
    if models.is_empty() {
        return config("no vocabularies to unite");
    }
    let mut vocab = Vocabulary::new();
    let mut segmenters = Vec::new();
    for (lang, m) in models {
        for t in m.vocab.pieces() {
            vocab.insert(t);
        }
        segmenters.push((lang.clone(), m.segmenter(None).clone()));
    }
    Ok(SubwordModel { vocab, segmenters })
}

/// New rows introduced by [`expand_vocabulary`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrowthPlan {
    pub old_size: usize,
    pub new_ids: Vec<u32>,
}

/// Appends the tokens of `addition` missing from `base`; base ids are kept.
/// The addition's segmenter is registered for `lang`.
pub fn expand_vocabulary(base: &SubwordModel, addition: &SubwordModel, lang: &str) -> (SubwordModel, GrowthPlan) {
    let mut vocab = base.vocab.clone();
    let old_size = vocab.len();
    let mut new_ids = Vec::new();
    for t in addition.vocab.pieces() {
        if !vocab.contains(t) {
            new_ids.push(vocab.insert(t));
        }
    }
    let mut segmenters = base.segmenters.clone();
    segmenters.retain(|(l, _)| l != lang);
    segmenters.push((lang.to_string(), addition.segmenter(None).clone()));
    (SubwordModel { vocab, segmenters }, GrowthPlan { old_size, new_ids })
}

/// Mean of the existing rows plus seeded uniform noise of amplitude `noise`
/// for every new row. `table` is row-major `[old_size, d]`.
pub fn grow_rows(table: &[f32], d: usize, plan: &GrowthPlan, noise: f32, seed: u64) -> Vec<f32> {
    let old = plan.old_size;
    let mut mean = vec![0.0f64; d];
    for r in 0..old {
        for j in 0..d {
            mean[j] += table[r * d + j] as f64;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = table[..old * d].to_vec();
    for _ in &plan.new_ids {
        for m in &mean {
            let u: f32 = rng.random_range(-1.0..1.0);
            out.push((m / old.max(1) as f64) as f32 + noise * u);
        }
    }
    out
}
