//! Deterministic pseudo-languages over English-like targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, ParallelCorpus};
use crate::error::{config, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Script {
    Latin,
    Cyrillic,
    Greek,
    Hebrew,
    Cjk,
}

impl Script {
    pub const ALL: [Script; 5] = [
        Script::Latin,
        Script::Cyrillic,
        Script::Greek,
        Script::Hebrew,
        Script::Cjk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Script::Latin => "latin",
            Script::Cyrillic => "cyrillic",
            Script::Greek => "greek",
            Script::Hebrew => "hebrew",
            Script::Cjk => "cjk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s.trim())
            .map_or_else(|| config(format!("unknown script {s:?}")), Ok)
    }

    /// Per-language seed offset so scripts draw different sentences.
    fn salt(self) -> u64 {
        match self {
            Script::Latin => 0x11,
            Script::Cyrillic => 0x23,
            Script::Greek => 0x37,
            Script::Hebrew => 0x41,
            Script::Cjk => 0x59,
        }
    }
}

/// Letters substituted for `a..=z`.
pub fn script_map(script: Script) -> [char; 26] {
    let s = match script {
        Script::Latin => "abçdéfghijklmñöpqrstüvwxyz",
        Script::Cyrillic => "абсдефгхийклмнопщрштувжчыз",
        Script::Greek => "αβψδεφγηιξκλμνοπθρστυωϖχϒζ",
        Script::Hebrew => "אבגדהוזחטיכלמנסעפצקרשתךםןף",
        Script::Cjk => "アイウエオカキクケコサシスセソタチツテトナニヌネノハ",
    };
    let v: Vec<char> = s.chars().collect();
    v.try_into().expect("26 letters")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Source equals target; the script only tags the language.
    Copy,
    /// Target letters replaced through the script's map.
    Transliterate,
    /// Digits on the source side, English number words on the target side.
    NumberWords,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "copy" => Ok(Task::Copy),
            "transliterate" => Ok(Task::Transliterate),
            "number-words" => Ok(Task::NumberWords),
            _ => config(format!("unknown task {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub scripts: Vec<Script>,
    /// Examples per language.
    pub size: usize,
    pub task: Task,
    pub seed: u64,
    pub min_words: usize,
    pub max_words: usize,
}

impl SynthSpec {
    pub fn new(scripts: Vec<Script>, size: usize, task: Task, seed: u64) -> Self {
        Self {
            scripts,
            size,
            task,
            seed,
            min_words: 3,
            max_words: 6,
        }
    }
}

/// Target-side word list, most frequent first.
pub const LEXICON: &[&str] = &[
    "the", "of", "and", "to", "in", "is", "you", "that", "it", "he", "was", "for", "on", "are", "as", "with", "his",
    "they", "at", "be", "this", "have", "from", "or", "one", "had", "by", "word", "but", "not", "what", "all", "were",
    "we", "when", "your", "can", "said", "there", "use", "an", "each", "which", "she", "do", "how", "their", "if",
    "will", "up", "other", "about", "out", "many", "then", "them", "these", "so", "some", "her", "would", "make",
    "like", "him", "into", "time", "has", "look", "two", "more", "write", "go", "see", "number", "no", "way", "could",
    "people", "my", "than", "first", "water", "been", "call", "who", "oil", "now", "find", "long", "down", "day",
    "did", "get", "come", "made", "may", "part", "over", "new", "sound", "take", "only", "little", "work", "know",
    "place", "year", "live", "back", "give", "most", "very", "after", "thing", "our", "just", "name", "good",
    "sentence", "man", "think", "say", "great", "where", "help", "through", "much", "before", "line", "right", "too",
    "mean", "old", "any", "same", "tell", "boy", "follow", "came", "want", "show", "also", "around", "form", "three",
    "small", "set", "put", "end", "does", "another", "well", "large", "must", "big", "even", "such", "because", "quiz",
    "zebra", "jazz", "fox", "exact", "query",
];

const ONES: [&str; 20] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
];
const TENS: [&str; 10] = [
    "", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
];

fn number_words(n: usize) -> String {
    if n < 20 {
        ONES[n].to_string()
    } else if n.is_multiple_of(10) {
        TENS[n / 10].to_string()
    } else {
        format!("{} {}", TENS[n / 10], ONES[n % 10])
    }
}

fn transliterate(text: &str, map: &[char; 26]) -> String {
    text.chars()
        .map(|c| {
            if c.is_ascii_lowercase() {
                map[(c as u8 - b'a') as usize]
            } else {
                c
            }
        })
        .collect()
}

/// Zipf-weighted draw over the lexicon.
struct WordSampler {
    cumulative: Vec<f64>,
}

impl WordSampler {
    fn new() -> Self {
        let mut acc = 0.0;
        let cumulative = (0..LEXICON.len())
            .map(|r| {
                acc += 1.0 / (r as f64 + 1.0);
                acc
            })
            .collect();
        Self { cumulative }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> &'static str {
        let u: f64 = rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        let i = self.cumulative.partition_point(|&c| c <= u);
        LEXICON[i.min(LEXICON.len() - 1)]
    }
}

pub fn make_synthetic_corpus(spec: &SynthSpec) -> Result<ParallelCorpus> {
    if spec.size == 0 {
        return config("synthetic corpus size must be positive");
    }
    if spec.scripts.is_empty() {
        return config("no scripts requested");
    }
    if spec.min_words == 0 || spec.min_words > spec.max_words {
        return config("need 0 < min_words <= max_words");
    }
    let words = WordSampler::new();
    let mut examples = Vec::with_capacity(spec.size * spec.scripts.len());
    for &script in &spec.scripts {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003) ^ script.salt());
        let map = script_map(script);
        for _ in 0..spec.size {
            let n = rng.random_range(spec.min_words..=spec.max_words);
            let (source, target) = match spec.task {
                Task::NumberWords => {
                    let nums: Vec<usize> = (0..n).map(|_| rng.random_range(0..100)).collect();
                    let src: Vec<String> = nums.iter().map(|x| x.to_string()).collect();
                    let tgt: Vec<String> = nums.iter().map(|&x| number_words(x)).collect();
                    (src.join(" "), tgt.join(" "))
                }
                task => {
                    let tgt: Vec<&str> = (0..n).map(|_| words.draw(&mut rng)).collect();
                    let tgt = tgt.join(" ");
                    let src = if task == Task::Copy {
                        tgt.clone()
                    } else {
                        transliterate(&tgt, &map)
                    };
                    (src, tgt)
                }
            };
            examples.push(Example {
                lang: script.name().to_string(),
                source,
                target,
            });
        }
    }
    Ok(ParallelCorpus::from_examples(examples))
}
