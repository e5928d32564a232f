use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pixelrep_tensor::io::{read_all_f32_le, write_f32_le};
use pixelrep_tensor::{AdamConfig, AdamState, Decay, Schedule, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, ParamStore};
use crate::error::{format_err, PathContext, Result};
use crate::subword::SubwordModel;
use crate::textimage::RenderConfig;

const BN_MEAN: &str = "bn.running_mean";
const BN_VAR: &str = "bn.running_var";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidRecord {
    pub step: u64,
    pub valid_ppl: f64,
    pub valid_acc: f64,
}

/// Training-loop bookkeeping saved with every checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub best_ppl: Option<f64>,
    pub bad_validations: usize,
    pub history: Vec<ValidRecord>,
    /// sha256 of each saved vocabulary file, keyed by file name.
    pub vocab_hashes: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    peak_lr: f64,
    warmup_steps: u64,
    inverse_sqrt: bool,
    clip_norm: Option<f64>,
}

impl OptimizerMeta {
    fn from_state(s: &AdamState<f32>) -> Self {
        let c = &s.config;
        Self {
            t: s.t,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            peak_lr: c.schedule.peak_lr,
            warmup_steps: c.schedule.warmup_steps,
            inverse_sqrt: c.schedule.decay == Decay::InverseSqrt,
            clip_norm: c.clip_norm,
        }
    }

    fn config(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            schedule: Schedule {
                peak_lr: self.peak_lr,
                warmup_steps: self.warmup_steps,
                decay: if self.inverse_sqrt {
                    Decay::InverseSqrt
                } else {
                    Decay::Constant
                },
            },
            clip_norm: self.clip_norm,
        }
    }
}

/// Everything needed to resume training or translate.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub state: TrainState,
    pub tgt_vocab: SubwordModel,
    /// Subword-mode source vocabulary.
    pub src_vocab: Option<SubwordModel>,
    /// Pixel-mode rendering settings.
    pub render: Option<RenderConfig>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).at(path)
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let s = fs::read_to_string(path).at(path)?;
    Ok(serde_json::from_str(&s)?)
}

fn write_blob(path: &Path, tensors: &[&Tensor<f32>]) -> Result<()> {
    let mut buf = Vec::new();
    for t in tensors {
        write_f32_le(&mut buf, t)?;
    }
    fs::write(path, buf).at(path)
}

fn read_blob(path: &Path, shapes: &[Vec<usize>]) -> Result<Vec<Tensor<f32>>> {
    let bytes = fs::read(path).at(path)?;
    Ok(read_all_f32_le(&bytes, shapes)?)
}

impl Checkpoint {
    pub fn new(model: Model<f32>, tgt_vocab: SubwordModel) -> Self {
        Self {
            model,
            optimizer: None,
            state: TrainState::default(),
            tgt_vocab,
            src_vocab: None,
            render: None,
        }
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("params")).at(dir)?;
        fs::create_dir_all(dir.join("vocab")).at(dir)?;
        write_json(&dir.join("config.json"), &self.model.cfg)?;

        let p = &self.model.params;
        let mut manifest: Vec<ManifestEntry> = p
            .iter()
            .map(|(n, t)| ManifestEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let mut tensors: Vec<&Tensor<f32>> = p.tensors().iter().collect();
        let c = self.model.bn_mean.len();
        let bn_mean = Tensor::new(&[c], self.model.bn_mean.clone())?;
        let bn_var = Tensor::new(&[c], self.model.bn_var.clone())?;
        if c > 0 {
            for (name, t) in [(BN_MEAN, &bn_mean), (BN_VAR, &bn_var)] {
                manifest.push(ManifestEntry {
                    name: name.into(),
                    shape: vec![c],
                });
                tensors.push(t);
            }
        }
        write_json(&dir.join("params/manifest.json"), &manifest)?;
        write_blob(&dir.join("params/params.bin"), &tensors)?;

        let opt_dir = dir.join("optimizer");
        if let Some(opt) = &self.optimizer {
            fs::create_dir_all(&opt_dir).at(&opt_dir)?;
            write_json(&opt_dir.join("state.json"), &OptimizerMeta::from_state(opt))?;
            write_blob(&opt_dir.join("m.bin"), &opt.m.iter().collect::<Vec<_>>())?;
            write_blob(&opt_dir.join("v.bin"), &opt.v.iter().collect::<Vec<_>>())?;
        } else if opt_dir.exists() {
            fs::remove_dir_all(&opt_dir).at(&opt_dir)?;
        }

        self.state.vocab_hashes.clear();
        let mut vocabs = vec![("tgt.bpe", &self.tgt_vocab)];
        if let Some(v) = &self.src_vocab {
            vocabs.push(("src.bpe", v));
        }
        for (name, v) in vocabs {
            let text = v.to_text();
            let path = dir.join("vocab").join(name);
            fs::write(&path, &text).at(&path)?;
            self.state
                .vocab_hashes
                .insert(name.to_string(), sha256_hex(text.as_bytes()));
        }
        match &self.render {
            Some(r) => write_json(&dir.join("render.json"), r)?,
            None => {
                let path = dir.join("render.json");
                if path.exists() {
                    fs::remove_file(&path).at(&path)?;
                }
            }
        }
        write_json(&dir.join("state.json"), &self.state)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: ModelConfig = read_json(&dir.join("config.json"))?;
        cfg.validate()?;
        let manifest: Vec<ManifestEntry> = read_json(&dir.join("params/manifest.json"))?;
        let shapes: Vec<Vec<usize>> = manifest.iter().map(|e| e.shape.clone()).collect();
        let tensors = read_blob(&dir.join("params/params.bin"), &shapes)?;

        let mut params = ParamStore::default();
        let (mut bn_mean, mut bn_var) = (Vec::new(), Vec::new());
        for (e, t) in manifest.iter().zip(tensors) {
            match e.name.as_str() {
                BN_MEAN => bn_mean = t.into_data(),
                BN_VAR => bn_var = t.into_data(),
                n => params.push(n, t),
            }
        }
        // The stored tensors must match what the config would build.
        let fresh = Model::<f32>::new(cfg.clone(), 0)?;
        if fresh.params.len() != params.len()
            || fresh
                .params
                .iter()
                .zip(params.iter())
                .any(|((a, ta), (b, tb))| a != b || ta.shape() != tb.shape())
        {
            return format_err("checkpoint", "parameters do not match config.json");
        }
        if bn_mean.len() != fresh.bn_mean.len() || bn_var.len() != fresh.bn_var.len() {
            return format_err("checkpoint", "batch-norm statistics do not match config.json");
        }
        let model = Model {
            cfg,
            params,
            bn_mean,
            bn_var,
        };

        let opt_dir = dir.join("optimizer");
        let optimizer = if opt_dir.join("state.json").exists() {
            let meta: OptimizerMeta = read_json(&opt_dir.join("state.json"))?;
            let pshapes: Vec<Vec<usize>> = model.params.tensors().iter().map(|t| t.shape().to_vec()).collect();
            Some(AdamState {
                config: meta.config(),
                m: read_blob(&opt_dir.join("m.bin"), &pshapes)?,
                v: read_blob(&opt_dir.join("v.bin"), &pshapes)?,
                t: meta.t,
            })
        } else {
            None
        };

        let state: TrainState = read_json(&dir.join("state.json"))?;
        let read_vocab = |name: &str| -> Result<Option<SubwordModel>> {
            let path = dir.join("vocab").join(name);
            if !path.exists() {
                return Ok(None);
            }
            let text = fs::read_to_string(&path).at(&path)?;
            if let Some(h) = state.vocab_hashes.get(name) {
                if *h != sha256_hex(text.as_bytes()) {
                    return format_err("checkpoint", format!("{name} does not match its recorded hash"));
                }
            }
            Ok(Some(SubwordModel::from_text(&text)?))
        };
        let tgt_vocab = match read_vocab("tgt.bpe")? {
            Some(v) => v,
            None => return format_err("checkpoint", "missing vocab/tgt.bpe"),
        };
        let src_vocab = read_vocab("src.bpe")?;
        let render_path = dir.join("render.json");
        let render = if render_path.exists() {
            Some(read_json(&render_path)?)
        } else {
            None
        };
        Ok(Self {
            model,
            optimizer,
            state,
            tgt_vocab,
            src_vocab,
            render,
        })
    }
}
