//! `key = value` run configuration.
//!
//! One file drives everything: architecture, adapter, layer selection and
//! optimization. Unknown or repeated keys are rejected. [`RunConfig::to_text`]
//! writes the canonical form used for run snapshots and checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dls::DlsConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::roae::{RoaeConfig, RoaeStage, SignalSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Corpus,
    Copy,
    Modsum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterChoice {
    None,
    Roae,
    Lora,
}

/// Which target positions enter the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPositions {
    All,
    Answer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub task: TaskKind,
    pub corpus: Option<PathBuf>,
    /// Copy task: number of distinct symbols and prefix length.
    pub copy_alphabet: usize,
    pub copy_len: usize,
    pub modsum_modulus: usize,
    pub grad_clip: Option<f64>,
    /// Linear learning-rate ramp length; 0 keeps the rate constant.
    pub lr_warmup: u64,
    pub loss_positions: LossPositions,
    pub pretrain_steps: u64,
    pub pretrain_lr: f64,
    pub pretrain_copy_len: usize,
    /// Shortest pretraining copy prefix; 0 keeps it fixed at `pretrain_copy_len`.
    pub pretrain_copy_min_len: usize,
    pub base_ckpt: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Save a checkpoint every this many fine-tuning steps; 0 saves only the final one.
    pub checkpoint_every: u64,
    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            steps: 2000,
            batch: 16,
            seq_len: 64,
            seed: 0,
            task: TaskKind::Copy,
            corpus: None,
            copy_alphabet: 16,
            copy_len: 32,
            modsum_modulus: 97,
            grad_clip: None,
            lr_warmup: 0,
            loss_positions: LossPositions::All,
            pretrain_steps: 0,
            pretrain_lr: 1e-3,
            pretrain_copy_len: 32,
            pretrain_copy_min_len: 0,
            base_ckpt: None,
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            eval_batches: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub adapter: AdapterChoice,
    pub roae: RoaeConfig,
    pub lora_rank: usize,
    pub dls: DlsConfig,
    pub dls_enabled: bool,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            adapter: AdapterChoice::Roae,
            roae: RoaeConfig::default(),
            lora_rank: 128,
            dls: DlsConfig::default(),
            dls_enabled: true,
            train: TrainConfig::default(),
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value {raw:?} for key {key}")))
}

fn boolean(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {raw:?} for key {key}; expected true or false"))),
    }
}

fn choice<T: Copy>(key: &str, raw: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(name, _)| *name == raw).map(|(_, v)| *v).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        Error::Config(format!("invalid value {raw:?} for key {key}; expected one of {}", names.join(", ")))
    })
}

fn optional_path(raw: &str) -> Option<PathBuf> {
    (!raw.is_empty() && raw != "none").then(|| PathBuf::from(raw))
}

const TASKS: [(&str, TaskKind); 3] = [("corpus", TaskKind::Corpus), ("copy", TaskKind::Copy), ("modsum", TaskKind::Modsum)];
const ADAPTERS: [(&str, AdapterChoice); 3] =
    [("none", AdapterChoice::None), ("roae", AdapterChoice::Roae), ("lora", AdapterChoice::Lora)];
const STAGES: [(&str, RoaeStage); 2] = [("pre", RoaeStage::PreRope), ("post", RoaeStage::PostRope)];
const SOURCES: [(&str, SignalSource); 2] =
    [("normalized", SignalSource::Normalized), ("residual", SignalSource::Residual)];
const POSITIONS: [(&str, LossPositions); 2] = [("all", LossPositions::All), ("answer", LossPositions::Answer)];

fn name_of<T: PartialEq>(options: &[(&'static str, T)], v: &T) -> &'static str {
    options.iter().find(|(_, o)| o == v).map(|(n, _)| *n).expect("every variant is named")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", no + 1)))?;
            let (key, raw) = (key.trim(), raw.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: key {key} given twice", no + 1)));
            }
            cfg.set(key, raw)
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "d" => m.d = value(key, raw)?,
            "n_layers" => m.n_layers = value(key, raw)?,
            "h_q" => m.h_q = value(key, raw)?,
            "h_k" => m.h_k = value(key, raw)?,
            "d_h" => m.d_h = value(key, raw)?,
            "vocab" => m.vocab = value(key, raw)?,
            "max_seq" => m.max_seq = value(key, raw)?,
            "rope_base" => m.rope_base = value(key, raw)?,
            "ffn_mult" => m.ffn_mult = value(key, raw)?,
            "adapter" => self.adapter = choice(key, raw, &ADAPTERS)?,
            "rank" => self.roae.rank = value(key, raw)?,
            "r_low" => self.roae.r_low = value(key, raw)?,
            "alpha" => self.roae.alpha = value(key, raw)?,
            "share_qk" => self.roae.share_qk = boolean(key, raw)?,
            "roae_stage" => self.roae.stage = choice(key, raw, &STAGES)?,
            "signal_source" => self.roae.source = choice(key, raw, &SOURCES)?,
            "lora_rank" => self.lora_rank = value(key, raw)?,
            "dls" => self.dls_enabled = boolean(key, raw)?,
            "k_ratio" => self.dls.k_ratio = value(key, raw)?,
            "p_exploit" => self.dls.p_exploit = value(key, raw)?,
            "interval_u" => self.dls.interval_u = value(key, raw)?,
            "warmup_steps" => self.dls.warmup_steps = value(key, raw)?,
            "lr" => t.lr = value(key, raw)?,
            "beta1" => t.beta1 = value(key, raw)?,
            "beta2" => t.beta2 = value(key, raw)?,
            "eps" => t.eps = value(key, raw)?,
            "weight_decay" => t.weight_decay = value(key, raw)?,
            "steps" => t.steps = value(key, raw)?,
            "batch" => t.batch = value(key, raw)?,
            "seq_len" => t.seq_len = value(key, raw)?,
            "seed" => t.seed = value(key, raw)?,
            "task" => t.task = choice(key, raw, &TASKS)?,
            "corpus" => t.corpus = optional_path(raw),
            "copy_alphabet" => t.copy_alphabet = value(key, raw)?,
            "copy_len" => t.copy_len = value(key, raw)?,
            "modsum_modulus" => t.modsum_modulus = value(key, raw)?,
            "grad_clip" => t.grad_clip = if raw == "none" { None } else { Some(value(key, raw)?) },
            "lr_warmup" => t.lr_warmup = value(key, raw)?,
            "loss_positions" => t.loss_positions = choice(key, raw, &POSITIONS)?,
            "pretrain_steps" => t.pretrain_steps = value(key, raw)?,
            "pretrain_lr" => t.pretrain_lr = value(key, raw)?,
            "pretrain_copy_len" => t.pretrain_copy_len = value(key, raw)?,
            "pretrain_copy_min_len" => t.pretrain_copy_min_len = value(key, raw)?,
            "base_ckpt" => t.base_ckpt = optional_path(raw),
            "out_dir" => t.out_dir = PathBuf::from(raw),
            "checkpoint_every" => t.checkpoint_every = value(key, raw)?,
            "eval_batches" => t.eval_batches = value(key, raw)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dls.validate()?;
        let t = &self.train;
        match self.adapter {
            AdapterChoice::Roae => self.roae.validate(&self.model)?,
            AdapterChoice::Lora if self.lora_rank == 0 => {
                return Err(Error::Config("lora_rank must be at least 1".into()))
            }
            _ => {}
        }
        for (name, v) in [("lr", t.lr), ("pretrain_lr", t.pretrain_lr), ("eps", t.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", t.weight_decay)));
        }
        if let Some(c) = t.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if t.steps == 0 || t.batch == 0 || t.seq_len == 0 || t.eval_batches == 0 {
            return Err(Error::Config("steps, batch, seq_len and eval_batches must be at least 1".into()));
        }
        if t.seq_len > self.model.max_seq {
            return Err(Error::Config(format!(
                "seq_len {} exceeds the model's max_seq {}",
                t.seq_len, self.model.max_seq
            )));
        }
        match t.task {
            TaskKind::Corpus => {
                if t.corpus.is_none() {
                    return Err(Error::Config("task = corpus needs a corpus path".into()));
                }
                if self.model.vocab < super::data::BYTE_VOCAB {
                    return Err(Error::Config(format!(
                        "task = corpus needs vocab >= {}, got {}",
                        super::data::BYTE_VOCAB,
                        self.model.vocab
                    )));
                }
            }
            TaskKind::Copy => {
                if t.copy_alphabet < 2 || t.copy_alphabet + 2 > self.model.vocab {
                    return Err(Error::Config(format!(
                        "copy_alphabet must lie in [2, vocab - 2], got {}",
                        t.copy_alphabet
                    )));
                }
                for (name, len) in [("copy_len", t.copy_len), ("pretrain_copy_len", t.pretrain_copy_len)] {
                    if len == 0 || 2 * len > t.seq_len {
                        return Err(Error::Config(format!(
                            "{name} must lie in [1, seq_len / 2], got {len}"
                        )));
                    }
                }
                if t.pretrain_copy_min_len > t.pretrain_copy_len {
                    return Err(Error::Config(format!(
                        "pretrain_copy_min_len {} exceeds pretrain_copy_len {}",
                        t.pretrain_copy_min_len, t.pretrain_copy_len
                    )));
                }
            }
            TaskKind::Modsum => {
                if t.modsum_modulus < 2 || self.model.vocab < super::data::MODSUM_VOCAB {
                    return Err(Error::Config(format!(
                        "modsum needs modulus >= 2 and vocab >= {}",
                        super::data::MODSUM_VOCAB
                    )));
                }
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("d", m.d.to_string());
        kv("n_layers", m.n_layers.to_string());
        kv("h_q", m.h_q.to_string());
        kv("h_k", m.h_k.to_string());
        kv("d_h", m.d_h.to_string());
        kv("vocab", m.vocab.to_string());
        kv("max_seq", m.max_seq.to_string());
        kv("rope_base", m.rope_base.to_string());
        kv("ffn_mult", m.ffn_mult.to_string());
        kv("adapter", name_of(&ADAPTERS, &self.adapter).into());
        kv("rank", self.roae.rank.to_string());
        kv("r_low", self.roae.r_low.to_string());
        kv("alpha", self.roae.alpha.to_string());
        kv("share_qk", self.roae.share_qk.to_string());
        kv("roae_stage", name_of(&STAGES, &self.roae.stage).into());
        kv("signal_source", name_of(&SOURCES, &self.roae.source).into());
        kv("lora_rank", self.lora_rank.to_string());
        kv("dls", self.dls_enabled.to_string());
        kv("k_ratio", self.dls.k_ratio.to_string());
        kv("p_exploit", self.dls.p_exploit.to_string());
        kv("interval_u", self.dls.interval_u.to_string());
        kv("warmup_steps", self.dls.warmup_steps.to_string());
        kv("lr", t.lr.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("eps", t.eps.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("steps", t.steps.to_string());
        kv("batch", t.batch.to_string());
        kv("seq_len", t.seq_len.to_string());
        kv("seed", t.seed.to_string());
        kv("task", name_of(&TASKS, &t.task).into());
        kv("corpus", path(&t.corpus));
        kv("copy_alphabet", t.copy_alphabet.to_string());
        kv("copy_len", t.copy_len.to_string());
        kv("modsum_modulus", t.modsum_modulus.to_string());
        kv("grad_clip", t.grad_clip.map_or("none".into(), |c| c.to_string()));
        kv("lr_warmup", t.lr_warmup.to_string());
        kv("loss_positions", name_of(&POSITIONS, &t.loss_positions).into());
        kv("pretrain_steps", t.pretrain_steps.to_string());
        kv("pretrain_lr", t.pretrain_lr.to_string());
        kv("pretrain_copy_len", t.pretrain_copy_len.to_string());
        kv("pretrain_copy_min_len", t.pretrain_copy_min_len.to_string());
        kv("base_ckpt", path(&t.base_ckpt));
        kv("out_dir", t.out_dir.display().to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("eval_batches", t.eval_batches.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.roae.r_low, 0.25);
        assert_eq!(c.roae.alpha, 0.1);
        assert_eq!(c.roae.rank, 128);
        assert_eq!(c.dls.k_ratio, 0.5);
        assert_eq!(c.dls.interval_u, 40);
        assert_eq!(c.dls.p_exploit, 0.8);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!((c.train.beta1, c.train.beta2, c.train.eps, c.train.weight_decay), (0.9, 0.999, 1e-8, 0.01));
        c.validate().unwrap();
    }

    #[test]
    fn parse_reads_keys_and_comments() {
        let c = RunConfig::parse("# header\nrank = 4   # trailing\n\nlr=0.01\nroae_stage = post\ngrad_clip = 1.5\n").unwrap();
        assert_eq!(c.roae.rank, 4);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.roae.stage, RoaeStage::PostRope);
        assert_eq!(c.train.grad_clip, Some(1.5));
    }

    #[test]
    fn unknown_and_repeated_keys_are_errors() {
        let e = RunConfig::parse("rnak = 4\n").unwrap_err().to_string();
        assert!(e.contains("unknown key rnak") && e.contains("line 1"), "{e}");
        assert!(RunConfig::parse("rank = 4\nrank = 8\n").is_err());
        assert!(RunConfig::parse("rank 4\n").is_err());
        assert!(RunConfig::parse("rank = four\n").is_err());
        assert!(RunConfig::parse("task = poetry\n").is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        for text in [
            "lr = 0",
            "beta1 = 1.0",
            "seq_len = 128",
            "task = corpus",
            "copy_len = 40",
            "r_low = 0.3",
            "k_ratio = 0",
            "h_k = 3",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.train.corpus = Some(PathBuf::from("data/x.txt"));
        c.train.grad_clip = Some(0.5);
        c.roae.source = SignalSource::Residual;
        c.adapter = AdapterChoice::Lora;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
