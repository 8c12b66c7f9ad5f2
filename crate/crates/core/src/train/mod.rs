//! Training loop: base pretraining, then adapter fine-tuning with layer
//! selection, plus checkpointing and run-directory reporting.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod optim;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{param_report, ParamReport};
use crate::dls::{dls_step, DlsState, SelectionEvent, SelectionMode};
use crate::error::{CheckpointError, Error, Result};
use crate::model::Model;
use crate::tensor::{Float, Tensor};
use checkpoint::{Checkpoint, Record};
use config::{AdapterChoice, LossPositions, RunConfig, TaskKind};
use data::{load_corpus, make_batch, DataSource};
use optim::{clip_grad_norm, AdamW, AdamWConfig, Moments};

/// Substreams of the master seed.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_DATA: u64 = 1;
pub const STREAM_DLS: u64 = 2;
pub const STREAM_PRETRAIN: u64 = 3;
pub const STREAM_ADAPTER: u64 = 4;
pub const STREAM_EVAL: u64 = 5;

pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn rng_record(name: &str, rng: &ChaCha8Rng) -> Record {
    let seed = rng.get_seed();
    let mut words: Vec<u64> = seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    let pos = rng.get_word_pos();
    words.extend([rng.get_stream(), pos as u64, (pos >> 64) as u64]);
    Record::u64s(name, words)
}

fn rng_from_record(r: &Record) -> Result<ChaCha8Rng> {
    let w = r.as_u64()?;
    if w.len() != 7 {
        return Err(CheckpointError::Malformed(format!("{} holds {} words, expected 7", r.name, w.len())).into());
    }
    let mut seed = [0u8; 32];
    for (chunk, word) in seed.chunks_exact_mut(8).zip(&w[..4]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[4]);
    rng.set_word_pos(u128::from(w[5]) | (u128::from(w[6]) << 64));
    Ok(rng)
}

/// Data source for fine-tuning, or for base pretraining when `pretrain` is set.
pub fn task_source(cfg: &RunConfig, pretrain: bool) -> Result<DataSource> {
    let t = &cfg.train;
    Ok(match t.task {
        TaskKind::Copy if pretrain => DataSource::Copy {
            alphabet: t.copy_alphabet,
            min_len: if t.pretrain_copy_min_len == 0 { t.pretrain_copy_len } else { t.pretrain_copy_min_len },
            len: t.pretrain_copy_len,
        },
        TaskKind::Copy => DataSource::Copy {
            alphabet: t.copy_alphabet,
            min_len: t.copy_len,
            len: t.copy_len,
        },
        TaskKind::Modsum => DataSource::Modsum { modulus: t.modsum_modulus },
        TaskKind::Corpus => {
            let path = t.corpus.as_ref().ok_or_else(|| Error::Config("task = corpus needs a corpus path".into()))?;
            DataSource::Corpus(load_corpus(path)?)
        }
    })
}

/// Loss and answer-span statistics over a fixed set of held-out batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eval {
    pub loss_all: f64,
    pub loss_answer: f64,
    pub answer_accuracy: f64,
}

/// Evaluates on `n_batches` batches from the evaluation substream, so every
/// call with the same config sees the same data.
pub fn evaluate<F: Float>(model: &Model<F>, cfg: &RunConfig, source: &DataSource) -> Result<Eval> {
    let (b, l, v) = (cfg.train.batch, cfg.train.seq_len, cfg.model.vocab);
    let mut rng = substream(cfg.train.seed, STREAM_EVAL);
    let (mut all, mut ans, mut n_all, mut n_ans, mut hits) = (0.0, 0.0, 0usize, 0usize, 0usize);
    for _ in 0..cfg.train.eval_batches {
        let batch = make_batch(source, b, l, &mut rng)?;
        let logits = model.logits(&batch.inputs, b, l)?;
        for (row, (&target, &is_answer)) in logits.data().chunks(v).zip(batch.targets.iter().zip(&batch.answer)) {
            let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
            let ce = lse - row[target].as_f64();
            all += ce;
            n_all += 1;
            if is_answer {
                ans += ce;
                n_ans += 1;
                let argmax = (0..v).fold(0, |best, j| if row[j] > row[best] { j } else { best });
                hits += usize::from(argmax == target);
            }
        }
    }
    let div = |a: f64, n: usize| if n == 0 { 0.0 } else { a / n as f64 };
    Ok(Eval {
        loss_all: div(all, n_all),
        loss_answer: div(ans, n_ans),
        answer_accuracy: div(hits as f64, n_ans),
    })
}

/// Result of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub step: u64,
    pub loss: f64,
    pub event: Option<SelectionEvent>,
}

/// Owns all mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer<F> {
    pub cfg: RunConfig,
    pub model: Model<F>,
    pub opt: AdamW<F>,
    pub dls: Option<DlsState>,
    pub data_rng: ChaCha8Rng,
    pub source: DataSource,
    pub lr: f64,
    pub step: u64,
    /// Path of the newest checkpoint, reported when training diverges.
    pub last_good: Option<PathBuf>,
}

fn adamw_config(cfg: &RunConfig, lr: f64) -> AdamWConfig {
    AdamWConfig {
        lr,
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: cfg.train.eps,
        weight_decay: cfg.train.weight_decay,
    }
}

/// Attaches the configured adapter and sets the fine-tuning trainable set.
pub fn prepare_fine_tune<F: Float>(model: &mut Model<F>, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    match cfg.adapter {
        AdapterChoice::Roae => model.attach_roae(cfg.roae.clone(), rng)?,
        AdapterChoice::Lora => model.attach_lora(cfg.lora_rank, rng)?,
        AdapterChoice::None => {}
    }
    if cfg.adapter == AdapterChoice::None {
        model.unfreeze_all();
    } else {
        model.freeze_base();
    }
    Ok(())
}

impl<F: Float> Trainer<F> {
    /// Full-parameter training of a fresh base model on the pretraining task.
    pub fn pretrain(cfg: &RunConfig) -> Result<Self> {
        let mut model = Model::new(cfg.model.clone(), &mut substream(cfg.train.seed, STREAM_INIT))?;
        model.unfreeze_all();
        let n = model.store.len();
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            opt: AdamW::new(adamw_config(cfg, cfg.train.pretrain_lr), n),
            dls: None,
            data_rng: substream(cfg.train.seed, STREAM_PRETRAIN),
            source: task_source(cfg, true)?,
            lr: cfg.train.pretrain_lr,
            step: 0,
            last_good: None,
        })
    }

    /// Base model for fine-tuning: loaded from `base_ckpt` when given,
    /// otherwise freshly initialized and pretrained for `pretrain_steps`.
    /// `on_step` sees every pretraining step.
    pub fn base_model(cfg: &RunConfig, mut on_step: impl FnMut(&StepOutcome)) -> Result<Model<F>> {
        if let Some(path) = &cfg.train.base_ckpt {
            let ckpt = Checkpoint::load(path)?;
            let mut model = Model::new(cfg.model.clone(), &mut substream(cfg.train.seed, STREAM_INIT))?;
            load_params(&mut model, &ckpt)?;
            return Ok(model);
        }
        let mut t = Self::pretrain(cfg)?;
        for _ in 0..cfg.train.pretrain_steps {
            let out = t.train_step()?;
            on_step(&out);
        }
        Ok(t.model)
    }

    /// Freezes `base`, attaches the adapter and sets up layer selection.
    pub fn fine_tune(cfg: &RunConfig, mut base: Model<F>) -> Result<Self> {
        prepare_fine_tune(&mut base, cfg, &mut substream(cfg.train.seed, STREAM_ADAPTER))?;
        let dls = if cfg.dls_enabled {
            Some(DlsState::new(cfg.dls.clone(), cfg.model.n_layers, substream(cfg.train.seed, STREAM_DLS))?)
        } else {
            None
        };
        let n = base.store.len();
        Ok(Trainer {
            cfg: cfg.clone(),
            model: base,
            opt: AdamW::new(adamw_config(cfg, cfg.train.lr), n),
            dls,
            data_rng: substream(cfg.train.seed, STREAM_DATA),
            source: task_source(cfg, false)?,
            lr: cfg.train.lr,
            step: 0,
            last_good: None,
        })
    }

    fn diverged(&self, step: u64) -> Error {
        Error::Diverged {
            step,
            last_good: self.last_good.as_ref().map_or("none".into(), |p| p.display().to_string()),
        }
    }

    fn current_lr(&self, step: u64) -> f64 {
        let w = self.cfg.train.lr_warmup;
        if w > 0 && step <= w {
            self.lr * step as f64 / w as f64
        } else {
            self.lr
        }
    }

    /// Sample, forward, backward, select and mask, update.
    pub fn train_step(&mut self) -> Result<StepOutcome> {
        let step = self.step + 1;
        let (b, l) = (self.cfg.train.batch, self.cfg.train.seq_len);
        let batch = make_batch(&self.source, b, l, &mut self.data_rng)?;
        let weights: Option<Vec<F>> = match self.cfg.train.loss_positions {
            LossPositions::All => None,
            LossPositions::Answer => Some(batch.answer_weights()),
        };
        self.model.store.zero_grad();
        let loss = match self
            .model
            .loss_and_backward(&batch.inputs, &batch.targets, weights.as_deref(), b, l)
        {
            Ok(v) if v.is_finite() => v.as_f64(),
            Ok(_) | Err(Error::NonFinite { .. }) => return Err(self.diverged(step)),
            Err(e) => return Err(e),
        };
        let event = match self.dls.as_mut() {
            Some(state) => dls_step(state, step, &mut self.model)?,
            None => None,
        };
        let dls = self.dls.as_ref();
        let skip = |p: &crate::tensor::Param<F>| dls.is_some_and(|s| s.is_masked(p));
        if let Some(max) = self.cfg.train.grad_clip {
            clip_grad_norm(&mut self.model.store, max, skip);
        }
        let lr = self.current_lr(step);
        self.opt.step(&mut self.model.store, lr, skip);
        if self.model.store.iter().any(|(_, p)| p.trainable && !p.value.is_finite()) {
            return Err(self.diverged(step));
        }
        self.step = step;
        Ok(StepOutcome { step, loss, event })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut records = vec![Record::u64s("run/step", vec![self.step])];
        for (_, p) in self.model.store.iter() {
            records.push(Record::tensor(format!("param/{}", p.name), &p.value));
        }
        for (id, p) in self.model.store.iter() {
            if let Some(Some(m)) = self.opt.state.get(id.0) {
                records.push(Record::tensor(format!("adam/{}/m", p.name), &m.m));
                records.push(Record::tensor(format!("adam/{}/v", p.name), &m.v));
                records.push(Record::u64s(format!("adam/{}/t", p.name), vec![m.t]));
            }
        }
        records.push(rng_record("rng/data", &self.data_rng));
        if let Some(s) = &self.dls {
            records.push(rng_record("dls/rng", &s.rng));
            records.push(Record::u64s("dls/selected", s.selected.iter().map(|&i| i as u64).collect()));
            records.push(Record::f64s("dls/scores", s.last_scores.clone()));
            records.push(Record::u64s("dls/state", vec![s.step, s.last_mode.code()]));
        }
        Checkpoint {
            config: self.cfg.to_text(),
            records,
        }
    }

    /// Rebuilds a fine-tuning trainer from a checkpoint written by
    /// [`Trainer::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = RunConfig::parse(&ckpt.config)?;
        let base = Model::new(cfg.model.clone(), &mut substream(cfg.train.seed, STREAM_INIT))?;
        let mut t = Self::fine_tune(&cfg, base)?;
        load_params(&mut t.model, ckpt)?;
        t.step = ckpt.get("run/step")?.as_u64()?.first().copied().unwrap_or(0);
        for (id, p) in t.model.store.iter() {
            let Ok(m) = ckpt.get(&format!("adam/{}/m", p.name)) else { continue };
            let moments = Moments {
                m: m.to_tensor()?,
                v: ckpt.get(&format!("adam/{}/v", p.name))?.to_tensor()?,
                t: ckpt.get(&format!("adam/{}/t", p.name))?.as_u64()?.first().copied().unwrap_or(0),
            };
            t.opt.state[id.0] = Some(moments);
        }
        t.data_rng = rng_from_record(ckpt.get("rng/data")?)?;
        if let Some(s) = t.dls.as_mut() {
            s.rng = rng_from_record(ckpt.get("dls/rng")?)?;
            s.selected = ckpt.get("dls/selected")?.as_u64()?.iter().map(|&i| i as usize).collect();
            s.last_scores = ckpt.get("dls/scores")?.as_f64()?.to_vec();
            let st = ckpt.get("dls/state")?.as_u64()?;
            if st.len() != 2 {
                return Err(CheckpointError::Malformed("dls/state must hold 2 words".into()).into());
            }
            s.step = st[0];
            s.last_mode = SelectionMode::from_code(st[1])
                .ok_or_else(|| CheckpointError::Malformed(format!("unknown selection mode {}", st[1])))?;
        }
        Ok(t)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)?;
        self.last_good = Some(path.to_path_buf());
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut t = Self::from_checkpoint(&Checkpoint::load(path)?)?;
        t.last_good = Some(path.to_path_buf());
        Ok(t)
    }
}

/// Checkpoint of a bare model: config text plus `param/*` records.
pub fn model_checkpoint<F: Float>(model: &Model<F>, cfg: &RunConfig) -> Checkpoint {
    let mut records = vec![Record::u64s("run/step", vec![0])];
    for (_, p) in model.store.iter() {
        records.push(Record::tensor(format!("param/{}", p.name), &p.value));
    }
    Checkpoint {
        config: cfg.to_text(),
        records,
    }
}

/// Overwrites every parameter of `model` with its `param/<name>` record.
pub fn load_params<F: Float>(model: &mut Model<F>, ckpt: &Checkpoint) -> Result<()> {
    for (_, p) in model.store.iter_mut() {
        let t: Tensor<F> = ckpt.get(&format!("param/{}", p.name))?.to_tensor()?;
        if t.shape() != p.value.shape() {
            return Err(CheckpointError::Malformed(format!(
                "{} has shape {:?} in the checkpoint but {:?} in the model",
                p.name,
                t.shape(),
                p.value.shape()
            ))
            .into());
        }
        p.value = t;
    }
    Ok(())
}

/// Model of any checkpoint this crate writes: fine-tuning checkpoints
/// carry adapters, base checkpoints do not.
pub fn load_model<F: Float>(path: &Path) -> Result<(Model<F>, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ckpt.config)?;
    let mut model = Model::new(cfg.model.clone(), &mut substream(cfg.train.seed, STREAM_INIT))?;
    let has_adapter = ckpt.records.iter().any(|r| r.name.contains(".roae.") || r.name.contains(".lora."));
    if has_adapter {
        prepare_fine_tune(&mut model, &cfg, &mut substream(cfg.train.seed, STREAM_ADAPTER))?;
    }
    load_params(&mut model, &ckpt)?;
    Ok((model, cfg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub steps: u64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
    pub base_eval: Eval,
    pub final_eval: Eval,
    pub params: ParamReport,
    pub exploit_events: usize,
    pub explore_events: usize,
}

struct Csv {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Csv {
    fn create(path: PathBuf, header: &str) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut c = Csv { path, out: BufWriter::new(file) };
        c.line(header)?;
        Ok(c)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn run_training(config_path: &Path) -> Result<RunReport> {
    run_with_config(&RunConfig::load(config_path)?)
}

/// Pretrains (or loads) the base, fine-tunes, and writes the run directory:
/// `config.txt`, `pretrain_loss.csv`, `base.ckpt`, `loss.csv`,
/// `selection.log`, periodic `step_N.ckpt`, `final.ckpt`, `summary.txt`.
pub fn run_with_config(cfg: &RunConfig) -> Result<RunReport> {
    let dir = cfg.train.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("config.txt", &cfg.to_text())?;

    let mut pre = Csv::create(dir.join("pretrain_loss.csv"), "step,loss")?;
    let mut pre_err = Ok(());
    let base = Trainer::<f32>::base_model(cfg, |o| {
        if pre_err.is_ok() {
            pre_err = pre.line(&format!("{},{}", o.step, o.loss));
        }
    })?;
    pre_err?;
    pre.finish()?;
    model_checkpoint(&base, cfg).save(&dir.join("base.ckpt"))?;

    let mut t = Trainer::fine_tune(cfg, base)?;
    let base_eval = evaluate(&t.model, cfg, &t.source)?;
    let mut loss_csv = Csv::create(dir.join("loss.csv"), "step,loss")?;
    let mut sel = Csv::create(dir.join("selection.log"), "# step mode scores selected")?;
    let (mut exploit, mut explore) = (0, 0);
    let mut losses = Vec::with_capacity(cfg.train.steps as usize);
    for _ in 0..cfg.train.steps {
        let out = t.train_step()?;
        loss_csv.line(&format!("{},{}", out.step, out.loss))?;
        losses.push(out.loss);
        if let Some(e) = &out.event {
            sel.line(&e.to_string())?;
            match e.mode {
                SelectionMode::Exploit => exploit += 1,
                SelectionMode::Explore => explore += 1,
                SelectionMode::Warmup => {}
            }
        }
        let every = cfg.train.checkpoint_every;
        if every > 0 && out.step % every == 0 && out.step < cfg.train.steps {
            t.save(&dir.join(format!("step_{}.ckpt", out.step)))?;
        }
    }
    loss_csv.finish()?;
    sel.finish()?;
    t.save(&dir.join("final.ckpt"))?;

    let final_eval = evaluate(&t.model, cfg, &t.source)?;
    let params = param_report(&t.model, cfg);
    let report = RunReport {
        out_dir: dir.clone(),
        steps: t.step,
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        losses,
        base_eval,
        final_eval,
        params,
        exploit_events: exploit,
        explore_events: explore,
    };
    write("summary.txt", &report.summary())?;
    Ok(report)
}

impl RunReport {
    pub fn summary(&self) -> String {
        let e = |x: &Eval| {
            format!(
                "loss_all={:.6} loss_answer={:.6} answer_accuracy={:.4}",
                x.loss_all, x.loss_answer, x.answer_accuracy
            )
        };
        let events = self.exploit_events + self.explore_events;
        format!(
            "steps = {}\nfinal_train_loss = {:.6}\nbase_eval: {}\nfinal_eval: {}\n{}\nselection_events = {}\nexploit_events = {}\nexplore_events = {}\n",
            self.steps,
            self.final_loss,
            e(&self.base_eval),
            e(&self.final_eval),
            self.params,
            events,
            self.exploit_events,
            self.explore_events
        )
    }
}
