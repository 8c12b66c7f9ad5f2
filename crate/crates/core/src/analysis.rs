//! Parameter accounting, activation-norm tables, grouped gradient checks
//! and ablation sweeps.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Capture, Model, ModelConfig};
use crate::roae::{lora_param_count, roae_param_count, RoaeConfig};
use crate::tensor::gradcheck::{finite_difference_at, relative_error, DEFAULT_EPS};
use crate::tensor::{Float, Graph, ParamId, Tensor};
use crate::train::config::{AdapterChoice, RunConfig};
use crate::train::{model_checkpoint, run_with_config, RunReport, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub total: usize,
    pub attached: usize,
    /// Trainable tensors that can move in one step: the `k` largest layers
    /// under layer selection, everything when selection is off.
    pub active: usize,
}

impl ParamReport {
    /// `attached / total` in percent.
    pub fn fraction_pct(&self) -> f64 {
        100.0 * self.attached as f64 / self.total as f64
    }

    pub fn active_fraction_pct(&self) -> f64 {
        100.0 * self.active as f64 / self.total as f64
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "total_params = {}", self.total)?;
        writeln!(f, "attached_trainable = {}", self.attached)?;
        writeln!(f, "active_trainable = {}", self.active)?;
        writeln!(f, "trainable_fraction = {:.3}%", self.fraction_pct())?;
        write!(f, "active_fraction = {:.3}%", self.active_fraction_pct())
    }
}

pub fn param_report<F: Float>(model: &Model<F>, cfg: &RunConfig) -> ParamReport {
    let total = model.count_parameters(false);
    let attached = model.count_parameters(true);
    let active = if cfg.dls_enabled {
        let mut per_layer = vec![0usize; cfg.model.n_layers];
        let mut outside = 0;
        for (_, p) in model.store.iter().filter(|(_, p)| p.trainable) {
            match p.layer {
                Some(l) => per_layer[l] += p.value.numel(),
                None => outside += p.value.numel(),
            }
        }
        per_layer.sort_unstable_by(|a, b| b.cmp(a));
        outside + per_layer.iter().take(cfg.dls.k(cfg.model.n_layers)).sum::<usize>()
    } else {
        attached
    };
    ParamReport { total, attached, active }
}

/// Builds the configured model (adapter attached, base frozen) and reports it.
pub fn params_for_config(cfg: &RunConfig) -> Result<ParamReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = Model::<f32>::new(cfg.model.clone(), &mut rng)?;
    crate::train::prepare_fine_tune(&mut model, cfg, &mut rng)?;
    Ok(param_report(&model, cfg))
}

/// Dimensions of a published decoder checkpoint, for closed-form counts of
/// architectures larger than the engine's own (gated FFN, optional Q/K/V
/// biases, untied embeddings).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceArch {
    pub name: &'static str,
    pub d: usize,
    pub n_layers: usize,
    pub h_q: usize,
    pub h_k: usize,
    pub d_h: usize,
    pub vocab: usize,
    pub intermediate: usize,
    pub qkv_bias: bool,
    pub tied_embeddings: bool,
}

impl ReferenceArch {
    pub fn qwen2_5_7b() -> Self {
        ReferenceArch {
            name: "Qwen2.5-7B",
            d: 3584,
            n_layers: 28,
            h_q: 28,
            h_k: 4,
            d_h: 128,
            vocab: 152_064,
            intermediate: 18_944,
            qkv_bias: true,
            tied_embeddings: false,
        }
    }

    pub fn total_params(&self) -> usize {
        let (d, q, kv) = (self.d, self.h_q * self.d_h, self.h_k * self.d_h);
        let bias = if self.qkv_bias { q + 2 * kv } else { 0 };
        let attn = d * q + 2 * d * kv + q * d + bias;
        let ffn = 3 * d * self.intermediate;
        let per_layer = attn + ffn + 2 * d;
        let embed = self.vocab * d * if self.tied_embeddings { 1 } else { 2 };
        embed + self.n_layers * per_layer + d
    }

    /// Shape view used by the adapter counting functions.
    pub fn as_model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            n_layers: self.n_layers,
            h_q: self.h_q,
            h_k: self.h_k,
            d_h: self.d_h,
            vocab: self.vocab,
            max_seq: 1,
            rope_base: 10000.0,
            ffn_mult: 1,
        }
    }

    /// Adapter size and its share of the base model, in percent.
    pub fn roae_fraction(&self, cfg: &RoaeConfig) -> Result<(usize, f64)> {
        let n = roae_param_count(&self.as_model_config(), cfg)?;
        Ok((n, 100.0 * n as f64 / self.total_params() as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Q,
    K,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pre,
    Post,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormRow {
    pub layer: usize,
    pub head: usize,
    pub dim: usize,
    pub mean_abs: f64,
    pub head_l2: f64,
}

/// Per-dimension mean |activation| and per-head mean L2 norm of captured
/// Q or K head states.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationNormTable {
    pub rows: Vec<NormRow>,
}

impl ActivationNormTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,head,dim,mean_abs,head_l2\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{:.9e},{:.9e}\n", r.layer, r.head, r.dim, r.mean_abs, r.head_l2));
        }
        s
    }
}

pub fn activation_norms<F: Float>(
    model: &Model<F>,
    tokens: &[usize],
    which: Which,
    stage: Stage,
) -> Result<ActivationNormTable> {
    if tokens.is_empty() {
        return Err(Error::Input("sample has no tokens".into()));
    }
    let mut cap = Capture::default();
    let mut g = Graph::new();
    model.forward(&mut g, tokens, 1, tokens.len(), Some(&mut cap))?;
    let layers = match (which, stage) {
        (Which::Q, Stage::Pre) => &cap.q_pre,
        (Which::Q, Stage::Post) => &cap.q_post,
        (Which::K, Stage::Pre) => &cap.k_pre,
        (Which::K, Stage::Post) => &cap.k_post,
    };
    let mut rows = Vec::new();
    for (li, heads) in layers.iter().enumerate() {
        for (hi, t) in heads.iter().enumerate() {
            let d_h = t.last_dim();
            let n = t.numel() / d_h;
            let mut abs = vec![0.0f64; d_h];
            let mut l2 = 0.0f64;
            for v in t.data().chunks(d_h) {
                let mut sq = 0.0;
                for (a, x) in abs.iter_mut().zip(v) {
                    let x = x.as_f64();
                    *a += x.abs();
                    sq += x * x;
                }
                l2 += sq.sqrt();
            }
            let head_l2 = l2 / n as f64;
            rows.extend(abs.into_iter().enumerate().map(|(dim, a)| NormRow {
                layer: li,
                head: hi,
                dim,
                mean_abs: a / n as f64,
                head_l2,
            }));
        }
    }
    Ok(ActivationNormTable { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: &'static str,
    pub entries: usize,
    pub max_rel_err: f64,
}

/// Entries checked per tensor at most; larger tensors are sampled.
pub const GRADCHECK_MAX_PER_TENSOR: usize = 512;
/// Entries checked per base weight tensor.
pub const GRADCHECK_BASE_SAMPLES: usize = 16;

/// 64-bit analytic gradients against central differences, grouped into
/// adapters, norm gains and base weights. Adapter tensors are filled with
/// random values first so no gradient is trivially zero.
pub fn gradcheck_groups(cfg: &RunConfig, batch: usize, seq: usize) -> Result<Vec<GroupCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = Model::<f64>::new(cfg.model.clone(), &mut rng)?;
    crate::train::prepare_fine_tune(&mut model, cfg, &mut rng)?;
    for id in model.adapter_params() {
        let p = model.store.get_mut(id);
        p.value = Tensor::from_fn(p.value.shape(), |_| rng.random_range(-0.5..0.5));
    }
    model.unfreeze_all();
    let toks: Vec<usize> = (0..batch * seq).map(|_| rng.random_range(0..cfg.model.vocab)).collect();
    let tgts: Vec<usize> = (0..batch * seq).map(|_| rng.random_range(0..cfg.model.vocab)).collect();
    model.store.zero_grad();
    model.loss_and_backward(&toks, &tgts, None, batch, seq)?;

    let adapters = model.adapter_params();
    let mut gains: Vec<ParamId> = (0..cfg.model.n_layers).flat_map(|i| <[ParamId; 2]>::from(model.norm_gains(i))).collect();
    gains.push(model.final_norm);
    let base: Vec<ParamId> = model
        .store
        .iter()
        .map(|(id, _)| id)
        .filter(|id| !adapters.contains(id) && !gains.contains(id))
        .collect();

    let mut out = Vec::new();
    for (group, ids, cap) in [
        ("adapters", adapters, GRADCHECK_MAX_PER_TENSOR),
        ("norm_gains", gains, GRADCHECK_MAX_PER_TENSOR),
        ("base_weights", base, GRADCHECK_BASE_SAMPLES),
    ] {
        if ids.is_empty() {
            continue;
        }
        let params: Vec<Tensor<f64>> = ids.iter().map(|&id| model.store.value(id).clone()).collect();
        let indices: Vec<Vec<usize>> = params
            .iter()
            .map(|t| {
                let n = t.numel();
                if n <= cap {
                    (0..n).collect()
                } else {
                    let mut v = sample(&mut rng, n, cap).into_vec();
                    v.sort_unstable();
                    v
                }
            })
            .collect();
        let probe = model.clone();
        let mut f = |p: &[Tensor<f64>]| -> Result<f64> {
            let mut m = probe.clone();
            for (&id, t) in ids.iter().zip(p) {
                m.store.get_mut(id).value = t.clone();
            }
            let mut g = Graph::new();
            let loss = m.loss(&mut g, &toks, &tgts, None, batch, seq)?;
            Ok(g.value(loss).item())
        };
        let numeric = finite_difference_at(&mut f, &params, &indices, DEFAULT_EPS)?;
        let mut worst: f64 = 0.0;
        let mut entries = 0;
        for (&id, vals) in ids.iter().zip(&numeric) {
            let grad = model.store.get(id).grad.as_ref().ok_or_else(|| {
                Error::Scoring(format!("no analytic gradient for {}", model.store.get(id).name))
            })?;
            for &(i, num) in vals {
                worst = worst.max(relative_error(grad.data()[i], num));
                entries += 1;
            }
        }
        out.push(GroupCheck { group, entries, max_rel_err: worst });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    RoaeOnly,
    Lora128,
    LoraMatched,
    RlowHalf,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Full, Variant::RoaeOnly, Variant::Lora128, Variant::LoraMatched, Variant::RlowHalf];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::RoaeOnly => "roae_only",
            Variant::Lora128 => "lora128",
            Variant::LoraMatched => "lora_matched",
            Variant::RlowHalf => "rlow_half",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// LoRA rank whose Q/K adapter size is closest to the RoAE adapter's;
/// ties go to the smaller rank.
pub fn matched_lora_rank(model: &ModelConfig, roae: &RoaeConfig) -> Result<usize> {
    let target = roae_param_count(model, roae)? as i64;
    let per_rank = lora_param_count(model, 1) as i64;
    let hi = (target / per_rank.max(1) + 2).max(1) as usize;
    Ok((1..=hi)
        .min_by_key(|&r| ((lora_param_count(model, r) as i64 - target).abs(), r))
        .expect("range is non-empty"))
}

/// The configuration of one ablation variant, derived from `base`.
pub fn variant_config(base: &RunConfig, v: Variant) -> Result<RunConfig> {
    let mut c = base.clone();
    c.adapter = AdapterChoice::Roae;
    c.dls_enabled = true;
    match v {
        Variant::Full => {}
        Variant::RoaeOnly => c.dls_enabled = false,
        Variant::Lora128 => {
            c.adapter = AdapterChoice::Lora;
            c.lora_rank = 128;
        }
        Variant::LoraMatched => {
            c.adapter = AdapterChoice::Lora;
            c.lora_rank = matched_lora_rank(&c.model, &c.roae)?;
        }
        Variant::RlowHalf => c.roae.r_low = 0.5,
    }
    c.train.out_dir = base.train.out_dir.join(v.name());
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub config: RunConfig,
    pub report: RunReport,
}

/// Runs the requested variants against one shared base model and writes
/// `ablation.csv` and `loss_curves.csv` next to the per-variant run
/// directories.
pub fn ablate(base: &RunConfig, variants: &[Variant]) -> Result<Vec<AblationRun>> {
    let dir = base.train.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut shared = base.clone();
    if shared.train.base_ckpt.is_none() {
        let model = Trainer::<f32>::base_model(base, |_| {})?;
        let path = dir.join("base.ckpt");
        model_checkpoint(&model, base).save(&path)?;
        shared.train.base_ckpt = Some(path);
    }
    let mut runs = Vec::new();
    for &v in variants {
        let config = variant_config(&shared, v)?;
        let report = run_with_config(&config)?;
        runs.push(AblationRun { variant: v, config, report });
    }
    write_ablation_tables(&dir, &runs)?;
    Ok(runs)
}

fn write_ablation_tables(dir: &Path, runs: &[AblationRun]) -> Result<()> {
    let mut table = String::from(
        "variant,adapter,lora_rank,r_low,dls,trainable_params,trainable_fraction_pct,final_train_loss,eval_loss_answer,base_answer_accuracy,final_answer_accuracy\n",
    );
    for r in runs {
        let c = &r.config;
        let adapter = match c.adapter {
            AdapterChoice::Roae => "roae",
            AdapterChoice::Lora => "lora",
            AdapterChoice::None => "none",
        };
        table.push_str(&format!(
            "{},{},{},{},{},{},{:.3},{:.6},{:.6},{:.4},{:.4}\n",
            r.variant.name(),
            adapter,
            if c.adapter == AdapterChoice::Lora { c.lora_rank.to_string() } else { "-".into() },
            c.roae.r_low,
            c.dls_enabled,
            r.report.params.attached,
            r.report.params.fraction_pct(),
            r.report.final_loss,
            r.report.final_eval.loss_answer,
            r.report.base_eval.answer_accuracy,
            r.report.final_eval.answer_accuracy,
        ));
    }
    let path: PathBuf = dir.join("ablation.csv");
    fs::write(&path, table).map_err(|e| Error::io(&path, e))?;

    let mut curves = String::from("step");
    for r in runs {
        curves.push(',');
        curves.push_str(r.variant.name());
    }
    curves.push('\n');
    let steps = runs.iter().map(|r| r.report.losses.len()).max().unwrap_or(0);
    for s in 0..steps {
        curves.push_str(&(s + 1).to_string());
        for r in runs {
            curves.push(',');
            if let Some(l) = r.report.losses.get(s) {
                curves.push_str(&l.to_string());
            }
        }
        curves.push('\n');
    }
    let path = dir.join("loss_curves.csv");
    fs::write(&path, curves).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy_cfg(rank: usize) -> RunConfig {
        let mut c = RunConfig::default();
        c.roae.rank = rank;
        c
    }

    #[test]
    fn fraction_is_trainable_over_total() {
        let c = toy_cfg(4);
        let r = params_for_config(&c).unwrap();
        assert_eq!(r.total, 28832 + 320);
        assert_eq!(r.attached, 320);
        assert_eq!(r.active, 160);
        assert_eq!(r.fraction_pct(), 100.0 * 320.0 / 29152.0);
        assert!(r.to_string().contains("trainable_fraction = 1.098%"));
    }

    #[test]
    fn full_selection_ratio_activates_everything() {
        let mut c = toy_cfg(4);
        c.dls.k_ratio = 1.0;
        let r = params_for_config(&c).unwrap();
        assert_eq!(r.attached, r.active);
        c.dls.k_ratio = 0.5;
        c.dls_enabled = false;
        let r = params_for_config(&c).unwrap();
        assert_eq!(r.attached, r.active);
    }

    #[test]
    fn doubling_rank_doubles_the_projection_share() {
        // toy h_q == h_k, so the adapter is exactly A and B, linear in rank
        let a = params_for_config(&toy_cfg(4)).unwrap().attached;
        let b = params_for_config(&toy_cfg(8)).unwrap().attached;
        assert_eq!(b, 2 * a);
    }

    #[test]
    fn qwen_reference_counts() {
        let q = ReferenceArch::qwen2_5_7b();
        assert_eq!(q.total_params(), 7_615_616_512);
        let (n, pct) = q.roae_fraction(&RoaeConfig::default()).unwrap();
        // per layer: A 3584*128, B 128*(28*32), W_gqa (28*32)*(4*32)
        assert_eq!(n, 28 * (3584 * 128 + 128 * 896 + 896 * 128));
        assert!((pct - 0.261).abs() <= 0.05, "{pct}");
    }

    #[test]
    fn matched_rank_for_toy_default() {
        let r = matched_lora_rank(&ModelConfig::toy(), &RoaeConfig::default()).unwrap();
        assert_eq!(r, 40);
        assert_eq!(lora_param_count(&ModelConfig::toy(), r), roae_param_count(&ModelConfig::toy(), &RoaeConfig::default()).unwrap());
    }

    #[test]
    fn variants_change_one_factor() {
        let base = RunConfig::default();
        let full = variant_config(&base, Variant::Full).unwrap();
        let only = variant_config(&base, Variant::RoaeOnly).unwrap();
        assert!(!only.dls_enabled && full.dls_enabled);
        let half = variant_config(&base, Variant::RlowHalf).unwrap();
        assert_eq!(half.roae.r_low, 0.5);
        assert_eq!(half.roae.rank, full.roae.rank);
        let l = variant_config(&base, Variant::Lora128).unwrap();
        assert_eq!((l.adapter, l.lora_rank), (AdapterChoice::Lora, 128));
        assert_eq!(only.train.out_dir, base.train.out_dir.join("roae_only"));
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
        assert_eq!(Variant::parse("lr64"), None);
    }

    #[test]
    fn zero_model_has_zero_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::<f64>::new(ModelConfig::toy(), &mut rng).unwrap();
        for (_, p) in m.store.iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        for (which, stage) in [(Which::Q, Stage::Pre), (Which::K, Stage::Post)] {
            let t = activation_norms(&m, &[1, 2, 3, 4, 5], which, stage).unwrap();
            assert_eq!(t.rows.len(), 2 * 4 * 8);
            assert!(t.rows.iter().all(|r| r.mean_abs == 0.0 && r.head_l2 == 0.0));
        }
        assert!(matches!(activation_norms(&m, &[], Which::Q, Stage::Pre), Err(Error::Input(_))));
    }

    #[test]
    fn norm_table_matches_direct_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::<f64>::new(ModelConfig::toy(), &mut rng).unwrap();
        let toks = [5, 9, 2, 40, 33, 7];
        let t = activation_norms(&m, &toks, Which::Q, Stage::Post).unwrap();
        let mut cap = Capture::default();
        let mut g = Graph::new();
        m.forward(&mut g, &toks, 1, 6, Some(&mut cap)).unwrap();
        let h = &cap.q_post[1][2];
        let row = t.rows.iter().find(|r| r.layer == 1 && r.head == 2 && r.dim == 3).unwrap();
        let mean_abs = (0..6).map(|p| h.data()[p * 8 + 3].abs()).sum::<f64>() / 6.0;
        let l2 = (0..6).map(|p| h.data()[p * 8..p * 8 + 8].iter().map(|x| x * x).sum::<f64>().sqrt()).sum::<f64>() / 6.0;
        assert!((row.mean_abs - mean_abs).abs() < 1e-15);
        assert!((row.head_l2 - l2).abs() < 1e-15);
        assert!(t.to_csv().starts_with("layer,head,dim,mean_abs,head_l2\n0,0,0,"));
    }
}
