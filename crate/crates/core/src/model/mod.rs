//! Decoder-only Pre-LN transformer with RoPE attention, optional grouped
//! query heads, and a SiLU feed-forward block.

pub mod rope;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::roae::{
    align_gqa, extract_low_freq, generate_signal, modulate, reinsert, LoraAdapter, LowFreqMap, RoaeAdapter,
    RoaeConfig, RoaeStage, SignalSource,
};
use crate::tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var};

pub use rope::{rope_angle, rope_rotate, RopeTables};

/// Standard deviation of the normal init used for projections and embeddings.
pub const INIT_STD: f64 = 0.02;

/// Fill value for masked attention scores. Finite so the engine's
/// non-finite check stays meaningful; `exp` of it underflows to zero.
const MASK_FILL: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub h_q: usize,
    pub h_k: usize,
    pub d_h: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    pub ffn_mult: usize,
}

impl ModelConfig {
    /// Reference toy model: d=32, 4 heads of width 8, 2 layers, vocab 64.
    pub fn toy() -> Self {
        ModelConfig {
            d: 32,
            n_layers: 2,
            h_q: 4,
            h_k: 4,
            d_h: 8,
            vocab: 64,
            max_seq: 64,
            rope_base: 10000.0,
            ffn_mult: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d", self.d),
            ("n_layers", self.n_layers),
            ("h_q", self.h_q),
            ("h_k", self.h_k),
            ("d_h", self.d_h),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_h.is_multiple_of(2) {
            return Err(Error::Config(format!("d_h must be even for RoPE, got {}", self.d_h)));
        }
        if !self.h_q.is_multiple_of(self.h_k) {
            return Err(Error::Config(format!(
                "h_q ({}) must be a multiple of h_k ({})",
                self.h_q, self.h_k
            )));
        }
        if self.d != self.h_q * self.d_h {
            return Err(Error::Config(format!(
                "d ({}) must equal h_q * d_h ({} * {})",
                self.d, self.h_q, self.d_h
            )));
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return Err(Error::Config(format!("rope_base must exceed 1, got {}", self.rope_base)));
        }
        Ok(())
    }

    /// Closed-form size of the base model (no adapters).
    pub fn base_param_count(&self) -> usize {
        let (d, q, kv, ff) = (
            self.d,
            self.h_q * self.d_h,
            self.h_k * self.d_h,
            self.ffn_mult * self.d,
        );
        let per_layer = 2 * d + d * q + 2 * d * kv + q * d + 2 * d * ff;
        self.vocab * d + self.n_layers * per_layer + d + d * self.vocab
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerAdapter {
    Roae(RoaeAdapter),
    Lora(LoraAdapter),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderLayer {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub adapter: Option<LayerAdapter>,
}

impl DecoderLayer {
    pub fn adapter_params(&self) -> Vec<ParamId> {
        match &self.adapter {
            None => Vec::new(),
            Some(LayerAdapter::Roae(r)) => {
                let mut v = vec![r.a, r.b];
                v.extend(r.w_gqa);
                if let Some((a, b)) = r.k_proj {
                    v.extend([a, b]);
                }
                v
            }
            Some(LayerAdapter::Lora(l)) => vec![l.q_a, l.q_b, l.k_a, l.k_b],
        }
    }
}

/// Which adapter family, if any, is attached.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterKind {
    None,
    Roae(RoaeConfig),
    Lora { rank: usize },
}

/// Q/K head states recorded during a forward pass, indexed `[layer][head]`,
/// each `[b, l, d_h]`. `pre` is the state entering the rotation, `post` the
/// state used for attention scores.
#[derive(Debug, Clone, Default)]
pub struct Capture<F> {
    pub q_pre: Vec<Vec<Tensor<F>>>,
    pub q_post: Vec<Vec<Tensor<F>>>,
    pub k_pre: Vec<Vec<Tensor<F>>>,
    pub k_post: Vec<Vec<Tensor<F>>>,
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: ParamId,
    pub head: ParamId,
    pub adapter: AdapterKind,
}

fn normal_tensor<F: Float>(shape: &[usize], rng: &mut impl Rng) -> Tensor<F> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor::from_fn(shape, |_| F::lit(dist.sample(rng)))
}

fn uniform_tensor<F: Float>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<F> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Tensor::from_fn(shape, |_| F::lit(dist.sample(rng)))
}

impl<F: Float> Model<F> {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let (d, q, kv, ff) = (cfg.d, cfg.h_q * cfg.d_h, cfg.h_k * cfg.d_h, cfg.ffn_mult * cfg.d);
        let embed = store.add("embed", normal_tensor(&[cfg.vocab, d], rng), None);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let name = |s: &str| format!("layers.{i}.{s}");
            let li = Some(i);
            layers.push(DecoderLayer {
                attn_norm: store.add(name("attn_norm"), Tensor::full(&[d], F::one()), li),
                wq: store.add(name("wq"), normal_tensor(&[d, q], rng), li),
                wk: store.add(name("wk"), normal_tensor(&[d, kv], rng), li),
                wv: store.add(name("wv"), normal_tensor(&[d, kv], rng), li),
                wo: store.add(name("wo"), normal_tensor(&[q, d], rng), li),
                ffn_norm: store.add(name("ffn_norm"), Tensor::full(&[d], F::one()), li),
                w1: store.add(name("w1"), normal_tensor(&[d, ff], rng), li),
                w2: store.add(name("w2"), normal_tensor(&[ff, d], rng), li),
                adapter: None,
            });
        }
        let final_norm = store.add("final_norm", Tensor::full(&[d], F::one()), None);
        let head = store.add("head", normal_tensor(&[d, cfg.vocab], rng), None);
        Ok(Model {
            cfg,
            store,
            embed,
            layers,
            final_norm,
            head,
            adapter: AdapterKind::None,
        })
    }

    /// Same structure and values in another precision.
    pub fn cast<G: Float>(&self) -> Model<G> {
        let mut store = ParamStore::new();
        for (_, p) in self.store.iter() {
            let id = store.add(p.name.clone(), p.value.cast(), p.layer);
            let q = store.get_mut(id);
            q.requires_grad = p.requires_grad;
            q.trainable = p.trainable;
        }
        Model {
            cfg: self.cfg.clone(),
            store,
            embed: self.embed,
            layers: self.layers.clone(),
            final_norm: self.final_norm,
            head: self.head,
            adapter: self.adapter.clone(),
        }
    }

    fn ensure_no_adapter(&self) -> Result<()> {
        if self.adapter != AdapterKind::None {
            return Err(Error::Config(format!(
                "layers already carry an adapter ({:?}); RoAE and LoRA are mutually exclusive",
                self.adapter
            )));
        }
        Ok(())
    }

    /// Attaches a RoAE adapter to every layer. `B` starts at zero.
    pub fn attach_roae(&mut self, cfg: RoaeConfig, rng: &mut impl Rng) -> Result<()> {
        self.ensure_no_adapter()?;
        cfg.validate(&self.cfg)?;
        let d_low = cfg.d_low(self.cfg.d_h)?;
        let (d, q_out, k_out) = (self.cfg.d, self.cfg.h_q * d_low, self.cfg.h_k * d_low);
        let a_bound = 1.0 / (d as f64).sqrt();
        for i in 0..self.cfg.n_layers {
            let name = |s: &str| format!("layers.{i}.roae.{s}");
            let li = Some(i);
            let a = self.store.add(name("a"), uniform_tensor(&[d, cfg.rank], a_bound, rng), li);
            let b = self.store.add(name("b"), Tensor::zeros(&[cfg.rank, q_out]), li);
            let (w_gqa, k_proj) = if cfg.share_qk {
                let w = (self.cfg.h_q != self.cfg.h_k).then(|| {
                    let bound = 1.0 / (q_out as f64).sqrt();
                    self.store.add(name("w_gqa"), uniform_tensor(&[q_out, k_out], bound, rng), li)
                });
                (w, None)
            } else {
                let ka = self.store.add(name("k_a"), uniform_tensor(&[d, cfg.rank], a_bound, rng), li);
                let kb = self.store.add(name("k_b"), Tensor::zeros(&[cfg.rank, k_out]), li);
                (None, Some((ka, kb)))
            };
            self.layers[i].adapter = Some(LayerAdapter::Roae(RoaeAdapter { a, b, w_gqa, k_proj }));
        }
        self.adapter = AdapterKind::Roae(cfg);
        Ok(())
    }

    /// Attaches `W + A·B` deltas to the Q and K projections of every layer.
    pub fn attach_lora(&mut self, rank: usize, rng: &mut impl Rng) -> Result<()> {
        self.ensure_no_adapter()?;
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        let (d, q_out, k_out) = (self.cfg.d, self.cfg.h_q * self.cfg.d_h, self.cfg.h_k * self.cfg.d_h);
        let bound = 1.0 / (d as f64).sqrt();
        for i in 0..self.cfg.n_layers {
            let name = |s: &str| format!("layers.{i}.lora.{s}");
            let li = Some(i);
            let q_a = self.store.add(name("q_a"), uniform_tensor(&[d, rank], bound, rng), li);
            let q_b = self.store.add(name("q_b"), Tensor::zeros(&[rank, q_out]), li);
            let k_a = self.store.add(name("k_a"), uniform_tensor(&[d, rank], bound, rng), li);
            let k_b = self.store.add(name("k_b"), Tensor::zeros(&[rank, k_out]), li);
            self.layers[i].adapter = Some(LayerAdapter::Lora(LoraAdapter { q_a, q_b, k_a, k_b }));
        }
        self.adapter = AdapterKind::Lora { rank };
        Ok(())
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(DecoderLayer::adapter_params).collect()
    }

    pub fn norm_gains(&self, layer: usize) -> (ParamId, ParamId) {
        (self.layers[layer].attn_norm, self.layers[layer].ffn_norm)
    }

    /// Fine-tuning mode: only adapter tensors are trainable. Per-layer norm
    /// gains keep `requires_grad` so their gradients can score layers.
    pub fn freeze_base(&mut self) {
        let adapters = self.adapter_params();
        let gains: Vec<ParamId> = self.layers.iter().flat_map(|l| [l.attn_norm, l.ffn_norm]).collect();
        for (id, p) in self.store.iter_mut() {
            let is_adapter = adapters.contains(&id);
            p.trainable = is_adapter;
            p.requires_grad = is_adapter || gains.contains(&id);
        }
    }

    /// Every tensor trainable (base pretraining).
    pub fn unfreeze_all(&mut self) {
        for (_, p) in self.store.iter_mut() {
            p.trainable = true;
            p.requires_grad = true;
        }
    }

    pub fn count_parameters(&self, trainable_only: bool) -> usize {
        self.store.count(trainable_only)
    }

    /// Embedding -> decoder blocks -> final norm -> output projection.
    /// Returns logits `[batch, seq, vocab]`.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        mut capture: Option<&mut Capture<F>>,
    ) -> Result<Var> {
        if seq == 0 || batch == 0 || tokens.len() != batch * seq {
            return Err(Error::Input(format!(
                "{} tokens do not form a [{batch}, {seq}] batch",
                tokens.len()
            )));
        }
        if seq > self.cfg.max_seq {
            return Err(Error::Input(format!(
                "sequence length {seq} exceeds max_seq {}",
                self.cfg.max_seq
            )));
        }
        let tables = RopeTables::new(seq, self.cfg.d_h, self.cfg.rope_base)?;
        let mask: Vec<bool> = (0..seq * seq).map(|i| i % seq > i / seq).collect();

        let table = g.param(&self.store, self.embed);
        let mut x = g.embedding(table, tokens, &[batch, seq])?;
        for layer in &self.layers {
            x = self.block(g, x, layer, &tables, &mask, capture.as_deref_mut())?;
        }
        let gain = g.param(&self.store, self.final_norm);
        let h = g.rms_norm(x, gain)?;
        let w = g.param(&self.store, self.head);
        g.matmul(h, w)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        g: &mut Graph<F>,
        x: Var,
        layer: &DecoderLayer,
        tables: &RopeTables<F>,
        mask: &[bool],
        capture: Option<&mut Capture<F>>,
    ) -> Result<Var> {
        let attn_gain = g.param(&self.store, layer.attn_norm);
        let h = g.rms_norm(x, attn_gain)?;
        let attn = self.attention(g, h, x, layer, tables, mask, capture)?;
        let x1 = g.add(x, attn)?;

        let ffn_gain = g.param(&self.store, layer.ffn_norm);
        let h2 = g.rms_norm(x1, ffn_gain)?;
        let w1 = g.param(&self.store, layer.w1);
        let w2 = g.param(&self.store, layer.w2);
        let up = g.matmul(h2, w1)?;
        let act = g.silu(up)?;
        let down = g.matmul(act, w2)?;
        g.add(x1, down)
    }

    fn project(&self, g: &mut Graph<F>, h: Var, w: ParamId, lora: Option<(ParamId, ParamId)>) -> Result<Var> {
        let wv = g.param(&self.store, w);
        let base = g.matmul(h, wv)?;
        match lora {
            None => Ok(base),
            Some((a, b)) => {
                let av = g.param(&self.store, a);
                let bv = g.param(&self.store, b);
                let low = g.matmul(h, av)?;
                let delta = g.matmul(low, bv)?;
                g.add(base, delta)
            }
        }
    }

    /// Rotation plus optional modulation of one head's Q or K state.
    fn head_state(
        &self,
        g: &mut Graph<F>,
        state: Var,
        signal: Option<(Var, &LowFreqMap, F, RoaeStage)>,
        tables: &RopeTables<F>,
    ) -> Result<(Var, Var)> {
        let enhance = |g: &mut Graph<F>, z: Var, (s, map, alpha, _): (Var, &LowFreqMap, F, RoaeStage)| {
            let low = extract_low_freq(g, z, map)?;
            let z_star = modulate(g, low, s, alpha)?;
            reinsert(g, z, z_star, map)
        };
        match signal {
            Some(sig) if sig.3 == RoaeStage::PreRope => {
                let pre = enhance(g, state, sig)?;
                let post = tables.apply(g, pre)?;
                Ok((pre, post))
            }
            Some(sig) => {
                let rotated = tables.apply(g, state)?;
                let post = enhance(g, rotated, sig)?;
                Ok((state, post))
            }
            None => {
                let post = tables.apply(g, state)?;
                Ok((state, post))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph<F>,
        h: Var,
        resid: Var,
        layer: &DecoderLayer,
        tables: &RopeTables<F>,
        mask: &[bool],
        capture: Option<&mut Capture<F>>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let d_h = cfg.d_h;
        let (q_lora, k_lora) = match &layer.adapter {
            Some(LayerAdapter::Lora(l)) => (Some((l.q_a, l.q_b)), Some((l.k_a, l.k_b))),
            _ => (None, None),
        };
        let q = self.project(g, h, layer.wq, q_lora)?;
        let k = self.project(g, h, layer.wk, k_lora)?;
        let v = self.project(g, h, layer.wv, None)?;

        let roae = match (&layer.adapter, &self.adapter) {
            (Some(LayerAdapter::Roae(ad)), AdapterKind::Roae(rc)) => {
                let map = LowFreqMap::new(d_h, rc)?;
                let src = match rc.source {
                    SignalSource::Normalized => h,
                    SignalSource::Residual => resid,
                };
                let a = g.param(&self.store, ad.a);
                let b = g.param(&self.store, ad.b);
                let s_q = generate_signal(g, src, a, b)?;
                let s_k = match ad.k_proj {
                    Some((ka, kb)) => {
                        let ka = g.param(&self.store, ka);
                        let kb = g.param(&self.store, kb);
                        generate_signal(g, src, ka, kb)?
                    }
                    None => {
                        let w = ad.w_gqa.map(|w| g.param(&self.store, w));
                        align_gqa(g, s_q, w, cfg.h_q, cfg.h_k)?
                    }
                };
                check_signal(g, s_q, cfg.h_q * map.d_low())?;
                check_signal(g, s_k, cfg.h_k * map.d_low())?;
                Some((map, s_q, s_k, F::lit(rc.alpha), rc.stage))
            }
            (Some(LayerAdapter::Roae(_)), _) => {
                return Err(Error::Config("layer has a RoAE adapter but the model has no RoAE config".into()))
            }
            _ => None,
        };

        let head_signal = |g: &mut Graph<F>, s: Var, head: usize, map: &LowFreqMap| {
            let w = map.d_low();
            g.slice_last(s, head * w, (head + 1) * w)
        };

        let mut k_pre = Vec::with_capacity(cfg.h_k);
        let mut k_post = Vec::with_capacity(cfg.h_k);
        let mut keys_t = Vec::with_capacity(cfg.h_k);
        let mut values = Vec::with_capacity(cfg.h_k);
        for j in 0..cfg.h_k {
            let kj = g.slice_last(k, j * d_h, (j + 1) * d_h)?;
            let sig = match &roae {
                Some((map, _, s_k, alpha, stage)) => Some((head_signal(g, *s_k, j, map)?, map, *alpha, *stage)),
                None => None,
            };
            let (pre, post) = self.head_state(g, kj, sig, tables)?;
            k_pre.push(pre);
            k_post.push(post);
            keys_t.push(g.transpose(post)?);
            values.push(g.slice_last(v, j * d_h, (j + 1) * d_h)?);
        }

        let group = cfg.h_q / cfg.h_k;
        let inv_sqrt = F::lit(1.0 / (d_h as f64).sqrt());
        let mut q_pre = Vec::with_capacity(cfg.h_q);
        let mut q_post = Vec::with_capacity(cfg.h_q);
        let mut outs = Vec::with_capacity(cfg.h_q);
        for i in 0..cfg.h_q {
            let qi = g.slice_last(q, i * d_h, (i + 1) * d_h)?;
            let sig = match &roae {
                Some((map, s_q, _, alpha, stage)) => Some((head_signal(g, *s_q, i, map)?, map, *alpha, *stage)),
                None => None,
            };
            let (pre, post) = self.head_state(g, qi, sig, tables)?;
            q_pre.push(pre);
            q_post.push(post);
            let kv = i / group;
            let scores = g.matmul(post, keys_t[kv])?;
            let scaled = g.scale(scores, inv_sqrt)?;
            let masked = g.masked_fill(scaled, mask, F::lit(MASK_FILL))?;
            let probs = g.softmax_last(masked)?;
            outs.push(g.matmul(probs, values[kv])?);
        }

        if let Some(c) = capture {
            let grab = |g: &Graph<F>, vs: &[Var]| vs.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>();
            c.q_pre.push(grab(g, &q_pre));
            c.q_post.push(grab(g, &q_post));
            c.k_pre.push(grab(g, &k_pre));
            c.k_post.push(grab(g, &k_post));
        }

        let cat = g.concat_last(&outs)?;
        let wo = g.param(&self.store, layer.wo);
        g.matmul(cat, wo)
    }

    /// Mean cross-entropy of next-token predictions.
    pub fn loss(
        &self,
        g: &mut Graph<F>,
        inputs: &[usize],
        targets: &[usize],
        weights: Option<&[F]>,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let logits = self.forward(g, inputs, batch, seq, None)?;
        g.cross_entropy(logits, targets, weights)
    }

    /// Forward pass without gradient bookkeeping the caller cares about.
    pub fn logits(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, tokens, batch, seq, None)?;
        Ok(g.value(out).clone())
    }

    /// Runs forward + backward and accumulates gradients into the store.
    /// Returns the loss value.
    pub fn loss_and_backward(
        &mut self,
        inputs: &[usize],
        targets: &[usize],
        weights: Option<&[F]>,
        batch: usize,
        seq: usize,
    ) -> Result<F> {
        let mut g = Graph::new();
        let loss = self.loss(&mut g, inputs, targets, weights, batch, seq)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?;
        self.store.accumulate(&grads)?;
        Ok(value)
    }
}

fn check_signal<F: Float>(g: &Graph<F>, s: Var, width: usize) -> Result<()> {
    let got = g.value(s).last_dim();
    if got != width {
        return Err(Error::Config(format!("adapter signal width {got} does not match {width}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn tokens(n: usize, vocab: usize) -> Vec<usize> {
        (0..n).map(|i| (i * 7 + 3) % vocab).collect()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::toy().validate().is_ok());
        assert!(ModelConfig { d_h: 7, d: 28, ..ModelConfig::toy() }.validate().is_err());
        assert!(ModelConfig { h_k: 3, ..ModelConfig::toy() }.validate().is_err());
        assert!(ModelConfig { d: 30, ..ModelConfig::toy() }.validate().is_err());
        assert!(ModelConfig { vocab: 0, ..ModelConfig::toy() }.validate().is_err());
    }

    #[test]
    fn toy_parameter_count_matches_closed_form() {
        let m = Model::<f32>::new(ModelConfig::toy(), &mut rng()).unwrap();
        // embed 64·32 + 2 · (2·32 + 4·32·32 + 2·32·128) + 32 + 32·64
        let want = 2048 + 2 * (64 + 4096 + 8192) + 32 + 2048;
        assert_eq!(want, 28832);
        assert_eq!(m.count_parameters(false), want);
        assert_eq!(ModelConfig::toy().base_param_count(), want);
    }

    #[test]
    fn frozen_base_has_no_trainable_parameters() {
        let mut m = Model::<f32>::new(ModelConfig::toy(), &mut rng()).unwrap();
        m.freeze_base();
        assert_eq!(m.count_parameters(true), 0);
    }

    #[test]
    fn adapter_count_matches_budget() {
        let mut m = Model::<f32>::new(ModelConfig::toy(), &mut rng()).unwrap();
        let rc = RoaeConfig { rank: 4, ..RoaeConfig::default() };
        m.attach_roae(rc.clone(), &mut rng()).unwrap();
        m.freeze_base();
        assert_eq!(m.count_parameters(true), 320);
        assert_eq!(m.count_parameters(true), crate::roae::roae_param_count(&m.cfg, &rc).unwrap());
    }

    #[test]
    fn adapters_are_mutually_exclusive() {
        let mut m = Model::<f32>::new(ModelConfig::toy(), &mut rng()).unwrap();
        m.attach_lora(2, &mut rng()).unwrap();
        assert!(m.attach_roae(RoaeConfig::default(), &mut rng()).is_err());
        assert!(m.attach_lora(2, &mut rng()).is_err());
    }

    #[test]
    fn zero_b_adapter_is_bitwise_identity() {
        let base = Model::<f32>::new(ModelConfig::toy(), &mut rng()).unwrap();
        let toks = tokens(2 * 10, 64);
        let want = base.logits(&toks, 2, 10).unwrap();
        for stage in [RoaeStage::PreRope, RoaeStage::PostRope] {
            let mut m = base.clone();
            let rc = RoaeConfig { rank: 4, stage, ..RoaeConfig::default() };
            m.attach_roae(rc, &mut rng()).unwrap();
            assert_eq!(m.logits(&toks, 2, 10).unwrap().data(), want.data());
        }
        let mut m = base.clone();
        m.attach_lora(3, &mut rng()).unwrap();
        assert_eq!(m.logits(&toks, 2, 10).unwrap().data(), want.data());
    }

    #[test]
    fn single_token_attention_returns_value_projection() {
        let m = Model::<f64>::new(ModelConfig::toy(), &mut rng()).unwrap();
        let layer = &m.layers[0];
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_fn(&[1, 1, 32], |i| (i as f64 * 0.3).sin()));
        let tables = RopeTables::new(1, 8, 10000.0).unwrap();
        let out = m.attention(&mut g, h, h, layer, &tables, &[false], None).unwrap();
        let wv = g.param(&m.store, layer.wv);
        let v = g.matmul(h, wv).unwrap();
        let wo = g.param(&m.store, layer.wo);
        let want = g.matmul(v, wo).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(want).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weight_block_is_identity() {
        let mut m = Model::<f64>::new(ModelConfig::toy(), &mut rng()).unwrap();
        let l = m.layers[0].clone();
        for id in [l.wq, l.wk, l.wv, l.wo, l.w1, l.w2] {
            let p = m.store.get_mut(id);
            p.value = Tensor::zeros(p.value.shape());
        }
        let tables = RopeTables::new(5, 8, 10000.0).unwrap();
        let mask: Vec<bool> = (0..25).map(|i| i % 5 > i / 5).collect();
        let mut g = Graph::new();
        let x0 = Tensor::from_fn(&[2, 5, 32], |i| (i as f64 * 0.17).cos());
        let x = g.constant(x0.clone());
        let y = m.block(&mut g, x, &l, &tables, &mask, None).unwrap();
        assert_eq!(g.value(y), &x0);
    }

    #[test]
    fn causal_prefix_is_unaffected_by_future_tokens() {
        let m = Model::<f32>::new(ModelConfig::toy(), &mut rng()).unwrap();
        let mut toks = tokens(12, 64);
        let a = m.logits(&toks, 1, 12).unwrap();
        toks[9] = (toks[9] + 5) % 64;
        toks[11] = 0;
        let b = m.logits(&toks, 1, 12).unwrap();
        let cut = 9 * 64;
        assert_eq!(a.data()[..cut], b.data()[..cut]);
        assert_ne!(a.data()[cut..], b.data()[cut..]);
    }

    #[test]
    fn out_of_range_token_is_an_input_error() {
        let m = Model::<f32>::new(ModelConfig::toy(), &mut rng()).unwrap();
        assert!(matches!(m.logits(&[1, 64], 1, 2), Err(Error::Input(_))));
        assert!(matches!(m.logits(&vec![0; 65], 1, 65), Err(Error::Input(_))));
    }

    #[test]
    fn gqa_forward_shapes() {
        let cfg = ModelConfig { h_k: 2, ..ModelConfig::toy() };
        let mut m = Model::<f32>::new(cfg, &mut rng()).unwrap();
        let rc = RoaeConfig { rank: 4, ..RoaeConfig::default() };
        m.attach_roae(rc.clone(), &mut rng()).unwrap();
        let out = m.logits(&tokens(2 * 6, 64), 2, 6).unwrap();
        assert_eq!(out.shape(), &[2, 6, 64]);
        m.freeze_base();
        assert_eq!(m.count_parameters(true), crate::roae::roae_param_count(&m.cfg, &rc).unwrap());
    }
}
