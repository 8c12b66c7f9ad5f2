//! Low-frequency Q/K adapter.
//!
//! Each Q/K head vector is split into its two RoPE halves; the last `w`
//! dimensions of each half (the slowest-rotating pairs) are pulled out,
//! multiplied by `1 + alpha * S` where `S = silu(H · A · B)` is a
//! context-dependent signal, and written back in place. `B` starts at zero,
//! so a freshly attached adapter leaves the model unchanged.
//!
//! Weight layout note: matrices are stored input-major (`[in, out]`), so the
//! stored `A` is `[d, rank]` and `B` is `[rank, h_q·d_low]`.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Float, Graph, ParamId, Tensor, Var};

/// Where in the attention block the modulation is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoaeStage {
    PreRope,
    PostRope,
}

/// Which hidden state feeds the signal projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalSource {
    /// The normalized attention input (the tensor feeding `W_q`/`W_k`).
    Normalized,
    /// The un-normalized residual stream entering the block.
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoaeConfig {
    pub r_low: f64,
    pub alpha: f64,
    pub rank: usize,
    pub share_qk: bool,
    pub stage: RoaeStage,
    pub source: SignalSource,
}

impl Default for RoaeConfig {
    fn default() -> Self {
        RoaeConfig {
            r_low: 0.25,
            alpha: 0.1,
            rank: 128,
            share_qk: true,
            stage: RoaeStage::PreRope,
            source: SignalSource::Normalized,
        }
    }
}

impl RoaeConfig {
    /// Per-half slice width `w = d_h · r_low / 2`; must be a positive integer.
    pub fn half_width(&self, d_h: usize) -> Result<usize> {
        if !(self.r_low > 0.0 && self.r_low < 1.0) {
            return Err(Error::Config(format!("r_low must lie in (0, 1), got {}", self.r_low)));
        }
        let w = d_h as f64 * self.r_low / 2.0;
        let rounded = w.round();
        if rounded < 1.0 || (w - rounded).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "r_low = {} with d_h = {d_h} gives a per-half width of {w}; it must be a positive integer",
                self.r_low
            )));
        }
        Ok(rounded as usize)
    }

    /// `d_low = d_h · r_low`.
    pub fn d_low(&self, d_h: usize) -> Result<usize> {
        Ok(2 * self.half_width(d_h)?)
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.half_width(model.d_h)?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        Ok(())
    }
}

/// Positions of the low-frequency dimensions inside a head vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LowFreqMap {
    pub d_h: usize,
    pub width: usize,
}

impl LowFreqMap {
    pub fn new(d_h: usize, cfg: &RoaeConfig) -> Result<Self> {
        Ok(LowFreqMap {
            d_h,
            width: cfg.half_width(d_h)?,
        })
    }

    pub fn half(&self) -> usize {
        self.d_h / 2
    }

    pub fn d_low(&self) -> usize {
        2 * self.width
    }

    /// `{h-w .. h-1} ∪ {d_h-w .. d_h-1}` in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        let h = self.half();
        (h - self.width..h).chain(self.d_h - self.width..self.d_h).collect()
    }
}

fn check_width(g: &Graph<impl Float>, op: &'static str, v: Var, want: usize) -> Result<()> {
    let got = g.value(v).last_dim();
    if got != want {
        return Err(Error::shape(op, format!("last dim {got}, expected {want}")));
    }
    Ok(())
}

/// Gathers the low-frequency dimensions of `[.., d_h]` states into `[.., d_low]`.
pub fn extract_low_freq<F: Float>(g: &mut Graph<F>, states: Var, map: &LowFreqMap) -> Result<Var> {
    check_width(g, "extract_low_freq", states, map.d_h)?;
    let h = map.half();
    let lo = g.slice_last(states, h - map.width, h)?;
    let hi = g.slice_last(states, map.d_h - map.width, map.d_h)?;
    g.concat_last(&[lo, hi])
}

/// Writes `z_star` back into the mapped positions of `full`; every other
/// element is copied through unchanged.
pub fn reinsert<F: Float>(g: &mut Graph<F>, full: Var, z_star: Var, map: &LowFreqMap) -> Result<Var> {
    check_width(g, "reinsert", full, map.d_h)?;
    check_width(g, "reinsert", z_star, map.d_low())?;
    let (h, w, d_h) = (map.half(), map.width, map.d_h);
    let mut parts = Vec::with_capacity(4);
    if h > w {
        parts.push(g.slice_last(full, 0, h - w)?);
    }
    parts.push(g.slice_last(z_star, 0, w)?);
    if h > w {
        parts.push(g.slice_last(full, h, d_h - w)?);
    }
    parts.push(g.slice_last(z_star, w, 2 * w)?);
    g.concat_last(&parts)
}

/// `Z* = Z + Z ⊙ (alpha · S)`.
pub fn modulate<F: Float>(g: &mut Graph<F>, z: Var, s: Var, alpha: F) -> Result<Var> {
    if g.shape(z) != g.shape(s) {
        return Err(Error::shape(
            "modulate",
            format!("Z {:?} and S {:?} must have the same shape", g.shape(z), g.shape(s)),
        ));
    }
    let scaled = g.scale(s, alpha)?;
    let prod = g.mul(z, scaled)?;
    g.add(z, prod)
}

/// `silu((hidden · A) · B)`: `[b, l, d] -> [b, l, heads·d_low]`.
pub fn generate_signal<F: Float>(g: &mut Graph<F>, hidden: Var, a: Var, b: Var) -> Result<Var> {
    let d = g.value(hidden).last_dim();
    if g.shape(a).len() != 2 || g.shape(a)[0] != d || g.shape(b).len() != 2 || g.shape(b)[0] != g.shape(a)[1] {
        return Err(Error::Config(format!(
            "signal projection shapes {:?} x {:?} do not fit hidden width {d}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let low = g.matmul(hidden, a)?;
    let proj = g.matmul(low, b)?;
    g.silu(proj)
}

/// Maps the query-side signal `[b, l, h_q·d_low]` to the key side
/// `[b, l, h_k·d_low]`. Identity when the head counts match.
pub fn align_gqa<F: Float>(g: &mut Graph<F>, s_q: Var, w_gqa: Option<Var>, h_q: usize, h_k: usize) -> Result<Var> {
    match (h_q == h_k, w_gqa) {
        (true, _) => Ok(s_q),
        (false, None) => Err(Error::Config(format!(
            "grouped-query config (h_q = {h_q}, h_k = {h_k}) needs a W_GQA projection"
        ))),
        (false, Some(w)) => g.matmul(s_q, w),
    }
}

/// Splits `[b, l, h·x]` into heads `[b, h, l, x]`.
pub fn to_heads<F: Float>(t: &Tensor<F>, heads: usize) -> Result<Tensor<F>> {
    let [b, l, hx] = t.shape()[..] else {
        return Err(Error::shape("to_heads", format!("needs rank 3, got {:?}", t.shape())));
    };
    if hx % heads != 0 {
        return Err(Error::shape("to_heads", format!("{hx} is not divisible by {heads} heads")));
    }
    t.reshaped(&[b, l, heads, hx / heads])?.swap_axes_12()
}

/// Trainable tensors of one layer's adapter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoaeAdapter {
    pub a: ParamId,
    pub b: ParamId,
    /// Present iff `h_q != h_k` and the signal is shared between Q and K.
    pub w_gqa: Option<ParamId>,
    /// Separate key-side projection when `share_qk` is off.
    pub k_proj: Option<(ParamId, ParamId)>,
}

/// Additive low-rank deltas on the Q and K projections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoraAdapter {
    pub q_a: ParamId,
    pub q_b: ParamId,
    pub k_a: ParamId,
    pub k_b: ParamId,
}

/// Closed-form adapter size over all layers.
pub fn roae_param_count(model: &ModelConfig, cfg: &RoaeConfig) -> Result<usize> {
    let d_low = cfg.d_low(model.d_h)?;
    let q_out = model.h_q * d_low;
    let k_out = model.h_k * d_low;
    let per_layer = if cfg.share_qk {
        let gqa = if model.h_q != model.h_k { q_out * k_out } else { 0 };
        cfg.rank * model.d + cfg.rank * q_out + gqa
    } else {
        2 * cfg.rank * model.d + cfg.rank * q_out + cfg.rank * k_out
    };
    Ok(per_layer * model.n_layers)
}

/// Closed-form LoRA-on-Q/K size over all layers.
pub fn lora_param_count(model: &ModelConfig, rank: usize) -> usize {
    let q_out = model.h_q * model.d_h;
    let k_out = model.h_k * model.d_h;
    model.n_layers * (rank * (model.d + q_out) + rank * (model.d + k_out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(r_low: f64) -> RoaeConfig {
        RoaeConfig {
            r_low,
            ..RoaeConfig::default()
        }
    }

    fn toy() -> ModelConfig {
        ModelConfig::toy()
    }

    #[test]
    fn index_sets() {
        assert_eq!(LowFreqMap::new(8, &cfg(0.5)).unwrap().indices(), vec![2, 3, 6, 7]);
        assert_eq!(LowFreqMap::new(8, &cfg(0.25)).unwrap().indices(), vec![3, 7]);
    }

    #[test]
    fn fractional_width_is_rejected() {
        let err = cfg(0.25).half_width(4).unwrap_err().to_string();
        assert!(err.contains("r_low") && err.contains("d_h = 4"), "{err}");
        assert!(cfg(0.3).half_width(8).is_err());
        assert!(cfg(1.0).half_width(8).is_err());
        assert!(cfg(0.0).half_width(8).is_err());
    }

    #[test]
    fn extract_then_reinsert_round_trips() {
        let map = LowFreqMap::new(8, &cfg(0.5)).unwrap();
        let x = Tensor::<f64>::from_fn(&[2, 3, 5, 8], |i| (i as f64 * 0.731).sin());
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let z = extract_low_freq(&mut g, v, &map).unwrap();
        assert_eq!(g.shape(z), &[2, 3, 5, 4]);
        let back = reinsert(&mut g, v, z, &map).unwrap();
        assert_eq!(g.value(back), &x);
    }

    #[test]
    fn doubling_touches_exactly_the_mapped_indices() {
        let map = LowFreqMap::new(8, &cfg(0.25)).unwrap();
        let x = Tensor::<f64>::from_fn(&[4, 8], |i| i as f64 + 1.0);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let z = extract_low_freq(&mut g, v, &map).unwrap();
        let z2 = g.scale(z, 2.0).unwrap();
        let out = reinsert(&mut g, v, z2, &map).unwrap();
        let idx = map.indices();
        for (i, (&o, &orig)) in g.value(out).data().iter().zip(x.data()).enumerate() {
            if idx.contains(&(i % 8)) {
                assert_eq!(o, 2.0 * orig);
            } else {
                assert_eq!(o, orig);
            }
        }
    }

    #[test]
    fn modulate_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let s = g.constant(Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap());
        let out = modulate(&mut g, z, s, 0.1).unwrap();
        let v = g.value(out).data();
        assert!((v[0] - 1.1).abs() < 1e-15 && (v[1] - 2.2).abs() < 1e-15);

        let zero = g.constant(Tensor::zeros(&[2]));
        let same = modulate(&mut g, z, zero, 0.1).unwrap();
        assert_eq!(g.value(same).data(), &[1.0, 2.0]);
        let off = modulate(&mut g, z, s, 0.0).unwrap();
        assert_eq!(g.value(off).data(), &[1.0, 2.0]);

        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(modulate(&mut g, z, bad, 0.1), Err(Error::Shape { op: "modulate", .. })));
    }

    #[test]
    fn signal_scalar_chain() {
        // rank 1, d = 2, one token: silu((h·a)·b)
        let (h, a, b) = ([0.5, -2.0], [0.3, 0.4], [1.5, -0.5]);
        let mut g = Graph::new();
        let hv = g.constant(Tensor::<f64>::from_f64(&[1, 1, 2], &h).unwrap());
        let av = g.constant(Tensor::from_f64(&[2, 1], &a).unwrap());
        let bv = g.constant(Tensor::from_f64(&[1, 2], &b).unwrap());
        let s = generate_signal(&mut g, hv, av, bv).unwrap();
        let inner: f64 = 0.5 * 0.3 + -2.0 * 0.4; // -0.65
        for (j, &bj) in b.iter().enumerate() {
            let x = inner * bj;
            let want = x / (1.0 + (-x).exp());
            assert!((g.value(s).data()[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_b_gives_zero_signal() {
        let mut g = Graph::new();
        let hv = g.constant(Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64 - 5.0));
        let av = g.constant(Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1));
        let bv = g.constant(Tensor::zeros(&[3, 8]));
        let s = generate_signal(&mut g, hv, av, bv).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
        let heads = to_heads(g.value(s), 4).unwrap();
        assert_eq!(heads.shape(), &[2, 4, 3, 2]);
    }

    #[test]
    fn gqa_alignment() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::<f64>::from_fn(&[2, 3, 8], |i| i as f64));
        assert_eq!(align_gqa(&mut g, s, None, 4, 4).unwrap(), s);
        assert!(matches!(align_gqa(&mut g, s, None, 4, 2), Err(Error::Config(_))));

        let w = g.constant(Tensor::from_fn(&[8, 4], |i| (i as f64).cos()));
        let k = align_gqa(&mut g, s, Some(w), 4, 2).unwrap();
        assert_eq!(to_heads(g.value(k), 2).unwrap().shape(), &[2, 2, 3, 2]);

        let zero = g.constant(Tensor::zeros(&[2, 3, 8]));
        let kz = align_gqa(&mut g, zero, Some(w), 4, 2).unwrap();
        assert!(g.value(kz).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn budget_closed_form() {
        let c = RoaeConfig { rank: 4, ..cfg(0.25) };
        assert_eq!(roae_param_count(&toy(), &c).unwrap(), 320);
        let c = RoaeConfig { rank: 0, ..cfg(0.25) };
        assert_eq!(roae_param_count(&toy(), &c).unwrap(), 0);
    }

    #[test]
    fn budget_is_monotone() {
        let m = ModelConfig { d_h: 16, d: 64, ..toy() };
        let mut prev = 0;
        for rank in 1..10 {
            let n = roae_param_count(&m, &RoaeConfig { rank, ..cfg(0.25) }).unwrap();
            assert!(n > prev);
            prev = n;
        }
        let counts: Vec<usize> = [0.125, 0.25, 0.5, 0.75]
            .iter()
            .map(|&r| roae_param_count(&m, &RoaeConfig { rank: 4, ..cfg(r) }).unwrap())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    }

    #[test]
    fn lora_budget_closed_form() {
        // 2 · rank · (d + d_out) per layer when h_q == h_k
        assert_eq!(lora_param_count(&toy(), 3), 2 * 2 * 3 * (32 + 32));
    }
}
