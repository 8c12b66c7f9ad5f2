//! Dynamic layer selection: score layers by the gradient norms of their
//! normalization gains, keep the top `k` (or a random `k`), and zero the
//! gradients of everything else.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Float, Param, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DlsConfig {
    pub k_ratio: f64,
    pub p_exploit: f64,
    pub interval_u: u64,
    pub warmup_steps: u64,
}

impl Default for DlsConfig {
    fn default() -> Self {
        DlsConfig {
            k_ratio: 0.5,
            p_exploit: 0.8,
            interval_u: 40,
            warmup_steps: 100,
        }
    }
}

impl DlsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_ratio > 0.0 && self.k_ratio <= 1.0) {
            return Err(Error::Config(format!("k_ratio must lie in (0, 1], got {}", self.k_ratio)));
        }
        if !(0.0..=1.0).contains(&self.p_exploit) {
            return Err(Error::Config(format!("p_exploit must lie in [0, 1], got {}", self.p_exploit)));
        }
        if self.interval_u == 0 {
            return Err(Error::Config("interval_u must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of active layers, `ceil(k_ratio * L)`, at least 1.
    pub fn k(&self, n_layers: usize) -> usize {
        ((self.k_ratio * n_layers as f64).ceil() as usize).clamp(1, n_layers.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    Warmup,
    Exploit,
    Explore,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::Warmup => "warmup",
            SelectionMode::Exploit => "exploit",
            SelectionMode::Explore => "explore",
        })
    }
}

impl SelectionMode {
    pub fn code(self) -> u64 {
        self as u64
    }

    pub fn from_code(c: u64) -> Option<Self> {
        [SelectionMode::Warmup, SelectionMode::Exploit, SelectionMode::Explore]
            .get(c as usize)
            .copied()
    }
}

/// One selection event, as written to `selection.log`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionEvent {
    pub step: u64,
    pub mode: SelectionMode,
    pub scores: Vec<f64>,
    pub selected: BTreeSet<usize>,
}

impl fmt::Display for SelectionEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let scores: Vec<String> = self.scores.iter().map(|s| format!("{s:.6e}")).collect();
        let chosen: Vec<String> = self.selected.iter().map(usize::to_string).collect();
        write!(
            f,
            "step={} mode={} scores=[{}] selected=[{}]",
            self.step,
            self.mode,
            scores.join(","),
            chosen.join(",")
        )
    }
}

#[derive(Debug, Clone)]
pub struct DlsState {
    pub cfg: DlsConfig,
    pub n_layers: usize,
    pub selected: BTreeSet<usize>,
    pub last_scores: Vec<f64>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub last_mode: SelectionMode,
}

impl DlsState {
    pub fn new(cfg: DlsConfig, n_layers: usize, rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if n_layers == 0 {
            return Err(Error::Config("layer selection needs at least one layer".into()));
        }
        Ok(DlsState {
            cfg,
            n_layers,
            selected: (0..n_layers).collect(),
            last_scores: vec![0.0; n_layers],
            step: 0,
            rng,
            last_mode: SelectionMode::Warmup,
        })
    }

    pub fn seeded(cfg: DlsConfig, n_layers: usize, seed: u64) -> Result<Self> {
        Self::new(cfg, n_layers, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn is_active(&self, layer: usize) -> bool {
        self.selected.contains(&layer)
    }

    /// True for a trainable tensor that belongs to an inactive layer.
    pub fn is_masked<F>(&self, p: &Param<F>) -> bool {
        p.trainable && p.layer.is_some_and(|l| !self.is_active(l))
    }

    pub fn k(&self) -> usize {
        self.cfg.k(self.n_layers)
    }
}

/// `sqrt(|g_attn|^2 + |g_ffn|^2)`.
pub fn layer_score<F: Float>(attn_gain_grad: &[F], ffn_gain_grad: &[F]) -> f64 {
    let sq = |v: &[F]| v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
    (sq(attn_gain_grad) + sq(ffn_gain_grad)).sqrt()
}

/// Scores every layer from the gradients currently held by the store.
pub fn model_scores<F: Float>(model: &Model<F>) -> Result<Vec<f64>> {
    let grad = |id| -> Result<&Tensor<F>> {
        let p = model.store.get(id);
        p.grad.as_ref().ok_or_else(|| {
            Error::Scoring(format!(
                "no gradient for {}; norm gains must keep requires_grad while frozen",
                p.name
            ))
        })
    };
    (0..model.cfg.n_layers)
        .map(|i| {
            let (a, f) = model.norm_gains(i);
            Ok(layer_score(grad(a)?.data(), grad(f)?.data()))
        })
        .collect()
}

/// Draws the exploit/explore coin, then picks `k` layers.
pub fn select_layers(
    scores: &[f64],
    cfg: &DlsConfig,
    rng: &mut impl Rng,
) -> (BTreeSet<usize>, SelectionMode) {
    let n = scores.len();
    let k = cfg.k(n);
    let u: f64 = rng.random();
    if u < cfg.p_exploit {
        (top_k(scores, k), SelectionMode::Exploit)
    } else {
        (sample(rng, n, k).into_iter().collect(), SelectionMode::Explore)
    }
}

/// Highest `k` scores; equal scores prefer the lower index.
pub fn top_k(scores: &[f64], k: usize) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.into_iter().take(k).collect()
}

/// Zeroes the gradient of every trainable tensor outside `selected`.
pub fn mask_gradients<F: Float>(model: &mut Model<F>, selected: &BTreeSet<usize>) {
    for (_, p) in model.store.iter_mut() {
        if p.trainable && p.layer.is_some_and(|l| !selected.contains(&l)) {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = F::zero());
            }
        }
    }
}

/// Runs the schedule for `step` (1-based) and masks the current gradients.
/// Returns the event when a selection fired.
pub fn dls_step<F: Float>(
    state: &mut DlsState,
    step: u64,
    model: &mut Model<F>,
) -> Result<Option<SelectionEvent>> {
    state.step = step;
    let mut event = None;
    if step <= state.cfg.warmup_steps {
        state.selected = (0..state.n_layers).collect();
        state.last_mode = SelectionMode::Warmup;
    } else if step.is_multiple_of(state.cfg.interval_u) {
        let scores = model_scores(model)?;
        let (selected, mode) = select_layers(&scores, &state.cfg, &mut state.rng);
        state.selected = selected;
        state.last_scores = scores;
        state.last_mode = mode;
        event = Some(SelectionEvent {
            step,
            mode,
            scores: state.last_scores.clone(),
            selected: state.selected.clone(),
        });
    }
    mask_gradients(model, &state.selected);
    Ok(event)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::roae::RoaeConfig;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    fn forced(p: f64) -> DlsConfig {
        DlsConfig { p_exploit: p, ..DlsConfig::default() }
    }

    #[test]
    fn score_examples() {
        assert_eq!(layer_score::<f64>(&[0.0; 4], &[0.0; 4]), 0.0);
        assert_eq!(layer_score(&[3.0f64, 0.0], &[0.0, 4.0]), 5.0);
        let a: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..32).map(|i| (i as f64 * 1.3).cos() * 2.0).collect();
        let mut naive = 0.0;
        for x in a.iter().chain(&b) {
            naive += x * x;
        }
        assert!((layer_score(&a, &b) - naive.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn forced_exploit_picks_top_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, m) = select_layers(&[1.0, 2.0, 3.0, 4.0], &forced(1.0), &mut rng);
        assert_eq!((s, m), (set(&[3, 2]), SelectionMode::Exploit));
        let (s, _) = select_layers(&[0.5; 4], &forced(1.0), &mut rng);
        assert_eq!(s, set(&[0, 1]));
    }

    #[test]
    fn forced_explore_is_seeded() {
        let pick = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| select_layers(&[0.0; 6], &forced(0.0), &mut rng))
                .collect::<Vec<_>>()
        };
        let a = pick(4);
        assert_eq!(a, pick(4));
        for (s, m) in &a {
            assert_eq!(*m, SelectionMode::Explore);
            assert_eq!(s.len(), 3);
            assert!(s.iter().all(|&i| i < 6));
        }
        assert!(a.iter().any(|(s, _)| *s != a[0].0));
    }

    #[test]
    fn k_rounds_up_and_is_at_least_one() {
        let c = |r| DlsConfig { k_ratio: r, ..DlsConfig::default() };
        assert_eq!(c(0.5).k(2), 1);
        assert_eq!(c(0.5).k(3), 2);
        assert_eq!(c(0.01).k(4), 1);
        assert_eq!(c(1.0).k(4), 4);
    }

    #[test]
    fn config_validation() {
        assert!(DlsConfig { k_ratio: 0.0, ..DlsConfig::default() }.validate().is_err());
        assert!(DlsConfig { k_ratio: 1.5, ..DlsConfig::default() }.validate().is_err());
        assert!(DlsConfig { p_exploit: -0.1, ..DlsConfig::default() }.validate().is_err());
        assert!(DlsConfig { interval_u: 0, ..DlsConfig::default() }.validate().is_err());
        assert!(DlsConfig::default().validate().is_ok());
    }

    fn model_with_grads() -> Model<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig { n_layers: 4, ..ModelConfig::toy() };
        let mut m = Model::<f64>::new(cfg, &mut rng).unwrap();
        m.attach_roae(RoaeConfig { rank: 4, ..RoaeConfig::default() }, &mut rng).unwrap();
        m.freeze_base();
        let toks: Vec<usize> = (0..16).map(|i| (i * 11 + 2) % 64).collect();
        m.loss_and_backward(&toks, &toks, None, 2, 8).unwrap();
        m
    }

    #[test]
    fn masking_zeroes_exactly_the_unselected_adapters() {
        let mut m = model_with_grads();
        let before = m.clone();
        mask_gradients(&mut m, &(0..4).collect());
        for ((_, a), (_, b)) in m.store.iter().zip(before.store.iter()) {
            assert_eq!(a.grad, b.grad);
        }
        let keep = set(&[1, 3]);
        mask_gradients(&mut m, &keep);
        for (_, p) in m.store.iter() {
            if !p.trainable {
                continue;
            }
            let zero = p.grad.as_ref().unwrap().max_abs() == 0.0;
            let layer = p.layer.unwrap();
            if keep.contains(&layer) {
                // B starts at zero, so the A gradient vanishes; B's does not
                if p.name.ends_with(".b") {
                    assert!(!zero, "{}", p.name);
                }
            } else {
                assert!(zero, "{}", p.name);
            }
        }
        mask_gradients(&mut m, &BTreeSet::new());
        assert!(m.store.iter().filter(|(_, p)| p.trainable).all(|(_, p)| p.grad.as_ref().unwrap().max_abs() == 0.0));
    }

    #[test]
    fn missing_gain_gradient_is_a_scoring_error() {
        let mut m = model_with_grads();
        let (a, _) = m.norm_gains(2);
        m.store.get_mut(a).grad = None;
        assert!(matches!(model_scores(&m), Err(Error::Scoring(_))));
    }

    #[test]
    fn schedule_fires_on_interval_after_warmup() {
        let mut m = model_with_grads();
        let cfg = DlsConfig { warmup_steps: 100, interval_u: 40, ..DlsConfig::default() };
        let mut state = DlsState::seeded(cfg, 4, 9).unwrap();
        let grads: Vec<_> = m.store.iter().map(|(_, p)| p.grad.clone()).collect();
        let mut fired = Vec::new();
        let mut prev = state.selected.clone();
        for step in 1..=300 {
            for ((_, p), g) in m.store.iter_mut().zip(&grads) {
                p.grad = g.clone();
            }
            let ev = dls_step(&mut state, step, &mut m).unwrap();
            if step <= 100 {
                assert_eq!(state.selected.len(), 4);
                assert_eq!(state.last_mode, SelectionMode::Warmup);
            } else if step >= 120 {
                assert_eq!(state.selected.len(), 2);
            }
            match ev {
                Some(e) => fired.push(e.step),
                None => assert_eq!(state.selected, prev),
            }
            prev = state.selected.clone();
        }
        assert_eq!(fired, vec![120, 160, 200, 240, 280]);
    }

    #[test]
    fn exploit_rate_matches_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let cfg = DlsConfig::default();
        let scores = [0.3, 0.1, 0.7, 0.2];
        let exploits = (0..1000)
            .filter(|_| select_layers(&scores, &cfg, &mut rng).1 == SelectionMode::Exploit)
            .count();
        assert!((exploits as f64 / 1000.0 - 0.8).abs() <= 0.04, "{exploits}");
    }

    #[test]
    fn event_line_format() {
        let e = SelectionEvent {
            step: 40,
            mode: SelectionMode::Exploit,
            scores: vec![0.5, 2.0],
            selected: set(&[1]),
        };
        assert_eq!(e.to_string(), "step=40 mode=exploit scores=[5.000000e-1,2.000000e0] selected=[1]");
    }
}
