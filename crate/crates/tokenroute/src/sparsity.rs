//! Scheduled token pruning for the LLM stack: a shifted-cosine retention
//! schedule over depth, a per-token scoring MLP, and percentile
//! thresholding that keeps exactly ⌈β·M⌉ tokens.
//!
//! β_l is the *retention* ratio at layer l (the fraction of visual tokens
//! that stay active); early layers retain most tokens, deep layers few.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{GeluMlp, NodeId, ParamStore, Tape};

/// β_l = clamp(½·cos(π·l/L) + η, lo, hi) for l in 1..=L.
pub fn schedule_beta(l: usize, depth: usize, eta: f64, lo: f64, hi: f64) -> Result<f64> {
    if depth == 0 {
        return Err(Error::contract("schedule_beta", "depth must be positive"));
    }
    if l == 0 || l > depth {
        return Err(Error::contract(
            "schedule_beta",
            format!("layer index {l} outside 1..={depth}"),
        ));
    }
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(Error::contract("schedule_beta", format!("clamp [{lo}, {hi}]")));
    }
    let raw = 0.5 * (std::f64::consts::PI * l as f64 / depth as f64).cos() + eta;
    Ok(raw.clamp(lo, hi))
}

/// Precomputed per-layer retention ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsitySchedule {
    betas: Vec<f64>,
}

impl SparsitySchedule {
    pub fn new(depth: usize, eta: f64, lo: f64, hi: f64) -> Result<Self> {
        let betas = (1..=depth)
            .map(|l| schedule_beta(l, depth, eta, lo, hi))
            .collect::<Result<Vec<_>>>()?;
        Ok(SparsitySchedule { betas })
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        Self::new(cfg.llm_depth, cfg.eta, cfg.clamp_lo, cfg.clamp_hi)
    }

    pub fn depth(&self) -> usize {
        self.betas.len()
    }

    /// β at 1-based layer l.
    pub fn beta(&self, l: usize) -> Result<f64> {
        self.betas
            .get(l.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::contract("beta", format!("layer {l} outside 1..={}", self.depth())))
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn mean_beta(&self) -> f64 {
        self.betas.iter().sum::<f64>() / self.betas.len() as f64
    }

    /// β ≡ 1 everywhere: the pruning machinery is disabled outright.
    pub fn is_identity(&self) -> bool {
        self.betas.iter().all(|&b| b == 1.0)
    }

    /// Stage-2 compute reduction factor, 1/mean(β).
    pub fn stage2_factor(&self) -> f64 {
        1.0 / self.mean_beta()
    }

    /// Retained token count at 1-based layer l out of m visual tokens,
    /// honoring the literal-percentile switch.
    pub fn retained_count(&self, l: usize, m: usize, literal: bool) -> Result<usize> {
        let beta = self.beta(l)?;
        let frac = if literal { 1.0 - beta } else { beta };
        Ok(retain_count(frac, m))
    }
}

/// ⌈frac·m⌉, clamped into 1..=m so a layer never empties its visual set.
pub fn retain_count(frac: f64, m: usize) -> usize {
    let k = (frac * m as f64).ceil() as usize;
    k.clamp(1, m)
}

/// Indices of the `keep` highest scores, ascending. The threshold sits at
/// the (1−β) quantile of the score distribution; ties at the cut go to the
/// lower token index.
pub fn percentile_threshold(scores: &[f64], keep: usize) -> Result<Vec<usize>> {
    let m = scores.len();
    if m == 0 {
        return Err(Error::contract("percentile_threshold", "no scores"));
    }
    if keep == 0 || keep > m {
        return Err(Error::contract(
            "percentile_threshold",
            format!("keep {keep} outside 1..={m}"),
        ));
    }
    if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { context: format!("routing score at index {bad}") });
    }
    let mut order: Vec<usize> = (0..m).collect();
    // Descending score; ascending index on exact ties.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Per-token routing scores: a two-layer GeLU perceptron applied row-wise,
/// raw linear output (no squashing — only the order matters).
#[derive(Debug, Clone, Copy)]
pub struct Router {
    mlp: GeluMlp,
}

impl Router {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Router { mlp: GeluMlp::new(store, prefix, d, hidden, 1, rng)? })
    }

    /// [M,d] → [M,1] scores.
    pub fn scores(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        self.mlp.apply(tape, store, x)
    }
}

/// Per-layer instruction conditioning for the LLM stack: γ and β come from
/// two-layer GeLU MLPs over the pooled instruction embedding.
#[derive(Debug, Clone, Copy)]
pub struct FilmLlm {
    scale: GeluMlp,
    shift: GeluMlp,
}

impl FilmLlm {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(FilmLlm {
            scale: GeluMlp::new(store, &format!("{prefix}.scale"), d, hidden, d, rng)?,
            shift: GeluMlp::new(store, &format!("{prefix}.shift"), d, hidden, d, rng)?,
        })
    }

    /// pooled [1,d] → (γ [1,d], β [1,d]).
    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pooled: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let g = self.scale.apply(tape, store, pooled)?;
        let b = self.shift.apply(tape, store, pooled)?;
        Ok((g, b))
    }
}

/// (1+γ)⊙x + β with γ, β broadcast down rows.
pub fn film_modulate(tape: &mut Tape, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
    let scaled = tape.mul_row_vec(x, gamma)?;
    let plus = tape.add(x, scaled)?;
    tape.add_row_vec(plus, beta)
}
