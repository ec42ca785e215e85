//! Model/trainer configuration: flat key=value text files, canonical
//! serialization (key-sorted, one per line), and validation that runs
//! before any compute is attempted.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Full configuration for the toy pipeline. Paper-scale values are accepted
/// by the same struct for ledger-only runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// LLM stack width.
    pub d_model: usize,
    /// Encoder branch widths (branch 1 may differ; toy branches are symmetric).
    pub enc_dim: usize,
    pub enc_dim2: usize,
    pub enc_depth: usize,
    pub enc_depth2: usize,
    pub enc_ffn: usize,
    pub enc_ffn2: usize,
    /// Tie one set of encoder FiLM maps across blocks instead of per-block maps.
    pub enc_film_shared: bool,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Width of rendered patch features (the frozen projection output).
    pub patch_feat: usize,
    /// Aggregation tokens per branch; 0 disables stage 1 entirely
    /// (passthrough: all patch tokens from both branches enter the LLM).
    pub agg_tokens: usize,
    pub llm_depth: usize,
    pub llm_ffn: usize,
    /// Hidden width of the per-layer γ/β MLPs (4·d at toy scale).
    pub film_hidden: usize,
    pub router_hidden: usize,
    pub gate_hidden: usize,
    /// Retention schedule offset η.
    pub eta: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    /// Actions per chunk (K).
    pub chunk_len: usize,
    /// Coordinates per action (D); 3 = (dx, dy, gripper), 7 adds rotation.
    pub action_dim: usize,
    pub vocab_size: usize,
    /// Instruction length after padding (T).
    pub instr_len: usize,
    /// Retain the top ⌈β·M⌉ scores (false) or the literal top ⌈(1−β)·M⌉
    /// reading of the percentile threshold (true).
    pub prune_literal_percentile: bool,
    /// Keep pruned visual tokens visible as attention keys.
    pub pruned_keys_visible: bool,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            enc_dim: 64,
            enc_dim2: 64,
            enc_depth: 1,
            enc_depth2: 1,
            enc_ffn: 128,
            enc_ffn2: 128,
            enc_film_shared: false,
            grid_h: 4,
            grid_w: 4,
            patch_feat: 16,
            agg_tokens: 4,
            llm_depth: 4,
            llm_ffn: 128,
            film_hidden: 256,
            router_hidden: 64,
            gate_hidden: 64,
            eta: 0.5,
            clamp_lo: 0.05,
            clamp_hi: 0.85,
            chunk_len: 4,
            action_dim: 3,
            vocab_size: 32,
            instr_len: 4,
            prune_literal_percentile: false,
            pruned_keys_visible: false,
            seed: 0,
            lr: 3e-4,
            batch_size: 4,
        }
    }
}

impl ModelConfig {
    /// Patches per branch.
    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn passthrough(&self) -> bool {
        self.agg_tokens == 0
    }

    /// Visual tokens entering the LLM stack.
    pub fn visual_tokens(&self) -> usize {
        if self.passthrough() {
            2 * self.patches()
        } else {
            self.agg_tokens
        }
    }

    /// Stage-1 token reduction factor: (2·P)/G for two branches fused to G
    /// tokens, 1 for passthrough.
    pub fn stage1_factor(&self) -> f64 {
        2.0 * self.patches() as f64 / self.visual_tokens() as f64
    }

    pub fn action_tokens(&self) -> usize {
        self.chunk_len * self.action_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(usize, &str); 14] = [
            (self.d_model, "d_model"),
            (self.enc_dim, "enc_dim"),
            (self.enc_dim2, "enc_dim2"),
            (self.enc_depth, "enc_depth"),
            (self.enc_depth2, "enc_depth2"),
            (self.enc_ffn, "enc_ffn"),
            (self.enc_ffn2, "enc_ffn2"),
            (self.grid_h, "grid_h"),
            (self.grid_w, "grid_w"),
            (self.patch_feat, "patch_feat"),
            (self.llm_depth, "llm_depth"),
            (self.llm_ffn, "llm_ffn"),
            (self.chunk_len, "chunk_len"),
            (self.action_dim, "action_dim"),
        ];
        for (v, name) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model < 2 || self.enc_dim < 2 || self.enc_dim2 < 2 {
            return Err(Error::Config("model widths must be at least 2 for layer norm".into()));
        }
        for (v, name) in [
            (self.film_hidden, "film_hidden"),
            (self.router_hidden, "router_hidden"),
            (self.gate_hidden, "gate_hidden"),
            (self.instr_len, "instr_len"),
            (self.batch_size, "batch_size"),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.agg_tokens > self.patches() {
            return Err(Error::Config(format!(
                "agg_tokens {} exceeds patches per branch {}",
                self.agg_tokens,
                self.patches()
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2 (0 is the pad id)".into()));
        }
        if !(self.eta.is_finite() && self.clamp_lo.is_finite() && self.clamp_hi.is_finite()) {
            return Err(Error::Config("schedule values must be finite".into()));
        }
        if !(0.0 < self.clamp_lo && self.clamp_lo <= self.clamp_hi && self.clamp_hi <= 1.0) {
            return Err(Error::Config(format!(
                "clamp range [{}, {}] must satisfy 0 < lo <= hi <= 1",
                self.clamp_lo, self.clamp_hi
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("lr must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Canonical key-sorted key=value block, one entry per line. This is the
    /// exact text embedded in checkpoints, so formatting must round-trip.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        // Alphabetical by key.
        vec![
            ("action_dim", self.action_dim.to_string()),
            ("agg_tokens", self.agg_tokens.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("chunk_len", self.chunk_len.to_string()),
            ("clamp_hi", format!("{:?}", self.clamp_hi)),
            ("clamp_lo", format!("{:?}", self.clamp_lo)),
            ("d_model", self.d_model.to_string()),
            ("enc_depth", self.enc_depth.to_string()),
            ("enc_depth2", self.enc_depth2.to_string()),
            ("enc_dim", self.enc_dim.to_string()),
            ("enc_dim2", self.enc_dim2.to_string()),
            ("enc_ffn", self.enc_ffn.to_string()),
            ("enc_ffn2", self.enc_ffn2.to_string()),
            ("enc_film_shared", self.enc_film_shared.to_string()),
            ("eta", format!("{:?}", self.eta)),
            ("film_hidden", self.film_hidden.to_string()),
            ("gate_hidden", self.gate_hidden.to_string()),
            ("grid_h", self.grid_h.to_string()),
            ("grid_w", self.grid_w.to_string()),
            ("instr_len", self.instr_len.to_string()),
            ("llm_depth", self.llm_depth.to_string()),
            ("llm_ffn", self.llm_ffn.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("patch_feat", self.patch_feat.to_string()),
            ("prune_literal_percentile", self.prune_literal_percentile.to_string()),
            ("pruned_keys_visible", self.pruned_keys_visible.to_string()),
            ("router_hidden", self.router_hidden.to_string()),
            ("seed", self.seed.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
        ]
    }

    /// Parse key=value lines ('#' starts a comment, blank lines skipped) on
    /// top of defaults. Unknown keys are errors so typos surface instead of
    /// silently reverting a field to its default.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        cfg.apply(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            self.set(key.trim(), val.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, val: &str) -> Result<()> {
        fn us(v: &str) -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("bad integer {v:?}")))
        }
        fn fl(v: &str) -> Result<f64> {
            v.parse().map_err(|_| Error::Config(format!("bad float {v:?}")))
        }
        fn bo(v: &str) -> Result<bool> {
            v.parse().map_err(|_| Error::Config(format!("bad bool {v:?}")))
        }
        match key {
            "action_dim" => self.action_dim = us(val)?,
            "agg_tokens" => self.agg_tokens = us(val)?,
            "batch_size" => self.batch_size = us(val)?,
            "chunk_len" => self.chunk_len = us(val)?,
            "clamp_hi" => self.clamp_hi = fl(val)?,
            "clamp_lo" => self.clamp_lo = fl(val)?,
            "d_model" => self.d_model = us(val)?,
            "enc_depth" => self.enc_depth = us(val)?,
            "enc_depth2" => self.enc_depth2 = us(val)?,
            "enc_dim" => self.enc_dim = us(val)?,
            "enc_dim2" => self.enc_dim2 = us(val)?,
            "enc_ffn" => self.enc_ffn = us(val)?,
            "enc_ffn2" => self.enc_ffn2 = us(val)?,
            "enc_film_shared" => self.enc_film_shared = bo(val)?,
            "eta" => self.eta = fl(val)?,
            "film_hidden" => self.film_hidden = us(val)?,
            "gate_hidden" => self.gate_hidden = us(val)?,
            "grid_h" => self.grid_h = us(val)?,
            "grid_w" => self.grid_w = us(val)?,
            "instr_len" => self.instr_len = us(val)?,
            "llm_depth" => self.llm_depth = us(val)?,
            "llm_ffn" => self.llm_ffn = us(val)?,
            "lr" => self.lr = fl(val)?,
            "patch_feat" => self.patch_feat = us(val)?,
            "prune_literal_percentile" => self.prune_literal_percentile = bo(val)?,
            "pruned_keys_visible" => self.pruned_keys_visible = bo(val)?,
            "router_hidden" => self.router_hidden = us(val)?,
            "seed" => self.seed = val.parse().map_err(|_| Error::Config(format!("bad seed {val:?}")))?,
            "vocab_size" => self.vocab_size = us(val)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Dense reference: stage 1 off (passthrough) and the identity schedule,
    /// which disables the pruning machinery entirely.
    pub fn dense_variant(&self) -> Self {
        let mut c = self.clone();
        c.agg_tokens = 0;
        c.clamp_lo = 1.0;
        c.clamp_hi = 1.0;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn canonical_round_trips() {
        let mut cfg = ModelConfig::default();
        cfg.eta = 0.667;
        cfg.agg_tokens = 8;
        cfg.lr = 3e-4;
        let text = cfg.canonical();
        let back = ModelConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.canonical());
    }

    #[test]
    fn canonical_is_key_sorted() {
        let text = ModelConfig::default().canonical();
        let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = ModelConfig::parse("# header\n\nagg_tokens = 8 # eight\n").unwrap();
        assert_eq!(cfg.agg_tokens, 8);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(ModelConfig::parse("no_such_key=1").is_err());
    }

    #[test]
    fn inconsistent_dims_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.agg_tokens = 99;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.clamp_lo = 0.9;
        cfg.clamp_hi = 0.2;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.clamp_lo = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage1_factor_consistent_with_grid() {
        let cfg = ModelConfig::default();
        // 2·16 patches fused to 4 tokens.
        assert_eq!(cfg.stage1_factor(), 8.0);
        let dense = cfg.dense_variant();
        assert_eq!(dense.stage1_factor(), 1.0);
        assert_eq!(dense.visual_tokens(), 32);
    }
}
