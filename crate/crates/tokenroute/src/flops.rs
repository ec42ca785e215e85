//! Analytic multiply accounting for the full pipeline, mirroring the tape's
//! instrumented counter exactly: every matmul [m,k]·[k,n] contributes
//! 2·m·k·n (multiply + add), and nothing else counts — softmax, layer norm,
//! GeLU, and elementwise work are excluded by convention. Because both sides
//! use the same convention, analytic totals can be asserted *equal* to
//! `Tape::flops()` after a forward pass, not merely close.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::sparsity::SparsitySchedule;

/// Cost of one matmul [m,k]·[k,n] under the 2·m·k·n convention.
pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * m as u64 * k as u64 * n as u64
}

/// Per-component multiply counts for one forward pass of one sample.
///
/// `encoders` is the plain transformer cost of both branches (input/output
/// projections, attention, feed-forward). `overhead` collects everything
/// that exists only for instruction conditioning and routing: the encoder
/// γ/β maps, the branch fusion gate, and the per-layer LLM γ/β maps and
/// routers. The dense reference model has zero overhead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopsReport {
    pub encoders: u64,
    pub llm_attention: u64,
    pub llm_ffn: u64,
    pub overhead: u64,
    pub head: u64,
}

impl FlopsReport {
    pub fn total(&self) -> u64 {
        self.encoders + self.llm_attention + self.llm_ffn + self.overhead + self.head
    }

    /// Attention + feed-forward cost of the LLM stack alone.
    pub fn llm_stage(&self) -> u64 {
        self.llm_attention + self.llm_ffn
    }

    pub fn total_without_encoders(&self) -> u64 {
        self.total() - self.encoders
    }
}

/// Token-reduction factors of the two sparsification stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageBreakdown {
    /// Visual-token reduction into the LLM: (2·P)/M.
    pub stage1: f64,
    /// LLM-layer retention reduction: 1/mean(β).
    pub stage2: f64,
}

impl StageBreakdown {
    pub fn product(&self) -> f64 {
        self.stage1 * self.stage2
    }
}

pub fn stage_breakdown(cfg: &ModelConfig) -> Result<StageBreakdown> {
    cfg.validate()?;
    let schedule = SparsitySchedule::from_config(cfg)?;
    Ok(StageBreakdown { stage1: cfg.stage1_factor(), stage2: schedule.stage2_factor() })
}

/// Reported versus realized visual-token reduction. `claimed` is the
/// stage product stage1 × 1/mean β; `counted` divides the dense stack's
/// processed visual rows (2·P per layer) by the retained rows the
/// schedule actually grants (integers, via ceil). The two agree to
/// within the rounding slack — under 2% at realistic widths, looser when
/// a toy-narrow G makes each ceil worth a large fraction of a row.
pub fn token_reduction_bookkeeping(cfg: &ModelConfig) -> Result<(f64, f64)> {
    let breakdown = stage_breakdown(cfg)?;
    let schedule = SparsitySchedule::from_config(cfg)?;
    let m = cfg.visual_tokens();
    let dense_rows = (2 * cfg.patches() * cfg.llm_depth) as f64;
    let mut sparse_rows = 0usize;
    for l in 1..=cfg.llm_depth {
        sparse_rows += schedule.retained_count(l, m, cfg.prune_literal_percentile)?;
    }
    Ok((breakdown.product(), dense_rows / sparse_rows as f64))
}

/// One encoder block over a sequence of `s` rows at width `e`: the four
/// attention projections, the two attention matmuls, and the two FFN maps.
fn encoder_block_flops(s: usize, e: usize, ffn: usize) -> u64 {
    4 * matmul_flops(s, e, e)
        + matmul_flops(s, e, s)
        + matmul_flops(s, s, e)
        + matmul_flops(s, e, ffn)
        + matmul_flops(s, ffn, e)
}

/// One branch: (plain transformer cost, γ/β conditioning cost).
fn branch_flops(
    patches: usize,
    patch_feat: usize,
    e: usize,
    ffn: usize,
    depth: usize,
    agg: usize,
    d_model: usize,
) -> (u64, u64) {
    let s = patches + agg;
    let out_rows = if agg > 0 { agg } else { patches };
    let plain = matmul_flops(patches, patch_feat, e)
        + depth as u64 * encoder_block_flops(s, e, ffn)
        + matmul_flops(out_rows, e, d_model);
    // γ and β are each one linear map of the pooled instruction, per block.
    let film = if agg > 0 { depth as u64 * 2 * matmul_flops(1, d_model, e) } else { 0 };
    (plain, film)
}

/// One LLM block update with `nq` query rows and `nk` key rows.
fn llm_layer_flops(nq: usize, nk: usize, d: usize, ffn: usize) -> (u64, u64) {
    let att = matmul_flops(nq, d, d)       // q projection
        + 2 * matmul_flops(nk, d, d)       // k and v projections
        + matmul_flops(nq, d, nk)          // scores
        + matmul_flops(nq, nk, d)          // weighted values
        + matmul_flops(nq, d, d);          // output projection
    let f = matmul_flops(nq, d, ffn) + matmul_flops(nq, ffn, d);
    (att, f)
}

/// Per-layer conditioning cost in the sparse stack: two γ/β MLPs over the
/// pooled instruction plus the routing MLP over all M visual rows.
fn routing_overhead_flops(m: usize, d: usize, film_hidden: usize, router_hidden: usize) -> u64 {
    2 * (matmul_flops(1, d, film_hidden) + matmul_flops(1, film_hidden, d))
        + matmul_flops(m, d, router_hidden)
        + matmul_flops(m, router_hidden, 1)
}

/// Stack cost for one pass with `kd` action rows appended:
/// (attention, ffn, overhead). The identity schedule runs plain blocks over
/// the full sequence; otherwise layer l queries its ⌈β_l·M⌉ retained rows
/// plus instruction and action rows, and keys match queries unless pruned
/// rows stay visible.
fn stack_flops(
    cfg: &ModelConfig,
    schedule: &SparsitySchedule,
    m: usize,
    kd: usize,
) -> Result<(u64, u64, u64)> {
    let t = cfg.instr_len;
    let (mut att, mut ffn, mut over) = (0u64, 0u64, 0u64);
    for l in 1..=schedule.depth() {
        if schedule.is_identity() {
            let s = m + t + kd;
            let (a, f) = llm_layer_flops(s, s, cfg.d_model, cfg.llm_ffn);
            att += a;
            ffn += f;
        } else {
            let r = schedule.retained_count(l, m, cfg.prune_literal_percentile)?;
            let nq = r + t + kd;
            let nk = if cfg.pruned_keys_visible { m + t + kd } else { nq };
            let (a, f) = llm_layer_flops(nq, nk, cfg.d_model, cfg.llm_ffn);
            att += a;
            ffn += f;
            over += routing_overhead_flops(m, cfg.d_model, cfg.film_hidden, cfg.router_hidden);
        }
    }
    Ok((att, ffn, over))
}

/// Analytic count for one forward pass of the model the configuration
/// builds: both encoder branches, gated fusion, the (possibly sparse) LLM
/// stack with all action placeholder rows appended, and the coordinate head.
/// Equals `Tape::flops()` of `Model::forward_chunk` exactly.
pub fn count_sparse(cfg: &ModelConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let schedule = SparsitySchedule::from_config(cfg)?;
    let m = cfg.visual_tokens();
    let kd = cfg.action_tokens();

    let (plain_a, film_a) = branch_flops(
        cfg.patches(),
        cfg.patch_feat,
        cfg.enc_dim,
        cfg.enc_ffn,
        cfg.enc_depth,
        cfg.agg_tokens,
        cfg.d_model,
    );
    let (plain_b, film_b) = branch_flops(
        cfg.patches(),
        cfg.patch_feat,
        cfg.enc_dim2,
        cfg.enc_ffn2,
        cfg.enc_depth2,
        cfg.agg_tokens,
        cfg.d_model,
    );
    let gate = if cfg.passthrough() {
        0
    } else {
        matmul_flops(1, cfg.d_model, cfg.gate_hidden) + matmul_flops(1, cfg.gate_hidden, 1)
    };
    let (att, ffn, routing) = stack_flops(cfg, &schedule, m, kd)?;
    Ok(FlopsReport {
        encoders: plain_a + plain_b,
        llm_attention: att,
        llm_ffn: ffn,
        overhead: film_a + film_b + gate + routing,
        head: matmul_flops(kd, cfg.d_model, 1),
    })
}

/// Analytic count for the dense reference of `cfg`: stage 1 off (all patch
/// tokens from both branches enter the LLM) and the identity schedule. Same
/// cost model, zero overhead.
pub fn count_dense(cfg: &ModelConfig) -> Result<FlopsReport> {
    count_sparse(&cfg.dense_variant())
}

/// Decode-only cost of the single-pass chunk decoder: one stack pass with
/// all K·D placeholder rows plus the head over K·D rows. Excludes encoding.
pub fn count_parallel_decode(cfg: &ModelConfig) -> Result<u64> {
    cfg.validate()?;
    let schedule = SparsitySchedule::from_config(cfg)?;
    let m = cfg.visual_tokens();
    let kd = cfg.action_tokens();
    let (att, ffn, over) = stack_flops(cfg, &schedule, m, kd)?;
    Ok(att + ffn + over + matmul_flops(kd, cfg.d_model, 1))
}

/// Decode-only cost of the sequential reference decoder: pass s runs the
/// stack over the context plus s+1 action rows and reads one coordinate, so
/// K·D stack passes in total. Excludes encoding (the context is built once).
pub fn count_ar_decode(cfg: &ModelConfig) -> Result<u64> {
    cfg.validate()?;
    let schedule = SparsitySchedule::from_config(cfg)?;
    let m = cfg.visual_tokens();
    let kd = cfg.action_tokens();
    let mut total = 0u64;
    for s in 0..kd {
        let (att, ffn, over) = stack_flops(cfg, &schedule, m, s + 1)?;
        total += att + ffn + over + matmul_flops(1, cfg.d_model, 1);
    }
    Ok(total)
}

/// Reference-scale configuration for the analytic compute-ratio check: a
/// 32-layer, 4096-wide stack fed by two 24-layer encoders over 256 patches
/// each, 64 aggregation slots, 8 actions of 7 coordinates. Widths not fixed
/// by the toy pipeline are declared in [`reference_scale_assumptions`].
pub fn reference_scale_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.d_model = 4096;
    cfg.enc_dim = 1024;
    cfg.enc_dim2 = 1024;
    cfg.enc_depth = 24;
    cfg.enc_depth2 = 24;
    cfg.enc_ffn = 4096;
    cfg.enc_ffn2 = 4096;
    cfg.grid_h = 16;
    cfg.grid_w = 16;
    cfg.patch_feat = 1024;
    cfg.agg_tokens = 64;
    cfg.llm_depth = 32;
    cfg.llm_ffn = 16384;
    cfg.film_hidden = 2048;
    cfg.router_hidden = 2048;
    cfg.gate_hidden = 2048;
    cfg.eta = 0.5;
    cfg.clamp_lo = 0.05;
    cfg.clamp_hi = 0.85;
    cfg.chunk_len = 8;
    cfg.action_dim = 7;
    cfg.vocab_size = 32000;
    cfg.instr_len = 128;
    cfg
}

/// The reference-scale values that are assumptions rather than published
/// numbers, for report headers.
pub fn reference_scale_assumptions() -> Vec<(&'static str, String)> {
    let c = reference_scale_config();
    vec![
        ("encoder_width", c.enc_dim.to_string()),
        ("encoder_depth", c.enc_depth.to_string()),
        ("encoder_ffn_width", c.enc_ffn.to_string()),
        ("patch_feature_width", c.patch_feat.to_string()),
        ("llm_ffn_width", c.llm_ffn.to_string()),
        ("conditioning_mlp_hidden", c.film_hidden.to_string()),
        ("router_mlp_hidden", c.router_hidden.to_string()),
        ("gate_mlp_hidden", c.gate_hidden.to_string()),
        ("prompt_tokens", c.instr_len.to_string()),
    ]
}

/// Result of solving the retention offset η for a stage-2 compute target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolvedEta {
    pub eta: f64,
    /// 1/mean(β) actually reached at this η.
    pub achieved: f64,
    /// Whether the target was reachable within 1% relative tolerance. When
    /// false, `eta` sits at the clamp-saturating end nearest the target.
    pub exact: bool,
}

/// Solves η so the schedule's stage-2 factor 1/mean(β_l) hits `target`
/// within 1%, by bisection (the mean of clamped shifted-cosine values is
/// nondecreasing in η). Targets outside the clamp-feasible band
/// [1/clamp_hi, 1/clamp_lo] are reported as inexact at the nearest end.
pub fn solve_stage2_eta(depth: usize, lo: f64, hi: f64, target: f64) -> Result<SolvedEta> {
    if depth == 0 {
        return Err(Error::contract("solve_stage2_eta", "depth must be positive"));
    }
    if !(target.is_finite() && target >= 1.0) {
        return Err(Error::contract("solve_stage2_eta", format!("target {target} must be ≥ 1")));
    }
    let factor = |eta: f64| -> f64 {
        // Bisection probes arbitrary η, so build the schedule directly.
        let sched = SparsitySchedule::new(depth, eta, lo, hi).expect("clamped schedule");
        sched.stage2_factor()
    };
    // η = ±2 saturates every layer: the cosine term lies in [-1/2, 1/2].
    let (mut a, mut b) = (-2.0, 2.0);
    let tol = 0.01 * target;
    if target > factor(a) + tol {
        return Ok(SolvedEta { eta: a, achieved: factor(a), exact: false });
    }
    if target < factor(b) - tol {
        return Ok(SolvedEta { eta: b, achieved: factor(b), exact: false });
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if factor(mid) > target {
            a = mid; // factor decreases in η: target sits to the right
        } else {
            b = mid;
        }
    }
    let eta = 0.5 * (a + b);
    let achieved = factor(eta);
    Ok(SolvedEta { eta, achieved, exact: (achieved - target).abs() <= tol })
}

/// One row of the allocation grid: a (stage-1, stage-2) compute split with
/// the solved configuration and its ledger counts.
#[derive(Debug, Clone)]
pub struct AblationEntry {
    pub stage1_target: f64,
    pub stage2_target: f64,
    pub config: ModelConfig,
    pub solved: SolvedEta,
    pub report: FlopsReport,
}

impl AblationEntry {
    /// Nominal product of the two targets.
    pub fn product(&self) -> f64 {
        self.stage1_target * self.stage2_target
    }
}

/// Enumerates stage allocations against a base configuration. Each stage-1
/// factor f maps to 2·P/f aggregation slots (f = 1 turns stage 1 off:
/// passthrough); f must divide the token count evenly and leave at most P
/// slots per branch. Stage-2 targets are solved via [`solve_stage2_eta`];
/// unreachable targets produce an entry flagged inexact at the nearest
/// feasible schedule rather than an error.
pub fn ablation_grid(
    base: &ModelConfig,
    allocations: &[(f64, f64)],
) -> Result<Vec<AblationEntry>> {
    base.validate()?;
    let tokens = 2 * base.patches();
    let mut out = Vec::with_capacity(allocations.len());
    for &(s1, s2) in allocations {
        if !(s1.is_finite() && s1 >= 1.0) {
            return Err(Error::contract("ablation_grid", format!("stage-1 factor {s1} must be ≥ 1")));
        }
        let mut cfg = base.clone();
        if s1 == 1.0 {
            cfg.agg_tokens = 0;
        } else {
            let slots = tokens as f64 / s1;
            if slots.fract() != 0.0 || slots < 1.0 {
                return Err(Error::contract(
                    "ablation_grid",
                    format!("stage-1 factor {s1} does not divide {tokens} tokens evenly"),
                ));
            }
            let slots = slots as usize;
            if slots > base.patches() {
                return Err(Error::contract(
                    "ablation_grid",
                    format!(
                        "stage-1 factor {s1} needs {slots} slots, branch has {} patches",
                        base.patches()
                    ),
                ));
            }
            cfg.agg_tokens = slots;
        }
        let solved = solve_stage2_eta(cfg.llm_depth, cfg.clamp_lo, cfg.clamp_hi, s2)?;
        cfg.eta = solved.eta;
        let report = count_sparse(&cfg)?;
        out.push(AblationEntry { stage1_target: s1, stage2_target: s2, config: cfg, solved, report });
    }
    Ok(out)
}

fn fmt_factor(f: f64) -> String {
    if f.fract() == 0.0 {
        format!("{}x", f as i64)
    } else {
        format!("{f:.2}x")
    }
}

/// Aligned dense-vs-sparse component table with ratio lines.
pub fn comparison_table(dense: &FlopsReport, sparse: &FlopsReport) -> String {
    let rows: [(&str, u64, u64); 5] = [
        ("encoders", dense.encoders, sparse.encoders),
        ("llm_attention", dense.llm_attention, sparse.llm_attention),
        ("llm_ffn", dense.llm_ffn, sparse.llm_ffn),
        ("overhead", dense.overhead, sparse.overhead),
        ("head", dense.head, sparse.head),
    ];
    let mut s = String::new();
    s.push_str(&format!("{:<16} {:>20} {:>20}\n", "component", "dense", "sparse"));
    for (name, d, sp) in rows {
        s.push_str(&format!("{name:<16} {d:>20} {sp:>20}\n"));
    }
    s.push_str(&format!("{:<16} {:>20} {:>20}\n", "total", dense.total(), sparse.total()));
    s.push_str(&format!(
        "ratio_total          {:.4}\n",
        dense.total() as f64 / sparse.total() as f64
    ));
    s.push_str(&format!(
        "ratio_no_encoders    {:.4}\n",
        dense.total_without_encoders() as f64 / sparse.total_without_encoders() as f64
    ));
    s.push_str(&format!(
        "ratio_llm_stage      {:.4}\n",
        dense.llm_stage() as f64 / sparse.llm_stage() as f64
    ));
    s
}

/// Machine-readable dense-vs-sparse records: one key=value group per stage,
/// blank-line separated, ratios in the trailing total groups.
pub fn comparison_records(dense: &FlopsReport, sparse: &FlopsReport) -> String {
    let mut s = String::new();
    for (name, d, sp) in [
        ("encoders", dense.encoders, sparse.encoders),
        ("llm_attention", dense.llm_attention, sparse.llm_attention),
        ("llm_ffn", dense.llm_ffn, sparse.llm_ffn),
        ("overhead", dense.overhead, sparse.overhead),
        ("head", dense.head, sparse.head),
    ] {
        s.push_str(&format!("stage={name}\ndense={d}\nsparse={sp}\n\n"));
    }
    s.push_str(&format!(
        "stage=total\ndense={}\nsparse={}\nratio={:.6}\n\n",
        dense.total(),
        sparse.total(),
        dense.total() as f64 / sparse.total() as f64
    ));
    s.push_str(&format!(
        "stage=total_no_encoders\ndense={}\nsparse={}\nratio={:.6}\n",
        dense.total_without_encoders(),
        sparse.total_without_encoders(),
        dense.total_without_encoders() as f64 / sparse.total_without_encoders() as f64
    ));
    s
}

/// Assumption header as a records group.
pub fn assumptions_records(assumptions: &[(&'static str, String)]) -> String {
    let mut s = String::from("stage=assumptions\n");
    for (k, v) in assumptions {
        s.push_str(&format!("{k}={v}\n"));
    }
    s
}

/// Aligned allocation-grid table; inexact stage-2 solves are flagged.
pub fn grid_table(entries: &[AblationEntry]) -> String {
    let mut s = format!(
        "{:<8} {:<8} {:<8} {:>9} {:>9} {:<6} {:>16} {:>16}\n",
        "stage1", "stage2", "product", "eta", "achieved", "exact", "total", "llm_stage"
    );
    for e in entries {
        s.push_str(&format!(
            "{:<8} {:<8} {:<8} {:>9.4} {:>9.4} {:<6} {:>16} {:>16}\n",
            fmt_factor(e.stage1_target),
            fmt_factor(e.stage2_target),
            fmt_factor(e.product()),
            e.solved.eta,
            e.solved.achieved,
            if e.solved.exact { "yes" } else { "no" },
            e.report.total(),
            e.report.llm_stage(),
        ));
    }
    s
}

/// Machine-readable allocation grid: one group per row.
pub fn grid_records(entries: &[AblationEntry]) -> String {
    let mut s = String::new();
    for (i, e) in entries.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        s.push_str(&format!(
            "allocation={}{}\nstage1={}\nstage2={}\nproduct={}\neta={:.6}\nachieved_stage2={:.6}\nfeasible_exact={}\ntotal={}\nllm_stage={}\n",
            fmt_factor(e.stage1_target),
            fmt_factor(e.stage2_target),
            e.stage1_target,
            e.stage2_target,
            e.product(),
            e.solved.eta,
            e.solved.achieved,
            e.solved.exact,
            e.report.total(),
            e.report.llm_stage(),
        ));
    }
    s
}
