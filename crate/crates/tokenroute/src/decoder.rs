//! Stage 3: coupled vision-language-action attention and chunk decoding.
//!
//! The sequence is laid out [visual; instruction; action]. Vision-language
//! rows are causal among themselves and blind to action columns; action rows
//! see the whole sequence (bidirectionally among themselves in parallel
//! decoding, causally in the autoregressive reference). The chunk of K·D
//! action coordinates is decoded in a single stack pass from learned
//! placeholder embeddings, one slot per coordinate.

use std::cell::Cell;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    expand_idx, masked_scaled_dot_attention, GeluMlp, Linear, NodeId, Norm, ParamId, ParamStore,
    Tape, Tensor, INIT_STD,
};
use crate::sparsity::{film_modulate, percentile_threshold, FilmLlm, Router, SparsitySchedule};

/// Visibility rule on ORIGINAL sequence indices (full layout, before any
/// pruning): vision-language rows are lower-triangular among themselves and
/// never see action columns; action rows see all vision-language keys and —
/// depending on the decode mode — either every action key (parallel) or only
/// those at or before their own slot (autoregressive reference).
pub fn visible(q: usize, k: usize, vl_end: usize, actions_causal: bool) -> bool {
    if q < vl_end {
        k <= q && k < vl_end
    } else if actions_causal {
        k < vl_end || k <= q
    } else {
        true
    }
}

/// Additive attention mask for the full [visual; instruction; action] layout.
#[derive(Debug, Clone)]
pub struct HybridMask {
    additive: Tensor,
    m: usize,
    t: usize,
    k: usize,
    d: usize,
}

impl HybridMask {
    pub fn additive(&self) -> &Tensor {
        &self.additive
    }

    pub fn seq_len(&self) -> usize {
        self.m + self.t + self.k * self.d
    }

    pub fn bounds(&self) -> (usize, usize, usize, usize) {
        (self.m, self.t, self.k, self.d)
    }

    /// Allow-matrix as lines of '0'/'1' characters, one row per line.
    pub fn dump(&self) -> String {
        let s = self.seq_len();
        let mut out = String::with_capacity(s * (s + 1));
        for q in 0..s {
            for k in 0..s {
                out.push(if self.additive.get2(q, k) == 0.0 { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

pub fn build_hybrid_mask(m: usize, t: usize, k: usize, d: usize) -> Result<HybridMask> {
    if m == 0 || t == 0 || k == 0 || d == 0 {
        return Err(Error::contract(
            "build_hybrid_mask",
            format!("all segment dims must be positive, got M={m} T={t} K={k} D={d}"),
        ));
    }
    let s = m + t + k * d;
    let idx: Vec<usize> = (0..s).collect();
    let additive = segment_mask(&idx, &idx, m + t, false);
    Ok(HybridMask { additive, m, t, k, d })
}

/// Mask for a (possibly reduced) query/key row selection, each given by its
/// original full-layout index. Used per layer once pruning has removed visual
/// rows, and by the autoregressive reference via `actions_causal`.
pub fn segment_mask(
    query_orig: &[usize],
    key_orig: &[usize],
    vl_end: usize,
    actions_causal: bool,
) -> Tensor {
    let mut mask = Tensor::zeros(&[query_orig.len(), key_orig.len()]);
    for (qi, &q) in query_orig.iter().enumerate() {
        for (ki, &k) in key_orig.iter().enumerate() {
            if !visible(q, k, vl_end, actions_causal) {
                mask.set2(qi, ki, f64::NEG_INFINITY);
            }
        }
    }
    mask
}

/// Pre-norm transformer block: x + Wo·Attn(LN1(x)) + FFN(LN2(x + attn)).
/// `update` exposes the net change so the pruning layer can scale it and
/// re-anchor the residual on the unmodulated input.
#[derive(Debug, Clone, Copy)]
pub struct CattenBlock {
    pub ln1: Norm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: Norm,
    pub ffn: GeluMlp,
}

impl CattenBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        ffn_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(CattenBlock {
            ln1: Norm::new(store, &format!("{prefix}.ln1"), d)?,
            wq: Linear::new(store, &format!("{prefix}.wq"), d, d, false, rng)?,
            wk: Linear::new(store, &format!("{prefix}.wk"), d, d, false, rng)?,
            wv: Linear::new(store, &format!("{prefix}.wv"), d, d, false, rng)?,
            wo: Linear::new(store, &format!("{prefix}.wo"), d, d, false, rng)?,
            ln2: Norm::new(store, &format!("{prefix}.ln2"), d)?,
            ffn: GeluMlp::new(store, &format!("{prefix}.ffn"), d, ffn_hidden, d, rng)?,
        })
    }

    /// Net update for the query rows. `keys` supplies a separate key/value
    /// sequence when the key set differs from the query set; the mask is
    /// [queries, keys]. The FFN half normalizes x + attn, matching the
    /// second residual stage of a standard pre-norm block.
    pub fn update(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        keys: Option<NodeId>,
        mask: Option<&Tensor>,
    ) -> Result<NodeId> {
        let nq = self.ln1.apply(tape, store, x)?;
        let nk = match keys {
            Some(kx) => self.ln1.apply(tape, store, kx)?,
            None => nq,
        };
        let q = self.wq.apply(tape, store, nq)?;
        let k = self.wk.apply(tape, store, nk)?;
        let v = self.wv.apply(tape, store, nk)?;
        let att = masked_scaled_dot_attention(tape, q, k, v, mask)?;
        let att = self.wo.apply(tape, store, att)?;
        let mid = tape.add(x, att)?;
        let nf = self.ln2.apply(tape, store, mid)?;
        let ffn_out = self.ffn.apply(tape, store, nf)?;
        tape.add(att, ffn_out)
    }

    /// Standard dense application: x + update.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        mask: Option<&Tensor>,
    ) -> Result<NodeId> {
        let u = self.update(tape, store, x, None, mask)?;
        tape.add(x, u)
    }

    /// `update` over sample blocks: queries (and keys, when given) stack one
    /// block per sample and `masks[i]` is sample i's [q_rows, k_rows] mask.
    /// Attention stays within each sample's block.
    pub(crate) fn update_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        keys: Option<NodeId>,
        masks: &[Tensor],
    ) -> Result<NodeId> {
        let nq = self.ln1.apply(tape, store, x)?;
        let nk = match keys {
            Some(kx) => self.ln1.apply(tape, store, kx)?,
            None => nq,
        };
        let q = self.wq.apply(tape, store, nq)?;
        let k = self.wk.apply(tape, store, nk)?;
        let v = self.wv.apply(tape, store, nk)?;
        let att = tape.block_attention(q, k, v, masks)?;
        let att = self.wo.apply(tape, store, att)?;
        let mid = tape.add(x, att)?;
        let nf = self.ln2.apply(tape, store, mid)?;
        let ffn_out = self.ffn.apply(tape, store, nf)?;
        tape.add(att, ffn_out)
    }
}

/// Dense coupled-attention layer: the block under the hybrid mask.
pub fn catten_layer(
    tape: &mut Tape,
    store: &ParamStore,
    block: &CattenBlock,
    x: NodeId,
    mask: &HybridMask,
) -> Result<NodeId> {
    let rows = tape.value(x).rows();
    if rows != mask.seq_len() {
        return Err(Error::shape(
            "catten_layer",
            format!("sequence has {rows} rows, mask expects {}", mask.seq_len()),
        ));
    }
    block.forward(tape, store, x, Some(mask.additive()))
}

/// Learned placeholder slots: one shared base vector plus a per-slot offset,
/// and a value direction used by the autoregressive reference to embed
/// already-generated coordinates. The parallel decoder's inputs are exactly
/// base + offset — a zero-valued action embedding per slot.
#[derive(Debug, Clone, Copy)]
pub struct ActionSlots {
    pub base: ParamId,
    pub offsets: ParamId,
    pub value_dir: ParamId,
    slots: usize,
}

impl ActionSlots {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        slots: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(ActionSlots {
            base: store.add(format!("{prefix}.base"), Tensor::randn(&[1, d], INIT_STD, rng))?,
            offsets: store
                .add(format!("{prefix}.offsets"), Tensor::randn(&[slots, d], INIT_STD, rng))?,
            value_dir: store
                .add(format!("{prefix}.value_dir"), Tensor::randn(&[1, d], INIT_STD, rng))?,
            slots,
        })
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// All K·D placeholder rows, on the differentiable path.
    pub fn placeholders(&self, tape: &mut Tape, store: &ParamStore) -> Result<NodeId> {
        let off = tape.param(store, self.offsets);
        let base = tape.param(store, self.base);
        tape.add_row_vec(off, base)
    }

    /// Detached embedding rows for slots 0..=upto, where slots 0..upto carry
    /// the given generated coordinate values and slot `upto` carries value 0.
    /// Read numerically from the store: the autoregressive reference is an
    /// inference-only comparator.
    pub fn ar_rows(&self, store: &ParamStore, values: &[f64], upto: usize) -> Result<Tensor> {
        if upto >= self.slots || values.len() < upto {
            return Err(Error::contract(
                "ar_rows",
                format!("slot {upto} of {}, {} values supplied", self.slots, values.len()),
            ));
        }
        let base = store.value(self.base);
        let off = store.value(self.offsets);
        let dir = store.value(self.value_dir);
        let d = base.cols();
        let mut rows = Tensor::zeros(&[upto + 1, d]);
        for s in 0..=upto {
            let v = if s < upto { values[s] } else { 0.0 };
            for c in 0..d {
                rows.set2(s, c, base.get2(0, c) + off.get2(s, c) + v * dir.get2(0, c));
            }
        }
        Ok(rows)
    }
}

/// Per-layer record of what the pruning router did.
#[derive(Debug, Clone)]
pub struct LayerDiag {
    /// Original visual indices kept as queries/keys this layer (ascending).
    pub retained: Vec<usize>,
    /// Routing score per visual token.
    pub scores: Vec<f64>,
    /// Retention ratio the schedule prescribed.
    pub beta: f64,
}

/// The LLM stack: depth-many coupled-attention blocks, each preceded (in the
/// sparse configuration) by instruction-conditioned modulation and routing.
/// `films`/`routers` are None for the dense model, in which every layer is a
/// plain hybrid-masked block — the identity retention schedule is realized by
/// the modules being absent, not by weights that happen to be neutral.
pub struct VlaStack {
    pub blocks: Vec<CattenBlock>,
    /// Final pre-head normalization. Pre-norm blocks leave the residual
    /// stream un-normalized, so without this the head would read features
    /// whose scale shrinks with init variance and learning would crawl.
    pub final_ln: Norm,
    pub films: Option<Vec<FilmLlm>>,
    pub routers: Option<Vec<Router>>,
    pub schedule: SparsitySchedule,
    pub literal_percentile: bool,
    pub pruned_keys_visible: bool,
    passes: Cell<u64>,
}

pub struct StackLayout {
    /// Visual token count M.
    pub m: usize,
    /// Instruction length T.
    pub t: usize,
    /// Action rows currently present (K·D in parallel decoding, fewer mid-AR).
    pub kd: usize,
    /// Instruction positions that are real tokens (non-padding), as offsets
    /// into the instruction segment; pooling averages only these.
    pub instr_live: Vec<usize>,
    pub actions_causal: bool,
}

impl StackLayout {
    pub fn seq_len(&self) -> usize {
        self.m + self.t + self.kd
    }
}

impl VlaStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        depth: usize,
        d: usize,
        ffn_hidden: usize,
        film_hidden: usize,
        router_hidden: usize,
        schedule: SparsitySchedule,
        literal_percentile: bool,
        pruned_keys_visible: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if depth == 0 || schedule.depth() != depth {
            return Err(Error::contract(
                "VlaStack",
                format!("depth {depth} vs schedule depth {}", schedule.depth()),
            ));
        }
        let mut blocks = Vec::with_capacity(depth);
        for l in 0..depth {
            blocks.push(CattenBlock::new(store, &format!("{prefix}.layer{l}"), d, ffn_hidden, rng)?);
        }
        let final_ln = Norm::new(store, &format!("{prefix}.final_ln"), d)?;
        let (films, routers) = if schedule.is_identity() {
            (None, None)
        } else {
            let mut films = Vec::with_capacity(depth);
            let mut routers = Vec::with_capacity(depth);
            for l in 0..depth {
                films.push(FilmLlm::new(
                    store,
                    &format!("{prefix}.layer{l}.film"),
                    d,
                    film_hidden,
                    rng,
                )?);
                routers.push(Router::new(
                    store,
                    &format!("{prefix}.layer{l}.router"),
                    d,
                    router_hidden,
                    rng,
                )?);
            }
            (Some(films), Some(routers))
        };
        Ok(VlaStack {
            blocks,
            final_ln,
            films,
            routers,
            schedule,
            literal_percentile,
            pruned_keys_visible,
            passes: Cell::new(0),
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn passes(&self) -> u64 {
        self.passes.get()
    }

    pub fn reset_passes(&self) {
        self.passes.set(0);
    }

    /// One full pass over [visual; instruction; action(kd)] rows. Returns the
    /// output sequence and a per-layer routing record (empty when dense).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x0: NodeId,
        layout: &StackLayout,
    ) -> Result<(NodeId, Vec<LayerDiag>)> {
        let rows = tape.value(x0).rows();
        if rows != layout.seq_len() {
            return Err(Error::shape(
                "VlaStack::forward",
                format!("{rows} rows vs layout {}", layout.seq_len()),
            ));
        }
        if layout.instr_live.is_empty() {
            return Err(Error::contract("VlaStack::forward", "instruction is entirely padding"));
        }
        self.passes.set(self.passes.get() + 1);
        let mut x = x0;
        let mut diags = Vec::new();
        match (&self.films, &self.routers) {
            (None, None) => {
                let idx: Vec<usize> = (0..layout.seq_len()).collect();
                let mask = segment_mask(&idx, &idx, layout.m + layout.t, layout.actions_causal);
                for block in &self.blocks {
                    x = block.forward(tape, store, x, Some(&mask))?;
                }
            }
            (Some(films), Some(routers)) => {
                for (l, block) in self.blocks.iter().enumerate() {
                    let (next, diag) = self.sparse_layer(
                        tape,
                        store,
                        block,
                        &films[l],
                        &routers[l],
                        x,
                        layout,
                        l + 1,
                    )?;
                    x = next;
                    diags.push(diag);
                }
            }
            _ => unreachable!("films and routers are created together"),
        }
        Ok((x, diags))
    }

    /// Modulate visual rows, score them, retain the scheduled fraction, run
    /// the block over [retained; instruction; action], scale the visual
    /// updates by their routing weights, and paste everything back so pruned
    /// rows pass through bitwise.
    #[allow(clippy::too_many_arguments)]
    fn sparse_layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: &CattenBlock,
        film: &FilmLlm,
        router: &Router,
        x: NodeId,
        layout: &StackLayout,
        layer: usize,
    ) -> Result<(NodeId, LayerDiag)> {
        let (m, t, kd) = (layout.m, layout.t, layout.kd);
        let vl_end = m + t;
        let pooled_rows: Vec<usize> = layout.instr_live.iter().map(|&i| m + i).collect();
        let t_l = tape.mean_rows(x, pooled_rows)?;

        let visual = tape.gather_rows(x, (0..m).collect())?;
        let (gamma, beta_vec) = film.apply(tape, store, t_l)?;
        let modulated = film_modulate(tape, visual, gamma, beta_vec)?;

        let scores = router.scores(tape, store, modulated)?;
        let score_vals: Vec<f64> = tape.value(scores).data().to_vec();
        let beta_l = self.schedule.beta(layer)?;
        let keep = self.schedule.retained_count(layer, m, self.literal_percentile)?;
        let retained = percentile_threshold(&score_vals, keep)?;
        let r = retained.len();

        let ia_idx: Vec<usize> = (m..m + t + kd).collect();
        let ia_rows = tape.gather_rows(x, ia_idx.clone())?;
        let kept_mod = tape.gather_rows(modulated, retained.clone())?;
        let queries = tape.concat_rows(&[kept_mod, ia_rows])?;

        let q_orig: Vec<usize> = retained.iter().copied().chain(ia_idx.iter().copied()).collect();
        let (keys_node, k_orig) = if self.pruned_keys_visible {
            let all_keys = tape.concat_rows(&[modulated, ia_rows])?;
            let k_orig: Vec<usize> = (0..m).chain(ia_idx.iter().copied()).collect();
            (Some(all_keys), k_orig)
        } else {
            (None, q_orig.clone())
        };
        let mask = segment_mask(&q_orig, &k_orig, vl_end, layout.actions_causal);

        let update = block.update(tape, store, queries, keys_node, Some(&mask))?;

        let u_vis = tape.gather_rows(update, (0..r).collect())?;
        let u_ia = tape.gather_rows(update, (r..r + t + kd).collect())?;
        let r_kept = tape.gather_rows(scores, retained.clone())?;
        let scaled = tape.scale_rows(u_vis, r_kept)?;
        let vis_res = tape.gather_rows(x, retained.clone())?;
        let new_vis = tape.add(scaled, vis_res)?;
        let ia_res = tape.gather_rows(x, ia_idx.clone())?;
        let new_ia = tape.add(u_ia, ia_res)?;

        let assembled = tape.concat_rows(&[new_vis, new_ia])?;
        let idx: Vec<usize> = retained.iter().copied().chain(ia_idx).collect();
        let out = tape.paste_rows(x, assembled, idx)?;
        Ok((out, LayerDiag { retained, scores: score_vals, beta: beta_l }))
    }

    /// `forward` over `lives.len()` samples in one graph. Rows of `x0` stack
    /// one `layout.seq_len()` block per sample; `lives[i]` gives sample i's
    /// live instruction offsets (`layout.instr_live` is not consulted).
    /// Counts one pass per sample. Returns the output rows only — training
    /// does not need routing diagnostics.
    pub(crate) fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x0: NodeId,
        layout: &StackLayout,
        lives: &[Vec<usize>],
    ) -> Result<NodeId> {
        let b = lives.len();
        let s = layout.seq_len();
        let rows = tape.value(x0).rows();
        if rows != b * s {
            return Err(Error::shape(
                "VlaStack::forward_batch",
                format!("{rows} rows vs {b} samples of {s}"),
            ));
        }
        if lives.iter().any(|l| l.is_empty()) {
            return Err(Error::contract(
                "VlaStack::forward_batch",
                "an instruction is entirely padding",
            ));
        }
        self.passes.set(self.passes.get() + b as u64);
        let mut x = x0;
        match (&self.films, &self.routers) {
            (None, None) => {
                let idx: Vec<usize> = (0..s).collect();
                let mask = segment_mask(&idx, &idx, layout.m + layout.t, layout.actions_causal);
                let masks: Vec<Tensor> = (0..b).map(|_| mask.clone()).collect();
                for block in &self.blocks {
                    let u = block.update_batch(tape, store, x, None, &masks)?;
                    x = tape.add(x, u)?;
                }
            }
            (Some(films), Some(routers)) => {
                for (l, block) in self.blocks.iter().enumerate() {
                    x = self.sparse_layer_batch(
                        tape,
                        store,
                        block,
                        &films[l],
                        &routers[l],
                        x,
                        layout,
                        lives,
                        l + 1,
                    )?;
                }
            }
            _ => unreachable!("films and routers are created together"),
        }
        Ok(x)
    }

    /// `sparse_layer` over sample blocks. Routing is per sample (each block
    /// pools its own instruction rows, scores its own visual rows, and keeps
    /// its own retained set); the retained count is schedule-determined, so
    /// every sample keeps the same number and the attention blocks stay
    /// uniform.
    #[allow(clippy::too_many_arguments)]
    fn sparse_layer_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        block: &CattenBlock,
        film: &FilmLlm,
        router: &Router,
        x: NodeId,
        layout: &StackLayout,
        lives: &[Vec<usize>],
        layer: usize,
    ) -> Result<NodeId> {
        let b = lives.len();
        let (m, t, kd) = (layout.m, layout.t, layout.kd);
        let s = layout.seq_len();
        let vl_end = m + t;

        // One MeanRows per sample keeps the single-sample summation order.
        let mut pooled_parts = Vec::with_capacity(b);
        for (i, live) in lives.iter().enumerate() {
            let rows: Vec<usize> = live.iter().map(|&j| i * s + m + j).collect();
            pooled_parts.push(tape.mean_rows(x, rows)?);
        }
        let pooled = tape.concat_rows(&pooled_parts)?;

        let mut vis_idx = Vec::with_capacity(b * m);
        for i in 0..b {
            vis_idx.extend(i * s..i * s + m);
        }
        let visual = tape.gather_rows(x, vis_idx)?;
        let (gamma, beta_vec) = film.apply(tape, store, pooled)?;
        let ge = tape.gather_rows(gamma, expand_idx(b, m))?;
        let be = tape.gather_rows(beta_vec, expand_idx(b, m))?;
        let scaled_g = tape.mul(visual, ge)?;
        let plus = tape.add(visual, scaled_g)?;
        let modulated = tape.add(plus, be)?;

        let scores = router.scores(tape, store, modulated)?;
        let score_vals = tape.value(scores).data().to_vec();
        let keep = self.schedule.retained_count(layer, m, self.literal_percentile)?;
        let mut retained_per = Vec::with_capacity(b);
        for i in 0..b {
            retained_per.push(percentile_threshold(&score_vals[i * m..(i + 1) * m], keep)?);
        }
        let r = keep;

        // Queries gather from [modulated; x] stacked: per sample the kept
        // modulated rows, then its instruction+action rows.
        let cat = tape.concat_rows(&[modulated, x])?;
        let off = b * m;
        let mut q_idx = Vec::with_capacity(b * (r + t + kd));
        for (i, ret) in retained_per.iter().enumerate() {
            q_idx.extend(ret.iter().map(|&j| i * m + j));
            q_idx.extend(off + i * s + m..off + (i + 1) * s);
        }
        let queries = tape.gather_rows(cat, q_idx)?;

        let ia_orig: Vec<usize> = (m..s).collect();
        let mut masks = Vec::with_capacity(b);
        let keys_node = if self.pruned_keys_visible {
            let mut k_idx = Vec::with_capacity(b * (m + t + kd));
            for i in 0..b {
                k_idx.extend(i * m..(i + 1) * m);
                k_idx.extend(off + i * s + m..off + (i + 1) * s);
            }
            let k_orig: Vec<usize> = (0..m).chain(ia_orig.iter().copied()).collect();
            for ret in &retained_per {
                let q_orig: Vec<usize> =
                    ret.iter().copied().chain(ia_orig.iter().copied()).collect();
                masks.push(segment_mask(&q_orig, &k_orig, vl_end, layout.actions_causal));
            }
            Some(tape.gather_rows(cat, k_idx)?)
        } else {
            for ret in &retained_per {
                let q_orig: Vec<usize> =
                    ret.iter().copied().chain(ia_orig.iter().copied()).collect();
                masks.push(segment_mask(&q_orig, &q_orig, vl_end, layout.actions_causal));
            }
            None
        };

        let update = block.update_batch(tape, store, queries, keys_node, &masks)?;

        let sl = r + t + kd;
        let mut uv_idx = Vec::with_capacity(b * r);
        let mut uia_idx = Vec::with_capacity(b * (t + kd));
        for i in 0..b {
            uv_idx.extend(i * sl..i * sl + r);
            uia_idx.extend(i * sl + r..(i + 1) * sl);
        }
        let u_vis = tape.gather_rows(update, uv_idx)?;
        let u_ia = tape.gather_rows(update, uia_idx)?;
        let mut rk_idx = Vec::with_capacity(b * r);
        for (i, ret) in retained_per.iter().enumerate() {
            rk_idx.extend(ret.iter().map(|&j| i * m + j));
        }
        let r_kept = tape.gather_rows(scores, rk_idx)?;
        let scaled = tape.scale_rows(u_vis, r_kept)?;
        let mut res_v_idx = Vec::with_capacity(b * r);
        for (i, ret) in retained_per.iter().enumerate() {
            res_v_idx.extend(ret.iter().map(|&j| i * s + j));
        }
        let vis_res = tape.gather_rows(x, res_v_idx)?;
        let new_vis = tape.add(scaled, vis_res)?;
        let mut ia_idx = Vec::with_capacity(b * (t + kd));
        for i in 0..b {
            ia_idx.extend(i * s + m..(i + 1) * s);
        }
        let ia_res = tape.gather_rows(x, ia_idx)?;
        let new_ia = tape.add(u_ia, ia_res)?;

        // paste_rows wants strictly increasing targets, so interleave back
        // into per-sample [kept_i; instruction+action_i] order first.
        let asm_cat = tape.concat_rows(&[new_vis, new_ia])?;
        let mut asm_idx = Vec::with_capacity(b * sl);
        let mut paste_idx = Vec::with_capacity(b * sl);
        for (i, ret) in retained_per.iter().enumerate() {
            asm_idx.extend(i * r..(i + 1) * r);
            asm_idx.extend(b * r + i * (t + kd)..b * r + (i + 1) * (t + kd));
            paste_idx.extend(ret.iter().map(|&j| i * s + j));
            paste_idx.extend(i * s + m..(i + 1) * s);
        }
        let assembled = tape.gather_rows(asm_cat, asm_idx)?;
        tape.paste_rows(x, assembled, paste_idx)
    }
}

/// Decoded chunk plus the tape node holding the K·D coordinates (for loss
/// construction) and the per-layer routing records.
pub struct DecodeOut {
    pub chunk: Tensor,
    pub coords: NodeId,
    pub diags: Vec<LayerDiag>,
}

/// Single-pass parallel decode: append all K·D placeholder rows, run the
/// stack once, normalize the action-row states, regress one coordinate per
/// action position, reshape to [K,D]. When `squash_gripper` is set, every
/// D-th coordinate starting at index 6 (the gripper channel of the
/// 7-coordinate layout) is passed through the logistic function.
#[allow(clippy::too_many_arguments)]
pub fn parallel_decode(
    tape: &mut Tape,
    store: &ParamStore,
    stack: &VlaStack,
    slots: &ActionSlots,
    head: &Linear,
    context: NodeId,
    layout_vl: (usize, usize, Vec<usize>),
    k: usize,
    d_act: usize,
    squash_gripper: bool,
) -> Result<DecodeOut> {
    let (m, t, instr_live) = layout_vl;
    let kd = k * d_act;
    if slots.slots() != kd {
        return Err(Error::contract(
            "parallel_decode",
            format!("{} slots for K·D = {kd}", slots.slots()),
        ));
    }
    let ph = slots.placeholders(tape, store)?;
    let x0 = tape.concat_rows(&[context, ph])?;
    let layout = StackLayout { m, t, kd, instr_live, actions_causal: false };
    let (out, diags) = stack.forward(tape, store, x0, &layout)?;
    let act_rows = tape.gather_rows(out, (m + t..m + t + kd).collect())?;
    let act_rows = stack.final_ln.apply(tape, store, act_rows)?;
    let mut coords = head.apply(tape, store, act_rows)?;
    if squash_gripper {
        coords = squash_every_dth(tape, coords, d_act, 6)?;
    }
    let vals = tape.value(coords);
    let chunk = Tensor::from_vec(&[k, d_act], vals.data().to_vec())?;
    if !chunk.all_finite() {
        return Err(Error::NonFinite { context: "parallel_decode chunk".into() });
    }
    Ok(DecodeOut { chunk, coords, diags })
}

/// Reference autoregressive decoder: K·D stack passes, one new coordinate
/// per pass, causal masking over previously generated action slots. Not a
/// training path and not output-equivalent to the parallel decoder; it exists
/// to make the pass-count and compute comparison concrete.
#[allow(clippy::too_many_arguments)]
pub fn ar_decode_reference(
    tape: &mut Tape,
    store: &ParamStore,
    stack: &VlaStack,
    slots: &ActionSlots,
    head: &Linear,
    context: NodeId,
    layout_vl: (usize, usize, Vec<usize>),
    k: usize,
    d_act: usize,
    squash_gripper: bool,
) -> Result<Tensor> {
    let (m, t, instr_live) = layout_vl;
    let kd = k * d_act;
    if slots.slots() != kd {
        return Err(Error::contract(
            "ar_decode_reference",
            format!("{} slots for K·D = {kd}", slots.slots()),
        ));
    }
    let mut values: Vec<f64> = Vec::with_capacity(kd);
    for s in 0..kd {
        let act = slots.ar_rows(store, &values, s)?;
        let act_node = tape.input(act);
        let x0 = tape.concat_rows(&[context, act_node])?;
        let layout = StackLayout {
            m,
            t,
            kd: s + 1,
            instr_live: instr_live.clone(),
            actions_causal: true,
        };
        let (out, _) = stack.forward(tape, store, x0, &layout)?;
        let slot_row = tape.gather_rows(out, vec![m + t + s])?;
        let slot_row = stack.final_ln.apply(tape, store, slot_row)?;
        let coord = head.apply(tape, store, slot_row)?;
        let mut v = tape.value(coord).get2(0, 0);
        if squash_gripper && s % d_act == 6 {
            v = crate::nn::sigmoid_scalar(v);
        }
        if !v.is_finite() {
            return Err(Error::NonFinite { context: format!("ar_decode coordinate {s}") });
        }
        values.push(v);
    }
    Tensor::from_vec(&[k, d_act], values)
}

/// Sigmoid on rows i with i % d == which, leaving other rows untouched.
pub(crate) fn squash_every_dth(tape: &mut Tape, x: NodeId, d: usize, which: usize) -> Result<NodeId> {
    let rows = tape.value(x).rows();
    let idx: Vec<usize> = (0..rows).filter(|i| i % d == which).collect();
    if idx.is_empty() {
        return Ok(x);
    }
    let picked = tape.gather_rows(x, idx.clone())?;
    let squashed = tape.sigmoid(picked);
    tape.paste_rows(x, squashed, idx)
}
