//! Stage 1: instruction-conditioned aggregation of visual patch tokens.
//!
//! Each branch appends G learned aggregation slots to its patch sequence and
//! runs joint unmasked self-attention blocks; FiLM maps derived from the
//! pooled instruction modulate every attention output, so what the slots
//! soak up depends on what was asked. The two branches' slot outputs are
//! fused by a scalar instruction gate. With `agg_tokens = 0` the branch
//! degrades to a plain patch encoder (passthrough: no slots, no FiLM).

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    expand_idx, masked_scaled_dot_attention, tile_idx, GeluMlp, Linear, NodeId, ParamStore, Tape,
    Tensor, INIT_STD,
};
use crate::sparsity::film_modulate;

/// One encoder block: joint self-attention, FiLM on the attention output,
/// feed-forward, single residual. Norm-free on purpose — the composition is
/// exactly attention → modulate → FFN, which keeps the block equal to its
/// step-by-step oracle and is stable at the shallow depths used here.
#[derive(Debug, Clone, Copy)]
pub struct EncBlock {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ffn1: Linear,
    ffn2: Linear,
    /// Affine maps pooled-instruction → γ/β. Absent in passthrough blocks.
    film: Option<(Linear, Linear)>,
}

impl EncBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        ffn: usize,
        d_instr: usize,
        film: FilmMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let film = match film {
            FilmMode::Own => Some((
                Linear::new(store, &format!("{prefix}.film_scale"), d_instr, d, true, rng)?,
                Linear::new(store, &format!("{prefix}.film_shift"), d_instr, d, true, rng)?,
            )),
            FilmMode::Shared(maps) => Some(maps),
            FilmMode::None => None,
        };
        Ok(EncBlock {
            wq: Linear::new(store, &format!("{prefix}.wq"), d, d, false, rng)?,
            wk: Linear::new(store, &format!("{prefix}.wk"), d, d, false, rng)?,
            wv: Linear::new(store, &format!("{prefix}.wv"), d, d, false, rng)?,
            wo: Linear::new(store, &format!("{prefix}.wo"), d, d, false, rng)?,
            ffn1: Linear::new(store, &format!("{prefix}.ffn1"), d, ffn, true, rng)?,
            ffn2: Linear::new(store, &format!("{prefix}.ffn2"), ffn, d, true, rng)?,
            film,
        })
    }

    /// x + FFN(FiLM(SelfAtt(x))). `instr` is the pooled instruction [1,d_instr];
    /// it is ignored by passthrough blocks.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        instr: NodeId,
    ) -> Result<NodeId> {
        let q = self.wq.apply(tape, store, x)?;
        let k = self.wk.apply(tape, store, x)?;
        let v = self.wv.apply(tape, store, x)?;
        let att = masked_scaled_dot_attention(tape, q, k, v, None)?;
        let att = self.wo.apply(tape, store, att)?;
        let modulated = match &self.film {
            Some((fs, fb)) => {
                let gamma = fs.apply(tape, store, instr)?;
                let beta = fb.apply(tape, store, instr)?;
                film_modulate(tape, att, gamma, beta)?
            }
            None => att,
        };
        let h = self.ffn1.apply(tape, store, modulated)?;
        let h = tape.gelu(h);
        let update = self.ffn2.apply(tape, store, h)?;
        tape.add(x, update)
    }

    /// `forward` over `b` sample blocks in one graph. Rows of `x` are the
    /// samples' sequences stacked; `instr` holds one pooled instruction row
    /// per sample. Per block this composes the same ops as `forward`.
    pub(crate) fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        instr: NodeId,
        b: usize,
    ) -> Result<NodeId> {
        let rows = tape.value(x).rows();
        let rows_per = rows / b;
        let q = self.wq.apply(tape, store, x)?;
        let k = self.wk.apply(tape, store, x)?;
        let v = self.wv.apply(tape, store, x)?;
        let zero = Tensor::zeros(&[rows_per, rows_per]);
        let masks: Vec<Tensor> = (0..b).map(|_| zero.clone()).collect();
        let att = tape.block_attention(q, k, v, &masks)?;
        let att = self.wo.apply(tape, store, att)?;
        let modulated = match &self.film {
            Some((fs, fb)) => {
                let gamma = fs.apply(tape, store, instr)?;
                let beta = fb.apply(tape, store, instr)?;
                // (1+γ)⊙x + β with per-sample rows: expand the [b,d] FiLM
                // outputs to one row per token, then the same mul/add chain
                // as the broadcast form.
                let ge = tape.gather_rows(gamma, expand_idx(b, rows_per))?;
                let be = tape.gather_rows(beta, expand_idx(b, rows_per))?;
                let scaled = tape.mul(att, ge)?;
                let plus = tape.add(att, scaled)?;
                tape.add(plus, be)?
            }
            None => att,
        };
        let h = self.ffn1.apply(tape, store, modulated)?;
        let h = tape.gelu(h);
        let update = self.ffn2.apply(tape, store, h)?;
        tape.add(x, update)
    }

    /// Final-block attention probabilities of the aggregation rows over the
    /// patch keys, renormalized to the patch columns (softmax restricted to
    /// patch logits). Rows sum to 1.
    pub fn agg_patch_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        patches: usize,
        slots: usize,
    ) -> Result<Tensor> {
        let q = self.wq.apply(tape, store, x)?;
        let k = self.wk.apply(tape, store, x)?;
        let qv = tape.value(q).clone();
        let kv = tape.value(k).clone();
        let d = qv.cols();
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Tensor::zeros(&[slots, patches]);
        for s in 0..slots {
            let qrow = qv.row(patches + s);
            let mut logits = vec![0.0; patches];
            for p in 0..patches {
                logits[p] = qrow.iter().zip(kv.row(p)).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - mx).exp();
                sum += *l;
            }
            for (p, l) in logits.iter().enumerate() {
                out.set2(s, p, l / sum);
            }
        }
        Ok(out)
    }
}

enum FilmMode {
    Own,
    Shared((Linear, Linear)),
    None,
}

/// One visual encoder branch.
#[derive(Debug)]
pub struct EncoderBranch {
    pub in_proj: Linear,
    /// Learned absolute positions for patch rows only ([P, d]).
    pub pos: crate::nn::ParamId,
    /// Learned initial aggregation slots ([G, d]); None in passthrough.
    pub agg_init: Option<crate::nn::ParamId>,
    pub blocks: Vec<EncBlock>,
    pub out_proj: Linear,
    patches: usize,
    dim: usize,
}

pub struct BranchSpec {
    pub patches: usize,
    /// Patch grid extents (rows, cols); patches = rows · cols.
    pub grid: (usize, usize),
    pub patch_feat: usize,
    pub dim: usize,
    pub ffn: usize,
    pub depth: usize,
    pub agg_tokens: usize,
    pub d_model: usize,
    pub film_shared: bool,
}

impl EncoderBranch {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spec: &BranchSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if spec.depth == 0 || spec.patches == 0 {
            return Err(Error::contract("EncoderBranch", "depth and patch count must be positive"));
        }
        let in_proj =
            Linear::new(store, &format!("{prefix}.in_proj"), spec.patch_feat, spec.dim, true, rng)?;
        debug_assert_eq!(spec.patches, spec.grid.0 * spec.grid.1);
        // Positions start with explicit centered-coordinate channels so cell
        // location is linearly readable at step 0; decoding a random learned
        // position code costs more optimization steps than toy-budget
        // training runs have. The channels stay learnable like the rest.
        const POS_SCALE: f64 = 0.25;
        let mut pos_init = Tensor::randn(&[spec.patches, spec.dim], INIT_STD, rng);
        let (gh, gw) = spec.grid;
        for r in 0..gh {
            for c in 0..gw {
                let row = pos_init.row_mut(r * gw + c);
                row[0] = (r as f64 - (gh as f64 - 1.0) / 2.0) * POS_SCALE;
                row[1] = (c as f64 - (gw as f64 - 1.0) / 2.0) * POS_SCALE;
            }
        }
        let pos = store.add(format!("{prefix}.pos"), pos_init)?;
        let agg_init = if spec.agg_tokens > 0 {
            Some(store.add(
                format!("{prefix}.agg_init"),
                Tensor::randn(&[spec.agg_tokens, spec.dim], INIT_STD, rng),
            )?)
        } else {
            None
        };
        let shared_film = if spec.agg_tokens > 0 && spec.film_shared {
            Some((
                Linear::new(store, &format!("{prefix}.film_scale"), spec.d_model, spec.dim, true, rng)?,
                Linear::new(store, &format!("{prefix}.film_shift"), spec.d_model, spec.dim, true, rng)?,
            ))
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(spec.depth);
        for b in 0..spec.depth {
            let mode = if spec.agg_tokens == 0 {
                FilmMode::None
            } else if let Some(maps) = shared_film {
                FilmMode::Shared(maps)
            } else {
                FilmMode::Own
            };
            blocks.push(EncBlock::new(
                store,
                &format!("{prefix}.block{b}"),
                spec.dim,
                spec.ffn,
                spec.d_model,
                mode,
                rng,
            )?);
        }
        let out_proj =
            Linear::new(store, &format!("{prefix}.out_proj"), spec.dim, spec.d_model, true, rng)?;
        Ok(EncoderBranch {
            in_proj,
            pos,
            agg_init,
            blocks,
            out_proj,
            patches: spec.patches,
            dim: spec.dim,
        })
    }

    /// Patch features [P, patch_feat] + pooled instruction [1, d_model] →
    /// visual tokens at LLM width: [G, d_model] aggregated, or
    /// [P, d_model] passthrough.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        patch_feats: &Tensor,
        instr: NodeId,
    ) -> Result<NodeId> {
        if patch_feats.shape()[0] != self.patches {
            return Err(Error::shape(
                "encode",
                format!("{} patch rows, branch expects {}", patch_feats.shape()[0], self.patches),
            ));
        }
        let x = tape.input(patch_feats.clone());
        let x = self.in_proj.apply(tape, store, x)?;
        let pos = tape.param(store, self.pos);
        let x = tape.add(x, pos)?;
        let mut seq = match self.agg_init {
            Some(agg) => {
                let slots = tape.param(store, agg);
                tape.concat_rows(&[x, slots])?
            }
            None => x,
        };
        for block in &self.blocks {
            seq = block.forward(tape, store, seq, instr)?;
        }
        let rows = match self.agg_init {
            Some(_) => {
                let g = tape.value(seq).rows() - self.patches;
                tape.gather_rows(seq, (self.patches..self.patches + g).collect())?
            }
            None => seq,
        };
        self.out_proj.apply(tape, store, rows)
    }

    /// `encode` over `b` samples in one graph. `patch_feats` stacks each
    /// sample's [P, patch_feat] block; `instr` is [b, d_model], one pooled
    /// instruction row per sample. Output rows are sample-blocked: b·G
    /// aggregated or b·P passthrough.
    pub(crate) fn encode_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        patch_feats: &Tensor,
        instr: NodeId,
        b: usize,
    ) -> Result<NodeId> {
        if patch_feats.shape()[0] != b * self.patches {
            return Err(Error::shape(
                "encode_batch",
                format!(
                    "{} patch rows, {b} samples of {} expected",
                    patch_feats.shape()[0],
                    self.patches
                ),
            ));
        }
        let x = tape.input(patch_feats.clone());
        let x = self.in_proj.apply(tape, store, x)?;
        let pos = tape.param(store, self.pos);
        let pos_tile = tape.gather_rows(pos, tile_idx(b, self.patches))?;
        let x = tape.add(x, pos_tile)?;
        let mut seq = match self.agg_init {
            Some(agg) => {
                let slots = tape.param(store, agg);
                let g = store.value(agg).rows();
                let slot_tile = tape.gather_rows(slots, tile_idx(b, g))?;
                let cat = tape.concat_rows(&[x, slot_tile])?;
                // Interleave into per-sample [patches_i; slots_i] blocks.
                let mut idx = Vec::with_capacity(b * (self.patches + g));
                for i in 0..b {
                    idx.extend(i * self.patches..(i + 1) * self.patches);
                    idx.extend(b * self.patches + i * g..b * self.patches + (i + 1) * g);
                }
                tape.gather_rows(cat, idx)?
            }
            None => x,
        };
        for block in &self.blocks {
            seq = block.forward_batch(tape, store, seq, instr, b)?;
        }
        let rows = match self.agg_init {
            Some(agg) => {
                let g = store.value(agg).rows();
                let per = self.patches + g;
                let mut idx = Vec::with_capacity(b * g);
                for i in 0..b {
                    idx.extend(i * per + self.patches..(i + 1) * per);
                }
                tape.gather_rows(seq, idx)?
            }
            None => seq,
        };
        self.out_proj.apply(tape, store, rows)
    }

    /// Run the blocks and return the final block's slot→patch attention map.
    pub fn attention_map(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        patch_feats: &Tensor,
        instr: NodeId,
    ) -> Result<Tensor> {
        let slots = match self.agg_init {
            Some(p) => store.value(p).rows(),
            None => {
                return Err(Error::contract(
                    "attention_map",
                    "passthrough branch has no aggregation slots",
                ))
            }
        };
        let x = tape.input(patch_feats.clone());
        let x = self.in_proj.apply(tape, store, x)?;
        let pos = tape.param(store, self.pos);
        let x = tape.add(x, pos)?;
        let agg = tape.param(store, self.agg_init.unwrap());
        let mut seq = tape.concat_rows(&[x, agg])?;
        for block in &self.blocks[..self.blocks.len() - 1] {
            seq = block.forward(tape, store, seq, instr)?;
        }
        self.blocks
            .last()
            .unwrap()
            .agg_patch_attention(tape, store, seq, self.patches, slots)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Scalar instruction gate α = Sigmoid(W₂·GeLU(W₁·t + b₁) + b₂).
#[derive(Debug, Clone, Copy)]
pub struct Gate {
    mlp: GeluMlp,
}

impl Gate {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Gate { mlp: GeluMlp::new(store, prefix, d, hidden, 1, rng)? })
    }

    /// Pooled instruction [1,d] → α in (0,1) as a [1,1] node.
    pub fn alpha(&self, tape: &mut Tape, store: &ParamStore, instr: NodeId) -> Result<NodeId> {
        let logit = self.mlp.apply(tape, store, instr)?;
        Ok(tape.sigmoid(logit))
    }
}

/// α·a + (1−α)·b. Computed as two scalar-broadcast products plus one add so
/// that tying the branches and fixing α = ½ makes the fusion exactly
/// symmetric under swapping a and b.
pub fn fuse_branches(tape: &mut Tape, a: NodeId, b: NodeId, alpha: NodeId) -> Result<NodeId> {
    let (ar, ac) = shape2(tape, a);
    let (br, bc) = shape2(tape, b);
    if (ar, ac) != (br, bc) {
        return Err(Error::shape("fuse_branches", format!("[{ar},{ac}] vs [{br},{bc}]")));
    }
    let one = tape.input(Tensor::scalar(1.0));
    let complement = tape.sub(one, alpha)?;
    let wa = tape.mul_scalar_t(a, alpha)?;
    let wb = tape.mul_scalar_t(b, complement)?;
    tape.add(wa, wb)
}

/// `fuse_branches` with per-sample gates: `alpha` is [b,1] and `a`/`b` are
/// sample-blocked with `rows_per` rows each. Row r is weighted by its own
/// sample's α.
pub(crate) fn fuse_branches_batch(
    tape: &mut Tape,
    a: NodeId,
    b: NodeId,
    alpha: NodeId,
    rows_per: usize,
) -> Result<NodeId> {
    let (ar, ac) = shape2(tape, a);
    let (br, bc) = shape2(tape, b);
    if (ar, ac) != (br, bc) {
        return Err(Error::shape("fuse_branches_batch", format!("[{ar},{ac}] vs [{br},{bc}]")));
    }
    let bsz = tape.value(alpha).rows();
    if bsz * rows_per != ar {
        return Err(Error::shape(
            "fuse_branches_batch",
            format!("{bsz} gates x {rows_per} rows != {ar} branch rows"),
        ));
    }
    let one = tape.input(Tensor::from_vec(&[bsz, 1], vec![1.0; bsz])?);
    let complement = tape.sub(one, alpha)?;
    let ae = tape.gather_rows(alpha, expand_idx(bsz, rows_per))?;
    let ce = tape.gather_rows(complement, expand_idx(bsz, rows_per))?;
    let wa = tape.scale_rows(a, ae)?;
    let wb = tape.scale_rows(b, ce)?;
    tape.add(wa, wb)
}

/// N-branch generalization: softmax weights over per-branch logits from one
/// MLP, combined as Σ α_i·branch_i. Secondary code path; the two-branch
/// pipeline uses the sigmoid gate.
#[derive(Debug, Clone, Copy)]
pub struct MultiGate {
    mlp: GeluMlp,
}

impl MultiGate {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        branches: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if branches < 2 {
            return Err(Error::contract("MultiGate", "need at least two branches"));
        }
        Ok(MultiGate { mlp: GeluMlp::new(store, prefix, d, hidden, branches, rng)? })
    }

    /// Pooled instruction [1,d] → weights [1,N], nonnegative, summing to 1.
    pub fn weights(&self, tape: &mut Tape, store: &ParamStore, instr: NodeId) -> Result<NodeId> {
        let logits = self.mlp.apply(tape, store, instr)?;
        tape.softmax(logits)
    }

    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        instr: NodeId,
        branches: &[NodeId],
    ) -> Result<NodeId> {
        let w = self.weights(tape, store, instr)?;
        let n = tape.value(w).cols();
        if n != branches.len() {
            return Err(Error::shape(
                "MultiGate::fuse",
                format!("{n} weights for {} branches", branches.len()),
            ));
        }
        let mut acc: Option<NodeId> = None;
        for (i, &b) in branches.iter().enumerate() {
            // Pick weight i as a [1,1] scalar via a one-hot column so that the
            // gate stays on the differentiable path.
            let mut hot = Tensor::zeros(&[n, 1]);
            hot.set2(i, 0, 1.0);
            let hot = tape.input(hot);
            let wi = tape.matmul(w, hot)?;
            let term = tape.mul_scalar_t(b, wi)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        Ok(acc.unwrap())
    }
}

fn shape2(tape: &Tape, id: NodeId) -> (usize, usize) {
    let s = tape.value(id).shape();
    (s[0], s[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_spec(agg: usize) -> BranchSpec {
        BranchSpec {
            patches: 4,
            grid: (2, 2),
            patch_feat: 6,
            dim: 8,
            ffn: 16,
            depth: 2,
            agg_tokens: agg,
            d_model: 8,
            film_shared: false,
        }
    }

    fn pooled(tape: &mut Tape, d: usize, seed: u64) -> NodeId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tape.input(Tensor::randn(&[1, d], 1.0, &mut rng))
    }

    #[test]
    fn output_shape_and_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let branch = EncoderBranch::new(&mut store, "b0", &toy_spec(2), &mut rng).unwrap();
        let feats = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let instr = pooled(&mut tape, 8, 2);
        let out = branch.encode(&mut tape, &store, &feats, instr).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 8]);
        assert!(tape.value(out).all_finite());
    }

    #[test]
    fn zero_film_makes_output_instruction_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let branch = EncoderBranch::new(&mut store, "b0", &toy_spec(2), &mut rng).unwrap();
        // Zero every FiLM map.
        for id in store.ids() {
            if store.name(id).contains("film") {
                store.value_mut(id).data_mut().fill(0.0);
            }
        }
        let feats = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let run = |seed: u64, store: &ParamStore| {
            let mut tape = Tape::new();
            let instr = pooled(&mut tape, 8, seed);
            let out = branch.encode(&mut tape, store, &feats, instr).unwrap();
            tape.value(out).clone()
        };
        let a = run(10, &store);
        let b = run(11, &store);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_everything_leaves_slots_at_init() {
        // Zero FiLM + zero attention/FFN weights → pure residual: the slot
        // outputs equal out_proj(agg_init).
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let branch = EncoderBranch::new(&mut store, "b0", &toy_spec(2), &mut rng).unwrap();
        for id in store.ids() {
            let name = store.name(id).to_string();
            if ["film", ".wq", ".wk", ".wv", ".wo", ".ffn"].iter().any(|p| name.contains(p)) {
                store.value_mut(id).data_mut().fill(0.0);
            }
        }
        let feats = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let instr = pooled(&mut tape, 8, 5);
        let out = branch.encode(&mut tape, &store, &feats, instr).unwrap();

        let mut tape2 = Tape::new();
        let slots = tape2.param(&store, branch.agg_init.unwrap());
        let want = branch.out_proj.apply(&mut tape2, &store, slots).unwrap();
        assert_eq!(tape.value(out).data(), tape2.value(want).data());
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        // With positions zeroed, permuting patches leaves slot outputs
        // unchanged (joint attention is permutation-invariant in its keys).
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let branch = EncoderBranch::new(&mut store, "b0", &toy_spec(2), &mut rng).unwrap();
        store.value_mut(branch.pos).data_mut().fill(0.0);
        let feats = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let mut permuted = Tensor::zeros(&[4, 6]);
        for (dst, src) in [0usize, 2, 3, 1].iter().enumerate() {
            permuted.row_mut(dst).copy_from_slice(feats.row(*src));
        }
        let run = |f: &Tensor, store: &ParamStore| {
            let mut tape = Tape::new();
            let instr = pooled(&mut tape, 8, 7);
            let out = branch.encode(&mut tape, store, f, instr).unwrap();
            tape.value(out).clone()
        };
        let a = run(&feats, &store);
        let b = run(&permuted, &store);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn block_matches_step_by_step_oracle() {
        // One block, P=2, G=1, hand-set weights: compose attention, FiLM,
        // FFN by hand through tape primitives and compare.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let block = EncBlock::new(&mut store, "blk", 4, 8, 4, FilmMode::Own, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let instr_t = Tensor::randn(&[1, 4], 1.0, &mut rng);

        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let instr = tape.input(instr_t.clone());
        let got = block.forward(&mut tape, &store, xi, instr).unwrap();

        let mut t2 = Tape::new();
        let xi2 = t2.input(x);
        let in2 = t2.input(instr_t);
        let q = block.wq.apply(&mut t2, &store, xi2).unwrap();
        let k = block.wk.apply(&mut t2, &store, xi2).unwrap();
        let v = block.wv.apply(&mut t2, &store, xi2).unwrap();
        let att = masked_scaled_dot_attention(&mut t2, q, k, v, None).unwrap();
        let att = block.wo.apply(&mut t2, &store, att).unwrap();
        let (fs, fb) = block.film.as_ref().unwrap();
        let gamma = fs.apply(&mut t2, &store, in2).unwrap();
        let beta = fb.apply(&mut t2, &store, in2).unwrap();
        let mo = film_modulate(&mut t2, att, gamma, beta).unwrap();
        let h = block.ffn1.apply(&mut t2, &store, mo).unwrap();
        let h = t2.gelu(h);
        let u = block.ffn2.apply(&mut t2, &store, h).unwrap();
        let want = t2.add(xi2, u).unwrap();

        assert_eq!(tape.value(got).data(), t2.value(want).data());
    }

    #[test]
    fn gate_zero_weights_give_exactly_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let gate = Gate::new(&mut store, "gate", 8, 8, &mut rng).unwrap();
        for id in store.ids() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let instr = pooled(&mut tape, 8, 1);
        let alpha = gate.alpha(&mut tape, &store, instr).unwrap();
        assert_eq!(tape.value(alpha).item().unwrap(), 0.5);
    }

    #[test]
    fn fusion_is_convex_and_symmetric_at_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        for alpha in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let mut tape = Tape::new();
            let an = tape.input(a.clone());
            let bn = tape.input(b.clone());
            let al = tape.input(Tensor::scalar(alpha));
            let f = fuse_branches(&mut tape, an, bn, al).unwrap();
            for ((fv, av), bv) in tape.value(f).data().iter().zip(a.data()).zip(b.data()) {
                let want = alpha * av + (1.0 - alpha) * bv;
                assert!((fv - want).abs() < 1e-15);
                let (lo, hi) = (av.min(*bv), av.max(*bv));
                assert!(*fv >= lo - 1e-12 && *fv <= hi + 1e-12);
            }
        }
        // α = ½ exactly: swapping the operands is bitwise neutral.
        let mut t1 = Tape::new();
        let (an, bn) = (t1.input(a.clone()), t1.input(b.clone()));
        let al = t1.input(Tensor::scalar(0.5));
        let f1 = fuse_branches(&mut t1, an, bn, al).unwrap();
        let mut t2 = Tape::new();
        let (bn2, an2) = (t2.input(b), t2.input(a));
        let al2 = t2.input(Tensor::scalar(0.5));
        let f2 = fuse_branches(&mut t2, bn2, an2, al2).unwrap();
        assert_eq!(t1.value(f1).data(), t2.value(f2).data());
    }

    #[test]
    fn alpha_extremes_select_single_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (an, bn) = (tape.input(a.clone()), tape.input(b.clone()));
        let one = tape.input(Tensor::scalar(1.0));
        let f = fuse_branches(&mut tape, an, bn, one).unwrap();
        for (fv, av) in tape.value(f).data().iter().zip(a.data()) {
            assert!((fv - av).abs() < 1e-15);
        }
        let mut tape = Tape::new();
        let (an, bn) = (tape.input(a), tape.input(b.clone()));
        let zero = tape.input(Tensor::scalar(0.0));
        let f = fuse_branches(&mut tape, an, bn, zero).unwrap();
        for (fv, bv) in tape.value(f).data().iter().zip(b.data()) {
            assert!((fv - bv).abs() < 1e-15);
        }
    }

    #[test]
    fn multi_gate_weights_form_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let mg = MultiGate::new(&mut store, "mg", 8, 8, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let instr = pooled(&mut tape, 8, 3);
        let w = mg.weights(&mut tape, &store, instr).unwrap();
        let wv = tape.value(w);
        assert_eq!(wv.shape(), &[1, 3]);
        let sum: f64 = wv.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(wv.data().iter().all(|&x| x > 0.0));
    }
}
