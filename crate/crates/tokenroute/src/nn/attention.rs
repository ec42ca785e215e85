//! Scaled dot-product attention with an additive mask.

use crate::error::{Error, Result};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor;

/// softmax(Q·Kᵀ/√d_k + mask)·V on the tape.
///
/// The mask is additive with entries exactly 0 (allowed) or −inf (blocked);
/// `None` behaves as the all-zero mask, sharing the same code path so the
/// two are bitwise identical. A row with every key blocked is rejected
/// before any arithmetic — softmax over an empty support has no value.
pub fn masked_scaled_dot_attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<&Tensor>,
) -> Result<NodeId> {
    let (n, dk) = rank2(tape, q, "query")?;
    let (m, dk2) = rank2(tape, k, "key")?;
    let (mv, _dv) = rank2(tape, v, "value")?;
    if dk != dk2 {
        return Err(Error::shape(
            "masked_scaled_dot_attention",
            format!("query width {dk} vs key width {dk2}"),
        ));
    }
    if m != mv {
        return Err(Error::shape(
            "masked_scaled_dot_attention",
            format!("{m} keys vs {mv} value rows"),
        ));
    }
    let mask_t = match mask {
        Some(t) => {
            if t.shape() != [n, m] {
                return Err(Error::shape(
                    "masked_scaled_dot_attention",
                    format!("mask {:?} for {n} queries × {m} keys", t.shape()),
                ));
            }
            for (pos, &e) in t.data().iter().enumerate() {
                if e != 0.0 && e != f64::NEG_INFINITY {
                    return Err(Error::contract(
                        "masked_scaled_dot_attention",
                        format!("mask entry {e} at flat index {pos}; entries must be 0 or -inf"),
                    ));
                }
            }
            for row in 0..n {
                if t.row(row).iter().all(|&e| e == f64::NEG_INFINITY) {
                    return Err(Error::BlockedRow { row });
                }
            }
            t.clone()
        }
        None => Tensor::zeros(&[n, m]),
    };

    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let mask_node = tape.input(mask_t);
    let logits = tape.add(scaled, mask_node)?;
    let probs = tape.softmax(logits)?;
    tape.matmul(probs, v)
}

fn rank2(tape: &Tape, id: NodeId, what: &str) -> Result<(usize, usize)> {
    let t = tape.value(id);
    if t.rank() != 2 {
        return Err(Error::shape(
            "masked_scaled_dot_attention",
            format!("{what} must be rank 2, got {:?}", t.shape()),
        ));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randt(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(shape, 1.0, rng)
    }

    /// Independent oracle: per-query explicit softmax loop, no tape.
    fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, mask: &Tensor) -> Tensor {
        let (n, dk) = (q.rows(), q.cols());
        let m = k.rows();
        let dv = v.cols();
        let mut out = Tensor::zeros(&[n, dv]);
        for i in 0..n {
            let mut logits = vec![0.0; m];
            for j in 0..m {
                let dot: f64 = (0..dk).map(|t| q.get2(i, t) * k.get2(j, t)).sum();
                logits[j] = dot / (dk as f64).sqrt() + mask.get2(i, j);
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..m {
                let w = exps[j] / sum;
                for t in 0..dv {
                    out.set2(i, t, out.get2(i, t) + w * v.get2(j, t));
                }
            }
        }
        out
    }

    #[test]
    fn matches_explicit_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let q = randt(&[3, 4], &mut rng);
            let k = randt(&[5, 4], &mut rng);
            let v = randt(&[5, 2], &mut rng);
            let mut mask = Tensor::zeros(&[3, 5]);
            mask.set2(0, 4, f64::NEG_INFINITY);
            mask.set2(2, 0, f64::NEG_INFINITY);
            mask.set2(2, 1, f64::NEG_INFINITY);

            let mut tape = Tape::new();
            let (qi, ki, vi) = (tape.input(q.clone()), tape.input(k.clone()), tape.input(v.clone()));
            let out = masked_scaled_dot_attention(&mut tape, qi, ki, vi, Some(&mask)).unwrap();
            let want = attention_oracle(&q, &k, &v, &mask);
            for (a, b) in tape.value(out).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_mask_bitwise_equals_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = randt(&[4, 6], &mut rng);
        let k = randt(&[4, 6], &mut rng);
        let v = randt(&[4, 3], &mut rng);

        let mut t1 = Tape::new();
        let (a, b, c) = (t1.input(q.clone()), t1.input(k.clone()), t1.input(v.clone()));
        let o1 = masked_scaled_dot_attention(&mut t1, a, b, c, None).unwrap();

        let mut t2 = Tape::new();
        let (a, b, c) = (t2.input(q), t2.input(k), t2.input(v));
        let zero = Tensor::zeros(&[4, 4]);
        let o2 = masked_scaled_dot_attention(&mut t2, a, b, c, Some(&zero)).unwrap();

        assert_eq!(t1.value(o1).data(), t2.value(o2).data());
    }

    #[test]
    fn single_allowed_key_returns_value_row_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = randt(&[2, 4], &mut rng);
        let k = randt(&[3, 4], &mut rng);
        let v = randt(&[3, 4], &mut rng);
        let mut mask = Tensor::zeros(&[2, 3]);
        // Query 0 may only see key 1.
        mask.set2(0, 0, f64::NEG_INFINITY);
        mask.set2(0, 2, f64::NEG_INFINITY);

        let mut tape = Tape::new();
        let (a, b, c) = (tape.input(q), tape.input(k), tape.input(v.clone()));
        let out = masked_scaled_dot_attention(&mut tape, a, b, c, Some(&mask)).unwrap();
        assert_eq!(tape.value(out).row(0), v.row(1));
    }

    #[test]
    fn fully_blocked_row_is_hard_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = randt(&[2, 4], &mut rng);
        let k = randt(&[3, 4], &mut rng);
        let v = randt(&[3, 4], &mut rng);
        let mut mask = Tensor::zeros(&[2, 3]);
        for j in 0..3 {
            mask.set2(1, j, f64::NEG_INFINITY);
        }
        let mut tape = Tape::new();
        let (a, b, c) = (tape.input(q), tape.input(k), tape.input(v));
        let err = masked_scaled_dot_attention(&mut tape, a, b, c, Some(&mask)).unwrap_err();
        assert!(matches!(err, Error::BlockedRow { row: 1 }));
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = randt(&[2, 4], &mut rng);
        let k = randt(&[3, 5], &mut rng);
        let v = randt(&[3, 4], &mut rng);
        let mut tape = Tape::new();
        let (a, b, c) = (tape.input(q), tape.input(k), tape.input(v));
        assert!(masked_scaled_dot_attention(&mut tape, a, b, c, None).is_err());
    }
}
