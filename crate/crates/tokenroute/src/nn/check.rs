//! Central-difference gradient checking against the tape's analytic
//! gradients. Used both as a unit-level oracle for every primitive and as
//! the full-pipeline acceptance gate.

use crate::error::{Error, Result};
use crate::nn::param::ParamStore;
use crate::nn::tape::{NodeId, Tape};

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Compares analytic parameter gradients of a scalar loss against central
/// finite differences.
///
/// `build` runs the forward pass against the current parameter values and
/// returns the tape plus the scalar loss node; it is re-invoked for every
/// probe, so it must be deterministic. Relative error per coordinate is
/// |a − n| / max(|a|, |n|, 1e-8). When the model has at most `max_coords`
/// scalar parameters, every coordinate is probed; otherwise the budget goes
/// to the `max_coords` coordinates with the largest analytic gradient
/// magnitude across the whole model. A central difference carries f64
/// rounding noise of about |loss|·1e-16/eps on the numeric value, so probing
/// a coordinate whose true gradient sits near that floor measures probe
/// noise rather than gradient correctness — the dominant directions are the
/// informative ones, and per-primitive unit tests cover every coordinate of
/// small tensors exactly.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    mut build: F,
    eps: f64,
    max_coords: usize,
) -> Result<FdReport>
where
    F: FnMut(&ParamStore) -> Result<(Tape, NodeId)>,
{
    if eps <= 0.0 {
        return Err(Error::contract("finite_difference_check", "eps must be positive"));
    }
    store.zero_grads();
    let (mut tape, loss) = build(store)?;
    let base = tape.value(loss).item()?;
    if !base.is_finite() {
        return Err(Error::NonFinite { context: "finite_difference_check loss".into() });
    }
    tape.backward(loss, store)?;
    let analytic: Vec<_> = store.ids().map(|id| store.grad(id).clone()).collect();

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        coords_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    let total: usize = ids.iter().map(|&id| store.value(id).len()).sum();
    // (param slot, coordinate) pairs to probe, grouped per param in order.
    let mut plan: Vec<(usize, Vec<usize>)> = Vec::new();
    if total <= max_coords {
        for (slot, &id) in ids.iter().enumerate() {
            plan.push((slot, (0..store.value(id).len()).collect()));
        }
    } else {
        let mut all: Vec<(usize, usize)> = Vec::with_capacity(total);
        for (slot, &id) in ids.iter().enumerate() {
            all.extend((0..store.value(id).len()).map(|c| (slot, c)));
        }
        all.sort_by(|&(sa, ca), &(sb, cb)| {
            let ga = analytic[ids[sa].0].data()[ca].abs();
            let gb = analytic[ids[sb].0].data()[cb].abs();
            gb.partial_cmp(&ga).unwrap().then((sa, ca).cmp(&(sb, cb)))
        });
        all.truncate(max_coords);
        all.sort_unstable();
        for (slot, c) in all {
            match plan.last_mut() {
                Some((s, cs)) if *s == slot => cs.push(c),
                _ => plan.push((slot, vec![c])),
            }
        }
    }
    for (slot, coords) in plan {
        let id = ids[slot];
        for c in coords {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + eps;
            let (tp, lp) = build(store)?;
            let plus = tp.value(lp).item()?;
            store.value_mut(id).data_mut()[c] = orig - eps;
            let (tm, lm) = build(store)?;
            let minus = tm.value(lm).item()?;
            store.value_mut(id).data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.0].data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_coord = c;
            }
        }
    }
    Ok(report)
}
