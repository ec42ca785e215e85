//! Evaluation and training harness over generated episodes.
//!
//! Evaluation reports two numbers. Chunk L1 is teacher-forced: the policy
//! predicts each chunk from the expert's own chunk-start states. Success
//! rate is closed-loop: the policy's predicted chunks are executed on the
//! world, it re-observes the states it causes, and the episode counts as
//! solved when the final state passes `success_check`. The closed-loop
//! rollout gets the same chunk budget the expert used.
//!
//! Mid-trace observations are re-rendered on the fly, so both paths need
//! the dataset's render seed. The seed is validated, not trusted: the
//! first episode's start state is re-rendered and compared bitwise to the
//! stored rendering, which catches a wrong seed before any metric is
//! computed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{train_step, Model, Sample, TrainState};
use crate::nn::Tensor;
use crate::task::{chunk_states, success_check, Episode, Renderer, SimState, TaskSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean absolute error per coordinate, teacher-forced over every
    /// (episode, chunk) pair.
    pub chunk_l1: f64,
    /// Fraction of episodes solved closed-loop.
    pub success_rate: f64,
    pub episodes: usize,
}

/// One observation request issued to a policy during evaluation.
pub struct EvalQuery<'a> {
    pub episode: usize,
    pub chunk_idx: usize,
    pub obs_a: &'a Tensor,
    pub obs_b: &'a Tensor,
    pub instruction: &'a [usize],
    /// False while scoring chunk L1 on expert states, true during the
    /// closed-loop rollout.
    pub closed_loop: bool,
}

/// Rebuild the featurizer for a dataset from its render seed and verify
/// it against the stored start-state rendering. The projections depend
/// only on (seed, patch width), so no other task parameters are needed.
pub fn renderer_for(episodes: &[Episode], render_seed: u64) -> Result<Renderer> {
    let ep = episodes
        .first()
        .ok_or_else(|| Error::contract("evaluate", "dataset has no episodes"))?;
    let spec =
        TaskSpec { patch_feat: ep.render_a.cols(), seed: render_seed, ..TaskSpec::default() };
    let renderer = Renderer::new(&spec);
    let start = SimState::new(ep.scene.clone());
    if renderer.render_patches(&start, 0) != ep.render_a
        || renderer.render_patches(&start, 1) != ep.render_b
    {
        return Err(Error::contract(
            "evaluate",
            "render seed does not reproduce the dataset's stored renderings; \
             pass the seed the dataset was generated with",
        ));
    }
    Ok(renderer)
}

/// Evaluate an arbitrary chunk policy. The policy sees exactly what a
/// model would: branch observations of the current state plus the
/// instruction. Evaluation is deterministic for a deterministic policy.
pub fn evaluate_policy<F>(
    episodes: &[Episode],
    render_seed: u64,
    mut policy: F,
) -> Result<EvalReport>
where
    F: FnMut(&EvalQuery) -> Result<Tensor>,
{
    let renderer = renderer_for(episodes, render_seed)?;
    let mut l1_sum = 0.0;
    let mut l1_chunks = 0usize;
    let mut successes = 0usize;
    for (ei, ep) in episodes.iter().enumerate() {
        let (k, d) = (ep.chunk_len(), ep.action_dim());
        for (ci, state) in chunk_states(ep).iter().enumerate() {
            let obs_a = renderer.render_patches(state, 0);
            let obs_b = renderer.render_patches(state, 1);
            let pred = policy(&EvalQuery {
                episode: ei,
                chunk_idx: ci,
                obs_a: &obs_a,
                obs_b: &obs_b,
                instruction: &ep.instruction,
                closed_loop: false,
            })?;
            if pred.shape() != [k, d] {
                return Err(Error::shape(
                    "evaluate",
                    format!("policy returned {:?}, expected [{k},{d}]", pred.shape()),
                ));
            }
            let gt = &ep.chunks[ci];
            let err: f64 =
                pred.data().iter().zip(gt.data()).map(|(p, t)| (p - t).abs()).sum();
            l1_sum += err / (k * d) as f64;
            l1_chunks += 1;
        }

        let mut state = SimState::new(ep.scene.clone());
        let mut trace = Vec::with_capacity(ep.chunks.len());
        for ci in 0..ep.chunks.len() {
            let obs_a = renderer.render_patches(&state, 0);
            let obs_b = renderer.render_patches(&state, 1);
            let pred = policy(&EvalQuery {
                episode: ei,
                chunk_idx: ci,
                obs_a: &obs_a,
                obs_b: &obs_b,
                instruction: &ep.instruction,
                closed_loop: true,
            })?;
            if pred.shape() != [k, d] {
                return Err(Error::shape(
                    "evaluate",
                    format!("policy returned {:?}, expected [{k},{d}]", pred.shape()),
                ));
            }
            for r in 0..pred.rows() {
                state.step(pred.row(r));
            }
            trace.push(pred);
        }
        if success_check(ep, &trace) {
            successes += 1;
        }
    }
    Ok(EvalReport {
        chunk_l1: l1_sum / l1_chunks as f64,
        success_rate: successes as f64 / episodes.len() as f64,
        episodes: episodes.len(),
    })
}

pub fn check_compat(model: &Model, ep: &Episode) -> Result<()> {
    let cfg = &model.config;
    let checks = [
        (cfg.patches(), ep.scene.h * ep.scene.w, "patch count"),
        (cfg.patch_feat, ep.render_a.cols(), "patch feature width"),
        (cfg.instr_len, ep.instruction.len(), "instruction length"),
        (cfg.chunk_len, ep.chunk_len(), "chunk length"),
        (cfg.action_dim, ep.action_dim(), "action width"),
    ];
    for (have, want, what) in checks {
        if have != want {
            return Err(Error::contract(
                "evaluate",
                format!("model/dataset {what} mismatch: config {have}, dataset {want}"),
            ));
        }
    }
    Ok(())
}

/// Evaluate a model as the policy.
pub fn evaluate(model: &Model, episodes: &[Episode], render_seed: u64) -> Result<EvalReport> {
    if let Some(ep) = episodes.first() {
        check_compat(model, ep)?;
    }
    evaluate_policy(episodes, render_seed, |q| {
        let (chunk, _, _) = model.forward_chunk(q.obs_a, q.obs_b, q.instruction)?;
        Ok(chunk)
    })
}

/// Flatten episodes into teacher-forced training samples: one per
/// (episode, chunk), observing the expert's chunk-start state.
pub fn expand_samples(episodes: &[Episode], renderer: &Renderer) -> Vec<Sample> {
    let mut samples = Vec::new();
    for ep in episodes {
        for (ci, state) in chunk_states(ep).iter().enumerate() {
            samples.push(Sample {
                obs_a: renderer.render_patches(state, 0),
                obs_b: renderer.render_patches(state, 1),
                ids: ep.instruction.clone(),
                target: ep.chunks[ci].clone(),
            });
        }
    }
    samples
}

/// One training-log row. The retained-token mean is the schedule's mean
/// per-layer retained visual-row count (data-independent by design, and
/// empty-schedule models report the full width).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub retained_mean: f64,
}

fn retained_mean(cfg: &ModelConfig) -> f64 {
    if cfg.passthrough() {
        return cfg.visual_tokens() as f64;
    }
    let schedule = match crate::sparsity::SparsitySchedule::from_config(cfg) {
        Ok(s) => s,
        Err(_) => return f64::NAN,
    };
    let m = cfg.visual_tokens();
    let total: usize = (1..=cfg.llm_depth)
        .map(|l| schedule.retained_count(l, m, cfg.prune_literal_percentile).unwrap_or(m))
        .sum();
    total as f64 / cfg.llm_depth as f64
}

/// Train a fresh model on the episodes: batches are drawn uniformly with
/// replacement from the teacher-forced samples, seeded by `train_seed`.
/// Row 0 logs the initial loss on the first batch before any update, so
/// the log always has `steps + 1` rows.
pub fn train_model(
    config: ModelConfig,
    episodes: &[Episode],
    render_seed: u64,
    steps: u64,
    train_seed: u64,
) -> Result<(Model, Vec<LogRow>)> {
    let mut model = Model::new(config)?;
    if let Some(ep) = episodes.first() {
        check_compat(&model, ep)?;
    } else {
        return Err(Error::contract("train", "dataset has no episodes"));
    }
    let renderer = renderer_for(episodes, render_seed)?;
    let samples = expand_samples(episodes, &renderer);
    let mut state = TrainState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(train_seed ^ 0x7261_696e);
    let batch_size = model.config.batch_size.min(samples.len());
    let retained = retained_mean(&model.config);
    let mut log = Vec::with_capacity(steps as usize + 1);

    let draw = |rng: &mut ChaCha8Rng| -> Vec<Sample> {
        (0..batch_size).map(|_| samples[rng.gen_range(0..samples.len())].clone()).collect()
    };

    // Initial loss, measured without updating: a zero-learning-rate step
    // would also advance optimizer moments, so compute it directly.
    let first = draw(&mut rng);
    let mut init_loss = 0.0;
    for s in &first {
        let mut tape = crate::nn::Tape::new();
        let pass = model.forward_on(&mut tape, &s.obs_a, &s.obs_b, &s.ids)?;
        let loss = model.chunk_loss(&mut tape, &pass, &s.target)?;
        init_loss += tape.value(loss).item()?;
    }
    log.push(LogRow { step: 0, loss: init_loss / first.len() as f64, retained_mean: retained });

    for step in 1..=steps {
        let batch = if step == 1 { first.clone() } else { draw(&mut rng) };
        let loss = train_step(&mut model, &mut state, &batch)?;
        log.push(LogRow { step, loss, retained_mean: retained });
    }
    Ok((model, log))
}
