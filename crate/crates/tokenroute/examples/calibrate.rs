//! Throwaway calibration probe (not part of the test suite).

use std::time::Instant;

use tokenroute::config::ModelConfig;
use tokenroute::eval::{evaluate, train_model};
use tokenroute::flops::solve_stage2_eta;
use tokenroute::task::{generate_episode, Episode, TaskSpec};

fn episodes(spec: &TaskSpec, lo: u64, hi: u64) -> Vec<Episode> {
    (lo..hi).map(|s| generate_episode(spec, s).unwrap()).collect()
}

fn main() {
    let spec = TaskSpec::default();
    let train = episodes(&spec, 0, 1000);
    let held = episodes(&spec, 1_000_000, 1_000_200);

    let base = ModelConfig::default();
    let mut s42 = base.clone();
    s42.agg_tokens = 8;
    s42.eta = solve_stage2_eta(base.llm_depth, base.clamp_lo, base.clamp_hi, 2.0).unwrap().eta;

    for (name, cfg) in [("dense", base.dense_variant()), ("s42", s42)] {
        let mut cfg = cfg.clone();
        cfg.seed = 100;
        cfg.batch_size = 16;
        let t0 = Instant::now();
        let (model, log) = train_model(cfg, &train, spec.seed, 2000, 100).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        let report = evaluate(&model, &held, spec.seed).unwrap();
        let on_train = evaluate(&model, &train[..100], spec.seed).unwrap();
        let curve: Vec<String> =
            log.iter().step_by(200).map(|r| format!("{:.3}", r.loss)).collect();
        println!(
            "{name} b16: held success {:.3} l1 {:.4} | train success {:.3} l1 {:.4} | loss {} | {dt:.0}s",
            report.success_rate,
            report.chunk_l1,
            on_train.success_rate,
            on_train.chunk_l1,
            curve.join(" "),
        );
    }
}
