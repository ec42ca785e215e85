//! Throwaway step-timing probe (not part of the test suite).

use std::time::Instant;

use tokenroute::config::ModelConfig;
use tokenroute::eval::train_model;
use tokenroute::flops::solve_stage2_eta;
use tokenroute::task::{generate_episode, TaskSpec};

fn main() {
    let spec = TaskSpec::default();
    let eps: Vec<_> = (0..100).map(|s| generate_episode(&spec, s).unwrap()).collect();
    for (name, agg) in [("dense", 0usize), ("s42", 8)] {
        let mut cfg = ModelConfig::default();
        cfg.agg_tokens = agg;
        if agg == 0 {
            cfg = cfg.dense_variant();
        } else {
            cfg.eta = solve_stage2_eta(cfg.llm_depth, cfg.clamp_lo, cfg.clamp_hi, 2.0).unwrap().eta;
        }
        cfg.batch_size = 16;
        let t0 = Instant::now();
        let (_m, log) = train_model(cfg, &eps, spec.seed, 100, 7).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!("{name}: {:.1} ms/step (100 steps, batch 16), loss {:.3} -> {:.3}", dt * 1000.0 / 100.0, log[0].loss, log.last().unwrap().loss);
    }
}
