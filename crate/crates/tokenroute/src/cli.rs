//! Command-line plumbing: dataset generation, training, evaluation,
//! allocation ablations, FLOPs reports, and diagnostic dumps.
//!
//! Conventions shared by every command: `--seed` and `--config` are accepted
//! globally, CSV goes to stdout with a header row and '.' decimals, errors go
//! to stderr as a single `error: ...` line with exit code 1, and output is
//! deterministic under fixed flags. Only `ablate` may use more than one
//! thread, and only when `CGV_THREADS` allows it.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use crate::config::ModelConfig;
use crate::decoder::build_hybrid_mask;
use crate::error::{Error, Result};
use crate::eval::{check_compat, evaluate, train_model};
use crate::flops::{
    ablation_grid, assumptions_records, comparison_table, count_dense, count_sparse,
    reference_scale_assumptions, reference_scale_config,
};
use crate::model::Model;
use crate::task::{generate_episode, read_dataset, write_dataset, Episode, TaskSpec};

#[derive(Parser)]
#[command(
    name = "tokenroute",
    version,
    about = "Instruction-driven token sparsification for action-chunk policies"
)]
pub struct Cli {
    /// Seed for anything randomized by the command (model init, batch
    /// sampling, episode seeds). Commands with no randomness ignore it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Model configuration file (key=value lines); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate an episode dataset and print its content hash.
    GenData {
        /// Task spec file (key=value lines); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of episodes (must be positive).
        #[arg(long)]
        count: u64,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset; log CSV to stdout, checkpoint to --ckpt-out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        ckpt_out: PathBuf,
        /// Spec seed of the dataset (rebuilds its renderer; see gen-data).
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
    /// Evaluate a checkpoint: teacher-forced chunk L1 + closed-loop success.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Spec seed of the dataset (rebuilds its renderer; see gen-data).
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
    /// Train and score one model per sparsity allocation in --grid.
    Ablate {
        /// Comma-separated stage1-by-stage2 factors, e.g. "4x2,2x4,1x8,8x1".
        #[arg(long)]
        grid: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: u64,
        /// Held-out dataset for the success column (defaults to --data).
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Spec seed of the dataset(s) (rebuilds the renderer; see gen-data).
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
    /// Print the dense-vs-sparse FLOPs ledger for the configuration.
    Flops {
        /// Use the reference-scale configuration and print its assumptions.
        #[arg(long)]
        paper: bool,
    },
    /// Print the hybrid attention mask as a 0/1 matrix.
    DumpMask {
        /// Comma-separated visual,instruction,chunk,action-dim counts, e.g. "2,1,1,2".
        #[arg(long)]
        dims: String,
    },
    /// Dump aggregation-slot -> patch attention weights for one episode as CSV.
    DumpAttn {
        /// Checkpoint to load; omitted means a freshly initialized model.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Episode index within --data.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        /// Encoder branch (0 or 1).
        #[arg(long, default_value_t = 0)]
        branch: usize,
    },
}

/// Execute a parsed command line. Everything the command produces goes to
/// stdout; the caller maps `Err` to the diagnostic stream and the exit code.
pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let config = load_config(cli.config.as_deref(), seed)?;
    match cli.command {
        Command::GenData { spec, count, out } => gen_data(spec.as_deref(), count, seed, &out),
        Command::Train { data, steps, ckpt_out, data_seed } => {
            train(config, &data, steps, &ckpt_out, data_seed, seed.unwrap_or(0))
        }
        Command::Eval { ckpt, data, data_seed } => eval(&ckpt, &data, data_seed),
        Command::Ablate { grid, data, steps, eval_data, data_seed } => ablate(
            config,
            &grid,
            &data,
            steps,
            eval_data.as_deref(),
            data_seed,
            seed.unwrap_or(0),
        ),
        Command::Flops { paper } => flops(config, paper),
        Command::DumpMask { dims } => dump_mask(&dims),
        Command::DumpAttn { ckpt, data, episode, branch } => {
            dump_attn(config, ckpt.as_deref(), &data, episode, branch)
        }
    }
}

/// Model config from `--config`, with `--seed` overriding its seed field so
/// one config file can serve a whole seed sweep.
fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ModelConfig> {
    let mut cfg = match path {
        Some(p) => ModelConfig::parse(&fs::read_to_string(p)?)?,
        None => ModelConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn gen_data(spec_path: Option<&Path>, count: u64, seed: Option<u64>, out: &Path) -> Result<()> {
    if count == 0 {
        return Err(Error::Usage("empty dataset".into()));
    }
    let spec = match spec_path {
        Some(p) => TaskSpec::parse(&fs::read_to_string(p)?)?,
        None => TaskSpec::default(),
    };
    // --seed shifts which episodes are drawn; the spec seed pins the world
    // (renderer projections), so differently seeded files stay compatible.
    let base = seed.unwrap_or(0);
    let episodes: Result<Vec<Episode>> =
        (base..base + count).map(|s| generate_episode(&spec, s)).collect();
    write_dataset(&episodes?, out)?;
    println!("sha256={}", crate::task::file_sha256_hex(out)?);
    Ok(())
}

fn train(
    config: ModelConfig,
    data: &Path,
    steps: u64,
    ckpt_out: &Path,
    data_seed: u64,
    train_seed: u64,
) -> Result<()> {
    let episodes = read_dataset(data)?;
    let (model, log) = train_model(config, &episodes, data_seed, steps, train_seed)?;
    model.save(ckpt_out)?;
    println!("step,loss,retained_mean");
    for row in &log {
        println!("{},{},{}", row.step, row.loss, row.retained_mean);
    }
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, data_seed: u64) -> Result<()> {
    let model = Model::from_checkpoint(ckpt)?;
    let episodes = read_dataset(data)?;
    let report = evaluate(&model, &episodes, data_seed)?;
    println!("success_rate,chunk_l1,episodes");
    println!("{},{},{}", report.success_rate, report.chunk_l1, report.episodes);
    Ok(())
}

/// One parsed "s1xs2" cell.
fn parse_allocation(text: &str) -> Result<(f64, f64)> {
    let norm = text.trim().replace('×', "x");
    let (a, b) = norm
        .split_once('x')
        .ok_or_else(|| Error::Usage(format!("allocation {text:?} is not of the form s1xs2")))?;
    let parse = |v: &str| -> Result<f64> {
        let f: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("bad factor {v:?} in allocation {text:?}")))?;
        if !(f.is_finite() && f >= 1.0) {
            return Err(Error::Usage(format!("factor {v} in {text:?} must be >= 1")));
        }
        Ok(f)
    };
    Ok((parse(a)?, parse(b)?))
}

struct AblateRow {
    allocation: String,
    product: f64,
    status: String,
    success: Option<f64>,
    ledger_ratio: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

fn ablate(
    base: ModelConfig,
    grid: &str,
    data: &Path,
    steps: u64,
    eval_data: Option<&Path>,
    data_seed: u64,
    seed: u64,
) -> Result<()> {
    let cells: Result<Vec<(f64, f64)>> = grid.split(',').map(parse_allocation).collect();
    let cells = cells?;
    if cells.is_empty() {
        return Err(Error::Usage("empty allocation grid".into()));
    }
    let train_eps = read_dataset(data)?;
    let eval_eps = match eval_data {
        Some(p) => read_dataset(p)?,
        None => train_eps.clone(),
    };
    let dense_llm = count_dense(&base)?.llm_stage() as f64;

    let run_cell = |&(s1, s2): &(f64, f64)| -> AblateRow {
        let allocation = format!("{}x{}", trim_factor(s1), trim_factor(s2));
        let product = s1 * s2;
        match ablation_grid(&base, &[(s1, s2)]) {
            Err(e) => AblateRow {
                allocation,
                product,
                status: format!("infeasible: {}", sanitize(&e.to_string())),
                success: None,
                ledger_ratio: None,
            },
            Ok(entries) => {
                let entry = &entries[0];
                let status =
                    if entry.solved.exact { "ok".into() } else { "inexact-schedule".into() };
                let ratio = dense_llm / entry.report.llm_stage() as f64;
                match train_model(entry.config.clone(), &train_eps, data_seed, steps, seed)
                    .and_then(|(model, _)| evaluate(&model, &eval_eps, data_seed))
                {
                    Ok(report) => AblateRow {
                        allocation,
                        product,
                        status,
                        success: Some(report.success_rate),
                        ledger_ratio: Some(ratio),
                    },
                    Err(e) => AblateRow {
                        allocation,
                        product,
                        status: format!("failed: {}", sanitize(&e.to_string())),
                        success: None,
                        ledger_ratio: Some(ratio),
                    },
                }
            }
        }
    };

    let threads = ablate_threads(cells.len());
    let rows: Vec<AblateRow> = if threads <= 1 {
        cells.iter().map(run_cell).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<AblateRow>>> =
            Mutex::new((0..cells.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= cells.len() {
                        break;
                    }
                    let row = run_cell(&cells[i]);
                    slots.lock().unwrap()[i] = Some(row);
                });
            }
        });
        slots.into_inner().unwrap().into_iter().map(Option::unwrap).collect()
    };

    println!("allocation,product,status,success_rate,ledger_ratio");
    for r in rows {
        println!(
            "{},{},{},{},{}",
            r.allocation,
            trim_factor(r.product),
            r.status,
            fmt_opt(r.success),
            fmt_opt(r.ledger_ratio)
        );
    }
    Ok(())
}

/// Worker cap for ablate: `CGV_THREADS` when set (minimum 1), else serial.
fn ablate_threads(cells: usize) -> usize {
    let cap = std::env::var("CGV_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1);
    cap.min(cells)
}

fn trim_factor(f: f64) -> String {
    if f.fract() == 0.0 {
        format!("{}", f as i64)
    } else {
        format!("{f}")
    }
}

/// Keep CSV cells comma-free.
fn sanitize(msg: &str) -> String {
    msg.replace(',', ";").replace('\n', " ")
}

fn flops(config: ModelConfig, paper: bool) -> Result<()> {
    let cfg = if paper { reference_scale_config() } else { config };
    let dense = count_dense(&cfg)?;
    let sparse = count_sparse(&cfg)?;
    if paper {
        print!("{}", assumptions_records(&reference_scale_assumptions()));
        println!();
    }
    print!("{}", comparison_table(&dense, &sparse));
    Ok(())
}

fn dump_mask(dims: &str) -> Result<()> {
    let parts: Vec<&str> = dims.split(',').collect();
    if parts.len() != 4 {
        return Err(Error::Usage(format!(
            "--dims wants four comma-separated counts M,T,K,D, got {dims:?}"
        )));
    }
    let mut v = [0usize; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("bad count {p:?} in --dims")))?;
    }
    let mask = build_hybrid_mask(v[0], v[1], v[2], v[3])?;
    print!("{}", mask.dump());
    Ok(())
}

fn dump_attn(
    config: ModelConfig,
    ckpt: Option<&Path>,
    data: &Path,
    episode: usize,
    branch: usize,
) -> Result<()> {
    let episodes = read_dataset(data)?;
    let ep = episodes.get(episode).ok_or_else(|| {
        Error::Usage(format!("episode {episode} out of range, dataset has {}", episodes.len()))
    })?;
    let model = match ckpt {
        Some(p) => Model::from_checkpoint(p)?,
        None => Model::new(config)?,
    };
    check_compat(&model, ep)?;
    let obs = match branch {
        0 => &ep.render_a,
        1 => &ep.render_b,
        _ => return Err(Error::Usage(format!("branch must be 0 or 1, got {branch}"))),
    };
    let map = model.attention_map(obs, &ep.instruction, branch)?;
    let patches = map.cols();
    let header: Vec<String> =
        std::iter::once("slot".to_string()).chain((0..patches).map(|p| format!("patch_{p}"))).collect();
    println!("{}", header.join(","));
    for s in 0..map.rows() {
        let mut cells = vec![s.to_string()];
        for p in 0..patches {
            cells.push(format!("{}", map.data()[s * patches + p]));
        }
        println!("{}", cells.join(","));
    }
    Ok(())
}
