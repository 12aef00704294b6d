//! Command-line front end: training, generation for the five task
//! shapes, order-plan rendering, pool-cost benchmarking, gradient
//! checking, and held-out evaluation.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data or geometry
//! error, 3 internal invariant violation. Every run emits a JSON
//! report (seed, config hash, timing, metrics) — written next to
//! `--out` when given, otherwise printed to stderr so stdout stays a
//! clean data stream.

mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use patchgen_core::codec::{self, classify_pattern, Codebook};
use patchgen_core::decoder::{LocalMode, Model, Sampler};
use patchgen_core::error::{Error, Result};
use patchgen_core::grid::TokenGrid;
use patchgen_core::numerics::{check_registered_ops, default_tolerance};
use patchgen_core::pipeline::{
    bench_plan, eval_heldout, generate, train, Condition, GenRequest, PoolKind,
    StepStat, Task, TrainSample,
};
use patchgen_core::plan::{
    plan_text_matrix, split_base, split_outpaint, OrderPlan, Rect, ScanOrder,
};

use config::{load_dataset, parse_extent, parse_grid, parse_place, RunConfig};

#[derive(Parser)]
#[command(name = "patchgen", version, about = "Patch-level autoregressive generation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration JSON; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path stem; derived files get suffixes.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory of .nwit files (+ optional .txt captions).
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        extent: Option<String>,
        #[arg(long, value_parser = ["pre", "post"])]
        rpe_feed: Option<String>,
        #[arg(long, value_parser = ["patch", "accumulated"])]
        loss: Option<String>,
        /// Disable multi-layer caches (context uses token embeddings only).
        #[arg(long)]
        no_caches: bool,
    },
    /// Generate a canvas or video (unconditional or text-conditioned).
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        ckpt: PathBuf,
        /// Output size HxW[xF] in patches.
        #[arg(long, required = true)]
        target: String,
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value = "omega")]
        order: String,
        #[arg(long, value_parser = ["ar", "nar", "pnar"])]
        mode: Option<String>,
        #[arg(long, default_value = "greedy", value_parser = ["greedy", "topk"])]
        sampler: String,
        #[arg(long, default_value_t = 5)]
        topk: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Full-context reference path instead of the bounded pool.
        #[arg(long)]
        no_pool: bool,
    },
    /// Extend a condition image outward along expanding rings.
    Outpaint {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        ckpt: PathBuf,
        /// Condition NWIT file.
        #[arg(long, required = true)]
        cond: PathBuf,
        /// Placement R,C of the condition's top-left patch.
        #[arg(long, default_value = "0,0")]
        place: String,
        #[arg(long, required = true)]
        target: String,
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value = "greedy", value_parser = ["greedy", "topk"])]
        sampler: String,
        #[arg(long, default_value_t = 5)]
        topk: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        no_pool: bool,
    },
    /// Animate a condition image into following frames.
    Animate {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        ckpt: PathBuf,
        /// First-frame NWIT file.
        #[arg(long, required = true)]
        cond: PathBuf,
        /// Output size HxWxF in patches.
        #[arg(long, required = true)]
        target: String,
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value = "greedy", value_parser = ["greedy", "topk"])]
        sampler: String,
        #[arg(long, default_value_t = 5)]
        topk: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        no_pool: bool,
    },
    /// Render a generation order as a text matrix (and PPM heatmap).
    PlanOrder {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        grid: String,
        #[arg(long, default_value = "omega")]
        order: String,
        /// Outpaint ring plan: condition R,C,HxW inside the grid.
        #[arg(long)]
        cond: Option<String>,
    },
    /// Per-step pool cost CSV: step, n_ctx, attended_tokens, pool_size, evictions.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        grid: String,
        #[arg(long, default_value = "2,2,0")]
        extent: String,
        #[arg(long, default_value = "omega")]
        order: String,
        #[arg(long)]
        no_pool: bool,
    },
    /// Finite-difference checks over every differentiable op.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        cases: usize,
    },
    /// Mean held-out per-token cross-entropy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<String>,
    },
}

struct Report {
    command: &'static str,
    seed: u64,
    config_hash: String,
    started: Instant,
    metrics: serde_json::Value,
    outputs: Vec<String>,
}

impl Report {
    fn new(command: &'static str, seed: u64, config_hash: String) -> Self {
        Report {
            command,
            seed,
            config_hash,
            started: Instant::now(),
            metrics: json!({}),
            outputs: Vec::new(),
        }
    }

    fn emit(self, out: Option<&Path>) -> Result<()> {
        let body = json!({
            "command": self.command,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "timing_ms": self.started.elapsed().as_millis() as u64,
            "metrics": self.metrics,
            "outputs": self.outputs,
        });
        match out {
            Some(path) => {
                let report_path = PathBuf::from(format!("{}.report.json", path.display()));
                if let Some(dir) = report_path.parent() {
                    if !dir.as_os_str().is_empty() {
                        std::fs::create_dir_all(dir)?;
                    }
                }
                std::fs::write(&report_path, serde_json::to_vec_pretty(&body)?)?;
                eprintln!("report: {}", report_path.display());
            }
            None => eprintln!("{}", serde_json::to_string_pretty(&body)?),
        }
        Ok(())
    }
}


/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn effective_seed(common: &Common, cfg: &RunConfig) -> u64 {
    common.seed.unwrap_or(cfg.seed)
}

fn build_sampler(name: &str, topk: usize, temperature: f64) -> Result<Sampler> {
    match name {
        "greedy" => Ok(Sampler::Greedy),
        "topk" => Sampler::top_k(topk, temperature as patchgen_core::numerics::Real),
        other => Err(Error::Usage(format!("unknown sampler {other:?}"))),
    }
}

fn pool_kind(no_pool: bool) -> PoolKind {
    if no_pool {
        PoolKind::FullContext
    } else {
        PoolKind::Pooled
    }
}

fn write_outputs(
    grid: &TokenGrid,
    out: &Path,
    report: &mut Report,
) -> Result<()> {
    let nwit = PathBuf::from(format!("{}.nwit", out.display()));
    grid.write_nwit(&nwit)?;
    report.outputs.push(nwit.display().to_string());

    let book = Codebook::new(grid.dims().vocab)?;
    for frame in 0..grid.dims().f {
        let img = codec::decode_image(&book, grid, frame)?;
        let ppm = if grid.dims().f == 1 {
            PathBuf::from(format!("{}.ppm", out.display()))
        } else {
            PathBuf::from(format!("{}.f{}.ppm", out.display(), frame))
        };
        img.write_ppm(&ppm)?;
        report.outputs.push(ppm.display().to_string());
    }
    Ok(())
}

fn run_generation(
    common: &Common,
    name: &'static str,
    ckpt: &Path,
    req: GenRequest,
) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let mut report = Report::new(name, req.seed, cfg.hash());
    let model = Model::load(ckpt)?;
    let (grid, stats) = generate(&model, &req)?;
    report.metrics = json!({
        "patches": grid.dims().n(),
        "prefix_len": stats.prefix_len,
        "peak_pool": stats.peak_pool,
        "forward_passes": model.forward_passes(),
        "classified": classify_pattern(&grid).map(|f| f.word()),
    });
    let out = common
        .out
        .clone()
        .ok_or_else(|| Error::Usage("--out is required for generation".into()))?;
    write_outputs(&grid, &out, &mut report)?;
    report.emit(Some(&out))
}

fn stats_csv(stats: &[StepStat]) -> String {
    let mut out = String::from("step,n_ctx,attended_tokens,pool_size,evictions\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.step, s.n_ctx, s.attended_tokens, s.pool_size, s.evictions
        ));
    }
    out
}

fn heatmap(plan: &OrderPlan, frame: usize) -> codec::GrayImage {
    // One 8x8 block per patch, generation index mapped to intensity.
    let d = plan.dims();
    let scale = 8;
    let n = plan.len().max(2);
    let mut img = codec::GrayImage::new(d.w_p * scale, d.h_p * scale);
    for r in 0..d.h_p {
        for c in 0..d.w_p {
            let step = plan
                .step_of(patchgen_core::grid::PatchCoord::new(r, c, frame))
                .expect("plan covers grid");
            let v = (step * 255 / (n - 1)) as u8;
            for dr in 0..scale {
                for dc in 0..scale {
                    img.set(r * scale + dr, c * scale + dc, v);
                }
            }
        }
    }
    img
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprintln!("{e}");
            std::process::exit(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            data,
            extent,
            rpe_feed,
            loss,
            no_caches,
        } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(dir) = data {
                cfg.data.dir = Some(dir);
            }
            if let Some(e) = extent {
                let e = parse_extent(&e)?;
                cfg.model.extent = (e.e_w, e.e_h, e.e_f);
            }
            if let Some(feed) = rpe_feed {
                cfg.model.rpe_feed = feed;
            }
            if let Some(loss) = loss {
                cfg.train.loss = loss;
            }
            if no_caches {
                cfg.model.caches = false;
            }
            let seed = effective_seed(&common, &cfg);
            let mut report = Report::new("train", seed, cfg.hash());

            let model_cfg = cfg.model.to_config()?;
            let extent = model_cfg.extent;
            let mut model = Model::new(model_cfg, seed)?;
            let dataset = load_dataset(&cfg.data, &cfg.model)?;
            let tcfg = cfg.train.to_config(extent, seed)?;
            let stats = train(&mut model, &dataset, &tcfg, PoolKind::Pooled)?;

            let final_loss = stats.step_losses.last().copied().unwrap_or_default();
            report.metrics = json!({
                "optimizer_steps": stats.optimizer_steps,
                "samples": stats.samples,
                "batches": stats.batches,
                "final_step_loss": final_loss,
                "loss_mode": cfg.train.loss,
            });
            let out = common
                .out
                .clone()
                .ok_or_else(|| Error::Usage("--out checkpoint prefix is required".into()))?;
            model.save(&out)?;
            report.outputs.push(format!("{}.json", out.display()));
            report.outputs.push(format!("{}.bin", out.display()));
            emit(&format!(
                "trained {} steps over {} samples; final step loss {:.4}\n",
                stats.optimizer_steps, stats.samples, final_loss
            ));
            report.emit(Some(&out))
        }

        Command::Generate {
            common,
            ckpt,
            target,
            text,
            order,
            mode,
            sampler,
            topk,
            temperature,
            no_pool,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let seed = effective_seed(&common, &cfg);
            let model = Model::load(&ckpt)?;
            let mcfg = model.cfg();
            let dims = parse_grid(&target, mcfg.m_side, mcfg.vocab)?;
            let task = match (&text, dims.f > 1) {
                (Some(_), false) => Task::TextToImage,
                (Some(_), true) => Task::TextToVideo,
                (None, false) => Task::Uncond,
                (None, true) => {
                    return Err(Error::Usage(
                        "multi-frame generation needs text or an animate condition".into(),
                    ))
                }
            };
            let caption = text.map(|t| codec::caption_from_text(&t)).transpose()?;
            let req = GenRequest {
                task,
                dims,
                order: ScanOrder::parse(&order)?,
                condition: None,
                text: caption,
                sampler: build_sampler(&sampler, topk, temperature)?,
                seed,
                pool: pool_kind(no_pool),
            };
            let req = match mode {
                Some(m) => {
                    let mut model_cfg = model.cfg().clone();
                    model_cfg.local_mode = LocalMode::parse(&m)?;
                    // Re-load with the overridden local mode.
                    drop(model);
                    let mut m2 = Model::load(&ckpt)?;
                    m2.set_local_mode(model_cfg.local_mode);
                    return run_generation_with(&common, "generate", m2, req);
                }
                None => req,
            };
            run_generation(&common, "generate", &ckpt, req)
        }

        Command::Outpaint {
            common,
            ckpt,
            cond,
            place,
            target,
            text,
            sampler,
            topk,
            temperature,
            no_pool,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let seed = effective_seed(&common, &cfg);
            let model = Model::load(&ckpt)?;
            let dims = parse_grid(&target, model.cfg().m_side, model.cfg().vocab)?;
            let (place_row, place_col) = parse_place(&place)?;
            let tokens = TokenGrid::read_nwit(&cond)?;
            let caption = text.map(|t| codec::caption_from_text(&t)).transpose()?;
            let req = GenRequest {
                task: Task::Outpaint,
                dims,
                order: ScanOrder::Omega,
                condition: Some(Condition {
                    tokens,
                    place_row,
                    place_col,
                }),
                text: caption,
                sampler: build_sampler(&sampler, topk, temperature)?,
                seed,
                pool: pool_kind(no_pool),
            };
            run_generation(&common, "outpaint", &ckpt, req)
        }

        Command::Animate {
            common,
            ckpt,
            cond,
            target,
            text,
            sampler,
            topk,
            temperature,
            no_pool,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let seed = effective_seed(&common, &cfg);
            let model = Model::load(&ckpt)?;
            let dims = parse_grid(&target, model.cfg().m_side, model.cfg().vocab)?;
            let tokens = TokenGrid::read_nwit(&cond)?;
            let caption = text.map(|t| codec::caption_from_text(&t)).transpose()?;
            let req = GenRequest {
                task: Task::Animate,
                dims,
                order: ScanOrder::Omega,
                condition: Some(Condition {
                    tokens,
                    place_row: 0,
                    place_col: 0,
                }),
                text: caption,
                sampler: build_sampler(&sampler, topk, temperature)?,
                seed,
                pool: pool_kind(no_pool),
            };
            run_generation(&common, "animate", &ckpt, req)
        }

        Command::PlanOrder {
            common,
            grid,
            order,
            cond,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let seed = effective_seed(&common, &cfg);
            let mut report = Report::new("plan-order", seed, cfg.hash());
            let dims = parse_grid(&grid, 1, 2)?;
            let plan = match cond {
                Some(spec) => {
                    // R,C,HxW condition rectangle.
                    let parts: Vec<&str> = spec.splitn(3, ',').collect();
                    if parts.len() != 3 {
                        return Err(Error::Usage(format!(
                            "condition {spec:?} is not R,C,HxW"
                        )));
                    }
                    let row: usize = parts[0]
                        .trim()
                        .parse()
                        .map_err(|_| Error::Usage("bad condition row".into()))?;
                    let col: usize = parts[1]
                        .trim()
                        .parse()
                        .map_err(|_| Error::Usage("bad condition col".into()))?;
                    let rect_dims = parse_grid(parts[2], 1, 2)?;
                    split_outpaint(&dims, Rect::new(row, col, rect_dims.h_p, rect_dims.w_p))?
                }
                None => split_base(&dims, ScanOrder::parse(&order)?),
            };
            emit(&plan_text_matrix(&plan));
            report.metrics = json!({
                "patches": plan.len(),
                "prefix_len": plan.prefix_len(),
            });
            if let Some(out) = &common.out {
                for frame in 0..dims.f {
                    let ppm = if dims.f == 1 {
                        PathBuf::from(format!("{}.ppm", out.display()))
                    } else {
                        PathBuf::from(format!("{}.f{}.ppm", out.display(), frame))
                    };
                    heatmap(&plan, frame).write_ppm(&ppm)?;
                    report.outputs.push(ppm.display().to_string());
                }
            }
            report.emit(common.out.as_deref())
        }

        Command::Bench {
            common,
            grid,
            extent,
            order,
            no_pool,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let seed = effective_seed(&common, &cfg);
            let mut report = Report::new("bench", seed, cfg.hash());
            let dims = parse_grid(&grid, cfg.model.m_side, cfg.model.vocab)?;
            let extent = parse_extent(&extent)?;
            let plan = split_base(&dims, ScanOrder::parse(&order)?);
            let stats = bench_plan(&plan, extent, dims.m(), pool_kind(no_pool));
            let csv = stats_csv(&stats);
            let peak = stats.iter().map(|s| s.pool_size).max().unwrap_or(0);
            let max_attended = stats.iter().map(|s| s.attended_tokens).max().unwrap_or(0);
            let total_attended: usize = stats.iter().map(|s| s.attended_tokens).sum();
            report.metrics = json!({
                "patches": plan.len(),
                "peak_pool": peak,
                "max_attended_tokens": max_attended,
                "total_attended_tokens": total_attended,
                "pool": if no_pool { "full-context" } else { "bounded" },
            });
            match &common.out {
                Some(out) => {
                    let path = PathBuf::from(format!("{}.csv", out.display()));
                    if let Some(dir) = path.parent() {
                        if !dir.as_os_str().is_empty() {
                            std::fs::create_dir_all(dir)?;
                        }
                    }
                    std::fs::write(&path, csv)?;
                    report.outputs.push(path.display().to_string());
                }
                None => emit(&csv),
            }
            report.emit(common.out.as_deref())
        }

        Command::Gradcheck { common, cases } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let seed = effective_seed(&common, &cfg);
            let mut report = Report::new("gradcheck", seed, cfg.hash());
            let tol = default_tolerance();
            let checks = check_registered_ops(seed, cases, tol)?;
            let mut all_pass = true;
            for c in &checks {
                emit(&format!(
                    "{:<20} cases {:>3}  max rel err {:>10.3e}  {}\n",
                    c.name,
                    c.cases,
                    c.max_rel_err,
                    if c.pass { "ok" } else { "FAIL" }
                ));
                all_pass &= c.pass;
            }
            report.metrics = json!({
                "ops": checks.len(),
                "cases_per_op": cases,
                "tolerance": tol,
                "pass": all_pass,
            });
            report.emit(common.out.as_deref())?;
            if !all_pass {
                return Err(Error::State("gradient checks failed".into()));
            }
            Ok(())
        }

        Command::Eval { common, ckpt, data } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(dir) = data {
                cfg.data.dir = Some(dir);
            }
            let seed = effective_seed(&common, &cfg);
            let mut report = Report::new("eval", seed, cfg.hash());
            let model = Model::load(&ckpt)?;
            let spec_model = config::ModelSpec {
                m_side: model.cfg().m_side,
                vocab: model.cfg().vocab,
                ..cfg.model.clone()
            };
            let dataset: Vec<TrainSample> = load_dataset(&cfg.data, &spec_model)?;
            let ce = eval_heldout(&model, &dataset)?;
            emit(&format!("mean per-token cross-entropy: {ce:.6}\n"));
            report.metrics = json!({
                "samples": dataset.len(),
                "mean_token_ce": ce,
            });
            report.emit(common.out.as_deref())
        }
    }
}

fn run_generation_with(
    common: &Common,
    name: &'static str,
    model: Model,
    req: GenRequest,
) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let mut report = Report::new(name, req.seed, cfg.hash());
    let (grid, stats) = generate(&model, &req)?;
    report.metrics = json!({
        "patches": grid.dims().n(),
        "prefix_len": stats.prefix_len,
        "peak_pool": stats.peak_pool,
        "forward_passes": model.forward_passes(),
        "classified": classify_pattern(&grid).map(|f| f.word()),
    });
    let out = common
        .out
        .clone()
        .ok_or_else(|| Error::Usage("--out is required for generation".into()))?;
    write_outputs(&grid, &out, &mut report)?;
    report.emit(Some(&out))
}
