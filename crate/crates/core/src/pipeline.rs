//! Orchestration: the training loop (order sampling, per-patch or
//! accumulated optimizer stepping), condition pre-caching, and
//! patch-by-patch generation for the five task shapes.
//!
//! Every walk over a plan follows the same per-patch cycle —
//! Select, Emb, Forward, Add, Remove — and records it as a trace
//! that is validated on the fly. A full-context provider mirrors the
//! pooled walk with no eviction and unbounded selection; with an
//! extent at least as large as the grid the two are bit-identical,
//! which the acceptance suite exploits as an oracle.

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::decoder::{Model, Sampler};
use crate::error::{Error, Result};
use crate::grid::{GridDims, PatchCoord, TokenGrid};
use crate::numerics::{AdamConfig, CounterRng, Real, Tensor};
use crate::plan::{emb_assign, split_base, split_outpaint, OrderPlan, Rect, ScanOrder};
use crate::pool::{ContextPool, Extent, LayerCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    Patch,
    Accumulated,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(LossMode::Patch),
            "accumulated" => Ok(LossMode::Accumulated),
            other => Err(Error::Usage(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Pooled,
    /// Reference path: every previous patch stays selectable, nothing
    /// is evicted, offsets outside the table clamp into the extent box.
    FullContext,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: Real,
    /// Fraction of planned optimizer steps spent in linear warmup.
    pub warmup_frac: f64,
    pub loss_mode: LossMode,
    pub orders: Vec<ScanOrder>,
    pub extent: Extent,
    pub seed: u64,
    /// Optimizer-step budget; `None` runs all epochs.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch: 1,
            lr: 1e-3,
            warmup_frac: 0.05,
            loss_mode: LossMode::Patch,
            orders: ScanOrder::ALL.to_vec(),
            extent: Extent::new(2, 2, 0),
            seed: 0,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub grid: TokenGrid,
    pub caption: Option<Vec<u16>>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub optimizer_steps: u64,
    pub samples: usize,
    pub batches: usize,
    /// Mean per-token loss of each optimizer step.
    pub step_losses: Vec<Real>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Select(usize),
    Emb(usize),
    Forward(usize),
    Add(usize),
    Remove(usize),
}

/// Checks that a trace is exactly the Select, Emb, Forward, Add,
/// Remove cycle for steps `first..first + count`.
pub fn validate_trace(trace: &[TraceEvent], first: usize, count: usize) -> Result<()> {
    if trace.len() != count * 5 {
        return Err(Error::Sequencing(format!(
            "trace has {} events for {} steps",
            trace.len(),
            count
        )));
    }
    for (i, chunk) in trace.chunks_exact(5).enumerate() {
        let step = first + i;
        let expected = [
            TraceEvent::Select(step),
            TraceEvent::Emb(step),
            TraceEvent::Forward(step),
            TraceEvent::Add(step),
            TraceEvent::Remove(step),
        ];
        if chunk != expected {
            return Err(Error::Sequencing(format!(
                "step {step} trace {chunk:?} out of order"
            )));
        }
    }
    Ok(())
}

/// Per-step cost record, the bench CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepStat {
    pub step: usize,
    pub n_ctx: usize,
    pub attended_tokens: usize,
    pub pool_size: usize,
    pub evictions: usize,
}

/// Context source for one walk over a plan.
enum Provider {
    Pooled(ContextPool),
    Full {
        plan: OrderPlan,
        extent: Extent,
        caches: Vec<LayerCache>,
    },
}

impl Provider {
    fn new(kind: PoolKind, plan: OrderPlan, extent: Extent) -> Self {
        match kind {
            PoolKind::Pooled => Provider::Pooled(ContextPool::new(plan, extent)),
            PoolKind::FullContext => Provider::Full {
                plan,
                extent,
                caches: Vec::new(),
            },
        }
    }

    fn plan(&self) -> &OrderPlan {
        match self {
            Provider::Pooled(pool) => pool.plan(),
            Provider::Full { plan, .. } => plan,
        }
    }

    fn cursor(&self) -> usize {
        match self {
            Provider::Pooled(pool) => pool.cursor(),
            Provider::Full { caches, .. } => caches.len(),
        }
    }

    /// Context caches plus their embedding ids for the patch at `step`.
    fn select(
        &self,
        model: &Model,
        step: usize,
    ) -> Result<(Vec<(usize, &LayerCache)>, Vec<usize>)> {
        let table = &model.cfg().rpe_table;
        let cur = self.plan().at(step);
        match self {
            Provider::Pooled(pool) => {
                let picked = pool.select(cur)?;
                let coords: Vec<PatchCoord> = picked.iter().map(|(c, _)| *c).collect();
                let e_ids = emb_assign(pool.plan(), step, &coords, table)?;
                let ctx = picked
                    .into_iter()
                    .zip(e_ids[1..].iter())
                    .map(|((_, cache), &id)| (id, cache))
                    .collect();
                Ok((ctx, e_ids))
            }
            Provider::Full { plan: _, extent, caches } => {
                if caches.len() != step {
                    return Err(Error::Sequencing(format!(
                        "full-context select at step {step} after {} adds",
                        caches.len()
                    )));
                }
                let mut ctx = Vec::with_capacity(caches.len());
                let mut e_ids = vec![table.self_id()];
                for cache in caches {
                    let off = crate::plan::RelOffset::between(cur, cache.coord()).clamped(extent);
                    let id = table.id_of(off)?;
                    ctx.push((id, cache));
                    e_ids.push(id);
                }
                Ok((ctx, e_ids))
            }
        }
    }

    fn add(&mut self, cache: LayerCache) -> Result<()> {
        match self {
            Provider::Pooled(pool) => pool.add(cache),
            Provider::Full { plan, caches, .. } => {
                if caches.len() >= plan.len() || plan.at(caches.len()) != cache.coord() {
                    return Err(Error::Sequencing("full-context add out of order".into()));
                }
                caches.push(cache);
                Ok(())
            }
        }
    }

    fn remove(&mut self) -> Vec<PatchCoord> {
        match self {
            Provider::Pooled(pool) => pool.remove(),
            Provider::Full { .. } => Vec::new(),
        }
    }

    fn live(&self) -> usize {
        match self {
            Provider::Pooled(pool) => pool.len(),
            Provider::Full { caches, .. } => caches.len(),
        }
    }

    fn peak(&self) -> usize {
        match self {
            Provider::Pooled(pool) => pool.peak_size(),
            Provider::Full { caches, .. } => caches.len(),
        }
    }
}

fn check_grid_matches(model: &Model, dims: &GridDims) -> Result<()> {
    let cfg = model.cfg();
    if dims.m_side != cfg.m_side || dims.vocab != cfg.vocab {
        return Err(Error::Config(format!(
            "grid m_side {} vocab {} vs model m_side {} vocab {}",
            dims.m_side, dims.vocab, cfg.m_side, cfg.vocab
        )));
    }
    Ok(())
}

fn check_extent(model: &Model, extent: &Extent) -> Result<()> {
    let m = model.cfg().extent;
    if extent.e_w > m.e_w || extent.e_h > m.e_h || extent.e_f > m.e_f {
        return Err(Error::Config(format!(
            "extent ({}, {}, {}) exceeds the model's ({}, {}, {})",
            extent.e_w, extent.e_h, extent.e_f, m.e_w, m.e_h, m.e_f
        )));
    }
    Ok(())
}

struct SampleRun {
    provider: Provider,
    tokens_by_step: Vec<Vec<u16>>,
    caption: Option<Vec<u16>>,
    losses: Vec<Real>,
    trace: Vec<TraceEvent>,
}

/// Teacher-forced walk over one patch of one sample; accumulates
/// gradients into the model when `weight` is Some.
fn teacher_step(
    model: &Model,
    run: &mut SampleRun,
    step: usize,
    weight: Option<Real>,
) -> Result<(Real, Vec<(String, Tensor)>)> {
    let coord = run.provider.plan().at(step);
    let (loss, grads, cache) = {
        let (ctx, e_ids) = run.provider.select(model, step)?;
        run.trace.push(TraceEvent::Select(step));
        run.trace.push(TraceEvent::Emb(step));
        let tokens = &run.tokens_by_step[step];
        let shifted = model.shift_tokens(tokens);
        let targets: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let sess = model.session(weight.is_some());
        let fwd = model.forward_graph(
            &sess,
            &shifted,
            &ctx,
            &e_ids,
            run.caption.as_deref(),
            true,
        )?;
        run.trace.push(TraceEvent::Forward(step));
        let loss_var = fwd.logits.softmax_ce(&targets)?;
        let loss = loss_var.scalar();
        let grads = if let Some(w) = weight {
            loss_var.backward_weighted(w);
            sess.harvest()
        } else {
            Vec::new()
        };
        (loss, grads, LayerCache::new(coord, fwd.cache_slots)?)
    };
    run.provider.add(cache)?;
    run.trace.push(TraceEvent::Add(step));
    run.provider.remove();
    run.trace.push(TraceEvent::Remove(step));
    run.losses.push(loss);
    Ok((loss, grads))
}

fn tokens_by_step(plan: &OrderPlan, grid: &TokenGrid) -> Result<Vec<Vec<u16>>> {
    plan.sequence()
        .iter()
        .map(|&c| Ok(grid.patch(c)?.to_vec()))
        .collect()
}

fn effective_lr(base: Real, next_step: u64, warmup_steps: u64) -> Real {
    if warmup_steps == 0 || next_step >= warmup_steps {
        base
    } else {
        base * next_step as Real / warmup_steps as Real
    }
}

/// Trains on the dataset; see [`TrainConfig`] for the knobs. In patch
/// mode the optimizer steps after every patch position, in accumulated
/// mode once per batch.
pub fn train(
    model: &mut Model,
    data: &[TrainSample],
    cfg: &TrainConfig,
    pool: PoolKind,
) -> Result<TrainStats> {
    if data.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    check_extent(model, &cfg.extent)?;
    for s in data {
        check_grid_matches(model, s.grid.dims())?;
    }
    // Canvas sizes may vary across the dataset, but each batch must be
    // homogeneous so its members share patch-step boundaries.
    let batch_size = cfg.batch.max(1);
    for batch in data.chunks(batch_size) {
        let dims = batch[0].grid.dims();
        if batch.iter().any(|s| s.grid.dims() != dims) {
            return Err(Error::Config(
                "grids within one training batch must share dims".into(),
            ));
        }
    }
    let steps_per_epoch: u64 = data
        .chunks(batch_size)
        .map(|batch| match cfg.loss_mode {
            LossMode::Patch => batch[0].grid.dims().n() as u64,
            LossMode::Accumulated => 1,
        })
        .sum();
    let mut planned = (cfg.epochs as u64).saturating_mul(steps_per_epoch);
    if let Some(cap) = cfg.max_steps {
        planned = planned.min(cap);
    }
    let warmup_steps = (cfg.warmup_frac * planned as f64).ceil() as u64;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let start_steps = model.params().step_count();
    let budget = cfg.max_steps.map(|cap| start_steps + cap);

    let mut order_rng = CounterRng::new(cfg.seed, "train.order");
    let mut stats = TrainStats::default();

    'outer: for _epoch in 0..cfg.epochs {
        for batch in data.chunks(batch_size) {
            let b = batch.len();
            let dims = *batch[0].grid.dims();
            let n_patches = dims.n();
            let mut runs: Vec<SampleRun> = batch
                .iter()
                .map(|sample| {
                    let order = *order_rng.choice(&cfg.orders);
                    let plan = split_base(&dims, order);
                    Ok(SampleRun {
                        tokens_by_step: tokens_by_step(&plan, &sample.grid)?,
                        provider: Provider::new(pool, plan, cfg.extent),
                        caption: sample.caption.clone(),
                        losses: Vec::new(),
                        trace: Vec::new(),
                    })
                })
                .collect::<Result<_>>()?;

            let weight = match cfg.loss_mode {
                LossMode::Patch => 1.0 / b as Real,
                LossMode::Accumulated => 1.0 / (b * n_patches) as Real,
            };
            let mut batch_losses: Vec<Real> = Vec::new();
            for step in 0..n_patches {
                let mut step_loss = 0.0;
                for run in runs.iter_mut() {
                    let (loss, grads) = teacher_step(model, run, step, Some(weight))?;
                    for (name, g) in grads {
                        model.params_mut().accumulate_grad(&name, &g)?;
                    }
                    step_loss += loss;
                }
                batch_losses.push(step_loss / b as Real);
                if cfg.loss_mode == LossMode::Patch {
                    let next = model.params().step_count() + 1 - start_steps;
                    let lr = effective_lr(cfg.lr, next, warmup_steps);
                    model.params_mut().adam_step(&AdamConfig { lr, ..adam });
                    stats.optimizer_steps += 1;
                    stats.step_losses.push(batch_losses[step]);
                    if budget.is_some_and(|cap| model.params().step_count() >= cap) {
                        for run in &runs {
                            validate_trace(&run.trace, 0, step + 1)?;
                        }
                        stats.samples += b;
                        stats.batches += 1;
                        break 'outer;
                    }
                }
            }
            if cfg.loss_mode == LossMode::Accumulated {
                let next = model.params().step_count() + 1 - start_steps;
                let lr = effective_lr(cfg.lr, next, warmup_steps);
                model.params_mut().adam_step(&AdamConfig { lr, ..adam });
                stats.optimizer_steps += 1;
                stats
                    .step_losses
                    .push(batch_losses.iter().sum::<Real>() / batch_losses.len() as Real);
            }
            for run in &runs {
                validate_trace(&run.trace, 0, n_patches)?;
            }
            stats.samples += b;
            stats.batches += 1;
            if budget.is_some_and(|cap| model.params().step_count() >= cap) {
                break 'outer;
            }
        }
    }
    Ok(stats)
}

/// Trains on a single sample and returns its per-patch losses.
pub fn train_sample(
    model: &mut Model,
    sample: &TrainSample,
    cfg: &TrainConfig,
    pool: PoolKind,
) -> Result<Vec<Real>> {
    check_extent(model, &cfg.extent)?;
    check_grid_matches(model, sample.grid.dims())?;
    let dims = *sample.grid.dims();
    let mut order_rng = CounterRng::new(cfg.seed, "train.order");
    let order = *order_rng.choice(&cfg.orders);
    let plan = split_base(&dims, order);
    let mut run = SampleRun {
        tokens_by_step: tokens_by_step(&plan, &sample.grid)?,
        provider: Provider::new(pool, plan, cfg.extent),
        caption: sample.caption.clone(),
        losses: Vec::new(),
        trace: Vec::new(),
    };
    let n = dims.n();
    let weight = match cfg.loss_mode {
        LossMode::Patch => 1.0,
        LossMode::Accumulated => 1.0 / n as Real,
    };
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    for step in 0..n {
        let (_, grads) = teacher_step(model, &mut run, step, Some(weight))?;
        for (name, g) in grads {
            model.params_mut().accumulate_grad(&name, &g)?;
        }
        if cfg.loss_mode == LossMode::Patch {
            model.params_mut().adam_step(&adam);
        }
    }
    if cfg.loss_mode == LossMode::Accumulated {
        model.params_mut().adam_step(&adam);
    }
    validate_trace(&run.trace, 0, n)?;
    Ok(run.losses)
}

/// Teacher-forced per-patch losses without touching parameters.
pub fn teacher_losses(
    model: &Model,
    grid: &TokenGrid,
    caption: Option<&[u16]>,
    order: ScanOrder,
    extent: Extent,
    pool: PoolKind,
) -> Result<Vec<Real>> {
    check_grid_matches(model, grid.dims())?;
    let plan = split_base(grid.dims(), order);
    let mut run = SampleRun {
        tokens_by_step: tokens_by_step(&plan, grid)?,
        provider: Provider::new(pool, plan, extent),
        caption: caption.map(|c| c.to_vec()),
        losses: Vec::new(),
        trace: Vec::new(),
    };
    let n = grid.dims().n();
    for step in 0..n {
        teacher_step(model, &mut run, step, None)?;
    }
    validate_trace(&run.trace, 0, n)?;
    Ok(run.losses)
}

/// Mean per-token cross-entropy over held-out samples, teacher-forced
/// in omega order. Side-effect free and bit-repeatable.
pub fn eval_heldout(model: &Model, data: &[TrainSample]) -> Result<Real> {
    if data.is_empty() {
        return Err(Error::Config("empty evaluation dataset".into()));
    }
    let extent = model.cfg().extent;
    let mut total = 0.0;
    let mut patches = 0usize;
    for sample in data {
        let losses = teacher_losses(
            model,
            &sample.grid,
            sample.caption.as_deref(),
            ScanOrder::Omega,
            extent,
            PoolKind::Pooled,
        )?;
        patches += losses.len();
        total += losses.iter().sum::<Real>();
    }
    Ok(total / patches as Real)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Uncond,
    TextToImage,
    TextToVideo,
    Animate,
    Outpaint,
}

#[derive(Debug, Clone)]
pub struct Condition {
    pub tokens: TokenGrid,
    /// Patch-unit placement of the condition's top-left corner
    /// (outpainting); ignored for animation.
    pub place_row: usize,
    pub place_col: usize,
}

#[derive(Debug, Clone)]
pub struct GenRequest {
    pub task: Task,
    pub dims: GridDims,
    pub order: ScanOrder,
    pub condition: Option<Condition>,
    pub text: Option<Vec<u16>>,
    pub sampler: Sampler,
    pub seed: u64,
    pub pool: PoolKind,
}

#[derive(Debug, Clone, Default)]
pub struct GenStats {
    pub steps: Vec<StepStat>,
    pub peak_pool: usize,
    pub prefix_len: usize,
    pub trace: Vec<TraceEvent>,
}

fn build_plan(req: &GenRequest) -> Result<(OrderPlan, Option<Rect>)> {
    let d = &req.dims;
    match req.task {
        Task::Uncond | Task::TextToImage => {
            if d.f != 1 {
                return Err(Error::Geometry("image tasks need a single frame".into()));
            }
            Ok((split_base(d, req.order), None))
        }
        Task::TextToVideo => Ok((split_base(d, req.order), None)),
        Task::Animate => {
            if d.f < 2 {
                return Err(Error::Geometry("animation needs at least two frames".into()));
            }
            let plan = split_base(d, req.order).with_prefix_len(d.h_p * d.w_p)?;
            Ok((plan, None))
        }
        Task::Outpaint => {
            if d.f != 1 {
                return Err(Error::Geometry("outpainting is single-frame".into()));
            }
            let cond = req
                .condition
                .as_ref()
                .ok_or_else(|| Error::Usage("outpainting needs a condition".into()))?;
            let cd = cond.tokens.dims();
            let rect = Rect::new(cond.place_row, cond.place_col, cd.h_p, cd.w_p);
            Ok((split_outpaint(d, rect)?, Some(rect)))
        }
    }
}

fn validate_request(model: &Model, req: &GenRequest) -> Result<()> {
    check_grid_matches(model, &req.dims)?;
    let needs_condition = matches!(req.task, Task::Outpaint | Task::Animate);
    if needs_condition != req.condition.is_some() {
        return Err(Error::Usage(format!(
            "{:?} {} a condition",
            req.task,
            if needs_condition { "requires" } else { "does not take" }
        )));
    }
    let needs_text = matches!(req.task, Task::TextToImage | Task::TextToVideo);
    if needs_text != req.text.is_some() {
        return Err(Error::Usage(format!(
            "{:?} {} text",
            req.task,
            if needs_text { "requires" } else { "does not take" }
        )));
    }
    if req.text.is_some() && !model.cfg().has_text() {
        return Err(Error::Usage(
            "text given to a model without cross-attention".into(),
        ));
    }
    if let Some(cond) = &req.condition {
        let cd = cond.tokens.dims();
        if cd.m_side != req.dims.m_side || cd.vocab != req.dims.vocab {
            return Err(Error::Config("condition token geometry mismatch".into()));
        }
        if cd.f != 1 {
            return Err(Error::Geometry("condition must be a single frame".into()));
        }
        match req.task {
            Task::Outpaint => {
                if cond.place_row + cd.h_p > req.dims.h_p
                    || cond.place_col + cd.w_p > req.dims.w_p
                {
                    return Err(Error::Geometry(format!(
                        "condition {}x{} at ({},{}) outside {}x{} canvas",
                        cd.h_p, cd.w_p, cond.place_row, cond.place_col, req.dims.h_p, req.dims.w_p
                    )));
                }
            }
            Task::Animate => {
                if cd.h_p != req.dims.h_p || cd.w_p != req.dims.w_p {
                    return Err(Error::Geometry(
                        "animation condition must cover the full first frame".into(),
                    ));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Teacher-forced ingestion of the condition prefix: populates the
/// provider's caches without sampling or loss.
fn precache_condition(
    model: &Model,
    provider: &mut Provider,
    output: &TokenGrid,
    text: Option<&[u16]>,
    stats: &mut GenStats,
) -> Result<()> {
    let prefix = provider.plan().prefix_len();
    if provider.cursor() != 0 {
        return Err(Error::Sequencing("pre-caching must start the walk".into()));
    }
    for step in 0..prefix {
        let coord = provider.plan().at(step);
        let cache = {
            let (ctx, e_ids) = provider.select(model, step)?;
            stats.trace.push(TraceEvent::Select(step));
            stats.trace.push(TraceEvent::Emb(step));
            let n_ctx = ctx.len();
            let tokens = output.patch(coord)?.to_vec();
            let shifted = model.shift_tokens(&tokens);
            let sess = model.session(false);
            let fwd = model.forward_graph(&sess, &shifted, &ctx, &e_ids, text, true)?;
            stats.trace.push(TraceEvent::Forward(step));
            stats.steps.push(StepStat {
                step,
                n_ctx,
                attended_tokens: (1 + n_ctx) * model.cfg().m(),
                pool_size: 0,
                evictions: 0,
            });
            LayerCache::new(coord, fwd.cache_slots)?
        };
        provider.add(cache)?;
        stats.trace.push(TraceEvent::Add(step));
        let evicted = provider.remove().len();
        stats.trace.push(TraceEvent::Remove(step));
        let last = stats.steps.last_mut().expect("pushed above");
        last.pool_size = provider.live();
        last.evictions = evicted;
    }
    Ok(())
}

/// Runs the full inference loop for a request and returns the
/// completed token grid (condition tokens copied verbatim).
pub fn generate(model: &Model, req: &GenRequest) -> Result<(TokenGrid, GenStats)> {
    validate_request(model, req)?;
    let (plan, rect) = build_plan(req)?;
    let extent = model.cfg().extent;

    let mut output = TokenGrid::zeros(req.dims);
    if let Some(cond) = &req.condition {
        let cd = cond.tokens.dims();
        for r in 0..cd.h_p {
            for c in 0..cd.w_p {
                let src = cond.tokens.patch(PatchCoord::image(r, c))?.to_vec();
                let dst = match req.task {
                    Task::Outpaint => {
                        let rect = rect.expect("outpaint rect");
                        PatchCoord::image(rect.row + r, rect.col + c)
                    }
                    _ => PatchCoord::new(r, c, 0),
                };
                output.set_patch(dst, &src)?;
            }
        }
    }

    let prefix = plan.prefix_len();
    let n = plan.len();
    let mut provider = Provider::new(req.pool, plan, extent);
    let mut stats = GenStats {
        prefix_len: prefix,
        ..GenStats::default()
    };
    let text = req.text.as_deref();
    precache_condition(model, &mut provider, &output, text, &mut stats)?;

    let mut rng = CounterRng::new(req.seed, "generate");
    for step in prefix..n {
        let coord = provider.plan().at(step);
        let (tokens, cache) = {
            let (ctx, e_ids) = provider.select(model, step)?;
            stats.trace.push(TraceEvent::Select(step));
            stats.trace.push(TraceEvent::Emb(step));
            let n_ctx = ctx.len();
            let (tokens, cache, _) =
                model.local_decode(&ctx, &e_ids, text, req.sampler, &mut rng, coord)?;
            stats.trace.push(TraceEvent::Forward(step));
            stats.steps.push(StepStat {
                step,
                n_ctx,
                attended_tokens: (1 + n_ctx) * model.cfg().m(),
                pool_size: 0,
                evictions: 0,
            });
            (tokens, cache)
        };
        output.set_patch(coord, &tokens)?;
        provider.add(cache)?;
        stats.trace.push(TraceEvent::Add(step));
        let evicted = provider.remove().len();
        stats.trace.push(TraceEvent::Remove(step));
        let last = stats.steps.last_mut().expect("pushed above");
        last.pool_size = provider.live();
        last.evictions = evicted;
    }
    validate_trace(&stats.trace, 0, n)?;
    stats.peak_pool = provider.peak();
    Ok((output, stats))
}

/// Pool-dynamics simulation of a plan without any model: per-step
/// context sizes, attended tokens, pool occupancy, and evictions.
pub fn bench_plan(plan: &OrderPlan, extent: Extent, m: usize, pool: PoolKind) -> Vec<StepStat> {
    let mut provider = Provider::new(pool, plan.clone(), extent);
    let mut out = Vec::with_capacity(plan.len());
    for step in 0..plan.len() {
        let coord = plan.at(step);
        let n_ctx = match &provider {
            Provider::Pooled(p) => p.select(coord).expect("in order").len(),
            Provider::Full { caches, .. } => caches.len(),
        };
        provider
            .add(LayerCache::placeholder(coord))
            .expect("in order");
        let evictions = provider.remove().len();
        out.push(StepStat {
            step,
            n_ctx,
            attended_tokens: (1 + n_ctx) * m,
            pool_size: provider.live(),
            evictions,
        });
    }
    out
}

/// Builds captions into text token ids, shared by the CLI and tests.
pub fn caption_ids(text: &str) -> Result<Vec<u16>> {
    codec::caption_from_text(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{synth_dataset, PatternFamily};
    use crate::decoder::{LocalMode, ModelConfig, RpeFeed};
    use crate::plan::{reachable_offsets, PlanKind};

    fn small_cfg(extent: Extent, text: bool, vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            dim: 16,
            heads: 2,
            m_side: 2,
            vocab,
            text_vocab: if text { crate::codec::text_vocab() } else { 0 },
            text_len: if text { 8 } else { 0 },
            rpe_table: reachable_offsets(&PlanKind::DEFAULT_SET, &extent),
            rpe_feed: RpeFeed::Pre,
            rpe_every_layer: true,
            local_mode: LocalMode::Ar,
            caches_enabled: true,
            pnar_rounds: 4,
            extent,
        }
    }

    fn random_grid(dims: &GridDims, seed: u64) -> TokenGrid {
        let mut rng = CounterRng::new(seed, "grid");
        let tokens = (0..dims.n() * dims.m())
            .map(|_| rng.below(dims.vocab as u64) as u16)
            .collect();
        TokenGrid::from_tokens(*dims, tokens).unwrap()
    }

    #[test]
    fn untrained_loss_is_close_to_ln_vocab() {
        let extent = Extent::new(1, 1, 0);
        let model = Model::new(small_cfg(extent, false, 16), 3).unwrap();
        let dims = GridDims::new(5, 5, 1, 2, 16).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for seed in 0..4 {
            let grid = random_grid(&dims, seed);
            let losses =
                teacher_losses(&model, &grid, None, ScanOrder::Omega, extent, PoolKind::Pooled)
                    .unwrap();
            total += losses.iter().sum::<Real>();
            count += losses.len();
        }
        let mean = total / count as Real;
        let baseline = (16.0 as Real).ln();
        assert!(
            (mean - baseline).abs() / baseline < 0.05,
            "mean {mean} vs ln vocab {baseline}"
        );
    }

    #[test]
    fn loss_mode_step_counts() {
        let extent = Extent::new(1, 1, 0);
        let dims = GridDims::new(2, 2, 1, 2, 16).unwrap();
        let sample = TrainSample {
            grid: random_grid(&dims, 1),
            caption: None,
        };
        let cfg = TrainConfig {
            extent,
            lr: 1e-3,
            ..TrainConfig::default()
        };

        let mut patch_model = Model::new(small_cfg(extent, false, 16), 7).unwrap();
        let before = patch_model.params().step_count();
        let losses = train_sample(&mut patch_model, &sample, &cfg, PoolKind::Pooled).unwrap();
        assert_eq!(losses.len(), dims.n());
        assert_eq!(patch_model.params().step_count() - before, dims.n() as u64);

        let mut acc_model = Model::new(small_cfg(extent, false, 16), 7).unwrap();
        let acc_cfg = TrainConfig {
            loss_mode: LossMode::Accumulated,
            ..cfg
        };
        let before = acc_model.params().step_count();
        train_sample(&mut acc_model, &sample, &acc_cfg, PoolKind::Pooled).unwrap();
        assert_eq!(acc_model.params().step_count() - before, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let extent = Extent::new(1, 1, 0);
        let dims = GridDims::new(2, 2, 1, 2, 16).unwrap();
        let data: Vec<TrainSample> = (0..4)
            .map(|i| TrainSample {
                grid: random_grid(&dims, i),
                caption: None,
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch: 2,
            extent,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut m1 = Model::new(small_cfg(extent, false, 16), 9).unwrap();
        let mut m2 = Model::new(small_cfg(extent, false, 16), 9).unwrap();
        let s1 = train(&mut m1, &data, &cfg, PoolKind::Pooled).unwrap();
        let s2 = train(&mut m2, &data, &cfg, PoolKind::Pooled).unwrap();
        assert_eq!(s1.step_losses, s2.step_losses);
        let g = random_grid(&dims, 99);
        let l1 = teacher_losses(&m1, &g, None, ScanOrder::Omega, extent, PoolKind::Pooled).unwrap();
        let l2 = teacher_losses(&m2, &g, None, ScanOrder::Omega, extent, PoolKind::Pooled).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn pooled_and_full_context_losses_agree_when_extent_covers_the_grid() {
        let extent = Extent::new(3, 3, 0);
        let dims = GridDims::new(3, 3, 1, 2, 16).unwrap();
        let model = Model::new(small_cfg(extent, false, 16), 21).unwrap();
        let grid = random_grid(&dims, 2);
        for order in ScanOrder::ALL {
            let a = teacher_losses(&model, &grid, None, order, extent, PoolKind::Pooled).unwrap();
            let b =
                teacher_losses(&model, &grid, None, order, extent, PoolKind::FullContext).unwrap();
            assert_eq!(a, b, "order {order:?}");
        }
    }

    #[test]
    fn eval_is_side_effect_free() {
        let extent = Extent::new(1, 1, 0);
        let model = Model::new(small_cfg(extent, false, 16), 23).unwrap();
        let dims = GridDims::new(2, 3, 1, 2, 16).unwrap();
        let data: Vec<TrainSample> = (0..3)
            .map(|i| TrainSample {
                grid: random_grid(&dims, i),
                caption: None,
            })
            .collect();
        let a = eval_heldout(&model, &data).unwrap();
        let b = eval_heldout(&model, &data).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generation_tasks_validate_their_inputs() {
        let extent = Extent::new(1, 1, 0);
        let model = Model::new(small_cfg(extent, false, 16), 25).unwrap();
        let dims = GridDims::new(2, 2, 1, 2, 16).unwrap();
        let base = GenRequest {
            task: Task::Uncond,
            dims,
            order: ScanOrder::Omega,
            condition: None,
            text: None,
            sampler: Sampler::Greedy,
            seed: 1,
            pool: PoolKind::Pooled,
        };
        assert!(generate(&model, &base).is_ok());

        let with_text = GenRequest {
            task: Task::TextToImage,
            text: Some(vec![1]),
            ..base.clone()
        };
        assert!(matches!(generate(&model, &with_text), Err(Error::Usage(_))));

        let missing_cond = GenRequest {
            task: Task::Outpaint,
            ..base.clone()
        };
        assert!(matches!(generate(&model, &missing_cond), Err(Error::Usage(_))));

        let bad_place = GenRequest {
            task: Task::Outpaint,
            condition: Some(Condition {
                tokens: random_grid(&GridDims::new(2, 2, 1, 2, 16).unwrap(), 3),
                place_row: 1,
                place_col: 1,
            }),
            ..base.clone()
        };
        assert!(matches!(generate(&model, &bad_place), Err(Error::Geometry(_))));
    }

    #[test]
    fn outpaint_with_full_canvas_condition_returns_the_input() {
        let extent = Extent::new(1, 1, 0);
        let model = Model::new(small_cfg(extent, false, 16), 27).unwrap();
        let dims = GridDims::new(2, 2, 1, 2, 16).unwrap();
        let cond = random_grid(&dims, 5);
        let req = GenRequest {
            task: Task::Outpaint,
            dims,
            order: ScanOrder::Omega,
            condition: Some(Condition {
                tokens: cond.clone(),
                place_row: 0,
                place_col: 0,
            }),
            text: None,
            sampler: Sampler::Greedy,
            seed: 4,
            pool: PoolKind::Pooled,
        };
        let (out, stats) = generate(&model, &req).unwrap();
        assert_eq!(out, cond);
        assert_eq!(stats.prefix_len, 4);
    }

    #[test]
    fn single_patch_uncond_reduces_to_a_context_free_local_decode() {
        let extent = Extent::new(1, 1, 0);
        let model = Model::new(small_cfg(extent, false, 16), 29).unwrap();
        let dims = GridDims::new(1, 1, 1, 2, 16).unwrap();
        let req = GenRequest {
            task: Task::Uncond,
            dims,
            order: ScanOrder::Omega,
            condition: None,
            text: None,
            sampler: Sampler::Greedy,
            seed: 11,
            pool: PoolKind::Pooled,
        };
        let (out, _) = generate(&model, &req).unwrap();

        let table = &model.cfg().rpe_table;
        let mut rng = CounterRng::new(11, "generate");
        let (tokens, _, _) = model
            .local_decode(
                &[],
                &[table.self_id()],
                None,
                Sampler::Greedy,
                &mut rng,
                PatchCoord::image(0, 0),
            )
            .unwrap();
        assert_eq!(out.patch(PatchCoord::image(0, 0)).unwrap(), &tokens[..]);
    }

    #[test]
    fn animate_precaches_the_first_frame_and_keeps_it_verbatim() {
        let extent = Extent::new(1, 1, 1);
        let model = Model::new(small_cfg(extent, false, 16), 31).unwrap();
        let frame_dims = GridDims::new(2, 2, 1, 2, 16).unwrap();
        let cond = random_grid(&frame_dims, 8);
        let dims = GridDims::new(2, 2, 3, 2, 16).unwrap();
        let req = GenRequest {
            task: Task::Animate,
            dims,
            order: ScanOrder::Omega,
            condition: Some(Condition {
                tokens: cond.clone(),
                place_row: 0,
                place_col: 0,
            }),
            text: None,
            sampler: Sampler::Greedy,
            seed: 13,
            pool: PoolKind::Pooled,
        };
        let (out, stats) = generate(&model, &req).unwrap();
        assert_eq!(stats.prefix_len, 4);
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(
                    out.patch(PatchCoord::new(r, c, 0)).unwrap(),
                    cond.patch(PatchCoord::image(r, c)).unwrap()
                );
            }
        }
        // The first generated patch found condition context.
        assert!(stats.steps[stats.prefix_len].n_ctx > 0);
    }

    #[test]
    fn generation_is_a_pure_function_of_checkpoint_and_request() {
        let extent = Extent::new(2, 2, 0);
        let model = Model::new(small_cfg(extent, true, 16), 33).unwrap();
        let dims = GridDims::new(2, 3, 1, 2, 16).unwrap();
        let req = GenRequest {
            task: Task::TextToImage,
            dims,
            order: ScanOrder::Zeta,
            condition: None,
            text: Some(vec![2, 7, 1]),
            sampler: Sampler::top_k(3, 0.8).unwrap(),
            seed: 17,
            pool: PoolKind::Pooled,
        };
        let (a, _) = generate(&model, &req).unwrap();
        let (b, _) = generate(&model, &req).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bench_no_pool_context_grows_while_pooled_stays_bounded() {
        let dims = GridDims::new(4, 16, 1, 2, 16).unwrap();
        let plan = split_base(&dims, ScanOrder::Omega);
        let extent = Extent::new(2, 2, 0);
        let pooled = bench_plan(&plan, extent, 4, PoolKind::Pooled);
        let full = bench_plan(&plan, extent, 4, PoolKind::FullContext);
        let pooled_max = pooled.iter().map(|s| s.attended_tokens).max().unwrap();
        let full_max = full.iter().map(|s| s.attended_tokens).max().unwrap();
        assert!(full_max > 3 * pooled_max);
        assert_eq!(full.last().unwrap().n_ctx, dims.n() - 1);
    }

    #[test]
    fn trained_generation_matches_the_caption_family_smoke() {
        // Tiny end-to-end sanity run; the acceptance suite does the real one.
        let extent = Extent::new(2, 2, 0);
        let mut cfg = small_cfg(extent, false, 16);
        cfg.m_side = 2;
        let mut model = Model::new(cfg, 35).unwrap();
        let dims = GridDims::new(2, 2, 1, 2, 16).unwrap();
        let data: Vec<TrainSample> = synth_dataset(
            &[(PatternFamily::Constant, 1.0)],
            12,
            &dims,
            3,
        )
        .unwrap()
        .into_iter()
        .map(|(grid, _, _)| TrainSample { grid, caption: None })
        .collect();
        let cfg = TrainConfig {
            epochs: 6,
            batch: 4,
            lr: 3e-3,
            extent,
            seed: 2,
            ..TrainConfig::default()
        };
        let before = eval_heldout(&model, &data[..4.min(data.len())].to_vec()).unwrap();
        train(&mut model, &data, &cfg, PoolKind::Pooled).unwrap();
        let after = eval_heldout(&model, &data[..4.min(data.len())].to_vec()).unwrap();
        assert!(after < before, "training must reduce loss: {before} -> {after}");
    }

    #[test]
    fn long_canvas_generation_stays_within_the_extent_cost_bound() {
        // A canvas four times longer than anything the model would train
        // on still completes, and no patch attends more tokens than the
        // extent allows.
        let extent = Extent::new(2, 2, 0);
        let model = Model::new(small_cfg(extent, false, 16), 55).unwrap();
        let dims = GridDims::new(16, 4, 1, 2, 16).unwrap();
        let req = GenRequest {
            task: Task::Uncond,
            dims,
            order: ScanOrder::Omega,
            condition: None,
            text: None,
            sampler: Sampler::Greedy,
            seed: 3,
            pool: PoolKind::Pooled,
        };
        let (out, stats) = generate(&model, &req).unwrap();
        assert_eq!(out.dims().n(), 64);
        // Width 4, extent (2,2): at most 2 rows of 4 plus 2 same-row
        // patches of context, each M tokens, plus the patch itself.
        let bound = (1 + 2 * 4 + 2) * model.cfg().m();
        for s in &stats.steps {
            assert!(s.attended_tokens <= bound, "step {} attends {}", s.step, s.attended_tokens);
        }
    }

    #[test]
    fn trace_validator_rejects_out_of_order_events() {
        let good = vec![
            TraceEvent::Select(0),
            TraceEvent::Emb(0),
            TraceEvent::Forward(0),
            TraceEvent::Add(0),
            TraceEvent::Remove(0),
        ];
        assert!(validate_trace(&good, 0, 1).is_ok());
        let mut bad = good.clone();
        bad.swap(2, 3);
        assert!(validate_trace(&bad, 0, 1).is_err());
        assert!(validate_trace(&good, 0, 2).is_err());
    }
}
