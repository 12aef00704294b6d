//! Python bindings: token grids, order planning, the mock codec, and
//! a small engine handle for training and generation.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use patchgen_core::codec::{
    self, classify_pattern, Codebook, ParamSpace, PatternFamily, PatternSpec,
};
use patchgen_core::decoder::{LocalMode, Model, ModelConfig, RpeFeed, Sampler};
use patchgen_core::error::Error;
use patchgen_core::grid::{GridDims, PatchCoord, TokenGrid};
use patchgen_core::numerics::{check_registered_ops, default_tolerance, Real};
use patchgen_core::pipeline::{
    self, eval_heldout, generate, Condition, GenRequest, LossMode, PoolKind, Task, TrainConfig,
    TrainSample,
};
use patchgen_core::plan::{
    plan_text_matrix, reachable_offsets, split_base, split_outpaint, PlanKind, Rect, ScanOrder,
};
use patchgen_core::pool::Extent;

fn err(e: Error) -> PyErr {
    match &e {
        Error::Io(_) | Error::Format(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_family(name: &str) -> PyResult<PatternFamily> {
    match name {
        "constant" => Ok(PatternFamily::Constant),
        "hstripes" => Ok(PatternFamily::HStripes),
        "vstripes" => Ok(PatternFamily::VStripes),
        "checker" => Ok(PatternFamily::Checker),
        "ramp" => Ok(PatternFamily::Ramp),
        other => Err(PyValueError::new_err(format!("unknown family {other:?}"))),
    }
}

/// A canvas (or video) of discrete visual tokens.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Grid {
    inner: TokenGrid,
}

#[pymethods]
impl Grid {
    #[staticmethod]
    #[pyo3(signature = (h_p, w_p, f=1, m_side=4, vocab=64))]
    fn zeros(h_p: usize, w_p: usize, f: usize, m_side: usize, vocab: usize) -> PyResult<Self> {
        let dims = GridDims::new(h_p, w_p, f, m_side, vocab).map_err(err)?;
        Ok(Grid {
            inner: TokenGrid::zeros(dims),
        })
    }

    #[staticmethod]
    fn from_nwit_bytes(bytes: Vec<u8>) -> PyResult<Self> {
        Ok(Grid {
            inner: TokenGrid::from_nwit_bytes(&bytes).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Grid {
            inner: TokenGrid::read_nwit(path.as_ref()).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.write_nwit(path.as_ref()).map_err(err)
    }

    fn nwit_bytes(&self) -> PyResult<Vec<u8>> {
        self.inner.to_nwit_bytes().map_err(err)
    }

    /// (h_p, w_p, f, m_side, vocab).
    #[getter]
    fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let d = self.inner.dims();
        (d.h_p, d.w_p, d.f, d.m_side, d.vocab)
    }

    fn tokens(&self) -> Vec<u16> {
        self.inner.tokens().to_vec()
    }

    fn patch(&self, row: usize, col: usize, frame: usize) -> PyResult<Vec<u16>> {
        Ok(self
            .inner
            .patch(PatchCoord::new(row, col, frame))
            .map_err(err)?
            .to_vec())
    }

    /// Rule-based pattern family, or None.
    fn classify(&self) -> Option<&'static str> {
        classify_pattern(&self.inner).map(|f| f.word())
    }

    /// Binary PPM bytes of one decoded frame.
    #[pyo3(signature = (frame=0))]
    fn ppm_bytes(&self, frame: usize) -> PyResult<Vec<u8>> {
        let book = Codebook::new(self.inner.dims().vocab).map_err(err)?;
        Ok(codec::decode_image(&book, &self.inner, frame)
            .map_err(err)?
            .ppm_bytes())
    }

    fn __eq__(&self, other: &Grid) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let d = self.inner.dims();
        format!(
            "Grid({}x{}x{} patches, m_side {}, vocab {})",
            d.h_p, d.w_p, d.f, d.m_side, d.vocab
        )
    }
}

/// Model handle: configuration, training, generation, checkpoints.
#[pyclass]
struct Engine {
    model: Model,
}

#[pymethods]
impl Engine {
    #[new]
    #[pyo3(signature = (layers=2, dim=32, heads=4, m_side=2, vocab=64, text=true,
                        extent=(2, 2, 1), mode="ar", rpe_feed="pre", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        layers: usize,
        dim: usize,
        heads: usize,
        m_side: usize,
        vocab: usize,
        text: bool,
        extent: (usize, usize, usize),
        mode: &str,
        rpe_feed: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let extent = Extent::new(extent.0, extent.1, extent.2);
        let cfg = ModelConfig {
            layers,
            dim,
            heads,
            m_side,
            vocab,
            text_vocab: if text { codec::text_vocab() } else { 0 },
            text_len: if text { 8 } else { 0 },
            rpe_table: reachable_offsets(&PlanKind::DEFAULT_SET, &extent),
            rpe_feed: match rpe_feed {
                "pre" => RpeFeed::Pre,
                "post" => RpeFeed::Post,
                other => {
                    return Err(PyValueError::new_err(format!("unknown rpe feed {other:?}")))
                }
            },
            rpe_every_layer: true,
            local_mode: LocalMode::parse(mode).map_err(err)?,
            caches_enabled: true,
            pnar_rounds: 8,
            extent,
        };
        Ok(Engine {
            model: Model::new(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(prefix: &str) -> PyResult<Self> {
        Ok(Engine {
            model: Model::load(prefix.as_ref()).map_err(err)?,
        })
    }

    fn save(&self, prefix: &str) -> PyResult<()> {
        self.model.save(prefix.as_ref()).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.model.params().param_count()
    }

    #[getter]
    fn forward_passes(&self) -> u64 {
        self.model.forward_passes()
    }

    /// Trains on synthetic pattern samples; returns the mean loss of
    /// the final optimizer step.
    #[pyo3(signature = (count=32, h_p=2, w_p=2, steps=16, batch=4, lr=2e-3,
                        families=vec!["vstripes".into(), "checker".into()], seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train_patterns(
        &mut self,
        count: usize,
        h_p: usize,
        w_p: usize,
        steps: u64,
        batch: usize,
        lr: f64,
        families: Vec<String>,
        seed: u64,
    ) -> PyResult<f64> {
        let data = self.synth_samples(count, h_p, w_p, &families, seed)?;
        let cfg = TrainConfig {
            epochs: 10_000,
            batch,
            lr: lr as Real,
            warmup_frac: 0.1,
            loss_mode: LossMode::Patch,
            orders: ScanOrder::ALL.to_vec(),
            extent: self.model.cfg().extent,
            seed,
            max_steps: Some(steps),
        };
        let stats =
            pipeline::train(&mut self.model, &data, &cfg, PoolKind::Pooled).map_err(err)?;
        Ok(stats.step_losses.last().copied().unwrap_or_default() as f64)
    }

    /// Mean per-token cross-entropy on synthetic held-out samples.
    #[pyo3(signature = (count=8, h_p=2, w_p=2,
                        families=vec!["vstripes".into(), "checker".into()], seed=1))]
    fn eval_patterns(
        &self,
        count: usize,
        h_p: usize,
        w_p: usize,
        families: Vec<String>,
        seed: u64,
    ) -> PyResult<f64> {
        let data = self.synth_samples(count, h_p, w_p, &families, seed)?;
        Ok(eval_heldout(&self.model, &data).map_err(err)? as f64)
    }

    /// Unconditional or text-conditioned generation.
    #[pyo3(signature = (h_p, w_p, frames=1, text=None, seed=0, sampler="greedy",
                        topk=5, temperature=1.0, no_pool=false))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        &self,
        h_p: usize,
        w_p: usize,
        frames: usize,
        text: Option<&str>,
        seed: u64,
        sampler: &str,
        topk: usize,
        temperature: f64,
        no_pool: bool,
    ) -> PyResult<Grid> {
        let mcfg = self.model.cfg();
        let dims = GridDims::new(h_p, w_p, frames, mcfg.m_side, mcfg.vocab).map_err(err)?;
        let task = match (text.is_some(), frames > 1) {
            (true, false) => Task::TextToImage,
            (true, true) => Task::TextToVideo,
            (false, false) => Task::Uncond,
            (false, true) => {
                return Err(PyValueError::new_err(
                    "multi-frame generation needs text or an animate condition",
                ))
            }
        };
        let caption = text
            .map(codec::caption_from_text)
            .transpose()
            .map_err(err)?;
        let req = GenRequest {
            task,
            dims,
            order: ScanOrder::Omega,
            condition: None,
            text: caption,
            sampler: self.sampler(sampler, topk, temperature)?,
            seed,
            pool: if no_pool {
                PoolKind::FullContext
            } else {
                PoolKind::Pooled
            },
        };
        let (grid, _) = generate(&self.model, &req).map_err(err)?;
        Ok(Grid { inner: grid })
    }

    /// Ring outpainting around a condition placed at (row, col).
    #[pyo3(signature = (cond, row, col, h_p, w_p, seed=0))]
    fn outpaint(
        &self,
        cond: &Grid,
        row: usize,
        col: usize,
        h_p: usize,
        w_p: usize,
        seed: u64,
    ) -> PyResult<Grid> {
        let mcfg = self.model.cfg();
        let dims = GridDims::new(h_p, w_p, 1, mcfg.m_side, mcfg.vocab).map_err(err)?;
        let req = GenRequest {
            task: Task::Outpaint,
            dims,
            order: ScanOrder::Omega,
            condition: Some(Condition {
                tokens: cond.inner.clone(),
                place_row: row,
                place_col: col,
            }),
            text: None,
            sampler: Sampler::Greedy,
            seed,
            pool: PoolKind::Pooled,
        };
        let (grid, _) = generate(&self.model, &req).map_err(err)?;
        Ok(Grid { inner: grid })
    }

    /// Extends a first-frame condition into `frames` frames.
    #[pyo3(signature = (cond, frames, seed=0))]
    fn animate(&self, cond: &Grid, frames: usize, seed: u64) -> PyResult<Grid> {
        let cd = cond.inner.dims();
        let dims =
            GridDims::new(cd.h_p, cd.w_p, frames, cd.m_side, cd.vocab).map_err(err)?;
        let req = GenRequest {
            task: Task::Animate,
            dims,
            order: ScanOrder::Omega,
            condition: Some(Condition {
                tokens: cond.inner.clone(),
                place_row: 0,
                place_col: 0,
            }),
            text: None,
            sampler: Sampler::Greedy,
            seed,
            pool: PoolKind::Pooled,
        };
        let (grid, _) = generate(&self.model, &req).map_err(err)?;
        Ok(Grid { inner: grid })
    }
}

impl Engine {
    fn sampler(&self, name: &str, topk: usize, temperature: f64) -> PyResult<Sampler> {
        match name {
            "greedy" => Ok(Sampler::Greedy),
            "topk" => Sampler::top_k(topk, temperature as Real).map_err(err),
            other => Err(PyValueError::new_err(format!("unknown sampler {other:?}"))),
        }
    }

    fn synth_samples(
        &self,
        count: usize,
        h_p: usize,
        w_p: usize,
        families: &[String],
        seed: u64,
    ) -> PyResult<Vec<TrainSample>> {
        let mcfg = self.model.cfg();
        let dims = GridDims::new(h_p, w_p, 1, mcfg.m_side, mcfg.vocab).map_err(err)?;
        let mix: PyResult<Vec<(PatternFamily, f64)>> = families
            .iter()
            .map(|f| Ok((parse_family(f)?, 1.0)))
            .collect();
        let space = ParamSpace {
            periods: vec![2],
            deltas: vec![16],
        };
        let raw = codec::synth_dataset_in(&mix?, count, &dims, seed, &space).map_err(err)?;
        Ok(raw
            .into_iter()
            .map(|(grid, caption, _)| TrainSample {
                grid,
                caption: if mcfg.has_text() { Some(caption) } else { None },
            })
            .collect())
    }
}

/// Base scan order as a list of (row, col, frame) patch coordinates.
#[pyfunction]
#[pyo3(signature = (h_p, w_p, f=1, order="omega"))]
fn plan_order(h_p: usize, w_p: usize, f: usize, order: &str) -> PyResult<Vec<(usize, usize, usize)>> {
    let dims = GridDims::new(h_p, w_p, f, 1, 2).map_err(err)?;
    let plan = split_base(&dims, ScanOrder::parse(order).map_err(err)?);
    Ok(plan
        .sequence()
        .iter()
        .map(|c| (c.row, c.col, c.frame))
        .collect())
}

/// Ring outpaint order; returns (coords, prefix_len).
#[pyfunction]
fn plan_outpaint(
    h_p: usize,
    w_p: usize,
    row: usize,
    col: usize,
    cond_h: usize,
    cond_w: usize,
) -> PyResult<(Vec<(usize, usize, usize)>, usize)> {
    let dims = GridDims::new(h_p, w_p, 1, 1, 2).map_err(err)?;
    let plan = split_outpaint(&dims, Rect::new(row, col, cond_h, cond_w)).map_err(err)?;
    let coords = plan
        .sequence()
        .iter()
        .map(|c| (c.row, c.col, c.frame))
        .collect();
    Ok((coords, plan.prefix_len()))
}

/// Text rendering of a base scan order (1-based indices).
#[pyfunction]
#[pyo3(signature = (h_p, w_p, f=1, order="omega"))]
fn plan_matrix(h_p: usize, w_p: usize, f: usize, order: &str) -> PyResult<String> {
    let dims = GridDims::new(h_p, w_p, f, 1, 2).map_err(err)?;
    Ok(plan_text_matrix(&split_base(
        &dims,
        ScanOrder::parse(order).map_err(err)?,
    )))
}

/// Number of reachable relative-position offsets for an extent.
#[pyfunction]
fn rpe_table_len(e_w: usize, e_h: usize, e_f: usize) -> usize {
    reachable_offsets(&PlanKind::DEFAULT_SET, &Extent::new(e_w, e_h, e_f)).len()
}

/// Synthetic pattern samples: list of (grid, caption text, family).
#[pyfunction]
#[pyo3(signature = (count, h_p=2, w_p=2, families=vec!["vstripes".into(), "checker".into()],
                    m_side=4, vocab=64, seed=0))]
fn synth(
    count: usize,
    h_p: usize,
    w_p: usize,
    families: Vec<String>,
    m_side: usize,
    vocab: usize,
    seed: u64,
) -> PyResult<Vec<(Grid, String, &'static str)>> {
    let dims = GridDims::new(h_p, w_p, 1, m_side, vocab).map_err(err)?;
    let mix: PyResult<Vec<(PatternFamily, f64)>> = families
        .iter()
        .map(|f| Ok((parse_family(f)?, 1.0)))
        .collect();
    let raw = codec::synth_dataset(&mix?, count, &dims, seed).map_err(err)?;
    raw.into_iter()
        .map(|(grid, caption, spec)| {
            Ok((
                Grid { inner: grid },
                codec::caption_to_text(&caption).map_err(err)?,
                spec.family.word(),
            ))
        })
        .collect()
}

/// Renders one pattern spec deterministically.
#[pyfunction]
#[pyo3(signature = (family, base, delta, period=2, h_p=2, w_p=2, m_side=4, vocab=64))]
#[allow(clippy::too_many_arguments)]
fn render_pattern(
    family: &str,
    base: u16,
    delta: u16,
    period: usize,
    h_p: usize,
    w_p: usize,
    m_side: usize,
    vocab: usize,
) -> PyResult<Grid> {
    let dims = GridDims::new(h_p, w_p, 1, m_side, vocab).map_err(err)?;
    let spec = PatternSpec {
        family: parse_family(family)?,
        period,
        base,
        delta,
    };
    Ok(Grid {
        inner: spec.render(&dims).map_err(err)?,
    })
}

/// Finite-difference checks over all differentiable ops; returns
/// (name, max_rel_err, pass) rows.
#[pyfunction]
#[pyo3(signature = (seed=0, cases=5))]
fn gradcheck(seed: u64, cases: usize) -> PyResult<Vec<(String, f64, bool)>> {
    let checks = check_registered_ops(seed, cases, default_tolerance()).map_err(err)?;
    Ok(checks
        .into_iter()
        .map(|c| (c.name.to_string(), c.max_rel_err as f64, c.pass))
        .collect())
}

#[pymodule]
fn patchgen(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Grid>()?;
    m.add_class::<Engine>()?;
    m.add_function(wrap_pyfunction!(plan_order, m)?)?;
    m.add_function(wrap_pyfunction!(plan_outpaint, m)?)?;
    m.add_function(wrap_pyfunction!(plan_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(rpe_table_len, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(render_pattern, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
