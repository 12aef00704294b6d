//! Bounded context pool: per-patch multi-layer activation caches,
//! extent-limited context selection, and eviction of caches that can
//! never be selected again.
//!
//! Lifetimes are precomputed from the full plan when the pool is
//! built: a cache's last use is the latest plan step whose patch has
//! it inside the selection box, so Remove can evict exactly the
//! entries the future will never ask for.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::PatchCoord;
use crate::numerics::Tensor;
use crate::plan::OrderPlan;

/// Selection box: width/height in patches, frames backwards in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub e_w: usize,
    pub e_h: usize,
    pub e_f: usize,
}

impl Extent {
    pub fn new(e_w: usize, e_h: usize, e_f: usize) -> Self {
        Extent { e_w, e_h, e_f }
    }

    /// Is `ctx` selectable as context for `cur`?
    pub fn admits(&self, cur: PatchCoord, ctx: PatchCoord) -> bool {
        cur.row.abs_diff(ctx.row) <= self.e_h
            && cur.col.abs_diff(ctx.col) <= self.e_w
            && ctx.frame <= cur.frame
            && cur.frame - ctx.frame <= self.e_f
    }
}

/// The stored activations of one generated patch: slot 0 holds the
/// patch's input token embeddings, slot l the output of layer l.
#[derive(Debug, Clone)]
pub struct LayerCache {
    coord: PatchCoord,
    layers: Vec<Tensor>,
}

impl LayerCache {
    pub fn new(coord: PatchCoord, layers: Vec<Tensor>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("cache needs at least one layer slot".into()));
        }
        let shape = layers[0].shape();
        for (i, t) in layers.iter().enumerate() {
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "cache slot {i} is {:?}, slot 0 is {:?}",
                    t.shape(),
                    shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::State(format!("cache slot {i} holds non-finite values")));
            }
        }
        Ok(LayerCache { coord, layers })
    }

    /// Minimal cache for plans that are simulated without a model.
    pub fn placeholder(coord: PatchCoord) -> Self {
        LayerCache {
            coord,
            layers: vec![Tensor::zeros(1, 1)],
        }
    }

    pub fn coord(&self) -> PatchCoord {
        self.coord
    }

    pub fn slots(&self) -> usize {
        self.layers.len()
    }

    pub fn slot(&self, l: usize) -> &Tensor {
        &self.layers[l]
    }
}

/// Live pool state for one generation session.
#[derive(Debug, Clone)]
pub struct ContextPool {
    extent: Extent,
    plan: OrderPlan,
    /// plan step -> cache, so iteration is ascending generation order.
    entries: BTreeMap<usize, LayerCache>,
    /// plan step -> last plan step that selects it (own step if none).
    last_use: Vec<usize>,
    cursor: usize,
    peak_size: usize,
}

impl ContextPool {
    /// Builds an empty pool and precomputes every patch's last use.
    pub fn new(plan: OrderPlan, extent: Extent) -> Self {
        let dims = *plan.dims();
        let mut last_use = vec![0; plan.len()];
        for (step, &p) in plan.sequence().iter().enumerate() {
            let mut last = step;
            // Patches that could select p sit in the box around p, in the
            // same frame or up to e_f frames later.
            let r_lo = p.row.saturating_sub(extent.e_h);
            let r_hi = (p.row + extent.e_h).min(dims.h_p - 1);
            let c_lo = p.col.saturating_sub(extent.e_w);
            let c_hi = (p.col + extent.e_w).min(dims.w_p - 1);
            let f_hi = (p.frame + extent.e_f).min(dims.f - 1);
            for f in p.frame..=f_hi {
                for r in r_lo..=r_hi {
                    for c in c_lo..=c_hi {
                        let q = PatchCoord::new(r, c, f);
                        let t = plan.step_of(q).expect("plan covers its grid");
                        if t > last {
                            last = t;
                        }
                    }
                }
            }
            last_use[step] = last;
        }
        ContextPool {
            extent,
            plan,
            entries: BTreeMap::new(),
            last_use,
            cursor: 0,
            peak_size: 0,
        }
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn plan(&self) -> &OrderPlan {
        &self.plan
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn peak_size(&self) -> usize {
        self.peak_size
    }

    pub fn last_use_of(&self, c: PatchCoord) -> Result<usize> {
        Ok(self.last_use[self.plan.step_of(c)?])
    }

    /// Context for the patch at the cursor: cached entries inside the
    /// extent box, in ascending generation order.
    pub fn select(&self, c: PatchCoord) -> Result<Vec<(PatchCoord, &LayerCache)>> {
        if self.cursor >= self.plan.len() || self.plan.at(self.cursor) != c {
            return Err(Error::Sequencing(format!(
                "select for ({},{},{}) at cursor {} (expected {:?})",
                c.row,
                c.col,
                c.frame,
                self.cursor,
                self.plan.sequence().get(self.cursor)
            )));
        }
        Ok(self
            .entries
            .values()
            .filter(|e| self.extent.admits(c, e.coord()))
            .map(|e| (e.coord(), e))
            .collect())
    }

    /// Stores the cache of the patch at the cursor and advances it.
    pub fn add(&mut self, cache: LayerCache) -> Result<()> {
        if self.cursor >= self.plan.len() {
            return Err(Error::Sequencing("add past the end of the plan".into()));
        }
        let expected = self.plan.at(self.cursor);
        if cache.coord() != expected {
            return Err(Error::Sequencing(format!(
                "add for ({},{},{}) at cursor {} expecting ({},{},{})",
                cache.coord().row,
                cache.coord().col,
                cache.coord().frame,
                self.cursor,
                expected.row,
                expected.col,
                expected.frame
            )));
        }
        if self.entries.contains_key(&self.cursor) {
            return Err(Error::State(format!(
                "cache for step {} already present",
                self.cursor
            )));
        }
        self.entries.insert(self.cursor, cache);
        self.cursor += 1;
        self.peak_size = self.peak_size.max(self.entries.len());
        Ok(())
    }

    /// Evicts every entry whose last use has passed; idempotent.
    pub fn remove(&mut self) -> Vec<PatchCoord> {
        let cursor = self.cursor;
        let last_use = &self.last_use;
        let dead: Vec<usize> = self
            .entries
            .keys()
            .copied()
            .filter(|&s| last_use[s] < cursor)
            .collect();
        dead.iter()
            .map(|s| self.entries.remove(s).expect("key just listed").coord())
            .collect()
    }
}
