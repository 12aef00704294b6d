//! Generation-order planning and order-aware relative position ids.
//!
//! Four base scan orders cover training; outpainting composes them as
//! expanding rectangular rings around a condition rectangle. The
//! relative-position table is derived by simulating the supported
//! plans on a probe grid and collecting every (context - current)
//! offset that selection can produce.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{linear_index, GridDims, PatchCoord};
use crate::pool::Extent;

/// Base patch scan orders; the star variants reverse the inner axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanOrder {
    /// Rows top-to-bottom, left-to-right within each row.
    Omega,
    /// Rows top-to-bottom, right-to-left within each row.
    OmegaStar,
    /// Columns left-to-right, top-to-bottom within each column.
    Zeta,
    /// Columns left-to-right, bottom-to-top within each column.
    ZetaStar,
}

impl ScanOrder {
    pub const ALL: [ScanOrder; 4] = [
        ScanOrder::Omega,
        ScanOrder::OmegaStar,
        ScanOrder::Zeta,
        ScanOrder::ZetaStar,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScanOrder::Omega => "omega",
            ScanOrder::OmegaStar => "omega_star",
            ScanOrder::Zeta => "zeta",
            ScanOrder::ZetaStar => "zeta_star",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "omega" => Ok(ScanOrder::Omega),
            "omega_star" => Ok(ScanOrder::OmegaStar),
            "zeta" => Ok(ScanOrder::Zeta),
            "zeta_star" => Ok(ScanOrder::ZetaStar),
            other => Err(Error::Usage(format!("unknown scan order {other:?}"))),
        }
    }
}

/// A total generation order over the grid plus a condition-prefix marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderPlan {
    dims: GridDims,
    sequence: Vec<PatchCoord>,
    prefix_len: usize,
    /// linear_index -> plan step.
    step_by_index: Vec<usize>,
}

impl OrderPlan {
    fn from_sequence(dims: GridDims, sequence: Vec<PatchCoord>, prefix_len: usize) -> Result<Self> {
        if sequence.len() != dims.n() || prefix_len > dims.n() {
            return Err(Error::Geometry(format!(
                "plan of {} steps, prefix {}, for {} patches",
                sequence.len(),
                prefix_len,
                dims.n()
            )));
        }
        let mut step_by_index = vec![usize::MAX; dims.n()];
        for (step, &c) in sequence.iter().enumerate() {
            let i = linear_index(c, &dims)?;
            if step_by_index[i] != usize::MAX {
                return Err(Error::Geometry(format!("patch ({},{},{}) repeated", c.row, c.col, c.frame)));
            }
            step_by_index[i] = step;
        }
        Ok(OrderPlan {
            dims,
            sequence,
            prefix_len,
            step_by_index,
        })
    }

    pub fn dims(&self) -> &GridDims {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn sequence(&self) -> &[PatchCoord] {
        &self.sequence
    }

    pub fn at(&self, step: usize) -> PatchCoord {
        self.sequence[step]
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    /// Marks the first `len` plan steps as the condition prefix.
    pub fn with_prefix_len(mut self, len: usize) -> Result<Self> {
        if len > self.sequence.len() {
            return Err(Error::Geometry(format!(
                "prefix {} exceeds plan of {}",
                len,
                self.sequence.len()
            )));
        }
        self.prefix_len = len;
        Ok(self)
    }

    pub fn step_of(&self, c: PatchCoord) -> Result<usize> {
        Ok(self.step_by_index[linear_index(c, &self.dims)?])
    }
}

fn spatial_scan(h_p: usize, w_p: usize, order: ScanOrder) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(h_p * w_p);
    match order {
        ScanOrder::Omega => {
            for r in 0..h_p {
                for c in 0..w_p {
                    out.push((r, c));
                }
            }
        }
        ScanOrder::OmegaStar => {
            for r in 0..h_p {
                for c in (0..w_p).rev() {
                    out.push((r, c));
                }
            }
        }
        ScanOrder::Zeta => {
            for c in 0..w_p {
                for r in 0..h_p {
                    out.push((r, c));
                }
            }
        }
        ScanOrder::ZetaStar => {
            for c in 0..w_p {
                for r in (0..h_p).rev() {
                    out.push((r, c));
                }
            }
        }
    }
    out
}

/// Frames in ascending order; within each frame, patches in the chosen
/// scan order. No condition prefix.
pub fn split_base(d: &GridDims, order: ScanOrder) -> OrderPlan {
    let mut seq = Vec::with_capacity(d.n());
    for frame in 0..d.f {
        for (r, c) in spatial_scan(d.h_p, d.w_p, order) {
            seq.push(PatchCoord::new(r, c, frame));
        }
    }
    OrderPlan::from_sequence(*d, seq, 0).expect("base scan covers the grid")
}

/// A rectangle of patches, in patch units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn new(row: usize, col: usize, h: usize, w: usize) -> Self {
        Rect { row, col, h, w }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.h && c >= self.col && c < self.col + self.w
    }
}

/// Condition patches first (omega order inside the rectangle), then
/// expanding rectangular rings: row above left-to-right, row below
/// left-to-right, column left top-to-bottom, column right top-to-bottom,
/// clipped at the canvas borders.
pub fn split_outpaint(d: &GridDims, condition: Rect) -> Result<OrderPlan> {
    if d.f != 1 {
        return Err(Error::Geometry("outpaint plans are single-frame".into()));
    }
    if condition.h == 0 || condition.w == 0 {
        return Err(Error::Geometry("empty condition rectangle".into()));
    }
    if condition.row + condition.h > d.h_p || condition.col + condition.w > d.w_p {
        return Err(Error::Geometry(format!(
            "condition {}x{} at ({},{}) outside {}x{} grid",
            condition.h, condition.w, condition.row, condition.col, d.h_p, d.w_p
        )));
    }

    let mut seq = Vec::with_capacity(d.n());
    for r in condition.row..condition.row + condition.h {
        for c in condition.col..condition.col + condition.w {
            seq.push(PatchCoord::image(r, c));
        }
    }
    let prefix_len = seq.len();

    let top = condition.row as isize;
    let bottom = (condition.row + condition.h - 1) as isize;
    let left = condition.col as isize;
    let right = (condition.col + condition.w - 1) as isize;
    let mut k: isize = 1;
    while seq.len() < d.n() {
        let col_lo = (left - k).max(0) as usize;
        let col_hi = ((right + k) as usize).min(d.w_p - 1);
        let row_lo = (top - k + 1).max(0) as usize;
        let row_hi = (((bottom + k - 1).max(0)) as usize).min(d.h_p - 1);

        if top - k >= 0 {
            let r = (top - k) as usize;
            for c in col_lo..=col_hi {
                seq.push(PatchCoord::image(r, c));
            }
        }
        if ((bottom + k) as usize) < d.h_p {
            let r = (bottom + k) as usize;
            for c in col_lo..=col_hi {
                seq.push(PatchCoord::image(r, c));
            }
        }
        if left - k >= 0 {
            let c = (left - k) as usize;
            for r in row_lo..=row_hi {
                seq.push(PatchCoord::image(r, c));
            }
        }
        if ((right + k) as usize) < d.w_p {
            let c = (right + k) as usize;
            for r in row_lo..=row_hi {
                seq.push(PatchCoord::image(r, c));
            }
        }
        k += 1;
        if k > (d.h_p + d.w_p) as isize {
            return Err(Error::Geometry("ring emission failed to cover grid".into()));
        }
    }
    OrderPlan::from_sequence(*d, seq, prefix_len)
}

/// Relative position of a context patch with respect to the patch being
/// generated: `d_row`/`d_col` are context minus current, `d_frame` is
/// current minus context (so it is always >= 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelOffset {
    pub d_row: i32,
    pub d_col: i32,
    pub d_frame: i32,
}

impl RelOffset {
    pub const SELF: RelOffset = RelOffset {
        d_row: 0,
        d_col: 0,
        d_frame: 0,
    };

    /// Offset of `ctx` relative to `cur`.
    pub fn between(cur: PatchCoord, ctx: PatchCoord) -> Self {
        RelOffset {
            d_row: ctx.row as i32 - cur.row as i32,
            d_col: ctx.col as i32 - cur.col as i32,
            d_frame: cur.frame as i32 - ctx.frame as i32,
        }
    }

    pub fn within(&self, extent: &Extent) -> bool {
        self.d_row.unsigned_abs() as usize <= extent.e_h
            && self.d_col.unsigned_abs() as usize <= extent.e_w
            && self.d_frame >= 0
            && self.d_frame as usize <= extent.e_f
    }

    /// Clamps each component into the extent box; the full-context
    /// reference path uses this for offsets the pool can never produce.
    pub fn clamped(&self, extent: &Extent) -> RelOffset {
        RelOffset {
            d_row: self.d_row.clamp(-(extent.e_h as i32), extent.e_h as i32),
            d_col: self.d_col.clamp(-(extent.e_w as i32), extent.e_w as i32),
            d_frame: self.d_frame.clamp(0, extent.e_f as i32),
        }
    }
}

/// Dense, sorted table of reachable relative offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpeTable {
    offsets: Vec<RelOffset>,
}

impl RpeTable {
    pub fn from_offsets(set: impl IntoIterator<Item = RelOffset>) -> Self {
        let mut offsets: BTreeSet<RelOffset> = set.into_iter().collect();
        offsets.insert(RelOffset::SELF);
        RpeTable {
            offsets: offsets.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offsets(&self) -> &[RelOffset] {
        &self.offsets
    }

    pub fn id_of(&self, o: RelOffset) -> Result<usize> {
        self.offsets
            .binary_search(&o)
            .map_err(|_| Error::MissingOffset(o))
    }

    pub fn self_id(&self) -> usize {
        self.id_of(RelOffset::SELF).expect("self offset always present")
    }

    pub fn contains(&self, o: RelOffset) -> bool {
        self.offsets.binary_search(&o).is_ok()
    }
}

/// The plan families a model supports; the offset table is derived from
/// this set plus the extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlanKind {
    Base(ScanOrder),
    Outpaint,
}

impl PlanKind {
    pub const DEFAULT_SET: [PlanKind; 5] = [
        PlanKind::Base(ScanOrder::Omega),
        PlanKind::Base(ScanOrder::OmegaStar),
        PlanKind::Base(ScanOrder::Zeta),
        PlanKind::Base(ScanOrder::ZetaStar),
        PlanKind::Outpaint,
    ];
}

fn record_plan_offsets(plan: &OrderPlan, extent: &Extent, into: &mut BTreeSet<RelOffset>) {
    let d = plan.dims();
    for (step, &cur) in plan.sequence().iter().enumerate() {
        let r_lo = cur.row.saturating_sub(extent.e_h);
        let r_hi = (cur.row + extent.e_h).min(d.h_p - 1);
        let c_lo = cur.col.saturating_sub(extent.e_w);
        let c_hi = (cur.col + extent.e_w).min(d.w_p - 1);
        let f_lo = cur.frame.saturating_sub(extent.e_f);
        for f in f_lo..=cur.frame {
            for r in r_lo..=r_hi {
                for c in c_lo..=c_hi {
                    let ctx = PatchCoord::new(r, c, f);
                    if let Ok(s) = plan.step_of(ctx) {
                        if s < step {
                            into.insert(RelOffset::between(cur, ctx));
                        }
                    }
                }
            }
        }
    }
}

/// Derives the set of offsets any supported plan can select under the
/// extent, by brute-force simulation over a probe grid of size
/// (2*e_h + 3) x (2*e_w + 3) x (e_f + 2). Always contains the self
/// offset. Monotone in the extent.
pub fn reachable_offsets(plans: &[PlanKind], extent: &Extent) -> RpeTable {
    let h = 2 * extent.e_h + 3;
    let w = 2 * extent.e_w + 3;
    let f = extent.e_f + 2;
    let probe = GridDims::new(h, w, f, 1, 2).expect("probe grid dims");
    let probe_image = GridDims::new(h, w, 1, 1, 2).expect("probe image dims");

    let mut set = BTreeSet::new();
    set.insert(RelOffset::SELF);
    for kind in plans {
        match kind {
            PlanKind::Base(order) => {
                record_plan_offsets(&split_base(&probe, *order), extent, &mut set);
            }
            PlanKind::Outpaint => {
                for row in 0..h {
                    for col in 0..w {
                        for rh in 1..=(h - row) {
                            for rw in 1..=(w - col) {
                                let plan = split_outpaint(&probe_image, Rect::new(row, col, rh, rw))
                                    .expect("probe rectangles are valid");
                                record_plan_offsets(&plan, extent, &mut set);
                            }
                        }
                    }
                }
            }
        }
    }
    RpeTable::from_offsets(set)
}

/// Renders a plan as rows of 1-based generation indices, one matrix
/// per frame, frames separated by a blank line.
pub fn plan_text_matrix(plan: &OrderPlan) -> String {
    let d = plan.dims();
    let width = plan.len().to_string().len();
    let mut out = String::new();
    for frame in 0..d.f {
        if frame > 0 {
            out.push('\n');
        }
        for r in 0..d.h_p {
            let mut cells = Vec::with_capacity(d.w_p);
            for c in 0..d.w_p {
                let step = plan
                    .step_of(PatchCoord::new(r, c, frame))
                    .expect("plan covers its grid");
                cells.push(format!("{:>width$}", step + 1));
            }
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
    }
    out
}

/// Ordered embedding ids for [current patch; context patches]: the self
/// id first, then one id per context coordinate in the given order.
pub fn emb_assign(
    plan: &OrderPlan,
    step: usize,
    context: &[PatchCoord],
    table: &RpeTable,
) -> Result<Vec<usize>> {
    if step >= plan.len() {
        return Err(Error::Range(format!(
            "step {} of a {}-step plan",
            step,
            plan.len()
        )));
    }
    let cur = plan.at(step);
    let mut ids = Vec::with_capacity(1 + context.len());
    ids.push(table.self_id());
    for &ctx in context {
        ids.push(table.id_of(RelOffset::between(cur, ctx))?);
    }
    Ok(ids)
}
