//! Discretized local world: soft-risk and signed-distance grids, traversability,
//! time-indexed patch events, and the synthetic benchmark scenarios.

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec2;

/// Patch side length in cells.
pub const DEFAULT_CELLS: usize = 64;
/// Meters per cell.
pub const DEFAULT_RESOLUTION: f64 = 0.25;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("degenerate scenario geometry: {0}")]
    Geometry(String),
    #[error("regime {0:?} is not handled by this constructor")]
    WrongRegime(Regime),
    #[error("scenario failed post-construction check: {0}")]
    Certification(String),
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Field {
    SoftRisk,
    Sdf,
}

/// Bilinear sample of a grid field: value, exact gradient of the bilinear
/// surface, and its mixed second derivative (the only nonzero Hessian entry
/// inside a cell).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub value: f64,
    pub gradient: Vec2,
    pub mixed: f64,
}

impl FieldSample {
    /// Hessian of the bilinear surface within the current cell.
    pub fn hessian(&self) -> nalgebra::Matrix2<f64> {
        nalgebra::Matrix2::new(0.0, self.mixed, self.mixed, 0.0)
    }
}

/// A discretized local world. Grid values live on nodes; node `(i, j)` sits at
/// `origin + (i, j) * resolution`. Grids are row-major with `x` fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskPatch {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: Vec2,
    pub soft_risk: Vec<f64>,
    pub sdf: Vec<f64>,
    pub traversable: Vec<bool>,
    /// Hard-hazard mask the SDF is derived from.
    pub hazard: Vec<bool>,
}

impl RiskPatch {
    /// Uniform patch with no hazards and everything traversable.
    pub fn uniform(width: usize, height: usize, resolution: f64, risk: f64) -> Self {
        assert!(width >= 2 && height >= 2, "patch needs at least 2x2 nodes");
        let n = width * height;
        let mut patch = RiskPatch {
            width,
            height,
            resolution,
            origin: Vec2::zeros(),
            soft_risk: vec![risk.clamp(0.0, 1.0); n],
            sdf: vec![0.0; n],
            traversable: vec![true; n],
            hazard: vec![false; n],
        };
        patch.recompute_sdf();
        patch
    }

    /// Builds a patch by evaluating analytic fields at every node. The SDF is
    /// taken verbatim from `sdf`, not recomputed from the hazard mask.
    pub fn from_fn(
        width: usize,
        height: usize,
        resolution: f64,
        risk: impl Fn(Vec2) -> f64,
        sdf: impl Fn(Vec2) -> f64,
    ) -> Self {
        let mut patch = RiskPatch::uniform(width, height, resolution, 0.0);
        for j in 0..height {
            for i in 0..width {
                let pos = patch.node_position(i, j);
                let idx = patch.index(i, j);
                patch.soft_risk[idx] = risk(pos).clamp(0.0, 1.0);
                let phi = sdf(pos);
                patch.sdf[idx] = phi;
                patch.hazard[idx] = phi <= 0.0;
            }
        }
        patch
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    #[inline]
    pub fn node_position(&self, i: usize, j: usize) -> Vec2 {
        self.origin + Vec2::new(i as f64, j as f64) * self.resolution
    }

    /// Extent of the bilinear domain along each axis, in meters.
    pub fn extent(&self) -> Vec2 {
        Vec2::new(
            (self.width - 1) as f64 * self.resolution,
            (self.height - 1) as f64 * self.resolution,
        )
    }

    pub fn center(&self) -> Vec2 {
        self.origin + self.extent() * 0.5
    }

    /// Inside the bilinear domain.
    pub fn in_bounds(&self, pos: Vec2) -> bool {
        let rel = pos - self.origin;
        let ext = self.extent();
        rel.x >= 0.0 && rel.y >= 0.0 && rel.x <= ext.x && rel.y <= ext.y
    }

    /// Inside the patch with one cell of margin; positions outside this region
    /// count as having left the sensed patch.
    pub fn is_interior(&self, pos: Vec2) -> bool {
        let rel = pos - self.origin;
        let ext = self.extent();
        let m = self.resolution;
        rel.x >= m && rel.y >= m && rel.x <= ext.x - m && rel.y <= ext.y - m
    }

    /// Nearest node to `pos`, clamped to the grid.
    pub fn nearest_node(&self, pos: Vec2) -> (usize, usize) {
        let rel = (pos - self.origin) / self.resolution;
        let i = rel.x.round().clamp(0.0, (self.width - 1) as f64) as usize;
        let j = rel.y.round().clamp(0.0, (self.height - 1) as f64) as usize;
        (i, j)
    }

    pub fn traversable_at(&self, pos: Vec2) -> bool {
        let (i, j) = self.nearest_node(pos);
        self.traversable[self.index(i, j)]
    }

    pub fn grid(&self, field: Field) -> &[f64] {
        match field {
            Field::SoftRisk => &self.soft_risk,
            Field::Sdf => &self.sdf,
        }
    }

    /// Bilinear interpolation with the exact gradient of the interpolant.
    /// Positions outside the domain are clamped to the boundary; callers detect
    /// that case with [`RiskPatch::is_interior`].
    pub fn sample(&self, field: Field, pos: Vec2) -> FieldSample {
        let grid = self.grid(field);
        let h = self.resolution;
        let rel = (pos - self.origin) / h;
        let u = rel.x.clamp(0.0, (self.width - 1) as f64);
        let v = rel.y.clamp(0.0, (self.height - 1) as f64);
        let i0 = (u.floor() as usize).min(self.width - 2);
        let j0 = (v.floor() as usize).min(self.height - 2);
        let fx = u - i0 as f64;
        let fy = v - j0 as f64;
        let f00 = grid[self.index(i0, j0)];
        let f10 = grid[self.index(i0 + 1, j0)];
        let f01 = grid[self.index(i0, j0 + 1)];
        let f11 = grid[self.index(i0 + 1, j0 + 1)];
        let value = f00 * (1.0 - fx) * (1.0 - fy)
            + f10 * fx * (1.0 - fy)
            + f01 * (1.0 - fx) * fy
            + f11 * fx * fy;
        let dx = ((f10 - f00) * (1.0 - fy) + (f11 - f01) * fy) / h;
        let dy = ((f01 - f00) * (1.0 - fx) + (f11 - f10) * fx) / h;
        let mixed = (f00 - f10 - f01 + f11) / (h * h);
        FieldSample {
            value,
            gradient: Vec2::new(dx, dy),
            mixed,
        }
    }

    /// Recomputes the SDF from the hazard mask by an exact Euclidean distance
    /// transform. Interfaces sit half a cell between hazard and free nodes.
    pub fn recompute_sdf(&mut self) {
        let cap = self.extent().norm() + self.resolution;
        let free: Vec<bool> = self.hazard.iter().map(|h| !h).collect();
        let to_hazard = edt_squared(&self.hazard, self.width, self.height);
        let to_free = edt_squared(&free, self.width, self.height);
        let half = 0.5 * self.resolution;
        for k in 0..self.sdf.len() {
            self.sdf[k] = if self.hazard[k] {
                let d = to_free[k];
                if d.is_finite() {
                    -(d.sqrt() * self.resolution - half)
                } else {
                    -cap
                }
            } else {
                let d = to_hazard[k];
                if d.is_finite() {
                    d.sqrt() * self.resolution - half
                } else {
                    cap
                }
            };
        }
    }

    /// Row-major CSV of one field, one grid row (constant y) per line.
    pub fn write_csv<W: Write>(&self, field: Field, out: W) -> Result<(), WorldError> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        let grid = self.grid(field);
        for j in 0..self.height {
            let row = &grid[j * self.width..(j + 1) * self.width];
            writer.write_record(row.iter().map(|v| format!("{v}")))?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn write_traversable_csv<W: Write>(&self, out: W) -> Result<(), WorldError> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for j in 0..self.height {
            let row = &self.traversable[j * self.width..(j + 1) * self.width];
            writer.write_record(row.iter().map(|&t| if t { "1" } else { "0" }))?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Nodes reachable from `start` through traversable nodes with positive SDF
    /// (4-connected).
    pub fn reachable_from(&self, start: Vec2) -> Vec<bool> {
        let mut seen = vec![false; self.width * self.height];
        let (si, sj) = self.nearest_node(start);
        let open = |k: usize| self.traversable[k] && self.sdf[k] > 0.0;
        let s = self.index(si, sj);
        if !open(s) {
            return seen;
        }
        seen[s] = true;
        let mut queue = VecDeque::from([(si, sj)]);
        while let Some((i, j)) = queue.pop_front() {
            let mut push = |ni: usize, nj: usize| {
                let k = self.index(ni, nj);
                if !seen[k] && open(k) {
                    seen[k] = true;
                    queue.push_back((ni, nj));
                }
            };
            if i > 0 {
                push(i - 1, j);
            }
            if i + 1 < self.width {
                push(i + 1, j);
            }
            if j > 0 {
                push(i, j - 1);
            }
            if j + 1 < self.height {
                push(i, j + 1);
            }
        }
        seen
    }
}

/// Squared Euclidean distance (in cells) from every node to the nearest `true`
/// node; `INFINITY` when the mask is empty. Separable lower-envelope transform.
pub fn edt_squared(mask: &[bool], width: usize, height: usize) -> Vec<f64> {
    let inf = f64::INFINITY;
    let mut grid: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { inf }).collect();
    let mut column = vec![0.0; height];
    for i in 0..width {
        for j in 0..height {
            column[j] = grid[j * width + i];
        }
        let out = edt_1d(&column);
        for j in 0..height {
            grid[j * width + i] = out[j];
        }
    }
    for j in 0..height {
        let row = grid[j * width..(j + 1) * width].to_vec();
        let out = edt_1d(&row);
        grid[j * width..(j + 1) * width].copy_from_slice(&out);
    }
    grid
}

fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![f64::INFINITY; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k: usize = 0;
    let mut started = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if !started {
        return out;
    }
    let mut k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *slot = d * d + f[p];
    }
    out
}

/// 3x3 box blur with replicated borders.
pub fn box_blur(grid: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for j in 0..height {
        for i in 0..width {
            let mut sum = 0.0;
            for dj in [-1i64, 0, 1] {
                for di in [-1i64, 0, 1] {
                    let ii = (i as i64 + di).clamp(0, width as i64 - 1) as usize;
                    let jj = (j as i64 + dj).clamp(0, height as i64 - 1) as usize;
                    sum += grid[jj * width + ii];
                }
            }
            out[j * width + i] = sum / 9.0;
        }
    }
    out
}

/// Rectangular node region, half-open: `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Overwrite of patch channels inside a set of nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMutation {
    /// Node indices affected (row-major).
    pub nodes: Vec<usize>,
    #[serde(default)]
    pub soft_risk: Option<f64>,
    #[serde(default)]
    pub hazard: Option<bool>,
    #[serde(default)]
    pub traversable: Option<bool>,
}

impl PatchMutation {
    pub fn rect(patch: &RiskPatch, rect: NodeRect) -> Self {
        let mut nodes = Vec::new();
        for j in rect.y0..rect.y1.min(patch.height) {
            for i in rect.x0..rect.x1.min(patch.width) {
                nodes.push(patch.index(i, j));
            }
        }
        PatchMutation {
            nodes,
            soft_risk: None,
            hazard: None,
            traversable: None,
        }
    }

    fn apply(&self, patch: &mut RiskPatch) -> bool {
        let mut hazard_changed = false;
        for &k in &self.nodes {
            if let Some(r) = self.soft_risk {
                patch.soft_risk[k] = r.clamp(0.0, 1.0);
            }
            if let Some(h) = self.hazard {
                hazard_changed |= patch.hazard[k] != h;
                patch.hazard[k] = h;
            }
            if let Some(t) = self.traversable {
                patch.traversable[k] = t;
            }
        }
        hazard_changed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEvent {
    pub t_event: usize,
    pub mutation: PatchMutation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventSchedule {
    /// Sorted by `t_event`.
    pub events: Vec<PatchEvent>,
    pub t_escape: Option<usize>,
}

impl EventSchedule {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Number of events due at step `t`.
    pub fn due_count(&self, t: usize) -> usize {
        self.events.partition_point(|e| e.t_event <= t)
    }
}

/// Applies every event with `t_event <= t` to `patch` and returns the result.
/// The SDF is recomputed over the whole patch when the hazard mask changes.
pub fn apply_events(patch: &RiskPatch, schedule: &EventSchedule, t: usize) -> RiskPatch {
    let mut out = patch.clone();
    let mut hazard_changed = false;
    for event in &schedule.events[..schedule.due_count(t)] {
        hazard_changed |= event.mutation.apply(&mut out);
    }
    if hazard_changed {
        out.recompute_sdf();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    /// A feasible lower-risk alternative exists.
    R1,
    /// The lower-risk-looking direction is blocked.
    R2,
    /// Risk-neutral: spatially constant soft risk.
    R3,
    /// Blocked lateral escape that opens at `t_escape`.
    DelayedEscape,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::R1 => "R1",
            Regime::R2 => "R2",
            Regime::R3 => "R3",
            Regime::DelayedEscape => "DelayedEscape",
        }
    }
}

/// Layout constants shared by the scenario generators. Lengths in meters;
/// `along` runs from the frame origin toward the goal and `lateral` points at
/// the lower-risk side.
///
/// Delayed-escape and R2 scenes share one cross-section: a traversable lane of
/// half width `corridor_half_width`, non-traversable rubble out to
/// `seal_offset`, a hazard wall of `wall_thickness`, then the low-risk pocket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Layout {
    pub cells: usize,
    pub resolution: f64,
    pub corridor_half_width: f64,
    pub seal_offset: f64,
    pub wall_thickness: f64,
    /// Along-track extent of the hazard walls in delayed-escape scenes.
    pub seal_along: [f64; 2],
    /// Along-track start of the rubble lining the lane. Before it the sealed
    /// region is open laterally, which gives the robot an early sideways
    /// route when the start lies there.
    pub corridor_start: f64,
    /// Along-track position of the post row blocking the lane.
    pub row_along: f64,
    pub post_spacing: f64,
    /// Lateral half extent of the post row.
    pub post_extent: f64,
    pub goal_along: f64,
    pub risk_mid: f64,
    pub risk_slope: f64,
    pub risk_floor: f64,
    pub risk_ceiling: f64,
    pub start_jitter: f64,
    /// Along-track start offset range for delayed escape.
    pub start_along_range: [f64; 2],
    /// Probability that the rubble is a hazard rather than only impassable.
    pub rubble_hazard_prob: f64,
    pub t_escape_range: [usize; 2],
    /// Start-to-goal distance for static regimes.
    pub leg_length: f64,
    /// Lateral distance range of the high-risk-side hazard in R1 scenes.
    pub r1_hazard_offset: [f64; 2],
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            cells: DEFAULT_CELLS,
            resolution: DEFAULT_RESOLUTION,
            corridor_half_width: 0.45,
            seal_offset: 1.1,
            wall_thickness: 0.5,
            seal_along: [-2.0, 10.5],
            corridor_start: -2.0,
            row_along: 8.5,
            post_spacing: 0.25,
            post_extent: 1.0,
            goal_along: 11.5,
            risk_mid: 0.6,
            risk_slope: 0.3,
            risk_floor: 0.02,
            risk_ceiling: 0.95,
            start_jitter: 0.2,
            start_along_range: [0.0, 0.0],
            rubble_hazard_prob: 1.0,
            t_escape_range: [30, 60],
            leg_length: 5.0,
            r1_hazard_offset: [2.5, 3.5],
        }
    }
}

/// Fully explicit description of one scenario; the constructors are pure
/// functions of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub regime: Regime,
    pub seed: u64,
    pub start: Vec2,
    pub goal: Vec2,
    /// Origin of the scenario frame.
    pub frame_origin: Vec2,
    /// Unit vector from the frame origin toward the goal.
    pub forward: Vec2,
    /// +1 when the lower-risk side is counter-clockwise from `forward`.
    pub side: f64,
    pub layout: Layout,
    /// Known safer direction, for metrics only.
    pub d_safe: Option<Vec2>,
    pub t_escape: Option<usize>,
    /// Delayed escape only: whether the rubble beside the lane is a hazard
    /// or merely impassable for route planning.
    #[serde(default)]
    pub hazardous_rubble: bool,
}

impl ScenarioSpec {
    /// Samples a scenario of the given regime from `seed`.
    pub fn sample(regime: Regime, seed: u64, layout: &Layout) -> ScenarioSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f5c_e7a1);
        let layout = layout.clone();
        // node-aligned patch midpoint
        let patch_mid = (layout.cells / 2) as f64 * layout.resolution;
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        match regime {
            Regime::DelayedEscape => {
                let frame_origin = Vec2::new(2.0, patch_mid);
                let forward = Vec2::new(1.0, 0.0);
                let lateral = lateral_axis(forward, side);
                let jitter = rng.gen_range(-layout.start_jitter..=layout.start_jitter);
                let [a0, a1] = layout.start_along_range;
                let along = if a1 > a0 { rng.gen_range(a0..=a1) } else { a0 };
                let start = frame_origin + lateral * jitter + forward * along;
                let goal = frame_origin + forward * layout.goal_along;
                let [lo, hi] = layout.t_escape_range;
                let t_escape = rng.gen_range(lo..=hi.max(lo));
                let hazardous_rubble = rng.gen_bool(layout.rubble_hazard_prob.clamp(0.0, 1.0));
                ScenarioSpec {
                    regime,
                    seed,
                    start,
                    goal,
                    frame_origin,
                    forward,
                    side,
                    d_safe: Some(lateral),
                    t_escape: Some(t_escape),
                    hazardous_rubble,
                    layout,
                }
            }
            Regime::R2 => {
                let forward = if rng.gen_bool(0.5) {
                    Vec2::new(1.0, 0.0)
                } else {
                    Vec2::new(-1.0, 0.0)
                };
                let along_offset = rng.gen_range(-1.0..=1.0);
                let lateral_offset = (rng.gen_range(-4..=4) as f64) * layout.resolution;
                let frame_origin = Vec2::new(patch_mid, patch_mid + lateral_offset)
                    - forward * (0.5 * layout.leg_length + along_offset);
                let lateral = lateral_axis(forward, side);
                let jitter = rng.gen_range(-0.1..=0.1);
                let start = frame_origin + lateral * jitter;
                let goal = frame_origin + forward * layout.leg_length;
                let mut layout = layout;
                layout.risk_slope = rng.gen_range(0.2..=0.35);
                layout.risk_mid = rng.gen_range(0.55..=0.7);
                ScenarioSpec {
                    regime,
                    seed,
                    start,
                    goal,
                    frame_origin,
                    forward,
                    side,
                    d_safe: None,
                    t_escape: None,
                    hazardous_rubble: false,
                    layout,
                }
            }
            Regime::R1 | Regime::R3 => {
                let heading = rng.gen_range(0.0..std::f64::consts::TAU);
                let forward = Vec2::new(heading.cos(), heading.sin());
                let center = Vec2::new(
                    patch_mid + rng.gen_range(-1.0..=1.0),
                    patch_mid + rng.gen_range(-1.0..=1.0),
                );
                let start = center - forward * (0.5 * layout.leg_length);
                let goal = start + forward * layout.leg_length;
                let mut layout = layout;
                let d_safe = if regime == Regime::R1 {
                    layout.risk_slope = rng.gen_range(0.12..=0.2);
                    layout.risk_mid = rng.gen_range(0.5..=0.65);
                    let [a, b] = layout.r1_hazard_offset;
                    layout.seal_offset = rng.gen_range(a..=b);
                    Some(lateral_axis(forward, side))
                } else {
                    layout.risk_mid = rng.gen_range(0.2..=0.6);
                    layout.risk_slope = 0.0;
                    None
                };
                ScenarioSpec {
                    regime,
                    seed,
                    start,
                    goal,
                    frame_origin: start,
                    forward,
                    side,
                    d_safe,
                    t_escape: None,
                    hazardous_rubble: false,
                    layout,
                }
            }
        }
    }

    pub fn lateral(&self) -> Vec2 {
        lateral_axis(self.forward, self.side)
    }

    /// `(along, lateral)` coordinates of `pos` in the scenario frame.
    pub fn frame_coords(&self, pos: Vec2) -> (f64, f64) {
        let rel = pos - self.frame_origin;
        (rel.dot(&self.forward), rel.dot(&self.lateral()))
    }

    fn frame_point(&self, along: f64, lateral: f64) -> Vec2 {
        self.frame_origin + self.forward * along + self.lateral() * lateral
    }

    fn raw_risk(&self, lateral: f64) -> f64 {
        let l = &self.layout;
        (l.risk_mid - l.risk_slope * lateral).clamp(l.risk_floor, l.risk_ceiling)
    }

    /// Lateral coordinate beyond which the pocket begins.
    pub fn pocket_lateral(&self) -> f64 {
        self.layout.seal_offset + self.layout.wall_thickness
    }

    /// Point obstacles (post row) seen by the geometric barrier.
    pub fn obstacles(&self) -> Vec<Vec2> {
        match self.regime {
            Regime::DelayedEscape => {
                let l = &self.layout;
                let k = (l.post_extent / l.post_spacing).floor() as i64;
                (-k..=k)
                    .map(|i| self.frame_point(l.row_along, i as f64 * l.post_spacing))
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let l = &self.layout;
        if l.cells < 8 || l.resolution <= 0.0 {
            return Err(WorldError::Geometry("patch too small".into()));
        }
        let ext = (l.cells - 1) as f64 * l.resolution;
        for (name, p) in [("start", self.start), ("goal", self.goal)] {
            if p.x < l.resolution || p.y < l.resolution || p.x > ext - l.resolution || p.y > ext - l.resolution {
                return Err(WorldError::Geometry(format!("{name} outside the patch interior")));
            }
        }
        if (self.forward.norm() - 1.0).abs() > 1e-9 {
            return Err(WorldError::Geometry("forward axis is not a unit vector".into()));
        }
        if matches!(self.regime, Regime::DelayedEscape | Regime::R2) {
            if l.corridor_half_width <= 0.0 {
                return Err(WorldError::Geometry("lane width must be positive".into()));
            }
            // a seal thinner than a cell can vanish from the grid and merge
            // pocket and lane
            if l.wall_thickness < l.resolution || l.seal_offset <= l.corridor_half_width {
                return Err(WorldError::Geometry("pocket overlaps the lane".into()));
            }
        }
        if self.regime == Regime::DelayedEscape {
            if l.start_jitter >= l.corridor_half_width {
                return Err(WorldError::Geometry("start jitter leaves the lane".into()));
            }
            let [a0, a1] = l.start_along_range;
            if a0 > a1 || a0 < l.seal_along[0] || a1 >= l.row_along {
                return Err(WorldError::Geometry("start must lie between the seal start and the post row".into()));
            }
            if l.seal_along[0] >= l.seal_along[1] || l.row_along >= l.goal_along {
                return Err(WorldError::Geometry("inconsistent along-track layout".into()));
            }
        }
        Ok(())
    }

    fn empty_patch(&self) -> RiskPatch {
        RiskPatch::uniform(self.layout.cells, self.layout.cells, self.layout.resolution, 0.0)
    }

    /// Nodes opened by the escape event: the pocket-side rubble and seal.
    fn escape_nodes(&self, patch: &RiskPatch) -> Vec<usize> {
        let l = &self.layout;
        let mut nodes = Vec::new();
        for j in 0..patch.height {
            for i in 0..patch.width {
                let (a, lat) = self.frame_coords(patch.node_position(i, j));
                if a >= l.seal_along[0] && a <= l.seal_along[1] && lat > l.corridor_half_width && lat <= self.pocket_lateral() {
                    nodes.push(patch.index(i, j));
                }
            }
        }
        nodes
    }
}

fn lateral_axis(forward: Vec2, side: f64) -> Vec2 {
    Vec2::new(-forward.y, forward.x) * side
}

fn finish_patch(mut patch: RiskPatch, raw_risk: Vec<f64>) -> RiskPatch {
    let blurred = box_blur(&box_blur(&raw_risk, patch.width, patch.height), patch.width, patch.height);
    patch.soft_risk = blurred.into_iter().map(|r| r.clamp(0.0, 1.0)).collect();
    for k in 0..patch.hazard.len() {
        if patch.hazard[k] {
            patch.traversable[k] = false;
        }
    }
    patch.recompute_sdf();
    patch
}

/// Builds the static R1/R2/R3 patch described by `spec`.
pub fn make_regime_patch(spec: &ScenarioSpec) -> Result<RiskPatch, WorldError> {
    if spec.regime == Regime::DelayedEscape {
        return Err(WorldError::WrongRegime(spec.regime));
    }
    spec.validate()?;
    let mut patch = spec.empty_patch();
    let l = &spec.layout;
    let n = patch.width * patch.height;
    let mut raw = vec![0.0; n];
    for j in 0..patch.height {
        for i in 0..patch.width {
            let k = patch.index(i, j);
            let (_, lat) = spec.frame_coords(patch.node_position(i, j));
            match spec.regime {
                Regime::R3 => {
                    raw[k] = l.risk_mid.clamp(0.0, 1.0);
                }
                Regime::R1 => {
                    raw[k] = spec.raw_risk(lat);
                    let off = l.seal_offset;
                    patch.hazard[k] = lat <= -off && lat >= -off - l.wall_thickness;
                }
                Regime::R2 => {
                    raw[k] = spec.raw_risk(lat);
                    patch.hazard[k] = lat >= l.seal_offset && lat <= spec.pocket_lateral();
                    patch.traversable[k] = lat.abs() <= l.corridor_half_width || lat > spec.pocket_lateral();
                }
                Regime::DelayedEscape => unreachable!(),
            }
        }
    }
    let patch = finish_patch(patch, raw);
    certify_static(spec, &patch)?;
    Ok(patch)
}

/// Builds the delayed-required-escape patch and the event that opens the
/// pocket at `t_escape`.
pub fn make_delayed_escape(spec: &ScenarioSpec) -> Result<(RiskPatch, EventSchedule), WorldError> {
    if spec.regime != Regime::DelayedEscape {
        return Err(WorldError::WrongRegime(spec.regime));
    }
    spec.validate()?;
    let t_escape = spec
        .t_escape
        .ok_or_else(|| WorldError::Geometry("delayed escape needs t_escape".into()))?;
    let l = &spec.layout;
    let mut patch = spec.empty_patch();
    let mut raw = vec![0.0; patch.width * patch.height];
    for j in 0..patch.height {
        for i in 0..patch.width {
            let k = patch.index(i, j);
            let (a, lat) = spec.frame_coords(patch.node_position(i, j));
            raw[k] = spec.raw_risk(lat);
            let walled = a >= l.seal_along[0] && a <= l.seal_along[1];
            let wall = walled && lat.abs() >= l.seal_offset && lat.abs() <= spec.pocket_lateral();
            let rubble = walled && a >= l.corridor_start && lat.abs() > l.corridor_half_width && lat.abs() < l.seal_offset;
            patch.hazard[k] = wall || (rubble && spec.hazardous_rubble);
            patch.traversable[k] = !rubble;
        }
    }
    let patch = finish_patch(patch, raw);
    let opening = PatchMutation {
        nodes: spec.escape_nodes(&patch),
        soft_risk: None,
        hazard: Some(false),
        traversable: Some(true),
    };
    let schedule = EventSchedule {
        events: vec![PatchEvent {
            t_event: t_escape,
            mutation: opening,
        }],
        t_escape: Some(t_escape),
    };
    certify_delayed(spec, &patch, &schedule)?;
    Ok((patch, schedule))
}

fn certify_static(spec: &ScenarioSpec, patch: &RiskPatch) -> Result<(), WorldError> {
    match spec.regime {
        Regime::R3 => {
            let first = patch.soft_risk[0];
            if patch.soft_risk.iter().any(|&r| r != first) {
                return Err(WorldError::Certification("R3 soft risk is not constant".into()));
            }
        }
        Regime::R1 => {
            if !crate::gate::has_improving_primitive(patch, spec.start, spec.goal, &crate::gate::GateParams::default()) {
                return Err(WorldError::Certification(
                    "R1 patch has no feasible primitive improving risk by the margin".into(),
                ));
            }
        }
        Regime::R2 => {
            let reach = patch.reachable_from(spec.start);
            let min = patch.soft_risk.iter().cloned().fold(f64::INFINITY, f64::min);
            let exposed = patch
                .soft_risk
                .iter()
                .enumerate()
                .any(|(k, &r)| r == min && reach[k] && patch.traversable[k]);
            if exposed {
                return Err(WorldError::Certification("R2 soft-risk minimum is reachable".into()));
            }
        }
        Regime::DelayedEscape => {}
    }
    Ok(())
}

fn certify_delayed(spec: &ScenarioSpec, patch: &RiskPatch, schedule: &EventSchedule) -> Result<(), WorldError> {
    let params = crate::gate::GateParams::default();
    let pocket = |pos: Vec2| spec.frame_coords(pos).1 > spec.pocket_lateral();
    let t_escape = schedule.t_escape.unwrap_or(0);
    if t_escape > 0 {
        let before = apply_events(patch, schedule, t_escape - 1);
        let blocked = crate::gate::primitives_reaching(&before, spec.start, spec.goal, &params, pocket)
            .iter()
            .all(|s| s.clearance <= 0.0);
        if !blocked {
            return Err(WorldError::Certification("pocket reachable before t_escape".into()));
        }
    }
    let after = apply_events(patch, schedule, t_escape);
    let opened = crate::gate::primitives_reaching(&after, spec.start, spec.goal, &params, pocket)
        .iter()
        .any(|s| s.clearance > params.delta_phi);
    if !opened {
        return Err(WorldError::Certification("pocket still sealed after t_escape".into()));
    }
    Ok(())
}

/// Scenario ready for rollout: spec, patch at t = 0, events, obstacle anchors.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub patch: RiskPatch,
    pub schedule: EventSchedule,
    pub obstacles: Vec<Vec2>,
}

impl Scenario {
    pub fn build(spec: ScenarioSpec) -> Result<Scenario, WorldError> {
        let (patch, schedule) = match spec.regime {
            Regime::DelayedEscape => make_delayed_escape(&spec)?,
            _ => (make_regime_patch(&spec)?, EventSchedule::empty()),
        };
        let obstacles = spec.obstacles();
        Ok(Scenario {
            spec,
            patch,
            schedule,
            obstacles,
        })
    }

    pub fn sample(regime: Regime, seed: u64, layout: &Layout) -> Result<Scenario, WorldError> {
        Scenario::build(ScenarioSpec::sample(regime, seed, layout))
    }

    /// Same scenario with a different start position.
    pub fn with_start(mut self, start: Vec2) -> Self {
        self.spec.start = start;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_by_two(values: [f64; 4]) -> RiskPatch {
        let mut p = RiskPatch::uniform(2, 2, 0.5, 0.0);
        p.soft_risk = values.to_vec();
        p
    }

    #[test]
    fn bilinear_linear_surface() {
        // left column 0, right column 1
        let p = two_by_two([0.0, 1.0, 0.0, 1.0]);
        let s = p.sample(Field::SoftRisk, Vec2::new(0.25, 0.25));
        assert_relative_eq!(s.value, 0.5);
        assert_relative_eq!(s.gradient.x, 1.0 / 0.5);
        assert_relative_eq!(s.gradient.y, 0.0);
    }

    #[test]
    fn bilinear_node_identity_and_constant() {
        let p = two_by_two([0.1, 0.7, 0.3, 0.9]);
        assert_eq!(p.sample(Field::SoftRisk, Vec2::new(0.0, 0.5)).value, 0.3);
        assert_eq!(p.sample(Field::SoftRisk, Vec2::new(0.5, 0.5)).value, 0.9);
        let c = RiskPatch::uniform(5, 5, 0.25, 0.42);
        let s = c.sample(Field::SoftRisk, Vec2::new(0.33, 0.71));
        assert_relative_eq!(s.value, 0.42, epsilon = 1e-15);
        assert_eq!(s.gradient, Vec2::zeros());
    }

    #[test]
    fn edt_matches_brute_force() {
        let (w, h) = (13, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mask: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.08)).collect();
            let fast = edt_squared(&mask, w, h);
            for j in 0..h {
                for i in 0..w {
                    let mut best = f64::INFINITY;
                    for jj in 0..h {
                        for ii in 0..w {
                            if mask[jj * w + ii] {
                                let d = (i as f64 - ii as f64).powi(2) + (j as f64 - jj as f64).powi(2);
                                best = best.min(d);
                            }
                        }
                    }
                    assert_eq!(fast[j * w + i], best, "node ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn sdf_signs_and_lipschitz() {
        let mut p = RiskPatch::uniform(16, 16, 0.25, 0.0);
        for j in 5..9 {
            for i in 4..7 {
                let k = p.index(i, j);
                p.hazard[k] = true;
            }
        }
        p.recompute_sdf();
        for j in 0..16 {
            for i in 0..16 {
                let k = p.index(i, j);
                assert_eq!(p.sdf[k] <= 0.0, p.hazard[k]);
                if i + 1 < 16 {
                    let d = (p.sdf[k] - p.sdf[p.index(i + 1, j)]).abs();
                    assert!(d <= 2.0 * p.resolution + 1e-12);
                }
            }
        }
    }

    #[test]
    fn events_apply_once_and_idempotently() {
        let spec = ScenarioSpec::sample(Regime::DelayedEscape, 7, &Layout::default());
        let (patch, schedule) = make_delayed_escape(&spec).unwrap();
        let t = schedule.t_escape.unwrap();
        assert_eq!(apply_events(&patch, &schedule, t - 1), patch);
        let once = apply_events(&patch, &schedule, t);
        let twice = apply_events(&once, &schedule, t);
        assert_eq!(once, twice);
        for &k in &schedule.events[0].mutation.nodes {
            assert!(once.traversable[k]);
            assert!(once.sdf[k] > crate::gate::GateParams::default().delta_phi);
        }
    }

    #[test]
    fn delayed_escape_is_deterministic() {
        let spec = ScenarioSpec::sample(Regime::DelayedEscape, 11, &Layout::default());
        let a = make_delayed_escape(&spec).unwrap();
        let b = make_delayed_escape(&ScenarioSpec::sample(Regime::DelayedEscape, 11, &Layout::default())).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_escape_time_opens_immediately() {
        let mut spec = ScenarioSpec::sample(Regime::DelayedEscape, 5, &Layout::default());
        spec.t_escape = Some(0);
        let (patch, schedule) = make_delayed_escape(&spec).unwrap();
        let opened = apply_events(&patch, &schedule, 0);
        let params = crate::gate::GateParams::default();
        assert!(crate::gate::has_improving_primitive(&opened, spec.start, spec.goal, &params));
    }

    #[test]
    fn degenerate_geometry_rejected() {
        let mut spec = ScenarioSpec::sample(Regime::DelayedEscape, 1, &Layout::default());
        spec.layout.wall_thickness = 0.1;
        spec.layout.seal_offset = 0.3;
        assert!(matches!(make_delayed_escape(&spec), Err(WorldError::Geometry(_))));
        let r1 = ScenarioSpec::sample(Regime::R1, 1, &Layout::default());
        assert!(matches!(make_delayed_escape(&r1), Err(WorldError::WrongRegime(_))));
    }

    #[test]
    fn r3_has_zero_risk_gradient() {
        let spec = ScenarioSpec::sample(Regime::R3, 2, &Layout::default());
        let patch = make_regime_patch(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let pos = Vec2::new(rng.gen_range(0.5..15.0), rng.gen_range(0.5..15.0));
            assert_eq!(patch.sample(Field::SoftRisk, pos).gradient, Vec2::zeros());
        }
    }

    #[test]
    fn csv_export_is_row_major() {
        let mut p = RiskPatch::uniform(3, 2, 1.0, 0.0);
        p.soft_risk = vec![0.0, 0.1, 0.2, 1.0, 1.1, 1.2];
        let mut buf = Vec::new();
        p.write_csv(Field::SoftRisk, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0,0.1,0.2\n1,1.1,1.2\n");
    }
}
