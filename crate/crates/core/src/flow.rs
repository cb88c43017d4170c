//! Ground-truth material model: nozzle deposition along the path, then
//! heatsink compression as a capped-height redistribution that conserves
//! volume exactly (up to what flows off the grid).

use thiserror::Error;

use crate::config::Config;
use crate::geometry::{DispensePath, GeometryError, GridSpec, Polyline, TargetArea};
use crate::raster::Mask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("compression did not converge after {iterations} iterations (max excess {max_excess:.3e} mm)")]
    NoConvergence { iterations: usize, max_excess: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Oracle parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    /// Tent-kernel radius of the nozzle splat, in cells.
    pub nozzle_radius_cells: f64,
    /// Redistribution stops once every cell's excess is below this (mm).
    pub tol: f64,
    pub max_iters: usize,
    /// Fraction of the gap height a cell needs to count as covered.
    pub occupancy_threshold: f64,
    pub min_path_length_mm: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self::from(&Config::default())
    }
}

impl From<&Config> for FlowConfig {
    fn from(c: &Config) -> Self {
        Self {
            nozzle_radius_cells: c.nozzle_radius_cells,
            tol: c.compress_tol_mm,
            max_iters: c.compress_max_iters,
            occupancy_threshold: c.occupancy_threshold,
            min_path_length_mm: c.min_path_length_mm,
        }
    }
}

/// Material heights (mm) right after dispensing.
#[derive(Debug, Clone, PartialEq)]
pub struct DepositField {
    grid: GridSpec,
    heights: Vec<f64>,
    total_volume: f64,
}

impl DepositField {
    /// Wraps explicit heights; negative or non-finite heights are rejected.
    pub fn from_heights(grid: GridSpec, heights: Vec<f64>) -> Option<Self> {
        if heights.len() != grid.cells() || heights.iter().any(|h| !(h.is_finite() && *h >= 0.0)) {
            return None;
        }
        let total_volume = heights.iter().sum::<f64>() * grid.cell_area();
        Some(Self {
            grid,
            heights,
            total_volume,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn total_volume(&self) -> f64 {
        self.total_volume
    }
}

/// Conservation diagnostics of one [`compress`] run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionStats {
    pub iterations: usize,
    pub input_volume: f64,
    /// Volume on the grid after redistribution, before binarization.
    pub pre_binarization_volume: f64,
    /// Volume that left the grid across its border.
    pub lost_volume: f64,
    /// `pre_binarization_volume` minus the volume of the binarized state.
    pub binarization_residual: f64,
}

/// Compressed material: every cell is empty or filled to the gap height.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedState {
    heights: Vec<f64>,
    footprint: Mask,
    stats: CompressionStats,
}

impl CompressedState {
    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn footprint(&self) -> &Mask {
        &self.footprint
    }

    pub fn stats(&self) -> &CompressionStats {
        &self.stats
    }

    /// Heights as a CSV grid, one row per line.
    pub fn heights_csv(&self) -> String {
        let w = self.footprint.width();
        self.heights
            .chunks(w)
            .map(|row| row.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",") + "\n")
            .collect()
    }
}

/// Splats `volume` at `(px, py)` (cell units) with a separable tent kernel,
/// renormalized over in-grid cells so nothing is lost at the border.
fn splat(
    heights: &mut [f64],
    grid: &GridSpec,
    px: f64,
    py: f64,
    radius: f64,
    volume: f64,
    scratch: &mut Vec<(usize, f64)>,
) {
    let (w, h) = (grid.width_cells() as isize, grid.height_cells() as isize);
    scratch.clear();
    let mut total = 0.0;
    let x_lo = (px - radius - 0.5).floor() as isize;
    let x_hi = (px + radius - 0.5).ceil() as isize;
    let y_lo = (py - radius - 0.5).floor() as isize;
    let y_hi = (py + radius - 0.5).ceil() as isize;
    for cy in y_lo.max(0)..=y_hi.min(h - 1) {
        let wy = 1.0 - ((cy as f64 + 0.5) - py).abs() / radius;
        if wy <= 0.0 {
            continue;
        }
        for cx in x_lo.max(0)..=x_hi.min(w - 1) {
            let wx = 1.0 - ((cx as f64 + 0.5) - px).abs() / radius;
            if wx <= 0.0 {
                continue;
            }
            let wt = wx * wy;
            total += wt;
            scratch.push((cy as usize * w as usize + cx as usize, wt));
        }
    }
    if total <= 0.0 {
        // only reachable for radii below half a cell: fall back to the nearest cell
        let cx = (px.floor() as isize).clamp(0, w - 1) as usize;
        let cy = (py.floor() as isize).clamp(0, h - 1) as usize;
        heights[cy * w as usize + cx] += volume / grid.cell_area();
        return;
    }
    let scale = volume / (total * grid.cell_area());
    for &(i, wt) in scratch.iter() {
        heights[i] += wt * scale;
    }
}

/// Dispenses `feedrate × step` at each supersampled step (step ≤ a quarter cell).
pub fn deposit(path: &DispensePath, grid: &GridSpec, cfg: &FlowConfig) -> DepositField {
    let mut heights = vec![0.0; grid.cells()];
    let mut scratch = Vec::with_capacity(16);
    let f = path.feedrate();
    for (a, b) in path.polyline().segments() {
        let (ax, ay) = a.to_cells(grid);
        let (bx, by) = b.to_cells(grid);
        let len_cells = (bx - ax).hypot(by - ay);
        if len_cells == 0.0 {
            continue;
        }
        let (amx, amy) = a.to_mm(grid);
        let (bmx, bmy) = b.to_mm(grid);
        let len_mm = (bmx - amx).hypot(bmy - amy);
        let steps = (len_cells * 4.0).ceil().max(1.0) as usize;
        let step_volume = f * len_mm / steps as f64;
        for k in 0..steps {
            let t = (k as f64 + 0.5) / steps as f64;
            let px = ax + t * (bx - ax);
            let py = ay + t * (by - ay);
            splat(
                &mut heights,
                grid,
                px,
                py,
                cfg.nozzle_radius_cells,
                step_volume,
                &mut scratch,
            );
        }
    }
    let total_volume = heights.iter().sum::<f64>() * grid.cell_area();
    DepositField {
        grid: *grid,
        heights,
        total_volume,
    }
}

/// Redistributes material above the gap height until no cell exceeds it
/// (within `tol`), then binarizes at `occupancy_threshold × gap`.
///
/// Each sweep is a Jacobi step: every cell keeps `min(h, gap)` and receives a
/// quarter of each 4-neighbour's excess. Excess pushed across the border is
/// accumulated in `lost_volume`. The stencil is evaluated with the same
/// pairing for every cell so mirrored inputs give mirrored outputs exactly.
pub fn compress(field: &DepositField, cfg: &FlowConfig) -> Result<CompressedState, FlowError> {
    let grid = field.grid;
    let (w, h) = (grid.width_cells(), grid.height_cells());
    let gap = grid.gap_height();
    let cell_area = grid.cell_area();
    // two ghost cells per side: the inner ring receives off-grid outflow
    // reads, the outer ring lets the excess pass look one cell further
    let pw = w + 4;
    let at = |x: usize, y: usize| (y + 2) * pw + x + 2;
    let mut cur = vec![0.0f64; pw * (h + 4)];
    for y in 0..h {
        cur[at(0, y)..at(0, y) + w].copy_from_slice(&field.heights[y * w..(y + 1) * w]);
    }
    let mut excess = vec![0.0f64; cur.len()];
    let mut lost_height = 0.0f64;

    // padded-coordinate box that may hold excess; starts as the whole grid
    let mut bbox = Some((2, 2, w + 1, h + 1));
    let mut iterations = 0;
    while let Some((bx0, by0, bx1, by1)) = bbox {
        // excess over the box grown by two (ghost cells read zero), plus the
        // tight box of cells that actually carry excess
        let mut max_excess = 0.0f64;
        let mut tight: Option<(usize, usize, usize, usize)> = None;
        for y in by0 - 2..=by1 + 2 {
            let row = y * pw + bx0 - 2;
            let n = bx1 - bx0 + 5;
            let mut lanes = [0.0f64; 4];
            for ((e, &v), k) in excess[row..row + n].iter_mut().zip(&cur[row..row + n]).zip(0..) {
                let d = (v - gap).max(0.0);
                *e = d;
                if d > lanes[k & 3] {
                    lanes[k & 3] = d;
                }
            }
            let row_max = lanes[0].max(lanes[1]).max(lanes[2].max(lanes[3]));
            if row_max > 0.0 {
                max_excess = max_excess.max(row_max);
                let es = &excess[row..row + n];
                let first = es.iter().position(|&e| e > 0.0).expect("row has excess");
                let last = es.iter().rposition(|&e| e > 0.0).expect("row has excess");
                tight = Some(grow(tight, bx0 - 2 + first, y));
                tight = Some(grow(tight, bx0 - 2 + last, y));
            }
        }
        if max_excess < cfg.tol {
            break;
        }
        if iterations == cfg.max_iters {
            return Err(FlowError::NoConvergence { iterations, max_excess });
        }
        iterations += 1;
        let (bx0, by0, bx1, by1) = tight.expect("positive excess implies a bounding box");
        // off-grid outflow from the border cells
        for y in by0..=by1 {
            for x in bx0..=bx1 {
                let sides = (x == 2) as u32 + (x == w + 1) as u32 + (y == 2) as u32 + (y == h + 1) as u32;
                if sides > 0 {
                    lost_height += 0.25 * sides as f64 * excess[y * pw + x];
                }
            }
        }
        // receivers: the box grown by one, clipped to the real grid
        let (rx0, ry0) = ((bx0 - 1).max(2), (by0 - 1).max(2));
        let (rx1, ry1) = ((bx1 + 1).min(w + 1), (by1 + 1).min(h + 1));
        let n = rx1 - rx0 + 1;
        for y in ry0..=ry1 {
            let row = y * pw + rx0;
            let up = &excess[row - pw..row - pw + n];
            let down = &excess[row + pw..row + pw + n];
            let left = &excess[row - 1..row - 1 + n];
            let right = &excess[row + 1..row + 1 + n];
            let cells = &mut cur[row..row + n];
            for k in 0..n {
                cells[k] = cells[k].min(gap) + 0.25 * ((left[k] + right[k]) + (up[k] + down[k]));
            }
        }
        bbox = Some((rx0, ry0, rx1, ry1));
    }

    let mut relaxed = Vec::with_capacity(w * h);
    for y in 0..h {
        relaxed.extend_from_slice(&cur[at(0, y)..at(0, y) + w]);
    }
    let pre_binarization_volume = relaxed.iter().sum::<f64>() * cell_area;
    let cutoff = cfg.occupancy_threshold * gap;
    let mut footprint = Mask::new(w, h);
    let mut heights = vec![0.0; w * h];
    let mut filled = 0usize;
    for (i, &v) in relaxed.iter().enumerate() {
        if v > 0.0 && v >= cutoff {
            heights[i] = gap;
            footprint.set(i % w, i / w, true);
            filled += 1;
        }
    }
    let binarized_volume = filled as f64 * gap * cell_area;
    Ok(CompressedState {
        heights,
        footprint,
        stats: CompressionStats {
            iterations,
            input_volume: field.total_volume,
            pre_binarization_volume,
            lost_volume: lost_height * cell_area,
            binarization_residual: pre_binarization_volume - binarized_volume,
        },
    })
}

fn grow(bbox: Option<(usize, usize, usize, usize)>, x: usize, y: usize) -> (usize, usize, usize, usize) {
    match bbox {
        None => (x, y, x, y),
        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
    }
}

/// Deposit then compress.
pub fn simulate(path: &DispensePath, area: &TargetArea, cfg: &FlowConfig) -> Result<CompressedState, FlowError> {
    compress(&deposit(path, area.grid(), cfg), cfg)
}

/// Sets the feedrate from the area (`f = V / l`) and simulates.
pub fn simulate_polyline(poly: &Polyline, area: &TargetArea, cfg: &FlowConfig) -> Result<CompressedState, FlowError> {
    let path = DispensePath::for_area(*poly, area, cfg.min_path_length_mm)?;
    simulate(&path, area, cfg)
}
