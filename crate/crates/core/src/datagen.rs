//! Synthetic rectilinear target areas, random pretraining paths and the
//! binary dataset container.

use std::io::{self, Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::Config;
use crate::flow::{self, DepositField, FlowConfig, FlowError};
use crate::geometry::{feedrate_for, DispensePath, GeometryError, GridSpec, Polyline, TargetArea, RAW_OUTPUTS};
use crate::parallel;
use crate::quality::{self, QualityReport};
use crate::raster::Mask;

const DATASET_MAGIC: &str = "dispenseforge-dataset v1";
/// Cells kept empty between any generated shape and the grid border.
pub const SHAPE_MARGIN: usize = 2;
const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("recipe with seed {seed} violated its constraints in {attempts} attempts")]
    RecipeInfeasible { seed: u64, attempts: usize },
    #[error("dataset format error: {0}")]
    Format(String),
    #[error("dataset grid {found} does not match the configured grid {expected}")]
    GridMismatch { expected: String, found: String },
    #[error("dataset I/O: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// SplitMix64 finalizer; derives independent stream seeds.
pub fn mix_seed(seed: u64, index: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    L,
    T,
    U,
}

/// Everything needed to regenerate one target area.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRecipe {
    pub seed: u64,
    pub base_w: usize,
    pub base_h: usize,
    pub n_notches: usize,
    pub notch_w: (usize, usize),
    pub notch_h: (usize, usize),
    pub template: Option<Template>,
    pub chamfer: bool,
}

/// Shape constraints taken from the configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeLimits {
    pub area_fraction_min: f64,
    pub area_fraction_max: f64,
    pub max_notches: usize,
    pub chamfer: bool,
}

impl From<&Config> for ShapeLimits {
    fn from(c: &Config) -> Self {
        Self {
            area_fraction_min: c.area_fraction_min,
            area_fraction_max: c.area_fraction_max,
            max_notches: c.max_notches,
            chamfer: c.chamfer,
        }
    }
}

impl Default for ShapeLimits {
    fn default() -> Self {
        Self::from(&Config::default())
    }
}

impl ShapeRecipe {
    /// Draws a recipe whose base rectangle alone already satisfies the
    /// area-fraction window with some slack for notches.
    pub fn sample(seed: u64, grid: &GridSpec, limits: &ShapeLimits) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0, 0xA5));
        let (gw, gh) = (grid.width_cells(), grid.height_cells());
        let (max_w, max_h) = (gw - 2 * SHAPE_MARGIN, gh - 2 * SHAPE_MARGIN);
        let cells = (gw * gh) as f64;
        let lo = (limits.area_fraction_min * 1.25 * cells).ceil() as usize;
        let hi = (limits.area_fraction_max * 0.95 * cells).floor() as usize;
        let min_side = (lo / max_h.max(1)).max(16).min(max_w);
        let base_w = rng.gen_range(min_side..=max_w);
        let h_lo = lo.div_ceil(base_w).clamp(6, max_h);
        let h_hi = (hi / base_w).clamp(h_lo, max_h);
        let base_h = rng.gen_range(h_lo..=h_hi);
        let template = match rng.gen_range(0..10) {
            // templates remove up to half the base; keep them for roomy bases
            _ if base_w * base_h < 2 * lo => None,
            0..=1 => Some(Template::L),
            2..=3 => Some(Template::T),
            4..=5 => Some(Template::U),
            _ => None,
        };
        let n_notches = if template.is_some() {
            0
        } else {
            rng.gen_range(0..=limits.max_notches)
        };
        Self {
            seed,
            base_w,
            base_h,
            n_notches,
            notch_w: (3, (base_w / 2).max(3)),
            notch_h: (3, (base_h / 2).max(3)),
            template,
            chamfer: limits.chamfer,
        }
    }
}

/// Rotates a shape by `quarter` clockwise quarter turns.
fn rotated(local: &Mask, quarter: u32) -> Mask {
    let (w, h) = (local.width(), local.height());
    match quarter % 4 {
        0 => local.clone(),
        1 => Mask::from_fn(h, w, |x, y| local.get(y, h - 1 - x)),
        2 => Mask::from_fn(w, h, |x, y| local.get(w - 1 - x, h - 1 - y)),
        _ => Mask::from_fn(h, w, |x, y| local.get(w - 1 - y, x)),
    }
}

fn template_shape(t: Template, w: usize, h: usize, rng: &mut impl Rng) -> Mask {
    let mut m = Mask::from_fn(w, h, |_, _| true);
    let frac = |rng: &mut ChaCha8Rng, n: usize| ((n as f64 * rng.gen_range(0.3..0.6)).round() as usize).clamp(2, n - 3);
    let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
    match t {
        Template::L => {
            let (cw, ch) = (frac(&mut r, w), frac(&mut r, h));
            m.fill_rect(w - cw, 0, cw, ch, false);
        }
        Template::T => {
            let stem = ((w as f64 * r.gen_range(0.3..0.5)).round() as usize).clamp(3, w - 2);
            let arm_h = ((h as f64 * r.gen_range(0.3..0.55)).round() as usize).clamp(3, h - 2);
            let left = (w - stem) / 2 + r.gen_range(0..=((w - stem) / 4));
            m.fill_rect(0, arm_h, left, h - arm_h, false);
            m.fill_rect(left + stem, arm_h, w - left - stem, h - arm_h, false);
        }
        Template::U => {
            let wall = ((w as f64 * r.gen_range(0.2..0.35)).round() as usize).clamp(3, (w - 2) / 2);
            let depth = ((h as f64 * r.gen_range(0.35..0.7)).round() as usize).clamp(2, h - 3);
            m.fill_rect(wall, 0, w - 2 * wall, depth, false);
        }
    }
    m
}

fn chamfer_corners(m: &mut Mask, size: usize) {
    let (w, h) = (m.width(), m.height());
    for y in 0..h {
        for x in 0..w {
            let near = |d: usize, e: usize| d + e < size;
            if near(x, y) || near(w - 1 - x, y) || near(x, h - 1 - y) || near(w - 1 - x, h - 1 - y) {
                m.set(x, y, false);
            }
        }
    }
}

/// Rasterizes a recipe into a target area; deterministic per recipe.
pub fn gen_area(recipe: &ShapeRecipe, grid: &GridSpec, limits: &ShapeLimits) -> Result<TargetArea, DatagenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(recipe.seed, 1, 0x5A));
    let (gw, gh) = (grid.width_cells(), grid.height_cells());
    let cells = (gw * gh) as f64;
    for _ in 0..MAX_ATTEMPTS {
        // jitter the base by up to two cells per side
        let bw = (recipe.base_w as isize + rng.gen_range(-2..=2)).clamp(6, (gw - 2 * SHAPE_MARGIN) as isize) as usize;
        let bh = (recipe.base_h as isize + rng.gen_range(-2..=2)).clamp(6, (gh - 2 * SHAPE_MARGIN) as isize) as usize;
        let quarter = rng.gen_range(0..4u32);
        // build in a local frame that becomes bw × bh after rotation
        let (lw, lh) = if quarter % 2 == 1 { (bh, bw) } else { (bw, bh) };
        let mut local = match recipe.template {
            Some(t) => template_shape(t, lw, lh, &mut rng),
            None => {
                let mut m = Mask::from_fn(lw, lh, |_, _| true);
                for _ in 0..recipe.n_notches {
                    let nw = rng
                        .gen_range(recipe.notch_w.0..=recipe.notch_w.1.max(recipe.notch_w.0))
                        .min(lw - 3);
                    let nh = rng
                        .gen_range(recipe.notch_h.0..=recipe.notch_h.1.max(recipe.notch_h.0))
                        .min(lh - 3);
                    // anchor each notch on a side so it cuts the outline
                    let (x, y) = match rng.gen_range(0..4) {
                        0 => (rng.gen_range(0..=lw - nw), 0),
                        1 => (rng.gen_range(0..=lw - nw), lh - nh),
                        2 => (0, rng.gen_range(0..=lh - nh)),
                        _ => (lw - nw, rng.gen_range(0..=lh - nh)),
                    };
                    m.fill_rect(x, y, nw, nh, false);
                }
                m
            }
        };
        if recipe.chamfer {
            let size = rng.gen_range(2..=(lw.min(lh) / 4).max(2));
            chamfer_corners(&mut local, size);
        }
        let shape = rotated(&local, quarter);
        let (sw, sh) = (shape.width(), shape.height());
        let ox = rng.gen_range(SHAPE_MARGIN..=gw - SHAPE_MARGIN - sw);
        let oy = rng.gen_range(SHAPE_MARGIN..=gh - SHAPE_MARGIN - sh);
        let mask = Mask::from_fn(gw, gh, |x, y| {
            x >= ox && y >= oy && x < ox + sw && y < oy + sh && shape.get(x - ox, y - oy)
        });
        let frac = mask.count() as f64 / cells;
        if frac < limits.area_fraction_min || frac > limits.area_fraction_max || mask.component_count() != 1 {
            continue;
        }
        return Ok(TargetArea::new(mask, *grid)?);
    }
    Err(DatagenError::RecipeInfeasible {
        seed: recipe.seed,
        attempts: MAX_ATTEMPTS,
    })
}

/// Target area for dataset record `index`.
pub fn area_for_index(
    seed: u64,
    index: u64,
    grid: &GridSpec,
    limits: &ShapeLimits,
) -> Result<TargetArea, DatagenError> {
    let recipe = ShapeRecipe::sample(mix_seed(seed, index, 0), grid, limits);
    gen_area(&recipe, grid, limits)
}

/// Random pretraining path: each point lands inside the target's bounding
/// box with probability `inside_fraction`, anywhere on the grid otherwise.
/// Coordinates are rounded to `f32` so stored records reproduce exactly.
pub fn sample_random_path(area: &TargetArea, seed: u64, inside_fraction: f64, min_length_mm: f64) -> DispensePath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = area.grid();
    let (x0, y0, x1, y1) = area.mask().bounding_box().expect("target areas are non-empty");
    let (gw, gh) = (grid.width_cells() as f64, grid.height_cells() as f64);
    let bx = (x0 as f64 / gw, (x1 + 1) as f64 / gw);
    let by = (y0 as f64 / gh, (y1 + 1) as f64 / gh);
    loop {
        let mut coords = [0.0f64; RAW_OUTPUTS];
        for xy in coords.chunks_mut(2) {
            let (x, y) = if rng.gen_bool(inside_fraction) {
                (rng.gen_range(bx.0..=bx.1), rng.gen_range(by.0..=by.1))
            } else {
                (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0))
            };
            xy[0] = x as f32 as f64;
            xy[1] = y as f32 as f64;
        }
        let poly = Polyline::from_coords(&coords).expect("sampled inside the unit square");
        if let Ok(path) = DispensePath::for_area(poly, area, min_length_mm) {
            return path;
        }
    }
}

/// Which partition a record belongs to (fixed 80/10/10 by index).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn of(index: usize) -> Self {
        match index % 10 {
            8 => Split::Validation,
            9 => Split::Test,
            _ => Split::Train,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

/// One stored record: inputs plus oracle labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSample {
    pub area: Mask,
    pub coords: [f32; RAW_OUTPUTS],
    pub feedrate: f32,
    pub footprint: Mask,
    /// coverage, overflow, void_fraction, void_count, objective
    pub quality: [f32; 5],
}

impl PretrainSample {
    pub fn polyline(&self) -> Polyline {
        let c: Vec<f64> = self.coords.iter().map(|&v| v as f64).collect();
        Polyline::from_coords(&c).expect("stored coordinates are normalized")
    }

    pub fn target(&self, grid: &GridSpec) -> Result<TargetArea, GeometryError> {
        TargetArea::new(self.area.clone(), *grid)
    }

    /// Path with the exact (unrounded) feedrate used for the labels.
    pub fn path(&self, grid: &GridSpec, min_length_mm: f64) -> Result<DispensePath, GeometryError> {
        DispensePath::for_area(self.polyline(), &self.target(grid)?, min_length_mm)
    }

    /// Recomputes the oracle deposit image (not stored in the file).
    pub fn deposit(&self, grid: &GridSpec, flow: &FlowConfig) -> Result<DepositField, GeometryError> {
        Ok(flow::deposit(&self.path(grid, flow.min_path_length_mm)?, grid, flow))
    }

    pub fn void_fraction(&self) -> f32 {
        self.quality[2]
    }

    pub fn has_void(&self) -> bool {
        self.quality[3] > 0.0
    }

    fn record_len(grid: &GridSpec) -> usize {
        2 * grid.cells().div_ceil(8) + 4 * (RAW_OUTPUTS + 1 + 5)
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.area.to_packed_bits());
        for v in self.coords.iter().chain(std::iter::once(&self.feedrate)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.footprint.to_packed_bits());
        for v in &self.quality {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_from(bytes: &[u8], grid: &GridSpec) -> Self {
        let (w, h) = (grid.width_cells(), grid.height_cells());
        let nb = grid.cells().div_ceil(8);
        let f = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let area = Mask::from_packed_bits(w, h, &bytes[..nb]);
        let mut coords = [0.0f32; RAW_OUTPUTS];
        for (k, c) in coords.iter_mut().enumerate() {
            *c = f(nb + 4 * k);
        }
        let feedrate = f(nb + 4 * RAW_OUTPUTS);
        let fp_at = nb + 4 * (RAW_OUTPUTS + 1);
        let footprint = Mask::from_packed_bits(w, h, &bytes[fp_at..fp_at + nb]);
        let mut quality = [0.0f32; 5];
        for (k, q) in quality.iter_mut().enumerate() {
            *q = f(fp_at + nb + 4 * k);
        }
        Self {
            area,
            coords,
            feedrate,
            footprint,
            quality,
        }
    }
}

/// In-memory dataset; the record at position `i` has index `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: GridSpec,
    pub samples: Vec<PretrainSample>,
}

fn grid_line(grid: &GridSpec) -> String {
    format!(
        "grid={}x{} cell_size_mm={} gap_height_mm={}",
        grid.width_cells(),
        grid.height_cells(),
        grid.cell_size(),
        grid.gap_height()
    )
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &PretrainSample)> {
        self.samples
            .iter()
            .enumerate()
            .filter(move |(i, _)| Split::of(*i) == split)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "{DATASET_MAGIC}\n{}\ncount={}\n",
            grid_line(&self.grid),
            self.samples.len()
        )
        .into_bytes();
        out.reserve(self.samples.len() * PretrainSample::record_len(&self.grid));
        for s in &self.samples {
            s.write_to(&mut out);
        }
        out
    }

    pub fn write(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8], expected_grid: &GridSpec) -> Result<Self, DatagenError> {
        let mut pos = 0;
        let mut header = Vec::new();
        for _ in 0..3 {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| DatagenError::Format("truncated header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| DatagenError::Format("non-UTF-8 header".into()))?;
            header.push(line.to_string());
            pos += end + 1;
        }
        if header[0] != DATASET_MAGIC {
            return Err(DatagenError::Format(format!(
                "expected `{DATASET_MAGIC}`, found {:?}",
                header[0]
            )));
        }
        let expected = grid_line(expected_grid);
        if header[1] != expected {
            return Err(DatagenError::GridMismatch {
                expected,
                found: header[1].clone(),
            });
        }
        let count: usize = header[2]
            .strip_prefix("count=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| DatagenError::Format(format!("bad count line {:?}", header[2])))?;
        let rec = PretrainSample::record_len(expected_grid);
        let body = &bytes[pos..];
        if body.len() != count * rec {
            return Err(DatagenError::Format(format!(
                "expected {count} records of {rec} bytes, found {} bytes",
                body.len()
            )));
        }
        let samples = body
            .chunks_exact(rec)
            .map(|r| PretrainSample::read_from(r, expected_grid))
            .collect();
        Ok(Self {
            grid: *expected_grid,
            samples,
        })
    }

    pub fn read(r: &mut impl Read, expected_grid: &GridSpec) -> Result<Self, DatagenError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, expected_grid)
    }
}

/// Label statistics of a generated set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetStats {
    pub count: usize,
    /// Path draws discarded because the oracle did not converge; the record
    /// was redrawn with the next path stream.
    pub skipped: usize,
    pub mean_coverage: f64,
    pub mean_overflow: f64,
    pub mean_void_fraction: f64,
    pub void_positive_rate: f64,
    pub mean_objective: f64,
    pub mean_area_fraction: f64,
}

impl DatasetStats {
    pub fn of(ds: &Dataset, skipped: usize) -> Self {
        let n = ds.samples.len().max(1) as f64;
        let mean = |f: &dyn Fn(&PretrainSample) -> f64| ds.samples.iter().map(f).sum::<f64>() / n;
        Self {
            count: ds.samples.len(),
            skipped,
            mean_coverage: mean(&|s| s.quality[0] as f64),
            mean_overflow: mean(&|s| s.quality[1] as f64),
            mean_void_fraction: mean(&|s| s.quality[2] as f64),
            void_positive_rate: mean(&|s| s.has_void() as u8 as f64),
            mean_objective: mean(&|s| s.quality[4] as f64),
            mean_area_fraction: mean(&|s| s.area.count() as f64 / ds.grid.cells() as f64),
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "count={}\nskipped={}\nmean_coverage={}\nmean_overflow={}\nmean_void_fraction={}\nvoid_positive_rate={}\nmean_objective={}\nmean_area_fraction={}\n",
            self.count,
            self.skipped,
            self.mean_coverage,
            self.mean_overflow,
            self.mean_void_fraction,
            self.void_positive_rate,
            self.mean_objective,
            self.mean_area_fraction
        )
    }
}

/// Builds record `index`: area, random path and oracle labels.
pub fn build_sample(seed: u64, index: u64, cfg: &Config) -> Result<(PretrainSample, usize), DatagenError> {
    let grid = cfg.grid()?;
    let limits = ShapeLimits::from(cfg);
    let flow_cfg = FlowConfig::from(cfg);
    let weights = cfg.objective_weights();
    let area = area_for_index(seed, index, &grid, &limits)?;
    let mut skipped = 0;
    for stream in 1.. {
        let path = sample_random_path(
            &area,
            mix_seed(seed, index, stream),
            cfg.inside_bbox_fraction,
            cfg.min_path_length_mm,
        );
        let state = match flow::simulate(&path, &area, &flow_cfg) {
            Ok(s) => s,
            Err(FlowError::NoConvergence { .. }) => {
                skipped += 1;
                continue;
            }
            Err(FlowError::Geometry(e)) => return Err(e.into()),
        };
        let report: QualityReport = quality::assess(state.footprint(), &area, &weights);
        let mut coords = [0.0f32; RAW_OUTPUTS];
        for (c, v) in coords.iter_mut().zip(path.polyline().coords()) {
            *c = v as f32;
        }
        let feedrate = feedrate_for(path.polyline(), &area, cfg.min_path_length_mm)? as f32;
        let sample = PretrainSample {
            area: area.mask().clone(),
            coords,
            feedrate,
            footprint: state.footprint().clone(),
            quality: [
                report.coverage as f32,
                report.overflow as f32,
                report.void_fraction as f32,
                report.void_count as f32,
                report.objective as f32,
            ],
        };
        return Ok((sample, skipped));
    }
    unreachable!()
}

/// Generates `n` records; with `threads > 1` records are computed in
/// parallel but always assembled in index order.
pub fn build_pretrain_set(n: usize, seed: u64, cfg: &Config) -> Result<(Dataset, DatasetStats), DatagenError> {
    let grid = cfg.grid()?;
    let results = parallel::map_indexed(n, cfg.threads, |i| build_sample(seed, i as u64, cfg));
    let mut samples = Vec::with_capacity(n);
    let mut skipped = 0;
    for r in results {
        let (s, k) = r?;
        samples.push(s);
        skipped += k;
    }
    let ds = Dataset { grid, samples };
    let stats = DatasetStats::of(&ds, skipped);
    Ok((ds, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> Config {
        Config::default()
    }

    #[test]
    fn zero_notches_give_a_rectangle() {
        let grid = GridSpec::default();
        let limits = ShapeLimits::default();
        let recipe = ShapeRecipe {
            seed: 3,
            base_w: 30,
            base_h: 40,
            n_notches: 0,
            notch_w: (3, 3),
            notch_h: (3, 3),
            template: None,
            chamfer: false,
        };
        let area = gen_area(&recipe, &grid, &limits).unwrap();
        let (x0, y0, x1, y1) = area.mask().bounding_box().unwrap();
        assert_eq!(area.cell_count(), (x1 - x0 + 1) * (y1 - y0 + 1));
        assert!(x0 >= SHAPE_MARGIN && y0 >= SHAPE_MARGIN && x1 < 64 - SHAPE_MARGIN && y1 < 64 - SHAPE_MARGIN);
        assert_eq!(gen_area(&recipe, &grid, &limits).unwrap(), area);
    }

    #[test]
    fn impossible_recipe_is_infeasible() {
        let grid = GridSpec::default();
        let limits = ShapeLimits::default();
        let recipe = ShapeRecipe {
            seed: 1,
            base_w: 6,
            base_h: 6,
            n_notches: 0,
            notch_w: (3, 3),
            notch_h: (3, 3),
            template: None,
            chamfer: false,
        };
        assert!(matches!(
            gen_area(&recipe, &grid, &limits),
            Err(DatagenError::RecipeInfeasible { seed: 1, attempts: 100 })
        ));
    }

    #[test]
    fn random_recipes_satisfy_invariants() {
        let grid = GridSpec::default();
        for chamfer in [false, true] {
            let limits = ShapeLimits {
                chamfer,
                ..ShapeLimits::default()
            };
            for i in 0..if chamfer { 1000 } else { 10_000 } {
                let area = area_for_index(42, i, &grid, &limits).unwrap_or_else(|e| panic!("index {i}: {e}"));
                let frac = area.cell_count() as f64 / 4096.0;
                assert!((0.15..=0.70).contains(&frac), "index {i}: fraction {frac}");
                assert_eq!(area.mask().component_count(), 1);
                let (x0, y0, x1, y1) = area.mask().bounding_box().unwrap();
                assert!(x0 >= 2 && y0 >= 2 && x1 <= 61 && y1 <= 61);
            }
        }
    }

    #[test]
    fn templates_are_all_used() {
        let grid = GridSpec::default();
        let limits = ShapeLimits::default();
        let mut seen = [0usize; 4];
        for i in 0..400 {
            let r = ShapeRecipe::sample(mix_seed(9, i, 0), &grid, &limits);
            let k = match r.template {
                None => 0,
                Some(Template::L) => 1,
                Some(Template::T) => 2,
                Some(Template::U) => 3,
            };
            seen[k] += 1;
        }
        assert!(seen.iter().all(|&c| c > 20), "{seen:?}");
    }

    #[test]
    fn random_paths_are_valid_and_seeded() {
        let grid = GridSpec::default();
        let area = area_for_index(5, 0, &grid, &ShapeLimits::default()).unwrap();
        let a = sample_random_path(&area, 11, 0.7, 0.5);
        assert_eq!(a, sample_random_path(&area, 11, 0.7, 0.5));
        for s in 0..1000 {
            let p = sample_random_path(&area, s, 0.7, 0.5);
            assert!(p.feedrate() > 0.0 && p.feedrate().is_finite());
            assert!(p.polyline().length_mm(&grid) >= 0.5);
            for q in p.points() {
                assert!((0.0..=1.0).contains(&q.x) && (0.0..=1.0).contains(&q.y));
                assert_eq!(q.x as f32 as f64, q.x);
            }
        }
    }

    #[test]
    fn one_record_round_trips() {
        let cfg = small_cfg();
        let (ds, stats) = build_pretrain_set(1, 7, &cfg).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(stats.count, 1);
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes, &ds.grid).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
        let (again, _) = build_pretrain_set(1, 7, &cfg).unwrap();
        assert_eq!(again.to_bytes(), bytes);
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1], &ds.grid).is_err());
        let other = GridSpec::new(32, 32, 1.0, 1.0).unwrap();
        assert!(matches!(
            Dataset::from_bytes(&bytes, &other),
            Err(DatagenError::GridMismatch { .. })
        ));
    }

    #[test]
    fn threaded_generation_matches_serial() {
        let cfg = small_cfg();
        let threaded = Config {
            threads: 3,
            ..cfg.clone()
        };
        let (a, _) = build_pretrain_set(7, 21, &cfg).unwrap();
        let (b, _) = build_pretrain_set(7, 21, &threaded).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn splits_are_80_10_10() {
        let counts = (0..1000).fold([0; 3], |mut c, i| {
            c[Split::of(i) as usize] += 1;
            c
        });
        assert_eq!(counts, [800, 100, 100]);
    }
}
