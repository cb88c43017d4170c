//! Grid, dispense-path parameterization and the feedrate rule `f = V / l`.
//!
//! Path points are stored normalized to `[0, 1]` over the grid extent (x to the
//! right, y downwards, matching raster row order). Millimetres only appear at
//! the boundaries: lengths, volumes and the path hand-off file.

use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::raster::Mask;

/// Number of path points emitted by the process network.
pub const PATH_POINTS: usize = 6;
/// Raw network outputs: interleaved `x, y` per point.
pub const RAW_OUTPUTS: usize = 2 * PATH_POINTS;
/// Paths shorter than this are rejected as degenerate.
pub const DEFAULT_MIN_PATH_LENGTH_MM: f64 = 0.5;

const PATH_FILE_MAGIC: &str = "dispenseforge-path v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("point ({x}, {y}) lies outside the normalized unit square")]
    PointOutOfRange { x: f64, y: f64 },
    #[error("expected {expected} raw path values, got {got}")]
    WrongArity { expected: usize, got: usize },
    #[error("path length {length_mm} mm is below the {min_mm} mm minimum")]
    ZeroLengthPath { length_mm: f64, min_mm: f64 },
    #[error("feedrate must be positive and finite, got {0}")]
    InvalidFeedrate(f64),
    #[error("target area is empty")]
    EmptyArea,
    #[error("target area has {0} disconnected components")]
    DisconnectedArea(usize),
    #[error("mask is {mask_w}x{mask_h} but the grid is {grid_w}x{grid_h}")]
    MaskGridMismatch {
        mask_w: usize,
        mask_h: usize,
        grid_w: usize,
        grid_h: usize,
    },
    #[error("path file line {line}: {msg}")]
    PathFile { line: usize, msg: String },
}

/// Discretization shared by every raster in a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    width_cells: usize,
    height_cells: usize,
    cell_size: f64,
    gap_height: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            width_cells: 64,
            height_cells: 64,
            cell_size: 1.0,
            gap_height: 1.0,
        }
    }
}

impl GridSpec {
    pub fn new(
        width_cells: usize,
        height_cells: usize,
        cell_size: f64,
        gap_height: f64,
    ) -> Result<Self, GeometryError> {
        if width_cells < 8 || height_cells < 8 {
            return Err(GeometryError::InvalidGrid(format!(
                "grid must be at least 8x8 cells, got {width_cells}x{height_cells}"
            )));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) || !(gap_height > 0.0 && gap_height.is_finite()) {
            return Err(GeometryError::InvalidGrid(format!(
                "cell_size and gap_height must be positive, got {cell_size} and {gap_height}"
            )));
        }
        Ok(Self {
            width_cells,
            height_cells,
            cell_size,
            gap_height,
        })
    }

    pub fn width_cells(&self) -> usize {
        self.width_cells
    }

    pub fn height_cells(&self) -> usize {
        self.height_cells
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn gap_height(&self) -> f64 {
        self.gap_height
    }

    pub fn cells(&self) -> usize {
        self.width_cells * self.height_cells
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_size * self.cell_size
    }

    pub fn width_mm(&self) -> f64 {
        self.width_cells as f64 * self.cell_size
    }

    pub fn height_mm(&self) -> f64 {
        self.height_cells as f64 * self.cell_size
    }

    /// Volume that fills one cell up to the gap height.
    pub fn cell_capacity(&self) -> f64 {
        self.cell_area() * self.gap_height
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{} cell_size_mm={} gap_height_mm={}",
            self.width_cells, self.height_cells, self.cell_size, self.gap_height
        )
    }
}

/// Normalized grid coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Result<Self, GeometryError> {
        if !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
            return Err(GeometryError::PointOutOfRange { x, y });
        }
        Ok(Self { x, y })
    }

    pub fn to_mm(self, grid: &GridSpec) -> (f64, f64) {
        (self.x * grid.width_mm(), self.y * grid.height_mm())
    }

    /// Position in cell units (cell `i` spans `[i, i + 1)`).
    pub fn to_cells(self, grid: &GridSpec) -> (f64, f64) {
        (self.x * grid.width_cells as f64, self.y * grid.height_cells as f64)
    }
}

/// Six-point polygonal chain without a feedrate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Polyline {
    points: [Point; PATH_POINTS],
}

impl Polyline {
    pub fn new(points: [Point; PATH_POINTS]) -> Self {
        Self { points }
    }

    /// Builds a chain from interleaved normalized `x, y` values.
    pub fn from_coords(coords: &[f64]) -> Result<Self, GeometryError> {
        if coords.len() != RAW_OUTPUTS {
            return Err(GeometryError::WrongArity {
                expected: RAW_OUTPUTS,
                got: coords.len(),
            });
        }
        let mut points = [Point { x: 0.0, y: 0.0 }; PATH_POINTS];
        for (p, xy) in points.iter_mut().zip(coords.chunks(2)) {
            *p = Point::new(xy[0], xy[1])?;
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point; PATH_POINTS] {
        &self.points
    }

    pub fn coords(&self) -> [f64; RAW_OUTPUTS] {
        let mut out = [0.0; RAW_OUTPUTS];
        for (i, p) in self.points.iter().enumerate() {
            out[2 * i] = p.x;
            out[2 * i + 1] = p.y;
        }
        out
    }

    pub fn segments(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn reversed(&self) -> Self {
        let mut points = self.points;
        points.reverse();
        Self { points }
    }

    /// Sum of Euclidean segment lengths in millimetres (symbol `l`).
    pub fn length_mm(&self, grid: &GridSpec) -> f64 {
        self.segments()
            .map(|(a, b)| {
                let (ax, ay) = a.to_mm(grid);
                let (bx, by) = b.to_mm(grid);
                (bx - ax).hypot(by - ay)
            })
            .sum()
    }
}

/// A polygonal chain dispensed at a constant feedrate (mm² = volume per mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispensePath {
    polyline: Polyline,
    feedrate: f64,
}

impl DispensePath {
    pub fn new(polyline: Polyline, feedrate: f64, grid: &GridSpec) -> Result<Self, GeometryError> {
        if !(feedrate > 0.0 && feedrate.is_finite()) {
            return Err(GeometryError::InvalidFeedrate(feedrate));
        }
        let length_mm = polyline.length_mm(grid);
        if length_mm <= 0.0 {
            return Err(GeometryError::ZeroLengthPath { length_mm, min_mm: 0.0 });
        }
        Ok(Self { polyline, feedrate })
    }

    /// Path whose feedrate deposits exactly the volume `area` needs.
    pub fn for_area(polyline: Polyline, area: &TargetArea, min_length_mm: f64) -> Result<Self, GeometryError> {
        let feedrate = feedrate_for(&polyline, area, min_length_mm)?;
        Self::new(polyline, feedrate, area.grid())
    }

    /// Bypasses validation; only for probing simulator edge cases.
    #[doc(hidden)]
    pub fn new_unchecked(polyline: Polyline, feedrate: f64) -> Self {
        Self { polyline, feedrate }
    }

    pub fn polyline(&self) -> &Polyline {
        &self.polyline
    }

    pub fn feedrate(&self) -> f64 {
        self.feedrate
    }

    pub fn points(&self) -> &[Point; PATH_POINTS] {
        self.polyline.points()
    }

    /// Serializes to the `dispenseforge-path v1` hand-off format.
    pub fn to_file_string(&self, grid: &GridSpec) -> String {
        let mut s = format!("{PATH_FILE_MAGIC}\nfeedrate_mm2={}\n", self.feedrate);
        for p in self.points() {
            let (x, y) = p.to_mm(grid);
            let _ = writeln!(s, "{x},{y}");
        }
        s
    }

    pub fn parse_file(text: &str, grid: &GridSpec) -> Result<Self, GeometryError> {
        let err = |line: usize, msg: String| GeometryError::PathFile { line, msg };
        let mut lines = text.lines();
        match lines.next() {
            Some(PATH_FILE_MAGIC) => {}
            other => return Err(err(1, format!("expected `{PATH_FILE_MAGIC}`, found {other:?}"))),
        }
        let feed_line = lines.next().ok_or_else(|| err(2, "missing feedrate line".into()))?;
        let feedrate: f64 = feed_line
            .strip_prefix("feedrate_mm2=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(2, format!("expected `feedrate_mm2=<decimal>`, found {feed_line:?}")))?;
        let mut coords = Vec::with_capacity(RAW_OUTPUTS);
        for i in 0..PATH_POINTS {
            let line_no = i + 3;
            let line = lines.next().ok_or_else(|| err(line_no, "missing point line".into()))?;
            let (xs, ys) = line
                .split_once(',')
                .ok_or_else(|| err(line_no, format!("expected `x_mm,y_mm`, found {line:?}")))?;
            let x: f64 = xs
                .trim()
                .parse()
                .map_err(|_| err(line_no, format!("bad x value {xs:?}")))?;
            let y: f64 = ys
                .trim()
                .parse()
                .map_err(|_| err(line_no, format!("bad y value {ys:?}")))?;
            coords.push(x / grid.width_mm());
            coords.push(y / grid.height_mm());
        }
        if let Some((extra, _)) = lines.enumerate().find(|(_, l)| !l.trim().is_empty()) {
            return Err(err(extra + 3 + PATH_POINTS, "unexpected trailing content".into()));
        }
        let polyline = Polyline::from_coords(&coords).map_err(|e| err(3, e.to_string()))?;
        Self::new(polyline, feedrate, grid)
    }
}

/// Binary cooling-area mask: non-empty and a single 4-connected component.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetArea {
    mask: Mask,
    grid: GridSpec,
}

impl TargetArea {
    pub fn new(mask: Mask, grid: GridSpec) -> Result<Self, GeometryError> {
        if mask.width() != grid.width_cells || mask.height() != grid.height_cells {
            return Err(GeometryError::MaskGridMismatch {
                mask_w: mask.width(),
                mask_h: mask.height(),
                grid_w: grid.width_cells,
                grid_h: grid.height_cells,
            });
        }
        match mask.component_count() {
            0 => Err(GeometryError::EmptyArea),
            1 => Ok(Self { mask, grid }),
            n => Err(GeometryError::DisconnectedArea(n)),
        }
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn cell_count(&self) -> usize {
        self.mask.count()
    }
}

/// Sum of segment lengths in mm (symbol `l`).
pub fn path_length(path: &Polyline, grid: &GridSpec) -> f64 {
    path.length_mm(grid)
}

/// Material needed to fill the area to the gap height (symbol `V`).
pub fn required_volume(area: &TargetArea) -> f64 {
    area.cell_count() as f64 * area.grid.cell_area() * area.grid.gap_height
}

/// `f = V / l`; rejects chains shorter than `min_length_mm`.
pub fn feedrate_for(path: &Polyline, area: &TargetArea, min_length_mm: f64) -> Result<f64, GeometryError> {
    let l = path.length_mm(&area.grid);
    if l <= 0.0 || l < min_length_mm {
        return Err(GeometryError::ZeroLengthPath {
            length_mm: l,
            min_mm: min_length_mm,
        });
    }
    Ok(required_volume(area) / l)
}

pub fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`logistic`], with the argument clamped away from 0 and 1.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Squashes 12 unbounded network outputs into normalized points.
pub fn decode_path(raw: &[f64]) -> Result<Polyline, GeometryError> {
    if raw.len() != RAW_OUTPUTS {
        return Err(GeometryError::WrongArity {
            expected: RAW_OUTPUTS,
            got: raw.len(),
        });
    }
    let coords: Vec<f64> = raw.iter().map(|&v| logistic(v)).collect();
    Polyline::from_coords(&coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pl(pts: &[(f64, f64)]) -> Polyline {
        let coords: Vec<f64> = pts.iter().flat_map(|&(x, y)| [x, y]).collect();
        Polyline::from_coords(&coords).unwrap()
    }

    fn grid100() -> GridSpec {
        GridSpec::new(100, 100, 1.0, 1.0).unwrap()
    }

    fn square_area(side: usize, grid: GridSpec, cell: f64) -> TargetArea {
        let _ = cell;
        TargetArea::new(
            Mask::from_fn(grid.width_cells(), grid.height_cells(), |x, y| x < side && y < side),
            grid,
        )
        .unwrap()
    }

    #[test]
    fn path_length_examples() {
        let g = grid100();
        let straight = pl(&[(0.0, 0.0), (1.0, 0.0), (1.0, 0.0), (1.0, 0.0), (1.0, 0.0), (1.0, 0.0)]);
        assert_eq!(path_length(&straight, &g), 100.0);
        let still = pl(&[(0.3, 0.4); 6]);
        assert_eq!(path_length(&still, &g), 0.0);
        let stairs = pl(&[(0.0, 0.0), (0.5, 0.0), (0.5, 0.5), (1.0, 0.5), (1.0, 1.0), (0.5, 1.0)]);
        assert_eq!(path_length(&stairs, &g), 250.0);
    }

    #[test]
    fn required_volume_examples() {
        let g = GridSpec::new(40, 40, 1.0, 0.5).unwrap();
        let one = TargetArea::new(Mask::from_fn(40, 40, |x, y| x == 3 && y == 7), g).unwrap();
        assert_eq!(required_volume(&one), 0.5);
        let g = GridSpec::new(40, 40, 1.0, 1.0).unwrap();
        let full = TargetArea::new(Mask::from_fn(40, 40, |_, _| true), g).unwrap();
        assert_eq!(required_volume(&full), 1600.0);
        assert_eq!(TargetArea::new(Mask::new(40, 40), g), Err(GeometryError::EmptyArea));
    }

    #[test]
    fn disconnected_area_rejected() {
        let g = GridSpec::default();
        let m = Mask::from_fn(64, 64, |x, y| !(3..=10).contains(&x) && y < 3);
        assert_eq!(TargetArea::new(m, g), Err(GeometryError::DisconnectedArea(2)));
    }

    #[test]
    fn feedrate_examples() {
        // V = 100 mm³ (100 cells), l = 50 mm
        let g = grid100();
        let area = square_area(10, g, 1.0);
        let half = pl(&[(0.0, 0.0), (0.5, 0.0), (0.5, 0.0), (0.5, 0.0), (0.5, 0.0), (0.5, 0.0)]);
        assert_eq!(feedrate_for(&half, &area, 0.5).unwrap(), 2.0);
        // V = 1600 mm³, l = 250 mm
        let area = square_area(40, g, 1.0);
        let stairs = pl(&[(0.0, 0.0), (0.5, 0.0), (0.5, 0.5), (1.0, 0.5), (1.0, 1.0), (0.5, 1.0)]);
        assert!((feedrate_for(&stairs, &area, 0.5).unwrap() - 6.4).abs() < 1e-12);
        let still = pl(&[(0.2, 0.2); 6]);
        assert!(matches!(
            feedrate_for(&still, &area, 0.5),
            Err(GeometryError::ZeroLengthPath { .. })
        ));
        let tiny = pl(&[
            (0.2, 0.2),
            (0.203, 0.2),
            (0.203, 0.2),
            (0.203, 0.2),
            (0.203, 0.2),
            (0.203, 0.2),
        ]);
        assert!(matches!(
            feedrate_for(&tiny, &area, 0.5),
            Err(GeometryError::ZeroLengthPath { .. })
        ));
    }

    #[test]
    fn decode_examples() {
        let p = decode_path(&[0.0; 12]).unwrap();
        assert!(p.points().iter().all(|q| q.x == 0.5 && q.y == 0.5));
        let mut raw = [0.0; 12];
        raw[3] = 20.0;
        raw[4] = -20.0;
        let p = decode_path(&raw).unwrap();
        assert!((p.points()[1].y - 1.0).abs() < 1e-8);
        assert!(p.points()[2].x.abs() < 1e-8);
        assert_eq!(
            decode_path(&[0.0; 11]),
            Err(GeometryError::WrongArity { expected: 12, got: 11 })
        );
    }

    #[test]
    fn path_file_round_trip() {
        let g = GridSpec::default();
        let poly = pl(&[
            (0.0, 0.0),
            (0.5, 0.25),
            (0.75, 0.5),
            (1.0, 1.0),
            (0.125, 0.875),
            (0.5, 0.5),
        ]);
        let path = DispensePath::new(poly, 6.4, &g).unwrap();
        let text = path.to_file_string(&g);
        assert_eq!(
            text,
            "dispenseforge-path v1\nfeedrate_mm2=6.4\n0,0\n32,16\n48,32\n64,64\n8,56\n32,32\n"
        );
        assert_eq!(DispensePath::parse_file(&text, &g).unwrap(), path);
        let bad = text.replace("feedrate_mm2", "feed");
        assert!(matches!(
            DispensePath::parse_file(&bad, &g),
            Err(GeometryError::PathFile { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn feedrate_times_length_is_volume(coords in proptest::collection::vec(0.0f64..=1.0, 12), side in 1usize..40) {
            let g = GridSpec::new(40, 40, 0.7, 1.3).unwrap();
            let area = TargetArea::new(Mask::from_fn(40, 40, |x, y| x < side && y < 20), g).unwrap();
            let poly = Polyline::from_coords(&coords).unwrap();
            if let Ok(f) = feedrate_for(&poly, &area, DEFAULT_MIN_PATH_LENGTH_MM) {
                let v = required_volume(&area);
                prop_assert!((f * path_length(&poly, &g) - v).abs() <= 1e-9 * v);
            }
        }

        #[test]
        fn decode_always_yields_valid_points(raw in proptest::collection::vec(-1e6f64..1e6, 12)) {
            let p = decode_path(&raw).unwrap();
            for q in p.points() {
                prop_assert!((0.0..=1.0).contains(&q.x) && (0.0..=1.0).contains(&q.y));
            }
        }

        #[test]
        fn length_is_reversal_invariant(coords in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let g = GridSpec::default();
            let p = Polyline::from_coords(&coords).unwrap();
            let (a, b) = (path_length(&p, &g), path_length(&p.reversed(), &g));
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}
