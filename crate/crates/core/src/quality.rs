//! Exact quality metrics on compressed footprints and the scalar objective
//! `J = w_c (1 - C) + w_o overflow + w_v void_fraction`.

use std::collections::VecDeque;

use crate::flow::{simulate, FlowConfig, FlowError};
use crate::geometry::{DispensePath, TargetArea};
use crate::raster::{Mask, NEIGHBORS_4};

/// Non-negative weights of the objective terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub coverage: f64,
    pub overflow: f64,
    pub void: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            coverage: 1.0,
            overflow: 1.0,
            void: 4.0,
        }
    }
}

impl ObjectiveWeights {
    pub fn objective(&self, coverage: f64, overflow: f64, void_fraction: f64) -> f64 {
        self.coverage * (1.0 - coverage) + self.overflow * overflow + self.void * void_fraction
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityReport {
    pub coverage: f64,
    pub overflow: f64,
    pub void_fraction: f64,
    pub void_count: usize,
    pub objective: f64,
    /// `false` when the oracle hit its iteration cap; the objective then
    /// carries the configured penalty.
    pub converged: bool,
}

impl QualityReport {
    pub const CSV_HEADER: &'static str = "coverage,overflow,void_fraction,void_count,objective";

    pub fn from_metrics(
        coverage: f64,
        overflow: f64,
        void_fraction: f64,
        void_count: usize,
        weights: &ObjectiveWeights,
    ) -> Self {
        Self {
            coverage,
            overflow,
            void_fraction,
            void_count,
            objective: weights.objective(coverage, overflow, void_fraction),
            converged: true,
        }
    }

    pub fn penalty(penalty_max: f64) -> Self {
        Self {
            coverage: 0.0,
            overflow: 1.0,
            void_fraction: 0.0,
            void_count: 0,
            objective: penalty_max,
            converged: false,
        }
    }

    pub fn is_void_free(&self) -> bool {
        self.void_count == 0
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.coverage, self.overflow, self.void_fraction, self.void_count, self.objective
        )
    }
}

/// Result of [`find_voids`].
#[derive(Debug, Clone, PartialEq)]
pub struct Voids {
    pub fraction: f64,
    pub count: usize,
    pub mask: Mask,
}

/// `|footprint ∧ area| / |area|`.
pub fn coverage(footprint: &Mask, area: &TargetArea) -> f64 {
    footprint.intersection_count(area.mask()) as f64 / area.cell_count() as f64
}

/// `|footprint ∧ ¬area| / |area|`, clamped to 1.
pub fn overflow(footprint: &Mask, area: &TargetArea) -> f64 {
    (footprint.difference_count(area.mask()) as f64 / area.cell_count() as f64).min(1.0)
}

/// Empty cells not 4-reachable from the grid border through empty cells.
pub fn find_voids(footprint: &Mask) -> Voids {
    let (w, h) = (footprint.width(), footprint.height());
    let mut reached = vec![false; w * h];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let border = x == 0 || y == 0 || x == w - 1 || y == h - 1;
            if border && !footprint.get(x, y) {
                reached[y * w + x] = true;
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        for (dx, dy) in NEIGHBORS_4 {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if !reached[j] && !footprint.cells()[j] {
                reached[j] = true;
                queue.push_back((nx as usize, ny as usize));
            }
        }
    }
    let mask = Mask::from_fn(w, h, |x, y| !footprint.get(x, y) && !reached[y * w + x]);
    let cells = mask.count();
    Voids {
        fraction: cells as f64 / (w * h) as f64,
        count: mask.component_count(),
        mask,
    }
}

/// Metrics of an already simulated footprint.
pub fn assess(footprint: &Mask, area: &TargetArea, weights: &ObjectiveWeights) -> QualityReport {
    let voids = find_voids(footprint);
    QualityReport::from_metrics(
        coverage(footprint, area),
        overflow(footprint, area),
        voids.fraction,
        voids.count,
        weights,
    )
}

/// Simulates the path and scores it; a non-converging simulation scores
/// `penalty_max`.
pub fn evaluate(
    path: &DispensePath,
    area: &TargetArea,
    flow: &FlowConfig,
    weights: &ObjectiveWeights,
    penalty_max: f64,
) -> Result<QualityReport, FlowError> {
    match simulate(path, area, flow) {
        Ok(state) => Ok(assess(state.footprint(), area, weights)),
        Err(FlowError::NoConvergence { .. }) => Ok(QualityReport::penalty(penalty_max)),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{GridSpec, Polyline};
    use proptest::prelude::*;

    fn area_rect(x0: usize, y0: usize, w: usize, h: usize) -> TargetArea {
        let mut m = Mask::new(64, 64);
        m.fill_rect(x0, y0, w, h, true);
        TargetArea::new(m, GridSpec::default()).unwrap()
    }

    #[test]
    fn coverage_fixtures() {
        let area = area_rect(10, 10, 40, 40);
        assert_eq!(coverage(area.mask(), &area), 1.0);
        assert_eq!(coverage(&Mask::new(64, 64), &area), 0.0);
        let mut part = Mask::new(64, 64);
        part.fill_rect(10, 10, 30, 40, true);
        assert_eq!(coverage(&part, &area), 0.75);
    }

    #[test]
    fn overflow_fixtures() {
        let area = area_rect(10, 10, 20, 20);
        let mut inside = Mask::new(64, 64);
        inside.fill_rect(12, 12, 5, 5, true);
        assert_eq!(overflow(&inside, &area), 0.0);
        assert_eq!(overflow(&area.mask().translated(10, 0), &area), 0.5);
        let mut big = Mask::new(64, 64);
        big.fill_rect(34, 0, 30, 40, true);
        assert_eq!(overflow(&big, &area), 1.0);
    }

    #[test]
    fn void_fixtures() {
        let full = Mask::from_fn(64, 64, |_, _| true);
        let v = find_voids(&full);
        assert_eq!((v.fraction, v.count), (0.0, 0));
        assert!(v.mask.is_empty());

        // 1-cell-thick ring around a 5x5 hole
        let ring = Mask::from_fn(64, 64, |x, y| {
            (20..27).contains(&x) && (20..27).contains(&y) && !((21..26).contains(&x) && (21..26).contains(&y))
        });
        let v = find_voids(&ring);
        assert_eq!(v.count, 1);
        assert_eq!(v.mask.count(), 25);
        assert_eq!(v.fraction, 25.0 / 4096.0);

        let mut u = ring.clone();
        u.set(23, 20, false);
        assert_eq!(find_voids(&u).count, 0);

        // empty cells flood 4-connected, so a diamond of diagonally touching cells still encloses
        let diamond = Mask::from_fn(64, 64, |x, y| (x as isize - 30).abs() + (y as isize - 30).abs() == 3);
        let v = find_voids(&diamond);
        assert_eq!((v.count, v.mask.count()), (1, 13));
    }

    #[test]
    fn objective_zero_only_when_perfect() {
        let w = ObjectiveWeights::default();
        assert_eq!(w.objective(1.0, 0.0, 0.0), 0.0);
        assert!(w.objective(0.99, 0.0, 0.0) > 0.0);
        assert!(w.objective(1.0, 0.01, 0.0) > 0.0);
        assert!(w.objective(1.0, 0.0, 0.01) > 0.0);
    }

    #[test]
    fn csv_row_layout() {
        let r = QualityReport::from_metrics(0.75, 0.5, 0.0, 0, &ObjectiveWeights::default());
        assert_eq!(r.to_csv_row(), "0.75,0.5,0,0,0.75");
        assert_eq!(QualityReport::CSV_HEADER.split(',').count(), 5);
    }

    #[test]
    fn evaluate_penalizes_non_convergence() {
        let area = area_rect(10, 10, 40, 40);
        let poly = Polyline::from_coords(&[0.5, 0.5, 0.51, 0.5, 0.51, 0.5, 0.51, 0.5, 0.51, 0.5, 0.51, 0.5]).unwrap();
        let path = DispensePath::for_area(poly, &area, 0.5).unwrap();
        let cfg = FlowConfig {
            max_iters: 2,
            ..FlowConfig::default()
        };
        let r = evaluate(&path, &area, &cfg, &ObjectiveWeights::default(), 10.0).unwrap();
        assert!(!r.converged);
        assert_eq!(r.objective, 10.0);
    }

    #[test]
    fn short_path_in_large_area_scores_positive() {
        let area = area_rect(8, 8, 48, 48);
        let poly = Polyline::from_coords(&[0.4, 0.5, 0.6, 0.5, 0.6, 0.5, 0.6, 0.5, 0.6, 0.5, 0.6, 0.5]).unwrap();
        let path = DispensePath::for_area(poly, &area, 0.5).unwrap();
        let r = evaluate(&path, &area, &FlowConfig::default(), &ObjectiveWeights::default(), 10.0).unwrap();
        // all material fits into the target around a short bar, so overflow stays small but coverage is not complete
        assert!(r.coverage < 1.0 && r.objective > 0.0);
        let direct = simulate(&path, &area, &FlowConfig::default()).unwrap();
        assert_eq!(r, assess(direct.footprint(), &area, &ObjectiveWeights::default()));
    }

    fn random_mask() -> impl Strategy<Value = Mask> {
        proptest::collection::vec(prop::bool::weighted(0.6), 24 * 24).prop_map(|c| Mask::from_cells(24, 24, c))
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(fp in random_mask()) {
            let mut grid_mask = Mask::new(24, 24);
            grid_mask.fill_rect(4, 4, 10, 10, true);
            let area = TargetArea::new(grid_mask, GridSpec::new(24, 24, 1.0, 1.0).unwrap()).unwrap();
            let r = assess(&fp, &area, &ObjectiveWeights::default());
            for v in [r.coverage, r.overflow, r.void_fraction] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(r.objective >= 0.0);
        }

        #[test]
        fn metrics_translation_invariant(cells in proptest::collection::vec(any::<bool>(), 12 * 12), dx in 0isize..8, dy in 0isize..8) {
            // embed a random 12x12 patch with a one-cell empty frame inside a 32x32 grid
            let g = GridSpec::new(32, 32, 1.0, 1.0).unwrap();
            let fp = Mask::from_fn(32, 32, |x, y| (6..18).contains(&x) && (6..18).contains(&y) && cells[(y - 6) * 12 + x - 6]);
            let mut a = Mask::new(32, 32);
            a.fill_rect(8, 8, 6, 5, true);
            let area = TargetArea::new(a.clone(), g).unwrap();
            let moved = TargetArea::new(a.translated(dx, dy), g).unwrap();
            let w = ObjectiveWeights::default();
            prop_assert_eq!(assess(&fp, &area, &w), assess(&fp.translated(dx, dy), &moved, &w));
        }

        #[test]
        fn voids_invariant_under_square_symmetries(fp in random_mask(), k in 0u8..8) {
            let (a, b) = (find_voids(&fp), find_voids(&fp.dihedral(k)));
            prop_assert_eq!((a.count, a.fraction), (b.count, b.fraction));
            prop_assert_eq!(a.mask.dihedral(k), b.mask);
        }
    }
}
