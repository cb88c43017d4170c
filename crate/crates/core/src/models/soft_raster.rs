//! Differentiable stand-ins for the path-to-image discretization: a Gaussian
//! tube rasterizer and the smoothed path length.

use dispenseforge_tensor::{CustomOp, Graph, Result, Var};

use crate::geometry::{GridSpec, PATH_POINTS, RAW_OUTPUTS};

/// Added under the square root of every segment length (in cells) so the
/// length stays differentiable for coincident points.
pub const LENGTH_SMOOTHING_CELLS: f64 = 1e-2;

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: (f64, f64),
    b: (f64, f64),
}

impl Segment {
    fn delta(&self) -> (f64, f64) {
        (self.b.0 - self.a.0, self.b.1 - self.a.1)
    }

    /// Smoothed length in cells.
    fn len_cells(&self) -> f64 {
        let (dx, dy) = self.delta();
        (dx * dx + dy * dy + LENGTH_SMOOTHING_CELLS * LENGTH_SMOOTHING_CELLS).sqrt()
    }

    /// Closest-point parameter and offset `c - closest` for point `c`.
    #[inline]
    fn closest(&self, cx: f64, cy: f64) -> (f64, f64, f64) {
        let (dx, dy) = self.delta();
        let dd = dx * dx + dy * dy;
        let t = if dd < 1e-18 {
            0.5
        } else {
            (((cx - self.a.0) * dx + (cy - self.a.1) * dy) / dd).clamp(0.0, 1.0)
        };
        (t, cx - (self.a.0 + t * dx), cy - (self.a.1 + t * dy))
    }
}

/// Geometry shared by both ops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterGeometry {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub gap_height: f64,
}

impl From<&GridSpec> for RasterGeometry {
    fn from(g: &GridSpec) -> Self {
        Self {
            width: g.width_cells(),
            height: g.height_cells(),
            cell_size: g.cell_size(),
            gap_height: g.gap_height(),
        }
    }
}

impl RasterGeometry {
    fn segments(&self, coords: &[f32]) -> [Segment; PATH_POINTS - 1] {
        let p = |i: usize| {
            (
                coords[2 * i] as f64 * self.width as f64,
                coords[2 * i + 1] as f64 * self.height as f64,
            )
        };
        std::array::from_fn(|s| Segment { a: p(s), b: p(s + 1) })
    }

    /// Cells a unit of segment length (mm) fills when spread at feedrate 1.
    fn mass_per_mm(&self) -> f64 {
        1.0 / (self.cell_size * self.cell_size * self.gap_height)
    }

    /// Converts a gradient w.r.t. a cell-unit point into normalized units.
    fn to_normalized(self, gx: f64, gy: f64) -> (f64, f64) {
        (gx * self.width as f64, gy * self.height as f64)
    }
}

/// Renders `Σ_s m_s · G_s / Z_s` with `G_s = exp(-d(c, s)² / 2σ²)`, where
/// `m_s = f · len_s / (cell_area · gap)` is the material of segment `s` in
/// units of filled cells and `Z_s` normalizes each tube over the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftRasterizer {
    pub geometry: RasterGeometry,
    pub sigma_cells: f64,
}

impl SoftRasterizer {
    pub fn new(grid: &GridSpec, sigma_cells: f64) -> Self {
        Self {
            geometry: grid.into(),
            sigma_cells,
        }
    }

    fn kernel(&self, seg: &Segment, out: &mut [f64]) -> f64 {
        let g = &self.geometry;
        let inv = 1.0 / (2.0 * self.sigma_cells * self.sigma_cells);
        let mut z = 0.0;
        for y in 0..g.height {
            let cy = y as f64 + 0.5;
            for x in 0..g.width {
                let (_, ex, ey) = seg.closest(x as f64 + 0.5, cy);
                let v = (-(ex * ex + ey * ey) * inv).exp();
                out[y * g.width + x] = v;
                z += v;
            }
        }
        z
    }

    /// Single-sample forward pass in `f64` (heights in gap units).
    pub fn render(&self, coords: &[f32], feedrate: f64) -> Vec<f64> {
        let g = &self.geometry;
        let n = g.width * g.height;
        let mut out = vec![0.0; n];
        let mut kern = vec![0.0; n];
        for seg in g.segments(coords) {
            let m = feedrate * seg.len_cells() * g.cell_size * g.mass_per_mm();
            let z = self.kernel(&seg, &mut kern);
            let s = m / z;
            for (o, k) in out.iter_mut().zip(&kern) {
                *o += s * k;
            }
        }
        out
    }

    /// `coords: [N, 12]` normalized points, `feedrate: [N, 1]` in mm² →
    /// `[N, 1, H, W]` deposit heights in gap units.
    pub fn apply(&self, graph: &mut Graph, coords: Var, feedrate: Var) -> Result<Var> {
        let n = graph.shape(coords)[0];
        let (c, f) = (graph.value(coords), graph.value(feedrate));
        let mut value = Vec::with_capacity(n * self.geometry.width * self.geometry.height);
        for s in 0..n {
            let img = self.render(&c[s * RAW_OUTPUTS..(s + 1) * RAW_OUTPUTS], f[s] as f64);
            value.extend(img.into_iter().map(|v| v as f32));
        }
        graph.custom(
            &[coords, feedrate],
            vec![n, 1, self.geometry.height, self.geometry.width],
            value,
            Box::new(*self),
        )
    }

    fn backward_sample(&self, coords: &[f32], feedrate: f64, grad_out: &[f32], gc: &mut [f64], gf: &mut f64) {
        let g = &self.geometry;
        let n = g.width * g.height;
        let inv = 1.0 / (2.0 * self.sigma_cells * self.sigma_cells);
        let mut kern = vec![0.0; n];
        for (si, seg) in g.segments(coords).iter().enumerate() {
            let len = seg.len_cells();
            let dm_dlen = feedrate * g.cell_size * g.mass_per_mm();
            let m = dm_dlen * len;
            let z = self.kernel(seg, &mut kern);
            let a: f64 = kern.iter().zip(grad_out).map(|(k, &go)| k * go as f64).sum();
            let gbar = a / z;
            // dL/dm_s
            let dl_dm = gbar;
            *gf += dl_dm * len * g.cell_size * g.mass_per_mm();
            // kernel-shape contribution: (m / z) Σ_c G'(c) (g(c) - ḡ)
            let (mut ga, mut gb) = ((0.0, 0.0), (0.0, 0.0));
            for y in 0..g.height {
                let cy = y as f64 + 0.5;
                for x in 0..g.width {
                    let i = y * g.width + x;
                    let w = kern[i] * (grad_out[i] as f64 - gbar);
                    if w == 0.0 {
                        continue;
                    }
                    let (t, ex, ey) = seg.closest(x as f64 + 0.5, cy);
                    // dG/dθ = -G · inv · d(d²)/dθ and d(d²)/da = -2(1-t)e, d(d²)/db = -2te
                    let k = w * 2.0 * inv;
                    ga.0 += k * (1.0 - t) * ex;
                    ga.1 += k * (1.0 - t) * ey;
                    gb.0 += k * t * ex;
                    gb.1 += k * t * ey;
                }
            }
            let scale = m / z;
            // length contribution through m_s
            let (dx, dy) = seg.delta();
            let dl = dl_dm * dm_dlen;
            let (lx, ly) = (dl * dx / len, dl * dy / len);
            let (ax, ay) = g.to_normalized(scale * ga.0 - lx, scale * ga.1 - ly);
            let (bx, by) = g.to_normalized(scale * gb.0 + lx, scale * gb.1 + ly);
            gc[2 * si] += ax;
            gc[2 * si + 1] += ay;
            gc[2 * si + 2] += bx;
            gc[2 * si + 3] += by;
        }
    }
}

impl CustomOp for SoftRasterizer {
    fn name(&self) -> &'static str {
        "soft_rasterize"
    }

    fn backward(
        &self,
        inputs: &[&[f32]],
        _output: &[f32],
        grad_output: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        let (coords, feed) = (inputs[0], inputs[1]);
        let n = feed.len();
        let per = self.geometry.width * self.geometry.height;
        let mut gc = vec![0.0f64; coords.len()];
        let mut gf = vec![0.0f64; n];
        for s in 0..n {
            self.backward_sample(
                &coords[s * RAW_OUTPUTS..(s + 1) * RAW_OUTPUTS],
                feed[s] as f64,
                &grad_output[s * per..(s + 1) * per],
                &mut gc[s * RAW_OUTPUTS..(s + 1) * RAW_OUTPUTS],
                &mut gf[s],
            );
        }
        let cast = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
        vec![needs[0].then(|| cast(gc)), needs[1].then(|| cast(gf))]
    }
}

/// Smoothed path length in mm, `[N, 12] → [N, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLength {
    pub geometry: RasterGeometry,
}

impl PathLength {
    pub fn new(grid: &GridSpec) -> Self {
        Self { geometry: grid.into() }
    }

    pub fn length_mm(&self, coords: &[f32]) -> f64 {
        self.geometry
            .segments(coords)
            .iter()
            .map(|s| s.len_cells())
            .sum::<f64>()
            * self.geometry.cell_size
    }

    pub fn apply(&self, graph: &mut Graph, coords: Var) -> Result<Var> {
        let n = graph.shape(coords)[0];
        let value = graph
            .value(coords)
            .chunks(RAW_OUTPUTS)
            .map(|c| self.length_mm(c) as f32)
            .collect();
        graph.custom(&[coords], vec![n, 1], value, Box::new(*self))
    }
}

impl CustomOp for PathLength {
    fn name(&self) -> &'static str {
        "path_length"
    }

    fn backward(
        &self,
        inputs: &[&[f32]],
        _output: &[f32],
        grad_output: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>> {
        if !needs[0] {
            return vec![None];
        }
        let g = &self.geometry;
        let mut out = vec![0.0f32; inputs[0].len()];
        for (s, (coords, &go)) in inputs[0].chunks(RAW_OUTPUTS).zip(grad_output).enumerate() {
            for (si, seg) in g.segments(coords).iter().enumerate() {
                let (dx, dy) = seg.delta();
                let len = seg.len_cells();
                let k = go as f64 * g.cell_size / len;
                let (gx, gy) = g.to_normalized(k * dx, k * dy);
                let base = s * RAW_OUTPUTS + 2 * si;
                out[base] -= gx as f32;
                out[base + 1] -= gy as f32;
                out[base + 2] += gx as f32;
                out[base + 3] += gy as f32;
            }
        }
        vec![Some(out)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(32, 32, 1.0, 1.0).unwrap()
    }

    #[test]
    fn single_point_chain_is_an_isotropic_blob() {
        let r = SoftRasterizer::new(&grid(), 1.5);
        let c = [0.5f32; 12];
        let img = r.render(&c, 4.0);
        // center (16, 16) sits on a cell corner: the four surrounding cells tie
        let at = |x: usize, y: usize| img[y * 32 + x];
        assert!((at(15, 15) - at(16, 16)).abs() < 1e-12);
        assert!((at(15, 16) - at(16, 15)).abs() < 1e-12);
        // radial symmetry across the diagonal and both axes
        for (x, y) in [(12, 14), (18, 13), (10, 20)] {
            assert!((at(x, y) - at(y, x)).abs() < 1e-12);
            assert!((at(x, y) - at(31 - x, y)).abs() < 1e-12);
        }
        let total: f64 = img.iter().sum();
        let expected = 4.0 * 5.0 * LENGTH_SMOOTHING_CELLS;
        assert!((total - expected).abs() < 1e-12 * expected.max(1.0));
    }

    #[test]
    fn far_cells_vanish() {
        let r = SoftRasterizer::new(&grid(), 1.0);
        let c = [0.1f32, 0.1, 0.2, 0.1, 0.2, 0.1, 0.2, 0.1, 0.2, 0.1, 0.2, 0.1];
        let img = r.render(&c, 2.0);
        let peak = img.iter().cloned().fold(0.0, f64::max);
        // segment from (3.2, 3.2) to (6.4, 3.2); cell (25, 25) is > 6σ away
        assert!(img[25 * 32 + 25] < 1e-6 * peak);
    }

    #[test]
    fn total_mass_is_feedrate_times_length() {
        let g = grid();
        let r = SoftRasterizer::new(&g, 1.5);
        let c = [0.2f32, 0.3, 0.7, 0.3, 0.7, 0.6, 0.25, 0.75, 0.5, 0.5, 0.9, 0.1];
        let img = r.render(&c, 3.0);
        let len = PathLength::new(&g).length_mm(&c);
        let total: f64 = img.iter().sum();
        assert!((total - 3.0 * len).abs() < 1e-9 * total);
    }

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `Σ w · render(c, f)` in f64 around f32 coords.
    fn numeric(r: &SoftRasterizer, c: &[f32], f: f64, w: &[f32]) -> (Vec<f64>, f64) {
        let loss = |c: &[f32], f: f64| -> f64 { r.render(c, f).iter().zip(w).map(|(v, &w)| v * w as f64).sum() };
        let gc = (0..RAW_OUTPUTS)
            .map(|i| {
                let (mut p, mut m) = (c.to_vec(), c.to_vec());
                p[i] += 2e-4;
                m[i] -= 2e-4;
                (loss(&p, f) - loss(&m, f)) / (p[i] as f64 - m[i] as f64)
            })
            .collect();
        let gf = (loss(c, f + 1e-4) - loss(c, f - 1e-4)) / 2e-4;
        (gc, gf)
    }

    fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(floor)
    }

    #[test]
    fn rasterizer_gradient_matches_finite_differences() {
        let g = grid();
        let r = SoftRasterizer::new(&g, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for _ in 0..40 {
            let c: Vec<f32> = (0..RAW_OUTPUTS).map(|_| rng.gen_range(0.1f32..0.9)).collect();
            let f = rng.gen_range(0.5..4.0);
            let w: Vec<f32> = (0..32 * 32).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let out = r.render(&c, f);
            let outf: Vec<f32> = out.iter().map(|&v| v as f32).collect();
            let feed = [f as f32];
            let grads = r.backward(&[&c, &feed], &outf, &w, &[true, true]);
            let (nc, nf) = numeric(&r, &c, feed[0] as f64, &w);
            let ac = grads[0].as_ref().unwrap();
            let scale = nc.iter().fold(1e-3f64, |m, v| m.max(v.abs()));
            for (a, n) in ac.iter().zip(&nc) {
                worst = worst.max(rel_err(*a as f64, *n, 1e-2 * scale));
            }
            worst = worst.max(rel_err(grads[1].as_ref().unwrap()[0] as f64, nf, 1e-6));
        }
        assert!(worst < 1e-2, "max relative error {worst}");
    }

    #[test]
    fn length_gradient_matches_finite_differences() {
        let pl = PathLength::new(&grid());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let c: Vec<f32> = (0..RAW_OUTPUTS).map(|_| rng.gen_range(0.0f32..1.0)).collect();
            let grads = pl.backward(&[&c], &[pl.length_mm(&c) as f32], &[1.0], &[true]);
            for (i, a) in grads[0].as_ref().unwrap().iter().enumerate() {
                let (mut p, mut m) = (c.clone(), c.clone());
                p[i] += 1e-3;
                m[i] -= 1e-3;
                let n = (pl.length_mm(&p) - pl.length_mm(&m)) / (p[i] as f64 - m[i] as f64);
                assert!(rel_err(*a as f64, n, 1e-2) < 1e-2, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn mass_is_independent_of_coordinates_at_fixed_volume() {
        // with f = V / l the rendered total is V for every path
        let g = grid();
        let r = SoftRasterizer::new(&g, 1.5);
        let pl = PathLength::new(&g);
        let volume = 120.0;
        let mass = |c: &[f32]| r.render(c, volume / pl.length_mm(c)).iter().sum::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let c: Vec<f32> = (0..RAW_OUTPUTS).map(|_| rng.gen_range(0.1f32..0.9)).collect();
            for i in 0..RAW_OUTPUTS {
                let (mut p, mut m) = (c.clone(), c.clone());
                p[i] += 1e-3;
                m[i] -= 1e-3;
                let d = (mass(&p) - mass(&m)) / (p[i] as f64 - m[i] as f64);
                assert!(d.abs() < 1e-6 * volume, "d mass / d c{i} = {d}");
            }
        }

        // and the graph gradient of the total through length and rasterizer vanishes
        let mut graph = Graph::new();
        let c: Vec<f32> = (0..RAW_OUTPUTS).map(|_| rng.gen_range(0.1f32..0.9)).collect();
        let cv = graph.variable(vec![1, RAW_OUTPUTS], c).unwrap();
        let l = pl.apply(&mut graph, cv).unwrap();
        let inv = graph.recip(l);
        let f = graph.mul_const(inv, vec![volume as f32]).unwrap();
        let img = r.apply(&mut graph, cv, f).unwrap();
        let total = graph.sum(img);
        graph.backward(total).unwrap();
        for v in graph.grad(cv).unwrap() {
            assert!(v.abs() < 1e-3 * volume as f32, "{v}");
        }
    }
}
