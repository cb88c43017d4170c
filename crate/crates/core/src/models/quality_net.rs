use dispenseforge_tensor::{save_weights, Graph, Sequential, Var};
use sha2::{Digest, Sha256};

use super::soft_raster::{PathLength, SoftRasterizer};
use super::{expect_layers, flow_layers, void_layers, ModelError, VOID_FRACTION, VOID_PROBABILITY};
use crate::geometry::{GridSpec, RAW_OUTPUTS};
use crate::quality::ObjectiveWeights;
use crate::raster::Mask;

/// Scale applied to rasterized deposit heights before the flow net.
pub const DEPOSIT_SCALE: f32 = 0.25;
/// Scale applied to `ln(f / (cell_size · gap))` for the feed channel.
pub const FEED_SCALE: f32 = 0.25;

/// Frozen differentiable objective predictor.
#[derive(Debug, Clone)]
pub struct QualityNet {
    grid: GridSpec,
    /// Rasterizer sharpness in cells.
    pub sigma_cells: f64,
    pub flow: Sequential,
    pub void: Sequential,
    pub weights: ObjectiveWeights,
}

/// Graph handles produced by [`QualityNet::predict`]; all are per sample.
pub struct QualityPrediction {
    /// Predicted objective `Ĵ`, `[N, 1]`.
    pub objective: Var,
    /// Footprint probability map, `[N, 1, H, W]`.
    pub footprint: Var,
    pub coverage: Var,
    pub overflow: Var,
    /// Void fraction estimate, `[N, 1]`.
    pub void_fraction: Var,
    pub void_probability: Var,
}

impl QualityNet {
    pub fn new(
        grid: GridSpec,
        sigma_cells: f64,
        flow: Sequential,
        void: Sequential,
        weights: ObjectiveWeights,
    ) -> Result<Self, ModelError> {
        expect_layers(&flow, &flow_layers(), "flow surrogate")?;
        expect_layers(&void, &void_layers(&grid), "void surrogate")?;
        Ok(Self {
            grid,
            sigma_cells,
            flow,
            void,
            weights,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Marks every surrogate parameter as not trainable.
    pub fn freeze(&mut self) {
        self.flow.set_trainable(false);
        self.void.set_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.flow
            .params()
            .iter()
            .chain(self.void.params())
            .all(|p| !p.tensor.requires_grad())
    }

    /// SHA-256 over the serialized surrogate parameters, hex encoded.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(save_weights(self.flow.params()));
        h.update(save_weights(self.void.params()));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Builds the two-channel flow-net input from normalized coordinates:
    /// the rasterized deposit for `f = V / l` and the broadcast feed level.
    pub fn flow_input(
        grid: &GridSpec,
        g: &mut Graph,
        coords: Var,
        volumes: &[f32],
        sigma_cells: f64,
    ) -> Result<Var, ModelError> {
        let (h, w) = (grid.height_cells(), grid.width_cells());
        let length = PathLength::new(grid).apply(g, coords)?;
        let inv = g.recip(length);
        let feed = g.mul_const(inv, volumes.to_vec())?;
        let deposit = SoftRasterizer::new(grid, sigma_cells).apply(g, coords, feed)?;
        let deposit = g.scale(deposit, DEPOSIT_SCALE);
        let level = g.scale(feed, (1.0 / (grid.cell_size() * grid.gap_height())) as f32);
        let level = g.ln(level);
        let level = g.scale(level, FEED_SCALE);
        let level = g.broadcast_spatial(level, h, w)?;
        Ok(g.concat_channels(&[deposit, level])?)
    }

    /// Material volume each target needs, `|a| · cell_area · gap`.
    pub fn volumes(grid: &GridSpec, masks: &[&Mask]) -> Vec<f32> {
        masks
            .iter()
            .map(|m| (m.count() as f64 * grid.cell_capacity()) as f32)
            .collect()
    }

    /// `Ĵ = w_c (1 - Ĉ) + w_o ôverflow + w_v v̂` for raw (pre-logistic)
    /// path outputs `raw: [N, 12]` against `masks`.
    pub fn predict(&self, g: &mut Graph, masks: &[&Mask], raw: Var) -> Result<QualityPrediction, ModelError> {
        let coords = g.logistic(raw);
        self.predict_from_coords(g, masks, coords)
    }

    pub fn predict_from_coords(
        &self,
        g: &mut Graph,
        masks: &[&Mask],
        coords: Var,
    ) -> Result<QualityPrediction, ModelError> {
        assert_eq!(g.shape(coords), [masks.len(), RAW_OUTPUTS]);
        let volumes = Self::volumes(&self.grid, masks);
        let input = Self::flow_input(&self.grid, g, coords, &volumes, self.sigma_cells)?;
        let footprint = self.flow.forward(g, input)?.output;
        self.score_footprint(g, masks, footprint)
    }

    /// Scores a given footprint map (oracle or predicted) with the void net
    /// and the soft coverage/overflow terms.
    pub fn score_footprint(
        &self,
        g: &mut Graph,
        masks: &[&Mask],
        footprint: Var,
    ) -> Result<QualityPrediction, ModelError> {
        let wts = &self.weights;
        let cells = self.grid.cells();
        let mut cov_w = Vec::with_capacity(masks.len() * cells);
        let mut over_w = Vec::with_capacity(masks.len() * cells);
        let mut obj_w = Vec::with_capacity(masks.len() * cells);
        for m in masks {
            let inv = 1.0 / m.count() as f64;
            for &c in m.cells() {
                let a = c as u8 as f64;
                cov_w.push((a * inv) as f32);
                over_w.push(((1.0 - a) * inv) as f32);
                obj_w.push(((-wts.coverage * a + wts.overflow * (1.0 - a)) * inv) as f32);
            }
        }
        let coverage = g.weighted_row_sum(footprint, cov_w)?;
        let overflow = g.weighted_row_sum(footprint, over_w)?;
        let area_terms = g.weighted_row_sum(footprint, obj_w)?;
        let area_terms = g.add_scalar(area_terms, wts.coverage as f32);
        let void_out = self.void.forward(g, footprint)?.output;
        let void_fraction = g.select_column(void_out, VOID_FRACTION)?;
        let void_probability = g.select_column(void_out, VOID_PROBABILITY)?;
        let void_term = g.scale(void_fraction, wts.void as f32);
        let objective = g.add(area_terms, void_term)?;
        Ok(QualityPrediction {
            objective,
            footprint,
            coverage,
            overflow,
            void_fraction,
            void_probability,
        })
    }

    /// Convenience: `Ĵ` for one area and raw outputs, without gradients.
    pub fn predict_quality(&self, mask: &Mask, raw: &[f64; RAW_OUTPUTS]) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let r = g.input(vec![1, RAW_OUTPUTS], raw.iter().map(|&v| v as f32).collect())?;
        let p = self.predict(&mut g, &[mask], r)?;
        Ok(g.value(p.objective)[0] as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{new_flow_net, new_void_net};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qnet() -> QualityNet {
        let grid = GridSpec::new(16, 16, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flow = new_flow_net(&mut rng).unwrap();
        let void = new_void_net(&grid, &mut rng).unwrap();
        let mut q = QualityNet::new(grid, 1.5, flow, void, ObjectiveWeights::default()).unwrap();
        q.freeze();
        q
    }

    fn square() -> Mask {
        let mut m = Mask::new(16, 16);
        m.fill_rect(4, 4, 8, 8, true);
        m
    }

    #[test]
    fn oracle_footprint_equal_to_target_has_no_area_terms() {
        let q = qnet();
        let m = square();
        let mut g = Graph::new();
        let fp = g.input(vec![1, 1, 16, 16], m.to_f32()).unwrap();
        let p = q.score_footprint(&mut g, &[&m], fp).unwrap();
        assert_eq!(g.value(p.coverage)[0], 1.0);
        assert_eq!(g.value(p.overflow)[0], 0.0);
        let v = g.value(p.void_fraction)[0];
        assert!((g.value(p.objective)[0] - 4.0 * v).abs() < 1e-6);
    }

    #[test]
    fn empty_footprint_costs_at_least_the_coverage_weight() {
        let q = qnet();
        let m = square();
        let mut g = Graph::new();
        let fp = g.input(vec![1, 1, 16, 16], vec![0.0; 256]).unwrap();
        let p = q.score_footprint(&mut g, &[&m], fp).unwrap();
        assert_eq!(g.value(p.coverage)[0], 0.0);
        assert!(g.value(p.objective)[0] >= 1.0);
    }

    #[test]
    fn hash_tracks_parameters() {
        let mut q = qnet();
        let h = q.param_hash();
        assert_eq!(h.len(), 64);
        assert_eq!(h, q.clone().param_hash());
        q.void.params_mut()[0].tensor.data_mut()[0] += 1.0;
        assert_ne!(h, q.param_hash());
    }

    #[test]
    fn frozen_prediction_yields_path_gradients_only() {
        let q = qnet();
        assert!(q.is_frozen());
        let m = square();
        let mut g = Graph::new();
        let raw = g
            .variable(
                vec![1, 12],
                vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.6, 0.2, 0.2, 0.0, -0.5, 0.4, 0.3],
            )
            .unwrap();
        let p = q.predict(&mut g, &[&m], raw).unwrap();
        let loss = g.mean(p.objective);
        g.backward(loss).unwrap();
        let grad = g.grad(raw).unwrap();
        assert!(grad.iter().all(|v| v.is_finite()));
        assert!(grad.iter().any(|&v| v != 0.0));
    }
}
