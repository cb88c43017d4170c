use dispenseforge_tensor::{AdamState, Graph, Param, Sequential, Tensor};
use rand::Rng;

use super::{expect_layers, mask_batch, process_layers, ModelError, QualityNet};
use crate::flow::FlowConfig;
use crate::geometry::{decode_path, logit, DispensePath, GridSpec, TargetArea, RAW_OUTPUTS};
use crate::quality::{evaluate, ObjectiveWeights, QualityReport};
use crate::raster::Mask;

/// The amortized planner: target mask in, 12 raw path outputs out.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessNet {
    grid: GridSpec,
    pub net: Sequential,
}

impl ProcessNet {
    pub fn new(grid: GridSpec, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let net = Sequential::new("process", process_layers(&grid), rng)?;
        Ok(Self { grid, net })
    }

    /// Wraps an existing stack, checking it matches the grid's architecture.
    pub fn from_net(grid: GridSpec, net: Sequential) -> Result<Self, ModelError> {
        expect_layers(&net, &process_layers(&grid), "process net")?;
        Ok(Self { grid, net })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Raw (pre-logistic) outputs for one mask.
    pub fn raw_outputs(&self, mask: &Mask) -> Result<[f64; RAW_OUTPUTS], ModelError> {
        let (shape, data) = mask_batch(&[mask]);
        let mut g = Graph::new();
        let x = g.input(shape, data)?;
        let out = self.net.forward(&mut g, x)?.output;
        let v = g.value(out);
        Ok(std::array::from_fn(|i| v[i] as f64))
    }
}

/// A planned path with the network outputs it was decoded from.
#[derive(Debug, Clone, PartialEq)]
pub struct InferredPath {
    pub path: DispensePath,
    pub raw: [f64; RAW_OUTPUTS],
}

/// Forward pass, decode, and `f = V / l`. A too-short path yields
/// [`ModelError::Degenerate`] carrying the raw outputs.
pub fn infer_path(area: &TargetArea, net: &ProcessNet, min_length_mm: f64) -> Result<InferredPath, ModelError> {
    if area.grid() != net.grid() {
        return Err(ModelError::Incompatible(format!(
            "area grid {} does not match the network grid {}",
            area.grid(),
            net.grid()
        )));
    }
    let raw = net.raw_outputs(area.mask())?;
    let degenerate = |source| ModelError::Degenerate {
        source,
        raw: Box::new(raw),
    };
    let poly = decode_path(&raw).map_err(degenerate)?;
    let path = DispensePath::for_area(poly, area, min_length_mm).map_err(degenerate)?;
    Ok(InferredPath { path, raw })
}

/// Settings for [`refine_path`].
#[derive(Debug, Clone, PartialEq)]
pub struct RefineOptions {
    pub steps: usize,
    pub learning_rate: f64,
    /// Oracle scoring interval in steps; the final iterate is always scored.
    pub oracle_every: usize,
    pub flow: FlowConfig,
    pub weights: ObjectiveWeights,
    pub penalty_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub path: DispensePath,
    pub report: QualityReport,
    pub start_report: QualityReport,
    /// Step whose iterate was kept; 0 means the start.
    pub best_step: usize,
}

/// Gradient descent (Adam) on the raw coordinates of `start` through the
/// frozen quality model. Iterates are scored with the oracle and only a
/// strict improvement replaces the current best, so the result never scores
/// worse than `start`.
pub fn refine_path(
    area: &TargetArea,
    start: &DispensePath,
    quality: &QualityNet,
    opts: &RefineOptions,
) -> Result<Refinement, ModelError> {
    let score = |p: &DispensePath| evaluate(p, area, &opts.flow, &opts.weights, opts.penalty_max);
    let start_report = score(start)?;
    let mut best = Refinement {
        path: *start,
        report: start_report,
        start_report,
        best_step: 0,
    };
    if opts.steps == 0 {
        return Ok(best);
    }
    let raw0: Vec<f32> = start.polyline().coords().iter().map(|&c| logit(c) as f32).collect();
    let mut params = [Param {
        name: "refine.raw".into(),
        tensor: Tensor::new(vec![1, RAW_OUTPUTS], raw0)?.with_requires_grad(true),
    }];
    let mut adam = AdamState::new(opts.learning_rate as f32);
    let every = opts.oracle_every.max(1);
    for step in 1..=opts.steps {
        let mut g = Graph::new();
        let raw = g.param(&params[0].tensor);
        let pred = quality.predict(&mut g, &[area.mask()], raw)?;
        g.backward(pred.objective)?;
        let grad = g
            .grad(raw)
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; RAW_OUTPUTS]);
        params[0].tensor.zero_grad();
        params[0].tensor.accumulate_grad(&grad)?;
        adam.step(&mut params)?;
        if step % every != 0 && step != opts.steps {
            continue;
        }
        let raw: Vec<f64> = params[0].tensor.data().iter().map(|&v| v as f64).collect();
        let Ok(poly) = decode_path(&raw) else { continue };
        let Ok(path) = DispensePath::for_area(poly, area, opts.flow.min_path_length_mm) else {
            continue;
        };
        let report = score(&path)?;
        if report.objective < best.report.objective {
            best.path = path;
            best.report = report;
            best.best_step = step;
        }
    }
    Ok(best)
}
