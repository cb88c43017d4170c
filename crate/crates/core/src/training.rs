//! The two training phases (supervised surrogate pretraining, label-free
//! process training through the frozen quality model) and the held-out
//! evaluation suite.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use dispenseforge_tensor::{AdamState, Graph, Sequential, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::Config;
use crate::datagen::{Dataset, PretrainSample, Split};
use crate::flow::{self, FlowConfig, FlowError};
use crate::geometry::{DispensePath, GeometryError, GridSpec, TargetArea, RAW_OUTPUTS};
use crate::models::{
    infer_path, mask_batch, new_flow_net, new_void_net, ModelError, ProcessNet, QualityNet, VOID_FRACTION,
    VOID_PROBABILITY,
};
use crate::parallel;
use crate::quality::{self, QualityReport};
use crate::raster::Mask;
use crate::render::overlay_svg;

/// Largest batch used for forward-only validation passes.
const EVAL_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("dataset has no {0} samples")]
    DatasetEmpty(&'static str),
    #[error("all {count} training void labels are {label}; adjust the path sampling settings")]
    DegenerateLabels { count: usize, label: bool },
    #[error("quality model parameters are trainable; freeze them before process training")]
    NotFrozen,
    #[error("quality model parameters changed during training (hash {before} became {after})")]
    FrozenViolation { before: String, after: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One line of the training log. Missing values print as `NA`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: Option<f64>,
    pub oracle_j: Option<f64>,
    pub coverage_mean: Option<f64>,
    pub void_rate: Option<f64>,
    pub ms_per_item: Option<f64>,
}

impl LogRow {
    fn new(epoch: usize, split: &'static str) -> Self {
        Self {
            epoch,
            split,
            loss: None,
            oracle_j: None,
            coverage_mean: None,
            void_rate: None,
            ms_per_item: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch,split,loss,oracle_J,coverage_mean,void_rate,ms_per_item";

    pub fn to_csv(&self) -> String {
        let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.split,
                na(r.loss),
                na(r.oracle_j),
                na(r.coverage_mean),
                na(r.void_rate),
                na(r.ms_per_item)
            );
        }
        s
    }

    pub fn last(&self, split: &str) -> Option<&LogRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

/// Result of a surrogate pretraining run; `net` is the best-validation
/// checkpoint.
#[derive(Debug, Clone)]
pub struct SurrogateTraining {
    pub net: Sequential,
    pub log: TrainingLog,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Mean IoU (flow) or accuracy (void) of the checkpoint on validation.
    pub val_metric: f64,
    /// Final-epoch training loss.
    pub final_train_loss: f64,
}

fn split_samples(ds: &Dataset, split: Split) -> Vec<&PretrainSample> {
    ds.split(split).map(|(_, s)| s).collect()
}

/// Training and validation samples; validation falls back to the training
/// samples when the dataset is too small to have a validation split.
fn train_val(ds: &Dataset) -> Result<(Vec<&PretrainSample>, Vec<&PretrainSample>), TrainingError> {
    let train = split_samples(ds, Split::Train);
    if train.is_empty() {
        return Err(TrainingError::DatasetEmpty("training"));
    }
    let val = split_samples(ds, Split::Validation);
    let val = if val.is_empty() { train.clone() } else { val };
    Ok((train, val))
}

fn timing(cfg: &Config, start: Instant, items: usize) -> Option<f64> {
    cfg.log_wall_time
        .then(|| start.elapsed().as_secs_f64() * 1e3 / items.max(1) as f64)
}

/// Builds the flow-net input for stored samples at sharpness `sigma`.
fn flow_batch(
    grid: &GridSpec,
    g: &mut Graph,
    batch: &[&PretrainSample],
    sigma: f64,
) -> Result<dispenseforge_tensor::Var, TrainingError> {
    let coords: Vec<f32> = batch.iter().flat_map(|s| s.coords).collect();
    let coords = g.input(vec![batch.len(), RAW_OUTPUTS], coords)?;
    let masks: Vec<&Mask> = batch.iter().map(|s| &s.area).collect();
    let volumes = QualityNet::volumes(grid, &masks);
    Ok(QualityNet::flow_input(grid, g, coords, &volumes, sigma)?)
}

fn footprint_targets(batch: &[&PretrainSample]) -> Vec<f32> {
    batch.iter().flat_map(|s| s.footprint.to_f32()).collect()
}

/// Validation loss and mean IoU (prediction thresholded at 0.5) of a flow
/// net, averaged over the two ends of the sharpness schedule.
pub fn validate_flow(
    net: &Sequential,
    val: &[&PretrainSample],
    grid: &GridSpec,
    cfg: &Config,
) -> Result<(f64, f64), TrainingError> {
    let sigmas = [cfg.sigma_cells, cfg.sigma_min];
    let (mut loss, mut iou) = (0.0, 0.0);
    for &sigma in &sigmas {
        for batch in val.chunks(EVAL_BATCH) {
            let mut g = Graph::new();
            let x = flow_batch(grid, &mut g, batch, sigma)?;
            let out = net.forward(&mut g, x)?.output;
            let l = g.bce(out, footprint_targets(batch))?;
            loss += g.value(l)[0] as f64 * batch.len() as f64;
            let per = grid.cells();
            for (s, pred) in batch.iter().zip(g.value(out).chunks(per)) {
                let (mut inter, mut union) = (0usize, 0usize);
                for (&p, &t) in pred.iter().zip(s.footprint.cells()) {
                    let p = p > 0.5;
                    inter += (p && t) as usize;
                    union += (p || t) as usize;
                }
                iou += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            }
        }
    }
    let n = (val.len() * sigmas.len()) as f64;
    Ok((loss / n, iou / n))
}

/// Trains the flow surrogate with per-cell BCE against oracle footprints.
/// Every batch draws its rasterizer sharpness uniformly from
/// `[sigma_min, sigma_cells]` so the net works along the whole schedule.
pub fn pretrain_flow(ds: &Dataset, cfg: &Config, epochs: usize, seed: u64) -> Result<SurrogateTraining, TrainingError> {
    let grid = ds.grid;
    let (train, val) = train_val(ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = new_flow_net(&mut rng)?;
    let mut adam = AdamState::new(cfg.lr_surrogate as f32);
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, f64, usize, Sequential)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_train_loss = f64::NAN;
    for epoch in 1..=epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size_surrogate) {
            let batch: Vec<&PretrainSample> = idx.iter().map(|&i| train[i]).collect();
            let sigma = rng.gen_range(cfg.sigma_min..=cfg.sigma_cells);
            let mut g = Graph::new();
            let x = flow_batch(&grid, &mut g, &batch, sigma)?;
            let pass = net.forward(&mut g, x)?;
            let loss = g.bce(pass.output, footprint_targets(&batch))?;
            total += g.value(loss)[0] as f64 * batch.len() as f64;
            g.backward(loss)?;
            net.accumulate_grads(&g, &pass.param_vars)?;
            adam.step(net.params_mut())?;
            net.zero_grad();
        }
        final_train_loss = total / train.len() as f64;
        let mut row = LogRow::new(epoch, "train");
        row.loss = Some(final_train_loss);
        row.ms_per_item = timing(cfg, start, train.len());
        log.rows.push(row);

        let (val_loss, iou) = validate_flow(&net, &val, &grid, cfg)?;
        let mut row = LogRow::new(epoch, "val");
        row.loss = Some(val_loss);
        log.rows.push(row);
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, iou, epoch, net.clone()));
        }
    }
    let (best_val_loss, val_metric, best_epoch, net) = best.ok_or(TrainingError::DatasetEmpty("epochs"))?;
    Ok(SurrogateTraining {
        net,
        log,
        best_epoch,
        best_val_loss,
        val_metric,
        final_train_loss,
    })
}

fn void_targets(batch: &[&PretrainSample]) -> (Vec<f32>, Vec<f32>) {
    let labels = batch.iter().map(|s| s.has_void() as u8 as f32).collect();
    let fractions = batch.iter().map(|s| s.void_fraction()).collect();
    (labels, fractions)
}

/// Loss `BCE(probability, has_void) + w · SE(fraction, void_fraction)`.
fn void_loss(
    g: &mut Graph,
    out: dispenseforge_tensor::Var,
    batch: &[&PretrainSample],
    fraction_weight: f64,
) -> Result<dispenseforge_tensor::Var, TrainingError> {
    let (labels, fractions) = void_targets(batch);
    let prob = g.select_column(out, VOID_PROBABILITY)?;
    let frac = g.select_column(out, VOID_FRACTION)?;
    let bce = g.bce(prob, labels)?;
    let se = g.squared_error(frac, fractions)?;
    let se = g.scale(se, fraction_weight as f32);
    Ok(g.add(bce, se)?)
}

/// Validation loss and classification accuracy of a void net.
pub fn validate_void(net: &Sequential, val: &[&PretrainSample], cfg: &Config) -> Result<(f64, f64), TrainingError> {
    let (mut loss, mut correct) = (0.0, 0usize);
    for batch in val.chunks(EVAL_BATCH) {
        let masks: Vec<&Mask> = batch.iter().map(|s| &s.footprint).collect();
        let (shape, data) = mask_batch(&masks);
        let mut g = Graph::new();
        let x = g.input(shape, data)?;
        let out = net.forward(&mut g, x)?.output;
        let l = void_loss(&mut g, out, batch, cfg.void_fraction_loss_weight)?;
        loss += g.value(l)[0] as f64 * batch.len() as f64;
        for (s, o) in batch.iter().zip(g.value(out).chunks(2)) {
            correct += ((o[VOID_PROBABILITY] > 0.5) == s.has_void()) as usize;
        }
    }
    Ok((loss / val.len() as f64, correct as f64 / val.len() as f64))
}

/// Trains the void surrogate on oracle footprints.
pub fn pretrain_void(ds: &Dataset, cfg: &Config, epochs: usize, seed: u64) -> Result<SurrogateTraining, TrainingError> {
    let grid = ds.grid;
    let (train, val) = train_val(ds)?;
    let positives = train.iter().filter(|s| s.has_void()).count();
    if positives == 0 || positives == train.len() {
        return Err(TrainingError::DegenerateLabels {
            count: train.len(),
            label: positives > 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = new_void_net(&grid, &mut rng)?;
    let mut adam = AdamState::new(cfg.lr_surrogate as f32);
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, f64, usize, Sequential)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_train_loss = f64::NAN;
    let symmetries = if grid.width_cells() == grid.height_cells() {
        8
    } else {
        4
    };
    for epoch in 1..=epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size_surrogate) {
            let batch: Vec<&PretrainSample> = idx.iter().map(|&i| train[i]).collect();
            // voids are invariant under the square's symmetries; a random one
            // per sample keeps the dense layer from memorizing footprints
            let masks: Vec<Mask> = batch
                .iter()
                .map(|s| s.footprint.dihedral(rng.gen_range(0..symmetries)))
                .collect();
            let (shape, data) = mask_batch(&masks.iter().collect::<Vec<_>>());
            let mut g = Graph::new();
            let x = g.input(shape, data)?;
            let pass = net.forward(&mut g, x)?;
            let loss = void_loss(&mut g, pass.output, &batch, cfg.void_fraction_loss_weight)?;
            total += g.value(loss)[0] as f64 * batch.len() as f64;
            g.backward(loss)?;
            net.accumulate_grads(&g, &pass.param_vars)?;
            adam.step(net.params_mut())?;
            net.zero_grad();
        }
        final_train_loss = total / train.len() as f64;
        let mut row = LogRow::new(epoch, "train");
        row.loss = Some(final_train_loss);
        row.ms_per_item = timing(cfg, start, train.len());
        log.rows.push(row);

        let (val_loss, acc) = validate_void(&net, &val, cfg)?;
        let mut row = LogRow::new(epoch, "val");
        row.loss = Some(val_loss);
        log.rows.push(row);
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, acc, epoch, net.clone()));
        }
    }
    let (best_val_loss, val_metric, best_epoch, net) = best.ok_or(TrainingError::DatasetEmpty("epochs"))?;
    Ok(SurrogateTraining {
        net,
        log,
        best_epoch,
        best_val_loss,
        val_metric,
        final_train_loss,
    })
}

/// Target areas of one dataset split, in record order.
pub fn split_areas(ds: &Dataset, split: Split) -> Result<Vec<(usize, TargetArea)>, TrainingError> {
    ds.split(split).map(|(i, s)| Ok((i, s.target(&ds.grid)?))).collect()
}

/// Oracle scores of a process net over a fixed set of areas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationSummary {
    pub oracle_j: f64,
    pub surrogate_j: f64,
    /// Mean `|Ĵ - J|`.
    pub gap: f64,
    pub coverage_mean: f64,
    pub overflow_mean: f64,
    /// Fraction of areas whose footprint encloses at least one void.
    pub void_rate: f64,
    pub degenerate: usize,
}

/// Infers and oracle-scores every area. Degenerate outputs score the
/// configured penalty.
pub fn validate_process(
    net: &ProcessNet,
    quality: &QualityNet,
    areas: &[TargetArea],
    cfg: &Config,
) -> Result<ValidationSummary, TrainingError> {
    let flow_cfg = FlowConfig::from(cfg);
    let weights = cfg.objective_weights();
    let scored = parallel::map_indexed(
        areas.len(),
        cfg.threads,
        |i| -> Result<(QualityReport, f64, bool), TrainingError> {
            let area = &areas[i];
            match infer_path(area, net, cfg.min_path_length_mm) {
                Ok(inf) => {
                    let report = quality::evaluate(&inf.path, area, &flow_cfg, &weights, cfg.penalty_max)?;
                    let predicted = quality.predict_quality(area.mask(), &inf.raw)?;
                    Ok((report, predicted, false))
                }
                Err(ModelError::Degenerate { raw, .. }) => {
                    let predicted = quality.predict_quality(area.mask(), &raw)?;
                    Ok((QualityReport::penalty(cfg.penalty_max), predicted, true))
                }
                Err(e) => Err(e.into()),
            }
        },
    );
    let n = areas.len().max(1) as f64;
    let mut s = ValidationSummary {
        oracle_j: 0.0,
        surrogate_j: 0.0,
        gap: 0.0,
        coverage_mean: 0.0,
        overflow_mean: 0.0,
        void_rate: 0.0,
        degenerate: 0,
    };
    for r in scored {
        let (report, predicted, degenerate) = r?;
        s.oracle_j += report.objective / n;
        s.surrogate_j += predicted / n;
        s.gap += (predicted - report.objective).abs() / n;
        s.coverage_mean += report.coverage / n;
        s.overflow_mean += report.overflow / n;
        s.void_rate += (!report.is_void_free()) as u8 as f64 / n;
        s.degenerate += degenerate as usize;
    }
    Ok(s)
}

/// Result of [`train_process`]; `net` is the best-by-oracle checkpoint.
#[derive(Debug, Clone)]
pub struct ProcessTraining {
    pub net: ProcessNet,
    pub log: TrainingLog,
    pub best_epoch: usize,
    pub best: ValidationSummary,
    pub epochs_run: usize,
    pub quality_hash: String,
    pub final_train_loss: f64,
}

/// Label-free training: minimizes the mean predicted objective `Ĵ` of the
/// process net's paths through the frozen quality model. Validation with
/// the oracle runs every `validate_every` epochs and after the last epoch;
/// training stops early after `patience` epochs without improvement.
pub fn train_process(
    train_areas: &[TargetArea],
    val_areas: &[TargetArea],
    quality: &QualityNet,
    cfg: &Config,
    epochs: usize,
    seed: u64,
) -> Result<ProcessTraining, TrainingError> {
    if train_areas.is_empty() {
        return Err(TrainingError::DatasetEmpty("training"));
    }
    let val_areas = if val_areas.is_empty() { train_areas } else { val_areas };
    if !quality.is_frozen() {
        return Err(TrainingError::NotFrozen);
    }
    let grid = *quality.grid();
    let quality_hash = quality.param_hash();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = ProcessNet::new(grid, &mut rng)?;
    let mut adam = AdamState::new(cfg.lr_process as f32);
    let mut log = TrainingLog::default();
    let mut best: Option<(ValidationSummary, usize, ProcessNet)> = None;
    let mut order: Vec<usize> = (0..train_areas.len()).collect();
    let mut q = quality.clone();
    let mut final_train_loss = f64::NAN;
    let mut epochs_run = 0;
    for epoch in 1..=epochs {
        epochs_run = epoch;
        q.sigma_cells = cfg.sigma_at_epoch(epoch - 1);
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let masks: Vec<&Mask> = idx.iter().map(|&i| train_areas[i].mask()).collect();
            let (shape, data) = mask_batch(&masks);
            let mut g = Graph::new();
            let x = g.input(shape, data)?;
            let pass = net.net.forward(&mut g, x)?;
            let pred = q.predict(&mut g, &masks, pass.output)?;
            let loss = g.mean(pred.objective);
            total += g.value(loss)[0] as f64 * idx.len() as f64;
            g.backward(loss)?;
            net.net.accumulate_grads(&g, &pass.param_vars)?;
            adam.step(net.net.params_mut())?;
            net.net.zero_grad();
        }
        let after = q.param_hash();
        if after != quality_hash {
            return Err(TrainingError::FrozenViolation {
                before: quality_hash,
                after,
            });
        }
        final_train_loss = total / train_areas.len() as f64;
        let mut row = LogRow::new(epoch, "train");
        row.loss = Some(final_train_loss);
        row.ms_per_item = timing(cfg, start, train_areas.len());
        log.rows.push(row);

        if epoch % cfg.validate_every.max(1) != 0 && epoch != epochs {
            continue;
        }
        let start = Instant::now();
        let summary = validate_process(&net, &q, val_areas, cfg)?;
        let mut row = LogRow::new(epoch, "val");
        row.loss = Some(summary.surrogate_j);
        row.oracle_j = Some(summary.oracle_j);
        row.coverage_mean = Some(summary.coverage_mean);
        row.void_rate = Some(summary.void_rate);
        row.ms_per_item = timing(cfg, start, val_areas.len());
        log.rows.push(row);
        if best.as_ref().is_none_or(|b| summary.oracle_j < b.0.oracle_j) {
            best = Some((summary, epoch, net.clone()));
        }
        let (b, best_epoch, _) = best.as_ref().expect("set above");
        let mut row = LogRow::new(epoch, "best");
        row.oracle_j = Some(b.oracle_j);
        row.coverage_mean = Some(b.coverage_mean);
        row.void_rate = Some(b.void_rate);
        log.rows.push(row);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (best, best_epoch, net) = best.ok_or(TrainingError::DatasetEmpty("epochs"))?;
    Ok(ProcessTraining {
        net,
        log,
        best_epoch,
        best,
        epochs_run,
        quality_hash,
        final_train_loss,
    })
}

/// One held-out area in an evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub report: QualityReport,
    pub infer_ms: f64,
    /// `None` when inference produced a degenerate path.
    pub path: Option<DispensePath>,
    pub footprint: Option<Mask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSuite {
    pub grid: GridSpec,
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalAggregate {
    pub coverage: f64,
    pub overflow: f64,
    pub void_count: f64,
    pub objective: f64,
    pub infer_ms: f64,
    /// Fraction of areas without voids.
    pub void_free_rate: f64,
    pub max_infer_ms: f64,
}

impl EvalSuite {
    pub const HEADER: &'static str = "area_id,coverage,overflow,void_count,objective,infer_ms";

    pub fn aggregate(&self) -> Option<EvalAggregate> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let mean = |f: &dyn Fn(&EvalRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Some(EvalAggregate {
            coverage: mean(&|r| r.report.coverage),
            overflow: mean(&|r| r.report.overflow),
            void_count: mean(&|r| r.report.void_count as f64),
            objective: mean(&|r| r.report.objective),
            infer_ms: mean(&|r| r.infer_ms),
            void_free_rate: mean(&|r| r.report.is_void_free() as u8 as f64),
            max_infer_ms: self.rows.iter().map(|r| r.infer_ms).fold(0.0, f64::max),
        })
    }

    /// Per-area rows followed by a `mean` row. Timing prints `NA` unless
    /// `with_timing`, keeping the report byte-stable across runs.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let ms = |v: f64| if with_timing { v.to_string() } else { "NA".into() };
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let q = &r.report;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.id,
                q.coverage,
                q.overflow,
                q.void_count,
                q.objective,
                ms(r.infer_ms)
            );
        }
        if let Some(a) = self.aggregate() {
            let _ = writeln!(
                s,
                "mean,{},{},{},{},{}",
                a.coverage,
                a.overflow,
                a.void_count,
                a.objective,
                ms(a.infer_ms)
            );
        }
        s
    }

    pub fn timings_csv(&self) -> String {
        let mut s = String::from("area_id,infer_ms\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{}", r.id, r.infer_ms);
        }
        s
    }

    /// Writes `report.csv`, `timings.csv` and per area a mask and footprint
    /// PGM, the path file and an SVG overlay.
    pub fn write(&self, dir: &Path, targets: &[(String, TargetArea)], with_timing: bool) -> Result<(), TrainingError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv(with_timing))?;
        fs::write(dir.join("timings.csv"), self.timings_csv())?;
        for (row, (_, area)) in self.rows.iter().zip(targets) {
            fs::write(dir.join(format!("{}_mask.pgm", row.id)), area.mask().to_pgm())?;
            if let Some(fp) = &row.footprint {
                fs::write(dir.join(format!("{}_footprint.pgm", row.id)), fp.to_pgm())?;
            }
            if let Some(p) = &row.path {
                fs::write(dir.join(format!("{}.path", row.id)), p.to_file_string(&self.grid))?;
            }
            let svg = overlay_svg(&self.grid, area.mask(), row.footprint.as_ref(), row.path.as_ref());
            fs::write(dir.join(format!("{}.svg", row.id)), svg)?;
        }
        Ok(())
    }
}

/// Runs inference (timed, one area at a time) and oracle scoring (in
/// parallel) over labelled areas.
pub fn evaluate_suite(
    net: &ProcessNet,
    areas: &[(String, TargetArea)],
    cfg: &Config,
) -> Result<EvalSuite, TrainingError> {
    let flow_cfg = FlowConfig::from(cfg);
    let weights = cfg.objective_weights();
    let mut inferred = Vec::with_capacity(areas.len());
    for (_, area) in areas {
        let start = Instant::now();
        let result = infer_path(area, net, cfg.min_path_length_mm);
        let ms = start.elapsed().as_secs_f64() * 1e3;
        match result {
            Ok(inf) => inferred.push((Some(inf.path), ms)),
            Err(ModelError::Degenerate { .. }) => inferred.push((None, ms)),
            Err(e) => return Err(e.into()),
        }
    }
    let scored = parallel::map_indexed(
        areas.len(),
        cfg.threads,
        |i| -> Result<(QualityReport, Option<Mask>), TrainingError> {
            let area = &areas[i].1;
            let Some(path) = &inferred[i].0 else {
                return Ok((QualityReport::penalty(cfg.penalty_max), None));
            };
            match flow::simulate(path, area, &flow_cfg) {
                Ok(state) => Ok((
                    quality::assess(state.footprint(), area, &weights),
                    Some(state.footprint().clone()),
                )),
                Err(FlowError::NoConvergence { .. }) => Ok((QualityReport::penalty(cfg.penalty_max), None)),
                Err(e) => Err(e.into()),
            }
        },
    );
    let mut rows = Vec::with_capacity(areas.len());
    for (((id, _), (path, ms)), s) in areas.iter().zip(inferred).zip(scored) {
        let (report, footprint) = s?;
        rows.push(EvalRow {
            id: id.clone(),
            report,
            infer_ms: ms,
            path,
            footprint,
        });
    }
    Ok(EvalSuite {
        grid: cfg.grid()?,
        rows,
    })
}
