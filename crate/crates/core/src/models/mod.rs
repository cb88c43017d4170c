//! The networks: the process net that plans paths, and the frozen quality
//! model (soft rasterizer, flow surrogate, void surrogate) it is trained
//! through.

mod manifest;
mod process;
mod quality_net;
pub mod soft_raster;
mod store;

use std::path::PathBuf;

use dispenseforge_tensor::{Activation, LayerSpec, Sequential, TensorError};
use rand::Rng;
use thiserror::Error;

use crate::flow::FlowError;
use crate::geometry::{GeometryError, GridSpec, RAW_OUTPUTS};
use crate::raster::Mask;

pub use manifest::{Manifest, ModelKind};
pub use process::{infer_path, refine_path, InferredPath, ProcessNet, RefineOptions, Refinement};
pub use quality_net::{QualityNet, QualityPrediction, DEPOSIT_SCALE, FEED_SCALE};
pub use soft_raster::{PathLength, SoftRasterizer};
pub use store::{load_model, load_process, load_quality, manifest_path, save_model};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("degenerate network output: {source}")]
    Degenerate {
        #[source]
        source: GeometryError,
        raw: Box<[f64; RAW_OUTPUTS]>,
    },
    #[error("missing {kind} weights `{}`; run `{}` first", path.display(), kind.producer())]
    MissingArtifact { path: PathBuf, kind: ModelKind },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("incompatible model: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

fn relu() -> LayerSpec {
    LayerSpec::Activation(Activation::Relu)
}

fn conv(in_channels: usize, filters: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels,
        filters,
        kernel,
    }
}

/// conv 32@3 → conv 8@3 → maxpool → conv 1@5 → flatten → dense 64 → dense 256 → dense 12.
pub fn process_layers(grid: &GridSpec) -> Vec<LayerSpec> {
    let flat = (grid.width_cells() / 2) * (grid.height_cells() / 2);
    vec![
        conv(1, 32, 3),
        relu(),
        conv(32, 8, 3),
        relu(),
        LayerSpec::MaxPool2d,
        conv(8, 1, 5),
        relu(),
        LayerSpec::Flatten,
        LayerSpec::Dense {
            inputs: flat,
            outputs: 64,
        },
        relu(),
        LayerSpec::Dense {
            inputs: 64,
            outputs: 256,
        },
        relu(),
        LayerSpec::Dense {
            inputs: 256,
            outputs: RAW_OUTPUTS,
        },
    ]
}

/// Encoder 8-16-16-8 with two pooling stages, two upsampling convs back to
/// full resolution, 1×1 logistic head. Input: deposit and feed channels.
pub fn flow_layers() -> Vec<LayerSpec> {
    vec![
        conv(2, 8, 3),
        relu(),
        LayerSpec::MaxPool2d,
        conv(8, 16, 3),
        relu(),
        LayerSpec::MaxPool2d,
        conv(16, 16, 3),
        relu(),
        conv(16, 8, 3),
        relu(),
        LayerSpec::Upsample2d,
        conv(8, 8, 3),
        relu(),
        LayerSpec::Upsample2d,
        conv(8, 8, 3),
        relu(),
        conv(8, 1, 1),
        LayerSpec::Activation(Activation::Logistic),
    ]
}

/// Output column of the void net that carries the void probability.
pub const VOID_PROBABILITY: usize = 0;
/// Output column of the void net that carries the void fraction.
pub const VOID_FRACTION: usize = 1;

/// conv 8@3 → maxpool → conv 8@3 → maxpool → flatten → dense 32 → dense 2, logistic.
pub fn void_layers(grid: &GridSpec) -> Vec<LayerSpec> {
    let flat = 8 * (grid.width_cells() / 4) * (grid.height_cells() / 4);
    vec![
        conv(1, 8, 3),
        relu(),
        LayerSpec::MaxPool2d,
        conv(8, 8, 3),
        relu(),
        LayerSpec::MaxPool2d,
        LayerSpec::Flatten,
        LayerSpec::Dense {
            inputs: flat,
            outputs: 32,
        },
        relu(),
        LayerSpec::Dense { inputs: 32, outputs: 2 },
        LayerSpec::Activation(Activation::Logistic),
    ]
}

pub fn new_flow_net(rng: &mut impl Rng) -> Result<Sequential, ModelError> {
    Ok(Sequential::new("flow", flow_layers(), rng)?)
}

pub fn new_void_net(grid: &GridSpec, rng: &mut impl Rng) -> Result<Sequential, ModelError> {
    Ok(Sequential::new("void", void_layers(grid), rng)?)
}

/// Stacks masks into a `[N, 1, H, W]` batch of zeros and ones.
pub fn mask_batch(masks: &[&Mask]) -> (Vec<usize>, Vec<f32>) {
    let (w, h) = (masks[0].width(), masks[0].height());
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        data.extend(m.to_f32());
    }
    (vec![masks.len(), 1, h, w], data)
}

/// Checks that a network's layers equal the expected stack.
fn expect_layers(net: &Sequential, expected: &[LayerSpec], what: &str) -> Result<(), ModelError> {
    if net.layers() != expected {
        return Err(ModelError::Incompatible(format!(
            "{what} architecture `{}` does not match the configured grid",
            net.architecture()
        )));
    }
    Ok(())
}
