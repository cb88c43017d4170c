use std::fs;
use std::path::{Path, PathBuf};

use dispenseforge_tensor::{load_weights, save_weights, Sequential};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{flow_layers, process_layers, void_layers, Manifest, ModelError, ModelKind, ProcessNet, QualityNet};
use crate::config::Config;
use crate::geometry::GridSpec;

/// `<weights>.manifest`.
pub fn manifest_path(weights: &Path) -> PathBuf {
    let mut p = weights.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the weights file and its manifest.
pub fn save_model(weights: &Path, net: &Sequential, manifest: &Manifest) -> Result<(), ModelError> {
    fs::write(weights, save_weights(net.params())).map_err(io_err(weights))?;
    let m = manifest_path(weights);
    fs::write(&m, manifest.to_text()).map_err(io_err(&m))
}

/// Loads weights of `kind` after checking the manifest against `grid`.
pub fn load_model(weights: &Path, kind: ModelKind, grid: &GridSpec) -> Result<(Sequential, Manifest), ModelError> {
    let m = manifest_path(weights);
    for p in [weights, m.as_path()] {
        if !p.exists() {
            return Err(ModelError::MissingArtifact {
                path: p.to_path_buf(),
                kind,
            });
        }
    }
    let manifest = Manifest::parse(&fs::read_to_string(&m).map_err(io_err(&m))?)?;
    let layers = match kind {
        ModelKind::Flow => flow_layers(),
        ModelKind::Void => void_layers(grid),
        ModelKind::Process => process_layers(grid),
    };
    // initial values are overwritten below
    let mut net = Sequential::new(kind.name(), layers, &mut ChaCha8Rng::seed_from_u64(0))?;
    manifest.check(kind, &net, grid)?;
    let bytes = fs::read(weights).map_err(io_err(weights))?;
    load_weights(&bytes, net.params_mut())?;
    Ok((net, manifest))
}

pub fn load_process(weights: &Path, cfg: &Config) -> Result<(ProcessNet, Manifest), ModelError> {
    let grid = cfg.grid()?;
    let (net, manifest) = load_model(weights, ModelKind::Process, &grid)?;
    Ok((ProcessNet::from_net(grid, net)?, manifest))
}

/// Loads and freezes the quality model at the configured initial sharpness.
pub fn load_quality(flow: &Path, void: &Path, cfg: &Config) -> Result<QualityNet, ModelError> {
    let grid = cfg.grid()?;
    let (flow, _) = load_model(flow, ModelKind::Flow, &grid)?;
    let (void, _) = load_model(void, ModelKind::Void, &grid)?;
    let mut q = QualityNet::new(grid, cfg.sigma_cells, flow, void, cfg.objective_weights())?;
    q.freeze();
    Ok(q)
}
