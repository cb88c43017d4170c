use std::fmt;
use std::str::FromStr;

use dispenseforge_tensor::Sequential;

use super::ModelError;
use crate::config::Config;
use crate::geometry::GridSpec;
use crate::quality::ObjectiveWeights;

const MAGIC: &str = "dispenseforge-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Flow,
    Void,
    Process,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Flow => "flow",
            ModelKind::Void => "void",
            ModelKind::Process => "process",
        }
    }

    /// CLI subcommand that produces this kind of weights.
    pub fn producer(self) -> &'static str {
        match self {
            ModelKind::Flow => "pretrain-flow",
            ModelKind::Void => "pretrain-void",
            ModelKind::Process => "train-process",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "flow" => Ok(ModelKind::Flow),
            "void" => Ok(ModelKind::Void),
            "process" => Ok(ModelKind::Process),
            _ => Err(ModelError::Incompatible(format!("unknown model kind `{s}`"))),
        }
    }
}

/// Text sidecar stored next to a weights file so loaders can check the
/// weights match the configured grid, schedule and objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub kind: ModelKind,
    pub architecture: String,
    pub grid: GridSpec,
    pub parameters: usize,
    pub sigma_cells: f64,
    pub sigma_decay: f64,
    pub sigma_decay_every: usize,
    pub sigma_min: f64,
    pub weights: ObjectiveWeights,
    /// Free-form `key=value` lines (metrics, hashes), kept in order.
    pub extra: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(kind: ModelKind, net: &Sequential, cfg: &Config) -> Result<Self, ModelError> {
        Ok(Self {
            kind,
            architecture: net.architecture(),
            grid: cfg.grid()?,
            parameters: net.parameter_count(),
            sigma_cells: cfg.sigma_cells,
            sigma_decay: cfg.sigma_decay,
            sigma_decay_every: cfg.sigma_decay_every,
            sigma_min: cfg.sigma_min,
            weights: cfg.objective_weights(),
            extra: Vec::new(),
        })
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.extra.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let w = &self.weights;
        let mut s = format!(
            "{MAGIC}\nkind={}\narchitecture={}\ngrid={}x{}\ncell_size_mm={}\ngap_height_mm={}\nparameters={}\n\
             sigma_cells={}\nsigma_decay={}\nsigma_decay_every={}\nsigma_min={}\n\
             weight_coverage={}\nweight_overflow={}\nweight_void={}\n",
            self.kind,
            self.architecture,
            g.width_cells(),
            g.height_cells(),
            g.cell_size(),
            g.gap_height(),
            self.parameters,
            self.sigma_cells,
            self.sigma_decay,
            self.sigma_decay_every,
            self.sigma_min,
            w.coverage,
            w.overflow,
            w.void,
        );
        for (k, v) in &self.extra {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::Incompatible(format!("manifest: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("missing header".into()));
        }
        let mut fields: Vec<(&str, &str)> = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            fields.push((k, v));
        }
        let take = |key: &str| -> Result<&str, ModelError> {
            fields
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| bad(format!("missing `{key}`")))
        };
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ModelError> {
            v.parse()
                .map_err(|_| ModelError::Incompatible(format!("manifest: invalid `{key}` value `{v}`")))
        }
        let (gw, gh) = take("grid")?
            .split_once('x')
            .ok_or_else(|| bad("grid must be WxH".into()))?;
        let grid = GridSpec::new(
            num("grid", gw)?,
            num("grid", gh)?,
            num("cell_size_mm", take("cell_size_mm")?)?,
            num("gap_height_mm", take("gap_height_mm")?)?,
        )?;
        const KNOWN: &[&str] = &[
            "kind",
            "architecture",
            "grid",
            "cell_size_mm",
            "gap_height_mm",
            "parameters",
            "sigma_cells",
            "sigma_decay",
            "sigma_decay_every",
            "sigma_min",
            "weight_coverage",
            "weight_overflow",
            "weight_void",
        ];
        Ok(Self {
            kind: take("kind")?.parse()?,
            architecture: take("architecture")?.to_string(),
            grid,
            parameters: num("parameters", take("parameters")?)?,
            sigma_cells: num("sigma_cells", take("sigma_cells")?)?,
            sigma_decay: num("sigma_decay", take("sigma_decay")?)?,
            sigma_decay_every: num("sigma_decay_every", take("sigma_decay_every")?)?,
            sigma_min: num("sigma_min", take("sigma_min")?)?,
            weights: ObjectiveWeights {
                coverage: num("weight_coverage", take("weight_coverage")?)?,
                overflow: num("weight_overflow", take("weight_overflow")?)?,
                void: num("weight_void", take("weight_void")?)?,
            },
            extra: fields
                .iter()
                .filter(|(k, _)| !KNOWN.contains(k))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        })
    }

    /// Errors unless this manifest describes `net` as a `kind` model on `grid`.
    pub fn check(&self, kind: ModelKind, net: &Sequential, grid: &GridSpec) -> Result<(), ModelError> {
        if self.kind != kind {
            return Err(ModelError::Incompatible(format!(
                "expected {kind} weights, manifest says {}",
                self.kind
            )));
        }
        if &self.grid != grid {
            return Err(ModelError::Incompatible(format!(
                "weights were trained on grid {}, configured grid is {grid}",
                self.grid
            )));
        }
        if self.architecture != net.architecture() || self.parameters != net.parameter_count() {
            return Err(ModelError::Incompatible(format!(
                "architecture `{}` does not match `{}`",
                self.architecture,
                net.architecture()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::new_flow_net;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_and_checks() {
        let cfg = Config::default();
        let net = new_flow_net(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let m = Manifest::new(ModelKind::Flow, &net, &cfg)
            .unwrap()
            .with("val_iou", 0.91)
            .with("epochs", 3);
        let back = Manifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.get("val_iou"), Some("0.91"));
        back.check(ModelKind::Flow, &net, &cfg.grid().unwrap()).unwrap();
        assert!(back.check(ModelKind::Void, &net, &cfg.grid().unwrap()).is_err());
        let small = GridSpec::new(32, 32, 1.0, 1.0).unwrap();
        assert!(back.check(ModelKind::Flow, &net, &small).is_err());
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(Manifest::parse("hello").is_err());
        assert!(Manifest::parse(&format!("{MAGIC}\nkind=flow\n")).is_err());
        assert!(Manifest::parse(&format!("{MAGIC}\nno equals sign\n")).is_err());
    }
}
