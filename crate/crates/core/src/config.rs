//! Run configuration: line-oriented `key=value` text with `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{GeometryError, GridSpec};
use crate::quality::ObjectiveWeights;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key=value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for `{key}`: {reason}")]
    InvalidValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("inconsistent configuration: {0}")]
    Inconsistent(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Every tunable of a run, with defaults mirrored in `config/default.cfg`.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub grid_width: usize,
    pub grid_height: usize,
    pub cell_size_mm: f64,
    pub gap_height_mm: f64,

    pub nozzle_radius_cells: f64,
    pub compress_tol_mm: f64,
    pub compress_max_iters: usize,
    pub occupancy_threshold: f64,

    pub weight_coverage: f64,
    pub weight_overflow: f64,
    pub weight_void: f64,
    pub penalty_max: f64,
    pub min_path_length_mm: f64,

    pub sigma_cells: f64,
    pub sigma_decay: f64,
    pub sigma_decay_every: usize,
    pub sigma_min: f64,

    pub lr_process: f64,
    pub batch_size: usize,
    pub lr_surrogate: f64,
    pub batch_size_surrogate: usize,
    pub epochs_surrogate: usize,
    pub epochs_process: usize,
    pub patience: usize,
    pub validate_every: usize,
    pub validation_areas: usize,
    pub void_fraction_loss_weight: f64,

    pub dataset_size: usize,
    pub inside_bbox_fraction: f64,
    pub area_fraction_min: f64,
    pub area_fraction_max: f64,
    pub max_notches: usize,
    pub chamfer: bool,

    pub refine_lr: f64,
    pub refine_oracle_every: usize,

    pub threads: usize,
    pub log_wall_time: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            grid_width: 64,
            grid_height: 64,
            cell_size_mm: 1.0,
            gap_height_mm: 1.0,
            nozzle_radius_cells: 1.0,
            compress_tol_mm: 1e-7,
            compress_max_iters: 50_000,
            occupancy_threshold: 0.5,
            weight_coverage: 1.0,
            weight_overflow: 1.0,
            weight_void: 4.0,
            penalty_max: 10.0,
            min_path_length_mm: 0.5,
            sigma_cells: 1.5,
            sigma_decay: 0.9,
            sigma_decay_every: 10,
            sigma_min: 0.75,
            lr_process: 0.000574,
            batch_size: 8,
            lr_surrogate: 0.001,
            batch_size_surrogate: 16,
            epochs_surrogate: 50,
            epochs_process: 100,
            patience: 15,
            validate_every: 5,
            validation_areas: 64,
            void_fraction_loss_weight: 100.0,
            dataset_size: 5000,
            inside_bbox_fraction: 0.7,
            area_fraction_min: 0.15,
            area_fraction_max: 0.70,
            max_notches: 4,
            chamfer: false,
            refine_lr: 0.05,
            refine_oracle_every: 10,
            threads: 1,
            log_wall_time: false,
        }
    }
}

enum Slot<'a> {
    Usize(&'a mut usize),
    F64(&'a mut f64),
    Bool(&'a mut bool),
}

macro_rules! config_keys {
    ($($key:ident: $kind:ident),* $(,)?) => {
        impl Config {
            /// All keys in canonical order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            fn slot(&mut self, key: &str) -> Option<Slot<'_>> {
                match key {
                    $(stringify!($key) => Some(Slot::$kind(&mut self.$key)),)*
                    _ => None,
                }
            }

            fn render_value(&self, key: &str) -> String {
                match key {
                    $(stringify!($key) => self.$key.to_string(),)*
                    _ => unreachable!("unknown key {key}"),
                }
            }
        }
    };
}

config_keys! {
    grid_width: Usize,
    grid_height: Usize,
    cell_size_mm: F64,
    gap_height_mm: F64,
    nozzle_radius_cells: F64,
    compress_tol_mm: F64,
    compress_max_iters: Usize,
    occupancy_threshold: F64,
    weight_coverage: F64,
    weight_overflow: F64,
    weight_void: F64,
    penalty_max: F64,
    min_path_length_mm: F64,
    sigma_cells: F64,
    sigma_decay: F64,
    sigma_decay_every: Usize,
    sigma_min: F64,
    lr_process: F64,
    batch_size: Usize,
    lr_surrogate: F64,
    batch_size_surrogate: Usize,
    epochs_surrogate: Usize,
    epochs_process: Usize,
    patience: Usize,
    validate_every: Usize,
    validation_areas: Usize,
    void_fraction_loss_weight: F64,
    dataset_size: Usize,
    inside_bbox_fraction: F64,
    area_fraction_min: F64,
    area_fraction_max: F64,
    max_notches: Usize,
    chamfer: Bool,
    refine_lr: F64,
    refine_oracle_every: Usize,
    threads: Usize,
    log_wall_time: Bool,
}

impl Config {
    /// Parses config text; keys not mentioned keep their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            let invalid = |reason: &str| ConfigError::InvalidValue {
                line,
                key: key.to_string(),
                value: value.to_string(),
                reason: reason.to_string(),
            };
            match cfg.slot(key) {
                None => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
                Some(Slot::Usize(s)) => *s = value.parse().map_err(|_| invalid("expected a non-negative integer"))?,
                Some(Slot::F64(s)) => {
                    let v: f64 = value.parse().map_err(|_| invalid("expected a number"))?;
                    if !v.is_finite() {
                        return Err(invalid("must be finite"));
                    }
                    *s = v;
                }
                Some(Slot::Bool(s)) => *s = value.parse().map_err(|_| invalid("expected true or false"))?,
            }
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Inconsistent(msg));
        self.grid().map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        if !self.grid_width.is_multiple_of(4) || !self.grid_height.is_multiple_of(4) {
            return bad("grid dimensions must be multiples of 4 (two 2x2 pooling stages)".into());
        }
        let positive = [
            ("nozzle_radius_cells", self.nozzle_radius_cells),
            ("compress_tol_mm", self.compress_tol_mm),
            ("sigma_cells", self.sigma_cells),
            ("sigma_min", self.sigma_min),
            ("lr_process", self.lr_process),
            ("lr_surrogate", self.lr_surrogate),
            ("refine_lr", self.refine_lr),
        ];
        for (k, v) in positive {
            if v <= 0.0 {
                return bad(format!("{k} must be positive"));
            }
        }
        for (k, v) in [
            ("weight_coverage", self.weight_coverage),
            ("weight_overflow", self.weight_overflow),
            ("weight_void", self.weight_void),
            ("penalty_max", self.penalty_max),
            ("min_path_length_mm", self.min_path_length_mm),
            ("void_fraction_loss_weight", self.void_fraction_loss_weight),
        ] {
            if v < 0.0 {
                return bad(format!("{k} must be non-negative"));
            }
        }
        for (k, v) in [
            ("occupancy_threshold", self.occupancy_threshold),
            ("inside_bbox_fraction", self.inside_bbox_fraction),
            ("sigma_decay", self.sigma_decay),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1]"));
            }
        }
        if !(0.0 < self.area_fraction_min
            && self.area_fraction_min < self.area_fraction_max
            && self.area_fraction_max <= 1.0)
        {
            return bad("need 0 < area_fraction_min < area_fraction_max <= 1".into());
        }
        for (k, v) in [
            ("compress_max_iters", self.compress_max_iters),
            ("batch_size", self.batch_size),
            ("batch_size_surrogate", self.batch_size_surrogate),
            ("sigma_decay_every", self.sigma_decay_every),
            ("validate_every", self.validate_every),
            ("refine_oracle_every", self.refine_oracle_every),
            ("threads", self.threads),
        ] {
            if v == 0 {
                return bad(format!("{k} must be at least 1"));
            }
        }
        if self.max_notches > 4 {
            return bad("max_notches must be at most 4".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec, GeometryError> {
        GridSpec::new(self.grid_width, self.grid_height, self.cell_size_mm, self.gap_height_mm)
    }

    pub fn objective_weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            coverage: self.weight_coverage,
            overflow: self.weight_overflow,
            void: self.weight_void,
        }
    }

    /// Rasterizer sharpness for a process-training epoch.
    pub fn sigma_at_epoch(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.sigma_decay_every) as i32;
        (self.sigma_cells * self.sigma_decay.powi(steps)).max(self.sigma_min)
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            let _ = writeln!(s, "{key}={}", self.render_value(key));
        }
        s
    }
}
