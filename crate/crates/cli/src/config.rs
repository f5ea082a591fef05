//! Run configuration: TOML file, dotted-key overrides, defaults, and
//! conversion into the core parameter types.

use std::path::{Path, PathBuf};

use dfm_core::dfn::{DfnSpec, FractureSetSpec, PhysicalConstants};
use dfm_core::field::{CovarianceSpec, TensorFieldParams};
use dfm_core::net::TrainConfig;
use dfm_core::{Error, Result, SampleConfig};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; overridable with `--seed`.
    pub seed: u64,
    pub domain: DomainSection,
    pub dfn: DfnSection,
    pub field: FieldSection,
    pub block: BlockSection,
    pub solver: SolverSection,
    pub coarse: CoarseSection,
    pub dataset: DatasetSection,
    pub surrogate: SurrogateSection,
    pub train: TrainSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSection {
    /// Macro domain side L [m].
    pub length: f64,
    /// Coarse element size H [m]; the homogenization block side is 1.5·H.
    pub height: f64,
    /// Lower fracture size cutoff h [m]: fractures in (h, H] are upscaled.
    pub cutoff: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DfnSection {
    pub alpha: f64,
    pub r_lo: f64,
    pub r_hi: f64,
    pub aperture_coeff: f64,
    pub sets: Vec<SetSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetSection {
    pub name: String,
    pub trend_deg: f64,
    pub plunge_deg: f64,
    pub concentration: f64,
    pub p30: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSection {
    /// Correlation length λ [m].
    pub corr_len: f64,
    /// Log-conductivity means of the three eigenvalue channels.
    pub mu: [f64; 3],
    /// Log-conductivity covariance of the three eigenvalue channels.
    pub sigma: [[f64; 3]; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockSection {
    /// Voxels per block side in homogenization.
    pub resolution: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoarseSection {
    /// Resolution of the coarse solve grid used by `benchmark`.
    pub resolution: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub count: usize,
    /// Voxels per axis of each sample.
    pub resolution: usize,
    /// Sample domain side [m].
    pub domain_side: f64,
    pub class: String,
    pub split_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSection {
    pub conv_channels: Vec<usize>,
    pub fc_widths: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub fractures: PathBuf,
    pub matrix_field: PathBuf,
    pub coarse_numerical: PathBuf,
    pub coarse_surrogate: PathBuf,
    pub dataset_dir: PathBuf,
    pub weights: PathBuf,
    pub stats: PathBuf,
    pub history: PathBuf,
    pub predictions: PathBuf,
}

impl Default for DomainSection {
    fn default() -> Self {
        DomainSection {
            length: 15.0,
            height: 10.0,
            cutoff: 1.0,
        }
    }
}

impl Default for DfnSection {
    fn default() -> Self {
        DfnSection {
            alpha: 2.5,
            r_lo: 1.0,
            r_hi: 564.0,
            aperture_coeff: 1e-4,
            sets: vec![
                SetSection {
                    name: "NS".into(),
                    trend_deg: 292.0,
                    plunge_deg: 1.0,
                    concentration: 17.8,
                    p30: 0.0196,
                },
                SetSection {
                    name: "NE".into(),
                    trend_deg: 326.0,
                    plunge_deg: 2.0,
                    concentration: 14.3,
                    p30: 0.0427,
                },
                SetSection {
                    name: "NW".into(),
                    trend_deg: 60.0,
                    plunge_deg: 6.0,
                    concentration: 12.9,
                    p30: 0.0348,
                },
                SetSection {
                    name: "EW".into(),
                    trend_deg: 15.0,
                    plunge_deg: 2.0,
                    concentration: 14.0,
                    p30: 0.0138,
                },
                SetSection {
                    name: "HZ".into(),
                    trend_deg: 5.0,
                    plunge_deg: 86.0,
                    concentration: 15.2,
                    p30: 0.0247,
                },
            ],
        }
    }
}

impl Default for FieldSection {
    fn default() -> Self {
        FieldSection {
            corr_len: 3.0,
            mu: [-4.0, -4.0, -4.0],
            sigma: [[0.25, 0.1, 0.1], [0.1, 0.25, 0.1], [0.1, 0.1, 0.25]],
        }
    }
}

impl Default for BlockSection {
    fn default() -> Self {
        BlockSection { resolution: 16 }
    }
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection { tolerance: 1e-10 }
    }
}

impl Default for CoarseSection {
    fn default() -> Self {
        CoarseSection { resolution: 8 }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            count: 8,
            resolution: 16,
            domain_side: 15.0,
            class: "A".into(),
            split_seed: 1,
        }
    }
}

impl Default for SurrogateSection {
    fn default() -> Self {
        SurrogateSection {
            conv_channels: vec![4, 8, 16, 32],
            fc_widths: vec![32, 32, 16],
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr0: t.lr0,
            batch_size: t.batch_size,
            epochs: t.epochs,
            plateau_factor: t.plateau_factor,
            plateau_patience: t.plateau_patience,
            seed: t.seed,
        }
    }
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            fractures: "fractures.dfnf".into(),
            matrix_field: "matrix.tgrd".into(),
            coarse_numerical: "coarse_numerical.tgrd".into(),
            coarse_surrogate: "coarse_surrogate.tgrd".into(),
            dataset_dir: "dataset".into(),
            weights: "model.dfmw".into(),
            stats: "stats.txt".into(),
            history: "history.csv".into(),
            predictions: "predictions.csv".into(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            domain: DomainSection::default(),
            dfn: DfnSection::default(),
            field: FieldSection::default(),
            block: BlockSection::default(),
            solver: SolverSection::default(),
            coarse: CoarseSection::default(),
            dataset: DatasetSection::default(),
            surrogate: SurrogateSection::default(),
            train: TrainSection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// Deep-merge `patch` into `base` (tables recursively, everything else
/// replaced).
fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Load the configuration: optional TOML file, then dotted-key overrides
/// (`section.key = value` snippets), then the `--seed` flag.
pub fn load(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut value = toml::Value::try_from(RunConfig::default())
        .map_err(|e| Error::internal(format!("default config does not serialize: {e}")))?;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)?;
        let file: toml::Value = text.parse().map_err(|e| {
            Error::parameter(format!("config file {}: {e}", path.display()))
        })?;
        merge(&mut value, file);
    }
    for entry in overrides {
        let patch: toml::Value = entry
            .parse()
            .map_err(|e| Error::parameter(format!("override `{entry}`: {e}")))?;
        merge(&mut value, patch);
    }
    let mut config: RunConfig = value
        .try_into()
        .map_err(|e| Error::parameter(format!("invalid configuration: {e}")))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dfn_spec().validate()?;
        if !(self.domain.length > 0.0 && self.domain.height > 0.0) {
            return Err(Error::parameter("domain.length and domain.height must be positive"));
        }
        if !(self.domain.cutoff >= 0.0 && self.domain.cutoff < self.domain.height) {
            return Err(Error::parameter("domain.cutoff must lie in [0, height)"));
        }
        if self.block.resolution < 2 {
            return Err(Error::parameter("block.resolution must be at least 2"));
        }
        if self.coarse.resolution < 2 {
            return Err(Error::parameter("coarse.resolution must be at least 2"));
        }
        if !(self.solver.tolerance > 0.0) {
            return Err(Error::parameter("solver.tolerance must be positive"));
        }
        self.covariance()?;
        Ok(())
    }

    pub fn dfn_spec(&self) -> DfnSpec {
        DfnSpec {
            sets: self
                .dfn
                .sets
                .iter()
                .map(|s| FractureSetSpec {
                    name: s.name.clone(),
                    trend_deg: s.trend_deg,
                    plunge_deg: s.plunge_deg,
                    concentration: s.concentration,
                    p30: s.p30,
                })
                .collect(),
            alpha: self.dfn.alpha,
            r_lo: self.dfn.r_lo,
            r_hi: self.dfn.r_hi,
            aperture_coeff: self.dfn.aperture_coeff,
            constants: PhysicalConstants::default(),
        }
    }

    pub fn covariance(&self) -> Result<CovarianceSpec> {
        CovarianceSpec::new(self.field.corr_len)
    }

    pub fn field_params(&self) -> TensorFieldParams {
        TensorFieldParams {
            mu: Vector3::from_row_slice(&self.field.mu),
            sigma: Matrix3::from_fn(|i, j| self.field.sigma[i][j]),
        }
    }

    pub fn sample_config(&self) -> Result<SampleConfig> {
        Ok(SampleConfig {
            dfn: self.dfn_spec(),
            cov: self.covariance()?,
            params: self.field_params(),
            domain_side: self.dataset.domain_side,
            resolution: self.dataset.resolution,
            solver_tol: self.solver.tolerance,
            class: self.dataset.class.clone(),
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.train.lr0,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            plateau_factor: self.train.plateau_factor,
            plateau_patience: self.train.plateau_patience,
            seed: self.train.seed,
            ..TrainConfig::default()
        }
    }

    /// Write the effective configuration into the output directory.
    pub fn echo(&self, out_dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::internal(format!("config does not serialize: {e}")))?;
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("config.toml"), text)?;
        Ok(())
    }
}
