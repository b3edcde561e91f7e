//! TOML stage configs. Unknown keys are rejected so typos surface as usage
//! errors instead of silently falling back to defaults.

use std::path::Path;

use brds_core::accel::{configure, configure_split, AccelConfig};
use brds_core::numerics::{FixedSpec, PwlSettings};
use brds_core::pruning::SparsityConfig;
use brds_core::trainer::{TaskKind, TaskSizes, TrainConfig};
use brds_core::LstmDims;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Usage;

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Usage(format!("invalid config {}: {e}", path.display())).into())
}

/// Everything needed to regenerate a task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seed: u64,
    pub sizes: TaskSizes,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub seed: Option<u64>,
    pub train: Option<usize>,
    pub val: Option<usize>,
    pub test: Option<usize>,
    pub seq_len: Option<usize>,
    pub vocab: Option<usize>,
}

impl TaskSection {
    pub fn resolve(&self, default_seed: u64) -> TaskSpec {
        let d = TaskSizes::for_kind(self.kind);
        TaskSpec {
            kind: self.kind,
            seed: self.seed.unwrap_or(default_seed),
            sizes: TaskSizes {
                train: self.train.unwrap_or(d.train),
                val: self.val.unwrap_or(d.val),
                test: self.test.unwrap_or(d.test),
                seq_len: self.seq_len.unwrap_or(d.seq_len),
                vocab: self.vocab.unwrap_or(d.vocab),
            },
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub lr_decay: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub clip_norm: Option<f64>,
}

impl TrainSection {
    pub fn resolve(&self, kind: TaskKind, seed: u64, default_epochs: usize) -> TrainConfig {
        let p = TrainConfig::preset(kind);
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(p.learning_rate),
            lr_decay: self.lr_decay.unwrap_or(p.lr_decay),
            epochs: self.epochs.unwrap_or(default_epochs),
            batch_size: self.batch_size.unwrap_or(p.batch_size),
            clip_norm: self.clip_norm.unwrap_or(p.clip_norm),
            seed,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedSection {
    pub n: u32,
    pub f: u32,
}

impl FixedSection {
    pub fn spec(&self) -> anyhow::Result<FixedSpec> {
        Ok(FixedSpec::new(self.n, self.f)?)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub seed: Option<u64>,
    pub task: TaskSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    pub fixed: Option<FixedSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsitySection {
    #[serde(rename = "OS")]
    pub os: f64,
    pub alpha: f64,
    pub delta_x: f64,
    pub delta_h: f64,
}

impl SparsitySection {
    pub fn to_config(&self) -> anyhow::Result<SparsityConfig> {
        Ok(SparsityConfig::new(self.os, self.alpha, self.delta_x, self.delta_h)?)
    }
}

/// Retraining epochs per pruning step when the config does not say.
pub const DEFAULT_N_RE: usize = 5;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchFile {
    pub seed: Option<u64>,
    pub sparsity: SparsitySection,
    #[serde(default)]
    pub retrain: TrainSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(rename = "OS")]
    pub os: f64,
    /// `Spar_x` step of an iso-sparsity grid.
    pub step: Option<f64>,
    /// Explicit `(Spar_x, Spar_h)` points; overrides `step`.
    pub grid: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub seed: Option<u64>,
    pub sweep: SweepSection,
    #[serde(default)]
    pub retrain: TrainSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PwlSection {
    pub segments: Option<usize>,
    pub domain_lo: Option<f64>,
    pub domain_hi: Option<f64>,
}

/// Accelerator parameters. Either `R` (split chosen from the row widths) or
/// both `R_S` and `R_L`. `H`, `X`, `X_SP`, `H_SP` are only read by `report`;
/// the other commands take them from the model or image.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccelFile {
    #[serde(rename = "R")]
    pub r: Option<usize>,
    #[serde(rename = "R_S")]
    pub r_s: Option<usize>,
    #[serde(rename = "R_L")]
    pub r_l: Option<usize>,
    #[serde(rename = "Q")]
    pub q: usize,
    #[serde(default = "default_freq")]
    pub freq_mhz: f64,
    pub w_addr: Option<u32>,
    pub n: Option<u32>,
    pub f: Option<u32>,
    pub pwl: Option<PwlSection>,
    #[serde(rename = "H")]
    pub hidden: Option<usize>,
    #[serde(rename = "X")]
    pub input: Option<usize>,
    #[serde(rename = "X_SP")]
    pub x_sp: Option<usize>,
    #[serde(rename = "H_SP")]
    pub h_sp: Option<usize>,
    /// Sparsity credited in the effective throughput; defaults to the
    /// structural sparsity of the row widths.
    pub sparsity: Option<f64>,
}

fn default_freq() -> f64 {
    200.0
}

impl AccelFile {
    pub fn spec(&self) -> anyhow::Result<Option<FixedSpec>> {
        match (self.n, self.f) {
            (None, None) => Ok(None),
            (Some(n), Some(f)) => Ok(Some(FixedSpec::new(n, f)?)),
            _ => Err(Usage("set both n and f, or neither".into()).into()),
        }
    }

    pub fn pwl(&self) -> PwlSettings {
        let d = PwlSettings::default();
        match &self.pwl {
            None => d,
            Some(p) => PwlSettings {
                segments: p.segments.unwrap_or(d.segments),
                domain_lo: p.domain_lo.unwrap_or(d.domain_lo),
                domain_hi: p.domain_hi.unwrap_or(d.domain_hi),
            },
        }
    }

    pub fn addr_bits(&self) -> u32 {
        self.w_addr.unwrap_or(brds_core::sparse::DEFAULT_ADDR_BITS)
    }

    /// Accelerator for a model of `dims` with the given row widths.
    pub fn configure(&self, dims: LstmDims, x_sp: usize, h_sp: usize, spec: FixedSpec) -> anyhow::Result<AccelConfig> {
        let cfg = match (self.r, self.r_s, self.r_l) {
            (None, Some(s), Some(l)) => configure_split(dims, x_sp, h_sp, s, l, self.q, self.freq_mhz)?,
            (Some(r), None, None) => configure(dims, x_sp, h_sp, r, self.q, self.freq_mhz)?,
            (Some(r), Some(s), Some(l)) if r == s + l => {
                configure_split(dims, x_sp, h_sp, s, l, self.q, self.freq_mhz)?
            }
            _ => return Err(Usage("give R, or R_S and R_L (with R = R_S + R_L)".into()).into()),
        };
        Ok(cfg.with_spec(spec).with_pwl(self.pwl()).with_addr_bits(self.addr_bits()))
    }

    /// Shape fields needed by `report`.
    pub fn shape(&self) -> anyhow::Result<(LstmDims, usize, usize)> {
        match (self.hidden, self.input, self.x_sp, self.h_sp) {
            (Some(h), Some(x), Some(xs), Some(hs)) => Ok((LstmDims::new(x, h)?, xs, hs)),
            _ => Err(Usage("report needs H, X, X_SP and H_SP in the accelerator config".into()).into()),
        }
    }
}
