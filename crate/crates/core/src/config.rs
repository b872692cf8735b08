//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::balancer::BalancerParams;
use crate::error::{Error, Result};
use crate::optim::AdamParams;
use crate::problems::Problem;

/// SplitMix64 mix of `master` and a stream index; every random source of a
/// run draws its seed from here.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub mod streams {
    pub const NETWORK: u64 = 1;
    pub const BANK: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const BALANCER: u64 = 4;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderConfig {
    Identity,
    Rff {
        variances: Vec<f64>,
        features_per_block: usize,
    },
    Daff {
        comp_types: Vec<u8>,
        mn_values: Vec<i32>,
    },
    DaffNumeric {
        /// Precomputed mode file; when absent the modes are solved for.
        #[serde(default)]
        mode_file: Option<PathBuf>,
        #[serde(default = "default_eig_n")]
        grid_n: usize,
        #[serde(default = "default_eig_k")]
        modes: usize,
    },
}

fn default_eig_n() -> usize {
    63
}
fn default_eig_k() -> usize {
    16
}

impl EncoderConfig {
    pub fn is_daff(&self) -> bool {
        matches!(self, EncoderConfig::Daff { .. } | EncoderConfig::DaffNumeric { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SkipSpec {
    /// `"default"` or `"none"`.
    Named(String),
    Explicit(Vec<(usize, usize)>),
}

impl Default for SkipSpec {
    fn default() -> Self {
        SkipSpec::Named("default".into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_units")]
    pub units: usize,
    /// Defaults to `false` for DaFF encoders and `true` otherwise.
    #[serde(default)]
    pub use_bias: Option<bool>,
    #[serde(default)]
    pub skip: SkipSpec,
}

fn default_layers() -> usize {
    3
}
fn default_units() -> usize {
    64
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            layers: default_layers(),
            units: default_units(),
            use_bias: None,
            skip: SkipSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_decay_patience")]
    pub decay_patience: usize,
    #[serde(default = "default_stop_patience")]
    pub stop_patience: usize,
    #[serde(default = "default_min_rel")]
    pub min_rel_improvement: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Quasi-Newton iterations run after the first-order phase.
    #[serde(default)]
    pub lbfgs_iters: usize,
    #[serde(default = "default_memory")]
    pub lbfgs_memory: usize,
}

fn default_epochs() -> usize {
    50_000
}
fn default_lr() -> f64 {
    1e-3
}
fn default_decay_factor() -> f64 {
    0.1
}
fn default_decay_patience() -> usize {
    2000
}
fn default_stop_patience() -> usize {
    2 * 2000 + 1
}
fn default_min_rel() -> f64 {
    1e-12
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_memory() -> usize {
    20
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            epochs: default_epochs(),
            lr: default_lr(),
            decay_factor: default_decay_factor(),
            decay_patience: default_decay_patience(),
            stop_patience: default_stop_patience(),
            min_rel_improvement: default_min_rel(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            lbfgs_iters: 0,
            lbfgs_memory: default_memory(),
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalancerConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_true() -> bool {
    true
}
fn default_alpha() -> f64 {
    BalancerParams::default().alpha
}
fn default_tau() -> f64 {
    BalancerParams::default().tau
}
fn default_rho() -> f64 {
    BalancerParams::default().rho
}

impl Default for BalancerConfig {
    fn default() -> Self {
        BalancerConfig {
            enabled: true,
            alpha: default_alpha(),
            tau: default_tau(),
            rho: default_rho(),
        }
    }
}

impl BalancerConfig {
    pub fn params(&self) -> BalancerParams {
        BalancerParams {
            alpha: self.alpha,
            tau: self.tau,
            rho: self.rho,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Draw a fresh collocation batch every this many epochs; 0 keeps the
    /// first batch throughout.
    #[serde(default)]
    pub resample_every: usize,
    /// Point shards evaluated in parallel; results do not depend on the
    /// thread count, only on this number.
    #[serde(default = "default_shards")]
    pub shards: usize,
    #[serde(default = "default_validate_every")]
    pub validate_every: usize,
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
}

fn default_batch() -> usize {
    512
}
fn default_shards() -> usize {
    1
}
fn default_validate_every() -> usize {
    100
}
fn default_grid_n() -> usize {
    101
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: default_batch(),
            resample_every: 0,
            shards: default_shards(),
            validate_every: default_validate_every(),
            grid_n: default_grid_n(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub problem: Problem,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub balancer: BalancerConfig,
    #[serde(default)]
    pub training: TrainingConfig,
}

/// Turns a TOML deserialisation error into a config error naming the key.
pub(crate) fn toml_error(e: toml::de::Error) -> Error {
    let msg = e.message().to_string();
    let key = ["unknown field `", "missing field `", "unknown variant `"]
        .iter()
        .find_map(|pat| {
            msg.find(pat).map(|i| {
                let rest = &msg[i + pat.len()..];
                rest[..rest.find('`').unwrap_or(rest.len())].to_string()
            })
        })
        .unwrap_or_else(|| "<document>".into());
    let location = e.span().map(|s| format!(" (byte {})", s.start)).unwrap_or_default();
    Error::config(key, format!("{msg}{location}"))
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn use_bias(&self) -> bool {
        self.network.use_bias.unwrap_or(!self.encoder.is_daff())
    }

    pub fn skip_plan(&self) -> Result<Vec<(usize, usize)>> {
        match &self.network.skip {
            SkipSpec::Named(s) if s == "default" => Ok(crate::network::default_skip_plan(self.network.layers)),
            SkipSpec::Named(s) if s == "none" => Ok(vec![]),
            SkipSpec::Named(s) => Err(Error::config("network.skip", format!("unknown skip plan `{s}`"))),
            SkipSpec::Explicit(v) => Ok(v.clone()),
        }
    }

    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<(String, String)> = Vec::new();
        let mut check = |ok: bool, key: &str, msg: &str| {
            if !ok {
                bad.push((key.into(), msg.into()));
            }
        };
        if let Err(Error::Config { key, message }) = self.problem.validate() {
            check(false, &key, &message);
        }
        match &self.encoder {
            EncoderConfig::Rff {
                variances,
                features_per_block,
            } => {
                check(
                    !variances.is_empty() && variances.iter().all(|v| *v > 0.0 && v.is_finite()),
                    "encoder.variances",
                    "need at least one positive variance",
                );
                check(*features_per_block >= 1, "encoder.features_per_block", "must be at least 1");
            }
            EncoderConfig::Daff { comp_types, mn_values } => {
                check(
                    !comp_types.is_empty() && comp_types.iter().all(|c| (1..=4).contains(c)),
                    "encoder.comp_types",
                    "entries must be in 1..=4",
                );
                check(
                    !mn_values.is_empty() && !mn_values.contains(&0),
                    "encoder.mn_values",
                    "need nonzero integers",
                );
            }
            EncoderConfig::DaffNumeric { grid_n, modes, .. } => {
                check(*grid_n >= 1, "encoder.grid_n", "must be at least 1");
                check(*modes >= 1, "encoder.modes", "must be at least 1");
                check(
                    self.problem.residual_order() <= 2,
                    "encoder.kind",
                    "numeric DaFFs carry derivatives up to order 2 only",
                );
            }
            EncoderConfig::Identity => {}
        }
        check(self.network.layers >= 1, "network.layers", "must be at least 1");
        check(self.network.units >= 1, "network.units", "must be at least 1");
        if let Err(Error::Config { key, message }) = self.skip_plan() {
            check(false, &key, &message);
        }
        let o = &self.optimizer;
        check(o.epochs >= 1 || o.lbfgs_iters >= 1, "optimizer.epochs", "nothing to run");
        check(o.lr > 0.0 && o.lr.is_finite(), "optimizer.lr", "must be positive");
        check(o.decay_factor > 0.0 && o.decay_factor <= 1.0, "optimizer.decay_factor", "must be in (0, 1]");
        check(o.decay_patience >= 1, "optimizer.decay_patience", "must be at least 1");
        check(o.stop_patience >= 1, "optimizer.stop_patience", "must be at least 1");
        check(o.lbfgs_memory >= 1, "optimizer.lbfgs_memory", "must be at least 1");
        check(
            (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2),
            "optimizer.beta1",
            "Adam betas must be in [0, 1)",
        );
        let b = &self.balancer;
        check(b.tau > 0.0, "balancer.tau", "must be positive");
        check((0.0..=1.0).contains(&b.alpha), "balancer.alpha", "must be in [0, 1]");
        check((0.0..=1.0).contains(&b.rho), "balancer.rho", "must be in [0, 1]");
        let t = &self.training;
        check(
            t.batch_size >= 16 && t.batch_size % 16 == 0,
            "training.batch_size",
            "must be a positive multiple of 16 (3:1 split, four edges)",
        );
        check(t.shards >= 1, "training.shards", "must be at least 1");
        check(t.validate_every >= 1, "training.validate_every", "must be at least 1");
        check(t.grid_n >= 2, "training.grid_n", "must be at least 2");
        if bad.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = bad.iter().map(|b| b.0.as_str()).collect();
        let msgs: Vec<String> = bad.iter().map(|b| format!("{}: {}", b.0, b.1)).collect();
        Err(Error::config(keys.join(", "), msgs.join("; ")))
    }
}
