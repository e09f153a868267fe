//! Experiment configuration.
//!
//! Stored as TOML. Every field has a default, so a config file only needs the
//! keys it changes. Dotted-path overrides (`loss.a=0.88`) are applied on the
//! TOML tree after loading.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LatseError, Result};
use crate::eval::EvalConfig;
use crate::gate::GateScope;
use crate::generator::SsimConfig;
use crate::margin::MarginSpec;
use crate::synth::DataConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub leaky_slope: f64,
    /// Decoder hidden widths, embedding side first.
    pub decoder_hidden: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            embedding_dim: 64,
            leaky_slope: 0.01,
            decoder_hidden: vec![256, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    /// 0 disables the teacher entirely.
    pub k: usize,
    pub scope: GateScope,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            k: 1,
            scope: GateScope::FullSample,
        }
    }
}

/// What the decoder is asked to reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Per-identity momentum mean image.
    MomentumMean,
    /// The input image itself.
    Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Multiplier on GLoss in the total loss. 0 switches the decoder path off
    /// and GLoss is then logged as 0.
    pub weight: f64,
    pub momentum: f64,
    pub target: TargetMode,
    /// Only gate-passed samples update the momentum targets.
    pub update_passed_only: bool,
    pub ssim: SsimConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            weight: 1.0,
            momentum: 0.9,
            target: TargetMode::MomentumMean,
            update_passed_only: true,
            ssim: SsimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub decay_factor: f64,
    /// Learning-rate drops as fractions of each phase's iteration budget.
    pub decay_fractions: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Decoder learning rate relative to `lr`.
    pub decoder_lr_scale: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            decay_factor: 10.0,
            decay_fractions: vec![0.6, 0.8],
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            decoder_lr_scale: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Not part of the config hash.
    pub out_dir: PathBuf,
    pub teacher_iterations: usize,
    pub student_iterations: usize,
    /// Metrics CSV and gate log rows are written every this many iterations.
    pub log_interval: usize,
    pub data: DataConfig,
    pub loss: MarginSpec,
    pub net: NetConfig,
    pub gate: GateConfig,
    pub gen: GenConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            teacher_iterations: 1000,
            student_iterations: 1000,
            log_interval: 50,
            data: DataConfig::default(),
            loss: MarginSpec::linear(0.88, 0.88, 16.0),
            net: NetConfig::default(),
            gate: GateConfig::default(),
            gen: GenConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> LatseError {
    LatseError::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LatseError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Applies one `dotted.key=value` override. The value is parsed as a TOML
    /// literal, falling back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| LatseError::Config(format!("override `{assignment}` lacks `=`")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));

        let mut tree = toml::Value::try_from(&*self).map_err(config_err)?;
        let unknown = || LatseError::Config(format!("unknown config key `{key}`"));
        let (parents, leaf) = match key.rsplit_once('.') {
            Some((p, l)) => (p.split('.').collect::<Vec<_>>(), l),
            None => (Vec::new(), key),
        };
        let mut node = &mut tree;
        for part in parents {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(unknown)?;
        }
        let slot = node
            .as_table_mut()
            .and_then(|t| t.get_mut(leaf))
            .ok_or_else(unknown)?;
        // integers given for float fields
        *slot = match (&*slot, value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        let next: Self = tree.try_into().map_err(config_err)?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML with `out_dir` blanked.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }

    /// First 16 hex digits of [`Self::hash`], used in artifact headers.
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    /// First 8 bytes of the hash, embedded in checkpoints.
    pub fn hash_tag(&self) -> [u8; 8] {
        let full = Sha256::digest({
            let mut c = self.clone();
            c.out_dir = PathBuf::new();
            c.to_toml()
        });
        full[..8].try_into().expect("digest is 32 bytes")
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.data.validate()?;
        self.gen.ssim.validate()?;
        if self.optim.batch_size == 0 {
            return Err(LatseError::Config("batch_size must be positive".into()));
        }
        if self.net.embedding_dim == 0 {
            return Err(LatseError::Config("embedding_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gen.momentum) {
            return Err(LatseError::Config(format!(
                "gen.momentum must lie in [0, 1), got {}",
                self.gen.momentum
            )));
        }
        if !(self.gen.weight >= 0.0) {
            return Err(LatseError::Config("gen.weight must be non-negative".into()));
        }
        if !(self.optim.lr > 0.0 && self.optim.decay_factor > 0.0 && self.optim.decoder_lr_scale > 0.0) {
            return Err(LatseError::Config(
                "lr, decay_factor and decoder_lr_scale must be positive".into(),
            ));
        }
        if self.log_interval == 0 {
            return Err(LatseError::Config("log_interval must be positive".into()));
        }
        Ok(())
    }
}
