use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{Strategy, StrategyConfig};
use crate::csil::{LossWeights, TrainOptions};
use crate::error::{invalid, Result};
use crate::model::{ExtractorKind, HeadKind, ModelConfig};
use crate::optim::SgdConfig;
use crate::signal::SAMPLE_DIMS;
use crate::zerobias::DEFAULT_TEMPERATURE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorChoice {
    Mlp,
    Cnn,
}

/// Settings of one benchmark run. Every field has a default, so a config
/// file only lists what it changes:
///
/// ```toml
/// devices = 100
/// initial_devices = 20
/// increment = 20
/// strategies = ["csil", "finetune"]
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub devices: usize,
    pub initial_devices: usize,
    pub increment: usize,
    pub stages: usize,
    pub samples_per_device: usize,
    pub snr_db: f64,
    /// Container file to load instead of synthesizing data.
    pub dataset: Option<PathBuf>,
    pub strategies: Vec<Strategy>,
    pub initial_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2_factor: f64,
    pub temperature: f64,
    pub extractor: ExtractorChoice,
    pub hidden: usize,
    pub features: usize,
    pub conv_channels: [usize; 2],
    pub head: HeadKind,
    /// Switches applied to the `csil` entry of `strategies`; turning one
    /// off runs the matching ablation instead.
    pub channel_separation: bool,
    pub kd: bool,
    pub ewc: bool,
    pub train_old_fingerprints: bool,
    pub ce_weight: f64,
    pub kd_weight: f64,
    pub ewc_weight: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            devices: 20,
            initial_devices: 8,
            increment: 3,
            stages: 5,
            samples_per_device: 200,
            snr_db: 20.0,
            dataset: None,
            strategies: Strategy::BENCH.to_vec(),
            initial_epochs: 30,
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            l2_factor: 0.01,
            temperature: DEFAULT_TEMPERATURE,
            extractor: ExtractorChoice::Mlp,
            hidden: 64,
            features: 32,
            conv_channels: [8, 16],
            head: HeadKind::ZeroBias,
            channel_separation: true,
            kd: true,
            ewc: true,
            train_old_fingerprints: true,
            ce_weight: 1.0,
            kd_weight: 1.0,
            ewc_weight: 1.0,
            seed: 0,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid(e.to_string()))
    }

    /// Device range of every stage.
    pub fn schedule(&self) -> Result<Vec<Range<usize>>> {
        if self.stages == 0 || self.initial_devices == 0 {
            return Err(invalid("need at least one stage and one initial device"));
        }
        if self.stages > 1 && self.increment == 0 {
            return Err(invalid("incremental stages need a positive increment"));
        }
        let total = self.initial_devices + self.increment * (self.stages - 1);
        if total != self.devices {
            return Err(invalid(format!(
                "schedule {} + {}×{} covers {total} devices, config has {}",
                self.initial_devices,
                self.stages - 1,
                self.increment,
                self.devices
            )));
        }
        let mut out = Vec::with_capacity(self.stages);
        out.push(0..self.initial_devices);
        for k in 1..self.stages {
            let s = self.initial_devices + (k - 1) * self.increment;
            out.push(s..s + self.increment);
        }
        Ok(out)
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            l2_factor: self.l2_factor,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            ce: self.ce_weight,
            kd: self.kd_weight,
            ewc: self.ewc_weight,
        }
    }

    pub fn train_options(&self, epochs: usize) -> TrainOptions {
        TrainOptions {
            epochs,
            batch_size: self.batch_size,
            sgd: self.sgd(),
            weights: self.weights(),
        }
    }

    pub fn model_config(&self, input_shape: [usize; 3]) -> ModelConfig {
        ModelConfig {
            input_shape,
            extractor: match self.extractor {
                ExtractorChoice::Mlp => ExtractorKind::Mlp {
                    hidden: self.hidden,
                    features: self.features,
                },
                ExtractorChoice::Cnn => ExtractorKind::Cnn {
                    channels: self.conv_channels,
                    features: self.features,
                },
            },
            head: self.head,
            classes: self.initial_devices,
            embedding_width: None,
            temperature: self.temperature,
        }
    }

    /// Strategy list after applying the switches to `csil`.
    pub fn resolved_strategies(&self) -> Result<Vec<StrategyConfig>> {
        let off = [!self.channel_separation, !self.kd, !self.ewc];
        let csil = match off {
            [false, false, false] => Strategy::Csil,
            [true, false, false] => Strategy::CsilNoCs,
            [false, true, false] => Strategy::CsilNoKd,
            [false, false, true] => Strategy::CsilNoEwc,
            _ => return Err(invalid("at most one of channel_separation, kd, ewc may be switched off")),
        };
        let mut out: Vec<StrategyConfig> = Vec::new();
        for &s in &self.strategies {
            let s = if s == Strategy::Csil { csil } else { s };
            if out.iter().any(|c| c.strategy == s) {
                return Err(invalid(format!("strategy {s} listed twice")));
            }
            out.push(StrategyConfig::new(s).with_old_fingerprints(self.train_old_fingerprints));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.sgd().validate()?;
        if self.strategies.is_empty() {
            return Err(invalid("no strategies selected"));
        }
        self.resolved_strategies()?;
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        if self.stages > 1 && self.head != HeadKind::ZeroBias {
            return Err(invalid("incremental stages need the zero-bias head"));
        }
        if self.dataset.is_none() && self.samples_per_device < 2 {
            return Err(invalid("samples_per_device must be at least 2"));
        }
        for w in [self.ce_weight, self.kd_weight, self.ewc_weight] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(invalid("loss weights must be finite and non-negative"));
            }
        }
        if self.snr_db.is_nan() {
            return Err(invalid("snr_db must be a number"));
        }
        Ok(())
    }

    /// Sample shape of synthesized data.
    pub fn synthetic_dims() -> [usize; 3] {
        SAMPLE_DIMS
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_desk_protocol() {
        let c = ExperimentConfig::default();
        assert_eq!((c.batch_size, c.epochs, c.stages), (64, 10, 5));
        assert_eq!(c.schedule().unwrap(), vec![0..8, 8..11, 11..14, 14..17, 17..20]);
        c.validate().unwrap();
    }

    #[test]
    fn hundred_device_schedule() {
        let c = ExperimentConfig::from_toml_str("devices = 100\ninitial_devices = 20\nincrement = 20\n").unwrap();
        assert_eq!(c.schedule().unwrap().len(), 5);
        assert_eq!(c.schedule().unwrap()[4], 80..100);
    }

    #[test]
    fn infeasible_schedule_and_unknown_keys() {
        let c = ExperimentConfig::from_toml_str("devices = 21").unwrap();
        assert!(c.schedule().is_err());
        assert!(ExperimentConfig::from_toml_str("device = 20").is_err());
        assert!(ExperimentConfig::from_toml_str("strategies = [\"icarl\"]").is_err());
    }

    #[test]
    fn switches_pick_ablation_rows() {
        let c = ExperimentConfig::from_toml_str("kd = false\nstrategies = [\"csil\"]").unwrap();
        assert_eq!(c.resolved_strategies().unwrap()[0].strategy, Strategy::CsilNoKd);
        let c = ExperimentConfig::from_toml_str("kd = false\newc = false").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig {
            seed: 9,
            strategies: vec![Strategy::Lwf],
            ..ExperimentConfig::default()
        };
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap(), c);
    }
}
