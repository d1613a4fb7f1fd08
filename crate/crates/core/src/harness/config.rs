use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::autodiff::AdamWConfig;
use crate::calibration::PblConfig;
use crate::fed_protocol::{Strategy, StrategyKind, TrainSettings};
use crate::segnet::ModelConfig;
use crate::synthdata::OrganProfile;

/// Every knob of a run. Serialized as one flat JSON object whose keys are
/// the CLI flag names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub strategy: StrategyKind,
    pub use_dca: bool,
    pub use_adapter: bool,
    pub use_pbl: bool,
    pub clients: usize,
    /// Client `k` uses `profiles[k % len]`.
    pub profiles: Vec<String>,
    pub heldout_profile: String,
    pub samples_per_client: usize,
    pub test_frac: f64,
    pub val_frac: f64,
    pub rounds: u32,
    pub local_epochs: usize,
    pub finetune_epochs: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub attention_heads: usize,
    pub tau: f64,
    pub lambda: f64,
    pub noise_variance: f64,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub anchor_size: usize,
    pub seed: u64,
    /// Overrides `seed` when non-empty.
    pub seeds: Vec<u64>,
    pub out: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        let pbl = PblConfig::default();
        let opt = AdamWConfig::default();
        ExperimentConfig {
            strategy: StrategyKind::FedOAP,
            use_dca: true,
            use_adapter: true,
            use_pbl: true,
            clients: 3,
            profiles: vec!["breast_like".into(), "brain_like".into(), "liver_like".into()],
            heldout_profile: "lung_like".into(),
            samples_per_client: 200,
            test_frac: 0.1,
            val_frac: 0.1,
            rounds: 5,
            local_epochs: 1,
            finetune_epochs: 2,
            image_size: model.image_size,
            base_channels: model.base_channels,
            depth: model.depth,
            attention_heads: model.attention_heads,
            tau: pbl.tau,
            lambda: pbl.lambda,
            noise_variance: pbl.noise_variance,
            lr: opt.base_lr,
            min_lr: opt.min_lr,
            weight_decay: opt.weight_decay,
            batch_size: 16,
            anchor_size: 4,
            seed: 42,
            seeds: Vec::new(),
            out: "out".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn strategy(&self) -> Strategy {
        Strategy {
            kind: self.strategy,
            use_dca: self.use_dca,
            use_adapter: self.use_adapter,
            use_pbl: self.use_pbl,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            in_channels: 1,
            base_channels: self.base_channels,
            depth: self.depth,
            attention_heads: self.attention_heads,
        }
    }

    pub fn pbl(&self) -> PblConfig {
        PblConfig {
            tau: self.tau,
            lambda: self.lambda,
            noise_variance: self.noise_variance,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            model: self.model(),
            optimizer: AdamWConfig {
                base_lr: self.lr,
                min_lr: self.min_lr,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            batch_size: self.batch_size,
            anchor_size: self.anchor_size,
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn client_profiles(&self) -> Result<Vec<OrganProfile>, HarnessError> {
        (0..self.clients)
            .map(|k| Ok(OrganProfile::by_name(&self.profiles[k % self.profiles.len()])?))
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        if self.profiles.is_empty() {
            return bad("profiles must not be empty".into());
        }
        if self.batch_size == 0 {
            return bad("batch-size must be positive".into());
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr && self.weight_decay >= 0.0) {
            return bad(format!(
                "optimizer settings lr={} min-lr={} weight-decay={}",
                self.lr, self.min_lr, self.weight_decay
            ));
        }
        if self.profiles.contains(&self.heldout_profile) {
            return bad(format!("held-out profile {} is also a training profile", self.heldout_profile));
        }
        self.model().validate()?;
        self.pbl().validate()?;
        self.client_profiles()?;
        OrganProfile::by_name(&self.heldout_profile)?;
        crate::synthdata::split_counts(self.samples_per_client, self.test_frac, self.val_frac)?;
        Ok(())
    }
}
