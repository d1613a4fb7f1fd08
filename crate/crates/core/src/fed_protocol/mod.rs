//! Federated alignment rounds, PBL fine-tuning, baselines and the
//! transmission ledger.

mod client;
mod server;
pub mod wire;

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;
use crate::calibration::CalibrationError;
use crate::segnet::{ForwardOptions, PartitionTag, SegnetError};

pub use client::{
    client_local_round, evaluate_clients, fine_tune, ClientState, DiceReport, EvalSplit, FineTuneOutcome,
    TrainSettings,
};
pub use server::{
    run_alignment, server_aggregate, transmission_bytes, AlignmentOutcome, Broadcast, RoundMessage, RoundTraffic,
    TransmissionBytes, TransmissionLedger,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FedError {
    #[error("round mismatch: expected {expected}, got {found}")]
    RoundMismatch { expected: u32, found: u32 },
    #[error("partition violation: {0}")]
    PartitionViolation(String),
    #[error("shared name sets differ: {0}")]
    NameSetMismatch(String),
    #[error("no messages to aggregate")]
    EmptyMessageSet,
    #[error("client id {0} appears more than once")]
    DuplicateClient(u32),
    #[error("client {0} has an empty validation split")]
    EmptyValidationSplit(u32),
    #[error("client {client} has an empty {split} split")]
    EmptySplit { client: u32, split: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Wire(#[from] wire::WireError),
    #[error(transparent)]
    Segnet(SegnetError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl From<SegnetError> for FedError {
    fn from(e: SegnetError) -> Self {
        match e {
            SegnetError::PartitionViolation { .. } => FedError::PartitionViolation(e.to_string()),
            other => FedError::Segnet(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    #[serde(rename = "fedoap")]
    FedOAP,
    #[serde(rename = "fedavg-all")]
    FedAvgAll,
    LocalOnly,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::FedOAP => "fedoap",
            StrategyKind::FedAvgAll => "fedavg-all",
            StrategyKind::LocalOnly => "local-only",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fedoap" => Ok(StrategyKind::FedOAP),
            "fedavg-all" => Ok(StrategyKind::FedAvgAll),
            "local-only" => Ok(StrategyKind::LocalOnly),
            other => Err(format!("unknown strategy {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub use_dca: bool,
    pub use_adapter: bool,
    pub use_pbl: bool,
}

impl Strategy {
    pub fn fedoap() -> Self {
        Strategy {
            kind: StrategyKind::FedOAP,
            use_dca: true,
            use_adapter: true,
            use_pbl: true,
        }
    }

    pub fn fedavg_all() -> Self {
        Strategy {
            kind: StrategyKind::FedAvgAll,
            ..Self::fedoap()
        }
    }

    pub fn local_only() -> Self {
        Strategy {
            kind: StrategyKind::LocalOnly,
            ..Self::fedoap()
        }
    }

    /// Tags whose tensors travel to the server and come back averaged.
    /// Without DCA the query projection has nothing to decouple from and
    /// is averaged with the rest.
    pub fn transmitted_tags(&self) -> &'static [PartitionTag] {
        use PartitionTag::*;
        match self.kind {
            StrategyKind::FedOAP if self.use_dca => &[Shared],
            StrategyKind::FedOAP => &[Shared, PersonalQuery],
            StrategyKind::FedAvgAll => &[Shared, PersonalQuery, PersonalAdapter],
            StrategyKind::LocalOnly => &[],
        }
    }

    pub fn communicates(&self) -> bool {
        self.kind != StrategyKind::LocalOnly
    }

    pub fn exchanges_kv(&self) -> bool {
        self.kind == StrategyKind::FedOAP && self.use_dca
    }

    pub fn adapter_enabled(&self) -> bool {
        self.kind == StrategyKind::FedAvgAll || self.use_adapter
    }

    pub fn pbl_enabled(&self) -> bool {
        self.kind != StrategyKind::FedAvgAll && self.use_pbl
    }

    /// The averaged-everything baseline is evaluated as a global model.
    pub fn fine_tunes(&self) -> bool {
        self.kind != StrategyKind::FedAvgAll
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            use_adapter: self.adapter_enabled(),
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            StrategyKind::FedOAP => format!(
                "fedoap[dca={},adapter={},pbl={}]",
                self.use_dca, self.use_adapter, self.use_pbl
            ),
            k => k.as_str().to_string(),
        }
    }
}
