//! Experiment commands: training, the ablation grid, the held-out client
//! and transmission accounting, plus their report files.

mod config;
mod output;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Rng;
use crate::fed_protocol::{
    evaluate_clients, fine_tune, run_alignment, transmission_bytes, Broadcast, ClientState, EvalSplit, FedError,
    Strategy, StrategyKind, TransmissionLedger,
};
use crate::segnet::{init_model, ModelConfig, SegnetError};
use crate::synthdata::{generate_client_dataset, split_dataset, OrganProfile, SynthError};

pub use config::ExperimentConfig;
pub use output::{write_ablation, write_generalization, write_report, write_timing, write_transmission, REPORT_SCHEMA};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{strategy} with {clients} clients: formula {formula} bytes, measured {measured} bytes")]
    FormulaMeasurementMismatch {
        strategy: String,
        clients: usize,
        formula: u64,
        measured: u64,
    },
}

impl HarnessError {
    /// Stable identifier for the single-line CLI error.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Io(_) => "io",
            HarnessError::Fed(_) => "protocol",
            HarnessError::Synth(_) => "data",
            HarnessError::FormulaMeasurementMismatch { .. } => "formula-measurement-mismatch",
        }
    }
}

impl From<SegnetError> for HarnessError {
    fn from(e: SegnetError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl From<crate::calibration::CalibrationError> for HarnessError {
    fn from(e: crate::calibration::CalibrationError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

// Independent random streams drawn from one run seed.
const DATA_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;
const CLIENT_STREAM: u64 = 4;
const HELDOUT_DATA_STREAM: u64 = 5;
const HELDOUT_INIT_STREAM: u64 = 6;

fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    Rng::derive(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15), index).next_u64()
}

/// The clients of one seed, before any training. Data, splits and the
/// common initial model depend only on `(config, seed)`, never on the
/// strategy.
pub fn build_clients(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ClientState>, HarnessError> {
    cfg.validate()?;
    let settings = cfg.train_settings();
    let init = init_model(&settings.model, sub_seed(seed, INIT_STREAM, 0))?;
    cfg.client_profiles()?
        .iter()
        .enumerate()
        .map(|(k, profile)| {
            let k64 = k as u64;
            let samples = generate_client_dataset(
                profile,
                cfg.samples_per_client,
                cfg.image_size,
                sub_seed(seed, DATA_STREAM, k64),
            )?;
            let splits = split_dataset(samples, cfg.test_frac, cfg.val_frac, sub_seed(seed, SPLIT_STREAM, k64))?;
            let steps = settings.steps_per_epoch(splits.train.len()) * cfg.local_epochs as u64 * cfg.rounds as u64;
            Ok(ClientState::new(
                k as u32,
                splits,
                init.clone(),
                settings.clone(),
                steps,
                sub_seed(seed, CLIENT_STREAM, k64),
            )?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: u32,
    pub profile: String,
    /// Mean training loss of every epoch, alignment then fine-tuning.
    pub epoch_losses: Vec<f64>,
    /// Validation Dice before fine-tuning and after each epoch.
    pub finetune_val_dice: Vec<f64>,
    pub best_epoch: usize,
    pub test_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub clients: Vec<ClientReport>,
    pub mean_test_dice: f64,
    pub ledger: TransmissionLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: u32,
    pub profile: String,
    pub test_dice: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    /// Enough to reproduce every number below.
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedReport>,
    pub per_client: Vec<ClientSummary>,
    pub mean_test_dice: MeanStd,
}

impl RunReport {
    fn from_seeds(cfg: &ExperimentConfig, strategy: &Strategy, seeds: Vec<SeedReport>) -> RunReport {
        let per_client = seeds[0]
            .clients
            .iter()
            .enumerate()
            .map(|(i, c)| ClientSummary {
                client_id: c.client_id,
                profile: c.profile.clone(),
                test_dice: MeanStd::of(&seeds.iter().map(|s| s.clients[i].test_dice).collect::<Vec<_>>()),
            })
            .collect();
        let means: Vec<f64> = seeds.iter().map(|s| s.mean_test_dice).collect();
        RunReport {
            strategy: strategy.label(),
            config: cfg.clone(),
            seeds,
            per_client,
            mean_test_dice: MeanStd::of(&means),
        }
    }

    pub fn client_mean(&self, profile: &str) -> Option<f64> {
        self.per_client
            .iter()
            .find(|c| c.profile == profile)
            .map(|c| c.test_dice.mean)
    }
}

/// Everything one seed produced, including the trained clients.
pub struct SeedRun {
    pub report: SeedReport,
    pub clients: Vec<ClientState>,
    pub final_broadcast: Option<Broadcast>,
}

fn aligned(
    cfg: &ExperimentConfig,
    strategy: &Strategy,
    seed: u64,
    observe: &mut dyn FnMut(&[u8]),
) -> Result<(Vec<ClientState>, TransmissionLedger, Option<Broadcast>), HarnessError> {
    let clients = build_clients(cfg, seed)?;
    let out = run_alignment(clients, cfg.rounds, cfg.local_epochs, strategy, observe)?;
    Ok((out.clients, out.ledger, out.final_broadcast))
}

fn finish(
    cfg: &ExperimentConfig,
    strategy: &Strategy,
    seed: u64,
    clients: Vec<ClientState>,
    ledger: TransmissionLedger,
    final_broadcast: Option<Broadcast>,
) -> Result<SeedRun, HarnessError> {
    let pbl = cfg.pbl();
    let tuned: Vec<_> = clients
        .into_par_iter()
        .map(|c| fine_tune(c, cfg.finetune_epochs, &pbl, strategy))
        .collect::<Result<_, _>>()?;
    let test = evaluate_clients(
        &tuned.iter().map(|t| t.client.clone()).collect::<Vec<_>>(),
        EvalSplit::Test,
        strategy,
    )?;
    let profiles = cfg.client_profiles()?;
    let reports = tuned
        .iter()
        .zip(&test.per_client)
        .map(|(t, &(client_id, dice))| ClientReport {
            client_id,
            profile: profiles[client_id as usize].name.clone(),
            epoch_losses: t.client.epoch_losses.clone(),
            finetune_val_dice: t.val_dice.clone(),
            best_epoch: t.best_epoch,
            test_dice: dice,
        })
        .collect();
    Ok(SeedRun {
        report: SeedReport {
            seed,
            clients: reports,
            mean_test_dice: test.mean,
            ledger,
        },
        clients: tuned.into_iter().map(|t| t.client).collect(),
        final_broadcast,
    })
}

/// Alignment, fine-tuning and test evaluation for one seed.
pub fn run_seed(
    cfg: &ExperimentConfig,
    strategy: &Strategy,
    seed: u64,
    observe: &mut dyn FnMut(&[u8]),
) -> Result<SeedRun, HarnessError> {
    let (clients, ledger, last) = aligned(cfg, strategy, seed, observe)?;
    finish(cfg, strategy, seed, clients, ledger, last)
}

/// Runs the configured strategy over every seed.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let strategy = cfg.strategy();
    let seeds = cfg
        .seed_list()
        .into_iter()
        .map(|seed| Ok(run_seed(cfg, &strategy, seed, &mut |_| {})?.report))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(RunReport::from_seeds(cfg, &strategy, seeds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub use_dca: bool,
    pub use_adapter: bool,
    pub use_pbl: bool,
    /// Per-client test Dice averaged over seeds, client order.
    pub per_client: Vec<f64>,
    pub mean: f64,
    /// Mean test Dice of each seed.
    pub seed_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub profiles: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// `(name, dca, adapter, pbl)` for each ablation row.
pub const ABLATION_ROWS: [(&str, bool, bool, bool); 4] = [
    ("none", false, false, false),
    ("dca", true, false, false),
    ("dca+adapter", true, true, false),
    ("dca+adapter+pbl", true, true, true),
];

/// The four FedOAP configurations on shared data and seeds. Rows that
/// differ only in PBL share one alignment run, since PBL only enters
/// during fine-tuning.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<AblationTable, HarnessError> {
    cfg.validate()?;
    let seeds = cfg.seed_list();
    let mut results: BTreeMap<&str, Vec<SeedReport>> = BTreeMap::new();
    for &seed in &seeds {
        let mut by_alignment: BTreeMap<(bool, bool), (Vec<ClientState>, TransmissionLedger, Option<Broadcast>)> =
            BTreeMap::new();
        for &(name, dca, adapter, pbl) in &ABLATION_ROWS {
            let strategy = Strategy {
                kind: StrategyKind::FedOAP,
                use_dca: dca,
                use_adapter: adapter,
                use_pbl: pbl,
            };
            let (clients, ledger, last) = match by_alignment.get(&(dca, adapter)) {
                Some(done) => done.clone(),
                None => {
                    let done = aligned(cfg, &strategy, seed, &mut |_| {})?;
                    by_alignment.insert((dca, adapter), done.clone());
                    done
                }
            };
            let run = finish(cfg, &strategy, seed, clients, ledger, last)?;
            results.entry(name).or_default().push(run.report);
        }
    }
    let rows = ABLATION_ROWS
        .iter()
        .map(|&(name, dca, adapter, pbl)| {
            let runs = &results[name];
            let per_client = (0..cfg.clients)
                .map(|k| runs.iter().map(|r| r.clients[k].test_dice).sum::<f64>() / runs.len() as f64)
                .collect::<Vec<_>>();
            let seed_means: Vec<f64> = runs.iter().map(|r| r.mean_test_dice).collect();
            AblationRow {
                name: name.to_string(),
                use_dca: dca,
                use_adapter: adapter,
                use_pbl: pbl,
                mean: seed_means.iter().sum::<f64>() / seed_means.len() as f64,
                per_client,
                seed_means,
            }
        })
        .collect();
    Ok(AblationTable {
        profiles: cfg.client_profiles()?.into_iter().map(|p| p.name).collect(),
        seeds,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationSeed {
    pub seed: u64,
    pub zero_shot_dice: f64,
    pub fine_tuned_dice: f64,
    pub finetune_val_dice: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub profile: String,
    pub strategy: String,
    pub seeds: Vec<GeneralizationSeed>,
    pub zero_shot_dice: MeanStd,
    pub fine_tuned_dice: MeanStd,
}

/// A client built from the aligned federation's averaged parameters and
/// fresh personal ones, holding data of a profile no training client saw.
pub fn heldout_client(
    cfg: &ExperimentConfig,
    strategy: &Strategy,
    seed: u64,
    aligned: &[ClientState],
    final_broadcast: Option<&Broadcast>,
) -> Result<ClientState, HarnessError> {
    let settings = cfg.train_settings();
    let profile = OrganProfile::by_name(&cfg.heldout_profile)?;
    let samples = generate_client_dataset(
        &profile,
        cfg.samples_per_client,
        cfg.image_size,
        sub_seed(seed, HELDOUT_DATA_STREAM, 0),
    )?;
    let splits = split_dataset(samples, cfg.test_frac, cfg.val_frac, sub_seed(seed, HELDOUT_DATA_STREAM, 1))?;
    let mut params = init_model(&settings.model, sub_seed(seed, HELDOUT_INIT_STREAM, 0))?;
    params
        .overwrite(
            &aligned[0].params.select(strategy.transmitted_tags()),
            strategy.transmitted_tags(),
        )
        .map_err(FedError::from)?;
    let id = cfg.clients as u32;
    let mut client = ClientState::new(id, splits, params, settings, 1, sub_seed(seed, CLIENT_STREAM, id as u64))?;
    if strategy.exchanges_kv() {
        client.foreign_kv_cache = final_broadcast.map(|b| b.all_kv.clone()).unwrap_or_default();
    }
    Ok(client)
}

/// Zero-shot and fine-tuned test Dice of the held-out client.
pub fn cmd_generalize(cfg: &ExperimentConfig) -> Result<GeneralizationReport, HarnessError> {
    cfg.validate()?;
    let strategy = cfg.strategy();
    let mut seeds = Vec::new();
    for seed in cfg.seed_list() {
        let (clients, _, last) = aligned(cfg, &strategy, seed, &mut |_| {})?;
        let fresh = heldout_client(cfg, &strategy, seed, &clients, last.as_ref())?;
        let zero_shot = evaluate_clients(std::slice::from_ref(&fresh), EvalSplit::Test, &strategy)?.mean;
        let tuned = fine_tune(fresh, cfg.finetune_epochs, &cfg.pbl(), &strategy)?;
        let fine_tuned = evaluate_clients(std::slice::from_ref(&tuned.client), EvalSplit::Test, &strategy)?.mean;
        seeds.push(GeneralizationSeed {
            seed,
            zero_shot_dice: zero_shot,
            fine_tuned_dice: fine_tuned,
            finetune_val_dice: tuned.val_dice,
        });
    }
    Ok(GeneralizationReport {
        profile: cfg.heldout_profile.clone(),
        strategy: strategy.label(),
        zero_shot_dice: MeanStd::of(&seeds.iter().map(|s| s.zero_shot_dice).collect::<Vec<_>>()),
        fine_tuned_dice: MeanStd::of(&seeds.iter().map(|s| s.fine_tuned_dice).collect::<Vec<_>>()),
        seeds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionRow {
    /// `desk` rows are measured from a run; `full` rows are formula only.
    pub scale: String,
    pub strategy: String,
    pub clients: usize,
    pub anchor: usize,
    pub uplink_formula: u64,
    pub uplink_measured: Option<u64>,
    pub downlink_formula: u64,
    pub downlink_measured: Option<u64>,
    /// Bytes of one client's KV block inside an upload.
    pub kv_bytes: u64,
    /// Downlink bytes per client per round, in 10^6 bytes.
    pub per_round_mb: f64,
}

fn formula_row(
    scale: &str,
    model: &ModelConfig,
    strategy: &Strategy,
    clients: usize,
    anchor: usize,
) -> Result<TransmissionRow, HarnessError> {
    let with = transmission_bytes(model, strategy, clients, anchor)?;
    let without_kv = transmission_bytes(model, strategy, clients, 0)?;
    Ok(TransmissionRow {
        scale: scale.into(),
        strategy: strategy.label(),
        clients,
        anchor,
        uplink_formula: with.uplink_per_client,
        uplink_measured: None,
        downlink_formula: with.downlink_per_client,
        downlink_measured: None,
        kv_bytes: with.uplink_per_client - without_kv.uplink_per_client,
        per_round_mb: with.downlink_per_client as f64 / 1e6,
    })
}

/// Closed-form bytes for FedOAP and the averaged-everything baseline at
/// one client and at the configured count, checked against the ledger of
/// a run without local training (sizes do not depend on values), plus
/// formula rows at full scale.
pub fn cmd_transmission(cfg: &ExperimentConfig) -> Result<Vec<TransmissionRow>, HarnessError> {
    cfg.validate()?;
    let fedoap = Strategy {
        kind: StrategyKind::FedOAP,
        ..cfg.strategy()
    };
    let strategies = [fedoap, Strategy::fedavg_all()];
    let mut counts = vec![1, cfg.clients];
    counts.dedup();
    let mut rows = Vec::new();
    for strategy in &strategies {
        for &k in &counts {
            let mut row = formula_row("desk", &cfg.model(), strategy, k, cfg.anchor_size)?;
            let run_cfg = ExperimentConfig {
                clients: k,
                local_epochs: 0,
                ..cfg.clone()
            };
            let (clients, ledger, _) = aligned(&run_cfg, strategy, cfg.seed, &mut |_| {})?;
            for round in &ledger.rounds {
                for c in &clients {
                    let up = round.uplink[&c.client_id];
                    let down = round.downlink[&c.client_id];
                    for (formula, measured) in [(row.uplink_formula, up), (row.downlink_formula, down)] {
                        if formula != measured {
                            return Err(HarnessError::FormulaMeasurementMismatch {
                                strategy: strategy.label(),
                                clients: k,
                                formula,
                                measured,
                            });
                        }
                    }
                    row.uplink_measured = Some(up);
                    row.downlink_measured = Some(down);
                }
            }
            rows.push(row);
        }
    }
    for strategy in &strategies {
        rows.push(formula_row("full", &ModelConfig::full(), strategy, cfg.clients, cfg.anchor_size)?);
    }
    Ok(rows)
}
