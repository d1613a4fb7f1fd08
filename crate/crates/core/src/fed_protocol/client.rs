use serde::{Deserialize, Serialize};

use super::{Broadcast, FedError, RoundMessage, Strategy};
use crate::autodiff::{AdamWConfig, AdamWState, Rng, Tape, Tensor};
use crate::calibration::{composite_pbl_on_tape, per_sample_dice, segmentation_loss_on_tape, PblConfig};
use crate::segnet::{compute_local_kv, forward, forward_on_tape, KVTokens, ModelConfig, ParameterStore};
use crate::synthdata::{stack_batch, Sample, Splits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    /// Samples in the anchor batch that KV tokens are computed from.
    pub anchor_size: usize,
}

impl TrainSettings {
    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.batch_size.max(1)) as u64
    }
}

/// One participant. Owns its data, which never leaves this struct except
/// as gradients folded into parameters and detached KV tokens.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: u32,
    pub params: ParameterStore,
    pub optimizer: AdamWState,
    pub data: Splits,
    pub anchor_batch: Tensor,
    pub rng: Rng,
    /// Other clients' tokens from the latest broadcast, ascending id.
    pub foreign_kv_cache: Vec<KVTokens>,
    pub settings: TrainSettings,
    /// Next round this client expects to take part in.
    pub round: u32,
    /// Mean training loss of every local epoch run so far.
    pub epoch_losses: Vec<f64>,
}

impl ClientState {
    /// `total_steps` sizes the alignment-phase learning-rate schedule.
    pub fn new(
        client_id: u32,
        data: Splits,
        params: ParameterStore,
        settings: TrainSettings,
        total_steps: u64,
        seed: u64,
    ) -> Result<Self, FedError> {
        settings.model.validate()?;
        if data.train.is_empty() {
            return Err(FedError::EmptySplit {
                client: client_id,
                split: "train",
            });
        }
        if settings.batch_size == 0 {
            return Err(FedError::InvalidArgument("batch_size must be positive".into()));
        }
        let anchor: Vec<&Sample> = data.train.iter().take(settings.anchor_size).collect();
        let anchor_batch = if anchor.is_empty() {
            Tensor::zeros(&[0])
        } else {
            stack_batch(&anchor).0
        };
        Ok(ClientState {
            client_id,
            params,
            optimizer: AdamWState::new(settings.optimizer.clone(), total_steps),
            data,
            anchor_batch,
            rng: Rng::new(seed),
            foreign_kv_cache: Vec::new(),
            settings,
            round: 0,
            epoch_losses: Vec::new(),
        })
    }

    /// Overwrites the transmitted slots with the broadcast's averages and
    /// refreshes the foreign token cache. Personal slots are never written.
    pub fn merge_broadcast(&mut self, broadcast: &Broadcast, strategy: &Strategy) -> Result<(), FedError> {
        if broadcast.round != self.round {
            return Err(FedError::RoundMismatch {
                expected: self.round,
                found: broadcast.round,
            });
        }
        self.params
            .overwrite(&broadcast.averaged_shared, strategy.transmitted_tags())?;
        self.foreign_kv_cache = broadcast
            .all_kv
            .iter()
            .filter(|kv| kv.client_id != self.client_id)
            .cloned()
            .collect();
        Ok(())
    }

    fn run_epoch(&mut self, strategy: &Strategy, pbl: Option<&PblConfig>) -> Result<f64, FedError> {
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        self.rng.shuffle(&mut order);
        let options = strategy.forward_options();
        let mut total = 0.0;
        let batches: Vec<Vec<usize>> = order.chunks(self.settings.batch_size).map(<[usize]>::to_vec).collect();
        for idx in &batches {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &self.data.train[i]).collect();
            let (images, masks) = stack_batch(&samples);
            let mut tape = Tape::new();
            let vars = self.params.bind(&mut tape);
            let x = tape.constant(images);
            let y = tape.constant(masks);
            let logits = forward_on_tape(&mut tape, &vars, &self.settings.model, x, &self.foreign_kv_cache, options)?;
            let root = match pbl {
                Some(cfg) => composite_pbl_on_tape(&mut tape, logits, y, cfg, &mut self.rng)?.0,
                None => segmentation_loss_on_tape(&mut tape, logits, y)?.total,
            };
            total += tape.value(root).data()[0];
            let mut grads = tape.backward(root)?;
            let grads = ParameterStore::collect_grads(&vars, &mut grads);
            let adapter = options.use_adapter;
            self.optimizer.update(
                self.params
                    .iter_mut()
                    .filter(|(n, _)| adapter || !n.starts_with("adapter.")),
                &grads,
            )?;
        }
        let mean = total / batches.len() as f64;
        self.epoch_losses.push(mean);
        Ok(mean)
    }

    /// Mean per-sample Dice over `samples`, thresholding logits at 0.
    pub fn mean_dice(&self, samples: &[Sample], strategy: &Strategy) -> Result<f64, FedError> {
        let mut scores = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.settings.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let (images, masks) = stack_batch(&refs);
            let logits = forward(
                &self.params,
                &images,
                &self.foreign_kv_cache,
                &self.settings.model,
                strategy.forward_options(),
            )?;
            scores.extend(per_sample_dice(&logits, &masks)?);
        }
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

/// Merge, `epochs` epochs of AdamW on the segmentation loss, then publish.
pub fn client_local_round(
    mut client: ClientState,
    broadcast: Option<&Broadcast>,
    epochs: usize,
    strategy: &Strategy,
) -> Result<(ClientState, RoundMessage), FedError> {
    if let Some(b) = broadcast {
        client.merge_broadcast(b, strategy)?;
    }
    for _ in 0..epochs {
        client.run_epoch(strategy, None)?;
    }
    let kv = if strategy.exchanges_kv() && client.anchor_batch.rank() == 4 {
        Some(compute_local_kv(
            &client.params,
            &client.anchor_batch,
            &client.settings.model,
            client.client_id,
            client.round,
        )?)
    } else {
        None
    };
    let shared = client.params.select(strategy.transmitted_tags());
    let message = RoundMessage::new(client.client_id, client.round, shared, kv);
    client.round += 1;
    Ok((client, message))
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub client: ClientState,
    /// Validation Dice before fine-tuning, then after each epoch.
    pub val_dice: Vec<f64>,
    /// Index into `val_dice` of the retained parameters.
    pub best_epoch: usize,
}

/// Local epochs on the composite loss (or the plain segmentation loss when
/// PBL is off) with a fresh optimizer and frozen foreign tokens. The
/// parameters scoring the highest validation Dice are kept, the starting
/// point included; ties keep the earlier.
pub fn fine_tune(
    mut client: ClientState,
    epochs: usize,
    cfg: &PblConfig,
    strategy: &Strategy,
) -> Result<FineTuneOutcome, FedError> {
    cfg.validate()?;
    if client.data.val.is_empty() {
        return Err(FedError::EmptyValidationSplit(client.client_id));
    }
    let val = std::mem::take(&mut client.data.val);
    let mut val_dice = vec![client.mean_dice(&val, strategy)?];
    let mut best = (0, client.params.clone());
    if strategy.fine_tunes() && epochs > 0 {
        let steps = client.settings.steps_per_epoch(client.data.train.len()) * epochs as u64;
        client.optimizer = AdamWState::new(client.settings.optimizer.clone(), steps);
        let pbl = strategy.pbl_enabled().then_some(cfg);
        for epoch in 1..=epochs {
            client.run_epoch(strategy, pbl)?;
            let dice = client.mean_dice(&val, strategy)?;
            if dice > val_dice[best.0] {
                best = (epoch, client.params.clone());
            }
            val_dice.push(dice);
        }
    }
    client.data.val = val;
    client.params = best.1;
    Ok(FineTuneOutcome {
        client,
        val_dice,
        best_epoch: best.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// `(client_id, mean Dice)` in the order the clients were given.
    pub per_client: Vec<(u32, f64)>,
    pub mean: f64,
}

pub fn evaluate_clients(clients: &[ClientState], split: EvalSplit, strategy: &Strategy) -> Result<DiceReport, FedError> {
    if clients.is_empty() {
        return Err(FedError::InvalidArgument("no clients to evaluate".into()));
    }
    let per_client = clients
        .iter()
        .map(|c| {
            let (samples, name) = match split {
                EvalSplit::Val => (&c.data.val, "val"),
                EvalSplit::Test => (&c.data.test, "test"),
            };
            if samples.is_empty() {
                return Err(FedError::EmptySplit {
                    client: c.client_id,
                    split: name,
                });
            }
            Ok((c.client_id, c.mean_dice(samples, strategy)?))
        })
        .collect::<Result<Vec<_>, FedError>>()?;
    let mean = per_client.iter().map(|(_, d)| d).sum::<f64>() / per_client.len() as f64;
    Ok(DiceReport { per_client, mean })
}
