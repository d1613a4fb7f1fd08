use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::wire::{self, MessageKind, SERVER_ID};
use super::{client_local_round, ClientState, FedError, Strategy};
use crate::autodiff::Tensor;
use crate::segnet::{param_specs, KVTokens, ModelConfig};

/// What a client uploads after its local epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub client_id: u32,
    pub round: u32,
    pub shared_params: BTreeMap<String, Tensor>,
    pub kv_tokens: Option<KVTokens>,
    /// Size of [`encode`](Self::encode)'s output.
    pub payload_bytes: u64,
}

impl RoundMessage {
    pub fn new(client_id: u32, round: u32, shared_params: BTreeMap<String, Tensor>, kv_tokens: Option<KVTokens>) -> Self {
        let payload_bytes = wire::encoded_len(&shared_params, &kv_tokens.iter().collect::<Vec<_>>()) as u64;
        RoundMessage {
            client_id,
            round,
            shared_params,
            kv_tokens,
            payload_bytes,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let kv: Vec<&KVTokens> = self.kv_tokens.iter().collect();
        wire::encode(MessageKind::Upload, self.round, self.client_id, &self.shared_params, &kv)
    }

    /// Parses an upload; tensors come back at f32 precision.
    pub fn decode(bytes: &[u8]) -> Result<Self, FedError> {
        let f = wire::decode(bytes)?;
        if f.kind != MessageKind::Upload || f.kv.len() > 1 {
            return Err(wire::WireError::Malformed(format!("{:?} with {} KV sections is not an upload", f.kind, f.kv.len())).into());
        }
        Ok(RoundMessage::new(f.client_id, f.round, f.tensors, f.kv.into_iter().next()))
    }
}

/// What the server sends every client after aggregating a round.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    /// The round whose local training this broadcast feeds.
    pub round: u32,
    pub averaged_shared: BTreeMap<String, Tensor>,
    /// One entry per uploading client, ascending id.
    pub all_kv: Vec<KVTokens>,
    pub payload_bytes: u64,
}

impl Broadcast {
    pub fn new(round: u32, averaged_shared: BTreeMap<String, Tensor>, all_kv: Vec<KVTokens>) -> Self {
        let payload_bytes = wire::encoded_len(&averaged_shared, &all_kv.iter().collect::<Vec<_>>()) as u64;
        Broadcast {
            round,
            averaged_shared,
            all_kv,
            payload_bytes,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let kv: Vec<&KVTokens> = self.all_kv.iter().collect();
        wire::encode(MessageKind::Broadcast, self.round, SERVER_ID, &self.averaged_shared, &kv)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FedError> {
        let f = wire::decode(bytes)?;
        if f.kind != MessageKind::Broadcast {
            return Err(wire::WireError::Malformed(format!("{:?} is not a broadcast", f.kind)).into());
        }
        Ok(Broadcast::new(f.round, f.tensors, f.kv))
    }
}

/// Elementwise mean of every shared tensor and the clients' tokens in
/// ascending id order. Messages are summed in id order, so the result
/// does not depend on the order they arrive in.
pub fn server_aggregate(messages: &[RoundMessage]) -> Result<Broadcast, FedError> {
    let mut sorted: Vec<&RoundMessage> = messages.iter().collect();
    sorted.sort_by_key(|m| m.client_id);
    let first = *sorted.first().ok_or(FedError::EmptyMessageSet)?;
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(FedError::DuplicateClient(pair[0].client_id));
        }
    }
    for m in &sorted {
        if m.round != first.round {
            return Err(FedError::RoundMismatch {
                expected: first.round,
                found: m.round,
            });
        }
        let same = m.shared_params.len() == first.shared_params.len()
            && m.shared_params
                .iter()
                .zip(&first.shared_params)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape());
        if !same {
            return Err(FedError::NameSetMismatch(format!(
                "client {} differs from client {}",
                m.client_id, first.client_id
            )));
        }
    }
    let k = sorted.len() as f64;
    let averaged = first
        .shared_params
        .iter()
        .map(|(name, t0)| {
            let mut acc = t0.data().to_vec();
            for m in &sorted[1..] {
                acc.iter_mut()
                    .zip(m.shared_params[name].data())
                    .for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= k);
            (name.clone(), Tensor::new(t0.shape().to_vec(), acc).expect("mean of finite values"))
        })
        .collect();
    let all_kv = sorted.iter().filter_map(|m| m.kv_tokens.clone()).collect();
    Ok(Broadcast::new(first.round + 1, averaged, all_kv))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTraffic {
    pub round: u32,
    /// Serialized bytes each client uploaded.
    pub uplink: BTreeMap<u32, u64>,
    /// Serialized bytes each client received.
    pub downlink: BTreeMap<u32, u64>,
}

impl RoundTraffic {
    pub fn uplink_total(&self) -> u64 {
        self.uplink.values().sum()
    }

    pub fn downlink_total(&self) -> u64 {
        self.downlink.values().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransmissionLedger {
    pub rounds: Vec<RoundTraffic>,
}

impl TransmissionLedger {
    pub fn uplink_total(&self) -> u64 {
        self.rounds.iter().map(RoundTraffic::uplink_total).sum()
    }

    pub fn downlink_total(&self) -> u64 {
        self.rounds.iter().map(RoundTraffic::downlink_total).sum()
    }

    pub fn total(&self) -> u64 {
        self.uplink_total() + self.downlink_total()
    }

    /// `(uplink, downlink)` per client over all rounds.
    pub fn client_totals(&self) -> BTreeMap<u32, (u64, u64)> {
        let mut out: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
        for r in &self.rounds {
            for (&c, &b) in &r.uplink {
                out.entry(c).or_default().0 += b;
            }
            for (&c, &b) in &r.downlink {
                out.entry(c).or_default().1 += b;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentOutcome {
    /// In the order they were passed in, each holding the final averaged
    /// slots plus its own personal parameters.
    pub clients: Vec<ClientState>,
    pub ledger: TransmissionLedger,
    /// The last server message, `None` when nothing was sent.
    pub final_broadcast: Option<Broadcast>,
}

/// `rounds` rounds of concurrent local training and server averaging,
/// then a last merge of the final broadcast. `observe` sees every
/// serialized message in send order: uploads by ascending id, then the
/// broadcast.
pub fn run_alignment(
    clients: Vec<ClientState>,
    rounds: u32,
    local_epochs: usize,
    strategy: &Strategy,
    observe: &mut dyn FnMut(&[u8]),
) -> Result<AlignmentOutcome, FedError> {
    if clients.is_empty() {
        return Err(FedError::InvalidArgument("alignment needs at least one client".into()));
    }
    let mut ids = BTreeSet::new();
    if let Some(c) = clients.iter().find(|c| !ids.insert(c.client_id)) {
        return Err(FedError::DuplicateClient(c.client_id));
    }
    let mut clients = clients;
    let mut ledger = TransmissionLedger::default();
    let mut broadcast: Option<Broadcast> = None;
    for round in 0..rounds {
        let results: Vec<Result<(ClientState, RoundMessage), FedError>> = clients
            .into_par_iter()
            .map(|c| client_local_round(c, broadcast.as_ref(), local_epochs, strategy))
            .collect();
        let (next, mut messages): (Vec<ClientState>, Vec<RoundMessage>) =
            results.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().unzip();
        clients = next;
        let mut traffic = RoundTraffic {
            round,
            ..Default::default()
        };
        if strategy.communicates() {
            messages.sort_by_key(|m| m.client_id);
            for m in &messages {
                let bytes = m.encode();
                observe(&bytes);
                traffic.uplink.insert(m.client_id, bytes.len() as u64);
            }
            let b = server_aggregate(&messages)?;
            let bytes = b.encode();
            observe(&bytes);
            for c in &clients {
                traffic.downlink.insert(c.client_id, bytes.len() as u64);
            }
            broadcast = Some(b);
        }
        ledger.rounds.push(traffic);
    }
    if let Some(b) = &broadcast {
        for c in &mut clients {
            c.merge_broadcast(b, strategy)?;
        }
    }
    Ok(AlignmentOutcome {
        clients,
        ledger,
        final_broadcast: broadcast,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransmissionBytes {
    pub uplink_per_client: u64,
    pub downlink_per_client: u64,
    /// Both directions summed over all clients.
    pub round_total: u64,
}

/// Per-round bytes from the model layout alone. Each tensor costs 4 bytes
/// per scalar plus its name and shape descriptor, each KV block 4 bytes
/// per scalar plus a 16-byte prefix, each message a 64-byte header.
pub fn transmission_bytes(
    config: &ModelConfig,
    strategy: &Strategy,
    clients: usize,
    anchor: usize,
) -> Result<TransmissionBytes, FedError> {
    config.validate()?;
    if !strategy.communicates() {
        return Ok(TransmissionBytes {
            uplink_per_client: 0,
            downlink_per_client: 0,
            round_total: 0,
        });
    }
    let tags = strategy.transmitted_tags();
    let params: usize = param_specs(config)
        .iter()
        .filter(|s| tags.contains(&s.tag))
        .map(|s| 4 + s.name.len() + 1 + 4 * s.shape.len() + 4 * s.numel())
        .sum();
    let kv = if strategy.exchanges_kv() && anchor > 0 {
        16 + 4 * 2 * anchor * config.tokens_per_sample() * config.bottleneck_dim()
    } else {
        0
    };
    let up = (wire::HEADER_BYTES + params + kv) as u64;
    let down = (wire::HEADER_BYTES + params + clients * kv) as u64;
    Ok(TransmissionBytes {
        uplink_per_client: up,
        downlink_per_client: down,
        round_total: clients as u64 * (up + down),
    })
}
