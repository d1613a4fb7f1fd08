use super::{SegnetError, NORM_EPS};
use crate::autodiff::{Tape, Tensor, Var};

/// Bottleneck keys and values one client publishes for a round. Plain
/// tensors: once published they carry no link to any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct KVTokens {
    pub client_id: u32,
    pub round: u32,
    keys: Tensor,
    values: Tensor,
}

impl KVTokens {
    pub fn new(client_id: u32, round: u32, keys: Tensor, values: Tensor) -> Result<Self, SegnetError> {
        if keys.rank() != 2 || keys.shape() != values.shape() {
            return Err(SegnetError::DimMismatch(format!(
                "keys {:?} and values {:?} must be equal [n, d] matrices",
                keys.shape(),
                values.shape()
            )));
        }
        Ok(KVTokens {
            client_id,
            round,
            keys,
            values,
        })
    }

    pub fn keys(&self) -> &Tensor {
        &self.keys
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn n_tokens(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.keys.shape()[1]
    }

    pub fn scalar_count(&self) -> usize {
        2 * self.keys.numel()
    }
}

/// Foreign tokens stacked into constant `[N, d]` keys and values, in
/// ascending client order. `None` when there are no foreign tokens.
pub(crate) fn foreign_constants(
    tape: &mut Tape,
    foreign: &[KVTokens],
    dim: usize,
) -> Result<Option<(Var, Var)>, SegnetError> {
    let mut sorted: Vec<&KVTokens> = foreign.iter().collect();
    sorted.sort_by_key(|kv| kv.client_id);
    if let Some(bad) = sorted.iter().find(|kv| kv.dim() != dim) {
        return Err(SegnetError::DimMismatch(format!(
            "client {} published d={}, expected {dim}",
            bad.client_id,
            bad.dim()
        )));
    }
    if sorted.is_empty() {
        return Ok(None);
    }
    let stack = |pick: fn(&KVTokens) -> &Tensor| -> Result<Tensor, SegnetError> {
        let n: usize = sorted.iter().map(|kv| kv.n_tokens()).sum();
        let data = sorted.iter().flat_map(|kv| pick(kv).data().iter().copied()).collect();
        Ok(Tensor::new(vec![n, dim], data)?)
    };
    let keys = tape.constant(stack(KVTokens::keys)?);
    let values = tape.constant(stack(KVTokens::values)?);
    Ok(Some((keys, values)))
}

/// Multi-head scaled dot-product attention of `q [n_q, d]` over the row
/// concatenation of `keys`/`values` (each `[n_i, d]`). Heads split the
/// feature axis into contiguous blocks and are concatenated back.
pub(crate) fn attend_stacked(
    tape: &mut Tape,
    q: Var,
    keys: &[Var],
    values: &[Var],
    heads: usize,
) -> Result<Var, SegnetError> {
    let qs = tape.value(q).shape().to_vec();
    if qs.len() != 2 {
        return Err(SegnetError::DimMismatch(format!("queries must be [n, d], got {qs:?}")));
    }
    let d = qs[1];
    if heads == 0 || d % heads != 0 {
        return Err(SegnetError::DimMismatch(format!("d={d} does not split into {heads} heads")));
    }
    if keys.is_empty() || keys.len() != values.len() {
        return Err(SegnetError::EmptyKV);
    }
    for (&k, &v) in keys.iter().zip(values) {
        let (ks, vs) = (tape.value(k).shape(), tape.value(v).shape());
        if ks.len() != 2 || ks[1] != d || ks != vs {
            return Err(SegnetError::DimMismatch(format!(
                "keys {ks:?} / values {vs:?} against d={d}"
            )));
        }
    }
    let k = if keys.len() == 1 { keys[0] } else { tape.concat(keys, 0)? };
    let v = if values.len() == 1 { values[0] } else { tape.concat(values, 0)? };
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 1, h * dh, dh)?,
                tape.slice(k, 1, h * dh, dh)?,
                tape.slice(v, 1, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax(scores)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    Ok(if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? })
}

/// Attention of `q` over live local keys/values followed by foreign tokens
/// in client order. Foreign tokens enter as constants, so no gradient ever
/// reaches them.
pub fn attend(
    tape: &mut Tape,
    q: Var,
    local_keys: Var,
    local_values: Var,
    foreign: &[KVTokens],
    heads: usize,
) -> Result<Var, SegnetError> {
    let d = *tape.value(q).shape().last().unwrap_or(&0);
    let mut keys = vec![local_keys];
    let mut values = vec![local_values];
    if let Some((fk, fv)) = foreign_constants(tape, foreign, d)? {
        keys.push(fk);
        values.push(fv);
    }
    attend_stacked(tape, q, &keys, &values, heads)
}

/// Group-normalizes `[n, d]` tokens with one group per head, statistics
/// taken over the group's channels and all tokens.
pub(crate) fn normalize_tokens(
    tape: &mut Tape,
    tokens: Var,
    groups: usize,
    gamma: Option<Var>,
    beta: Option<Var>,
) -> Result<Var, SegnetError> {
    let s = tape.value(tokens).shape().to_vec();
    let channels_first = tape.transpose(tokens)?;
    let map = tape.reshape(channels_first, &[1, s[1], s[0]])?;
    let normed = tape.group_norm(map, groups, gamma, beta, NORM_EPS)?;
    let flat = tape.reshape(normed, &[s[1], s[0]])?;
    Ok(tape.transpose(flat)?)
}

/// Decoupled cross-attention on plain tensors: `q [n_q, d]` attends over
/// the local tokens then every foreign client's tokens (ascending
/// `client_id`), heads are concatenated and group-normalized (one group
/// per head, no affine).
pub fn dca_attention(
    q: &Tensor,
    local_kv: &KVTokens,
    foreign_kv: &[KVTokens],
    heads: usize,
) -> Result<Tensor, SegnetError> {
    if q.rank() != 2 || q.shape()[1] != local_kv.dim() {
        return Err(SegnetError::DimMismatch(format!(
            "queries {:?} against local d={}",
            q.shape(),
            local_kv.dim()
        )));
    }
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let k = tape.constant(local_kv.keys().clone());
    let v = tape.constant(local_kv.values().clone());
    let out = attend(&mut tape, qv, k, v, foreign_kv, heads)?;
    let normed = normalize_tokens(&mut tape, out, heads, None, None)?;
    Ok(tape.value(normed).clone())
}
