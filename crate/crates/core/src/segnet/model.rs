use std::collections::BTreeMap;

use super::attention::{attend_stacked, foreign_constants};
use super::{KVTokens, ModelConfig, ParameterStore, SegnetError, NORM_EPS};
use crate::autodiff::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// When false the adapter block is skipped; its parameters stay in the
    /// store but receive zero gradient.
    pub use_adapter: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { use_adapter: true }
    }
}

struct Net<'a> {
    tape: &'a mut Tape,
    vars: &'a BTreeMap<String, Var>,
    config: &'a ModelConfig,
}

impl Net<'_> {
    fn p(&self, name: &str) -> Result<Var, SegnetError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| SegnetError::UnknownParameter(name.to_string()))
    }

    fn conv_norm_relu(&mut self, x: Var, weight: &str) -> Result<Var, SegnetError> {
        let w = self.p(weight)?;
        let y = self.tape.conv2d(x, w, None, 1, 1)?;
        let y = self.tape.instance_norm(y, NORM_EPS)?;
        Ok(self.tape.relu(y)?)
    }

    fn double_conv(&mut self, x: Var, prefix: &str) -> Result<Var, SegnetError> {
        let y = self.conv_norm_relu(x, &format!("{prefix}.conv1.weight"))?;
        self.conv_norm_relu(y, &format!("{prefix}.conv2.weight"))
    }

    fn pointwise(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var, SegnetError> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = if bias { Some(self.p(&format!("{prefix}.bias"))?) } else { None };
        Ok(self.tape.conv2d(x, w, b, 1, 0)?)
    }

    /// Encoder feature maps for every level, shallowest first.
    fn encode(&mut self, x: Var) -> Result<Vec<Var>, SegnetError> {
        let mut levels = vec![self.double_conv(x, "enc0")?];
        for l in 1..=self.config.depth {
            let pooled = self.tape.maxpool2d(levels[l - 1])?;
            levels.push(self.double_conv(pooled, &format!("down{l}"))?);
        }
        Ok(levels)
    }

    /// Keys and values `[B, d, h, w]` from the deepest encoder map.
    fn key_values(&mut self, deepest: Var) -> Result<(Var, Var), SegnetError> {
        let kv = self.conv_norm_relu(deepest, "bottleneck.kv_branch.weight")?;
        let k = self.pointwise(kv, "attention.key", false)?;
        let v = self.pointwise(kv, "attention.value", true)?;
        Ok((k, v))
    }

    /// Per-image token matrices `[h·w, d]`, spatial positions row-major.
    fn tokens(&mut self, map: Var) -> Result<Vec<Var>, SegnetError> {
        let s = self.tape.value(map).shape().to_vec();
        (0..s[0])
            .map(|i| {
                let one = self.tape.slice(map, 0, i, 1)?;
                let flat = self.tape.reshape(one, &[s[1], s[2] * s[3]])?;
                Ok(self.tape.transpose(flat)?)
            })
            .collect()
    }
}

fn check_batch(shape: &[usize], config: &ModelConfig) -> Result<(), SegnetError> {
    let s = config.image_size;
    if shape.len() != 4 || shape[1] != config.in_channels || shape[2] != s || shape[3] != s {
        return Err(SegnetError::ShapeMismatch(format!(
            "batch {shape:?}, expected [B, {}, {s}, {s}]",
            config.in_channels
        )));
    }
    Ok(())
}

/// Records the full network on `tape` and returns logits `[B, 1, H, W]`.
///
/// Each image's queries attend over that image's own key/value tokens
/// followed by the frozen foreign tokens, so an image's output never
/// depends on which other images share its batch.
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    config: &ModelConfig,
    batch: Var,
    foreign_kv: &[KVTokens],
    options: ForwardOptions,
) -> Result<Var, SegnetError> {
    config.validate()?;
    check_batch(tape.value(batch).shape(), config)?;
    let d = config.bottleneck_dim();
    let side = config.bottleneck_side();
    let foreign = foreign_constants(tape, foreign_kv, d)?;
    let mut net = Net { tape, vars, config };

    let levels = net.encode(batch)?;
    let deepest = levels[config.depth];
    let query_map = net.conv_norm_relu(deepest, "bottleneck.query_branch.weight")?;
    let q = net.pointwise(query_map, "attention.query", true)?;
    let (k, v) = net.key_values(deepest)?;
    let (qs, ks, vs) = (net.tokens(q)?, net.tokens(k)?, net.tokens(v)?);

    let mut attended = Vec::with_capacity(qs.len());
    for ((qi, ki), vi) in qs.into_iter().zip(ks).zip(vs) {
        let (keys, values) = match foreign {
            Some((fk, fv)) => (vec![ki, fk], vec![vi, fv]),
            None => (vec![ki], vec![vi]),
        };
        let out = attend_stacked(net.tape, qi, &keys, &values, config.attention_heads)?;
        let channels_first = net.tape.transpose(out)?;
        attended.push(net.tape.reshape(channels_first, &[1, d, side, side])?);
    }
    let attended = net.tape.concat(&attended, 0)?;
    let (gamma, beta) = (net.p("attention.norm.gamma")?, net.p("attention.norm.beta")?);
    let normed = net
        .tape
        .group_norm(attended, config.attention_heads, Some(gamma), Some(beta), NORM_EPS)?;
    let projected = net.pointwise(normed, "attention.output", false)?;
    let z = net.tape.add(query_map, projected)?;

    let joined = net.tape.concat(&[z, deepest], 1)?;
    let mut x = net.double_conv(joined, "fuse")?;
    for l in (0..config.depth).rev() {
        let w = net.p(&format!("up{l}.transpose.weight"))?;
        let up = net.tape.conv_transpose2d(x, w, None, 2)?;
        let joined = net.tape.concat(&[up, levels[l]], 1)?;
        x = net.double_conv(joined, &format!("up{l}"))?;
    }
    if options.use_adapter {
        let (w1, b1) = (net.p("adapter.conv1.weight")?, net.p("adapter.conv1.bias")?);
        let (w2, b2) = (net.p("adapter.conv2.weight")?, net.p("adapter.conv2.bias")?);
        let h = net.tape.conv2d(x, w1, Some(b1), 1, 1)?;
        let h = net.tape.relu(h)?;
        let h = net.tape.conv2d(h, w2, Some(b2), 1, 1)?;
        x = net.tape.add(x, h)?;
    }
    net.pointwise(x, "head", true)
}

fn bind_constants(params: &ParameterStore, tape: &mut Tape) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(n, t, _)| (n.to_string(), tape.constant(t.clone())))
        .collect()
}

/// Logits `[B, 1, H, W]` for `batch`, without recording gradients.
pub fn forward(
    params: &ParameterStore,
    batch: &Tensor,
    foreign_kv: &[KVTokens],
    config: &ModelConfig,
    options: ForwardOptions,
) -> Result<Tensor, SegnetError> {
    let mut tape = Tape::new();
    let vars = bind_constants(params, &mut tape);
    let x = tape.constant(batch.clone());
    let logits = forward_on_tape(&mut tape, &vars, config, x, foreign_kv, options)?;
    Ok(tape.value(logits).clone())
}

/// Runs the encoder and key/value branch on an anchor batch `[A, C, H, W]`
/// and publishes `A·(H/2^depth)²` detached tokens, sample by sample.
pub fn compute_local_kv(
    params: &ParameterStore,
    anchor_batch: &Tensor,
    config: &ModelConfig,
    client_id: u32,
    round: u32,
) -> Result<KVTokens, SegnetError> {
    config.validate()?;
    check_batch(anchor_batch.shape(), config)?;
    let mut tape = Tape::new();
    let vars = bind_constants(params, &mut tape);
    let x = tape.constant(anchor_batch.clone());
    let mut net = Net {
        tape: &mut tape,
        vars: &vars,
        config,
    };
    let levels = net.encode(x)?;
    let (k, v) = net.key_values(levels[config.depth])?;
    let (ks, vs) = (net.tokens(k)?, net.tokens(v)?);
    let keys = net.tape.concat(&ks, 0)?;
    let values = net.tape.concat(&vs, 0)?;
    KVTokens::new(
        client_id,
        round,
        tape.value(keys).clone(),
        tape.value(values).clone(),
    )
}
