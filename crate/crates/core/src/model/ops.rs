use alloc::vec;

use super::params::CELL_FEATURES;
use super::{Dynamics, Interaction, ModelError, ModelParams, RelationParams};
use crate::autodiff::{conv_encoder, gru_cell, ConvEncoderParams, GaussianVars, Tape, Var};

pub(crate) fn dynamics(params: &ModelParams) -> Result<&Dynamics, ModelError> {
    params
        .dynamics
        .as_ref()
        .ok_or_else(|| ModelError::Config(alloc::format!("{} has no recurrent path", params.config.variant)))
}

/// Per-agent visual features `[K, cells + 1 + 16]` of one `[3, h, w]` grid:
/// the agent's head applied at every cell, its maximum, and the globally
/// pooled backbone channels.
pub fn encode_visual(tape: &mut Tape, params: &ModelParams, grid: Var) -> Result<Var, ModelError> {
    let k = params.config.num_agents;
    let g = params.config.cells();
    let oc = ConvEncoderParams::OUT_CHANNELS;
    let enc = conv_encoder(tape, &params.set, &params.backbone, grid)?;
    let flat = tape.reshape(enc.map, &[oc, g])?;
    let w = tape.param(&params.set, params.heads);
    let b = tape.param(&params.set, params.head_bias);
    let spatial = tape.matmul(w, flat)?;
    let spatial = tape.add(spatial, b)?;
    let peak = tape.max_axis(spatial, 1)?;
    let peak = tape.reshape(peak, &[k, 1])?;
    let pooled = tape.reshape(enc.pooled, &[1, oc])?;
    let rows = tape.zeros(&[k, oc]);
    let pooled = tape.add(rows, pooled)?;
    Ok(tape.concat(&[spatial, peak, pooled], 1)?)
}

/// Visual decoder: the agent's spatial map plus a learned correction.
pub fn decode_visual(tape: &mut Tape, params: &ModelParams, v: Var) -> Result<Var, ModelError> {
    let spatial = tape.slice(v, 1, 0, params.config.cells())?;
    let corr = params.dv.forward(tape, &params.set, v)?;
    Ok(tape.add(spatial, corr)?)
}

/// `p(z_t | h_{t-1})` from the prior head.
pub fn prior_step(tape: &mut Tape, params: &ModelParams, h: Var) -> Result<GaussianVars, ModelError> {
    let dy = dynamics(params)?;
    let raw = dy.prior.forward(tape, &params.set, h)?;
    Ok(GaussianVars::from_head(tape, raw, params.config.latent)?)
}

/// Embeds one-hot states `[K, cells]`; shared-state variants flatten the
/// agents into a single row.
pub(crate) fn embed_states(tape: &mut Tape, params: &ModelParams, one_hot: Var) -> Result<Var, ModelError> {
    let dy = dynamics(params)?;
    let e = tape.param(&params.set, dy.embed);
    let emb = tape.matmul(one_hot, e)?;
    let feats = tape.constant(dy.features.clone(), &[params.config.cells(), CELL_FEATURES])?;
    let coords = tape.matmul(one_hot, feats)?;
    let ec = tape.param(&params.set, dy.embed_coords);
    let coords = tape.matmul(coords, ec)?;
    let emb = tape.add(emb, coords)?;
    if params.config.variant.is_shared() {
        let n = tape.shape(emb).iter().product::<usize>();
        Ok(tape.reshape(emb, &[1, n])?)
    } else {
        Ok(emb)
    }
}

/// `q(z_t | h_{t-1}, s_t)` conditioned on the embedded target states.
pub fn encode_posterior(tape: &mut Tape, params: &ModelParams, h: Var, target: Var) -> Result<GaussianVars, ModelError> {
    let dy = dynamics(params)?;
    let emb = embed_states(tape, params, target)?;
    let x = tape.concat(&[h, emb], 1)?;
    let raw = dy.posterior.forward(tape, &params.set, x)?;
    Ok(GaussianVars::from_head(tape, raw, params.config.latent)?)
}

/// Decoder logits and the two attention gates, all `[K, ·]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fused {
    pub logits: Var,
    pub alpha_v: Var,
    pub alpha_h: Var,
}

/// `logits = a_V * DV(v) + a_H * DH(h, mu, sigma)` with
/// `a_i = sigmoid(S_i(v, h, mu, sigma, prev_heat))`.
pub fn fuse_decode(
    tape: &mut Tape,
    params: &ModelParams,
    v: Var,
    h: Var,
    stats: GaussianVars,
    prev_heat: Var,
) -> Result<Fused, ModelError> {
    let dy = dynamics(params)?;
    let dv = decode_visual(tape, params, v)?;
    let hx = tape.concat(&[h, stats.mu, stats.sigma], 1)?;
    let dh = dy.dh.forward(tape, &params.set, hx)?;
    let coef = dy.dh_coords.forward(tape, &params.set, hx)?;
    let feats = tape.constant(dy.features_t.clone(), &[CELL_FEATURES, params.config.cells()])?;
    let smooth = tape.matmul(coef, feats)?;
    let dh = tape.add(dh, smooth)?;
    let sx = tape.concat(&[v, h, stats.mu, stats.sigma, prev_heat], 1)?;
    let av = dy.sv.forward(tape, &params.set, sx)?;
    let alpha_v = tape.sigmoid(av)?;
    let ah = dy.sh.forward(tape, &params.set, sx)?;
    let alpha_h = tape.sigmoid(ah)?;
    let a = tape.mul(alpha_v, dv)?;
    let b = tape.mul(alpha_h, dh)?;
    let logits = tape.add(a, b)?;
    Ok(Fused { logits, alpha_v, alpha_h })
}

/// Edge function on every ordered pair, `[K, K, M]` with entry `[k, j]`
/// the message from `j` to `k`.
fn edge_messages(tape: &mut Tape, params: &ModelParams, rel: &RelationParams, h: Var) -> Result<Var, ModelError> {
    let k = tape.shape(h)[0];
    let m = params.config.message;
    let wr = tape.param(&params.set, rel.receiver);
    let ws = tape.param(&params.set, rel.sender);
    let b = tape.param(&params.set, rel.bias);
    let p = tape.matmul(h, wr)?;
    let p = tape.reshape(p, &[k, 1, m])?;
    let q = tape.matmul(h, ws)?;
    let q = tape.reshape(q, &[1, k, m])?;
    let pre = tape.add(p, q)?;
    let pre = tape.add(pre, b)?;
    let a = tape.relu(pre)?;
    let a = tape.reshape(a, &[k * k, m])?;
    let a = rel.second.forward(tape, &params.set, a)?;
    let a = tape.relu(a)?;
    Ok(tape.reshape(a, &[k, k, m])?)
}

fn node_update(tape: &mut Tape, params: &ModelParams, rel: &RelationParams, h: Var, msg: Var) -> Result<Var, ModelError> {
    let x = tape.concat(&[h, msg], 1)?;
    Ok(rel.node.forward(tape, &params.set, x)?)
}

fn relation_of(params: &ModelParams) -> Result<&RelationParams, ModelError> {
    match &dynamics(params)?.interaction {
        Interaction::Relation(r) | Interaction::SocialPool(r) => Ok(r),
        Interaction::None => Err(ModelError::Config(alloc::format!("{} has no interaction step", params.config.variant))),
    }
}

/// Relation network: `m_k = mean_{j != k} edge(h_k, h_j)`, `h'_k = node(h_k, m_k)`.
pub fn graph_message_pass(tape: &mut Tape, params: &ModelParams, h: Var) -> Result<Var, ModelError> {
    let rel = relation_of(params)?;
    let k = tape.shape(h)[0];
    let msg = if k == 1 {
        tape.zeros(&[1, params.config.message])
    } else {
        let e = edge_messages(tape, params, rel, h)?;
        let w = 1.0 / (k - 1) as f64;
        let mut mask = vec![w; k * k];
        (0..k).for_each(|i| mask[i * k + i] = 0.0);
        let mask = tape.constant(mask, &[k, k, 1])?;
        let e = tape.mul(e, mask)?;
        tape.sum_axis(e, 1)?
    };
    node_update(tape, params, rel, h, msg)
}

/// Social pooling: element-wise max over neighbor embeddings.
pub fn social_pool(tape: &mut Tape, params: &ModelParams, h: Var) -> Result<Var, ModelError> {
    let rel = relation_of(params)?;
    let k = tape.shape(h)[0];
    let msg = if k == 1 {
        tape.zeros(&[1, params.config.message])
    } else {
        let e = edge_messages(tape, params, rel, h)?;
        let mut mask = vec![0.0; k * k];
        (0..k).for_each(|i| mask[i * k + i] = -1e9);
        let mask = tape.constant(mask, &[k, k, 1])?;
        let e = tape.add(e, mask)?;
        tape.max_axis(e, 1)?
    };
    node_update(tape, params, rel, h, msg)
}

/// GRU step on `concat(embed(s), z)`.
pub fn recurrence(tape: &mut Tape, params: &ModelParams, state: Var, z: Var, h: Var) -> Result<Var, ModelError> {
    let dy = dynamics(params)?;
    let emb = embed_states(tape, params, state)?;
    let x = tape.concat(&[emb, z], 1)?;
    Ok(gru_cell(tape, &params.set, &dy.gru, x, h)?)
}
