//! Kinematics and trajectory prior attention.
//!
//! Both stages share one scheme: tokens are linearly transformed, gated by
//! a learnable elementwise modulation, then mixed across the token axis by
//! a combined affinity matrix ([`crate::topology::combine`]). The
//! kinematics stage (KPA) also performs the 2D-to-model-width embedding and
//! mixes across joints; the trajectory stage (TPA) keeps the width and
//! mixes across frames. The TPA is applied as a residual stack, and the
//! temporal position embedding is added once after the stack.
//!
//! Affinity matrices act on the token-index axis only; channels never mix
//! through them.

use crate::error::{KtpError, Result};
use crate::tape::{Tape, VarId};
use crate::topology::combine;

/// Tape handles for one KPA application.
pub struct KpaVars {
    /// 2×d embedding of the 2D joint coordinates.
    pub embed: VarId,
    /// N×N fixed local topology (skeleton adjacency with self-loops).
    pub local: VarId,
    /// N×N learned global adjustment.
    pub global: VarId,
    /// N×d elementwise token modulation.
    pub modulation: VarId,
    /// N×d spatial position embedding, broadcast over frames.
    pub pos: VarId,
}

/// Tape handles for one TPA block (the temporal position embedding is
/// shared by the whole stack and lives in [`tpa_stack`]'s arguments).
pub struct TpaBlockVars {
    /// d×d token transform.
    pub transform: VarId,
    /// T×T fixed local topology (frame band).
    pub local: VarId,
    /// T×T learned global adjustment.
    pub global: VarId,
    /// T×d elementwise token modulation.
    pub modulation: VarId,
}

/// Mix `x` across axis 1 by `affinity`: `out[b, i, c] = Σ_j A[i, j] x[b, j, c]`.
///
/// Routed through a single rank-2 matmul by folding the batch and channel
/// axes together on the right-hand side.
fn mix_axis1(tape: &mut Tape, x: VarId, affinity: VarId) -> Result<VarId> {
    let shape = tape.value(x).shape().to_vec();
    debug_assert_eq!(shape.len(), 3);
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let xp = tape.permute(x, &[1, 0, 2])?; // S×B×d
    let flat = tape.reshape(xp, vec![s, b * d])?;
    let mixed = tape.matmul(affinity, flat)?; // S×(B·d)
    let unflat = tape.reshape(mixed, vec![s, b, d])?;
    tape.permute(unflat, &[1, 0, 2]) // B×S×d
}

/// Kinematics prior attention: `[T, N, 2] -> [T, N, d]`.
///
/// Embeds the 2D coordinates, gates each joint token, mixes joints through
/// the combined skeleton affinity, and adds the spatial position embedding.
pub fn kpa_forward(tape: &mut Tape, x: VarId, vars: &KpaVars) -> Result<VarId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != 2 {
        return Err(KtpError::Validation(format!(
            "kpa_forward expects [T, N, 2] input, got {shape:?}"
        )));
    }
    let (t, n) = (shape[0], shape[1]);
    let d = tape.value(vars.embed).shape()[1];

    let flat = tape.reshape(x, vec![t * n, 2])?;
    let embedded = tape.matmul(flat, vars.embed)?;
    let tokens = tape.reshape(embedded, vec![t, n, d])?;

    let gate = tape.broadcast_to(vars.modulation, vec![t, n, d])?;
    let gated = tape.mul(gate, tokens)?;

    let affinity = combine(tape, vars.local, vars.global)?;
    let mixed = mix_axis1(tape, gated, affinity)?;

    let pos = tape.broadcast_to(vars.pos, vec![t, n, d])?;
    tape.add(mixed, pos)
}

/// One trajectory prior block: `[N, T, d] -> [N, T, d]`, frame mixing only.
pub fn tpa_block(tape: &mut Tape, x: VarId, vars: &TpaBlockVars) -> Result<VarId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(KtpError::Validation(format!(
            "tpa_block expects [N, T, d] input, got {shape:?}"
        )));
    }
    let (n, t, d) = (shape[0], shape[1], shape[2]);

    let flat = tape.reshape(x, vec![n * t, d])?;
    let transformed = tape.matmul(flat, vars.transform)?;
    let tokens = tape.reshape(transformed, vec![n, t, d])?;

    let gate = tape.broadcast_to(vars.modulation, vec![n, t, d])?;
    let gated = tape.mul(gate, tokens)?;

    let affinity = combine(tape, vars.local, vars.global)?;
    // Frame axis is axis 1 in the [N, T, d] layout.
    mix_axis1(tape, gated, affinity)
}

/// Residual TPA stack: blocks applied in sequence, one residual from the
/// stack input, then the shared temporal position embedding.
///
/// `tpa_stack(x) = blockₖ(…block₁(x)…) + x + pos`
pub fn tpa_stack(
    tape: &mut Tape,
    x: VarId,
    blocks: &[TpaBlockVars],
    temporal_pos: VarId,
) -> Result<VarId> {
    if blocks.is_empty() {
        return Err(KtpError::Validation(
            "tpa_stack needs at least one block".into(),
        ));
    }
    let shape = tape.value(x).shape().to_vec();
    let mut h = x;
    for block in blocks {
        h = tpa_block(tape, h, block)?;
    }
    let res = tape.add(h, x)?;
    let pos = tape.broadcast_to(temporal_pos, shape)?;
    tape.add(res, pos)
}
