//! Multi-head self-attention and the encoder block.
//!
//! The block follows the residual ordering
//!
//! ```text
//! y   = MHSA(x) + x
//! out = MLP(LN(y)) + y
//! ```
//!
//! with no normalization around the attention itself and no trailing
//! normalization after the second residual. Query/key/value come from one
//! fused bias-free d×3d projection; the output projection is bias-free as
//! well; the MLP (width 2d, smooth Gaussian-error nonlinearity) carries
//! biases. Attention probabilities are returned as plain values for
//! inspection; gradients flow through the attention inside the tape graph
//! regardless.

use crate::error::{KtpError, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub struct MhsaVars {
    /// Fused d×3d query/key/value projection, no bias.
    pub qkv: VarId,
    /// d×d output projection, no bias.
    pub out: VarId,
    pub heads: usize,
}

pub struct EncoderVars {
    pub mhsa: MhsaVars,
    /// Normalization affine applied before the MLP.
    pub ln_gain: VarId,
    pub ln_bias: VarId,
    /// MLP: d×2d and 2d×d with biases.
    pub mlp_w1: VarId,
    pub mlp_b1: VarId,
    pub mlp_w2: VarId,
    pub mlp_b2: VarId,
    pub ln_eps: f64,
}

/// Scaled dot-product attention for one head.
/// `q`, `k`, `v` are `[B, S, dh]`; returns the head output and the
/// attention probabilities (`[B, S, S]`, rows softmax-normalized).
pub(crate) fn head_attention(
    tape: &mut Tape,
    q: VarId,
    k: VarId,
    v: VarId,
) -> Result<(VarId, VarId)> {
    let dh = *tape.value(q).shape().last().unwrap();
    let kt = tape.permute(k, &[0, 2, 1])?;
    let scores = tape.bmm(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = tape.softmax_lastaxis(scaled)?;
    let out = tape.bmm(attn, v)?;
    Ok((out, attn))
}

/// Multi-head self-attention over `[B, S, d]` tokens.
///
/// Returns the projected output and the per-head attention probabilities
/// as a `[B, h, S, S]` value tensor.
pub fn mhsa(tape: &mut Tape, x: VarId, vars: &MhsaVars) -> Result<(VarId, Tensor)> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(KtpError::Validation(format!(
            "mhsa expects [B, S, d] tokens, got {shape:?}"
        )));
    }
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    if vars.heads == 0 || d % vars.heads != 0 {
        return Err(KtpError::Validation(format!(
            "head count {} must divide model width {d}",
            vars.heads
        )));
    }
    let qkv_shape = tape.value(vars.qkv).shape().to_vec();
    if qkv_shape != [d, 3 * d] {
        return Err(KtpError::ShapeMismatch {
            op: "mhsa qkv",
            left: vec![d, 3 * d],
            right: qkv_shape,
        });
    }
    let dh = d / vars.heads;

    let flat = tape.reshape(x, vec![b * s, d])?;
    let projected = tape.matmul(flat, vars.qkv)?;
    let qkv = tape.reshape(projected, vec![b, s, 3 * d])?;

    let mut head_outs = Vec::with_capacity(vars.heads);
    let mut attn_values = Tensor::zeros(vec![b, vars.heads, s, s]);
    for h in 0..vars.heads {
        let q = tape.narrow(qkv, 2, h * dh, dh)?;
        let k = tape.narrow(qkv, 2, d + h * dh, dh)?;
        let v = tape.narrow(qkv, 2, 2 * d + h * dh, dh)?;
        let (out, attn) = head_attention(tape, q, k, v)?;
        head_outs.push(out);
        let src = tape.value(attn).data();
        for bb in 0..b {
            let dst_base = (bb * vars.heads + h) * s * s;
            let src_base = bb * s * s;
            attn_values.data_mut()[dst_base..dst_base + s * s]
                .copy_from_slice(&src[src_base..src_base + s * s]);
        }
    }

    let merged = tape.concat_lastaxis(&head_outs)?;
    let flat = tape.reshape(merged, vec![b * s, d])?;
    let projected = tape.matmul(flat, vars.out)?;
    let out = tape.reshape(projected, vec![b, s, d])?;
    Ok((out, attn_values))
}

/// Encoder block: attention residual, then normalized MLP residual.
pub fn encoder_block(tape: &mut Tape, x: VarId, vars: &EncoderVars) -> Result<(VarId, Tensor)> {
    let shape = tape.value(x).shape().to_vec();
    let (b, s, d) = (shape[0], shape[1], shape[2]);

    let (attn_out, attn) = mhsa(tape, x, &vars.mhsa)?;
    let y = tape.add(attn_out, x)?;

    let normed = tape.layer_norm(y, vars.ln_gain, vars.ln_bias, vars.ln_eps)?;
    let flat = tape.reshape(normed, vec![b * s, d])?;
    let f = tape.value(vars.mlp_w1).shape()[1];
    let hidden = tape.matmul(flat, vars.mlp_w1)?;
    let b1 = tape.broadcast_to(vars.mlp_b1, vec![b * s, f])?;
    let hidden = tape.add(hidden, b1)?;
    let hidden = tape.gelu(hidden)?;
    let back = tape.matmul(hidden, vars.mlp_w2)?;
    let b2 = tape.broadcast_to(vars.mlp_b2, vec![b * s, d])?;
    let back = tape.add(back, b2)?;
    let mlp_out = tape.reshape(back, vec![b, s, d])?;

    let out = tape.add(mlp_out, y)?;
    Ok((out, attn))
}

/// Lossless layout swap between frames-major `[T, N, d]` and joints-major
/// `[N, T, d]` token tensors (both directions are the same permutation).
pub fn swap_token_axes(tape: &mut Tape, x: VarId) -> Result<VarId> {
    let shape = tape.value(x).shape();
    if shape.len() != 3 {
        return Err(KtpError::Validation(format!(
            "swap_token_axes expects rank-3 tokens, got {shape:?}"
        )));
    }
    tape.permute(x, &[1, 0, 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_check, random_tensor, rng};

    fn mhsa_tensors(d: usize, seed: u64) -> Vec<Tensor> {
        let mut r = rng(seed);
        let bound = 1.0 / (d as f64).sqrt();
        vec![
            random_tensor(&mut r, &[d, 3 * d], -bound, bound),
            random_tensor(&mut r, &[d, d], -bound, bound),
        ]
    }

    fn encoder_tensors(d: usize, seed: u64) -> Vec<Tensor> {
        let mut r = rng(seed);
        let bound = 1.0 / (d as f64).sqrt();
        let f = 2 * d;
        vec![
            random_tensor(&mut r, &[d, 3 * d], -bound, bound), // qkv
            random_tensor(&mut r, &[d, d], -bound, bound),     // out
            random_tensor(&mut r, &[d], 0.8, 1.2),             // ln gain
            random_tensor(&mut r, &[d], -0.1, 0.1),            // ln bias
            random_tensor(&mut r, &[d, f], -bound, bound),     // w1
            random_tensor(&mut r, &[f], -0.1, 0.1),            // b1
            random_tensor(&mut r, &[f, d], -bound, bound),     // w2
            random_tensor(&mut r, &[d], -0.1, 0.1),            // b2
        ]
    }

    fn encoder_vars(ids: &[VarId], heads: usize) -> EncoderVars {
        EncoderVars {
            mhsa: MhsaVars {
                qkv: ids[0],
                out: ids[1],
                heads,
            },
            ln_gain: ids[2],
            ln_bias: ids[3],
            mlp_w1: ids[4],
            mlp_b1: ids[5],
            mlp_w2: ids[6],
            mlp_b2: ids[7],
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn mhsa_attention_rows_are_probabilities() {
        let (b, s, d, h) = (3, 5, 8, 2);
        let mut r = rng(51);
        let x_t = random_tensor(&mut r, &[b, s, d], -1.0, 1.0);
        let ws = mhsa_tensors(d, 52);
        let mut tape = Tape::new();
        let x = tape.constant(x_t);
        let qkv = tape.param(ws[0].clone());
        let out_w = tape.param(ws[1].clone());
        let (out, attn) = mhsa(
            &mut tape,
            x,
            &MhsaVars {
                qkv,
                out: out_w,
                heads: h,
            },
        )
        .unwrap();
        assert_eq!(tape.value(out).shape(), &[b, s, d]);
        assert_eq!(attn.shape(), &[b, h, s, s]);
        for row in attn.data().chunks_exact(s) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9, "attention row sums to {sum}");
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn mhsa_rejects_indivisible_heads() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 6]));
        let qkv = tape.constant(Tensor::zeros(vec![6, 18]));
        let out = tape.constant(Tensor::zeros(vec![6, 6]));
        let res = mhsa(
            &mut tape,
            x,
            &MhsaVars {
                qkv,
                out,
                heads: 4,
            },
        );
        assert!(res.is_err());
    }

    #[test]
    fn head_attention_is_invariant_to_constant_key_shift() {
        // Shifting every key by one constant vector adds a row-constant
        // term to the scores, which softmax removes.
        let (b, s, dh) = (2, 4, 3);
        let mut r = rng(53);
        let q_t = random_tensor(&mut r, &[b, s, dh], -1.0, 1.0);
        let k_t = random_tensor(&mut r, &[b, s, dh], -1.0, 1.0);
        let v_t = random_tensor(&mut r, &[b, s, dh], -1.0, 1.0);
        let delta = random_tensor(&mut r, &[1, 1, dh], -5.0, 5.0);

        let mut tape = Tape::new();
        let q = tape.constant(q_t.clone());
        let k = tape.constant(k_t.clone());
        let v = tape.constant(v_t.clone());
        let (out_a, _) = head_attention(&mut tape, q, k, v).unwrap();

        let d = tape.constant(delta);
        let db = tape.broadcast_to(d, vec![b, s, dh]).unwrap();
        let k_shifted = tape.add(k, db).unwrap();
        let (out_b, _) = head_attention(&mut tape, q, k_shifted, v).unwrap();

        for (a, b) in tape.value(out_a).data().iter().zip(tape.value(out_b).data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn mhsa_gradients_match_fd() {
        let (b, s, d, h) = (2, 3, 4, 2);
        let mut r = rng(54);
        let mut inputs = mhsa_tensors(d, 55);
        inputs.push(random_tensor(&mut r, &[b, s, d], -1.0, 1.0)); // x as input 2
        fd_check(
            |tape, ids| {
                let (out, _) = mhsa(
                    tape,
                    ids[2],
                    &MhsaVars {
                        qkv: ids[0],
                        out: ids[1],
                        heads: h,
                    },
                )
                .unwrap();
                let sq = tape.mul(out, out).unwrap();
                tape.sum_all(sq).unwrap()
            },
            &inputs,
            1e-4,
        );
    }

    #[test]
    fn encoder_block_zero_weights_is_identity() {
        let (b, s, d) = (2, 3, 4);
        let mut r = rng(56);
        let x_t = random_tensor(&mut r, &[b, s, d], -1.0, 1.0);
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let vars = EncoderVars {
            mhsa: MhsaVars {
                qkv: tape.param(Tensor::zeros(vec![d, 3 * d])),
                out: tape.param(Tensor::zeros(vec![d, d])),
                heads: 2,
            },
            ln_gain: tape.param(Tensor::full(vec![d], 1.0)),
            ln_bias: tape.param(Tensor::zeros(vec![d])),
            mlp_w1: tape.param(Tensor::zeros(vec![d, 2 * d])),
            mlp_b1: tape.param(Tensor::zeros(vec![2 * d])),
            mlp_w2: tape.param(Tensor::zeros(vec![2 * d, d])),
            mlp_b2: tape.param(Tensor::zeros(vec![d])),
            ln_eps: 1e-5,
        };
        let (out, _) = encoder_block(&mut tape, x, &vars).unwrap();
        assert_eq!(tape.value(out).data(), x_t.data());
    }

    #[test]
    fn encoder_block_gradients_match_fd() {
        let (b, s, d, h) = (2, 3, 4, 2);
        let mut r = rng(57);
        let mut inputs = encoder_tensors(d, 58);
        inputs.push(random_tensor(&mut r, &[b, s, d], -1.0, 1.0));
        fd_check(
            |tape, ids| {
                let vars = encoder_vars(&ids[..8], h);
                let (out, _) = encoder_block(tape, ids[8], &vars).unwrap();
                let sq = tape.mul(out, out).unwrap();
                tape.sum_all(sq).unwrap()
            },
            &inputs,
            1e-4,
        );
    }

    #[test]
    fn encoder_block_is_equivariant_under_token_permutation() {
        // No positional information lives inside the block, so permuting
        // tokens permutes the output identically.
        let (b, s, d, h) = (2, 4, 4, 2);
        let perm = [3usize, 1, 0, 2];
        let mut r = rng(59);
        let x_t = random_tensor(&mut r, &[b, s, d], -1.0, 1.0);
        let ws = encoder_tensors(d, 60);

        let run = |x_t: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let ids: Vec<VarId> = ws.iter().map(|w| tape.param(w.clone())).collect();
            let x = tape.constant(x_t.clone());
            let vars = encoder_vars(&ids, h);
            let (out, _) = encoder_block(&mut tape, x, &vars).unwrap();
            tape.value(out).data().to_vec()
        };

        let mut x_perm = Tensor::zeros(vec![b, s, d]);
        for bb in 0..b {
            for (newi, &oldi) in perm.iter().enumerate() {
                for c in 0..d {
                    x_perm.data_mut()[(bb * s + newi) * d + c] =
                        x_t.data()[(bb * s + oldi) * d + c];
                }
            }
        }
        let base = run(&x_t);
        let permuted = run(&x_perm);
        for bb in 0..b {
            for (newi, &oldi) in perm.iter().enumerate() {
                for c in 0..d {
                    let a = permuted[(bb * s + newi) * d + c];
                    let e = base[(bb * s + oldi) * d + c];
                    assert!((a - e).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn swap_token_axes_roundtrip_is_lossless() {
        let mut r = rng(61);
        let x_t = random_tensor(&mut r, &[5, 3, 2], -1.0, 1.0);
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let swapped = swap_token_axes(&mut tape, x).unwrap();
        assert_eq!(tape.value(swapped).shape(), &[3, 5, 2]);
        let back = swap_token_axes(&mut tape, swapped).unwrap();
        assert_eq!(tape.value(back).data(), x_t.data());
    }
}
