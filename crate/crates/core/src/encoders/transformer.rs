//! Self-attention encoder: sinusoidal positions, blocks of multi-head
//! attention and a position-wise feedforward (each with residual and layer
//! norm), mean-pooled over positions into the document vector.
//!
//! `hidden_dim` sets the feedforward inner dimension.

use super::{EncodeDiag, EncoderConfig};
use crate::autodiff::{init, NodeId, ParamId, Params, Scalar, Tape};
use rand_chacha::ChaCha12Rng;

struct Block {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

pub(super) struct TransformerParams {
    blocks: Vec<Block>,
    n_heads: usize,
    embed_dim: usize,
    positions: bool,
}

impl TransformerParams {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        cfg: &EncoderConfig,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let d = cfg.embed_dim;
        let dff = cfg.hidden_dim;
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("tx.l{l}");
                Block {
                    wq: params.add(format!("{p}.wq"), init::xavier(rng, d, d)),
                    bq: params.add(format!("{p}.bq"), init::zeros_vec(d)),
                    wk: params.add(format!("{p}.wk"), init::xavier(rng, d, d)),
                    bk: params.add(format!("{p}.bk"), init::zeros_vec(d)),
                    wv: params.add(format!("{p}.wv"), init::xavier(rng, d, d)),
                    bv: params.add(format!("{p}.bv"), init::zeros_vec(d)),
                    wo: params.add(format!("{p}.wo"), init::xavier(rng, d, d)),
                    bo: params.add(format!("{p}.bo"), init::zeros_vec(d)),
                    ln1_g: params.add(format!("{p}.ln1.g"), init::ones_vec(d)),
                    ln1_b: params.add(format!("{p}.ln1.b"), init::zeros_vec(d)),
                    ff_w1: params.add(format!("{p}.ff.w1"), init::xavier(rng, d, dff)),
                    ff_b1: params.add(format!("{p}.ff.b1"), init::zeros_vec(dff)),
                    ff_w2: params.add(format!("{p}.ff.w2"), init::xavier(rng, dff, d)),
                    ff_b2: params.add(format!("{p}.ff.b2"), init::zeros_vec(d)),
                    ln2_g: params.add(format!("{p}.ln2.g"), init::ones_vec(d)),
                    ln2_b: params.add(format!("{p}.ln2.b"), init::zeros_vec(d)),
                }
            })
            .collect();
        TransformerParams {
            blocks,
            n_heads: cfg.n_heads,
            embed_dim: d,
            positions: cfg.sinusoidal_positions,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        embedded: NodeId,
        dropout_p: f64,
        rng: &mut ChaCha12Rng,
        diag: &mut EncodeDiag,
    ) -> NodeId {
        let len = tape.shape(embedded)[0];
        let d = self.embed_dim;
        // scale embeddings so the positional signal does not dominate
        let scaled = tape.scale(embedded, T::from_f64((d as f64).sqrt()));
        let x = if self.positions {
            let pe = tape.input(vec![len, d], positional_encoding(len, d));
            tape.add(scaled, pe)
        } else {
            scaled
        };
        let mut x = tape.dropout(x, dropout_p, rng);

        let dh = d / self.n_heads;
        for block in &self.blocks {
            // multi-head self-attention
            let wq = tape.param(block.wq);
            let bq = tape.param(block.bq);
            let q = tape.matmul(x, wq);
            let q = tape.add_bias(q, bq);
            let wk = tape.param(block.wk);
            let bk = tape.param(block.bk);
            let k = tape.matmul(x, wk);
            let k = tape.add_bias(k, bk);
            let wv = tape.param(block.wv);
            let bv = tape.param(block.bv);
            let v = tape.matmul(x, wv);
            let v = tape.add_bias(v, bv);

            let heads: Vec<NodeId> = (0..self.n_heads)
                .map(|h| {
                    let qh = tape.slice_cols(q, h * dh, dh);
                    let kh = tape.slice_cols(k, h * dh, dh);
                    let vh = tape.slice_cols(v, h * dh, dh);
                    let (out, attn) = tape.scaled_dot_attention(qh, kh, vh);
                    let av = tape.values(attn);
                    for r in 0..len {
                        diag.attn_row_sums
                            .push(av[r * len..(r + 1) * len].iter().map(|x| x.as_f64()).sum());
                    }
                    out
                })
                .collect();
            let cat = tape.concat_cols(&heads);
            let wo = tape.param(block.wo);
            let bo = tape.param(block.bo);
            let proj = tape.matmul(cat, wo);
            let proj = tape.add_bias(proj, bo);
            let proj = tape.dropout(proj, dropout_p, rng);
            let res1 = tape.add(x, proj);
            let g1 = tape.param(block.ln1_g);
            let b1 = tape.param(block.ln1_b);
            let normed1 = tape.layer_norm(res1, g1, b1);

            // position-wise feedforward
            let w1 = tape.param(block.ff_w1);
            let fb1 = tape.param(block.ff_b1);
            let h1 = tape.matmul(normed1, w1);
            let h1 = tape.add_bias(h1, fb1);
            let h1 = tape.relu(h1);
            let w2 = tape.param(block.ff_w2);
            let fb2 = tape.param(block.ff_b2);
            let h2 = tape.matmul(h1, w2);
            let h2 = tape.add_bias(h2, fb2);
            let h2 = tape.dropout(h2, dropout_p, rng);
            let res2 = tape.add(normed1, h2);
            let g2 = tape.param(block.ln2_g);
            let b2 = tape.param(block.ln2_b);
            x = tape.layer_norm(res2, g2, b2);
        }
        // pool per-position vectors into the document encoding
        tape.mean_rows(x)
    }
}

/// Standard sinusoidal positional encoding, computed in f64 and narrowed.
fn positional_encoding<T: Scalar>(len: usize, d: usize) -> Vec<T> {
    let mut pe = Vec::with_capacity(len * d);
    for pos in 0..len {
        for j in 0..d {
            let exponent = (2 * (j / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe.push(T::from_f64(if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }));
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_alternates_sin_cos() {
        let pe: Vec<f64> = positional_encoding(3, 4);
        assert_eq!(pe.len(), 12);
        // position 0: sin(0)=0, cos(0)=1 alternating
        assert_eq!(&pe[0..4], &[0.0, 1.0, 0.0, 1.0]);
        // position 1, dim 0: sin(1)
        assert!((pe[4] - 1f64.sin()).abs() < 1e-15);
    }
}
