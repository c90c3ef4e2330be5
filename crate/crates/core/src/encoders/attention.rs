//! Attention pooling over BiLSTM states.
//!
//! With X the (d x L) matrix of per-token states, the mechanism computes
//! M = tanh(W X), attention weights alpha = softmax(w^T M), and the pooled
//! representation r = X alpha^T, which serves as the document vector.

use super::{EncodeDiag, EncoderConfig};
use crate::autodiff::{init, NodeId, ParamId, Params, Scalar, Tape};
use rand_chacha::ChaCha12Rng;

pub(super) struct AttnParams {
    w: ParamId,
    v: ParamId,
}

impl AttnParams {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        cfg: &EncoderConfig,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let d = 2 * cfg.hidden_dim;
        AttnParams {
            w: params.add("attn.w", init::xavier(rng, d, d)),
            v: params.add("attn.v", init::xavier(rng, d, 1)),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        states: &[NodeId],
        diag: &mut EncodeDiag,
    ) -> NodeId {
        // H is (L, d); X = H^T is (d, L)
        let h = tape.stack_rows(states);
        let x = tape.transpose(h);
        let w = tape.param(self.w);
        let m = tape.matmul(w, x);
        let m = tape.tanh(m);
        // alpha = softmax(w^T M): score each column of M against the vector
        let v = tape.param(self.v);
        let vt = tape.transpose(v); // (1, d)
        let scores_mat = tape.matmul(vt, m); // (1, L)
        let scores = tape.row(scores_mat, 0);
        let alpha = tape.softmax_rows(scores);
        diag.attn_row_sums
            .push(tape.values(alpha).iter().map(|x| x.as_f64()).sum());
        // r = X alpha^T
        tape.matvec(x, alpha)
    }
}
