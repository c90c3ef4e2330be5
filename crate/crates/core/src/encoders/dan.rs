//! Deep averaging encoder: mean of word embeddings passed through a tanh
//! feedforward stack. Order-invariant by construction.

use super::EncoderConfig;
use crate::autodiff::{init, NodeId, ParamId, Params, Scalar, Tape};
use rand_chacha::ChaCha12Rng;

pub(super) struct DanParams {
    layers: Vec<(ParamId, ParamId)>,
}

impl DanParams {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        cfg: &EncoderConfig,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let d = cfg.embed_dim;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let w = params.add(format!("dan.l{l}.w"), init::xavier(rng, d, d));
                let b = params.add(format!("dan.l{l}.b"), init::zeros_vec(d));
                (w, b)
            })
            .collect();
        DanParams { layers }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        embedded: NodeId,
        dropout_p: f64,
        rng: &mut ChaCha12Rng,
    ) -> NodeId {
        let mut h = tape.mean_rows(embedded);
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wn = tape.param(w);
            let bn = tape.param(b);
            let z = tape.matvec(wn, h);
            let z = tape.add(z, bn);
            h = tape.tanh(z);
            if i + 1 < self.layers.len() {
                h = tape.dropout(h, dropout_p, rng);
            }
        }
        h
    }
}
