//! LSTM and GRU stacks, unidirectional or bidirectional.
//!
//! The LSTM carries input/forget/output gates plus a cell state; the GRU a
//! reset and an update gate. The bidirectional document vector concatenates
//! each direction's final state: the forward state after the last token and
//! the backward state after the first.

use super::{EncoderConfig, EncoderKind};
use crate::autodiff::{init, NodeId, ParamId, Params, Scalar, Tape};
use rand_chacha::ChaCha12Rng;

struct Gate {
    wx: ParamId,
    uh: ParamId,
    b: ParamId,
}

impl Gate {
    fn init<T: Scalar>(
        params: &mut Params<T>,
        prefix: &str,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Gate {
            wx: params.add(format!("{prefix}.w_{name}"), init::xavier(rng, hidden, in_dim)),
            uh: params.add(format!("{prefix}.u_{name}"), init::xavier(rng, hidden, hidden)),
            b: params.add(format!("{prefix}.b_{name}"), init::zeros_vec(hidden)),
        }
    }

    fn pre<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: NodeId, h: NodeId) -> NodeId {
        let wx = tape.param(self.wx);
        let uh = tape.param(self.uh);
        let b = tape.param(self.b);
        let a = tape.matvec(wx, x);
        let c = tape.matvec(uh, h);
        let s = tape.add(a, c);
        tape.add(s, b)
    }
}

enum Cell {
    Lstm {
        input: Gate,
        forget: Gate,
        cand: Gate,
        output: Gate,
    },
    Gru {
        reset: Gate,
        update: Gate,
        cand: Gate,
    },
}

impl Cell {
    fn init<T: Scalar>(
        params: &mut Params<T>,
        kind: EncoderKind,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        match kind {
            EncoderKind::Lstm | EncoderKind::BiLstm | EncoderKind::BiLstmAttn => Cell::Lstm {
                input: Gate::init(params, prefix, "i", in_dim, hidden, rng),
                forget: Gate::init(params, prefix, "f", in_dim, hidden, rng),
                cand: Gate::init(params, prefix, "g", in_dim, hidden, rng),
                output: Gate::init(params, prefix, "o", in_dim, hidden, rng),
            },
            EncoderKind::Gru | EncoderKind::BiGru => Cell::Gru {
                reset: Gate::init(params, prefix, "r", in_dim, hidden, rng),
                update: Gate::init(params, prefix, "z", in_dim, hidden, rng),
                cand: Gate::init(params, prefix, "n", in_dim, hidden, rng),
            },
            _ => unreachable!("not a recurrent encoder"),
        }
    }

    /// One recurrence step; `state` is (h, c) for the LSTM and (h, h) for
    /// the GRU.
    fn step<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        x: NodeId,
        state: (NodeId, NodeId),
    ) -> (NodeId, NodeId) {
        let (h, c) = state;
        match self {
            Cell::Lstm {
                input,
                forget,
                cand,
                output,
            } => {
                let i_pre = input.pre(tape, x, h);
                let i = tape.sigmoid(i_pre);
                let f_pre = forget.pre(tape, x, h);
                let f = tape.sigmoid(f_pre);
                let g_pre = cand.pre(tape, x, h);
                let g = tape.tanh(g_pre);
                let o_pre = output.pre(tape, x, h);
                let o = tape.sigmoid(o_pre);
                let fc = tape.mul(f, c);
                let ig = tape.mul(i, g);
                let c2 = tape.add(fc, ig);
                let tc = tape.tanh(c2);
                let h2 = tape.mul(o, tc);
                (h2, c2)
            }
            Cell::Gru {
                reset,
                update,
                cand,
            } => {
                let r_pre = reset.pre(tape, x, h);
                let r = tape.sigmoid(r_pre);
                let z_pre = update.pre(tape, x, h);
                let z = tape.sigmoid(z_pre);
                // candidate applies the reset gate to the recurrent term
                let wn = tape.param(cand.wx);
                let un = tape.param(cand.uh);
                let bn = tape.param(cand.b);
                let wx = tape.matvec(wn, x);
                let uhh = tape.matvec(un, h);
                let ruh = tape.mul(r, uhh);
                let s = tape.add(wx, ruh);
                let n_pre = tape.add(s, bn);
                let n = tape.tanh(n_pre);
                // h' = (1 - z) * n + z * h
                let zn = tape.mul(z, n);
                let zh = tape.mul(z, h);
                let d = tape.sub(n, zn);
                let h2 = tape.add(d, zh);
                (h2, h2)
            }
        }
    }
}

struct Layer {
    fwd: Cell,
    bwd: Option<Cell>,
}

struct LayerOut {
    /// Per-position outputs: `[fwd_t; bwd_t]` when bidirectional.
    states: Vec<NodeId>,
    fwd_last: NodeId,
    bwd_last: Option<NodeId>,
}

pub(super) struct RnnStack {
    layers: Vec<Layer>,
    hidden: usize,
}

impl RnnStack {
    pub fn init<T: Scalar>(
        params: &mut Params<T>,
        cfg: &EncoderConfig,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let bidirectional = matches!(
            cfg.kind,
            EncoderKind::BiLstm | EncoderKind::BiGru | EncoderKind::BiLstmAttn
        );
        let family = match cfg.kind {
            EncoderKind::Lstm | EncoderKind::BiLstm | EncoderKind::BiLstmAttn => "lstm",
            _ => "gru",
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let in_dim = if l == 0 {
                cfg.embed_dim
            } else if bidirectional {
                2 * cfg.hidden_dim
            } else {
                cfg.hidden_dim
            };
            let fwd = Cell::init(
                params,
                cfg.kind,
                &format!("{family}.l{l}.fwd"),
                in_dim,
                cfg.hidden_dim,
                rng,
            );
            let bwd = bidirectional.then(|| {
                Cell::init(
                    params,
                    cfg.kind,
                    &format!("{family}.l{l}.bwd"),
                    in_dim,
                    cfg.hidden_dim,
                    rng,
                )
            });
            layers.push(Layer { fwd, bwd });
        }
        RnnStack {
            layers,
            hidden: cfg.hidden_dim,
        }
    }

    fn zero_state<T: Scalar>(&self, tape: &mut Tape<'_, T>) -> (NodeId, NodeId) {
        let h = tape.input_vec(vec![T::zero(); self.hidden]);
        let c = tape.input_vec(vec![T::zero(); self.hidden]);
        (h, c)
    }

    /// Run one cell over the inputs; `reverse` consumes them back to front.
    /// Returned states are aligned to input positions, so for the reversed
    /// direction the entry at position 0 is that direction's final state.
    fn run_direction<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        cell: &Cell,
        inputs: &[NodeId],
        reverse: bool,
    ) -> Vec<NodeId> {
        let mut state = self.zero_state(tape);
        let mut by_pos: Vec<Option<NodeId>> = vec![None; inputs.len()];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..inputs.len()).rev())
        } else {
            Box::new(0..inputs.len())
        };
        for t in order {
            state = cell.step(tape, inputs[t], state);
            by_pos[t] = Some(state.0);
        }
        by_pos
            .into_iter()
            .map(|s| s.expect("visited every step"))
            .collect()
    }

    fn forward_all<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        embedded: NodeId,
        dropout_p: f64,
        rng: &mut ChaCha12Rng,
    ) -> LayerOut {
        let len = tape.shape(embedded)[0];
        let mut seq: Vec<NodeId> = (0..len).map(|t| tape.row(embedded, t)).collect();
        let mut out = None;
        let n_layers = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let fwd = self.run_direction(tape, &layer.fwd, &seq, false);
            let fwd_last = fwd[len - 1];
            let layer_out = match &layer.bwd {
                Some(bwd_cell) => {
                    let bwd = self.run_direction(tape, bwd_cell, &seq, true);
                    let states = fwd
                        .iter()
                        .zip(&bwd)
                        .map(|(&f, &b)| tape.concat(&[f, b]))
                        .collect();
                    LayerOut {
                        states,
                        fwd_last,
                        bwd_last: Some(bwd[0]),
                    }
                }
                None => LayerOut {
                    states: fwd,
                    fwd_last,
                    bwd_last: None,
                },
            };
            seq = if l + 1 < n_layers {
                layer_out
                    .states
                    .iter()
                    .map(|&s| tape.dropout(s, dropout_p, rng))
                    .collect()
            } else {
                layer_out.states.clone()
            };
            out = Some(layer_out);
        }
        out.expect("n_layers >= 1")
    }

    /// Top-layer outputs per position (dimension `hidden`, or `2 * hidden`
    /// when bidirectional).
    pub fn forward_states<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        embedded: NodeId,
        dropout_p: f64,
        rng: &mut ChaCha12Rng,
    ) -> Vec<NodeId> {
        self.forward_all(tape, embedded, dropout_p, rng).states
    }

    /// Final-state document vector.
    pub fn forward_last<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        embedded: NodeId,
        dropout_p: f64,
        rng: &mut ChaCha12Rng,
    ) -> NodeId {
        let out = self.forward_all(tape, embedded, dropout_p, rng);
        match out.bwd_last {
            Some(b) => tape.concat(&[out.fwd_last, b]),
            None => out.fwd_last,
        }
    }
}
