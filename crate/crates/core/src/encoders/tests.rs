use super::*;
use crate::autodiff::Tape;
use rand::SeedableRng;

fn cfg(kind: EncoderKind, embed: usize, hidden: usize, layers: usize) -> EncoderConfig {
    EncoderConfig {
        kind,
        embed_dim: embed,
        hidden_dim: hidden,
        n_layers: layers,
        n_heads: 2,
        dropout_p: 0.0,
        max_seq_len: 64,
        sinusoidal_positions: true,
    }
}

fn model(c: EncoderConfig, vocab: usize, seed: u64) -> (Params<f64>, EncoderModel) {
    let mut params = Params::new();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let m = EncoderModel::init(&mut params, c, vocab, &mut rng).unwrap();
    (params, m)
}

/// Copy every forward-direction recurrent parameter into its backward twin.
fn tie_directions(params: &mut Params<f64>) {
    let names: Vec<String> = params
        .iter()
        .map(|(_, n, _)| n.to_string())
        .filter(|n| n.contains(".fwd."))
        .collect();
    for fwd_name in names {
        let bwd_name = fwd_name.replace(".fwd.", ".bwd.");
        let src = params.id_of(&fwd_name).unwrap();
        let dst = params.id_of(&bwd_name).unwrap();
        let vals = params.get(src).values().to_vec();
        params.get_mut(dst).values_mut().copy_from_slice(&vals);
    }
}

#[test]
fn dan_single_token_is_mlp_of_embedding() {
    let (params, m) = model(cfg(EncoderKind::Dan, 4, 4, 2), 10, 1);
    let v = m.encode(&params, &[3]).unwrap();
    // hand recomputation: h = tanh(W1 e + b1); v = tanh(W2 h + b2)
    let e = &params.get(m.embedding_param()).values()[3 * 4..4 * 4];
    let mut h: Vec<f64> = e.to_vec();
    for l in 0..2 {
        let w = params.get(params.id_of(&format!("dan.l{l}.w")).unwrap());
        let b = params.get(params.id_of(&format!("dan.l{l}.b")).unwrap());
        let mut next = vec![0.0; 4];
        for i in 0..4 {
            let mut acc = b.values()[i];
            for j in 0..4 {
                acc += w.values()[i * 4 + j] * h[j];
            }
            next[i] = acc.tanh();
        }
        h = next;
    }
    for (a, b) in v.iter().zip(&h) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn dan_is_frequency_and_order_invariant_in_the_right_ways() {
    let (params, m) = model(cfg(EncoderKind::Dan, 6, 6, 2), 10, 2);
    // averaging: duplicated token == single occurrence
    let once = m.encode(&params, &[5]).unwrap();
    let twice = m.encode(&params, &[5, 5]).unwrap();
    assert_eq!(once, twice);
    // bag of words: permutations agree
    let fwd = m.encode(&params, &[1, 2, 3, 4]).unwrap();
    let perm = m.encode(&params, &[4, 2, 1, 3]).unwrap();
    for (a, b) in fwd.iter().zip(&perm) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn unencodable_empty_sequence_errors() {
    let (params, m) = model(cfg(EncoderKind::Dan, 4, 4, 1), 10, 3);
    assert!(matches!(m.encode(&params, &[]), Err(Error::Unencodable)));
}

#[test]
fn recurrent_truncates_at_max_seq_len() {
    for kind in [EncoderKind::Lstm, EncoderKind::Gru] {
        let mut c = cfg(kind, 4, 5, 1);
        c.max_seq_len = 3;
        let (params, m) = model(c, 10, 4);
        let full = m.encode(&params, &[1, 2, 3, 4, 5]).unwrap();
        let cut = m.encode(&params, &[1, 2, 3]).unwrap();
        assert_eq!(full, cut);
    }
}

#[test]
fn recurrent_zero_parameters_give_zero_vector() {
    for kind in [EncoderKind::Lstm, EncoderKind::Gru] {
        let (mut params, m) = model(cfg(kind, 4, 5, 1), 10, 5);
        for i in 0..params.len() {
            let t = params.get_mut(crate::autodiff::ParamId(i));
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let v = m.encode(&params, &[1, 2, 3]).unwrap();
        assert!(v.iter().all(|&x| x == 0.0), "{kind:?}: {v:?}");
    }
}

#[test]
fn recurrent_first_token_gradient_is_nonzero() {
    // long-range flow: d v / d embedding(first token) != 0 on a 5-token doc
    for kind in [EncoderKind::Lstm, EncoderKind::Gru] {
        let (params, m) = model(cfg(kind, 4, 4, 1), 10, 6);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut tape = Tape::new(&params, false);
        let out = m.encode_on_tape(&mut tape, &[7, 1, 2, 3, 4], &mut rng).unwrap();
        let loss = tape.mean_vec(out.v);
        let grads = tape.backward(loss);
        let embed_grad = grads.get(m.embedding_param());
        let first: &[f64] = &embed_grad[7 * 4..8 * 4];
        assert!(first.iter().any(|&g| g != 0.0), "{kind:?}");
    }
}

#[test]
fn bidirectional_dimension_is_twice_hidden() {
    let (params, m) = model(cfg(EncoderKind::BiLstm, 4, 7, 1), 10, 7);
    assert_eq!(m.out_dim(), 14);
    let v = m.encode(&params, &[1, 2, 3]).unwrap();
    assert_eq!(v.len(), 14);
}

#[test]
fn bidirectional_palindrome_with_tied_weights_has_equal_halves() {
    for kind in [EncoderKind::BiLstm, EncoderKind::BiGru] {
        let (mut params, m) = model(cfg(kind, 4, 5, 1), 10, 8);
        tie_directions(&mut params);
        let v = m.encode(&params, &[1, 2, 3, 2, 1]).unwrap();
        let (f, b) = v.split_at(5);
        for (a, b) in f.iter().zip(b) {
            assert!((a - b).abs() < 1e-12, "{kind:?}");
        }
    }
}

#[test]
fn bidirectional_reversal_swaps_halves_with_tied_weights() {
    let (mut params, m) = model(cfg(EncoderKind::BiGru, 4, 5, 1), 10, 9);
    tie_directions(&mut params);
    let v = m.encode(&params, &[1, 2, 3, 4]).unwrap();
    let r = m.encode(&params, &[4, 3, 2, 1]).unwrap();
    let (vf, vb) = v.split_at(5);
    let (rf, rb) = r.split_at(5);
    for (a, b) in vf.iter().zip(rb) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in vb.iter().zip(rf) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_weights_sum_to_one() {
    let (params, m) = model(cfg(EncoderKind::BiLstmAttn, 4, 3, 1), 10, 10);
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut tape = Tape::new(&params, false);
    let out = m.encode_on_tape(&mut tape, &[1, 2, 3, 4, 5], &mut rng).unwrap();
    assert_eq!(out.diag.attn_row_sums.len(), 1);
    assert!((out.diag.attn_row_sums[0] - 1.0).abs() < 1e-12);
}

#[test]
fn attention_single_token_returns_its_state() {
    let (params, m) = model(cfg(EncoderKind::BiLstmAttn, 4, 3, 1), 10, 11);
    // with one token, alpha = [1.0] and r is the sole column of X
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut tape = Tape::new(&params, false);
    let out = m.encode_on_tape(&mut tape, &[6], &mut rng).unwrap();
    let v = tape.values(out.v).to_vec();

    // rebuild just the BiLSTM states and compare
    let Arch::BiLstmAttn { stack, .. } = &m.arch else {
        unreachable!()
    };
    let mut rng2 = ChaCha12Rng::seed_from_u64(0);
    let mut tape2 = Tape::new(&params, false);
    let emb = tape2.embed(m.embedding_param(), &[6]);
    let states = stack.forward_states(&mut tape2, emb, 0.0, &mut rng2);
    assert_eq!(states.len(), 1);
    assert_eq!(tape2.values(states[0]), v.as_slice());
}

#[test]
fn attention_pools_within_state_bounds() {
    // r = X alpha^T with alpha on the simplex: every coordinate of r lies
    // inside the per-coordinate range of the states (convex combination)
    let (params, m) = model(cfg(EncoderKind::BiLstmAttn, 4, 3, 1), 10, 12);
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut tape = Tape::new(&params, false);
    let out = m.encode_on_tape(&mut tape, &[1, 5, 2, 8, 3], &mut rng).unwrap();
    let v = tape.values(out.v).to_vec();

    let Arch::BiLstmAttn { stack, .. } = &m.arch else {
        unreachable!()
    };
    let mut rng2 = ChaCha12Rng::seed_from_u64(0);
    let mut tape2 = Tape::new(&params, false);
    let emb = tape2.embed(m.embedding_param(), &[1, 5, 2, 8, 3]);
    let states = stack.forward_states(&mut tape2, emb, 0.0, &mut rng2);
    for j in 0..v.len() {
        let coords: Vec<f64> = states.iter().map(|&s| tape2.values(s)[j]).collect();
        let lo = coords.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = coords.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(v[j] >= lo - 1e-12 && v[j] <= hi + 1e-12);
    }
}

#[test]
fn transformer_attention_rows_sum_to_one() {
    let (params, m) = model(cfg(EncoderKind::Transformer, 4, 8, 2), 10, 13);
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut tape = Tape::new(&params, false);
    let out = m.encode_on_tape(&mut tape, &[1, 2, 3], &mut rng).unwrap();
    // 2 layers x 2 heads x 3 rows
    assert_eq!(out.diag.attn_row_sums.len(), 12);
    for s in &out.diag.attn_row_sums {
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn transformer_without_positions_is_permutation_invariant() {
    let mut c = cfg(EncoderKind::Transformer, 4, 8, 1);
    c.sinusoidal_positions = false;
    let (params, m) = model(c, 10, 14);
    let a = m.encode(&params, &[1, 2, 3, 4]).unwrap();
    let b = m.encode(&params, &[3, 1, 4, 2]).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn transformer_with_positions_is_order_sensitive() {
    let (params, m) = model(cfg(EncoderKind::Transformer, 4, 8, 1), 10, 15);
    let a = m.encode(&params, &[1, 2, 3, 4]).unwrap();
    let b = m.encode(&params, &[4, 3, 2, 1]).unwrap();
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-6);
}

#[test]
fn transformer_single_head_identity_matches_hand_computation() {
    // 1 layer, 1 head, identity q/k/v/o projections, zeroed feedforward,
    // positions off: the block reduces to layer_norm(x + attn(x) applied
    // twice), which we replicate with plain f64 arithmetic on L=2, d=2.
    let mut c = cfg(EncoderKind::Transformer, 2, 4, 1);
    c.n_heads = 1;
    c.sinusoidal_positions = false;
    let (mut params, m) = model(c, 4, 16);
    let d = 2usize;
    let set = |params: &mut Params<f64>, name: &str, vals: &[f64]| {
        let id = params.id_of(name).unwrap();
        params.get_mut(id).values_mut().copy_from_slice(vals);
    };
    let eye = [1.0, 0.0, 0.0, 1.0];
    for w in ["tx.l0.wq", "tx.l0.wk", "tx.l0.wv", "tx.l0.wo"] {
        set(&mut params, w, &eye);
    }
    for b in ["tx.l0.bq", "tx.l0.bk", "tx.l0.bv", "tx.l0.bo"] {
        set(&mut params, b, &[0.0, 0.0]);
    }
    set(&mut params, "tx.l0.ff.w1", &[0.0; 8]);
    set(&mut params, "tx.l0.ff.w2", &[0.0; 8]);

    let ids = [1usize, 3];
    let got = m.encode(&params, &ids).unwrap();

    // hand computation
    let table = params.get(m.embedding_param()).values().to_vec();
    let scale = (d as f64).sqrt();
    let x: Vec<[f64; 2]> = ids
        .iter()
        .map(|&i| [table[i * d] * scale, table[i * d + 1] * scale])
        .collect();
    let dot = |a: &[f64; 2], b: &[f64; 2]| a[0] * b[0] + a[1] * b[1];
    let mut rows = Vec::new();
    for i in 0..2 {
        let s0 = dot(&x[i], &x[0]) / scale;
        let s1 = dot(&x[i], &x[1]) / scale;
        let mx = s0.max(s1);
        let (e0, e1) = ((s0 - mx).exp(), (s1 - mx).exp());
        let z = e0 + e1;
        let (a0, a1) = (e0 / z, e1 / z);
        // attended value plus the residual path
        let res = [
            x[i][0] + a0 * x[0][0] + a1 * x[1][0],
            x[i][1] + a0 * x[0][1] + a1 * x[1][1],
        ];
        // layer norm (gamma=1, beta=0), applied twice since the zeroed
        // feedforward leaves the second residual unchanged
        let ln = |r: [f64; 2]| {
            let mean = (r[0] + r[1]) / 2.0;
            let var = ((r[0] - mean).powi(2) + (r[1] - mean).powi(2)) / 2.0;
            let istd = 1.0 / (var + 1e-5).sqrt();
            [(r[0] - mean) * istd, (r[1] - mean) * istd]
        };
        rows.push(ln(ln(res)));
    }
    let expect = [
        (rows[0][0] + rows[1][0]) / 2.0,
        (rows[0][1] + rows[1][1]) / 2.0,
    ];
    for (g, e) in got.iter().zip(&expect) {
        assert!((g - e).abs() < 1e-9, "got {got:?} expected {expect:?}");
    }
}

#[test]
fn all_encoders_finite_and_correct_dimension() {
    for kind in EncoderKind::ALL {
        let (params, m) = model(cfg(kind, 4, 3, 2), 12, 17);
        for len in [1usize, 2, 5, 9] {
            let ids: Vec<usize> = (0..len).map(|i| (i * 5 + 1) % 12).collect();
            let v = m.encode(&params, &ids).unwrap();
            assert_eq!(v.len(), m.out_dim(), "{kind:?}");
            assert!(v.iter().all(|x| x.is_finite()), "{kind:?} len {len}");
        }
    }
}

#[test]
fn encoding_is_seed_deterministic() {
    for kind in EncoderKind::ALL {
        let (p1, m1) = model(cfg(kind, 4, 3, 1), 12, 99);
        let (p2, m2) = model(cfg(kind, 4, 3, 1), 12, 99);
        let a = m1.encode(&p1, &[1, 2, 3, 4]).unwrap();
        let b = m2.encode(&p2, &[1, 2, 3, 4]).unwrap();
        assert_eq!(a, b, "{kind:?}");
    }
}

#[test]
fn pretrained_embeddings_overwrite_rows() {
    use std::io::Write;
    let (mut params, m) = model(cfg(EncoderKind::Dan, 3, 3, 1), 3, 18);
    // vocabulary with three terms
    let docs = vec![crate::corpus::Document {
        id: "d".into(),
        title: None,
        text: "alpha beta gamma".into(),
        tokens: vec!["alpha".into(), "beta".into(), "gamma".into()],
        gold_labels: None,
        pseudo_labels: None,
    }];
    let stats = crate::corpus::corpus_stats(&docs);
    let vocab = crate::corpus::build_vocabulary(&docs, &stats, 10);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vecs.txt");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "beta 0.25 -0.5 0.75").unwrap();
    writeln!(f, "unknown 1 2 3").unwrap();
    drop(f);

    let n = load_pretrained_embeddings(&path, &mut params, &m, &vocab).unwrap();
    assert_eq!(n, 1);
    let ix = vocab.get("beta").unwrap();
    let row = &params.get(m.embedding_param()).values()[ix * 3..(ix + 1) * 3];
    assert_eq!(row, &[0.25, -0.5, 0.75]);
}
