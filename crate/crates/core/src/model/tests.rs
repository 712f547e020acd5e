use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{LstmParams, Tensor};

fn config(variant: Variant) -> ModelConfig {
    ModelConfig {
        dim: 4,
        vocab_size: 12,
        num_labels: 3,
        normal_label: 0,
        tau: 0.5,
        variant,
    }
}

fn set(store: &mut ParamStore<f64>, id: ParamId, values: &[f64]) {
    let v = store.value_mut(id);
    assert_eq!(v.len(), values.len());
    v.data_mut().copy_from_slice(values);
}

fn fill(store: &mut ParamStore<f64>, id: ParamId, value: f64) {
    store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = value);
}

fn row_sums(t: &Tensor<f64>) -> Vec<f64> {
    t.data().chunks(t.last_dim()).map(|r| r.iter().sum()).collect()
}

fn vecmat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    (0..cols).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i * cols + j]).sum()).collect()
}

fn plus(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

fn sam_store(d: usize, seed: u64) -> (ParamStore<f64>, SamParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = SamParams::register(&mut store, "sam", d, &mut rng).unwrap();
    (store, p)
}

fn run_sam(store: &ParamStore<f64>, p: &SamParams, rows: &[Vec<f64>]) -> (Vec<Vec<f64>>, Tensor<f64>) {
    let d = rows[0].len();
    let t = rows.len();
    let mut tape = Tape::new();
    let flat: Vec<f64> = rows.concat();
    let x = tape.constant(Tensor::from_f64(&[t, d], &flat).unwrap());
    let (h, alpha) = sam_encode(&mut tape, store, p, x, 1, t, &vec![true; t * t]).unwrap();
    let out = tape.value(h).data().chunks(d).map(<[f64]>::to_vec).collect();
    (out, tape.value(alpha).clone())
}

#[test]
fn sam_single_element_is_ffn_of_residual() {
    let (store, p) = sam_store(3, 1);
    let e = vec![0.3, -0.2, 0.5];
    let (h, alpha) = run_sam(&store, &p, &[e.clone()]);
    assert_eq!(alpha.data(), &[1.0]);
    let val = |d: &Dense| (store.value(d.weight).data().to_vec(), store.value(d.bias).data().to_vec());
    let (wv, bv) = val(&p.value);
    let (w1, b1) = val(&p.ff1);
    let (w2, b2) = val(&p.ff2);
    let v = plus(&vecmat(&e, &wv, 3), &bv);
    let r = plus(&e, &v);
    let hid: Vec<f64> = plus(&vecmat(&r, &w1, 3), &b1).into_iter().map(|x| x.max(0.0)).collect();
    let expected = plus(&vecmat(&hid, &w2, 3), &b2);
    for (a, b) in h[0].iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn sam_is_permutation_equivariant() {
    let (store, p) = sam_store(4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let perm = [2, 0, 3, 1];
    let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
    let (h, _) = run_sam(&store, &p, &rows);
    let (hp, _) = run_sam(&store, &p, &permuted);
    for (k, &i) in perm.iter().enumerate() {
        for (a, b) in hp[k].iter().zip(&h[i]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn sam_matches_hand_evaluation() {
    let (mut store, p) = sam_store(2, 0);
    set(&mut store, p.query.weight, &[1.0, 0.5, -0.5, 1.0]);
    set(&mut store, p.query.bias, &[0.1, 0.0]);
    set(&mut store, p.key.weight, &[0.5, 0.0, 0.0, 2.0]);
    set(&mut store, p.key.bias, &[0.0, -0.1]);
    set(&mut store, p.value.weight, &[1.0, 1.0, 0.0, -1.0]);
    set(&mut store, p.value.bias, &[0.2, 0.2]);
    set(&mut store, p.ff1.weight, &[1.0, -1.0, 0.5, 1.0]);
    set(&mut store, p.ff1.bias, &[0.0, 0.1]);
    set(&mut store, p.ff2.weight, &[2.0, 0.0, 1.0, -1.0]);
    set(&mut store, p.ff2.bias, &[0.05, -0.05]);
    let x = [[1.0, 2.0], [-1.0, 0.5]];

    // Scalar evaluation, written out per coordinate.
    let proj = |w: [f64; 4], b: [f64; 2], e: [f64; 2]| [e[0] * w[0] + e[1] * w[2] + b[0], e[0] * w[1] + e[1] * w[3] + b[1]];
    let q: Vec<[f64; 2]> = x.iter().map(|&e| proj([1.0, 0.5, -0.5, 1.0], [0.1, 0.0], e)).collect();
    let k: Vec<[f64; 2]> = x.iter().map(|&e| proj([0.5, 0.0, 0.0, 2.0], [0.0, -0.1], e)).collect();
    let v: Vec<[f64; 2]> = x.iter().map(|&e| proj([1.0, 1.0, 0.0, -1.0], [0.2, 0.2], e)).collect();
    let mut expected = Vec::new();
    for i in 0..2 {
        let s0 = q[i][0] * k[0][0] + q[i][1] * k[0][1];
        let s1 = q[i][0] * k[1][0] + q[i][1] * k[1][1];
        let a0 = 1.0 / (1.0 + (s1 - s0).exp());
        let a1 = 1.0 - a0;
        let r = [x[i][0] + a0 * v[0][0] + a1 * v[1][0], x[i][1] + a0 * v[0][1] + a1 * v[1][1]];
        let hid = proj([1.0, -1.0, 0.5, 1.0], [0.0, 0.1], r).map(|z| z.max(0.0));
        expected.push(proj([2.0, 0.0, 1.0, -1.0], [0.05, -0.05], hid));
    }
    let (h, alpha) = run_sam(&store, &p, &[x[0].to_vec(), x[1].to_vec()]);
    for s in row_sums(&alpha) {
        assert!((s - 1.0).abs() < 1e-12);
    }
    for i in 0..2 {
        for j in 0..2 {
            assert!((h[i][j] - expected[i][j]).abs() < 1e-10, "h[{i}][{j}]");
        }
    }
}

#[test]
fn sam_rejects_fully_masked_input() {
    let (store, p) = sam_store(2, 0);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(sam_encode(&mut tape, &store, &p, x, 1, 2, &[false; 4]).is_err());
    assert!(KeywordInput::from_rows(&[(&[], &[])], 0, 0).is_err());
}

#[test]
fn padding_does_not_change_encodings() {
    let model = Model::<f64>::new(config(Variant::FULL), 5).unwrap();
    let (w, l) = ([4usize, 5], [1usize, 2]);
    let encode_rows = |rows: &[(&[usize], &[usize])]| {
        let input = KeywordInput::from_rows(rows, 0, 0).unwrap();
        let mut tape = Tape::new();
        let enc = encode(&mut tape, &model.params, &model.encoder, &input).unwrap();
        let init = init_decoder(&mut tape, &model.params, &model.encoder, &input).unwrap();
        (
            tape.value(enc.words).data()[..8].to_vec(),
            tape.value(init.w0).data()[..4].to_vec(),
        )
    };
    let alone = encode_rows(&[(&w, &l)]);
    let padded = encode_rows(&[(&w, &l), (&[6, 7, 8], &[1, 1, 2])]);
    for (a, b) in alone.0.iter().zip(&padded.0).chain(alone.1.iter().zip(&padded.1)) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn encoded_labels(model: &Model<f64>, input: &KeywordInput) -> Vec<f64> {
    let mut tape = Tape::new();
    let enc = encode(&mut tape, &model.params, &model.encoder, input).unwrap();
    tape.value(enc.labels.unwrap()).data().to_vec()
}

#[test]
fn identical_labels_give_identical_label_reps() {
    let model = Model::<f64>::new(config(Variant::FULL), 1).unwrap();
    let input = KeywordInput::single(&[4, 5, 6], &[2, 2, 2]).unwrap();
    let m = encoded_labels(&model, &input);
    for row in m.chunks(4).skip(1) {
        for (a, b) in row.iter().zip(&m[..4]) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn label_sam_ignores_word_sam_weights() {
    let mut model = Model::<f64>::new(config(Variant::FULL), 1).unwrap();
    let input = KeywordInput::single(&[4, 5, 6], &[1, 2, 1]).unwrap();
    let before = encoded_labels(&model, &input);
    let q = model.encoder.word_sam.query.weight;
    fill(&mut model.params, q, 0.7);
    assert_eq!(encoded_labels(&model, &input), before);
}

fn memory_of(model: &Model<f64>, input: &KeywordInput) -> (Tensor<f64>, Vec<usize>) {
    let mut tape = Tape::new();
    let enc = encode(&mut tape, &model.params, &model.encoder, input).unwrap();
    let mem = build_memory(&mut tape, &model.params, &model.encoder, input, &enc).unwrap();
    (tape.value(mem.value_sums).clone(), mem.counts)
}

#[test]
fn memory_partitions_keywords_by_label() {
    let model = Model::<f64>::new(config(Variant::FULL), 2).unwrap();
    let one = KeywordInput::single(&[4, 5, 6], &[1, 1, 1]).unwrap();
    let (sums, counts) = memory_of(&model, &one);
    assert_eq!(counts, vec![0, 3, 0]);
    let nonzero: Vec<bool> = sums.data().chunks(4).map(|r| r.iter().any(|&x| x != 0.0)).collect();
    assert_eq!(nonzero, vec![false, true, false]);

    let labels = [2usize, 1, 2, 2, 1];
    let input = KeywordInput::from_rows(&[(&[4, 5, 6, 7, 8], &labels), (&[9, 10], &[1, 1])], 0, 0).unwrap();
    let (sums, counts) = memory_of(&model, &input);
    let mut oracle = vec![0usize; 6];
    for &l in &labels {
        oracle[l] += 1;
    }
    oracle[3 + 1] += 2;
    assert_eq!(counts, oracle);
    assert_eq!(counts[..3].iter().sum::<usize>(), 5);
    assert!(sums.data()[..4].iter().all(|&x| x == 0.0));
}

#[test]
fn singleton_category_matches_single_element_sam() {
    let model = Model::<f64>::new(config(Variant::FULL), 3).unwrap();
    let input = KeywordInput::single(&[4, 5, 6], &[1, 2, 1]).unwrap();
    let (sums, _) = memory_of(&model, &input);
    let alone = KeywordInput::single(&[5], &[2]).unwrap();
    let mut tape = Tape::new();
    let enc = encode(&mut tape, &model.params, &model.encoder, &alone).unwrap();
    let (h, _) = sam_encode(&mut tape, &model.params, &model.encoder.word_sam, enc.word_emb, 1, 1, &[true]).unwrap();
    for (a, b) in sums.data()[8..12].iter().zip(tape.value(h).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn decoder_init_shapes_and_zero_weights() {
    let mut model = Model::<f64>::new(config(Variant::FULL), 4).unwrap();
    for t in 1..=4 {
        let words: Vec<usize> = (4..4 + t).collect();
        let input = KeywordInput::single(&words, &vec![1; t]).unwrap();
        let mut tape = Tape::new();
        let init = init_decoder(&mut tape, &model.params, &model.encoder, &input).unwrap();
        assert_eq!(tape.shape(init.w0), &[1, 4]);
        assert_eq!(tape.shape(init.l0.unwrap()), &[1, 4]);
    }
    let enc = model.encoder.clone();
    for id in [enc.fwd.weight, enc.fwd.bias, enc.bwd.weight, enc.bwd.bias] {
        fill(&mut model.params, id, 0.0);
    }
    fill(&mut model.params, enc.init_w.weight, 0.0);
    fill(&mut model.params, enc.init_l.unwrap().weight, 0.0);
    set(&mut model.params, enc.init_w.bias, &[0.1, -0.2, 0.3, 2.0]);
    set(&mut model.params, enc.init_l.unwrap().bias, &[-1.0, 0.0, 0.5, 0.25]);
    let input = KeywordInput::single(&[4, 5], &[1, 2]).unwrap();
    let mut tape = Tape::new();
    let init = init_decoder(&mut tape, &model.params, &model.encoder, &input).unwrap();
    let w: Vec<f64> = [0.1f64, -0.2, 0.3, 2.0].iter().map(|x| x.tanh()).collect();
    let l: Vec<f64> = [-1.0f64, 0.0, 0.5, 0.25].iter().map(|x| x.tanh()).collect();
    assert_eq!(tape.value(init.w0).data(), &w[..]);
    assert_eq!(tape.value(init.l0.unwrap()).data(), &l[..]);
}

#[test]
fn decoder_init_single_keyword_hand_oracle() {
    let model = Model::<f64>::new(config(Variant::FULL), 6).unwrap();
    let enc = &model.encoder;
    let ps = &model.params;
    let e = ps.value(enc.word_emb).row(7).to_vec();
    let lstm = |p: &LstmParams| {
        let w = ps.value(p.weight).data();
        let b = ps.value(p.bias).data();
        let mut xh = e.clone();
        xh.extend([0.0; 4]);
        let z = plus(&vecmat(&xh, w, 16), b);
        (0..4)
            .map(|j| {
                let c = sigmoid(z[j]) * z[12 + j].tanh();
                sigmoid(z[8 + j]) * c.tanh()
            })
            .collect::<Vec<f64>>()
    };
    let mut both = lstm(&enc.fwd);
    both.extend(lstm(&enc.bwd));
    let w0: Vec<f64> = plus(&vecmat(&both, ps.value(enc.init_w.weight).data(), 4), ps.value(enc.init_w.bias).data())
        .into_iter()
        .map(f64::tanh)
        .collect();
    let input = KeywordInput::single(&[7], &[1]).unwrap();
    let mut tape = Tape::new();
    let init = init_decoder(&mut tape, ps, enc, &input).unwrap();
    for (a, b) in tape.value(init.w0).data().iter().zip(&w0) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn random_state(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, b: usize) -> (ElstmState, Var, Var) {
    let mut r = || {
        let data: Vec<f64> = (0..b * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_f64(&[b, 4], &data).unwrap()
    };
    let vals: Vec<Tensor<f64>> = (0..8).map(|_| r()).collect();
    let v: Vec<Var> = vals.into_iter().map(|t| tape.constant(t)).collect();
    (
        ElstmState {
            w: v[0],
            c0: v[1],
            l: Some(v[2]),
            cl: Some(v[3]),
            c1: Some(v[4]),
            cm: Some(v[5]),
        },
        v[6],
        v[7],
    )
}

#[test]
fn gate_saturation_selects_one_branch() {
    let mut model = Model::<f64>::new(config(Variant::FULL), 7).unwrap();
    let gate = model.decoder.gate.unwrap();
    fill(&mut model.params, gate.weight, 0.0);
    for (bias, pick_w1) in [(60.0, true), (-60.0, false)] {
        fill(&mut model.params, gate.bias, bias);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (state, y, m) = random_state(&mut tape, &mut rng, 2);
        let out = elstm_cell(&mut tape, &model.params, &model.decoder, &state, y, Some(m)).unwrap();
        let target = if pick_w1 { out.w1.unwrap() } else { out.w_prime };
        for (a, b) in tape.value(out.w_next).data().iter().zip(tape.value(target).data()) {
            assert!((a - b).abs() < 1e-20);
        }
    }
}

#[test]
fn attention_single_and_identical_items() {
    let model = Model::<f64>::new(config(Variant::FULL), 8).unwrap();
    let p = model.decoder.attn_w;
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::from_f64(&[1, 4], &[0.2, -0.4, 0.9, 0.1]).unwrap());
    let one = tape.constant(Tensor::from_f64(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let items = p.prepare(&mut tape, &model.params, one, &[true]).unwrap();
    let (ctx, w) = attend(&mut tape, &model.params, &p, q, &items).unwrap();
    assert_eq!(tape.value(w).data(), &[1.0]);
    assert_eq!(tape.value(ctx).data(), &[1.0, 2.0, 3.0, 4.0]);

    let same = tape.constant(Tensor::from_f64(&[1, 3, 4], &[0.5, -0.5, 0.25, 1.0].repeat(3)).unwrap());
    let items = p.prepare(&mut tape, &model.params, same, &[true; 3]).unwrap();
    let (ctx, w) = attend(&mut tape, &model.params, &p, q, &items).unwrap();
    for &x in tape.value(w).data() {
        assert!((x - 1.0 / 3.0).abs() < 1e-15);
    }
    for (a, b) in tape.value(ctx).data().iter().zip(&[0.5, -0.5, 0.25, 1.0]) {
        assert!((a - b).abs() < 1e-15);
    }
    let all_masked = p.prepare(&mut tape, &model.params, same, &[false; 3]).unwrap();
    assert!(attend(&mut tape, &model.params, &p, q, &all_masked).is_err());
}

#[test]
fn attention_matches_hand_evaluation() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = AttnParams::register(&mut store, "a", 2, &mut rng).unwrap();
    set(&mut store, p.wa, &[1.5, -0.5]);
    set(&mut store, p.wb, &[1.0, 0.2, -0.3, 0.8]);
    set(&mut store, p.wh, &[0.5, -1.0, 0.7, 0.4]);
    let query: [f64; 2] = [0.6, -0.2];
    let items: [[f64; 2]; 3] = [[1.0, 0.0], [0.0, 1.0], [-0.5, 0.5]];

    let qb = [query[0] * 1.0 + query[1] * -0.3, query[0] * 0.2 + query[1] * 0.8];
    let scores: Vec<f64> = items
        .iter()
        .map(|h| {
            let hh = [h[0] * 0.5 + h[1] * 0.7, h[0] * -1.0 + h[1] * 0.4];
            1.5 * (qb[0] + hh[0]).tanh() - 0.5 * (qb[1] + hh[1]).tanh()
        })
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let gamma: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
    let ctx = [
        (0..3).map(|i| gamma[i] * items[i][0]).sum::<f64>(),
        (0..3).map(|i| gamma[i] * items[i][1]).sum::<f64>(),
    ];

    let mut tape = Tape::new();
    let q = tape.constant(Tensor::from_f64(&[1, 2], &query).unwrap());
    let it = tape.constant(Tensor::from_f64(&[1, 3, 2], &items.concat()).unwrap());
    let prepared = p.prepare(&mut tape, &store, it, &[true; 3]).unwrap();
    let (c, w) = attend(&mut tape, &store, &p, q, &prepared).unwrap();
    for (a, b) in tape.value(w).data().iter().zip(&gamma) {
        assert!((a - b).abs() < 1e-10);
    }
    for (a, b) in tape.value(c).data().iter().zip(&ctx) {
        assert!((a - b).abs() < 1e-10);
    }
}

/// A memory with hand-set keys and value sums, read through an identity `W_g`.
fn toy_memory(tape: &mut Tape<f64>, keys: &[f64], sums: &[f64], c: usize, d: usize) -> KeywordMemory {
    KeywordMemory {
        keys: tape.constant(Tensor::from_f64(&[c, d], keys).unwrap()),
        values: tape.constant(Tensor::zeros(&[1, d])),
        value_sums: tape.constant(Tensor::from_f64(&[1, c, d], sums).unwrap()),
        counts: vec![1; c],
        num_labels: c,
    }
}

fn identity_store(d: usize) -> (ParamStore<f64>, ParamId) {
    let mut store = ParamStore::new();
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    let id = store.register("wg", Tensor::from_f64(&[d, d], &eye).unwrap()).unwrap();
    (store, id)
}

#[test]
fn memory_read_eval_mode() {
    let (store, wg) = identity_store(2);
    let mut tape = Tape::new();
    let mem = toy_memory(&mut tape, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], &[1., 2., 3., 4., 5., 6.], 3, 2);
    let q = tape.constant(Tensor::from_f64(&[1, 2], &[0.7, 0.0]).unwrap());
    let (_, pi) = memory_read(&mut tape, &store, wg, q, &mem, 0.5, MemoryMode::Eval).unwrap();
    for &x in tape.value(pi).data() {
        assert!((x - 1.0 / 3.0).abs() < 1e-15);
    }

    let keys = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let mem = toy_memory(&mut tape, &keys, &[1., 2., 3., 4., 5., 6.], 3, 2);
    let q = tape.constant(Tensor::from_f64(&[1, 2], &[5.0, 0.0]).unwrap());
    let (o, pi) = memory_read(&mut tape, &store, wg, q, &mem, 0.05, MemoryMode::Eval).unwrap();
    let pi = tape.value(pi).data();
    assert!(pi[1] > 0.999, "{pi:?}");
    let o = tape.value(o).data();
    assert!((o[0] - 3.0).abs() < 1e-2 && (o[1] - 4.0).abs() < 1e-2);

    for tau in [0.0, -1.0, 1.5] {
        assert!(matches!(
            memory_read(&mut tape, &store, wg, q, &mem, tau, MemoryMode::Eval),
            Err(crate::Error::Config(_))
        ));
    }
}

#[test]
fn gumbel_noise_is_reproducible_and_sharpens_with_tau() {
    let (store, wg) = identity_store(2);
    let keys = [1.0, 0.0, 0.0, 1.0, -1.0, 0.5, 0.2, 0.2];
    let mean_entropy = |tau: f64| {
        let mut total = 0.0;
        for seed in 0..100 {
            let mut tape = Tape::new();
            let mem = toy_memory(&mut tape, &keys, &[0.0; 8], 4, 2);
            let q = tape.constant(Tensor::from_f64(&[1, 2], &[0.8, 0.3]).unwrap());
            let mode = MemoryMode::Train { seed, stream: 0 };
            let (_, pi) = memory_read(&mut tape, &store, wg, q, &mem, tau, mode).unwrap();
            total += entropy(tape.value(pi).data());
        }
        total / 100.0
    };
    let h: Vec<f64> = [1.0, 0.5, 0.1].iter().map(|&t| mean_entropy(t)).collect();
    assert!(h[0] >= h[1] && h[1] >= h[2], "{h:?}");

    let a: Tensor<f64> = gumbel_noise(3, 1, 2, 4);
    assert_eq!(a, gumbel_noise(3, 1, 2, 4));
    assert_ne!(a, gumbel_noise(3, 2, 2, 4));
}

fn step_once(model: &Model<f64>, mode: MemoryMode) -> (Tape<f64>, StepOutput) {
    let input = KeywordInput::from_rows(&[(&[4, 5, 6], &[1, 2, 1]), (&[7, 8], &[2, 2])], 0, 0).unwrap();
    let mut tape = Tape::new();
    let (ctx, state) = model.prepare(&mut tape, &input).unwrap();
    let out = model.step(&mut tape, &ctx, &state, &[1, 9], &[0, 2], mode).unwrap();
    (tape, out)
}

fn assert_normalized(tape: &Tape<f64>, v: Var, log: bool) {
    let t = tape.value(v);
    let n = t.last_dim();
    for row in t.data().chunks(n) {
        let s: f64 = if log { row.iter().map(|x| x.exp()).sum() } else { row.iter().sum() };
        assert!((s - 1.0).abs() < 1e-9, "{s}");
    }
}

#[test]
fn decode_step_is_normalized_and_deterministic() {
    let model = Model::<f64>::new(config(Variant::FULL), 9).unwrap();
    let mode = MemoryMode::Train { seed: 4, stream: 2 };
    let (tape, out) = step_once(&model, mode);
    assert_eq!(tape.shape(out.log_pv), &[2, 12]);
    assert_eq!(tape.shape(out.log_pe.unwrap()), &[2, 3]);
    assert_normalized(&tape, out.log_pv, true);
    assert_normalized(&tape, out.log_pe.unwrap(), true);
    let d = &out.diagnostics;
    for v in [d.attn_w, d.attn_m.unwrap(), d.pi.unwrap()] {
        assert_normalized(&tape, v, false);
    }
    // Padding gets no attention.
    assert_eq!(tape.value(d.attn_w).data()[5], 0.0);

    let (tape2, out2) = step_once(&model, mode);
    assert_eq!(tape.value(out.log_pv), tape2.value(out2.log_pv));
    assert_eq!(tape.value(out.log_pe.unwrap()), tape2.value(out2.log_pe.unwrap()));
}

#[test]
fn ablations_keep_a_normalized_pipeline() {
    for variant in ["no_mem", "no_elstm", "no_elstm+no_mem"] {
        let v = Variant::parse(variant).unwrap();
        assert_eq!(v.name(), variant);
        let model = Model::<f64>::new(config(v), 10).unwrap();
        let (tape, out) = step_once(&model, MemoryMode::Eval);
        assert_normalized(&tape, out.log_pv, true);
        assert_eq!(out.log_pe.is_some(), !v.no_elstm);
        assert_eq!(out.diagnostics.pi.is_some(), !v.no_kw_mem);
        assert_eq!(out.diagnostics.out_gate.is_some(), !v.no_kw_mem);
        assert_eq!(out.diagnostics.gate_gamma.is_some(), !v.no_elstm);
    }
    assert!(Variant::parse("no_attention").is_err());
}

#[test]
fn ablation_censuses_are_ordered_and_named() {
    let census = |v: &str| Model::<f64>::new(config(Variant::parse(v).unwrap()), 0).unwrap().census();
    let full = census("full");
    let (d, c) = (4, 3);
    assert_eq!(full - census("no_mem"), d * d + (2 * d * d + d));
    assert!(census("no_elstm") < census("no_mem"));
    assert!(census("no_elstm+no_mem") < census("no_elstm"));
    assert_eq!(census("no_elstm") - census("no_elstm+no_mem"), d * d + (2 * d * d + d) + c * d);

    let stripped = Model::<f64>::new(config(Variant::parse("no_elstm+no_mem").unwrap()), 0).unwrap();
    for (_, name, _) in stripped.params.iter() {
        assert!(name.starts_with("enc.") || name.starts_with("dec."));
        assert!(!name.contains("label") && !name.contains("mem") && !name.contains("out_e"), "{name}");
    }
}

#[test]
fn fusion_outputs_are_convex_and_bias_shift_is_invisible() {
    let mut model = Model::<f64>::new(config(Variant::FULL), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let mut tape = Tape::new();
        let (state, y, m) = random_state(&mut tape, &mut rng, 3);
        let cell = elstm_cell(&mut tape, &model.params, &model.decoder, &state, y, Some(m)).unwrap();
        let (a, b, o) = (
            tape.value(cell.w_prime).data(),
            tape.value(cell.w1.unwrap()).data(),
            tape.value(cell.w_next).data(),
        );
        for i in 0..o.len() {
            assert!(o[i] >= a[i].min(b[i]) - 1e-15 && o[i] <= a[i].max(b[i]) + 1e-15);
        }
        let (x, cw, _) = random_state(&mut tape, &mut rng, 3);
        let proj = project(&mut tape, &model.params, &model.decoder, Some(x.w), cw, x.c0, x.l, x.cm).unwrap();
        let (a, b, o) = (tape.value(x.w).data(), tape.value(cw).data(), tape.value(proj.fused).data());
        for i in 0..o.len() {
            assert!(o[i] >= a[i].min(b[i]) - 1e-15 && o[i] <= a[i].max(b[i]) + 1e-15);
        }
    }

    let (tape, before) = step_once(&model, MemoryMode::Eval);
    let before = tape.value(before.log_pv).clone();
    let bias = model.decoder.out_v.bias;
    model.params.value_mut(bias).data_mut().iter_mut().for_each(|x| *x += 3.25);
    let (tape, after) = step_once(&model, MemoryMode::Eval);
    for (a, b) in before.data().iter().zip(tape.value(after.log_pv).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn label_head_toy_argmax() {
    let mut model = Model::<f64>::new(
        ModelConfig {
            num_labels: 2,
            ..config(Variant::FULL)
        },
        12,
    )
    .unwrap();
    let head = model.decoder.out_e.unwrap();
    // Label 1 scores l′[0]; label 0 scores cm[0].
    let mut w = vec![0.0; 16];
    w[1] = 1.0;
    w[4 * 2] = 1.0;
    set(&mut model.params, head.weight, &w);
    set(&mut model.params, head.bias, &[0.0, 0.0]);
    for (l0, cm0, expect) in [(0.9, 0.2, 1usize), (-0.3, 0.4, 0)] {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::from_f64(&[1, 4], &[l0, 0.0, 0.0, 0.0]).unwrap());
        let cm = tape.constant(Tensor::from_f64(&[1, 4], &[cm0, 0.0, 0.0, 0.0]).unwrap());
        let z = tape.constant(Tensor::zeros(&[1, 4]));
        let proj = project(&mut tape, &model.params, &model.decoder, Some(z), z, z, Some(l), Some(cm)).unwrap();
        let pe = tape.value(proj.log_pe.unwrap()).data().to_vec();
        let argmax = if pe[1] > pe[0] { 1 } else { 0 };
        assert_eq!(argmax, expect);
        let direct = (l0 - cm0).exp() / (1.0 + (l0 - cm0).exp());
        assert!((pe[1].exp() - direct).abs() < 1e-12);
    }
}

#[test]
fn config_validation() {
    assert!(Model::<f64>::new(ModelConfig { dim: 0, ..config(Variant::FULL) }, 0).is_err());
    assert!(Model::<f64>::new(ModelConfig { tau: 0.0, ..config(Variant::FULL) }, 0).is_err());
    assert!(Model::<f64>::new(ModelConfig { normal_label: 3, ..config(Variant::FULL) }, 0).is_err());
}

#[test]
fn f32_model_runs() {
    let model = Model::<f64>::new(config(Variant::FULL), 13).unwrap().cast::<f32>();
    let input = KeywordInput::single(&[4, 5], &[1, 2]).unwrap();
    let mut tape = Tape::new();
    let (ctx, state) = model.prepare(&mut tape, &input).unwrap();
    let out = model.step(&mut tape, &ctx, &state, &[1], &[0], MemoryMode::Eval).unwrap();
    let s: f32 = tape.value(out.log_pv).data().iter().map(|x| x.exp()).sum();
    assert!((s - 1.0).abs() < 1e-5);
}
