mod common;

use common::{normals, perturb, rng};
use trimodal_core::decoders::{TextDecoder, VectorDecoder};
use trimodal_core::params::ParamStore;
use trimodal_core::tensor::gradcheck;
use trimodal_core::trainer::{adam_step, AdamState};
use trimodal_core::{Graph, Tensor};

fn text_setup(seed: u64) -> (TextDecoder, ParamStore) {
    let dec = TextDecoder {
        prefix: "dec".into(),
        vocab: 4,
        embed: 3,
        hidden: 4,
        c: 5,
    };
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    dec.init(&mut store, &mut r);
    perturb(&mut store, 0.1, &mut r);
    (dec, store)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar LSTM replay of the decoder: summed `-log softmax` of each target.
fn lstm_nll_oracle(dec: &TextDecoder, store: &ParamStore, tokens: &[u32], z: &[f64]) -> f64 {
    let get = |n: &str| store.get(&format!("dec.{n}")).unwrap();
    let (embed, wx, wz, bz, u) = (get("embed"), get("x.w"), get("z.w"), get("z.b"), get("u"));
    let (wout, bout) = (get("out.w"), get("out.b"));
    let h = dec.hidden;
    let mut hs = vec![0.0; h];
    let mut cs = vec![0.0; h];
    let mut prev = dec.bos() as usize;
    let mut nll = 0.0;
    for &target in tokens {
        let pre: Vec<f64> = (0..4 * h)
            .map(|k| {
                let ex: f64 = (0..dec.embed).map(|e| embed.get(prev, e) * wx.get(e, k)).sum();
                let ez: f64 = (0..dec.c).map(|i| z[i] * wz.get(i, k)).sum();
                let eh: f64 = (0..h).map(|i| hs[i] * u.get(i, k)).sum();
                ex + ez + bz.data()[k] + eh
            })
            .collect();
        for j in 0..h {
            let i_g = sigmoid(pre[j]);
            let f_g = sigmoid(pre[h + j]);
            let g_g = pre[2 * h + j].tanh();
            let o_g = sigmoid(pre[3 * h + j]);
            cs[j] = f_g * cs[j] + i_g * g_g;
            hs[j] = o_g * cs[j].tanh();
        }
        let logits: Vec<f64> = (0..dec.symbols())
            .map(|s| bout.data()[s] + (0..h).map(|i| hs[i] * wout.get(i, s)).sum::<f64>())
            .collect();
        let z_sum: f64 = logits.iter().map(|l| l.exp()).sum();
        nll -= logits[target as usize] - z_sum.ln();
        prev = target as usize;
    }
    nll
}

#[test]
fn caption_nll_matches_scalar_lstm() {
    let mut r = rng(3);
    for seed in 0..10 {
        let (dec, store) = text_setup(seed);
        let z = normals(5, &mut r);
        for tokens in [vec![2, 5], vec![0, 1, 3, 5], vec![4]] {
            let got = dec.caption_nll_vec(&store, &tokens, &z).unwrap();
            let want = lstm_nll_oracle(&dec, &store, &tokens, &z);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn caption_nll_is_batch_mean() {
    let (dec, store) = text_setup(1);
    let mut r = rng(4);
    let z = Tensor::matrix(2, 5, normals(10, &mut r)).unwrap();
    let toks = vec![vec![1, 2, 5], vec![3, 0, 5]];
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let zv = g.constant(z.clone());
    let nll = dec.caption_nll(&mut g, &p, &toks, zv).unwrap();
    let want = (lstm_nll_oracle(&dec, &store, &toks[0], z.row_slice(0))
        + lstm_nll_oracle(&dec, &store, &toks[1], z.row_slice(1)))
        / 2.0;
    assert!((g.value(nll).item().unwrap() - want).abs() < 1e-12);
}

#[test]
fn greedy_decode_follows_argmax_of_oracle() {
    // the first greedy token minimizes the one-step NLL among all symbols
    let (dec, store) = text_setup(2);
    let z = normals(5, &mut rng(5));
    let out = dec.greedy_decode(&store, &z, 1).unwrap();
    let best = (0..dec.symbols() as u32)
        .min_by(|&a, &b| {
            lstm_nll_oracle(&dec, &store, &[a], &z).total_cmp(&lstm_nll_oracle(&dec, &store, &[b], &z))
        })
        .unwrap();
    if best == dec.eos() {
        assert!(out.is_empty());
    } else {
        assert_eq!(out, vec![best]);
    }
}

#[test]
fn vector_recon_matches_loop() {
    let dec = VectorDecoder {
        prefix: "dv".into(),
        c: 4,
        hidden: 3,
        n_obs: 6,
    };
    let mut store = ParamStore::new();
    let mut r = rng(6);
    dec.init(&mut store, &mut r);
    perturb(&mut store, 0.2, &mut r);
    let x = normals(6, &mut r);
    let z = normals(4, &mut r);
    let w1 = store.get("dv.l1.w").unwrap();
    let b1 = store.get("dv.l1.b").unwrap();
    let w2 = store.get("dv.l2.w").unwrap();
    let b2 = store.get("dv.l2.b").unwrap();
    let hid: Vec<f64> = (0..3)
        .map(|j| (b1.data()[j] + (0..4).map(|i| z[i] * w1.get(i, j)).sum::<f64>()).tanh())
        .collect();
    let want = (0..6)
        .map(|k| {
            let y = b2.data()[k] + (0..3).map(|j| hid[j] * w2.get(j, k)).sum::<f64>();
            (x[k] - y).powi(2)
        })
        .sum::<f64>()
        * 0.5
        / 6.0;
    assert!((dec.recon_loss_vec(&store, &x, &z).unwrap() - want).abs() < 1e-14);
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let (dec, store) = text_setup(7);
    let mut r = rng(8);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let z = g.param("z", Tensor::matrix(2, 5, normals(10, &mut r)).unwrap());
    let nll = dec.caption_nll(&mut g, &p, &[vec![1, 3, 5], vec![0, 0, 2]], z).unwrap();
    let mut leaves: Vec<_> = p.iter().map(|(_, v)| v).collect();
    leaves.push(z);
    let report = gradcheck(&mut g, nll, &leaves, 1e-6, 1e-6).unwrap();
    assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
}

#[test]
fn overfits_one_caption() {
    let (dec, mut store) = text_setup(9);
    let z = normals(5, &mut rng(10));
    let target = vec![3, 1, 2, 0, dec.eos()];
    let mut adam = AdamState::new();
    for _ in 0..300 {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let zv = g.constant(Tensor::row(&z));
        let nll = dec.caption_nll(&mut g, &p, std::slice::from_ref(&target), zv).unwrap();
        let grads = g.param_gradients(nll).unwrap();
        adam_step(&mut store, &grads, &mut adam, 0.05).unwrap();
    }
    assert!(dec.caption_nll_vec(&store, &target, &z).unwrap() < 0.05);
    assert_eq!(dec.greedy_decode(&store, &z, 10).unwrap(), vec![3, 1, 2, 0]);
}
