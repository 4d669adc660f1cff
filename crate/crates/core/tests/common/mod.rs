#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use trimodal_core::cinn::FlowStack;
use trimodal_core::model::{DataDims, ModelConfig};
use trimodal_core::params::ParamStore;
use trimodal_core::synthdata::{self, GenConfig, TripletDataset};
use trimodal_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// log|det A| by LU with partial pivoting.
pub fn lu_logabsdet(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        if piv != col {
            for k in 0..n {
                m.swap(piv * n + k, col * n + k);
            }
        }
        let d = m[col * n + col];
        acc += d.abs().ln();
        for r in col + 1..n {
            let f = m[r * n + col] / d;
            for k in col..n {
                m[r * n + k] -= f * m[col * n + k];
            }
        }
    }
    acc
}

/// Central-difference Jacobian `J[i][j] = d out_i / d x_j`, row-major.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<f64> {
    let n = x.len();
    let mut jac = vec![0.0; n * n];
    let mut xp = x.to_vec();
    for j in 0..n {
        xp[j] = x[j] + h;
        let up = f(&xp);
        xp[j] = x[j] - h;
        let dn = f(&xp);
        xp[j] = x[j];
        for i in 0..n {
            jac[i * n + j] = (up[i] - dn[i]) / (2.0 * h);
        }
    }
    jac
}

/// Adds `N(0, std^2)` noise to every parameter so that zero-initialized
/// layers and identity actnorms are exercised.
pub fn perturb(store: &mut ParamStore, std: f64, rng: &mut ChaCha8Rng) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Flow with randomized parameters.
pub fn random_flow(dim: usize, cond: usize, blocks: usize, seed: u64) -> (FlowStack, ParamStore) {
    let flow = FlowStack::new("f", dim, cond, blocks, 8).unwrap();
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    flow.init(&mut store, &mut r);
    perturb(&mut store, 0.3, &mut r);
    (flow, store)
}

pub fn tiny_gen(records: usize, seed: u64) -> GenConfig {
    GenConfig {
        k: 3,
        m_sketch: 2,
        m_text: 2,
        m_photo: 2,
        n_sketch: 5,
        n_photo: 5,
        text_len: 3,
        vocab: 5,
        records,
        seed,
    }
}

pub fn tiny_dataset(records: usize, seed: u64) -> TripletDataset {
    synthdata::generate(&tiny_gen(records, seed)).unwrap()
}

/// `c = 8`, `d = 6`, every hidden width small.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        c: 8,
        d: 6,
        encoder_hidden: 5,
        text_embed: 3,
        text_hidden: 3,
        flow_blocks: 2,
        flow_hidden: 4,
        heads: 2,
        mab_hidden: 4,
        decoder_hidden: 5,
        decoder_embed: 3,
        decoder_text_hidden: 3,
    }
}

pub fn tiny_dims(ds: &TripletDataset) -> DataDims {
    DataDims::of(ds).unwrap()
}

pub fn row(values: &[f64]) -> Tensor {
    Tensor::row(values)
}
