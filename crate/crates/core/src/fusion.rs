//! Multihead attention pooling of a set of modality-agnostic vectors.
//!
//! A learned seed vector attends over `rFF(η)`:
//!
//! ```text
//! H   = LayerNorm(seed + Multihead(seed, rFF(η), rFF(η)))
//! out = LayerNorm(H + rFF(H))
//! ```
//!
//! Attention scores use `softmax(q kᵀ / √d)`. Set elements are passed as
//! separate `[B, d]` nodes so one batch can pool sets of 1 to 3 members.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{self, Bound, ParamStore};
use crate::tensor::{Axis, Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const MAX_SET: usize = 3;

#[derive(Clone, Debug)]
pub struct Mab {
    pub prefix: String,
    pub d: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl Mab {
    pub fn new(prefix: impl Into<String>, d: usize, heads: usize, hidden: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d={d} must be divisible by the head count {heads}"
            )));
        }
        Ok(Self {
            prefix: prefix.into(),
            d,
            heads,
            hidden,
        })
    }

    fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.d;
        let dh = self.head_dim();
        store.insert(self.name("seed"), Tensor::randn(&[1, d], 1.0, rng));
        let std = 1.0 / (d as f64).sqrt();
        for j in 0..self.heads {
            for proj in ["wq", "wk", "wv"] {
                store.insert(self.name(&format!("head{j}.{proj}")), Tensor::randn(&[d, dh], std, rng));
            }
        }
        store.insert(self.name("wo"), Tensor::randn(&[d, d], std, rng));
        params::init_mlp2(store, &self.name("rff_pre"), (d, self.hidden, d), rng);
        params::init_mlp2(store, &self.name("rff_post"), (d, self.hidden, d), rng);
        for ln in ["ln1", "ln2"] {
            store.insert(self.name(&format!("{ln}.gain")), Tensor::ones(&[1, d]));
            store.insert(self.name(&format!("{ln}.bias")), Tensor::zeros(&[1, d]));
        }
    }

    fn affine_norm(&self, g: &mut Graph, p: &Bound, ln: &str, x: Var) -> Result<Var> {
        let normed = g.layer_norm(x, LAYER_NORM_EPS)?;
        let gain = p.get(&self.name(&format!("{ln}.gain")))?;
        let bias = p.get(&self.name(&format!("{ln}.bias")))?;
        let scaled = g.mul(normed, gain)?;
        g.add(scaled, bias)
    }

    /// Pools `elements` (each `[B, d]`) into `z_eta` (`[B, d]`).
    /// Also returns the per-head attention weights (`[B, |set|]` each).
    pub fn pool_with_weights(&self, g: &mut Graph, p: &Bound, elements: &[Var]) -> Result<(Var, Vec<Var>)> {
        if elements.is_empty() || elements.len() > MAX_SET {
            return Err(Error::Contract(format!(
                "set size must be in 1..={MAX_SET}, got {}",
                elements.len()
            )));
        }
        let batch = g.value(elements[0]).rows();
        for &e in elements {
            let shape = g.value(e).shape();
            if shape != [batch, self.d] {
                return Err(Error::Shape {
                    op: "pool_set",
                    lhs: vec![batch, self.d],
                    rhs: shape.to_vec(),
                });
            }
        }
        let seed = p.get(&self.name("seed"))?;
        let keys: Vec<Var> = elements
            .iter()
            .map(|&e| params::mlp2(g, p, &self.name("rff_pre"), e))
            .collect::<Result<_>>()?;
        let inv_sqrt_d = 1.0 / (self.d as f64).sqrt();

        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for j in 0..self.heads {
            let wq = p.get(&self.name(&format!("head{j}.wq")))?;
            let wk = p.get(&self.name(&format!("head{j}.wk")))?;
            let wv = p.get(&self.name(&format!("head{j}.wv")))?;
            let q = g.matmul(seed, wq)?;
            let q_t = g.transpose(q)?;
            let mut scores = Vec::with_capacity(keys.len());
            let mut values = Vec::with_capacity(keys.len());
            for &k in &keys {
                let kj = g.matmul(k, wk)?;
                let score = g.matmul(kj, q_t)?;
                scores.push(g.scale(score, inv_sqrt_d)?);
                values.push(g.matmul(k, wv)?);
            }
            let scores = g.concat(&scores, Axis::Cols)?;
            let w = g.softmax(scores)?;
            let mut out: Option<Var> = None;
            for (i, &v) in values.iter().enumerate() {
                let wi = g.slice(w, Axis::Cols, i, i + 1)?;
                let term = g.mul(v, wi)?;
                out = Some(match out {
                    Some(acc) => g.add(acc, term)?,
                    None => term,
                });
            }
            head_outputs.push(out.expect("non-empty set"));
            weights.push(w);
        }
        let heads = g.concat(&head_outputs, Axis::Cols)?;
        let wo = p.get(&self.name("wo"))?;
        let mixed = g.matmul(heads, wo)?;
        let residual = g.add(mixed, seed)?;
        let h = self.affine_norm(g, p, "ln1", residual)?;
        let ff = params::mlp2(g, p, &self.name("rff_post"), h)?;
        let residual = g.add(h, ff)?;
        let out = self.affine_norm(g, p, "ln2", residual)?;
        Ok((out, weights))
    }

    pub fn pool(&self, g: &mut Graph, p: &Bound, elements: &[Var]) -> Result<Var> {
        Ok(self.pool_with_weights(g, p, elements)?.0)
    }

    /// Single-set convenience wrapper.
    pub fn pool_set(&self, store: &ParamStore, elements: &[&[f64]]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let vars: Vec<Var> = elements.iter().map(|e| g.constant(Tensor::row(e))).collect();
        let out = self.pool(&mut g, &p, &vars)?;
        Ok(g.value(out).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Mab, ParamStore) {
        let mab = Mab::new("mab", 8, 2, 6).unwrap();
        let mut store = ParamStore::new();
        mab.init(&mut store, &mut ChaCha8Rng::seed_from_u64(4));
        (mab, store)
    }

    #[test]
    fn swap_is_bit_identical() {
        let (mab, store) = setup();
        let a: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).cos()).collect();
        assert_eq!(
            mab.pool_set(&store, &[&a, &b]).unwrap(),
            mab.pool_set(&store, &[&b, &a]).unwrap()
        );
    }

    #[test]
    fn output_dim_for_all_set_sizes() {
        let (mab, store) = setup();
        let x = [0.5; 8];
        for n in 1..=3 {
            let set: Vec<&[f64]> = (0..n).map(|_| &x[..]).collect();
            assert_eq!(mab.pool_set(&store, &set).unwrap().len(), 8);
        }
    }

    #[test]
    fn empty_and_oversized_sets_rejected() {
        let (mab, store) = setup();
        assert!(mab.pool_set(&store, &[]).is_err());
        let x = [0.0; 8];
        assert!(mab.pool_set(&store, &[&x, &x, &x, &x]).is_err());
        assert!(mab.pool_set(&store, &[&x[..7]]).is_err());
    }

    #[test]
    fn head_count_must_divide_d() {
        assert!(Mab::new("m", 10, 4, 3).is_err());
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let (mab, store) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let els: Vec<Var> = (0..3)
            .map(|_| g.constant(Tensor::randn(&[5, 8], 1.0, &mut rng)))
            .collect();
        let (_, weights) = mab.pool_with_weights(&mut g, &p, &els).unwrap();
        for w in weights {
            let t = g.value(w);
            for r in 0..5 {
                let s: f64 = t.row_slice(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-15);
            }
        }
    }
}
