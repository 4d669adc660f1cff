//! Modality encoders producing a total representation `z_tot` whose first
//! `d` coordinates are the modality-agnostic slice `z_alpha` and whose
//! remaining `c - d` coordinates are the raw modality-specific slice.
//!
//! Sketch and photo share one vector encoder. Text goes through a
//! bidirectional gated recurrent encoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{self, Bound, ParamStore};
use crate::tensor::{Axis, Graph, Tensor, Var};

/// A total embedding split into agnostic and specific slices.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitEmbedding {
    pub z_alpha: Vec<f64>,
    pub z_beta_raw: Vec<f64>,
}

impl SplitEmbedding {
    pub fn from_total(z_tot: &[f64], d: usize) -> Result<Self> {
        if d == 0 || d >= z_tot.len() {
            return Err(Error::Shape {
                op: "split",
                lhs: vec![z_tot.len()],
                rhs: vec![d],
            });
        }
        Ok(Self {
            z_alpha: z_tot[..d].to_vec(),
            z_beta_raw: z_tot[d..].to_vec(),
        })
    }

    pub fn z_tot(&self) -> Vec<f64> {
        [self.z_alpha.as_slice(), &self.z_beta_raw].concat()
    }
}

/// Splits a `[B, c]` node into `([B, d], [B, c - d])`.
pub fn split(g: &mut Graph, z_tot: Var, d: usize) -> Result<(Var, Var)> {
    let c = g.value(z_tot).cols();
    let alpha = g.slice(z_tot, Axis::Cols, 0, d)?;
    let beta = g.slice(z_tot, Axis::Cols, d, c)?;
    Ok((alpha, beta)
    )
}

/// Two-layer perceptron `n -> hidden -> c` shared by sketches and photos.
#[derive(Clone, Debug)]
pub struct VectorEncoder {
    pub prefix: String,
    pub n_obs: usize,
    pub hidden: usize,
    pub c: usize,
    pub d: usize,
}

impl VectorEncoder {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        params::init_mlp2(store, &self.prefix, (self.n_obs, self.hidden, self.c), rng);
    }

    /// `[B, n_obs]` -> `[B, c]`
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.n_obs {
            return Err(Error::Shape {
                op: "encode_vector",
                lhs: vec![self.n_obs],
                rhs: vec![cols],
            });
        }
        params::mlp2(g, p, &self.prefix, x)
    }

    pub fn encode(&self, store: &ParamStore, x: &[f64]) -> Result<SplitEmbedding> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(Tensor::row(x));
        let z = self.forward(&mut g, &p, xv)?;
        SplitEmbedding::from_total(g.value(z).data(), self.d)
    }
}

/// Bidirectional gated recurrent encoder over token sequences.
///
/// Each direction runs the update/reset/candidate cell
/// `z = σ(x Wz + h Uz + bz)`, `r = σ(x Wr + h Ur + br)`,
/// `n = tanh(x Wn + (r ⊙ h) Un + bn)`, `h' = (1 - z) ⊙ n + z ⊙ h`
/// from a zero state. The two final states are concatenated and projected
/// to `c`.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub prefix: String,
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub c: usize,
    pub d: usize,
}

pub const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

impl TextEncoder {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let pre = &self.prefix;
        store.insert(
            format!("{pre}.embed"),
            Tensor::randn(&[self.vocab, self.embed], 1.0, rng),
        );
        let h = self.hidden;
        for dir in DIRECTIONS {
            // input weights for [z | r | n] gates, recurrent weights for [z | r] and n
            params::init_linear(store, &format!("{pre}.{dir}.x"), self.embed, 3 * h, rng);
            let std = 1.0 / (h as f64).sqrt();
            store.insert(format!("{pre}.{dir}.u_zr"), Tensor::randn(&[h, 2 * h], std, rng));
            store.insert(format!("{pre}.{dir}.u_n"), Tensor::randn(&[h, h], std, rng));
        }
        params::init_linear(store, &format!("{pre}.proj"), 2 * h, self.c, rng);
    }

    fn check_tokens(&self, tokens: &[Vec<u32>]) -> Result<usize> {
        let len = tokens.first().map(Vec::len).unwrap_or(0);
        if tokens.is_empty() || len == 0 {
            return Err(Error::Contract("empty token batch".into()));
        }
        for seq in tokens {
            if seq.len() != len {
                return Err(Error::Shape {
                    op: "encode_text",
                    lhs: vec![len],
                    rhs: vec![seq.len()],
                });
            }
            if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.vocab) {
                return Err(Error::Domain {
                    op: "encode_text",
                    detail: format!("token {bad} outside vocabulary of {}", self.vocab),
                });
            }
        }
        Ok(len)
    }

    /// Final hidden state of one direction. `xw` holds the input-gate
    /// pre-activations for all steps, time-major: rows `t*B..(t+1)*B`.
    fn run_direction(
        &self,
        g: &mut Graph,
        p: &Bound,
        dir: &str,
        xw: Var,
        batch: usize,
        steps: impl Iterator<Item = usize>,
    ) -> Result<Var> {
        let h = self.hidden;
        let u_zr = p.get(&format!("{}.{dir}.u_zr", self.prefix))?;
        let u_n = p.get(&format!("{}.{dir}.u_n", self.prefix))?;
        let mut state = g.constant(Tensor::zeros(&[batch, h]));
        for t in steps {
            let x_t = g.slice(xw, Axis::Rows, t * batch, (t + 1) * batch)?;
            let x_zr = g.slice(x_t, Axis::Cols, 0, 2 * h)?;
            let x_n = g.slice(x_t, Axis::Cols, 2 * h, 3 * h)?;
            let h_zr = g.matmul(state, u_zr)?;
            let pre_zr = g.add(x_zr, h_zr)?;
            let zr = g.sigmoid(pre_zr)?;
            let z = g.slice(zr, Axis::Cols, 0, h)?;
            let r = g.slice(zr, Axis::Cols, h, 2 * h)?;
            let rh = g.mul(r, state)?;
            let h_n = g.matmul(rh, u_n)?;
            let pre_n = g.add(x_n, h_n)?;
            let n = g.tanh(pre_n)?;
            // (1 - z) n + z h = n + z (h - n)
            let diff = g.sub(state, n)?;
            let gated = g.mul(z, diff)?;
            state = g.add(n, gated)?;
        }
        Ok(state)
    }

    /// Batch of equal-length token sequences -> `[B, c]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: &[Vec<u32>]) -> Result<Var> {
        let len = self.check_tokens(tokens)?;
        let batch = tokens.len();
        let ids: Vec<u32> = (0..len)
            .flat_map(|t| tokens.iter().map(move |seq| seq[t]))
            .collect();
        let onehot = g.constant(params::one_hot(&ids, self.vocab));
        let table = p.get(&format!("{}.embed", self.prefix))?;
        let emb = g.matmul(onehot, table)?;
        let mut finals = Vec::with_capacity(2);
        for dir in DIRECTIONS {
            let xw = params::linear(g, p, &format!("{}.{dir}.x", self.prefix), emb)?;
            let last = if dir == "fwd" {
                self.run_direction(g, p, dir, xw, batch, 0..len)?
            } else {
                self.run_direction(g, p, dir, xw, batch, (0..len).rev())?
            };
            finals.push(last);
        }
        let both = g.concat(&finals, Axis::Cols)?;
        params::linear(g, p, &format!("{}.proj", self.prefix), both)
    }

    pub fn encode(&self, store: &ParamStore, tokens: &[u32]) -> Result<SplitEmbedding> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let z = self.forward(&mut g, &p, &[tokens.to_vec()])?;
        SplitEmbedding::from_total(g.value(z).data(), self.d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vector_encoder() -> VectorEncoder {
        VectorEncoder {
            prefix: "enc.vec".into(),
            n_obs: 32,
            hidden: 64,
            c: 64,
            d: 48,
        }
    }

    fn text_encoder() -> TextEncoder {
        TextEncoder {
            prefix: "enc.text".into(),
            vocab: 10,
            embed: 6,
            hidden: 5,
            c: 12,
            d: 8,
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let enc = vector_encoder();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        for (name, t) in store.iter_mut() {
            let is_out_bias = name == "enc.vec.l2.b";
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = if is_out_bias { i as f64 * 0.1 } else { 0.0 };
            }
        }
        let e = enc.encode(&store, &[0.0; 32]).unwrap();
        let expected: Vec<f64> = (0..64).map(|i| i as f64 * 0.1).collect();
        assert_eq!(e.z_tot(), expected);
    }

    #[test]
    fn default_split_dims_and_determinism() {
        let enc = vector_encoder();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        enc.init(&mut store, &mut rng);
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = enc.encode(&store, &x).unwrap();
        assert_eq!((a.z_alpha.len(), a.z_beta_raw.len()), (48, 16));
        assert_eq!(a, enc.encode(&store, &x).unwrap());
        assert!(enc.encode(&store, &x[..31]).is_err());
    }

    #[test]
    fn split_rejoins_exactly() {
        let z: Vec<f64> = (0..10).map(|i| i as f64 / 3.0).collect();
        let s = SplitEmbedding::from_total(&z, 7).unwrap();
        assert_eq!(s.z_tot(), z);
        assert!(SplitEmbedding::from_total(&z, 10).is_err());
    }

    #[test]
    fn single_token_sequence() {
        let enc = text_encoder();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let e = enc.encode(&store, &[3]).unwrap();
        assert_eq!(e.z_tot().len(), 12);
    }

    #[test]
    fn out_of_vocabulary_token() {
        let enc = text_encoder();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(
            enc.encode(&store, &[1, 10]),
            Err(Error::Domain { op: "encode_text", .. })
        ));
    }

    #[test]
    fn zero_text_encoder_gives_projection_bias() {
        let enc = text_encoder();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        for (name, t) in store.iter_mut() {
            if name == "enc.text.proj.b" {
                t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
            } else if !name.starts_with("enc.text.proj") {
                t.data_mut().fill(0.0);
            }
        }
        let e = enc.encode(&store, &[1, 2, 3]).unwrap();
        let expected: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(e.z_tot(), expected);
    }

    #[test]
    fn reversal_swaps_directions_with_tied_weights() {
        let enc = text_encoder();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut ChaCha8Rng::seed_from_u64(9));
        for suffix in ["x.w", "x.b", "u_zr", "u_n"] {
            let fwd = store.get(&format!("enc.text.fwd.{suffix}")).unwrap().clone();
            store.insert(format!("enc.text.bwd.{suffix}"), fwd);
        }
        // A second store whose projection rows for the two directions are swapped.
        let h = enc.hidden;
        let mut swapped = store.clone();
        let proj = store.get("enc.text.proj.w").unwrap();
        let c = proj.cols();
        let w = swapped.get_mut("enc.text.proj.w").unwrap();
        for r in 0..h {
            for col in 0..c {
                w.data_mut()[r * c + col] = proj.get(r + h, col);
                w.data_mut()[(r + h) * c + col] = proj.get(r, col);
            }
        }
        let seq = [4u32, 1, 7, 7, 2];
        let rev: Vec<u32> = seq.iter().rev().copied().collect();
        let a = enc.encode(&store, &rev).unwrap();
        let b = enc.encode(&swapped, &seq).unwrap();
        for (x, y) in a.z_tot().iter().zip(b.z_tot()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}
