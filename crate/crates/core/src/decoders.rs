//! Reconstruction heads: a perceptron per vector modality and an
//! autoregressive LSTM text decoder conditioned on `z_tot`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{self, Bound, ParamStore};
use crate::tensor::{Axis, Graph, Tensor, Var};

/// `c -> hidden -> n_obs` perceptron with a `tanh` hidden layer.
#[derive(Clone, Debug)]
pub struct VectorDecoder {
    pub prefix: String,
    pub c: usize,
    pub hidden: usize,
    pub n_obs: usize,
}

impl VectorDecoder {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        params::init_mlp2(store, &self.prefix, (self.c, self.hidden, self.n_obs), rng);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, z_tot: Var) -> Result<Var> {
        params::mlp2(g, p, &self.prefix, z_tot)
    }

    /// Batch mean of `0.5 ‖x - decode(z_tot)‖² / n_obs`.
    pub fn recon_loss(&self, g: &mut Graph, p: &Bound, x: Var, z_tot: Var) -> Result<Var> {
        let (xs, zs) = (g.value(x).shape().to_vec(), g.value(z_tot).shape().to_vec());
        if xs.len() != 2 || zs.len() != 2 || xs[1] != self.n_obs || zs[1] != self.c || xs[0] != zs[0] {
            return Err(Error::Shape {
                op: "recon_loss_vector",
                lhs: xs,
                rhs: zs,
            });
        }
        let out = self.forward(g, p, z_tot)?;
        let diff = g.sub(x, out)?;
        let sq = g.square(diff)?;
        let m = g.mean(sq)?;
        g.scale(m, 0.5)
    }

    pub fn recon_loss_vec(&self, store: &ParamStore, x: &[f64], z_tot: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(Tensor::row(x));
        let zv = g.constant(Tensor::row(z_tot));
        let loss = self.recon_loss(&mut g, &p, xv, zv)?;
        g.value(loss).item()
    }
}

/// Single-layer LSTM decoder over `vocab + 2` symbols (`BOS = vocab`,
/// `EOS = vocab + 1`). Every step sees `[embed(w_{t-1}); z_tot]`.
#[derive(Clone, Debug)]
pub struct TextDecoder {
    pub prefix: String,
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub c: usize,
}

impl TextDecoder {
    pub fn bos(&self) -> u32 {
        self.vocab as u32
    }

    pub fn eos(&self) -> u32 {
        self.vocab as u32 + 1
    }

    pub fn symbols(&self) -> usize {
        self.vocab + 2
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let h = self.hidden;
        store.insert(self.name("embed"), Tensor::randn(&[self.symbols(), self.embed], 1.0, rng));
        // gate order [i | f | g | o]
        let std_in = 1.0 / ((self.embed + self.c) as f64).sqrt();
        store.insert(self.name("x.w"), Tensor::randn(&[self.embed, 4 * h], std_in, rng));
        store.insert(self.name("z.w"), Tensor::randn(&[self.c, 4 * h], std_in, rng));
        store.insert(self.name("z.b"), Tensor::zeros(&[1, 4 * h]));
        let std = 1.0 / (h as f64).sqrt();
        store.insert(self.name("u"), Tensor::randn(&[h, 4 * h], std, rng));
        params::init_linear(store, &self.name("out"), h, self.symbols(), rng);
    }

    fn check_tokens(&self, tokens: &[Vec<u32>]) -> Result<usize> {
        let len = tokens.first().map(Vec::len).unwrap_or(0);
        if tokens.is_empty() || len == 0 {
            return Err(Error::Contract("empty caption batch".into()));
        }
        for seq in tokens {
            if seq.len() != len {
                return Err(Error::Shape {
                    op: "caption_nll",
                    lhs: vec![len],
                    rhs: vec![seq.len()],
                });
            }
            if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.symbols()) {
                return Err(Error::Domain {
                    op: "caption_nll",
                    detail: format!("token {bad} outside vocabulary of {}", self.symbols()),
                });
            }
        }
        Ok(len)
    }

    /// One LSTM step given the precomputed input pre-activation `[B, 4h]`.
    fn cell(&self, g: &mut Graph, u: Var, pre_x: Var, state: (Var, Var)) -> Result<(Var, Var)> {
        let h = self.hidden;
        let (h_prev, c_prev) = state;
        let rec = g.matmul(h_prev, u)?;
        let pre = g.add(pre_x, rec)?;
        let i_f = g_slice(g, pre, 0, 2 * h)?;
        let o_pre = g_slice(g, pre, 3 * h, 4 * h)?;
        let ifo_pre = g.concat(&[i_f, o_pre], Axis::Cols)?;
        let ifo = g.sigmoid(ifo_pre)?;
        let i = g_slice(g, ifo, 0, h)?;
        let f = g_slice(g, ifo, h, 2 * h)?;
        let o = g_slice(g, ifo, 2 * h, 3 * h)?;
        let cand_pre = g_slice(g, pre, 2 * h, 3 * h)?;
        let cand = g.tanh(cand_pre)?;
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep, write)?;
        let c_act = g.tanh(c_new)?;
        let h_new = g.mul(o, c_act)?;
        Ok((h_new, c_new))
    }

    fn initial_state(&self, g: &mut Graph, batch: usize) -> (Var, Var) {
        let zero = Tensor::zeros(&[batch, self.hidden]);
        (g.constant(zero.clone()), g.constant(zero))
    }

    /// Logits `[L*B, vocab+2]`, time-major, under teacher forcing.
    fn teacher_forced_logits(&self, g: &mut Graph, p: &Bound, tokens: &[Vec<u32>], z_tot: Var) -> Result<Var> {
        let len = self.check_tokens(tokens)?;
        let batch = tokens.len();
        let zs = g.value(z_tot).shape().to_vec();
        if zs != [batch, self.c] {
            return Err(Error::Shape {
                op: "caption_nll",
                lhs: vec![batch, self.c],
                rhs: zs,
            });
        }
        let inputs: Vec<u32> = (0..len)
            .flat_map(|t| {
                tokens
                    .iter()
                    .map(move |seq| if t == 0 { self.bos() } else { seq[t - 1] })
            })
            .collect();
        let onehot = g.constant(params::one_hot(&inputs, self.symbols()));
        let table = p.get(&self.name("embed"))?;
        let emb = g.matmul(onehot, table)?;
        let wx = p.get(&self.name("x.w"))?;
        let xw = g.matmul(emb, wx)?;
        let zw = params::linear(g, p, &self.name("z"), z_tot)?;
        let u = p.get(&self.name("u"))?;
        let mut state = self.initial_state(g, batch);
        let mut hs = Vec::with_capacity(len);
        for t in 0..len {
            let x_t = g.slice(xw, Axis::Rows, t * batch, (t + 1) * batch)?;
            let pre_x = g.add(x_t, zw)?;
            state = self.cell(g, u, pre_x, state)?;
            hs.push(state.0);
        }
        let all = g.concat(&hs, Axis::Rows)?;
        params::linear(g, p, &self.name("out"), all)
    }

    /// Batch mean over sequences of the summed per-token cross-entropy.
    pub fn caption_nll(&self, g: &mut Graph, p: &Bound, tokens: &[Vec<u32>], z_tot: Var) -> Result<Var> {
        let logits = self.teacher_forced_logits(g, p, tokens, z_tot)?;
        let batch = tokens.len();
        let len = tokens[0].len();
        let targets: Vec<u32> = (0..len)
            .flat_map(|t| tokens.iter().map(move |seq| seq[t]))
            .collect();
        let mask = g.constant(params::one_hot(&targets, self.symbols()));
        let picked = g.mul(logits, mask)?;
        let picked = g.sum_cols(picked)?;
        let lse = g.logsumexp(logits)?;
        let ce = g.sub(lse, picked)?;
        let total = g.sum(ce)?;
        g.scale(total, 1.0 / batch as f64)
    }

    pub fn caption_nll_vec(&self, store: &ParamStore, tokens: &[u32], z_tot: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let zv = g.constant(Tensor::row(z_tot));
        let loss = self.caption_nll(&mut g, &p, &[tokens.to_vec()], zv)?;
        g.value(loss).item()
    }

    /// Argmax decoding from BOS until EOS or `max_len` tokens. EOS is not
    /// included in the result; ties go to the lowest id.
    pub fn greedy_decode(&self, store: &ParamStore, z_tot: &[f64], max_len: usize) -> Result<Vec<u32>> {
        if max_len == 0 {
            return Err(Error::Contract("max_len must be >= 1".into()));
        }
        if z_tot.len() != self.c {
            return Err(Error::Shape {
                op: "greedy_decode",
                lhs: vec![self.c],
                rhs: vec![z_tot.len()],
            });
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let zv = g.constant(Tensor::row(z_tot));
        let zw = params::linear(&mut g, &p, &self.name("z"), zv)?;
        let table = p.get(&self.name("embed"))?;
        let wx = p.get(&self.name("x.w"))?;
        let u = p.get(&self.name("u"))?;
        let mut state = self.initial_state(&mut g, 1);
        let mut prev = self.bos();
        let mut out = Vec::with_capacity(max_len);
        for _ in 0..max_len {
            let onehot = g.constant(params::one_hot(&[prev], self.symbols()));
            let emb = g.matmul(onehot, table)?;
            let xw = g.matmul(emb, wx)?;
            let pre_x = g.add(xw, zw)?;
            state = self.cell(&mut g, u, pre_x, state)?;
            let logits = params::linear(&mut g, &p, &self.name("out"), state.0)?;
            let next = argmax(g.value(logits).data());
            if next == self.eos() {
                break;
            }
            out.push(next);
            prev = next;
        }
        Ok(out)
    }
}

fn g_slice(g: &mut Graph, a: Var, start: usize, end: usize) -> Result<Var> {
    g.slice(a, Axis::Cols, start, end)
}

/// Index of the largest value, lowest index on ties.
fn argmax(values: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}
