//! Conditional invertible network on the modality-specific channel.
//!
//! `forward` maps a latent `eps` to the specific slice `w` given the
//! agnostic slice `z_alpha`; `inverse` maps `w` back to `eps`. The stack
//! repeats `(affine coupling, actnorm, switch)` blocks. Couplings condition
//! their scale and shift networks on `[x1; z_alpha]`; the scale is
//! `bound * tanh(raw)` with a learnable per-block bound.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::params::{self, Bound, ParamStore};
use crate::tensor::{Axis, Graph, Tensor, Var};

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug)]
pub struct FlowStack {
    pub prefix: String,
    /// Dimension of the transformed channel (`c - d`).
    pub dim: usize,
    /// Dimension of the conditioning vector (`d`).
    pub cond: usize,
    pub blocks: usize,
    pub hidden: usize,
}

/// Output of a single-vector pass through the flow.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowResult {
    pub output: Vec<f64>,
    pub logdet: f64,
}

/// Graph nodes of a batched pass: `[B, dim]` output and `[B, 1]` log-determinant.
#[derive(Clone, Copy, Debug)]
pub struct FlowNodes {
    pub output: Var,
    pub logdet: Var,
}

impl FlowStack {
    pub fn new(prefix: impl Into<String>, dim: usize, cond: usize, blocks: usize, hidden: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!(
                "flow dimension must be >= 2 for coupling, got {dim}"
            )));
        }
        if blocks == 0 || hidden == 0 || cond == 0 {
            return Err(Error::Config("flow blocks, hidden and cond must be >= 1".into()));
        }
        Ok(Self {
            prefix: prefix.into(),
            dim,
            cond,
            blocks,
            hidden,
        })
    }

    fn half(&self) -> usize {
        self.dim / 2
    }

    fn name(&self, block: usize, part: &str) -> String {
        format!("{}.{block}.{part}", self.prefix)
    }

    /// Identity initialization: the last layer of every scale/shift network is
    /// zero and actnorm has unit scale and zero bias.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let inp = self.half() + self.cond;
        let out = self.dim - self.half();
        for k in 0..self.blocks {
            for net in ["s", "t"] {
                params::init_linear(store, &self.name(k, &format!("{net}.l1")), inp, self.hidden, rng);
                params::init_zero_linear(store, &self.name(k, &format!("{net}.l2")), self.hidden, out);
            }
            store.insert(self.name(k, "bound"), Tensor::scalar(1.0));
            store.insert(self.name(k, "an.log_scale"), Tensor::zeros(&[1, self.dim]));
            store.insert(self.name(k, "an.bias"), Tensor::zeros(&[1, self.dim]));
        }
    }

    fn coupling_terms(&self, g: &mut Graph, p: &Bound, k: usize, x1: Var, z_alpha: Var) -> Result<(Var, Var)> {
        let inp = g.concat(&[x1, z_alpha], Axis::Cols)?;
        let raw = params::mlp2(g, p, &self.name(k, "s"), inp)?;
        let raw = g.tanh(raw)?;
        let bound = p.get(&self.name(k, "bound"))?;
        let s = g.mul(raw, bound)?;
        let t = params::mlp2(g, p, &self.name(k, "t"), inp)?;
        Ok((s, t))
    }

    fn switch(&self, g: &mut Graph, x: Var, inverse: bool) -> Result<Var> {
        let cut = if inverse { self.dim - self.half() } else { self.half() };
        let a = g.slice(x, Axis::Cols, 0, cut)?;
        let b = g.slice(x, Axis::Cols, cut, self.dim)?;
        g.concat(&[b, a], Axis::Cols)
    }

    fn check(&self, g: &Graph, x: Var, z_alpha: Var) -> Result<()> {
        let (xs, zs) = (g.value(x).shape(), g.value(z_alpha).shape());
        if xs.len() != 2 || zs.len() != 2 || xs[1] != self.dim || zs[1] != self.cond || xs[0] != zs[0] {
            return Err(Error::Shape {
                op: "flow",
                lhs: xs.to_vec(),
                rhs: zs.to_vec(),
            });
        }
        Ok(())
    }

    fn check_finite(&self, g: &Graph, x: Var, block: usize) -> Result<()> {
        if g.value(x).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{} block {block}", self.prefix)))
        }
    }

    /// `eps -> w`, batched.
    pub fn forward(&self, g: &mut Graph, p: &Bound, eps: Var, z_alpha: Var) -> Result<FlowNodes> {
        self.check(g, eps, z_alpha)?;
        let h = self.half();
        let mut x = eps;
        let mut logdet: Option<Var> = None;
        for k in 0..self.blocks {
            // coupling
            let x1 = g.slice(x, Axis::Cols, 0, h)?;
            let x2 = g.slice(x, Axis::Cols, h, self.dim)?;
            let (s, t) = self.coupling_terms(g, p, k, x1, z_alpha)?;
            let es = g.exp(s)?;
            let scaled = g.mul(x2, es)?;
            let y2 = g.add(scaled, t)?;
            x = g.concat(&[x1, y2], Axis::Cols)?;
            let ld = g.sum_cols(s)?;
            // actnorm
            let ls = p.get(&self.name(k, "an.log_scale"))?;
            let bias = p.get(&self.name(k, "an.bias"))?;
            let a = g.exp(ls)?;
            let ax = g.mul(x, a)?;
            x = g.add(ax, bias)?;
            let an_ld = g.sum(ls)?;
            let ld = g.add(ld, an_ld)?;
            logdet = Some(match logdet {
                Some(acc) => g.add(acc, ld)?,
                None => ld,
            });
            x = self.switch(g, x, false)?;
            self.check_finite(g, x, k)?;
        }
        Ok(FlowNodes {
            output: x,
            logdet: logdet.expect("blocks >= 1"),
        })
    }

    fn actnorm_inverse(&self, g: &mut Graph, p: &Bound, k: usize, x: Var) -> Result<(Var, Var)> {
        let ls = p.get(&self.name(k, "an.log_scale"))?;
        let bias = p.get(&self.name(k, "an.bias"))?;
        let shifted = g.sub(x, bias)?;
        let neg_ls = g.neg(ls)?;
        let inv_a = g.exp(neg_ls)?;
        let out = g.mul(shifted, inv_a)?;
        let ld = g.sum(neg_ls)?;
        Ok((out, ld))
    }

    fn coupling_inverse(&self, g: &mut Graph, p: &Bound, k: usize, x: Var, z_alpha: Var) -> Result<(Var, Var)> {
        let h = self.half();
        let y1 = g.slice(x, Axis::Cols, 0, h)?;
        let y2 = g.slice(x, Axis::Cols, h, self.dim)?;
        let (s, t) = self.coupling_terms(g, p, k, y1, z_alpha)?;
        let neg_s = g.neg(s)?;
        let inv_es = g.exp(neg_s)?;
        let centered = g.sub(y2, t)?;
        let x2 = g.mul(centered, inv_es)?;
        let out = g.concat(&[y1, x2], Axis::Cols)?;
        let ld = g.sum_cols(neg_s)?;
        Ok((out, ld))
    }

    /// `w -> eps`, batched. `logdet` is `log|det J_{τ⁻¹}|`.
    pub fn inverse(&self, g: &mut Graph, p: &Bound, w: Var, z_alpha: Var) -> Result<FlowNodes> {
        self.check(g, w, z_alpha)?;
        let mut x = w;
        let mut logdet: Option<Var> = None;
        for k in (0..self.blocks).rev() {
            x = self.switch(g, x, true)?;
            let (an, an_ld) = self.actnorm_inverse(g, p, k, x)?;
            let (out, c_ld) = self.coupling_inverse(g, p, k, an, z_alpha)?;
            x = out;
            let ld = g.add(c_ld, an_ld)?;
            logdet = Some(match logdet {
                Some(acc) => g.add(acc, ld)?,
                None => ld,
            });
            self.check_finite(g, x, k)?;
        }
        Ok(FlowNodes {
            output: x,
            logdet: logdet.expect("blocks >= 1"),
        })
    }

    /// Per-row `-log N(τ⁻¹(w|z_alpha); 0, I) - log|det J_{τ⁻¹}|` as a `[B, 1]` column.
    pub fn nll_rows(&self, g: &mut Graph, p: &Bound, w: Var, z_alpha: Var) -> Result<Var> {
        let inv = self.inverse(g, p, w, z_alpha)?;
        let sq = g.square(inv.output)?;
        let sq = g.sum_cols(sq)?;
        let half_sq = g.scale(sq, 0.5)?;
        let constant = g.scalar(0.5 * self.dim as f64 * LOG_2PI);
        let prior = g.add(half_sq, constant)?;
        let nll = g.sub(prior, inv.logdet)?;
        if !g.value(nll).is_finite() {
            return Err(Error::NonFinite(format!("{} negative log-likelihood", self.prefix)));
        }
        Ok(nll)
    }

    /// Batch mean of [`FlowStack::nll_rows`], the disentanglement loss.
    pub fn disentangle_nll(&self, g: &mut Graph, p: &Bound, w: Var, z_alpha: Var) -> Result<Var> {
        let rows = self.nll_rows(g, p, w, z_alpha)?;
        g.mean(rows)
    }

    fn run_single(
        &self,
        store: &ParamStore,
        x: &[f64],
        z_alpha: &[f64],
        inverse: bool,
    ) -> Result<FlowResult> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(Tensor::row(x));
        let zv = g.constant(Tensor::row(z_alpha));
        let nodes = if inverse {
            self.inverse(&mut g, &p, xv, zv)?
        } else {
            self.forward(&mut g, &p, xv, zv)?
        };
        Ok(FlowResult {
            output: g.value(nodes.output).data().to_vec(),
            logdet: g.value(nodes.logdet).item()?,
        })
    }

    pub fn forward_vec(&self, store: &ParamStore, eps: &[f64], z_alpha: &[f64]) -> Result<FlowResult> {
        self.run_single(store, eps, z_alpha, false)
    }

    pub fn inverse_vec(&self, store: &ParamStore, w: &[f64], z_alpha: &[f64]) -> Result<FlowResult> {
        self.run_single(store, w, z_alpha, true)
    }

    pub fn nll_vec(&self, store: &ParamStore, w: &[f64], z_alpha: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let wv = g.constant(Tensor::row(w));
        let zv = g.constant(Tensor::row(z_alpha));
        let nll = self.disentangle_nll(&mut g, &p, wv, zv)?;
        g.value(nll).item()
    }

    /// Draws `eps ~ N(0, I)` and returns `τ(eps | z_alpha)`.
    pub fn sample_specific<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        z_alpha: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let eps: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        Ok(self.forward_vec(store, &eps, z_alpha)?.output)
    }

    /// Data-dependent actnorm initialization: walks the inverse direction on
    /// a batch of `(w, z_alpha)` and sets each actnorm so that its output has
    /// zero mean and unit variance per channel.
    pub fn init_actnorm(&self, store: &mut ParamStore, w: &Tensor, z_alpha: &Tensor) -> Result<()> {
        let mut x = w.clone();
        for k in (0..self.blocks).rev() {
            let mut g = Graph::new();
            let xv = g.constant(x);
            let sw = self.switch(&mut g, xv, true)?;
            let y = g.value(sw).clone();
            let (rows, cols) = (y.rows(), y.cols());
            let mut bias = vec![0.0; cols];
            let mut log_scale = vec![0.0; cols];
            for j in 0..cols {
                let mean = (0..rows).map(|i| y.get(i, j)).sum::<f64>() / rows as f64;
                let var = (0..rows).map(|i| (y.get(i, j) - mean).powi(2)).sum::<f64>() / rows as f64;
                bias[j] = mean;
                log_scale[j] = var.sqrt().max(1e-6).ln();
            }
            *store.get_mut(&self.name(k, "an.bias"))? = Tensor::row(&bias);
            *store.get_mut(&self.name(k, "an.log_scale"))? = Tensor::row(&log_scale);

            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let yv = g.constant(y);
            let zv = g.constant(z_alpha.clone());
            let (an, _) = self.actnorm_inverse(&mut g, &p, k, yv)?;
            let (out, _) = self.coupling_inverse(&mut g, &p, k, an, zv)?;
            x = g.value(out).clone();
        }
        Ok(())
    }
}
