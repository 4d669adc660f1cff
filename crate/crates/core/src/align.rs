//! Bilinear critic `f(z_p, z_eta) = exp(z_pᵀ W z_eta)` with an InfoNCE
//! objective over in-batch negatives, plus the margin triplet loss.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Aligner {
    pub prefix: String,
    pub d: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignScore {
    pub value: f64,
    pub log_value: f64,
}

impl Aligner {
    pub fn new(prefix: impl Into<String>, d: usize) -> Self {
        Self {
            prefix: prefix.into(),
            d,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    /// `W` starts as the identity, i.e. a plain dot-product critic.
    pub fn init(&self, store: &mut ParamStore) {
        store.insert(self.weight_name(), Tensor::eye(self.d));
    }

    pub fn f_align(&self, store: &ParamStore, z_p: &[f64], z_eta: &[f64]) -> Result<AlignScore> {
        let w = store.get(&self.weight_name())?;
        if z_p.len() != self.d || z_eta.len() != self.d {
            return Err(Error::Shape {
                op: "f_align",
                lhs: vec![z_p.len()],
                rhs: vec![z_eta.len()],
            });
        }
        let log_value = bilinear(w, z_p, z_eta);
        Ok(AlignScore {
            value: log_value.exp(),
            log_value,
        })
    }

    /// `[B, B]` matrix whose entry `(i, j)` is `z_p[j]ᵀ W z_eta[i]`.
    pub fn logits(&self, g: &mut Graph, p: &Bound, z_p: Var, z_eta: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let w_t = g.transpose(w)?;
        let q = g.matmul(z_eta, w_t)?;
        let zp_t = g.transpose(z_p)?;
        g.matmul(q, zp_t)
    }

    /// `-mean_i [logit_ii - logsumexp_j logit_ji]`, computed in log space.
    pub fn infonce(&self, g: &mut Graph, p: &Bound, z_p: Var, z_eta: Var) -> Result<Var> {
        let (bp, be) = (g.value(z_p).shape().to_vec(), g.value(z_eta).shape().to_vec());
        if bp != be || bp.len() != 2 || bp[1] != self.d {
            return Err(Error::Shape {
                op: "infonce",
                lhs: bp,
                rhs: be,
            });
        }
        if bp[0] == 0 {
            return Err(Error::Contract("infonce needs a non-empty batch".into()));
        }
        let logits = self.logits(g, p, z_p, z_eta)?;
        infonce_from_logits(g, logits)
    }
}

/// InfoNCE on a `[B, B]` logit matrix laid out as in [`Aligner::logits`].
pub fn infonce_from_logits(g: &mut Graph, logits: Var) -> Result<Var> {
    let b = g.value(logits).rows();
    // Picking the diagonal through a mask keeps `logit_ii` bit-identical to
    // the entry inside the log-sum-exp.
    let mask = g.constant(Tensor::eye(b));
    let picked = g.mul(logits, mask)?;
    let positive = g.sum_cols(picked)?;
    let lse = g.logsumexp(logits)?;
    let per_row = g.sub(lse, positive)?;
    g.mean(per_row)
}

/// Mean squared distance between paired rows, `mean_i ‖z_p_i - z_eta_i‖² / d`.
/// Used only as the alignment ablation.
pub fn mse_alignment(g: &mut Graph, z_p: Var, z_eta: Var) -> Result<Var> {
    let diff = g.sub(z_p, z_eta)?;
    let sq = g.square(diff)?;
    g.mean(sq)
}

fn bilinear(w: &Tensor, z_p: &[f64], z_eta: &[f64]) -> f64 {
    let d = z_eta.len();
    z_p.iter()
        .enumerate()
        .map(|(i, &a)| a * (0..d).map(|j| w.get(i, j) * z_eta[j]).sum::<f64>())
        .sum()
}

/// `max(0, margin + d_pos - d_neg)`
pub fn triplet_loss(d_pos: f64, d_neg: f64, margin: f64) -> Result<f64> {
    if !(margin > 0.0) || d_pos < 0.0 || d_neg < 0.0 {
        return Err(Error::Contract(format!(
            "triplet loss needs margin > 0 and non-negative distances, got {margin}, {d_pos}, {d_neg}"
        )));
    }
    Ok((margin + (d_pos - d_neg)).max(0.0))
}
