//! Retrieval and captioning with a trained parameter set.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{self, SplitEmbedding};
use crate::error::{Error, Result};
use crate::model::{Modality, Model, QuerySet};
use crate::params::ParamStore;
use crate::synthdata::TripletDataset;
use crate::tensor::{Graph, Tensor};

/// Gallery indices best first, with their `log f_align` scores.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub mode: QuerySet,
    pub ranking: Vec<usize>,
    pub scores: Vec<f64>,
}

/// A sketch, a caption, or both.
#[derive(Clone, Copy, Debug, Default)]
pub struct Query<'a> {
    pub sketch: Option<&'a [f64]>,
    pub text: Option<&'a [u32]>,
}

impl Query<'_> {
    pub fn mode(&self) -> Result<QuerySet> {
        match (self.sketch.is_some(), self.text.is_some()) {
            (true, true) => Ok(QuerySet::Both),
            (true, false) => Ok(QuerySet::Sketch),
            (false, true) => Ok(QuerySet::Text),
            (false, false) => Err(Error::Contract("query needs a sketch or a text".into())),
        }
    }
}

/// Agnostic slices `[N, d]` of a photo gallery `[N, n_obs]`.
pub fn photo_alphas(model: &Model, store: &ParamStore, photos: &Tensor) -> Result<Tensor> {
    if photos.rows() == 0 {
        return Err(Error::Contract("empty gallery".into()));
    }
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(photos.clone());
    let z = model.vector_encoder.forward(&mut g, &p, x)?;
    let (alpha, _) = encoders::split(&mut g, z, model.config.d)?;
    Ok(g.value(alpha).clone())
}

/// Pooled query vectors `[Q, d]` for a batch of queries sharing one mode.
pub fn query_etas(
    model: &Model,
    store: &ParamStore,
    sketches: Option<&Tensor>,
    texts: Option<&[Vec<u32>]>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let d = model.config.d;
    let alpha_s = match sketches {
        Some(s) => {
            let x = g.constant(s.clone());
            let z = model.vector_encoder.forward(&mut g, &p, x)?;
            Some(encoders::split(&mut g, z, d)?.0)
        }
        None => None,
    };
    let alpha_t = match texts {
        Some(t) => {
            let z = model.text_encoder.forward(&mut g, &p, t)?;
            Some(encoders::split(&mut g, z, d)?.0)
        }
        None => None,
    };
    let eta = match (alpha_s, alpha_t) {
        (Some(s), Some(t)) => {
            if g.value(s).rows() != g.value(t).rows() {
                return Err(Error::Shape {
                    op: "query",
                    lhs: vec![g.value(s).rows()],
                    rhs: vec![g.value(t).rows()],
                });
            }
            model.fuse(&mut g, &p, s, t, QuerySet::Both)?
        }
        (Some(s), None) => model.fuse(&mut g, &p, s, s, QuerySet::Sketch)?,
        (None, Some(t)) => model.fuse(&mut g, &p, t, t, QuerySet::Text)?,
        (None, None) => return Err(Error::Contract("query needs a sketch or a text".into())),
    };
    Ok(g.value(eta).clone())
}

/// `log f_align` of every gallery row against one pooled query.
pub fn score_gallery(model: &Model, store: &ParamStore, eta: &[f64], gallery_alpha: &Tensor) -> Result<Vec<f64>> {
    let d = model.config.d;
    if eta.len() != d || gallery_alpha.cols() != d {
        return Err(Error::Shape {
            op: "score_gallery",
            lhs: vec![eta.len()],
            rhs: gallery_alpha.shape().to_vec(),
        });
    }
    let w = store.get(&model.aligner.weight_name())?;
    // W z_eta, then one dot product per gallery item
    let w_eta: Vec<f64> = (0..d)
        .map(|i| (0..d).map(|j| w.get(i, j) * eta[j]).sum())
        .collect();
    Ok((0..gallery_alpha.rows())
        .map(|r| gallery_alpha.row_slice(r).iter().zip(&w_eta).map(|(a, b)| a * b).sum())
        .collect())
}

/// Indices sorted by descending score, lower index first on ties.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// 1-based position `target` would take in [`rank`]'s ordering.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v.total_cmp(&s).is_gt() || (v == s && i < target))
        .count()
}

pub fn retrieve(model: &Model, store: &ParamStore, query: &Query, gallery: &Tensor) -> Result<RetrievalResult> {
    let mode = query.mode()?;
    let alphas = photo_alphas(model, store, gallery)?;
    let sketches = query.sketch.map(Tensor::row);
    let texts = query.text.map(|t| vec![t.to_vec()]);
    let eta = query_etas(model, store, sketches.as_ref(), texts.as_deref())?;
    let scores = score_gallery(model, store, eta.data(), &alphas)?;
    let ranking = rank(&scores);
    let sorted = ranking.iter().map(|&i| scores[i]).collect();
    Ok(RetrievalResult {
        mode,
        ranking,
        scores: sorted,
    })
}

/// For every record of `ds` used as a query in `mode`, the 1-based rank of
/// its own photo among all photos of `ds`.
pub fn true_ranks(model: &Model, store: &ParamStore, ds: &TripletDataset, mode: QuerySet) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let alphas = photo_alphas(model, store, &ds.photo_batch(&all))?;
    let sketches = ds.sketch_batch(&all);
    let texts = ds.text_batch(&all);
    let (s, t) = match mode {
        QuerySet::Sketch => (Some(&sketches), None),
        QuerySet::Text => (None, Some(texts.as_slice())),
        QuerySet::Both => (Some(&sketches), Some(texts.as_slice())),
    };
    let etas = query_etas(model, store, s, t)?;
    (0..ds.len())
        .map(|i| Ok(rank_of(&score_gallery(model, store, etas.row_slice(i), &alphas)?, i)))
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub enum CaptionSource<'a> {
    Sketch(&'a [f64]),
    Photo(&'a [f64]),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionCandidate {
    pub seed: u64,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionResult {
    pub candidates: Vec<CaptionCandidate>,
}

/// Greedy caption for one draw of `eps`, seeded by `seed`.
pub fn caption_candidate(model: &Model, store: &ParamStore, z_alpha: &[f64], seed: u64) -> Result<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = model
        .flow(Modality::Text)
        .sample_specific(store, z_alpha, &mut rng)?;
    let z_tot = [z_alpha, w.as_slice()].concat();
    model
        .text_decoder
        .greedy_decode(store, &z_tot, model.dims.text_len)
}

/// `k` candidates from an encoded input. Only `z_alpha` is read.
pub fn caption_from_embedding(
    model: &Model,
    store: &ParamStore,
    embedding: &SplitEmbedding,
    k: usize,
    seed: u64,
) -> Result<CaptionResult> {
    if k == 0 {
        return Err(Error::Contract("caption needs k >= 1".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let candidates = (0..k)
        .map(|_| {
            let s = seeds.next_u64();
            Ok(CaptionCandidate {
                seed: s,
                tokens: caption_candidate(model, store, &embedding.z_alpha, s)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CaptionResult { candidates })
}

pub fn caption(model: &Model, store: &ParamStore, source: CaptionSource, k: usize, seed: u64) -> Result<CaptionResult> {
    let x = match source {
        CaptionSource::Sketch(x) | CaptionSource::Photo(x) => x,
    };
    let embedding = model.vector_encoder.encode(store, x)?;
    caption_from_embedding(model, store, &embedding, k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_lower_index() {
        let scores = [0.5, 2.0, 0.5, 2.0, -1.0];
        assert_eq!(rank(&scores), [1, 3, 0, 2, 4]);
        for (pos, &i) in rank(&scores).iter().enumerate() {
            assert_eq!(rank_of(&scores, i), pos + 1);
        }
    }

    #[test]
    fn shift_leaves_ranking() {
        let scores = [0.3, -0.2, 0.9, 0.1];
        let shifted: Vec<f64> = scores.iter().map(|s| s + 7.0).collect();
        assert_eq!(rank(&scores), rank(&shifted));
    }

    #[test]
    fn empty_query_rejected() {
        assert!(Query::default().mode().is_err());
    }
}
