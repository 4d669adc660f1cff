//! The assembled tri-modal model and its training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::{self, Aligner};
use crate::cinn::FlowStack;
use crate::decoders::{TextDecoder, VectorDecoder};
use crate::encoders::{self, TextEncoder, VectorEncoder};
use crate::error::{Error, Result};
use crate::fusion::Mab;
use crate::params::{Bound, ParamStore};
use crate::synthdata::TripletDataset;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Total embedding width.
    pub c: usize,
    /// Width of the modality-agnostic slice.
    pub d: usize,
    pub encoder_hidden: usize,
    pub text_embed: usize,
    pub text_hidden: usize,
    pub flow_blocks: usize,
    pub flow_hidden: usize,
    pub heads: usize,
    pub mab_hidden: usize,
    pub decoder_hidden: usize,
    pub decoder_embed: usize,
    pub decoder_text_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c: 64,
            d: 48,
            encoder_hidden: 64,
            text_embed: 16,
            text_hidden: 32,
            flow_blocks: 4,
            flow_hidden: 32,
            heads: 4,
            mab_hidden: 48,
            decoder_hidden: 64,
            decoder_embed: 16,
            decoder_text_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("encoder_hidden", self.encoder_hidden),
            ("text_embed", self.text_embed),
            ("text_hidden", self.text_hidden),
            ("flow_blocks", self.flow_blocks),
            ("flow_hidden", self.flow_hidden),
            ("heads", self.heads),
            ("mab_hidden", self.mab_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("decoder_embed", self.decoder_embed),
            ("decoder_text_hidden", self.decoder_text_hidden),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be >= 1")));
        }
        if self.d == 0 || self.d + 2 > self.c {
            return Err(Error::Config(format!(
                "need 1 <= d and c - d >= 2, got c={} d={}",
                self.c, self.d
            )));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d={} must be divisible by heads={}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// Shapes taken from the dataset a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataDims {
    pub n_obs: usize,
    pub vocab: usize,
    pub text_len: usize,
}

impl DataDims {
    pub fn of(ds: &TripletDataset) -> Result<Self> {
        let c = &ds.config;
        if c.n_sketch != c.n_photo {
            return Err(Error::Config(format!(
                "shared vector encoder needs n_sketch == n_photo, got {} and {}",
                c.n_sketch, c.n_photo
            )));
        }
        Ok(Self {
            n_obs: c.n_sketch,
            vocab: c.vocab,
            text_len: c.text_len,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Sketch,
    Text,
    Photo,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Sketch, Modality::Text, Modality::Photo];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Sketch => "sketch",
            Modality::Text => "text",
            Modality::Photo => "photo",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Which query modalities are pooled into `z_eta`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySet {
    #[serde(rename = "s")]
    Sketch,
    #[serde(rename = "t")]
    Text,
    #[serde(rename = "st")]
    Both,
}

impl QuerySet {
    pub const ALL: [QuerySet; 3] = [QuerySet::Sketch, QuerySet::Text, QuerySet::Both];

    pub fn label(self) -> &'static str {
        match self {
            QuerySet::Sketch => "s",
            QuerySet::Text => "t",
            QuerySet::Both => "st",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "s" => Ok(QuerySet::Sketch),
            "t" => Ok(QuerySet::Text),
            "st" => Ok(QuerySet::Both),
            other => Err(Error::Config(format!("unknown query mode {other:?}, expected s, t or st"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    InfoNce,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    Learned,
    /// Flows stay at their identity initialization and are never updated.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    pub flow: f64,
    pub nce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            flow: 1.0,
            nce: 1.0,
        }
    }
}

/// Aligned records in matrix form.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sketch: Tensor,
    pub photo: Tensor,
    pub text: Vec<Vec<u32>>,
}

impl Batch {
    pub fn from_dataset(ds: &TripletDataset, indices: &[usize]) -> Self {
        Self {
            sketch: ds.sketch_batch(indices),
            photo: ds.photo_batch(indices),
            text: ds.text_batch(indices),
        }
    }

    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    fn check(&self) -> Result<()> {
        let b = self.len();
        if b == 0 || self.sketch.rows() != b || self.photo.rows() != b {
            return Err(Error::Shape {
                op: "batch",
                lhs: vec![self.sketch.rows(), self.photo.rows()],
                rhs: vec![b],
            });
        }
        Ok(())
    }
}

/// Per-modality encoder outputs, indexed by [`Modality`].
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub z_tot: [Var; 3],
    pub alpha: [Var; 3],
    pub beta: [Var; 3],
}

impl Encoded {
    pub fn alpha(&self, m: Modality) -> Var {
        self.alpha[m.index()]
    }

    pub fn beta(&self, m: Modality) -> Var {
        self.beta[m.index()]
    }

    pub fn z_tot(&self, m: Modality) -> Var {
        self.z_tot[m.index()]
    }
}

/// Graph nodes of every objective term (unweighted) and the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub rec: [Var; 3],
    pub flow: [Var; 3],
    pub align: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub rec_sketch: f64,
    pub rec_text: f64,
    pub rec_photo: f64,
    pub flow_sketch: f64,
    pub flow_text: f64,
    pub flow_photo: f64,
    pub align: f64,
}

impl LossValues {
    pub fn rec(&self) -> f64 {
        self.rec_sketch + self.rec_text + self.rec_photo
    }

    /// `(name, value)` pairs in a fixed order, total first.
    pub fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("L_tot", self.total),
            ("L_rec_sketch", self.rec_sketch),
            ("L_rec_text", self.rec_text),
            ("L_rec_photo", self.rec_photo),
            ("L_flowS", self.flow_sketch),
            ("L_flowT", self.flow_text),
            ("L_flowP", self.flow_photo),
            ("L_nce", self.align),
        ]
    }
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> Result<LossValues> {
        let v = |x: Var| g.value(x).item();
        Ok(LossValues {
            total: v(self.total)?,
            rec_sketch: v(self.rec[0])?,
            rec_text: v(self.rec[1])?,
            rec_photo: v(self.rec[2])?,
            flow_sketch: v(self.flow[0])?,
            flow_text: v(self.flow[1])?,
            flow_photo: v(self.flow[2])?,
            align: v(self.align)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: DataDims,
    pub vector_encoder: VectorEncoder,
    pub text_encoder: TextEncoder,
    pub flows: [FlowStack; 3],
    pub mab: Mab,
    pub aligner: Aligner,
    pub sketch_decoder: VectorDecoder,
    pub photo_decoder: VectorDecoder,
    pub text_decoder: TextDecoder,
}

impl Model {
    pub fn new(config: &ModelConfig, dims: DataDims) -> Result<Self> {
        config.validate()?;
        if dims.n_obs == 0 || dims.vocab == 0 || dims.text_len == 0 {
            return Err(Error::Config(format!("degenerate data dims {dims:?}")));
        }
        let (c, d) = (config.c, config.d);
        let flow = |m: Modality| FlowStack::new(format!("flow.{}", m.name()), c - d, d, config.flow_blocks, config.flow_hidden);
        let vector_decoder = |m: Modality| VectorDecoder {
            prefix: format!("dec.{}", m.name()),
            c,
            hidden: config.decoder_hidden,
            n_obs: dims.n_obs,
        };
        Ok(Self {
            config: config.clone(),
            dims,
            vector_encoder: VectorEncoder {
                prefix: "enc.vec".into(),
                n_obs: dims.n_obs,
                hidden: config.encoder_hidden,
                c,
                d,
            },
            text_encoder: TextEncoder {
                prefix: "enc.text".into(),
                vocab: dims.vocab,
                embed: config.text_embed,
                hidden: config.text_hidden,
                c,
                d,
            },
            flows: [flow(Modality::Sketch)?, flow(Modality::Text)?, flow(Modality::Photo)?],
            mab: Mab::new("mab", d, config.heads, config.mab_hidden)?,
            aligner: Aligner::new("align", d),
            sketch_decoder: vector_decoder(Modality::Sketch),
            photo_decoder: vector_decoder(Modality::Photo),
            text_decoder: TextDecoder {
                prefix: "dec.text".into(),
                vocab: dims.vocab,
                embed: config.decoder_embed,
                hidden: config.decoder_text_hidden,
                c,
            },
        })
    }

    pub fn flow(&self, m: Modality) -> &FlowStack {
        &self.flows[m.index()]
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        self.vector_encoder.init(&mut store, rng);
        self.text_encoder.init(&mut store, rng);
        for f in &self.flows {
            f.init(&mut store, rng);
        }
        self.mab.init(&mut store, rng);
        self.aligner.init(&mut store);
        self.sketch_decoder.init(&mut store, rng);
        self.photo_decoder.init(&mut store, rng);
        self.text_decoder.init(&mut store, rng);
        store
    }

    pub fn encode(&self, g: &mut Graph, p: &Bound, batch: &Batch) -> Result<Encoded> {
        batch.check()?;
        let sketch = g.constant(batch.sketch.clone());
        let photo = g.constant(batch.photo.clone());
        let z_s = self.vector_encoder.forward(g, p, sketch)?;
        let z_t = self.text_encoder.forward(g, p, &batch.text)?;
        let z_p = self.vector_encoder.forward(g, p, photo)?;
        let z_tot = [z_s, z_t, z_p];
        let mut alpha = [z_s; 3];
        let mut beta = [z_s; 3];
        for (i, &z) in z_tot.iter().enumerate() {
            (alpha[i], beta[i]) = encoders::split(g, z, self.config.d)?;
        }
        Ok(Encoded { z_tot, alpha, beta })
    }

    /// Pools the agnostic slices selected by `query` into `z_eta`.
    pub fn fuse(&self, g: &mut Graph, p: &Bound, alpha_sketch: Var, alpha_text: Var, query: QuerySet) -> Result<Var> {
        match query {
            QuerySet::Sketch => self.mab.pool(g, p, &[alpha_sketch]),
            QuerySet::Text => self.mab.pool(g, p, &[alpha_text]),
            QuerySet::Both => self.mab.pool(g, p, &[alpha_sketch, alpha_text]),
        }
    }

    /// Decoder targets: every caption followed by EOS.
    pub fn caption_targets(&self, text: &[Vec<u32>]) -> Vec<Vec<u32>> {
        let eos = self.text_decoder.eos();
        text.iter()
            .map(|seq| seq.iter().copied().chain([eos]).collect())
            .collect()
    }

    /// Builds every objective term on `g` and their weighted sum.
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
        query: QuerySet,
        weights: &LossWeights,
        alignment: Alignment,
    ) -> Result<LossTerms> {
        let enc = self.encode(g, p, batch)?;
        let sketch = g.constant(batch.sketch.clone());
        let photo = g.constant(batch.photo.clone());
        let rec_s = self
            .sketch_decoder
            .recon_loss(g, p, sketch, enc.z_tot(Modality::Sketch))?;
        let targets = self.caption_targets(&batch.text);
        let rec_t = self
            .text_decoder
            .caption_nll(g, p, &targets, enc.z_tot(Modality::Text))?;
        let rec_p = self
            .photo_decoder
            .recon_loss(g, p, photo, enc.z_tot(Modality::Photo))?;

        let mut flow = [rec_s; 3];
        for m in Modality::ALL {
            flow[m.index()] = self.flow(m).disentangle_nll(g, p, enc.beta(m), enc.alpha(m))?;
        }

        let z_eta = self.fuse(g, p, enc.alpha(Modality::Sketch), enc.alpha(Modality::Text), query)?;
        let z_p = enc.alpha(Modality::Photo);
        let align = match alignment {
            Alignment::InfoNce => self.aligner.infonce(g, p, z_p, z_eta)?,
            Alignment::Mse => align::mse_alignment(g, z_p, z_eta)?,
        };

        let rec = [rec_s, rec_t, rec_p];
        let mut parts = Vec::with_capacity(7);
        for &r in &rec {
            parts.push(g.scale(r, weights.rec)?);
        }
        for &f in &flow {
            parts.push(g.scale(f, weights.flow)?);
        }
        parts.push(g.scale(align, weights.nce)?);
        let mut total = parts[0];
        for &part in &parts[1..] {
            total = g.add(total, part)?;
        }
        Ok(LossTerms {
            total,
            rec,
            flow,
            align,
        })
    }

    /// Caption likelihood from the photo's agnostic slice with the text
    /// flow supplying the specific slice from `eps`.
    pub fn photo_caption_loss(&self, g: &mut Graph, p: &Bound, batch: &Batch, eps: &Tensor) -> Result<Var> {
        batch.check()?;
        let photo = g.constant(batch.photo.clone());
        let z_p = self.vector_encoder.forward(g, p, photo)?;
        let (alpha, _) = encoders::split(g, z_p, self.config.d)?;
        let eps = g.constant(eps.clone());
        let w = self.flow(Modality::Text).forward(g, p, eps, alpha)?.output;
        let z_tot = g.concat(&[alpha, w], crate::tensor::Axis::Cols)?;
        let targets = self.caption_targets(&batch.text);
        self.text_decoder.caption_nll(g, p, &targets, z_tot)
    }
}
