//! Optimization of the joint objective, caption pretraining and the
//! checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::model::{Alignment, Batch, DataDims, FlowMode, LossValues, LossWeights, Modality, Model, ModelConfig, QuerySet};
use crate::params::ParamStore;
use crate::synthdata::TripletDataset;
use crate::tensor::{Graph, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"STCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Header of the per-step metrics log.
pub const METRICS_HEADER: &str = "step\tL_tot\tL_rec\tL_flowS\tL_flowT\tL_flowP\tL_nce";

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_QUERY: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// How the query subset is chosen for each training batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryPolicy {
    /// Uniform over `{S}`, `{T}`, `{S, T}` per batch.
    #[serde(rename = "sampled")]
    Sampled,
    #[serde(rename = "s")]
    Sketch,
    #[serde(rename = "t")]
    Text,
    #[serde(rename = "st")]
    Both,
}

impl QueryPolicy {
    fn pick<R: Rng + ?Sized>(self, rng: &mut R) -> QuerySet {
        match self {
            QueryPolicy::Sampled => QuerySet::ALL[rng.random_range(0..3)],
            QueryPolicy::Sketch => QuerySet::Sketch,
            QueryPolicy::Text => QuerySet::Text,
            QueryPolicy::Both => QuerySet::Both,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub query: QueryPolicy,
    pub alignment: Alignment,
    pub flow: FlowMode,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            steps: 2000,
            seed: 0,
            clip_norm: 5.0,
            weights: LossWeights::default(),
            query: QueryPolicy::Sampled,
            alignment: Alignment::InfoNce,
            flow: FlowMode::Learned,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        let w = &self.weights;
        for (name, v) in [("rec", w.rec), ("flow", w.flow), ("nce", w.nce)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("weights.{name} must be finite and >= 0, got {v}")));
            }
        }
        self.model.validate()
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub losses: LossValues,
}

impl StepRecord {
    pub fn tsv(&self) -> String {
        let l = &self.losses;
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step,
            l.total,
            l.rec(),
            l.flow_sketch,
            l.flow_text,
            l.flow_photo,
            l.align
        )
    }
}

/// Bias-corrected first and second moments, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update of every parameter named in `grads`.
pub fn adam_step(store: &mut ParamStore, grads: &[(String, Tensor)], state: &mut AdamState, lr: f64) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, grad) in grads {
        let param = store.get_mut(name)?;
        if param.shape() != grad.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        if m.shape() != grad.shape() || v.shape() != grad.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: m.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let (p, m, v) = (param.data_mut(), m.data_mut(), v.data_mut());
        for (i, &g) in grad.data().iter().enumerate() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(String, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

/// Everything needed to rebuild and resume a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub dims: DataDims,
    pub step: u64,
    pub actnorm_initialized: bool,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    dims: DataDims,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::new(&self.config.model, self.dims)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            dims: self.dims,
        })
        .expect("config serializes");
        let mut step = self.step.to_le_bytes().to_vec();
        step.extend((self.actnorm_initialized as u32).to_le_bytes());

        let mut table = Vec::new();
        table.extend((self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            table.extend((name.len() as u32).to_le_bytes());
            table.extend(name.as_bytes());
            table.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                table.extend((d as u32).to_le_bytes());
            }
            table.extend(binio::f64s_to_bytes(t.data()));
        }

        let write = || -> std::result::Result<Vec<u8>, FormatError> {
            let mut w = Writer::new(Vec::new());
            w.bytes(&CHECKPOINT_MAGIC)?;
            w.u32(CHECKPOINT_VERSION)?;
            w.section(b"CONF", &header)?;
            w.section(b"STEP", &step)?;
            w.section(b"PARM", &table)?;
            w.finish()
        };
        write().expect("writing to memory cannot fail")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(&CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let conf = r.section(b"CONF")?;
        let header: Header = serde_json::from_slice(conf)
            .map_err(|e| FormatError::Malformed(format!("checkpoint config: {e}")))?;
        let mut step = Reader::new(r.section(b"STEP")?);
        let step_count = step.u64("STEP")?;
        let flag = step.u32("STEP")?;
        step.expect_end()?;
        let actnorm_initialized = match flag {
            0 => false,
            1 => true,
            other => return Err(FormatError::Malformed(format!("actnorm flag {other}")).into()),
        };

        let mut table = Reader::new(r.section(b"PARM")?);
        let count = table.u32("PARM")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = table.u32("PARM")? as usize;
            let name = std::str::from_utf8(table.take(name_len, "PARM")?)
                .map_err(|_| FormatError::Malformed("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = table.u32("PARM")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(table.u32("PARM")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| FormatError::Malformed(format!("parameter {name} too large")))?;
            let data = binio::bytes_to_f64s(table.take(numel, "PARM")?);
            let tensor = Tensor::new(shape, data)
                .map_err(|e| FormatError::Malformed(format!("parameter {name}: {e}")))?;
            if params.contains(&name) {
                return Err(FormatError::Malformed(format!("duplicate parameter {name}")).into());
            }
            params.insert(name, tensor);
        }
        table.expect_end()?;
        r.expect_end()?;
        header.config.validate()?;
        Ok(Self {
            config: header.config,
            dims: header.dims,
            step: step_count,
            actnorm_initialized,
            params,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(FormatError::from)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = binio::read_file(path)?;
    Checkpoint::from_bytes(&bytes)
}

/// Stateful training loop over one dataset.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub store: ParamStore,
    pub adam: AdamState,
    pub step: u64,
    pub actnorm_initialized: bool,
    shuffle_rng: ChaCha8Rng,
    query_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Trainer {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: &TrainConfig, dims: DataDims) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, dims)?;
        let store = model.init(&mut stream(config.seed, STREAM_INIT));
        Ok(Self::with_store(model, config, store, false))
    }

    /// Continues from `ckpt`'s parameters under `config`. The optimizer
    /// state starts fresh; the step counter carries over.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.model != ckpt.config.model {
            return Err(Error::Config("model section differs from the checkpoint".into()));
        }
        let model = ckpt.model()?;
        let mut t = Self::with_store(model, config, ckpt.params.clone(), ckpt.actnorm_initialized);
        t.step = ckpt.step;
        Ok(t)
    }

    fn with_store(model: Model, config: &TrainConfig, store: ParamStore, actnorm_initialized: bool) -> Self {
        Self {
            model,
            config: config.clone(),
            store,
            adam: AdamState::new(),
            step: 0,
            actnorm_initialized,
            shuffle_rng: stream(config.seed, STREAM_SHUFFLE),
            query_rng: stream(config.seed, STREAM_QUERY),
            noise_rng: stream(config.seed, STREAM_NOISE),
            order: Vec::new(),
            cursor: 0,
        }
    }

    fn check_data(&self, ds: &TripletDataset) -> Result<()> {
        let dims = DataDims::of(ds)?;
        if dims != self.model.dims {
            return Err(Error::Config(format!(
                "dataset dims {dims:?} differ from model dims {:?}",
                self.model.dims
            )));
        }
        if ds.is_empty() {
            return Err(Error::Config("empty dataset".into()));
        }
        Ok(())
    }

    /// Next batch from a seeded reshuffle per epoch. Records that do not
    /// fill a whole batch at the end of an epoch are skipped.
    fn next_indices(&mut self, n: usize) -> Vec<usize> {
        let b = self.config.batch_size.min(n);
        if self.order.len() != n || self.cursor + b > n {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.shuffle_rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        out
    }

    fn init_actnorm(&mut self, batch: &Batch) -> Result<()> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let enc = self.model.encode(&mut g, &p, batch)?;
        for m in Modality::ALL {
            let w = g.value(enc.beta(m)).clone();
            let z = g.value(enc.alpha(m)).clone();
            self.model.flow(m).init_actnorm(&mut self.store, &w, &z)?;
        }
        self.actnorm_initialized = true;
        Ok(())
    }

    fn trainable(&self, name: &str) -> bool {
        !(self.config.flow == FlowMode::Identity && name.starts_with("flow."))
    }

    fn apply(&mut self, grads: Vec<(String, Tensor)>) -> Result<()> {
        let mut grads: Vec<_> = grads.into_iter().filter(|(n, _)| self.trainable(n)).collect();
        clip_global_norm(&mut grads, self.config.clip_norm);
        adam_step(&mut self.store, &grads, &mut self.adam, self.config.lr)
    }

    /// One optimization step of the joint objective.
    pub fn train_step(&mut self, ds: &TripletDataset) -> Result<StepRecord> {
        self.check_data(ds)?;
        let indices = self.next_indices(ds.len());
        let batch = Batch::from_dataset(ds, &indices);
        if !self.actnorm_initialized && self.config.flow == FlowMode::Learned {
            self.init_actnorm(&batch)?;
        }
        let query = self.config.query.pick(&mut self.query_rng);
        let step = self.step + 1;

        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let terms = self
            .model
            .loss(&mut g, &p, &batch, query, &self.config.weights, self.config.alignment)?;
        let losses = terms.values(&g)?;
        // name the first offending module term; L_tot is non-finite whenever any of them is
        let named = losses.named();
        if let Some((term, _)) = named[1..].iter().chain(&named[..1]).copied().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Diverged { step, term });
        }
        let grads = g.param_gradients(terms.total)?;
        if grads.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Diverged { step, term: "gradient" });
        }
        self.apply(grads)?;
        self.step = step;
        Ok(StepRecord { step, losses })
    }

    /// One step of photo-conditioned caption pretraining. Only the vector
    /// encoder and the text decoder are updated.
    pub fn pretrain_caption_step(&mut self, ds: &TripletDataset) -> Result<(u64, f64)> {
        self.check_data(ds)?;
        let indices = self.next_indices(ds.len());
        let batch = Batch::from_dataset(ds, &indices);
        let step = self.step + 1;
        let dim = self.model.config.c - self.model.config.d;
        let noise: Vec<f64> = (0..batch.len() * dim)
            .map(|_| self.noise_rng.sample(StandardNormal))
            .collect();
        let eps = Tensor::matrix(batch.len(), dim, noise)?;

        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let loss = self.model.photo_caption_loss(&mut g, &p, &batch, &eps)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged { step, term: "L_cap" });
        }
        let grads: Vec<_> = g
            .param_gradients(loss)?
            .into_iter()
            .filter(|(n, _)| n.starts_with("enc.vec.") || n.starts_with("dec.text."))
            .collect();
        self.apply(grads)?;
        self.step = step;
        Ok((step, value))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            dims: self.model.dims,
            step: self.step,
            actnorm_initialized: self.actnorm_initialized,
            params: self.store.clone(),
        }
    }
}

/// Runs `config.steps` joint steps from a fresh initialization.
pub fn train(ds: &TripletDataset, config: &TrainConfig) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(config, DataDims::of(ds)?)?;
    trainer.check_data(ds)?;
    let mut log = Vec::with_capacity(config.steps as usize);
    for _ in 0..config.steps {
        log.push(trainer.train_step(ds)?);
    }
    Ok((trainer.checkpoint(), log))
}

/// Runs `config.steps` caption-pretraining steps from a fresh initialization.
pub fn pretrain_caption(ds: &TripletDataset, config: &TrainConfig) -> Result<(Checkpoint, Vec<(u64, f64)>)> {
    let mut trainer = Trainer::new(config, DataDims::of(ds)?)?;
    trainer.check_data(ds)?;
    let mut log = Vec::with_capacity(config.steps as usize);
    for _ in 0..config.steps {
        log.push(trainer.pretrain_caption_step(ds)?);
    }
    Ok((trainer.checkpoint(), log))
}
