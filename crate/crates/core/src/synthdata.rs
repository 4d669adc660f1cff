//! Seeded synthetic sketch/text/photo triplets.
//!
//! Each record draws a shared latent `s ~ N(0, I_k)` plus independent noise
//! `u_M ~ N(0, I_{m_M})` per modality. Sketch and photo are `tanh` of a fixed
//! random linear map of `[s; u]`; text tokens bucket a third linear map of
//! `[s; u_T]` into `vocab` bins over `[-3, 3]`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"TRI1";
pub const DATASET_VERSION: u32 = 1;

const BUCKET_RANGE: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Shared latent dimension.
    pub k: usize,
    pub m_sketch: usize,
    pub m_text: usize,
    pub m_photo: usize,
    pub n_sketch: usize,
    pub n_photo: usize,
    /// Tokens per text.
    pub text_len: usize,
    pub vocab: usize,
    pub records: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            k: 8,
            m_sketch: 4,
            m_text: 4,
            m_photo: 4,
            n_sketch: 32,
            n_photo: 32,
            text_len: 12,
            vocab: 64,
            records: 2000,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("n_sketch", self.n_sketch),
            ("n_photo", self.n_photo),
            ("records", self.records),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.vocab < 4 {
            return Err(Error::Config(format!("vocab must be >= 4, got {}", self.vocab)));
        }
        if self.text_len < 2 {
            return Err(Error::Config(format!(
                "text_len must be >= 2, got {}",
                self.text_len
            )));
        }
        let fields = [
            self.k,
            self.m_sketch,
            self.m_text,
            self.m_photo,
            self.n_sketch,
            self.n_photo,
            self.text_len,
            self.vocab,
            self.records,
        ];
        if fields.iter().any(|&v| u32::try_from(v).is_err()) {
            return Err(Error::Config("dimensions must fit in u32".into()));
        }
        Ok(())
    }
}

/// Row-major `f32` matrix, the storage type of the dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix32 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix32 {
    fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| (std * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        Self { rows, cols, data }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(v)
                    .map(|(&a, &x)| f64::from(a) * x)
                    .sum()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletDataset {
    pub config: GenConfig,
    /// `records x n_sketch`
    pub sketches: Vec<f32>,
    /// `records x n_photo`
    pub photos: Vec<f32>,
    /// `records x text_len`, ids in `[0, vocab)`
    pub texts: Vec<u32>,
    pub gen_sketch: Matrix32,
    pub gen_photo: Matrix32,
    pub gen_text: Matrix32,
}

/// Maps a real value onto one of `vocab` equal-width bins over `[-3, 3]`.
pub fn bucket(value: f64, vocab: usize) -> u32 {
    let unit = (value + BUCKET_RANGE) / (2.0 * BUCKET_RANGE);
    let idx = (unit * vocab as f64).floor();
    idx.clamp(0.0, (vocab - 1) as f64) as u32
}

fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// One record's observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub sketch: Vec<f32>,
    pub photo: Vec<f32>,
    pub text: Vec<u32>,
}

/// `[sketch, photo, text]` generators applied to `s` and `[u_S, u_T, u_P]`.
fn observe(gens: [&Matrix32; 3], vocab: usize, s: &[f64], noise: [&[f64]; 3]) -> Observation {
    let [gs, gp, gt] = gens;
    let [u_s, u_t, u_p] = noise;
    let join = |u: &[f64]| [s, u].concat();
    Observation {
        sketch: gs.apply(&join(u_s)).iter().map(|v| v.tanh() as f32).collect(),
        photo: gp.apply(&join(u_p)).iter().map(|v| v.tanh() as f32).collect(),
        text: gt.apply(&join(u_t)).iter().map(|&v| bucket(v, vocab)).collect(),
    }
}

/// Generates a dataset. Record `i` draws from its own RNG stream, so a
/// dataset is a prefix of any larger one built from the same seed.
pub fn generate(config: &GenConfig) -> Result<TripletDataset> {
    config.validate()?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let std = |m: usize| 1.0 / ((c.k + m) as f64).sqrt();
    let gen_sketch = Matrix32::gaussian(c.n_sketch, c.k + c.m_sketch, std(c.m_sketch), &mut rng);
    let gen_photo = Matrix32::gaussian(c.n_photo, c.k + c.m_photo, std(c.m_photo), &mut rng);
    let gen_text = Matrix32::gaussian(c.text_len, c.k + c.m_text, std(c.m_text), &mut rng);

    let mut sketches = Vec::with_capacity(c.records * c.n_sketch);
    let mut photos = Vec::with_capacity(c.records * c.n_photo);
    let mut texts = Vec::with_capacity(c.records * c.text_len);
    for i in 0..c.records {
        let mut rec = ChaCha8Rng::seed_from_u64(c.seed);
        rec.set_stream(i as u64 + 1);
        let s = normals(c.k, &mut rec);
        let u_s = normals(c.m_sketch, &mut rec);
        let u_t = normals(c.m_text, &mut rec);
        let u_p = normals(c.m_photo, &mut rec);
        let obs = observe(
            [&gen_sketch, &gen_photo, &gen_text],
            c.vocab,
            &s,
            [&u_s, &u_t, &u_p],
        );
        sketches.extend(obs.sketch);
        photos.extend(obs.photo);
        texts.extend(obs.text);
    }
    Ok(TripletDataset {
        config: c.clone(),
        sketches,
        photos,
        texts,
        gen_sketch,
        gen_photo,
        gen_text,
    })
}

impl TripletDataset {
    /// Observations this dataset's generators produce for a given latent and noise.
    pub fn observe(&self, s: &[f64], u_sketch: &[f64], u_text: &[f64], u_photo: &[f64]) -> Result<Observation> {
        let c = &self.config;
        if s.len() != c.k
            || u_sketch.len() != c.m_sketch
            || u_text.len() != c.m_text
            || u_photo.len() != c.m_photo
        {
            return Err(Error::Shape {
                op: "observe",
                lhs: vec![c.k, c.m_sketch, c.m_text, c.m_photo],
                rhs: vec![s.len(), u_sketch.len(), u_text.len(), u_photo.len()],
            });
        }
        Ok(observe(
            [&self.gen_sketch, &self.gen_photo, &self.gen_text],
            c.vocab,
            s,
            [u_sketch, u_text, u_photo],
        ))
    }

    pub fn len(&self) -> usize {
        self.config.records
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sketch(&self, i: usize) -> &[f32] {
        let n = self.config.n_sketch;
        &self.sketches[i * n..(i + 1) * n]
    }

    pub fn photo(&self, i: usize) -> &[f32] {
        let n = self.config.n_photo;
        &self.photos[i * n..(i + 1) * n]
    }

    pub fn text(&self, i: usize) -> &[u32] {
        let l = self.config.text_len;
        &self.texts[i * l..(i + 1) * l]
    }

    /// Sketch rows `indices` as a `[len, n_sketch]` tensor.
    pub fn sketch_batch(&self, indices: &[usize]) -> Tensor {
        gather(indices, self.config.n_sketch, |i| self.sketch(i))
    }

    pub fn photo_batch(&self, indices: &[usize]) -> Tensor {
        gather(indices, self.config.n_photo, |i| self.photo(i))
    }

    pub fn text_batch(&self, indices: &[usize]) -> Vec<Vec<u32>> {
        indices.iter().map(|&i| self.text(i).to_vec()).collect()
    }

    /// Splits off the first `n` records; both halves keep the generator matrices.
    pub fn split_at(&self, n: usize) -> Result<(TripletDataset, TripletDataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Config(format!(
                "split point {n} outside 1..{}",
                self.len()
            )));
        }
        let take = |range: std::ops::Range<usize>| {
            let mut config = self.config.clone();
            config.records = range.len();
            TripletDataset {
                config,
                sketches: self.sketches
                    [range.start * self.config.n_sketch..range.end * self.config.n_sketch]
                    .to_vec(),
                photos: self.photos
                    [range.start * self.config.n_photo..range.end * self.config.n_photo]
                    .to_vec(),
                texts: self.texts
                    [range.start * self.config.text_len..range.end * self.config.text_len]
                    .to_vec(),
                gen_sketch: self.gen_sketch.clone(),
                gen_photo: self.gen_photo.clone(),
                gen_text: self.gen_text.clone(),
            }
        };
        Ok((take(0..n), take(n..self.len())))
    }

    /// A dataset holding only the given records, in order.
    pub fn subset(&self, indices: &[usize]) -> TripletDataset {
        let mut config = self.config.clone();
        config.records = indices.len();
        TripletDataset {
            config,
            sketches: indices.iter().flat_map(|&i| self.sketch(i).to_vec()).collect(),
            photos: indices.iter().flat_map(|&i| self.photo(i).to_vec()).collect(),
            texts: indices.iter().flat_map(|&i| self.text(i).to_vec()).collect(),
            gen_sketch: self.gen_sketch.clone(),
            gen_photo: self.gen_photo.clone(),
            gen_text: self.gen_text.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(Vec::new());
        self.write_into(&mut w).expect("in-memory write cannot fail");
        w.finish().expect("in-memory write cannot fail")
    }

    fn write_into<W: Write>(&self, w: &mut Writer<W>) -> Result<(), FormatError> {
        let c = &self.config;
        w.bytes(&DATASET_MAGIC)?;
        w.u32(DATASET_VERSION)?;
        for v in [
            c.k,
            c.m_sketch,
            c.m_text,
            c.m_photo,
            c.n_sketch,
            c.n_photo,
            c.text_len,
            c.vocab,
            c.records,
        ] {
            w.u32(v as u32)?;
        }
        w.u64(c.seed)?;
        w.section(b"SKCH", &binio::f32s_to_bytes(&self.sketches))?;
        w.section(b"PHOT", &binio::f32s_to_bytes(&self.photos))?;
        w.section(b"TEXT", &binio::u32s_to_bytes(&self.texts))?;
        let mut genm = Vec::new();
        for m in [&self.gen_sketch, &self.gen_photo, &self.gen_text] {
            genm.extend((m.rows as u32).to_le_bytes());
            genm.extend((m.cols as u32).to_le_bytes());
            genm.extend(binio::f32s_to_bytes(&m.data));
        }
        w.section(b"GENM", &genm)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(&DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let mut header = [0usize; 9];
        for h in header.iter_mut() {
            *h = r.u32("header")? as usize;
        }
        let seed = r.u64("header")?;
        let [k, m_sketch, m_text, m_photo, n_sketch, n_photo, text_len, vocab, records] = header;
        let config = GenConfig {
            k,
            m_sketch,
            m_text,
            m_photo,
            n_sketch,
            n_photo,
            text_len,
            vocab,
            records,
            seed,
        };

        let sized = |tag: &str, payload: &[u8], count: usize| {
            if payload.len() != count * 4 {
                return Err(FormatError::Malformed(format!(
                    "section {tag} holds {} bytes, expected {}",
                    payload.len(),
                    count * 4
                )));
            }
            Ok(())
        };
        let skch = r.section(b"SKCH")?;
        sized("SKCH", skch, records * n_sketch)?;
        let phot = r.section(b"PHOT")?;
        sized("PHOT", phot, records * n_photo)?;
        let text = r.section(b"TEXT")?;
        sized("TEXT", text, records * text_len)?;
        let texts = binio::bytes_to_u32s(text);
        if let Some(bad) = texts.iter().find(|&&t| t as usize >= vocab) {
            return Err(FormatError::Malformed(format!(
                "token {bad} outside vocabulary of {vocab}"
            )));
        }

        let mut genm = Reader::new(r.section(b"GENM")?);
        let mut matrices = Vec::with_capacity(3);
        for _ in 0..3 {
            let rows = genm.u32("GENM")? as usize;
            let cols = genm.u32("GENM")? as usize;
            let data = binio::bytes_to_f32s(genm.take(rows * cols * 4, "GENM")?);
            matrices.push(Matrix32 { rows, cols, data });
        }
        genm.expect_end()?;
        r.expect_end()?;
        let gen_text = matrices.pop().expect("three matrices");
        let gen_photo = matrices.pop().expect("three matrices");
        let gen_sketch = matrices.pop().expect("three matrices");

        Ok(TripletDataset {
            config,
            sketches: binio::bytes_to_f32s(skch),
            photos: binio::bytes_to_f32s(phot),
            texts,
            gen_sketch,
            gen_photo,
            gen_text,
        })
    }
}

pub fn write_dataset(ds: &TripletDataset, path: &Path) -> Result<()> {
    std::fs::write(path, ds.to_bytes()).map_err(FormatError::from)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<TripletDataset> {
    let bytes = binio::read_file(path)?;
    Ok(TripletDataset::from_bytes(&bytes)?)
}

fn gather<'a>(indices: &[usize], n: usize, row: impl Fn(usize) -> &'a [f32]) -> Tensor {
    let data = indices
        .iter()
        .flat_map(|&i| row(i).iter().map(|&v| f64::from(v)))
        .collect();
    Tensor::matrix(indices.len(), n, data).expect("gathered rows match shape")
}
