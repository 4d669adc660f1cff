use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use trimodal_core::evalmetrics::{acc_at_q, bleu, oracle_max, EvalReport};
use trimodal_core::infer::{self, CaptionSource, Query};
use trimodal_core::model::{Alignment, Batch, DataDims, LossWeights, Model, ModelConfig, QuerySet};
use trimodal_core::synthdata::{self, GenConfig, TripletDataset};
use trimodal_core::tensor::gradcheck as fd_check;
use trimodal_core::trainer::{self, Checkpoint, Trainer, METRICS_HEADER};
use trimodal_core::Graph;

use crate::config::{EvalConfig, RunConfig};
use crate::error::{io_error, CliError};

// stdout errors (a closed pipe) are ignored so `trimodal ... | head` exits cleanly
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

pub fn gen_data(config: Option<&Path>, out: &Path, records: Option<usize>, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(n) = records {
        cfg.data.records = n;
    }
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    let ds = synthdata::generate(&cfg.data)?;
    synthdata::write_dataset(&ds, out)?;
    out!("wrote {} records (seed {}) to {}", ds.len(), cfg.data.seed, out.display());
    Ok(())
}

pub struct TrainOptions {
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub metrics: Option<PathBuf>,
    pub steps: Option<u64>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub resume: Option<PathBuf>,
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn train(opts: &TrainOptions, caption_only: bool) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(opts.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(v) = opts.steps {
        t.steps = v;
    }
    if let Some(v) = opts.seed {
        t.seed = v;
    }
    if let Some(v) = opts.lr {
        t.lr = v;
    }
    if let Some(v) = opts.batch_size {
        t.batch_size = v;
    }
    cfg.validate()?;
    let ds = synthdata::read_dataset(&opts.data)?;
    let mut trainer = match &opts.resume {
        Some(path) => Trainer::from_checkpoint(&trainer::load_checkpoint(path)?, &cfg.train)?,
        None => Trainer::new(&cfg.train, DataDims::of(&ds)?)?,
    };

    let metrics_path = opts.metrics.clone().unwrap_or_else(|| {
        let mut p = opts.out.clone().into_os_string();
        p.push(".metrics.tsv");
        p.into()
    });
    let mut log = String::new();
    let _ = writeln!(log, "{}", if caption_only { "step\tL_cap" } else { METRICS_HEADER });
    let mut last = None;
    for _ in 0..cfg.train.steps {
        let step = if caption_only {
            trainer.pretrain_caption_step(&ds).map(|(s, l)| {
                let _ = writeln!(log, "{s}\t{l:.6}");
                l
            })
        } else {
            trainer.train_step(&ds).map(|rec| {
                let _ = writeln!(log, "{}", rec.tsv());
                rec.losses.total
            })
        };
        match step {
            Ok(l) => last = Some(l),
            Err(e) => {
                write_text(&metrics_path, &log)?;
                return Err(e.into());
            }
        }
    }
    write_text(&metrics_path, &log)?;
    trainer::save_checkpoint(&trainer.checkpoint(), &opts.out)?;
    let what = if caption_only { "L_cap" } else { "L_tot" };
    match last {
        Some(l) => out!(
            "step {}: final {what} {l:.6}; checkpoint {} metrics {}",
            trainer.step,
            opts.out.display(),
            metrics_path.display()
        ),
        None => out!("step {}: initialized checkpoint {}", trainer.step, opts.out.display()),
    }
    Ok(())
}

fn load_pair(ckpt: &Path, data: &Path) -> Result<(Checkpoint, Model, TripletDataset), CliError> {
    let ckpt = trainer::load_checkpoint(ckpt)?;
    let ds = synthdata::read_dataset(data)?;
    let dims = DataDims::of(&ds)?;
    if dims != ckpt.dims {
        return Err(CliError::Data(format!(
            "dataset dims {dims:?} do not match checkpoint dims {:?}",
            ckpt.dims
        )));
    }
    let model = ckpt.model()?;
    Ok((ckpt, model, ds))
}

fn as_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn check_index(ds: &TripletDataset, i: usize) -> Result<(), CliError> {
    if i >= ds.len() {
        return Err(CliError::Usage(format!("record {i} out of range (dataset has {})", ds.len())));
    }
    Ok(())
}

fn join(tokens: &[u32]) -> String {
    tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

pub fn retrieve(ckpt: &Path, data: &Path, mode: QuerySet, query: usize, top: usize) -> Result<(), CliError> {
    let (ckpt, model, ds) = load_pair(ckpt, data)?;
    check_index(&ds, query)?;
    let store = &ckpt.params;
    let sketch = as_f64(ds.sketch(query));
    let q = Query {
        sketch: (mode != QuerySet::Text).then_some(sketch.as_slice()),
        text: (mode != QuerySet::Sketch).then_some(ds.text(query)),
    };
    let all: Vec<usize> = (0..ds.len()).collect();
    let res = infer::retrieve(&model, store, &q, &ds.photo_batch(&all))?;
    out!("mode {} query {query}", mode.label());
    out!("rank\tindex\tscore");
    for (r, (i, s)) in res.ranking.iter().zip(&res.scores).take(top).enumerate() {
        out!("{}\t{i}\t{s:.6}", r + 1);
    }
    let ranks = infer::true_ranks(&model, store, &ds, mode)?;
    out!(
        "Acc@1 {:.4}\tAcc@10 {:.4}\t({} queries, gallery {})",
        acc_at_q(&ranks, 1)?,
        acc_at_q(&ranks, 10)?,
        ranks.len(),
        ds.len()
    );
    Ok(())
}

pub fn caption(ckpt: &Path, data: &Path, index: usize, photo: bool, k: usize, seed: u64) -> Result<(), CliError> {
    let (ckpt, model, ds) = load_pair(ckpt, data)?;
    check_index(&ds, index)?;
    let x = as_f64(if photo { ds.photo(index) } else { ds.sketch(index) });
    let source = if photo { CaptionSource::Photo(&x) } else { CaptionSource::Sketch(&x) };
    let res = infer::caption(&model, &ckpt.params, source, k, seed)?;
    out!("seed\ttokens");
    for c in &res.candidates {
        out!("{}\t{}", c.seed, join(&c.tokens));
    }
    let reference = ds.text(index);
    out!("reference\t{}", join(reference));
    let cands: Vec<&[u32]> = res.candidates.iter().map(|c| c.tokens.as_slice()).collect();
    let mut line = String::from("oracle");
    for n in 1..=4 {
        let b = oracle_max(&cands, reference, |c, r| bleu(c, r, n))?;
        let _ = write!(line, "\tBLEU-{n} {b:.4}");
    }
    out!("{line}");
    Ok(())
}

pub fn eval(ckpt: &Path, data: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    cfg.eval.validate()?;
    let (ckpt, model, ds) = load_pair(ckpt, data)?;
    let report = build_report(&ckpt, &model, &ds, &cfg.eval)?;
    let text = report.to_toml();
    match out {
        Some(path) => {
            write_text(path, &text)?;
            out!("wrote {}", path.display());
        }
        None => {
            let _ = std::io::stdout().write_all(text.as_bytes());
        }
    }
    Ok(())
}

fn build_report(ckpt: &Checkpoint, model: &Model, ds: &TripletDataset, eval: &EvalConfig) -> Result<EvalReport, CliError> {
    let store = &ckpt.params;
    let mut report = EvalReport {
        queries: ds.len(),
        gallery: ds.len(),
        ..EvalReport::default()
    };
    for mode in QuerySet::ALL {
        let ranks = infer::true_ranks(model, store, ds, mode)?;
        let accs = eval
            .q
            .iter()
            .map(|&q| Ok((q, acc_at_q(&ranks, q)?)))
            .collect::<Result<BTreeMap<_, _>, trimodal_core::Error>>()?;
        report.acc_at.insert(mode.label().to_string(), accs);
    }

    let records = eval.caption_records.min(ds.len());
    if records > 0 {
        let mut sums = vec![0.0; eval.bleu_max_n];
        for i in 0..records {
            let x = as_f64(ds.photo(i));
            let res = infer::caption(model, store, CaptionSource::Photo(&x), eval.caption_samples, eval.seed.wrapping_add(i as u64))?;
            let cands: Vec<&[u32]> = res.candidates.iter().map(|c| c.tokens.as_slice()).collect();
            for (n, sum) in (1..=eval.bleu_max_n).zip(sums.iter_mut()) {
                *sum += oracle_max(&cands, ds.text(i), |c, r| bleu(c, r, n))?;
            }
        }
        report.caption_records = records;
        report.caption_samples = eval.caption_samples;
        for (n, sum) in (1..=eval.bleu_max_n).zip(sums) {
            report.bleu.insert(n, sum / records as f64);
        }
    }

    let echo = RunConfig {
        data: ds.config.clone(),
        train: ckpt.config.clone(),
        eval: eval.clone(),
    };
    report.config = echo.flatten().into_iter().collect();
    Ok(report)
}

pub fn gradcheck(seed: u64, h: f64, tol: f64, atol: f64) -> Result<(), CliError> {
    let gen = GenConfig {
        k: 3,
        m_sketch: 2,
        m_text: 2,
        m_photo: 2,
        n_sketch: 5,
        n_photo: 5,
        text_len: 3,
        vocab: 5,
        records: 2,
        seed,
    };
    let ds = synthdata::generate(&gen)?;
    let config = ModelConfig {
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
    };
    let trainer = Trainer::new(
        &trainer::TrainConfig {
            seed,
            model: config,
            ..Default::default()
        },
        DataDims::of(&ds)?,
    )?;
    let batch = Batch::from_dataset(&ds, &[0, 1]);
    let mut failures = 0;
    // each term on its own: at a fresh init L_tot is large enough that central
    // differences drown the small attention gradients in roundoff
    for mode in QuerySet::ALL {
        for alignment in [Alignment::InfoNce, Alignment::Mse] {
            let mut g = Graph::new();
            let p = trainer.store.bind(&mut g);
            let terms = trainer.model.loss(&mut g, &p, &batch, mode, &LossWeights::default(), alignment)?;
            let leaves: Vec<_> = p.iter().map(|(_, v)| v).collect();
            let mut checks = vec![(format!("L_align[{alignment:?}]"), terms.align)];
            if alignment == Alignment::InfoNce {
                for (m, name) in ["sketch", "text", "photo"].into_iter().enumerate() {
                    checks.push((format!("L_rec_{name}"), terms.rec[m]));
                    checks.push((format!("L_flow_{name}"), terms.flow[m]));
                }
            }
            for (term, output) in checks {
                let report = fd_check(&mut g, output, &leaves, h, tol)?;
                // structurally zero gradients leave only roundoff, which no relative bound survives
                for e in report.failures().filter(|e| e.max_abs_diff > atol) {
                    out!("FAIL query {} {term} d/d{}: rel err {:.3e}", mode.label(), e.name, e.rel_err);
                    failures += 1;
                }
                out!(
                    "query {} {term}: {} tensors, max rel err {:.3e}",
                    mode.label(),
                    report.entries.len(),
                    report.max_rel_err()
                );
            }
        }
    }
    if failures > 0 {
        return Err(CliError::Numeric(format!("{failures} gradient checks failed (tol {tol:e})")));
    }
    out!("gradcheck passed (h {h:e}, tol {tol:e}, atol {atol:e})");
    Ok(())
}

pub fn inspect(path: &Path) -> Result<(), CliError> {
    let ckpt = trainer::load_checkpoint(path)?;
    out!("format STCK v{}", trainer::CHECKPOINT_VERSION);
    out!("step {}", ckpt.step);
    out!("actnorm_initialized {}", ckpt.actnorm_initialized);
    out!(
        "dims n_obs={} vocab={} text_len={}",
        ckpt.dims.n_obs, ckpt.dims.vocab, ckpt.dims.text_len
    );
    let conf = toml::to_string(&ckpt.config).map_err(|e| CliError::Data(e.to_string()))?;
    out!("[config]\n{}", conf.trim_end());
    out!("[params]");
    for (name, t) in ckpt.params.iter() {
        out!("{name}\t{:?}\t{}", t.shape(), t.len());
    }
    out!("total {} tensors, {} values", ckpt.params.len(), ckpt.params.numel());
    Ok(())
}
