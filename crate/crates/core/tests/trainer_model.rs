mod common;

use common::{perturb, rng, tiny_dataset, tiny_dims, tiny_model_config};
use trimodal_core::model::{Alignment, Batch, FlowMode, LossWeights, Modality, Model, QuerySet};
use trimodal_core::params::ParamStore;
use trimodal_core::trainer::{
    self, adam_step, AdamState, Checkpoint, QueryPolicy, TrainConfig, Trainer, CHECKPOINT_MAGIC,
};
use trimodal_core::{encoders, Error, FormatError, Graph, Tensor};

const LOG_2PI: f64 = 1.8378770664093453;

fn tiny_train(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        steps,
        seed,
        model: tiny_model_config(),
        ..TrainConfig::default()
    }
}

fn tiny_model(seed: u64) -> (Model, ParamStore, Batch) {
    let ds = tiny_dataset(6, seed);
    let model = Model::new(&tiny_model_config(), tiny_dims(&ds)).unwrap();
    let mut r = rng(seed);
    let mut store = model.init(&mut r);
    perturb(&mut store, 0.2, &mut r);
    let batch = Batch::from_dataset(&ds, &[0, 2, 3, 5]);
    (model, store, batch)
}

/// Each module evaluated on its own graph, then summed with the weights.
fn module_sum(model: &Model, store: &ParamStore, batch: &Batch, w: &LossWeights, query: QuerySet) -> f64 {
    let d = model.config.d;
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let xs = g.constant(batch.sketch.clone());
    let xp = g.constant(batch.photo.clone());
    let zs = model.vector_encoder.forward(&mut g, &p, xs).unwrap();
    let zt = model.text_encoder.forward(&mut g, &p, &batch.text).unwrap();
    let zp = model.vector_encoder.forward(&mut g, &p, xp).unwrap();
    let rec_s = model.sketch_decoder.recon_loss(&mut g, &p, xs, zs).unwrap();
    let rec_p = model.photo_decoder.recon_loss(&mut g, &p, xp, zp).unwrap();
    let targets = model.caption_targets(&batch.text);
    let rec_t = model.text_decoder.caption_nll(&mut g, &p, &targets, zt).unwrap();
    let mut flows = 0.0;
    let mut alphas = Vec::new();
    for (m, z) in [(Modality::Sketch, zs), (Modality::Text, zt), (Modality::Photo, zp)] {
        let (a, b) = encoders::split(&mut g, z, d).unwrap();
        alphas.push(a);
        let nll = model.flow(m).disentangle_nll(&mut g, &p, b, a).unwrap();
        flows += g.value(nll).item().unwrap();
    }
    let eta = model.fuse(&mut g, &p, alphas[0], alphas[1], query).unwrap();
    let nce = model.aligner.infonce(&mut g, &p, alphas[2], eta).unwrap();
    let v = |g: &Graph, x| g.value(x).item().unwrap();
    w.rec * (v(&g, rec_s) + v(&g, rec_t) + v(&g, rec_p)) + w.flow * flows + w.nce * v(&g, nce)
}

#[test]
fn total_loss_is_weighted_module_sum() {
    for seed in 0..4 {
        let (model, store, batch) = tiny_model(seed);
        let weights = LossWeights {
            rec: 0.7,
            flow: 1.3,
            nce: 0.4,
        };
        for query in [QuerySet::Sketch, QuerySet::Text, QuerySet::Both] {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let terms = model
                .loss(&mut g, &p, &batch, query, &weights, Alignment::InfoNce)
                .unwrap();
            let total = g.value(terms.total).item().unwrap();
            let want = module_sum(&model, &store, &batch, &weights, query);
            assert!((total - want).abs() < 1e-12, "{total} vs {want}");
        }
    }
}

#[test]
fn flow_terms_depend_only_on_their_own_flow() {
    let (model, store, batch) = tiny_model(3);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let terms = model
        .loss(&mut g, &p, &batch, QuerySet::Both, &LossWeights::default(), Alignment::InfoNce)
        .unwrap();
    for m in Modality::ALL {
        let grads = g.param_gradients(terms.flow[m.index()]).unwrap();
        let own = format!("flow.{}.", m.name());
        let mut own_nonzero = false;
        for (name, grad) in grads {
            if name.starts_with("flow.") && !name.starts_with(&own) {
                assert!(grad.data().iter().all(|&v| v == 0.0), "{name} leaks into {own}");
            }
            if name.starts_with(&own) {
                own_nonzero |= grad.data().iter().any(|&v| v != 0.0);
            }
        }
        assert!(own_nonzero);
    }
}

#[test]
fn identity_flow_nll_is_standard_normal() {
    let ds = tiny_dataset(6, 1);
    let model = Model::new(&tiny_model_config(), tiny_dims(&ds)).unwrap();
    let store = model.init(&mut rng(1));
    let batch = Batch::from_dataset(&ds, &[0, 1, 2]);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let enc = model.encode(&mut g, &p, &batch).unwrap();
    let terms = model
        .loss(&mut g, &p, &batch, QuerySet::Both, &LossWeights::default(), Alignment::InfoNce)
        .unwrap();
    for m in Modality::ALL {
        let beta = g.value(enc.beta(m));
        let dim = beta.cols() as f64;
        let want = (0..beta.rows())
            .map(|i| 0.5 * beta.row_slice(i).iter().map(|v| v * v).sum::<f64>() + 0.5 * dim * LOG_2PI)
            .sum::<f64>()
            / beta.rows() as f64;
        let got = g.value(terms.flow[m.index()]).item().unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn adam_two_steps_match_scalar_oracle() {
    let grads = [0.3, -1.2];
    let mut store = ParamStore::new();
    store.insert("x", Tensor::scalar(2.0));
    let mut state = AdamState::new();
    let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
    let lr = 0.01;
    for (t, &gr) in grads.iter().enumerate() {
        adam_step(&mut store, &[("x".into(), Tensor::scalar(gr))], &mut state, lr).unwrap();
        m = 0.9 * m + 0.1 * gr;
        v = 0.999 * v + 0.001 * gr * gr;
        let k = t as i32 + 1;
        let mh = m / (1.0 - 0.9f64.powi(k));
        let vh = v / (1.0 - 0.999f64.powi(k));
        x -= lr * mh / (vh.sqrt() + 1e-8);
        assert!((store.get("x").unwrap().item().unwrap() - x).abs() < 1e-15);
    }
}

#[test]
fn zero_steps_returns_initialization() {
    let ds = tiny_dataset(8, 2);
    let cfg = tiny_train(0, 5);
    let (ckpt, log) = trainer::train(&ds, &cfg).unwrap();
    assert!(log.is_empty());
    assert_eq!(ckpt.step, 0);
    let fresh = Trainer::new(&cfg, tiny_dims(&ds)).unwrap();
    assert_eq!(ckpt.params, fresh.store);
}

#[test]
fn same_seed_same_checkpoint_bytes() {
    let ds = tiny_dataset(10, 2);
    let cfg = tiny_train(6, 9);
    let a = trainer::train(&ds, &cfg).unwrap().0.to_bytes();
    let b = trainer::train(&ds, &cfg).unwrap().0.to_bytes();
    assert_eq!(a, b);
    let c = trainer::train(&ds, &tiny_train(6, 10)).unwrap().0.to_bytes();
    assert_ne!(a, c);
}

#[test]
fn training_lowers_the_objective() {
    let ds = tiny_dataset(16, 4);
    let cfg = TrainConfig {
        query: QueryPolicy::Both,
        batch_size: 16,
        lr: 1e-2,
        ..tiny_train(60, 1)
    };
    let (_, log) = trainer::train(&ds, &cfg).unwrap();
    let first = log[0].losses.total;
    let last = log.last().unwrap().losses.total;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn identity_mode_freezes_flows() {
    let ds = tiny_dataset(8, 3);
    let cfg = TrainConfig {
        flow: FlowMode::Identity,
        ..tiny_train(5, 2)
    };
    let init = Trainer::new(&cfg, tiny_dims(&ds)).unwrap().store;
    let (ckpt, _) = trainer::train(&ds, &cfg).unwrap();
    for (name, t) in ckpt.params.iter() {
        let before = init.get(name).unwrap();
        if name.starts_with("flow.") {
            assert_eq!(t, before, "{name} moved");
        }
    }
    assert!(!ckpt.actnorm_initialized);
    assert_ne!(ckpt.params.get("align.w").unwrap(), init.get("align.w").unwrap());
}

#[test]
fn caption_pretraining_touches_only_encoder_and_text_decoder() {
    let ds = tiny_dataset(8, 3);
    let cfg = tiny_train(4, 2);
    let init = Trainer::new(&cfg, tiny_dims(&ds)).unwrap().store;
    let (ckpt, log) = trainer::pretrain_caption(&ds, &cfg).unwrap();
    assert_eq!(log.len(), 4);
    for (name, t) in ckpt.params.iter() {
        let moved = t != init.get(name).unwrap();
        let allowed = name.starts_with("enc.vec.") || name.starts_with("dec.text.");
        assert!(allowed || !moved, "{name} moved");
    }
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let ds = tiny_dataset(8, 6);
    let cfg = tiny_train(3, 4);
    let (ckpt, _) = trainer::train(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    trainer::save_checkpoint(&ckpt, &path).unwrap();
    let back = trainer::load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), ckpt.to_bytes());

    let mut t = Trainer::from_checkpoint(&back, &cfg).unwrap();
    assert_eq!(t.step, 3);
    assert_eq!(t.train_step(&ds).unwrap().step, 4);

    let other = TrainConfig {
        model: trimodal_core::model::ModelConfig {
            flow_hidden: 7,
            ..tiny_model_config()
        },
        ..cfg
    };
    assert!(matches!(Trainer::from_checkpoint(&back, &other), Err(Error::Config(_))));
}

#[test]
fn checkpoint_corruption_errors() {
    let ds = tiny_dataset(4, 6);
    let (ckpt, _) = trainer::train(&ds, &tiny_train(0, 4)).unwrap();
    let bytes = ckpt.to_bytes();
    assert_eq!(&bytes[..4], &CHECKPOINT_MAGIC);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(Error::Format(FormatError::BadMagic { .. }))
    ));

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(Error::Format(FormatError::Version { expected: 1, found: 7 }))
    ));

    match Checkpoint::from_bytes(&bytes[..bytes.len() - 5]) {
        Err(Error::Format(FormatError::Truncated { section })) => assert_eq!(section, "PARM"),
        other => panic!("expected truncation, got {other:?}"),
    }
}

#[test]
fn checkpoint_params_are_name_ordered() {
    let ds = tiny_dataset(4, 6);
    let (ckpt, _) = trainer::train(&ds, &tiny_train(0, 4)).unwrap();
    let names: Vec<&str> = ckpt.params.names().collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
}

#[test]
fn divergence_is_reported_with_step() {
    let ds = tiny_dataset(8, 1);
    let cfg = tiny_train(1, 1);
    let mut t = Trainer::new(&cfg, tiny_dims(&ds)).unwrap();
    *t.store.get_mut("dec.sketch.l2.b").unwrap() = Tensor::full(&[1, 5], f64::NAN);
    match t.train_step(&ds) {
        Err(Error::Diverged { step, term }) => {
            assert_eq!(step, 1);
            assert_eq!(term, "L_rec_sketch");
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}
