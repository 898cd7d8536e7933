use guidecap::corpus::{generate_synthetic_corpus, FeatureDims, SyntheticWorldSpec, TrainingTuple};
use guidecap::model::{load_checkpoint, save_checkpoint, CaptionModel, ModelConfig};
use guidecap::tokenizer::Vocab;
use guidecap::training::{
    encode_tuples, learning_rate_at, sweep, EncodedTuple, TrainConfig, TrainState, Trainer, PAPER_DECAY_RATES,
    PAPER_LEARNING_RATES,
};
use guidecap::Error;

struct Fixture {
    vocab: Vocab,
    train: Vec<EncodedTuple>,
    dev: Vec<EncodedTuple>,
    config: ModelConfig,
}

fn fixture(images: usize, dims: FeatureDims) -> Fixture {
    let spec = SyntheticWorldSpec { dims, n_objects: 8, n_attributes: 4, n_relations: 3, n_places: 3, ..Default::default() };
    let tuples: Vec<TrainingTuple> = generate_synthetic_corpus(&spec, images, 1).unwrap();
    let text: Vec<&str> = tuples.iter().flat_map(|t| [t.caption.as_str(), t.guiding_text.as_str()]).collect();
    let vocab = Vocab::train(&text, 80).unwrap();
    let config = ModelConfig { feature_dims: dims, ..ModelConfig::desk(vocab.len()) };
    let all = encode_tuples(&tuples, &vocab, config.max_caption_len);
    let dev = all[..2].to_vec();
    Fixture { vocab, train: all, dev, config }
}

fn small() -> Fixture {
    let dims = FeatureDims { global: 8, regional_gr: 8, regional_frcnn: 8, max_regions: 4 };
    let mut f = fixture(8, dims);
    f.config = ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, fc_hidden: 16, ..f.config };
    f
}

fn quick(lr: f64) -> TrainConfig {
    TrainConfig { learning_rate: lr, batch_size: 4, max_steps: 12, eval_every_steps: 6, beam_width: 2, ..Default::default() }
}

#[test]
fn learning_rate_decays_once_per_period() {
    let f = small();
    let cfg = TrainConfig { decay_every_steps: Some(3), ..quick(0.128) };
    let mut t = Trainer::new(CaptionModel::new(f.config.clone(), 0).unwrap(), cfg, &f.vocab, &f.train, &f.dev).unwrap();
    assert_eq!(t.lr_at(2), 0.128);
    assert_eq!(t.lr_at(3), 0.128 * 0.95);
    for _ in 0..3 {
        t.step().unwrap();
    }
    assert_eq!(t.state.lr, 0.128 * 0.95);
    assert_eq!(t.log[2].lr, 0.128);
    assert_eq!(learning_rate_at(0.1, 0.9, 1, 2), 0.1 * 0.9 * 0.9);
    // default period is one epoch
    let t = Trainer::new(CaptionModel::new(f.config.clone(), 0).unwrap(), quick(0.1), &f.vocab, &f.train, &f.dev).unwrap();
    assert_eq!(t.decay_every(), 2);
}

#[test]
fn batches_cover_each_epoch_exactly_once() {
    let f = small();
    let mut t = Trainer::new(CaptionModel::new(f.config.clone(), 0).unwrap(), quick(0.1), &f.vocab, &f.train, &f.dev).unwrap();
    let mut seen: Vec<usize> = (0..2).flat_map(|s| t.batch_indices(s)).collect();
    seen.sort();
    assert_eq!(seen, (0..8).collect::<Vec<_>>());
    assert_ne!(t.batch_indices(0), t.batch_indices(2), "epochs reshuffle");
}

#[test]
fn resumed_run_reproduces_the_trajectory() {
    let f = small();
    let model = || CaptionModel::new(f.config.clone(), 5).unwrap();
    let cfg = quick(0.1);

    let mut straight = Trainer::new(model(), cfg.clone(), &f.vocab, &f.train, &f.dev).unwrap();
    let losses: Vec<f64> = (0..10).map(|_| straight.step().unwrap()).collect();

    let mut first = Trainer::new(model(), cfg.clone(), &f.vocab, &f.train, &f.dev).unwrap();
    for _ in 0..4 {
        first.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.gcm");
    save_checkpoint(&path, &first.model, &serde_json::to_value(&first.state).unwrap()).unwrap();
    drop(first);

    let ck = load_checkpoint(&path).unwrap();
    let state: TrainState = serde_json::from_value(ck.meta).unwrap();
    let mut resumed = Trainer::new(ck.model, cfg, &f.vocab, &f.train, &f.dev).unwrap().resume(state, None);
    let rest: Vec<f64> = (0..6).map(|_| resumed.step().unwrap()).collect();
    assert_eq!(rest, losses[4..]);
}

#[test]
fn training_is_deterministic() {
    let f = small();
    let run = || {
        let mut t =
            Trainer::new(CaptionModel::new(f.config.clone(), 1).unwrap(), quick(0.1), &f.vocab, &f.train, &f.dev).unwrap();
        t.run().unwrap();
        (t.log.clone(), t.best_model().params)
    };
    assert_eq!(run(), run());
}

#[test]
fn selected_model_is_the_dev_argmax() {
    let f = small();
    let mut t =
        Trainer::new(CaptionModel::new(f.config.clone(), 2).unwrap(), quick(0.1), &f.vocab, &f.train, &f.dev).unwrap();
    t.run().unwrap();
    let scores: Vec<f64> = t.log.iter().filter_map(|r| r.dev_cider).collect();
    assert_eq!(scores.len(), 2);
    let best = t.state.best_dev_cider.unwrap();
    assert!(scores.iter().all(|&s| s <= best));
    assert!(best >= *scores.last().unwrap());
}

#[test]
fn exploding_learning_rate_aborts_with_the_step() {
    let f = small();
    let mut t =
        Trainer::new(CaptionModel::new(f.config.clone(), 0).unwrap(), quick(1e30), &f.vocab, &f.train, &f.dev).unwrap();
    let err = t.run().unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert!(err.to_string().contains("step"));
}

#[test]
fn invalid_configs_are_rejected() {
    let f = small();
    let m = || CaptionModel::new(f.config.clone(), 0).unwrap();
    for cfg in [quick(0.0), TrainConfig { decay_rate: 1.5, ..quick(0.1) }, TrainConfig { batch_size: 0, ..quick(0.1) }] {
        assert!(Trainer::new(m(), cfg, &f.vocab, &f.train, &f.dev).is_err());
    }
    assert!(Trainer::new(m(), quick(0.1), &f.vocab, &[], &f.dev).is_err());
}

#[test]
fn unit_sweep_matches_plain_training() {
    let f = small();
    let init = CaptionModel::new(f.config.clone(), 3).unwrap();
    let cfg = quick(0.1);
    let res = sweep(&init, &cfg, &[0.1], &[0.95], &f.vocab, &f.train, &f.dev).unwrap();
    let mut t = Trainer::new(init.clone(), cfg, &f.vocab, &f.train, &f.dev).unwrap();
    t.run().unwrap();
    assert_eq!(res.cells.len(), 1);
    assert_eq!(res.cells[0].dev_cider, t.state.best_dev_cider);
    assert_eq!(res.best, Some(0));
}

#[test]
fn paper_grid_runs_row_major_and_survives_divergence() {
    let f = small();
    let init = CaptionModel::new(f.config.clone(), 4).unwrap();
    let cfg = TrainConfig { max_steps: 2, eval_every_steps: 2, ..quick(0.1) };
    let mut lrs = PAPER_LEARNING_RATES.to_vec();
    lrs.push(1e30);
    let res = sweep(&init, &cfg, &lrs, &PAPER_DECAY_RATES, &f.vocab, &f.train, &f.dev).unwrap();
    assert_eq!(res.cells.len(), 16);
    for (i, c) in res.cells.iter().enumerate() {
        assert_eq!(c.learning_rate, lrs[i / 2]);
        assert_eq!(c.decay_rate, PAPER_DECAY_RATES[i % 2]);
    }
    assert!(res.cells[14..].iter().all(|c| c.dev_cider.is_none()));
    let best = res.best.unwrap();
    let max = res.cells.iter().filter_map(|c| c.dev_cider).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(res.cells[best].dev_cider, Some(max));
    assert!(res.to_csv().lines().last().unwrap().ends_with(",nan"));
}

#[test]
fn overfit_loss_drops_for_every_moderate_learning_rate() {
    let f = fixture(16, FeatureDims::default());
    let init = CaptionModel::new(f.config.clone(), 0).unwrap();
    for &lr in PAPER_LEARNING_RATES.iter().filter(|&&lr| lr <= 0.128) {
        let cfg = TrainConfig { learning_rate: lr, batch_size: 16, max_steps: 500, ..Default::default() };
        let mut t = Trainer::new(init.clone(), cfg, &f.vocab, &f.train, &[]).unwrap();
        let first = t.step().unwrap();
        for _ in 1..500 {
            t.step().unwrap();
        }
        let batch: Vec<_> = f.train.iter().map(|e| e.example()).collect();
        let last = t.model.loss(&batch).unwrap();
        assert!(last < first, "lr {lr}: {first} -> {last}");
    }
}
