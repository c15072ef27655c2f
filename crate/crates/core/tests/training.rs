use gdan::config::RunConfig;
use gdan::data::{make_synth_benchmark, GzslDataset, SynthBenchConfig};
use gdan::losses::Batch;
use gdan::model::{GdanConfig, Hyperparams, Network};
use gdan::rng::Seeds;
use gdan::run::{self, ABLATION_ROWS};
use gdan::training::{
    param_hash, train, Checkpoint, TrainEvent, TrainPlan, TrainSession, Trainer, TrainingSet, Variant,
};
use gdan::{Error, Matrix};
use tempfile::tempdir;

fn bench() -> GzslDataset {
    make_synth_benchmark(&SynthBenchConfig::default()).unwrap()
}

fn small_hp(epochs: usize) -> Hyperparams {
    Hyperparams {
        epochs,
        checkpoint_every: 2,
        n_synth_eval: 50,
        ..Hyperparams::desk_scale()
    }
}

fn trainer(ds: &GzslDataset, variant: Variant, hp: Hyperparams, pretrain: usize, seed: u64) -> Trainer {
    let cfg = GdanConfig::new(ds.feat_dim(), ds.attr_dim(), hp).unwrap();
    let mut plan = TrainPlan::new(variant, &cfg, seed);
    plan.pretrain_epochs = pretrain;
    Trainer::new(cfg, plan).unwrap()
}

fn small_run(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::desk_scale();
    cfg.seed = 11;
    cfg.output_dir = dir.to_path_buf();
    cfg.model.epochs = 4;
    cfg.model.checkpoint_every = 2;
    cfg.model.n_synth_eval = 50;
    cfg.train.pretrain_epochs = 2;
    cfg.eval.n_per_class = 50;
    cfg.synth.per_class = 40;
    cfg
}

#[test]
fn pretraining_lowers_the_cvae_loss() {
    let ds = bench();
    let mut t = trainer(&ds, Variant::FullGdan, small_hp(1), 50, 0);
    let set = TrainingSet::new(&ds, true).unwrap();
    let d_before = param_hash(&t.model().discriminator);
    let records: Vec<_> = (0..50).map(|_| t.pretrain_epoch(&set).unwrap()).collect();
    let (first, last) = (records[0].cvae(), records[49].cvae());
    assert!(last < first, "cvae {first} -> {last}");
    assert_eq!(param_hash(&t.model().discriminator), d_before);
}

/// Mean D score of real pairs minus generated pairs on a fixed batch.
fn disc_gap(t: &Trainer, v: &Matrix, s: &Matrix) -> f64 {
    let m = t.model();
    let mut rng = Seeds::new(99).stream("probe");
    let z = m.sample_prior(v.rows(), &mut rng);
    let fake = m.generate(s, &z).unwrap();
    let mean = |x: Vec<f64>| x.iter().sum::<f64>() / x.len() as f64;
    mean(m.discriminate(v, s).unwrap()) - mean(m.discriminate(&fake, s).unwrap())
}

#[test]
fn discriminator_separates_real_from_generated_pairs() {
    let ds = bench();
    let mut t = trainer(&ds, Variant::FullGdan, small_hp(1), 0, 3);
    let set = TrainingSet::new(&ds, true).unwrap();
    let probe: Vec<usize> = set.rows.iter().step_by(7).copied().collect();
    let (v, labels) = ds.rows(&probe).unwrap();
    let s = ds.class_embeddings(&labels).unwrap();
    let before = disc_gap(&t, &v, &s);
    let mut rng = Seeds::new(3).stream("batches");
    for _ in 0..100 {
        let rows = gdan::training::random_rows(&set, 32, &mut rng);
        let batch = t.make_batch(&set, &rows).unwrap();
        t.train_step(&batch).unwrap();
    }
    let after = disc_gap(&t, &v, &s);
    assert!(after > before, "gap {before} -> {after}");
}

#[test]
fn identical_plans_give_identical_histories() {
    let ds = bench();
    let run = || {
        let t = trainer(&ds, Variant::FullGdan, small_hp(3), 2, 4);
        train(TrainSession::fresh(t), &ds, &mut |_| Ok(())).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.best.checkpoint, b.best.checkpoint);
    for s in &a.history.steps {
        assert!(s.report.is_finite());
    }
}

#[test]
fn one_scored_checkpoint_for_ten_epochs_every_ten() {
    let ds = make_synth_benchmark(&SynthBenchConfig {
        per_class: 20,
        ..Default::default()
    })
    .unwrap();
    let hp = Hyperparams {
        epochs: 10,
        checkpoint_every: 10,
        n_synth_eval: 10,
        ..Hyperparams::desk_scale()
    };
    let t = trainer(&ds, Variant::CvaeOnly, hp, 0, 1);
    let mut scored = 0;
    let out = train(TrainSession::fresh(t), &ds, &mut |e| {
        if matches!(e, TrainEvent::Scored { .. }) {
            scored += 1;
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(scored, 1);
    assert_eq!(out.history.validation.len(), 1);
    assert_eq!(out.best.epoch, 10);
}

#[test]
fn discriminator_only_trains_only_the_discriminator() {
    let ds = bench();
    let mut t = trainer(&ds, Variant::DiscriminatorOnly, small_hp(1), 30, 2);
    let before = t.model().clone();
    let set = TrainingSet::new(&ds, true).unwrap();
    let batch = t.make_batch(&set, &set.rows[..32]).unwrap();
    assert!(batch.s_neg.is_some());
    t.train_step(&batch).unwrap();
    for net in [Network::Encoder, Network::Generator, Network::Regressor] {
        assert_eq!(t.model().network(net), before.network(net), "{net:?}");
        assert_eq!(t.optimizer(net).t(), 0);
    }
    assert_ne!(t.model().discriminator, before.discriminator);
}

#[test]
fn regressor_only_trains_only_the_regressor() {
    let ds = bench();
    let mut t = trainer(&ds, Variant::RegressorOnly, small_hp(1), 30, 2);
    let before = t.model().clone();
    let set = TrainingSet::new(&ds, true).unwrap();
    let batch: Batch = t.make_batch(&set, &set.rows[..32]).unwrap();
    assert!(batch.s_neg.is_none());
    t.train_step(&batch).unwrap();
    assert_ne!(t.model().regressor, before.regressor);
    for net in [Network::Encoder, Network::Generator, Network::Discriminator] {
        assert_eq!(t.model().network(net), before.network(net), "{net:?}");
    }
    assert_eq!(t.model().disc_forward_count(), 0);
}

#[test]
fn exploding_learning_rate_reports_divergence_with_last_good_checkpoint() {
    let ds = bench();
    let hp = Hyperparams {
        lr_gen: 1e7,
        ..small_hp(3)
    };
    let t = trainer(&ds, Variant::FullGdan, hp, 1, 0);
    let err = train(TrainSession::fresh(t), &ds, &mut |_| Ok(())).unwrap_err();
    match err {
        Error::Diverged { last_good, epoch, .. } => {
            let ckpt = last_good.expect("last good checkpoint");
            assert!(ckpt.model.is_finite());
            assert!(epoch >= 1);
        }
        other => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn interrupted_training_resumes_to_the_same_result() {
    let straight = tempdir().unwrap();
    let cfg = small_run(straight.path());
    let ds = run::load_run_dataset(&cfg).unwrap();
    let (expected, _) = run::train_variant(&cfg, &ds, Variant::FullGdan, straight.path(), false, &mut |_| Ok(())).unwrap();

    let broken = tempdir().unwrap();
    let cfg_b = small_run(broken.path());
    let err = run::train_variant(&cfg_b, &ds, Variant::FullGdan, broken.path(), false, &mut |e| match e {
        TrainEvent::Scored { .. } => Err(Error::State("interrupted".into())),
        _ => Ok(()),
    })
    .unwrap_err();
    assert!(matches!(err, Error::State(_)));
    let saved = Checkpoint::load(&broken.path().join(run::LAST_CHECKPOINT)).unwrap();
    assert_eq!(saved.epoch, 2);

    let (resumed, outcome) =
        run::train_variant(&cfg_b, &ds, Variant::FullGdan, broken.path(), true, &mut |_| Ok(())).unwrap();
    assert_eq!(resumed, expected);
    assert_eq!(outcome.history.validation.len(), 2);
    let a = std::fs::read(straight.path().join("history.csv")).unwrap();
    let b = std::fs::read(broken.path().join("history.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_refuses_a_different_configuration() {
    let dir = tempdir().unwrap();
    let cfg = small_run(dir.path());
    let ds = run::load_run_dataset(&cfg).unwrap();
    run::train_variant(&cfg, &ds, Variant::CvaeOnly, dir.path(), false, &mut |_| Ok(())).unwrap();
    let mut other = cfg.clone();
    other.model.lr_gen = 0.5;
    let err = run::train_variant(&other, &ds, Variant::CvaeOnly, dir.path(), true, &mut |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn ablation_table_has_eight_rows_and_reruns_without_duplicates() {
    let dir = tempdir().unwrap();
    let cfg = small_run(dir.path());
    let rows = run::run_ablation(&cfg).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.row.as_str()).collect();
    let expected: Vec<&str> = ABLATION_ROWS.iter().map(|r| r.0).collect();
    assert_eq!(labels, expected);
    let csv_path = dir.path().join("ablation.csv");
    let first = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(first.lines().count(), 9);
    assert!(first.starts_with("row,variant,component,U,S,H"));

    // An unfinished variant has no report; it is picked up from its last
    // checkpoint and the table is rebuilt, not appended to.
    let vdir = dir.path().join("gdan-no-reg");
    std::fs::remove_file(vdir.join(run::METRICS_FILE)).unwrap();
    let again = run::run_ablation(&cfg).unwrap();
    assert_eq!(again, rows);
    assert_eq!(std::fs::read_to_string(&csv_path).unwrap(), first);
}
