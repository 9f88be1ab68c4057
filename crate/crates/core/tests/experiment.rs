use std::collections::BTreeSet;

use valence_gan::config::RunConfig;
use valence_gan::data::Corpus;
use valence_gan::eval::{make_folds, random_search, run_experiment, run_fold, Aggregate};
use valence_gan::model::ModelKind;
use valence_gan::synth::{self, SynthSpec};

fn corpus(dir: &std::path::Path) -> Corpus {
    let spec = SynthSpec {
        labeled_per_speaker: 5,
        unlabeled_clips: 8,
        min_duration_sec: 0.8,
        max_duration_sec: 1.5,
        ..SynthSpec::default()
    };
    let s = synth::generate(&spec, dir).unwrap();
    Corpus::load(&s.manifest, Some(&dir.join("cache"))).unwrap()
}

fn run(kind: ModelKind) -> RunConfig {
    let mut r = RunConfig::desk(kind, "unused");
    r.max_epochs = 2;
    r.patience = 1;
    r
}

#[test]
fn five_folds_hold_out_every_session_once() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let report = run_experiment(&run(ModelKind::BasicCnn), &c, "test", None).unwrap();
    assert_eq!(report.folds.len(), 5);
    let held: BTreeSet<_> = report.folds.iter().map(|f| f.held_out_session.clone()).collect();
    assert_eq!(held.len(), 5);
    for f in &report.folds {
        assert_ne!(f.validation_speaker, f.test_speaker);
        assert_eq!(f.test_clips, 5);
        assert!((0.0..=1.0).contains(&f.scores.acc5));
        assert!(f.best_epoch >= 1 && f.best_epoch <= f.stop_epoch && f.stop_epoch <= 2);
    }
    let agg = report.aggregate.clone().unwrap();
    let mean = report.folds.iter().map(|f| f.scores.acc5).sum::<f64>() / 5.0;
    assert!((agg.acc5 - mean).abs() < 1e-12);
    assert_eq!(Aggregate::of(&report.folds), report.aggregate);
    assert!(report.failure.is_none());
}

#[test]
fn experiment_report_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let r = run(ModelKind::MultitaskCnn);
    let a = run_experiment(&r, &c, "test", None).unwrap().to_json().unwrap();
    let b = run_experiment(&r, &c, "test", None).unwrap().to_json().unwrap();
    assert_eq!(a, b);
}

#[test]
fn adversarial_fold_trains_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let mut r = run(ModelKind::MultitaskDcgan);
    r.max_epochs = 1;
    r.checkpoint_every = 1;
    let folds = make_folds(c.labeled().map(|c| (c.session.as_str(), c.speaker.as_str()))).unwrap();
    let ckpt = dir.path().join("ckpt");
    let fold = run_fold(&r, &c, &folds[0], Some(&ckpt)).unwrap();
    let e = &fold.report.epochs[0];
    assert!(e.l_d.is_some() && e.l_g.is_some() && e.l_act.is_some());
    assert!(ckpt.join("epoch0001").join("manifest.json").is_file());
    let (model, _, manifest) = valence_gan::checkpoint::load::<f32>(&ckpt.join("best")).unwrap();
    assert_eq!(model.config, r.model);
    assert_eq!(manifest.groups.len(), 5);
}

#[test]
fn unlabeled_pool_is_required_for_adversarial_models() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        labeled_per_speaker: 3,
        unlabeled_clips: 0,
        min_duration_sec: 0.8,
        max_duration_sec: 1.0,
        ..SynthSpec::default()
    };
    let s = synth::generate(&spec, dir.path()).unwrap();
    let c = Corpus::load(&s.manifest, None).unwrap();
    let folds = make_folds(c.labeled().map(|c| (c.session.as_str(), c.speaker.as_str()))).unwrap();
    let err = run_fold(&run(ModelKind::BasicDcgan), &c, &folds[0], None).err().unwrap();
    assert_eq!(err.kind(), "config");
}

#[test]
fn single_trial_search_returns_that_trial() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let mut r = run(ModelKind::BasicCnn);
    r.max_epochs = 1;
    let result = random_search(&r, &c, ModelKind::BasicCnn, 1, 3).unwrap();
    assert_eq!(result.trials.len(), 1);
    assert_eq!(result.best, 0);
    assert!(result.best_config().validate().is_ok());
    assert!(random_search(&r, &c, ModelKind::BasicCnn, 0, 3).is_err());
}
