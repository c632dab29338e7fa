use ordinalenc::encoding::{EncodingConfig, Family};
use ordinalenc::maskout::FeatureMap;
use ordinalenc::model::init_params;
use ordinalenc::synth::{self, generate, PopulationSpec, Protocol, Sample, SplitSpec};
use ordinalenc::trainer::{self, train, Architecture, TrainConfig, TrainData};
use ordinalenc::Error;

const ARCH: Architecture = Architecture { hidden: 8, depth: 1 };

// Monotone channels only, no identity or noise: ages are linearly encoded.
fn learnable(seed: u64) -> PopulationSpec {
    PopulationSpec {
        n_subjects: 60,
        images_min: 2,
        images_max: 4,
        max_age: 101,
        cluster_width: 3,
        noise: 0.05,
        identity_scale: 0.0,
        age_shift: 0.0,
        monotone_channels: 3,
        age_channels: 3,
        c_in: 3,
        height: 5,
        width: 5,
        embedding_seed: 1,
        seed,
    }
}

fn holdout(ds: &synth::SyntheticDataset, seed: u64) -> synth::Fold {
    let split = SplitSpec {
        protocol: Protocol::SubjectExclusive,
        test_fraction: 0.25,
        folds: 1,
        seed,
    };
    synth::split(ds, &split).unwrap().remove(0)
}

fn config(family: Family, epochs: usize, seed: u64) -> TrainConfig {
    let sigma = if family == Family::HardRank { 0.0 } else { 2.0 };
    let mut cfg = TrainConfig::desk_default(EncodingConfig::new(family, 101, sigma).unwrap(), epochs, seed);
    cfg.aux_start_epoch = 2;
    cfg
}

fn run(samples: &[Sample], fold: &synth::Fold, cfg: &TrainConfig) -> (ordinalenc::ModelParams, trainer::TrainReport) {
    let data = TrainData {
        samples,
        train: &fold.train,
        val: &[],
        test: &fold.test,
    };
    train(ARCH, data, cfg).unwrap()
}

#[test]
fn same_seed_gives_bit_identical_checkpoints() {
    let ds = generate(&learnable(0)).unwrap();
    let fold = holdout(&ds, 0);
    let cfg = config(Family::SoftRank, 5, 3);
    let (a, ra) = run(&ds.samples, &fold, &cfg);
    let (b, rb) = run(&ds.samples, &fold, &cfg);
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(ra.epochs, rb.epochs);
    assert_eq!(ra.test, rb.test);
    let (c, _) = run(&ds.samples, &fold, &config(Family::SoftRank, 5, 4));
    assert_ne!(a.to_bytes(), c.to_bytes());
}

#[test]
fn zero_epochs_returns_the_initial_parameters() {
    let ds = generate(&learnable(0)).unwrap();
    let fold = holdout(&ds, 0);
    let cfg = config(Family::Ldl, 0, 12);
    let (p, r) = run(&ds.samples, &fold, &cfg);
    let dims = ARCH.dims(3, 5, 5, &cfg.encoding);
    assert_eq!(p, init_params(12, dims).unwrap());
    assert!(r.epochs.is_empty());
    assert!(r.test.is_some());
}

#[test]
fn zero_lambda_leaves_training_untouched_by_the_aux_branches() {
    let ds = generate(&learnable(2)).unwrap();
    let fold = holdout(&ds, 2);
    let mut with_aux = config(Family::SoftRank, 6, 5);
    with_aux.lambda = 0.0;
    let mut without = with_aux.clone();
    without.aux_start_epoch = 100;
    let (a, ra) = run(&ds.samples, &fold, &with_aux);
    let (b, rb) = run(&ds.samples, &fold, &without);
    assert_eq!(a.backbone, b.backbone);
    assert_eq!(a.heads[0], b.heads[0]);
    assert_eq!(ra.test, rb.test);
    // a positive weight does change the outcome
    let mut active = with_aux.clone();
    active.lambda = 0.3;
    let (c, _) = run(&ds.samples, &fold, &active);
    assert_ne!(a.backbone, c.backbone);
}

#[test]
fn aux_heads_start_as_copies_of_the_main_head() {
    let ds = generate(&learnable(2)).unwrap();
    let fold = holdout(&ds, 2);
    let mut cfg = config(Family::Ldl, 3, 1);
    cfg.aux_start_epoch = 2;
    cfg.lambda = 0.0;
    // training stops right after the clone epoch; with lambda = 0 the aux
    // heads only feel weight decay afterwards, so they stay proportional
    let (p, r) = run(&ds.samples, &fold, &cfg);
    assert!(r.epochs[2].aux_active && !r.epochs[1].aux_active);
    let h0 = &p.heads[1];
    for h in &p.heads[2..] {
        assert_eq!(h, h0);
    }
}

#[test]
fn combined_loss_is_main_plus_weighted_aux() {
    let ds = generate(&learnable(3)).unwrap();
    let fold = holdout(&ds, 3);
    let cfg = config(Family::HardRank, 5, 2);
    let (_, r) = run(&ds.samples, &fold, &cfg);
    for e in &r.epochs {
        assert!((e.combined_loss - (e.main_loss + cfg.lambda * e.aux_loss)).abs() <= 1e-12);
    }
    assert!(r.epochs.last().unwrap().aux_loss > 0.0);
}

#[test]
fn training_makes_progress_on_a_learnable_instance() {
    for seed in 0..5 {
        let ds = generate(&learnable(seed)).unwrap();
        let fold = holdout(&ds, seed);
        let mut cfg = config(Family::SoftRank, 100, seed);
        cfg.lambda = 0.0;
        let (_, r) = run(&ds.samples, &fold, &cfg);
        let (first, last) = (&r.epochs[0], r.epochs.last().unwrap());
        assert!(last.main_loss < first.main_loss, "seed {seed}: loss {} -> {}", first.main_loss, last.main_loss);
        assert!(last.train_mae < first.train_mae, "seed {seed}: mae {} -> {}", first.train_mae, last.train_mae);
    }
}

#[test]
fn divergence_reports_the_last_finite_parameters() {
    let ds = generate(&learnable(1)).unwrap();
    let fold = holdout(&ds, 1);
    let mut cfg = config(Family::Ldl, 5, 1);
    cfg.lr = 1e12;
    let data = TrainData {
        samples: &ds.samples,
        train: &fold.train,
        val: &[],
        test: &fold.test,
    };
    match train(ARCH, data, &cfg) {
        Err(Error::Diverged { last_good, .. }) => assert!(last_good.is_finite()),
        other => panic!("expected divergence, got {:?}", other.map(|(_, r)| r.epochs.len())),
    }
}

#[test]
fn flip_averaging_is_inert_on_symmetric_inputs() {
    let ds = generate(&learnable(0)).unwrap();
    let fold = holdout(&ds, 0);
    let (p, _) = run(&ds.samples, &fold, &config(Family::SoftRank, 2, 0));
    let enc = EncodingConfig::new(Family::SoftRank, 101, 2.0).unwrap();
    // symmetrize an input
    let x = &ds.samples[0].input;
    let m = x.mirrored();
    let sym: Vec<f64> = x.data().iter().zip(m.data()).map(|(a, b)| 0.5 * (a + b)).collect();
    let sym = FeatureMap::new(3, 5, 5, sym).unwrap();
    let a = trainer::predict(&p, &sym, &enc, true).unwrap();
    let b = trainer::predict(&p, &sym, &enc, false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn evaluation_rejects_a_mismatched_encoding() {
    let ds = generate(&learnable(0)).unwrap();
    let fold = holdout(&ds, 0);
    let (p, _) = run(&ds.samples, &fold, &config(Family::SoftRank, 0, 0));
    let ldl = EncodingConfig::new(Family::Ldl, 101, 2.0).unwrap();
    assert!(trainer::evaluate(&p, &ds.samples, &fold.test, &ldl, false).is_err());
}
