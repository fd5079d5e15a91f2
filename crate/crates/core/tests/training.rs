use maskconnect::data::{make_blobs, Dataset};
use maskconnect::graph::{build, ArchSpec, ModuleGraph};
use maskconnect::train::{evaluate, metrics_csv, run_phases, Phase, PhaseSchedule, TrainConfig};
use maskconnect::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_resnet(seed: u64) -> ModuleGraph {
    let spec = ArchSpec {
        stem_channels: 4,
        image_size: 8,
        stages: 1,
        ..ArchSpec::resnet(4, 1, 4)
    };
    build(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn blobs() -> Dataset {
    make_blobs(256, 4, [3, 8, 8], 2.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        augment: false,
        weight_decay: 1e-4,
        ..TrainConfig::default()
    }
}

fn phase(epochs: usize, masks_trainable: bool) -> Phase {
    Phase {
        epochs,
        lr_weights: 0.05,
        lr_masks: if masks_trainable { 0.1 } else { 0.0 },
        masks_trainable,
    }
}

#[test]
fn search_phase_drives_loss_down_on_blobs() {
    let data = blobs();
    let mut g = small_resnet(1);
    let initial = evaluate(&mut g, &data, 256).unwrap().loss;
    let schedule = PhaseSchedule {
        phases: vec![phase(8, true)],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    run_phases(&mut g, &data, None, &schedule, &cfg(), &mut rng, |_| {}).unwrap();
    let last = evaluate(&mut g, &data, 256).unwrap();
    assert!(last.loss < 0.1 * initial, "{initial} -> {}", last.loss);
    assert!(last.top1 > 0.95);
}

#[test]
fn frozen_masks_do_not_move() {
    let data = blobs();
    let mut g = small_resnet(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let search = PhaseSchedule {
        phases: vec![phase(1, true)],
    };
    run_phases(&mut g, &data, None, &search, &cfg(), &mut rng, |_| {}).unwrap();
    assert!(!g.masks_frozen());
    // the non-search phase freezes on entry; after that nothing may change
    let tune = PhaseSchedule {
        phases: vec![phase(1, false)],
    };
    run_phases(&mut g, &data, None, &tune, &cfg(), &mut rng, |_| {}).unwrap();
    assert!(g.masks_frozen());
    let snapshot: Vec<_> = g.masks().map(|(_, m)| m.clone()).collect();
    let rows = run_phases(&mut g, &data, None, &tune, &cfg(), &mut rng, |_| {}).unwrap();
    assert_eq!(rows[0].lr_masks, 0.0);
    let after: Vec<_> = g.masks().map(|(_, m)| m.clone()).collect();
    assert_eq!(snapshot, after);
}

#[test]
fn freezing_happens_at_the_first_weight_only_phase() {
    let data = blobs().subset(64);
    let mut g = small_resnet(5);
    let schedule = PhaseSchedule::four_phase([1, 1, 0, 0], [0.05, 0.05, 0.005, 0.0005], 0.1);
    let mut phases_seen = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows = run_phases(&mut g, &data, None, &schedule, &cfg(), &mut rng, |r| phases_seen.push(r.phase)).unwrap();
    assert_eq!(phases_seen, vec![1, 2]);
    assert_eq!(rows[1].lr_masks, 0.0);
    assert!(g.masks_frozen());
    for (_, m) in g.masks() {
        assert_eq!(m.binary(), m.top_k().as_slice());
    }
}

#[test]
fn non_finite_loss_aborts() {
    let data = blobs().subset(64);
    let mut g = small_resnet(7);
    g.head.weight.data_mut()[0] = f64::NAN;
    let schedule = PhaseSchedule {
        phases: vec![phase(1, true)],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let err = run_phases(&mut g, &data, None, &schedule, &cfg(), &mut rng, |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn same_seed_same_metrics() {
    let data = blobs().subset(128);
    let test = blobs().subset(64);
    let schedule = PhaseSchedule::four_phase([2, 1, 1, 1], [0.05, 0.05, 0.005, 0.0005], 0.1);
    let run = |seed: u64| {
        let mut g = small_resnet(seed);
        let cfg = TrainConfig {
            augment: true,
            ..cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        metrics_csv(&run_phases(&mut g, &data, Some(&test), &schedule, &cfg, &mut rng, |_| {}).unwrap())
    };
    assert_eq!(run(10), run(10));
    assert_ne!(run(10), run(11));
}
