//! End-to-end behaviour of the compression driver on small fixtures.

use darc::candidates::CandidateKind;
use darc::engine::{
    darc_compress, fit, init_darc, min_feasible_cost, relax, train_epochs, DarcSchedule, InitOptions,
    LogCollector, Outcome, Phase, Sgd, StepConfig,
};
use darc::harness::{evaluate, gen_planted_dataset, Dataset, EvalOptions, PlantedSpec, Split};
use darc::model::Layer;
use darc::{AlphaVector, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture(n: usize, seed: u64) -> (Dataset<f64>, Model<f64>) {
    let spec = PlantedSpec::desk(CandidateKind::DepthwiseSeparable3x3, n, 0.0);
    let (data, _) = gen_planted_dataset::<f64>(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base =
        Model::conv_classifier([3, 6, 6], 8, &[CandidateKind::FullConv { k: 3 }; 2], 4, &mut rng).unwrap();
    let train = data.indices(Split::Train);
    fit(
        &mut base,
        &data,
        &train,
        8,
        0.01,
        0.9,
        32,
        Phase::Train,
        &mut rng,
        &mut (),
    )
    .unwrap();
    base.round_to_f32();
    (data, base)
}

fn initialized(base: &Model<f64>, data: &Dataset<f64>, mimic_steps: usize, seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = relax(base, &CandidateKind::default_conv_replacements(), &mut rng).unwrap();
    let train = data.indices(Split::Train);
    let sample: Vec<_> = train
        .chunks(32)
        .take(8)
        .map(|c| data.batch(c).unwrap().0)
        .collect();
    let opts = InitOptions {
        mimic_steps,
        ..InitOptions::default()
    };
    init_darc(&mut m, &sample, &opts).unwrap();
    m
}

#[test]
fn zero_penalty_on_the_original_is_plain_training() {
    let (data, base) = fixture(400, 0);
    let mut mixed = initialized(&base, &data, 0, 0);
    for layer in &mut mixed.layers {
        if let Layer::Mixture(m) = layer {
            m.alpha = AlphaVector::one_hot(m.len(), 0);
            m.remove_zeros();
        }
    }
    let train = data.indices(Split::Train);
    let cfg = StepConfig {
        phase: Phase::Block,
        block: 0,
        lambda: 0.0,
        eta: 0.05,
        epochs: 2,
        batch_size: 16,
        allow_revival: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    train_epochs(
        &mut mixed,
        &data,
        &train,
        cfg,
        &mut Sgd::new(0.05, 0.9),
        &mut rng,
        &mut (),
    )
    .unwrap();

    let mut plain = base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    fit(
        &mut plain,
        &data,
        &train,
        2,
        0.05,
        0.9,
        16,
        Phase::Train,
        &mut rng,
        &mut (),
    )
    .unwrap();

    let originals: Vec<_> = mixed.mixtures().map(|m| m.candidates[0].clone()).collect();
    let trained: Vec<_> = plain
        .layers
        .iter()
        .filter_map(|l| match l {
            Layer::Param {
                candidate,
                compressible: true,
            } => Some(candidate.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(originals, trained);
    assert!(mixed.mixtures().all(|m| m.alpha.values()[0] == 1.0));
}

#[test]
fn mimicking_beats_random_candidates() {
    let (data, base) = fixture(800, 1);
    let test = data.indices(Split::Test);
    let one_hot = |mut m: Model<f64>, j: usize| {
        for mix in m.mixtures_mut() {
            mix.alpha = AlphaVector::one_hot(mix.len(), j);
            mix.remove_zeros();
        }
        m
    };
    for j in 1..4 {
        let with = one_hot(initialized(&base, &data, 200, 2), j);
        let without = one_hot(initialized(&base, &data, 0, 2), j);
        let a = evaluate(&with, &data, &test, &EvalOptions::default()).unwrap();
        let b = evaluate(&without, &data, &test, &EvalOptions::default()).unwrap();
        assert!(a.top1 >= b.top1, "candidate {j}: {} < {}", a.top1, b.top1);
        assert!(a.mean_loss < b.mean_loss, "candidate {j}");
    }
}

#[test]
fn snapshots_trace_the_schedule() {
    let (data, base) = fixture(400, 3);
    let mut m = initialized(&base, &data, 50, 3);
    let schedule = DarcSchedule {
        block_epochs: 1,
        fine_tune_epochs: 1,
        budget: min_feasible_cost(&m),
        lambda0: Some(0.05),
        ..DarcSchedule::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut log = LogCollector::default();
    let report = darc_compress(&mut m, &data, &schedule, &mut rng, &mut log).unwrap();
    assert_eq!(report.outcome, Outcome::BudgetMet);
    assert_eq!(report.snapshots.len(), report.blocks);
    for (b, s) in report.snapshots.iter().enumerate() {
        assert_eq!(s.block, b);
        assert_eq!(s.lambda, 0.05 * 2f64.powi(b as i32));
        assert_eq!(s.eta, 0.01 * 0.5f64.powi(b as i32));
        assert!(s.selected_cost <= s.cost_l0);
        assert!(s.model.is_concrete());
    }
    for w in report.snapshots.windows(2) {
        assert!(w[1].cost_l0 <= w[0].cost_l0);
    }
    let blocks = log.records.iter().filter(|r| r.phase == Phase::Block).count();
    let tunes = log.records.iter().filter(|r| r.phase == Phase::FineTune).count();
    assert_eq!((blocks, tunes), (report.blocks, report.blocks));
    assert!(log
        .records
        .iter()
        .filter(|r| r.phase == Phase::Block)
        .all(|r| r.joint_steps > 0));
    let last_eta = report.snapshots.last().unwrap().eta;
    assert!(log
        .records
        .iter()
        .filter(|r| r.phase == Phase::FineTune)
        .all(|r| r.eta == last_eta));
}

#[test]
fn supports_only_shrink_without_revival() {
    let (data, base) = fixture(400, 4);
    let mut m = initialized(&base, &data, 50, 4);
    let schedule = DarcSchedule {
        block_epochs: 1,
        fine_tune_epochs: 0,
        budget: min_feasible_cost(&m),
        lambda0: Some(0.05),
        ..DarcSchedule::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut log = LogCollector::default();
    darc_compress(&mut m, &data, &schedule, &mut rng, &mut log).unwrap();
    for w in log.records.windows(2) {
        for (a, b) in w[0].alphas.iter().zip(&w[1].alphas) {
            for (x, y) in a.iter().zip(b) {
                assert!(*x > 0.0 || *y == 0.0, "a zero weight came back");
            }
        }
    }
}

#[test]
fn revival_keeps_every_candidate_live() {
    let (data, base) = fixture(400, 5);
    let mut m = initialized(&base, &data, 0, 5);
    let cfg = StepConfig {
        phase: Phase::Block,
        block: 0,
        lambda: 0.1,
        eta: 0.01,
        epochs: 1,
        batch_size: 32,
        allow_revival: true,
    };
    let train = data.indices(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    train_epochs(
        &mut m,
        &data,
        &train,
        cfg,
        &mut Sgd::new(0.01, 0.0),
        &mut rng,
        &mut (),
    )
    .unwrap();
    for mix in m.mixtures() {
        assert!(mix.active.iter().all(|&a| a));
        assert!(
            mix.alpha.values()[0] == 0.0,
            "the penalty should zero the full convolution"
        );
    }
}
