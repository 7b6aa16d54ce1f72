use memoroid::models::{AnyModel, ModelKind, ModelSpec};
use memoroid::{PartialTransition, ScanSchedule};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KINDS: [ModelKind; 5] = [
    ModelKind::LinAttn,
    ModelKind::S5,
    ModelKind::Lru,
    ModelKind::Ffm,
    ModelKind::Passthrough,
];

fn model(kind: ModelKind, seed: u64) -> AnyModel {
    let spec = ModelSpec::new(kind, 3, 3, 4, 8).with_context(2);
    let params = spec.init_params(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    spec.build(params).unwrap()
}

fn sequence(rng: &mut impl Rng, lens: &[usize]) -> Vec<PartialTransition> {
    lens.iter()
        .flat_map(|&l| (0..l).map(|t| t == 0).collect::<Vec<_>>())
        .map(|begin| PartialTransition::new((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(), begin))
        .collect()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn resettable_scan_matches_stepping(
        kind in prop::sample::select(KINDS.to_vec()),
        lens in prop::collection::vec(1usize..10, 1..6),
        seed in any::<u64>(),
    ) {
        let m = model(kind, seed);
        let inputs = sequence(&mut ChaCha8Rng::seed_from_u64(seed ^ 1), &lens);
        let scanned = m.run_resettable(&inputs, &ScanSchedule::serial().with_block_size(3).unwrap()).unwrap();
        let mut state = None;
        for (t, p) in inputs.iter().enumerate() {
            let (next, out) = m.step(state.as_ref(), p).unwrap();
            prop_assert!(max_rel(&out, scanned.row(t).as_slice().unwrap()) <= 1e-9, "{kind} t = {t}");
            state = Some(next);
        }
    }

    #[test]
    fn each_episode_is_isolated(
        kind in prop::sample::select(KINDS.to_vec()),
        lens in prop::collection::vec(1usize..10, 2..5),
        seed in any::<u64>(),
    ) {
        let m = model(kind, seed);
        let sched = ScanSchedule::serial();
        let inputs = sequence(&mut ChaCha8Rng::seed_from_u64(seed ^ 2), &lens);
        let joined = m.run_resettable(&inputs, &sched).unwrap();
        let mut start = 0;
        for &len in &lens {
            let alone = m.run(&inputs[start..start + len], &sched).unwrap();
            for t in 0..len {
                prop_assert!(max_rel(joined.row(start + t).as_slice().unwrap(), alone.row(t).as_slice().unwrap()) <= 1e-9);
            }
            start += len;
        }
    }
}

#[test]
fn single_step_episodes_are_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in KINDS {
        let m = model(kind, 9);
        let inputs = sequence(&mut rng, &[1; 7]);
        let joined = m.run_resettable(&inputs, &ScanSchedule::serial()).unwrap();
        for (t, p) in inputs.iter().enumerate() {
            let (_, out) = m.step(None, p).unwrap();
            assert_eq!(out.as_slice(), joined.row(t).as_slice().unwrap(), "{kind}");
        }
    }
}

#[test]
fn worker_budget_does_not_change_bits() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = sequence(&mut rng, &[40, 3, 90, 17]);
    for kind in KINDS {
        let m = model(kind, 5);
        let base = ScanSchedule::serial().with_block_size(8).unwrap();
        let one = m.run_resettable(&inputs, &base).unwrap();
        let many = m.run_resettable(&inputs, &base.with_workers(4).unwrap()).unwrap();
        assert!(
            one.iter().zip(many.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "{kind}"
        );
    }
}

#[test]
fn empty_and_ragged_inputs() {
    let m = model(ModelKind::Lru, 0);
    assert_eq!(m.run_resettable(&[], &ScanSchedule::serial()).unwrap().nrows(), 0);
    let ragged = vec![
        PartialTransition::new(vec![0.0; 3], true),
        PartialTransition::new(vec![0.0; 2], false),
    ];
    assert!(m.run_resettable(&ragged, &ScanSchedule::serial()).is_err());
    let headless = vec![PartialTransition::new(vec![0.0; 3], false)];
    assert!(m.run_resettable(&headless, &ScanSchedule::serial()).is_err());
}
