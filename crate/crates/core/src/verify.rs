//! Oracle-equivalence and property suites behind `memoroid verify`.
//!
//! Every suite compares a production path against an independent reference
//! (left folds, backward loops, per-episode runs, central finite
//! differences) on seeded random instances. [`Scale::Full`] runs the sizes
//! used by the acceptance tests; [`Scale::Quick`] is a smoke-sized pass.

use std::time::Instant;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::batching::{sbb_pad, sbb_split, sbb_unpad, Tape, Transition};
use crate::memoroid::{make_resettable, PartialTransition, ResettableElement};
use crate::models::{DiagMonoid, DiagState, FfmMonoid, FfmState, LinAttnMonoid, LinAttnState, ModelKind, ModelSpec};
use crate::params::ParamSet;
use crate::qlearn::pipeline::{backward, q_forward, PipelineSpec};
use crate::qlearn::update::{tbb_loss, QLearnOptions};
use crate::returns::{gae, gae_monoid, naive_gae, naive_return_to_go, return_monoid, return_to_go};
use crate::scan::ops::{IntMax, Mat2, Mat2Product};
use crate::scan::{scan_parallel, scan_sequential, AssociativeOp, Counting, ScanSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Quick,
    Full,
}

impl Scale {
    fn pick(self, quick: usize, full: usize) -> usize {
        match self {
            Scale::Quick => quick,
            Scale::Full => full,
        }
    }
}

/// Deliberate defects for mutation testing of the suites themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Integer addition replaced by subtraction in the scan suites.
    NonAssociative,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub scale: Scale,
    pub sched: ScanSchedule,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: Scale::Quick,
            sched: ScanSchedule::from_env(),
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Outcome = std::result::Result<String, String>;

pub struct Suite {
    pub name: &'static str,
    pub about: &'static str,
    run: fn(&VerifyOptions) -> Outcome,
}

pub const SUITES: &[Suite] = &[
    Suite {
        name: "scan.equivalence",
        about: "parallel scan equals the left fold; combine count at most 3n",
        run: scan_equivalence,
    },
    Suite {
        name: "scan.associativity",
        about: "random triples for every monoid in the crate",
        run: scan_associativity,
    },
    Suite {
        name: "resets.isolation",
        about: "multi-episode scans equal per-episode scans; earlier episodes never leak",
        run: reset_isolation,
    },
    Suite {
        name: "returns.return_to_go",
        about: "scan returns equal the backward loop; decay component is gamma^n",
        run: returns_to_go,
    },
    Suite {
        name: "returns.gae",
        about: "scan advantages equal the backward loop",
        run: returns_gae,
    },
    Suite {
        name: "roundtrip.segments",
        about: "split, pad, unpad and join give back the episode",
        run: roundtrip_segments,
    },
    Suite {
        name: "roundtrip.tape",
        about: "tape invariants under random inserts and samples; oldest-first eviction; file round-trip",
        run: roundtrip_tape,
    },
    Suite {
        name: "roundtrip.params",
        about: "parameter files round-trip bit for bit",
        run: roundtrip_params,
    },
    Suite {
        name: "gradients.finite_difference",
        about: "analytic gradients against central differences",
        run: gradients_fd,
    },
];

/// Suites whose name starts with `filter`.
pub fn select(filter: Option<&str>) -> Vec<&'static Suite> {
    SUITES
        .iter()
        .filter(|s| match filter {
            None => true,
            Some(f) => s.name.starts_with(f),
        })
        .collect()
}

pub fn run_suite(suite: &Suite, opts: &VerifyOptions) -> SuiteReport {
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(|| (suite.run)(opts)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (passed, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    SuiteReport {
        name: suite.name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs the selected suites; an empty selection is an error.
pub fn run(filter: Option<&str>, opts: &VerifyOptions) -> crate::Result<Vec<SuiteReport>> {
    let chosen = select(filter);
    if chosen.is_empty() {
        return Err(crate::Error::invalid(
            "filter",
            format!("no suite matches `{}`", filter.unwrap_or("")),
        ));
    }
    Ok(chosen.into_iter().map(|s| run_suite(s, opts)).collect())
}

fn rng_for(opts: &VerifyOptions, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ salt)
}

/// `|a − b| ≤ tol · max(|a|, |b|)`, with a floor far below any value the
/// suites produce.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

fn complex_close(a: Complex64, b: Complex64, tol: f64) -> bool {
    (a - b).norm() <= tol * a.norm().max(b.norm()).max(1e-12)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Integer addition, or subtraction under [`Fault::NonAssociative`].
#[derive(Debug, Clone, Copy)]
pub struct CheckedAdd {
    faulty: bool,
}

impl CheckedAdd {
    pub fn new(fault: Option<Fault>) -> Self {
        Self {
            faulty: fault == Some(Fault::NonAssociative),
        }
    }
}

impl AssociativeOp for CheckedAdd {
    type Elem = i64;

    fn identity(&self) -> i64 {
        0
    }

    fn combine(&self, left: &i64, right: &i64) -> i64 {
        if self.faulty {
            left.wrapping_sub(*right)
        } else {
            left.wrapping_add(*right)
        }
    }
}

fn random_stochastic(rng: &mut impl Rng) -> Mat2 {
    let mut m: Mat2 = std::array::from_fn(|_| rng.gen_range(0.1..1.0));
    for row in 0..2 {
        let s = m[2 * row] + m[2 * row + 1];
        m[2 * row] /= s;
        m[2 * row + 1] /= s;
    }
    m
}

fn check_exact<O>(op: &O, xs: &[O::Elem], sched: &ScanSchedule, what: &str) -> std::result::Result<(), String>
where
    O: AssociativeOp,
    O::Elem: PartialEq + std::fmt::Debug,
{
    let counted = Counting::new(op);
    let par = scan_parallel(&counted, xs, sched);
    let seq = scan_sequential(op, xs);
    if let Some(i) = (0..xs.len()).find(|&i| par[i] != seq[i]) {
        return Err(format!(
            "{what}: n = {}, first mismatch at {i}: {:?} vs {:?}",
            xs.len(),
            par[i],
            seq[i]
        ));
    }
    ensure(counted.calls() <= 3 * xs.len(), || {
        format!("{what}: {} combines for n = {}", counted.calls(), xs.len())
    })
}

fn scan_equivalence(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 1);
    let trials = opts.scale.pick(12, 100);
    let add = CheckedAdd::new(opts.fault);
    let reset_add = make_resettable(add);
    let mut worst_float = 0.0f64;
    let mut max_ratio = 0.0f64;
    for trial in 0..trials {
        let n = rng.gen_range(0..=4096usize);
        let block = [1usize, 7, 64, 256][trial % 4];
        let sched = opts.sched.with_block_size(block).map_err(|e| e.to_string())?;
        let ints: Vec<i64> = (0..n).map(|_| rng.gen_range(-1_000_000..=1_000_000)).collect();
        check_exact(&add, &ints, &sched, "integer add")?;
        check_exact(&IntMax, &ints, &sched, "integer max")?;
        let tagged: Vec<ResettableElement<i64>> = ints
            .iter()
            .map(|&v| ResettableElement::new(v, rng.gen_bool(0.05)))
            .collect();
        check_exact(&reset_add, &tagged, &sched, "resettable add")?;

        let mats: Vec<Mat2> = (0..n).map(|_| random_stochastic(&mut rng)).collect();
        let counted = Counting::new(Mat2Product);
        let par = scan_parallel(&counted, &mats, &sched);
        let seq = scan_sequential(&Mat2Product, &mats);
        for (i, (p, s)) in par.iter().zip(&seq).enumerate() {
            for k in 0..4 {
                let err = (p[k] - s[k]).abs() / p[k].abs().max(s[k].abs());
                worst_float = worst_float.max(err);
                ensure(err <= 1e-6, || {
                    format!("matrix product: n = {n}, element {i}[{k}] off by {err:e}")
                })?;
            }
        }
        ensure(counted.calls() <= 3 * n, || {
            format!("matrix product: {} combines for n = {n}", counted.calls())
        })?;
        if n > 0 {
            max_ratio = max_ratio.max(counted.calls() as f64 / n as f64);
        }
    }
    Ok(format!(
        "{trials} trials x 4 operators; worst float error {worst_float:.1e}; max combines/n {max_ratio:.2}"
    ))
}

fn associative<O: AssociativeOp>(
    op: &O,
    triples: usize,
    mut sample: impl FnMut() -> O::Elem,
    same: impl Fn(&O::Elem, &O::Elem) -> bool,
    what: &str,
) -> std::result::Result<(), String>
where
    O::Elem: std::fmt::Debug,
{
    let e = op.identity();
    for _ in 0..triples {
        let (a, b, c) = (sample(), sample(), sample());
        let left = op.combine(&op.combine(&a, &b), &c);
        let right = op.combine(&a, &op.combine(&b, &c));
        ensure(same(&left, &right), || {
            format!("{what}: (a•b)•c = {left:?} but a•(b•c) = {right:?}")
        })?;
        ensure(same(&op.combine(&e, &a), &a) && same(&op.combine(&a, &e), &a), || {
            format!("{what}: identity is not neutral for {a:?}")
        })?;
    }
    Ok(())
}

fn complex_vec_close(a: &[Complex64], b: &[Complex64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| complex_close(*x, *y, 1e-6))
}

fn real_vec_close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| rel_close(*x, *y, 1e-6))
}

fn unit_disc(rng: &mut impl Rng) -> Complex64 {
    Complex64::from_polar(
        rng.gen_range(0.0..1.0f64).sqrt(),
        rng.gen_range(0.0..std::f64::consts::TAU),
    )
}

fn scan_associativity(opts: &VerifyOptions) -> Outcome {
    let triples = opts.scale.pick(1_000, 10_000);
    let mut rng = rng_for(opts, 2);
    let add = CheckedAdd::new(opts.fault);
    associative(
        &add,
        triples,
        || rng.gen_range(-1_000_000..=1_000_000),
        |a, b| a == b,
        "integer add",
    )?;
    associative(
        &IntMax,
        triples,
        || rng.gen_range(-1_000_000..=1_000_000),
        |a, b| a == b,
        "integer max",
    )?;
    associative(
        &make_resettable(add),
        triples,
        || ResettableElement::new(rng.gen_range(-1000..=1000), rng.gen_bool(0.3)),
        |a, b| a == b,
        "resettable add",
    )?;
    associative(
        &Mat2Product,
        triples,
        || random_stochastic(&mut rng),
        |a, b| real_vec_close(a, b),
        "matrix product",
    )?;
    let gamma = rng.gen_range(0.0..=1.0);
    let ret = return_monoid(gamma).map_err(|e| e.to_string())?;
    associative(
        &ret,
        triples,
        || ret.lift(rng.gen_range(-1.0..1.0)),
        |a, b| rel_close(a.a, b.a, 1e-6) && rel_close(a.r, b.r, 1e-6),
        "discounted return",
    )?;
    associative(
        &make_resettable(ret),
        triples,
        || ResettableElement::new(ret.lift(rng.gen_range(-1.0..1.0)), rng.gen_bool(0.3)),
        |a, b| a.reset == b.reset && rel_close(a.value.a, b.value.a, 1e-6) && rel_close(a.value.r, b.value.r, 1e-6),
        "resettable discounted return",
    )?;
    let gae_op = gae_monoid(gamma, rng.gen_range(0.0..=1.0)).map_err(|e| e.to_string())?;
    associative(
        &gae_op,
        triples,
        || gae_op.lift(rng.gen_range(-1.0..1.0)),
        |a, b| rel_close(a.a, b.a, 1e-6) && rel_close(a.g, b.g, 1e-6),
        "advantage",
    )?;

    let (m, d) = (3, 2);
    let linattn = LinAttnMonoid::new(m, d);
    associative(
        &linattn,
        triples,
        || LinAttnState {
            outer: (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            keys: (0..m).map(|_| rng.gen_range(0.0..1.0)).collect(),
        },
        |a, b| real_vec_close(&a.outer, &b.outer) && real_vec_close(&a.keys, &b.keys),
        "linear attention",
    )?;
    let diag = DiagMonoid::new(m);
    associative(
        &diag,
        triples,
        || DiagState {
            decay: (0..m).map(|_| unit_disc(&mut rng)).collect(),
            carry: (0..m)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        },
        |a, b| complex_vec_close(&a.decay, &b.decay) && complex_vec_close(&a.carry, &b.carry),
        "diagonal recurrence",
    )?;
    associative(
        &make_resettable(diag),
        triples / 4,
        || {
            ResettableElement::new(
                DiagState {
                    decay: (0..m).map(|_| unit_disc(&mut rng)).collect(),
                    carry: (0..m).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), 0.0)).collect(),
                },
                rng.gen_bool(0.3),
            )
        },
        |a, b| a.reset == b.reset && complex_vec_close(&a.value.carry, &b.value.carry),
        "resettable diagonal recurrence",
    )?;
    let c = 2;
    let ffm = FfmMonoid::new(
        (0..m).map(|_| rng.gen_range(0.01..1.0)).collect(),
        (0..c).map(|_| rng.gen_range(0.0..std::f64::consts::PI)).collect(),
    );
    associative(
        &ffm,
        triples,
        || FfmState {
            trace: (0..m * c)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
            count: rng.gen_range(0..20),
        },
        |a, b| a.count == b.count && complex_vec_close(&a.trace, &b.trace),
        "fast and forgetful memory",
    )?;
    Ok(format!("{triples} triples per monoid, 11 monoids"))
}

/// Memory specs used by the reset and gradient suites.
pub fn memory_specs(input_dim: usize) -> Vec<ModelSpec> {
    [ModelKind::LinAttn, ModelKind::S5, ModelKind::Lru, ModelKind::Ffm]
        .into_iter()
        .map(|kind| {
            let out = if kind == ModelKind::Ffm { input_dim } else { 5 };
            ModelSpec::new(kind, input_dim, out, 4, 6).with_context(3)
        })
        .collect()
}

fn random_lengths(rng: &mut impl Rng, total: usize, max_len: usize) -> Vec<usize> {
    let mut lens = Vec::new();
    let mut left = total;
    while left > 0 {
        let l = rng.gen_range(1..=max_len.min(left));
        lens.push(l);
        left -= l;
    }
    lens
}

fn random_inputs(rng: &mut impl Rng, lens: &[usize], dim: usize) -> Vec<PartialTransition> {
    lens.iter()
        .flat_map(|&l| (0..l).map(move |t| t == 0))
        .map(|begin| PartialTransition::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(), begin))
        .collect()
}

fn reset_isolation(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 3);
    let rounds = opts.scale.pick(2, 5);
    let max_n = opts.scale.pick(512, 2048);
    let mut worst = 0.0f64;
    for spec in memory_specs(3) {
        let params = spec.init_params(&mut rng).map_err(|e| e.to_string())?;
        let model = spec.build(params).map_err(|e| e.to_string())?;
        for _ in 0..rounds {
            let n = rng.gen_range(2..=max_n);
            let lens = random_lengths(&mut rng, n, (n / 3).max(1));
            let inputs = random_inputs(&mut rng, &lens, spec.input_dim);
            let joint = model.run_resettable(&inputs, &opts.sched).map_err(|e| e.to_string())?;
            let mut offset = 0;
            for &l in &lens {
                let alone = model
                    .run(&inputs[offset..offset + l], &opts.sched)
                    .map_err(|e| e.to_string())?;
                for t in 0..l {
                    for (k, (a, b)) in joint.row(offset + t).iter().zip(alone.row(t)).enumerate() {
                        let err = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
                        worst = worst.max(err);
                        ensure(err <= 1e-5, || {
                            format!("{}: position {} component {k}: {a} vs {b}", spec.kind, offset + t)
                        })?;
                    }
                }
                offset += l;
            }
            // mutate everything before the last boundary
            if let Some(&last) = lens.last().filter(|_| lens.len() > 1) {
                let boundary = n - last;
                let mut mutated = inputs.clone();
                for p in &mut mutated[..boundary] {
                    for v in &mut p.obs {
                        *v = rng.gen_range(-3.0..3.0);
                    }
                }
                let again = model.run_resettable(&mutated, &opts.sched).map_err(|e| e.to_string())?;
                for t in boundary..n {
                    let same = joint
                        .row(t)
                        .iter()
                        .zip(again.row(t))
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                    ensure(same, || {
                        format!("{}: position {t} changed after mutating earlier episodes", spec.kind)
                    })?;
                }
            }
        }
    }
    Ok(format!(
        "4 models x {rounds} sequences up to n = {max_n}; worst relative error {worst:.1e}"
    ))
}

/// Random concatenated episodes ending with a terminal step.
fn random_episodes(rng: &mut impl Rng, max_n: usize) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(1..=max_n);
    let max_len = rng.gen_range(1..=n);
    let lens = random_lengths(rng, n, max_len);
    let dones = lens.iter().flat_map(|&l| (0..l).map(move |t| t + 1 == l)).collect();
    let rewards = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (rewards, dones)
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

fn returns_to_go(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 4);
    let instances = opts.scale.pick(100, 1000);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (rewards, dones) = random_episodes(&mut rng, 600);
        let gamma = if i % 10 == 0 {
            [0.0, 1.0][i / 10 % 2]
        } else {
            rng.gen_range(0.0..=1.0)
        };
        let fast = return_to_go(&rewards, &dones, gamma, &opts.sched).map_err(|e| e.to_string())?;
        let slow = naive_return_to_go(&rewards, &dones, gamma).map_err(|e| e.to_string())?;
        let err = max_rel_err(&fast, &slow);
        worst = worst.max(err);
        ensure(err <= 1e-6, || {
            format!("instance {i}: relative error {err:e} (gamma {gamma})")
        })?;
        // the prefix scan's decay component after t + 1 steps is γ^(t+1)
        let op = return_monoid(gamma).map_err(|e| e.to_string())?;
        let lifted: Vec<_> = rewards.iter().map(|&r| op.lift(r)).collect();
        for (t, e) in scan_parallel(&op, &lifted, &opts.sched).iter().enumerate() {
            let expect = gamma.powi(t as i32 + 1);
            ensure((e.a - expect).abs() <= 1e-9, || {
                format!("instance {i}: decay at t = {t} is {} not {expect}", e.a)
            })?;
        }
    }
    Ok(format!("{instances} instances; worst relative error {worst:.1e}"))
}

fn returns_gae(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 5);
    let instances = opts.scale.pick(100, 1000);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (rewards, dones) = random_episodes(&mut rng, 600);
        let n = rewards.len();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let next_values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (gamma, lambda) = (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0));
        let fast =
            gae(&rewards, &values, &next_values, &dones, gamma, lambda, &opts.sched).map_err(|e| e.to_string())?;
        let slow = naive_gae(&rewards, &values, &next_values, &dones, gamma, lambda).map_err(|e| e.to_string())?;
        let err = max_rel_err(&fast, &slow);
        worst = worst.max(err);
        ensure(err <= 1e-6, || format!("instance {i}: relative error {err:e}"))?;
    }
    Ok(format!("{instances} instances; worst relative error {worst:.1e}"))
}

fn random_episode(rng: &mut impl Rng, len: usize, obs_dim: usize) -> Vec<Transition> {
    let obs: Vec<Vec<f64>> = (0..=len)
        .map(|_| (0..obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    (0..len)
        .map(|t| Transition {
            obs: obs[t].clone(),
            action: rng.gen_range(0..4),
            reward: rng.gen_range(-1.0..1.0),
            next_obs: obs[t + 1].clone(),
            begin: t == 0,
            done: t + 1 == len,
        })
        .collect()
}

fn roundtrip_segments(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 6);
    let episodes = opts.scale.pick(100, 1000);
    for i in 0..episodes {
        let len = rng.gen_range(1..=60);
        let seg = rng.gen_range(1..=16);
        let ep = random_episode(&mut rng, len, 2);
        let mut joined = Vec::with_capacity(len);
        let fragments = sbb_split(&ep, seg).map_err(|e| e.to_string())?;
        ensure(fragments.len() == len.div_ceil(seg), || {
            format!("episode {i}: {} fragments", fragments.len())
        })?;
        for frag in fragments {
            let (padded, mask) = sbb_pad(frag, seg, 2).map_err(|e| e.to_string())?;
            ensure(padded.len() == seg && mask.len() == seg, || {
                format!("episode {i}: padded to {}", padded.len())
            })?;
            joined.extend(sbb_unpad(&padded, &mask).map_err(|e| e.to_string())?);
        }
        ensure(joined == ep, || {
            format!("episode {i} (length {len}, L = {seg}) did not survive the round trip")
        })?;
    }
    Ok(format!("{episodes} episodes"))
}

fn roundtrip_tape(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 7);
    let steps = opts.scale.pick(1_000, 10_000);
    let capacity = 200;
    let mut tape = Tape::new(capacity, 2).map_err(|e| e.to_string())?;
    // every inserted episode, tagged by its first reward
    let mut history: Vec<Vec<Transition>> = Vec::new();
    let mut evictions = 0usize;
    for step in 0..steps {
        if tape.is_empty() || rng.gen_bool(0.5) {
            let len = rng.gen_range(1..=40);
            let ep = random_episode(&mut rng, len, 2);
            let before = tape.num_episodes();
            tape.insert(&ep, false).map_err(|e| format!("step {step}: {e}"))?;
            history.push(ep);
            evictions += before + 1 - tape.num_episodes();
            // the tape holds the newest episodes, in order
            let kept = tape.num_episodes();
            let expected = &history[history.len() - kept..];
            ensure(tape.episodes().zip(expected).all(|(a, b)| a == b.as_slice()), || {
                format!("step {step}: tape is not the newest {kept} episodes in insertion order")
            })?;
            ensure(history.len() - kept == evictions, || {
                format!("step {step}: eviction count")
            })?;
        } else {
            let batch = rng.gen_range(1..=capacity);
            let sample = tape.sample(batch, &mut rng).map_err(|e| format!("step {step}: {e}"))?;
            ensure(sample.len() == batch && sample[0].begin, || {
                format!("step {step}: bad sample")
            })?;
        }
        tape.check_invariants().map_err(|e| format!("step {step}: {e}"))?;
    }
    let mut bytes = Vec::new();
    tape.write_to(&mut bytes).map_err(|e| e.to_string())?;
    let back = Tape::read_from(bytes.as_slice()).map_err(|e| e.to_string())?;
    ensure(
        back.transitions() == tape.transitions() && back.begin_indices() == tape.begin_indices(),
        || "tape changed through the file format".into(),
    )?;
    Ok(format!(
        "{steps} random operations, {evictions} evictions, file round-trip"
    ))
}

fn roundtrip_params(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 8);
    for (i, spec) in memory_specs(3).into_iter().enumerate() {
        let pipe = PipelineSpec::new(3, 2, 5, spec.kind, 4, 2);
        let params = pipe.init_params(&mut rng).map_err(|e| e.to_string())?;
        let meta = serde_json::json!({"pipeline": pipe.metadata(), "index": i});
        let mut bytes = Vec::new();
        params.write_to(&mut bytes, &meta).map_err(|e| e.to_string())?;
        let (back, back_meta) = ParamSet::read_from(bytes.as_slice()).map_err(|e| e.to_string())?;
        let bitwise = params
            .iter()
            .zip(back.iter())
            .all(|((ka, a), (kb, b))| ka == kb && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        ensure(bitwise && back.len() == params.len() && back_meta == meta, || {
            format!("{} parameters changed through the file format", spec.kind)
        })?;
    }
    Ok("4 pipelines".into())
}

/// One random gradient configuration.
#[derive(Debug, Clone)]
pub struct GradientCase {
    pub spec: PipelineSpec,
    pub params: ParamSet,
    pub batch: Vec<Transition>,
    /// Check the Q-loss (true) or a random linear functional of the Q-values.
    pub loss: bool,
    pub adjoint: Array2<f64>,
}

pub fn gradient_case(rng: &mut impl Rng, kind: ModelKind, loss: bool) -> GradientCase {
    let obs_dim = rng.gen_range(1..=3);
    let actions = rng.gen_range(2..=3);
    let spec = PipelineSpec::new(
        obs_dim,
        actions,
        rng.gen_range(3..=5),
        kind,
        rng.gen_range(2..=3),
        rng.gen_range(1..=2),
    );
    let params = spec.init_params(rng).expect("valid spec");
    let lens: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=5)).collect();
    let mut batch = Vec::new();
    for &l in &lens {
        batch.extend(random_episode(rng, l, obs_dim).into_iter().map(|mut t| {
            t.action %= actions;
            t
        }));
    }
    let adjoint = Array2::from_shape_fn((batch.len(), actions), |_| rng.gen_range(-1.0..1.0));
    GradientCase {
        spec,
        params,
        batch,
        loss,
        adjoint,
    }
}

impl GradientCase {
    fn options() -> QLearnOptions {
        QLearnOptions {
            gamma: 0.9,
            ..Default::default()
        }
    }

    /// Target parameters: a fixed perturbation of the online ones.
    fn target(&self) -> ParamSet {
        let mut t = self.params.clone();
        for (_, v) in t.iter_mut() {
            v.mapv_inplace(|x| 0.9 * x);
        }
        t
    }

    pub fn value(&self, params: &ParamSet) -> crate::Result<f64> {
        let sched = ScanSchedule::serial();
        if self.loss {
            Ok(tbb_loss(
                &self.spec,
                params,
                &self.target(),
                &self.batch,
                &Self::options(),
                &sched,
            )?
            .loss)
        } else {
            let inputs: Vec<PartialTransition> = self.batch.iter().map(Transition::partial).collect();
            let q = q_forward(&self.spec, params, &inputs, &sched)?.q;
            Ok((&q * &self.adjoint).sum())
        }
    }

    pub fn analytic(&self) -> crate::Result<ParamSet> {
        if self.loss {
            let sched = ScanSchedule::serial();
            Ok(tbb_loss(
                &self.spec,
                &self.params,
                &self.target(),
                &self.batch,
                &Self::options(),
                &sched,
            )?
            .grads)
        } else {
            let inputs: Vec<PartialTransition> = self.batch.iter().map(Transition::partial).collect();
            Ok(backward(&self.spec, &self.params, &inputs, self.adjoint.clone())?.0)
        }
    }

    /// Worst relative disagreement over every scalar parameter, with step
    /// `h`, and the number of scalars checked.
    pub fn check(&self, h: f64) -> crate::Result<(f64, usize, String)> {
        let grads = self.analytic()?;
        let mut worst = (0.0f64, String::new());
        let mut count = 0;
        let mut probe = self.params.clone();
        for (name, tensor) in self.params.iter() {
            for (idx, &x) in tensor.indexed_iter() {
                probe.get_mut(name).expect("same names")[idx] = x + h;
                let plus = self.value(&probe)?;
                probe.get_mut(name).expect("same names")[idx] = x - h;
                let minus = self.value(&probe)?;
                probe.get_mut(name).expect("same names")[idx] = x;
                let fd = (plus - minus) / (2.0 * h);
                let a = grads.tensor(name)[idx];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                if err > worst.0 {
                    worst = (err, format!("{name}{idx:?}: analytic {a:e}, numeric {fd:e}"));
                }
                count += 1;
            }
        }
        Ok((worst.0, count, worst.1))
    }
}

fn gradients_fd(opts: &VerifyOptions) -> Outcome {
    let mut rng = rng_for(opts, 9);
    let configs = opts.scale.pick(4, 24);
    let kinds = [ModelKind::LinAttn, ModelKind::S5, ModelKind::Lru, ModelKind::Ffm];
    let mut worst = 0.0f64;
    let mut scalars = 0;
    for i in 0..configs {
        let case = gradient_case(&mut rng, kinds[i % 4], i / 4 % 2 == 1);
        let (err, count, at) = case.check(1e-5).map_err(|e| e.to_string())?;
        worst = worst.max(err);
        scalars += count;
        ensure(err <= 1e-4, || {
            format!("config {i} ({}): relative error {err:e} at {at}", kinds[i % 4])
        })?;
    }
    Ok(format!(
        "{configs} configurations, {scalars} scalars; worst relative error {worst:.1e}"
    ))
}
