//! Inclusive scans over user-supplied associative operators.
//!
//! [`scan_sequential`] is the reference left fold. [`scan_parallel`] is a
//! work-efficient blocked Blelloch scan: every leaf block of
//! `block_size` elements is reduced, the block totals go through an
//! up-sweep/down-sweep exclusive scan (padded to a power of two with empty
//! slots that never reach `combine`), and each block is finally rescanned
//! starting from its exclusive prefix. The combining tree depends only on the sequence length and the
//! block size, so floating point results are bitwise reproducible for any
//! worker budget.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Environment variable consulted by [`ScanSchedule::from_env`].
pub const WORKERS_ENV: &str = "MEMOROID_WORKERS";

pub const DEFAULT_BLOCK_SIZE: usize = 256;

/// A monoid: an identity element and an associative, pure `combine`.
///
/// `combine(a, b)` is `a • b` with `a` the older (left) operand.
pub trait AssociativeOp: Sync {
    type Elem: Clone + Send + Sync;

    fn identity(&self) -> Self::Elem;

    fn combine(&self, left: &Self::Elem, right: &Self::Elem) -> Self::Elem;
}

impl<T: AssociativeOp + ?Sized> AssociativeOp for &T {
    type Elem = T::Elem;

    fn identity(&self) -> Self::Elem {
        (**self).identity()
    }

    fn combine(&self, left: &Self::Elem, right: &Self::Elem) -> Self::Elem {
        (**self).combine(left, right)
    }
}

/// Worker budget and leaf block size for [`scan_parallel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanSchedule {
    worker_budget: NonZeroUsize,
    block_size: NonZeroUsize,
}

impl ScanSchedule {
    pub fn new(worker_budget: usize, block_size: usize) -> Result<Self> {
        let worker_budget =
            NonZeroUsize::new(worker_budget).ok_or_else(|| Error::invalid("worker_budget", "must be positive"))?;
        let block_size =
            NonZeroUsize::new(block_size).ok_or_else(|| Error::invalid("block_size", "must be positive"))?;
        Ok(Self {
            worker_budget,
            block_size,
        })
    }

    /// One worker, default block size.
    pub fn serial() -> Self {
        Self::new(1, DEFAULT_BLOCK_SIZE).unwrap()
    }

    /// Worker budget from `MEMOROID_WORKERS`, falling back to the number of
    /// available cores.
    pub fn from_env() -> Self {
        let workers = std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&w| w > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map(NonZeroUsize::get).unwrap_or(1));
        Self::new(workers, DEFAULT_BLOCK_SIZE).unwrap()
    }

    pub fn with_workers(self, worker_budget: usize) -> Result<Self> {
        Self::new(worker_budget, self.block_size.get())
    }

    pub fn with_block_size(self, block_size: usize) -> Result<Self> {
        Self::new(self.worker_budget.get(), block_size)
    }

    pub fn worker_budget(&self) -> usize {
        self.worker_budget.get()
    }

    pub fn block_size(&self) -> usize {
        self.block_size.get()
    }
}

impl Default for ScanSchedule {
    fn default() -> Self {
        Self::from_env()
    }
}

fn pool(workers: usize) -> Arc<rayon::ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let mut pools = POOLS
        .get_or_init(Default::default)
        .lock()
        .unwrap_or_else(|e| e.into_inner());
    pools
        .entry(workers)
        .or_insert_with(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .thread_name(|i| format!("memoroid-scan-{i}"))
                    .build()
                    .expect("failed to build scan thread pool"),
            )
        })
        .clone()
}

/// Runs `f` on the thread pool reserved for `sched`'s worker budget.
pub fn with_workers<R: Send>(sched: &ScanSchedule, f: impl FnOnce() -> R + Send) -> R {
    pool(sched.worker_budget()).install(f)
}

/// Reference inclusive scan: `y_t = x_0 • … • x_t`, using exactly `n - 1`
/// combines.
pub fn scan_sequential<O: AssociativeOp>(op: &O, xs: &[O::Elem]) -> Vec<O::Elem> {
    let mut out: Vec<O::Elem> = Vec::with_capacity(xs.len());
    for x in xs {
        let next = match out.last() {
            Some(prev) => op.combine(prev, x),
            None => x.clone(),
        };
        out.push(next);
    }
    out
}

fn fold_block<O: AssociativeOp>(op: &O, block: &[O::Elem]) -> O::Elem {
    let (first, rest) = block.split_first().expect("blocks are never empty");
    rest.iter().fold(first.clone(), |acc, x| op.combine(&acc, x))
}

/// `a • b` where `None` stands for the identity and costs no combine.
fn combine_opt<O: AssociativeOp>(op: &O, a: &Option<O::Elem>, b: &Option<O::Elem>) -> Option<O::Elem> {
    match (a, b) {
        (Some(x), Some(y)) => Some(op.combine(x, y)),
        (Some(x), None) => Some(x.clone()),
        (None, y) => y.clone(),
    }
}

/// Blelloch up-sweep / down-sweep, turning `t` (length a power of two) into
/// its exclusive prefix scan. Padding and the leftmost prefixes are `None`,
/// so at most `2 (blocks − 1)` combines are made.
fn blelloch_exclusive<O: AssociativeOp>(op: &O, t: &mut [Option<O::Elem>]) {
    let p = t.len();
    debug_assert!(p.is_power_of_two());
    let mut stride = 2;
    while stride <= p {
        let half = stride / 2;
        t.par_chunks_mut(stride).for_each(|c| {
            c[stride - 1] = combine_opt(op, &c[half - 1], &c[stride - 1]);
        });
        stride *= 2;
    }
    t[p - 1] = None;
    let mut stride = p;
    while stride >= 2 {
        let half = stride / 2;
        t.par_chunks_mut(stride).for_each(|c| {
            let prefix = c[stride - 1].take();
            c[stride - 1] = combine_opt(op, &prefix, &c[half - 1]);
            c[half - 1] = prefix;
        });
        stride /= 2;
    }
}

/// Work-efficient parallel inclusive scan, element-wise equal to
/// [`scan_sequential`] for exact payloads.
pub fn scan_parallel<O: AssociativeOp>(op: &O, xs: &[O::Elem], sched: &ScanSchedule) -> Vec<O::Elem> {
    let n = xs.len();
    let block = sched.block_size();
    if n <= block {
        return scan_sequential(op, xs);
    }
    with_workers(sched, || {
        let mut totals: Vec<Option<O::Elem>> = xs.par_chunks(block).map(|c| Some(fold_block(op, c))).collect();
        let blocks = totals.len();
        totals.resize(blocks.next_power_of_two(), None);
        blelloch_exclusive(op, &mut totals);

        let mut out: Vec<O::Elem> = xs.to_vec();
        out.par_chunks_mut(block)
            .zip(xs.par_chunks(block))
            .enumerate()
            .for_each(|(k, (dst, src))| {
                let mut acc = match &totals[k] {
                    Some(prefix) => op.combine(prefix, &src[0]),
                    None => src[0].clone(),
                };
                dst[0] = acc.clone();
                for (d, x) in dst[1..].iter_mut().zip(&src[1..]) {
                    acc = op.combine(&acc, x);
                    *d = acc.clone();
                }
            });
        out
    })
}

/// The opposite monoid: `combine(a, b) = inner.combine(b, a)`.
///
/// A prefix scan of a reversed sequence under the opposite monoid is the
/// suffix scan of the original sequence under `inner`.
#[derive(Debug, Clone)]
pub struct Opposite<O>(pub O);

impl<O: AssociativeOp> AssociativeOp for Opposite<O> {
    type Elem = O::Elem;

    fn identity(&self) -> Self::Elem {
        self.0.identity()
    }

    fn combine(&self, left: &Self::Elem, right: &Self::Elem) -> Self::Elem {
        self.0.combine(right, left)
    }
}

/// Wraps an operator and counts `combine` invocations.
#[derive(Debug, Default)]
pub struct Counting<O> {
    inner: O,
    calls: AtomicUsize,
}

impl<O> Counting<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

impl<O: AssociativeOp> AssociativeOp for Counting<O> {
    type Elem = O::Elem;

    fn identity(&self) -> Self::Elem {
        self.inner.identity()
    }

    fn combine(&self, left: &Self::Elem, right: &Self::Elem) -> Self::Elem {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.combine(left, right)
    }
}

/// Small operators used by tests, benchmarks and the verification suites.
pub mod ops {
    use super::AssociativeOp;

    /// Wrapping integer addition.
    #[derive(Debug, Clone, Copy, Default)]
    pub struct IntAdd;

    impl AssociativeOp for IntAdd {
        type Elem = i64;

        fn identity(&self) -> i64 {
            0
        }

        fn combine(&self, left: &i64, right: &i64) -> i64 {
            left.wrapping_add(*right)
        }
    }

    #[derive(Debug, Clone, Copy, Default)]
    pub struct IntMax;

    impl AssociativeOp for IntMax {
        type Elem = i64;

        fn identity(&self) -> i64 {
            i64::MIN
        }

        fn combine(&self, left: &i64, right: &i64) -> i64 {
            *left.max(right)
        }
    }

    /// Row-major 2×2 real matrix.
    pub type Mat2 = [f64; 4];

    /// 2×2 matrix product, `combine(a, b) = a · b`.
    #[derive(Debug, Clone, Copy, Default)]
    pub struct Mat2Product;

    impl AssociativeOp for Mat2Product {
        type Elem = Mat2;

        fn identity(&self) -> Mat2 {
            [1.0, 0.0, 0.0, 1.0]
        }

        fn combine(&self, a: &Mat2, b: &Mat2) -> Mat2 {
            [
                a[0] * b[0] + a[1] * b[2],
                a[0] * b[1] + a[1] * b[3],
                a[2] * b[0] + a[3] * b[2],
                a[2] * b[1] + a[3] * b[3],
            ]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::ops::{IntAdd, IntMax, Mat2Product};
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn left_fold_prefixes(xs: &[i64]) -> Vec<i64> {
        let mut acc = 0i64;
        xs.iter()
            .map(|x| {
                acc += x;
                acc
            })
            .collect()
    }

    #[test]
    fn sequential_matches_hand_fold() {
        assert_eq!(scan_sequential(&IntAdd, &[1, 2, 3, 4]), vec![1, 3, 6, 10]);
        assert_eq!(left_fold_prefixes(&[1, 2, 3, 4]), vec![1, 3, 6, 10]);
        assert!(scan_sequential(&IntAdd, &[]).is_empty());
        assert_eq!(scan_sequential(&IntAdd, &[7]), vec![7]);
    }

    #[test]
    fn sequential_uses_n_minus_one_combines() {
        for n in [0usize, 1, 2, 9, 100] {
            let op = Counting::new(IntAdd);
            let xs: Vec<i64> = (0..n as i64).collect();
            scan_sequential(&op, &xs);
            assert_eq!(op.calls(), n.saturating_sub(1));
        }
    }

    #[test]
    fn parallel_small_inputs() {
        for workers in [1, 2, 8] {
            let sched = ScanSchedule::new(workers, 2).unwrap();
            assert_eq!(scan_parallel(&IntAdd, &[1, 2, 3, 4], &sched), vec![1, 3, 6, 10]);
            assert_eq!(scan_parallel(&IntAdd, &[5], &sched), vec![5]);
            assert!(scan_parallel(&IntAdd, &[], &sched).is_empty());
        }
    }

    #[test]
    fn parallel_matrix_product_257() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<[f64; 4]> = (0..257)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
            .collect();
        let expected = scan_sequential(&Mat2Product, &xs);
        for block in [1, 4, 16, 256] {
            let sched = ScanSchedule::new(4, block).unwrap();
            let got = scan_parallel(&Mat2Product, &xs, &sched);
            for (g, e) in got.iter().zip(&expected) {
                for i in 0..4 {
                    let tol = 1e-6 * e[i].abs().max(1e-300);
                    assert!((g[i] - e[i]).abs() <= tol.max(1e-12), "{g:?} vs {e:?}");
                }
            }
        }
    }

    #[test]
    fn identity_padding_is_invisible() {
        // 3 blocks pad to 4 with an identity block.
        let sched = ScanSchedule::new(1, 3).unwrap();
        let xs: Vec<i64> = vec![4, -1, 9, 2, 2, 7, 0, -5, 3];
        assert_eq!(scan_parallel(&IntMax, &xs, &sched), scan_sequential(&IntMax, &xs));
    }

    #[test]
    fn opposite_gives_suffix_products() {
        let xs: Vec<[f64; 4]> = vec![[1.0, 2.0, 0.0, 1.0], [0.0, 1.0, 1.0, 0.0], [2.0, 0.0, 0.0, 3.0]];
        let mut rev = xs.clone();
        rev.reverse();
        let mut suffix = scan_sequential(&Opposite(Mat2Product), &rev);
        suffix.reverse();
        let op = Mat2Product;
        assert_eq!(suffix[2], xs[2]);
        assert_eq!(suffix[1], op.combine(&xs[1], &xs[2]));
        assert_eq!(suffix[0], op.combine(&xs[0], &op.combine(&xs[1], &xs[2])));
    }

    #[test]
    fn schedule_rejects_zero() {
        assert!(ScanSchedule::new(0, 4).is_err());
        assert!(ScanSchedule::new(4, 0).is_err());
    }

    #[test]
    fn float_results_independent_of_worker_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<[f64; 4]> = (0..5000)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-0.8..0.8)))
            .collect();
        let one = scan_parallel(&Mat2Product, &xs, &ScanSchedule::new(1, 64).unwrap());
        let many = scan_parallel(&Mat2Product, &xs, &ScanSchedule::new(16, 64).unwrap());
        let bits = |v: &[[f64; 4]]| -> Vec<u64> { v.iter().flatten().map(|x| x.to_bits()).collect() };
        assert_eq!(bits(&one), bits(&many));
    }

    proptest! {
        #[test]
        fn parallel_equals_sequential_for_integers(
            xs in proptest::collection::vec(-1000i64..1000, 0..600),
            block in 1usize..40,
            workers in 1usize..6,
        ) {
            let sched = ScanSchedule::new(workers, block).unwrap();
            prop_assert_eq!(scan_parallel(&IntAdd, &xs, &sched), scan_sequential(&IntAdd, &xs));
            prop_assert_eq!(scan_parallel(&IntMax, &xs, &sched), scan_sequential(&IntMax, &xs));
        }

        #[test]
        fn combine_calls_are_linear(n in 0usize..3000, block in 8usize..300) {
            let sched = ScanSchedule::new(2, block).unwrap();
            let op = Counting::new(IntAdd);
            let xs = vec![1i64; n];
            scan_parallel(&op, &xs, &sched);
            prop_assert!(op.calls() <= 3 * n, "{} calls for n={}", op.calls(), n);
        }
    }
}
