//! Replay storage for recurrent off-policy learning.
//!
//! A [`Tape`] keeps transitions in insertion order with the indices at which
//! episodes begin. Sampling draws whole episodes and concatenates them, so a
//! batch can be fed to a resettable scan without padding.
//!
//! The segment route ([`sbb_build_dataset`]) instead splits episodes into
//! fixed-length, zero-padded rows with masks.
//!
//! # Tape snapshot layout (little-endian, version 1)
//!
//! ```text
//! magic      8 bytes  "MEMTAPE\0"
//! version    u32      1
//! obs_dim    u32
//! capacity   u64
//! count      u64      number of transitions
//! episodes   u64      number of begin indices
//! count × {
//!   obs        obs_dim × f64
//!   action     u64
//!   reward     f64
//!   next_obs   obs_dim × f64
//!   flags      u8     bit 0 = begin, bit 1 = done
//! }
//! episodes × u64      begin indices
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::memoroid::PartialTransition;
use crate::params::{read_u32, read_u64};

pub const TAPE_MAGIC: &[u8; 8] = b"MEMTAPE\0";
pub const TAPE_VERSION: u32 = 1;

/// `(o, a, r, o', b, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub begin: bool,
    pub done: bool,
}

impl Transition {
    /// The padding transition: zero vectors, action 0, reward 0, no flags.
    pub fn zero(obs_dim: usize) -> Self {
        Self {
            obs: vec![0.0; obs_dim],
            action: 0,
            reward: 0.0,
            next_obs: vec![0.0; obs_dim],
            begin: false,
            done: false,
        }
    }

    pub fn partial(&self) -> PartialTransition {
        PartialTransition::new(self.obs.clone(), self.begin)
    }

    /// `(o', b)`: the next observation with this transition's begin flag.
    pub fn next_partial(&self) -> PartialTransition {
        PartialTransition::new(self.next_obs.clone(), self.begin)
    }
}

/// Transitions stored in order plus episode begin indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    obs_dim: usize,
    capacity: usize,
    transitions: Vec<Transition>,
    begins: Vec<usize>,
}

impl Tape {
    pub fn new(capacity: usize, obs_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("capacity", "must be at least 1"));
        }
        Ok(Self {
            obs_dim,
            capacity,
            transitions: Vec::new(),
            begins: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn begin_indices(&self) -> &[usize] {
        &self.begins
    }

    pub fn num_episodes(&self) -> usize {
        self.begins.len()
    }

    fn episode_end(&self, k: usize) -> usize {
        self.begins.get(k + 1).copied().unwrap_or(self.transitions.len())
    }

    pub fn episode(&self, k: usize) -> &[Transition] {
        &self.transitions[self.begins[k]..self.episode_end(k)]
    }

    pub fn episodes(&self) -> impl Iterator<Item = &[Transition]> {
        (0..self.begins.len()).map(move |k| self.episode(k))
    }

    pub fn episode_lengths(&self) -> Vec<usize> {
        (0..self.begins.len())
            .map(|k| self.episode_end(k) - self.begins[k])
            .collect()
    }

    fn validate_rollout(&self, rollout: &[Transition]) -> Result<()> {
        if rollout.len() > self.capacity {
            return Err(Error::RolloutTooLong {
                len: rollout.len(),
                capacity: self.capacity,
            });
        }
        for t in rollout {
            if t.obs.len() != self.obs_dim {
                return Err(Error::dims(self.obs_dim, t.obs.len(), "transition observation"));
            }
            if t.next_obs.len() != self.obs_dim {
                return Err(Error::dims(
                    self.obs_dim,
                    t.next_obs.len(),
                    "transition next observation",
                ));
            }
        }
        Ok(())
    }

    /// Inserts a rollout. On-policy replaces the tape; off-policy evicts
    /// whole episodes, oldest first, until the rollout fits, then appends.
    pub fn insert(&mut self, rollout: &[Transition], on_policy: bool) -> Result<()> {
        self.validate_rollout(rollout)?;
        if rollout.is_empty() {
            return Ok(());
        }
        let headless = !rollout[0].begin;
        if on_policy {
            if headless {
                return Err(Error::Precondition(
                    "an on-policy rollout must start with begin = 1".into(),
                ));
            }
            self.transitions.clear();
            self.begins.clear();
        } else {
            // count evictions first so a rejected insert leaves the tape untouched
            let mut evict = 0;
            let mut kept = self.transitions.len();
            while kept + rollout.len() > self.capacity {
                kept -= self.episode_end(evict) - self.begins[evict];
                evict += 1;
            }
            if headless && kept == 0 {
                return Err(Error::Precondition(
                    "rollout continues an episode that is not on the tape (begin = 0 at position 0)".into(),
                ));
            }
            for _ in 0..evict {
                self.pop_oldest();
            }
        }
        let offset = self.transitions.len();
        self.begins.extend(
            rollout
                .iter()
                .enumerate()
                .filter(|(_, t)| t.begin)
                .map(|(i, _)| offset + i),
        );
        self.transitions.extend_from_slice(rollout);
        Ok(())
    }

    fn pop_oldest(&mut self) {
        let popped = self.episode_end(0);
        self.transitions.drain(..popped);
        self.begins.remove(0);
        for b in &mut self.begins {
            *b -= popped;
        }
    }

    /// Draws episodes uniformly with replacement until at least `batch`
    /// transitions are collected, then truncates to exactly `batch`.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<Transition>> {
        self.sample_with(batch, |n| rng.gen_range(0..n))
    }

    /// As [`Tape::sample`] with an explicit episode-index source.
    pub fn sample_with(&self, batch: usize, mut draw: impl FnMut(usize) -> usize) -> Result<Vec<Transition>> {
        if batch == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.is_empty() {
            return Err(Error::Precondition("cannot sample from an empty tape".into()));
        }
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            let k = draw(self.begins.len());
            if k >= self.begins.len() {
                return Err(Error::invalid("episode index", format!("{k} out of range")));
            }
            out.extend_from_slice(self.episode(k));
        }
        out.truncate(batch);
        Ok(out)
    }

    /// Checks the tape invariants; used by tests and the verify suites.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Precondition(msg));
        if self.transitions.len() > self.capacity {
            return fail(format!(
                "{} transitions exceed capacity {}",
                self.transitions.len(),
                self.capacity
            ));
        }
        if !self.transitions.is_empty() && self.begins.first() != Some(&0) {
            return fail("first begin index is not 0".into());
        }
        if self.begins.windows(2).any(|w| w[0] >= w[1]) {
            return fail("begin indices are not strictly increasing".into());
        }
        let mut k = 0;
        for (i, t) in self.transitions.iter().enumerate() {
            let listed = self.begins.get(k) == Some(&i);
            if listed {
                k += 1;
            }
            if t.begin != listed {
                return fail(format!("begin flag at {i} disagrees with the index list"));
            }
        }
        if k != self.begins.len() {
            return fail("begin index past the end of the tape".into());
        }
        Ok(())
    }

    pub fn length_stats(&self, segment_len: Option<usize>) -> LengthStats {
        LengthStats::from_lengths(&self.episode_lengths(), segment_len)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(TAPE_MAGIC)?;
        w.write_all(&TAPE_VERSION.to_le_bytes())?;
        w.write_all(&(self.obs_dim as u32).to_le_bytes())?;
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        w.write_all(&(self.transitions.len() as u64).to_le_bytes())?;
        w.write_all(&(self.begins.len() as u64).to_le_bytes())?;
        for t in &self.transitions {
            for v in &t.obs {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&(t.action as u64).to_le_bytes())?;
            w.write_all(&t.reward.to_le_bytes())?;
            for v in &t.next_obs {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&[u8::from(t.begin) | (u8::from(t.done) << 1)])?;
        }
        for b in &self.begins {
            w.write_all(&(*b as u64).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TAPE_MAGIC {
            return Err(Error::Format("not a tape snapshot (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != TAPE_VERSION {
            return Err(Error::Format(format!("unsupported tape snapshot version {version}")));
        }
        let obs_dim = read_u32(&mut r)? as usize;
        let capacity = read_u64(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let episodes = read_u64(&mut r)? as usize;
        let read_vec = |r: &mut dyn Read| -> Result<Vec<f64>> {
            let mut buf = [0u8; 8];
            (0..obs_dim)
                .map(|_| {
                    r.read_exact(&mut buf)?;
                    Ok(f64::from_le_bytes(buf))
                })
                .collect()
        };
        let mut transitions = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let obs = read_vec(&mut r)?;
            let action = read_u64(&mut r)? as usize;
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            let reward = f64::from_le_bytes(buf);
            let next_obs = read_vec(&mut r)?;
            let mut flags = [0u8; 1];
            r.read_exact(&mut flags)?;
            transitions.push(Transition {
                obs,
                action,
                reward,
                next_obs,
                begin: flags[0] & 1 != 0,
                done: flags[0] & 2 != 0,
            });
        }
        let begins = (0..episodes)
            .map(|_| read_u64(&mut r).map(|b| b as usize))
            .collect::<Result<Vec<_>>>()?;
        let tape = Self {
            obs_dim,
            capacity,
            transitions,
            begins,
        };
        tape.check_invariants()
            .map_err(|e| Error::Format(format!("inconsistent tape snapshot: {e}")))?;
        Ok(tape)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Episode-length summary with the padding a segment length would cost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthStats {
    pub episodes: usize,
    pub transitions: usize,
    pub histogram: BTreeMap<usize, usize>,
    pub segment_len: Option<usize>,
    pub padding_fraction: Option<f64>,
}

impl LengthStats {
    pub fn from_lengths(lengths: &[usize], segment_len: Option<usize>) -> Self {
        let mut histogram = BTreeMap::new();
        for &l in lengths {
            *histogram.entry(l).or_insert(0) += 1;
        }
        Self {
            episodes: lengths.len(),
            transitions: lengths.iter().sum(),
            histogram,
            segment_len,
            padding_fraction: segment_len.filter(|&l| l > 0).map(|l| padding_fraction(lengths, l)),
        }
    }
}

/// `1 − Σ lengths / (rows · L)` for the segment dataset of these episodes.
pub fn padding_fraction(lengths: &[usize], segment_len: usize) -> f64 {
    let rows: usize = lengths.iter().map(|l| l.div_ceil(segment_len)).sum();
    if rows == 0 {
        return 0.0;
    }
    1.0 - lengths.iter().sum::<usize>() as f64 / (rows * segment_len) as f64
}

fn check_segment_len(segment_len: usize) -> Result<()> {
    if segment_len == 0 {
        Err(Error::invalid("segment_length", "must be at least 1"))
    } else {
        Ok(())
    }
}

/// Consecutive fragments of length `segment_len`, the last possibly shorter.
pub fn sbb_split(episode: &[Transition], segment_len: usize) -> Result<Vec<&[Transition]>> {
    check_segment_len(segment_len)?;
    Ok(episode.chunks(segment_len).collect())
}

/// Zero-pads a fragment to `segment_len` and returns the prefix mask.
pub fn sbb_pad(fragment: &[Transition], segment_len: usize, obs_dim: usize) -> Result<(Vec<Transition>, Vec<bool>)> {
    check_segment_len(segment_len)?;
    if fragment.len() > segment_len {
        return Err(Error::invalid(
            "fragment",
            format!("length {} exceeds segment length {segment_len}", fragment.len()),
        ));
    }
    let mut segment = fragment.to_vec();
    segment.resize(segment_len, Transition::zero(obs_dim));
    let mask = (0..segment_len).map(|i| i < fragment.len()).collect();
    Ok((segment, mask))
}

/// Number of leading ones; errors unless the mask is ones then zeros.
pub fn mask_prefix_len(mask: &[bool]) -> Result<usize> {
    let n = mask.iter().take_while(|&&m| m).count();
    if mask[n..].iter().any(|&m| m) {
        return Err(Error::invalid("mask", "not a prefix of ones followed by zeros"));
    }
    Ok(n)
}

pub fn sbb_unpad(segment: &[Transition], mask: &[bool]) -> Result<Vec<Transition>> {
    if segment.len() != mask.len() {
        return Err(Error::dims(segment.len(), mask.len(), "segment mask length"));
    }
    Ok(segment[..mask_prefix_len(mask)?].to_vec())
}

/// Fixed-length rows of transitions with prefix masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBatch {
    pub segment_len: usize,
    pub obs_dim: usize,
    pub segments: Vec<Vec<Transition>>,
    pub masks: Vec<Vec<bool>>,
}

impl SegmentBatch {
    pub fn rows(&self) -> usize {
        self.segments.len()
    }

    pub fn mask_sums(&self) -> Vec<usize> {
        self.masks.iter().map(|m| m.iter().filter(|&&b| b).count()).collect()
    }

    pub fn padding_fraction(&self) -> f64 {
        let total = self.rows() * self.segment_len;
        if total == 0 {
            return 0.0;
        }
        1.0 - self.mask_sums().iter().sum::<usize>() as f64 / total as f64
    }

    /// Uniformly sampled rows, with replacement.
    pub fn sample_rows(&self, count: usize, rng: &mut impl Rng) -> Result<SegmentBatch> {
        if self.segments.is_empty() {
            return Err(Error::Precondition(
                "cannot sample from an empty segment dataset".into(),
            ));
        }
        let picks: Vec<usize> = (0..count).map(|_| rng.gen_range(0..self.rows())).collect();
        Ok(self.select(&picks))
    }

    pub fn select(&self, rows: &[usize]) -> SegmentBatch {
        SegmentBatch {
            segment_len: self.segment_len,
            obs_dim: self.obs_dim,
            segments: rows.iter().map(|&i| self.segments[i].clone()).collect(),
            masks: rows.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }

    /// Rejoins rows into episodes; a row whose first transition has the
    /// begin flag opens a new episode.
    pub fn reconstruct_episodes(&self) -> Result<Vec<Vec<Transition>>> {
        let mut episodes: Vec<Vec<Transition>> = Vec::new();
        for (seg, mask) in self.segments.iter().zip(&self.masks) {
            let frag = sbb_unpad(seg, mask)?;
            match (frag.first(), episodes.last_mut()) {
                (None, _) => {}
                (Some(first), Some(last)) if !first.begin => last.extend(frag),
                (Some(first), None) if !first.begin => {
                    return Err(Error::Precondition("first row does not open an episode".into()))
                }
                _ => episodes.push(frag),
            }
        }
        Ok(episodes)
    }
}

/// Splits and pads every episode; rows keep episode order.
pub fn sbb_build_dataset<'a>(
    episodes: impl IntoIterator<Item = &'a [Transition]>,
    segment_len: usize,
    obs_dim: usize,
) -> Result<SegmentBatch> {
    check_segment_len(segment_len)?;
    let mut segments = Vec::new();
    let mut masks = Vec::new();
    for ep in episodes {
        for frag in sbb_split(ep, segment_len)? {
            let (seg, mask) = sbb_pad(frag, segment_len, obs_dim)?;
            segments.push(seg);
            masks.push(mask);
        }
    }
    Ok(SegmentBatch {
        segment_len,
        obs_dim,
        segments,
        masks,
    })
}

/// `(start, len)` of every segment row the tape's episodes split into.
pub fn segment_rows(tape: &Tape, segment_len: usize) -> Result<Vec<(usize, usize)>> {
    check_segment_len(segment_len)?;
    let mut rows = Vec::new();
    for (k, &start) in tape.begin_indices().iter().enumerate() {
        let end = start + tape.episode(k).len();
        let mut s = start;
        while s < end {
            let len = segment_len.min(end - s);
            rows.push((s, len));
            s += len;
        }
    }
    Ok(rows)
}

/// Samples `rows` segment rows uniformly, with replacement, from the
/// segment dataset of the tape's episodes without materializing it.
pub fn sbb_sample_tape(tape: &Tape, segment_len: usize, rows: usize, rng: &mut impl Rng) -> Result<SegmentBatch> {
    let index = segment_rows(tape, segment_len)?;
    if index.is_empty() {
        return Err(Error::Precondition("cannot sample from an empty tape".into()));
    }
    let mut segments = Vec::with_capacity(rows);
    let mut masks = Vec::with_capacity(rows);
    for _ in 0..rows {
        let (start, len) = index[rng.gen_range(0..index.len())];
        let (seg, mask) = sbb_pad(&tape.transitions()[start..start + len], segment_len, tape.obs_dim())?;
        segments.push(seg);
        masks.push(mask);
    }
    Ok(SegmentBatch {
        segment_len,
        obs_dim: tape.obs_dim(),
        segments,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn episode(len: usize, tag: f64) -> Vec<Transition> {
        (0..len)
            .map(|i| Transition {
                obs: vec![tag, i as f64],
                action: i % 3,
                reward: tag + i as f64,
                next_obs: vec![tag, i as f64 + 1.0],
                begin: i == 0,
                done: i + 1 == len,
            })
            .collect()
    }

    fn concat(eps: &[Vec<Transition>]) -> Vec<Transition> {
        eps.iter().flatten().cloned().collect()
    }

    #[test]
    fn insert_into_empty_tape() {
        let mut tape = Tape::new(10, 2).unwrap();
        tape.insert(&concat(&[episode(3, 1.0), episode(2, 2.0)]), false)
            .unwrap();
        assert_eq!(tape.begin_indices(), &[0, 3]);
        assert_eq!(tape.len(), 5);
        tape.check_invariants().unwrap();
    }

    #[test]
    fn eviction_shifts_indices() {
        let mut tape = Tape::new(10, 2).unwrap();
        tape.insert(&concat(&[episode(4, 1.0), episode(4, 2.0)]), false)
            .unwrap();
        tape.insert(&episode(3, 3.0), false).unwrap();
        assert_eq!(tape.len(), 7);
        assert_eq!(tape.begin_indices(), &[0, 4]);
        assert_eq!(tape.episode(0), episode(4, 2.0).as_slice());
        assert_eq!(tape.episode(1), episode(3, 3.0).as_slice());
        tape.check_invariants().unwrap();
    }

    #[test]
    fn on_policy_replaces() {
        let mut tape = Tape::new(10, 2).unwrap();
        tape.insert(&episode(4, 1.0), false).unwrap();
        let ro = episode(2, 5.0);
        tape.insert(&ro, true).unwrap();
        assert_eq!(tape.transitions(), ro.as_slice());
    }

    #[test]
    fn rejects_bad_rollouts() {
        let mut tape = Tape::new(3, 2).unwrap();
        assert!(matches!(
            tape.insert(&episode(4, 1.0), false),
            Err(Error::RolloutTooLong { len: 4, capacity: 3 })
        ));
        let headless = &episode(3, 1.0)[1..];
        assert!(tape.insert(headless, false).is_err());
        assert!(tape.is_empty());
    }

    #[test]
    fn sampling_single_episode() {
        let mut tape = Tape::new(10, 2).unwrap();
        tape.insert(&episode(5, 1.0), false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(tape.sample(5, &mut rng).unwrap(), episode(5, 1.0));
    }

    #[test]
    fn sampling_truncates_scripted_draws() {
        let mut tape = Tape::new(10, 2).unwrap();
        tape.insert(&concat(&[episode(2, 1.0), episode(3, 2.0)]), false)
            .unwrap();
        let mut script = [1, 0].into_iter();
        let batch = tape.sample_with(4, |_| script.next().unwrap()).unwrap();
        let mut expected = episode(3, 2.0);
        expected.push(episode(2, 1.0)[0].clone());
        assert_eq!(batch, expected);
        assert!(tape.sample_with(0, |_| 0).is_err());
    }

    #[test]
    fn split_lengths() {
        let ep = episode(10, 0.0);
        let lens: Vec<usize> = sbb_split(&ep, 3).unwrap().iter().map(|f| f.len()).collect();
        assert_eq!(lens, vec![3, 3, 3, 1]);
        assert_eq!(sbb_split(&ep[..3], 3).unwrap().len(), 1);
        assert_eq!(sbb_split(&ep[..2], 5).unwrap()[0].len(), 2);
        assert!(sbb_split(&ep, 0).is_err());
    }

    #[test]
    fn pad_mask() {
        let ep = episode(2, 0.0);
        let (seg, mask) = sbb_pad(&ep, 4, 2).unwrap();
        assert_eq!(mask, vec![true, true, false, false]);
        assert_eq!(seg[3], Transition::zero(2));
        assert_eq!(sbb_unpad(&seg, &mask).unwrap(), ep);
        assert!(sbb_pad(&ep, 1, 2).is_err());
        assert!(sbb_unpad(&seg, &[true, false, true, false]).is_err());
    }

    #[test]
    fn dataset_mask_sums() {
        let eps = [episode(5, 1.0), episode(2, 2.0)];
        let ds = sbb_build_dataset(eps.iter().map(Vec::as_slice), 3, 2).unwrap();
        assert_eq!(ds.mask_sums(), vec![3, 2, 2]);
        assert!((ds.padding_fraction() - (1.0 - 7.0 / 9.0)).abs() < 1e-15);
        assert!((padding_fraction(&[5, 2], 3) - ds.padding_fraction()).abs() < 1e-15);
        assert_eq!(ds.reconstruct_episodes().unwrap(), eps.to_vec());
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut tape = Tape::new(20, 2).unwrap();
        tape.insert(&concat(&[episode(4, 1.0), episode(6, 2.0)]), false)
            .unwrap();
        let mut buf = Vec::new();
        tape.write_to(&mut buf).unwrap();
        assert_eq!(Tape::read_from(buf.as_slice()).unwrap(), tape);
        buf[0] = b'X';
        assert!(Tape::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn tape_rows_match_dataset_rows() {
        let mut tape = Tape::new(30, 2).unwrap();
        let eps = [episode(5, 1.0), episode(2, 2.0), episode(7, 3.0)];
        tape.insert(&concat(&eps), false).unwrap();
        let ds = sbb_build_dataset(tape.episodes(), 3, 2).unwrap();
        let rows = segment_rows(&tape, 3).unwrap();
        assert_eq!(rows.len(), ds.rows());
        assert_eq!(rows.iter().map(|r| r.1).collect::<Vec<_>>(), ds.mask_sums());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sample = sbb_sample_tape(&tape, 3, 20, &mut rng).unwrap();
        for (seg, mask) in sample.segments.iter().zip(&sample.masks) {
            assert!(ds.segments.iter().zip(&ds.masks).any(|(s, m)| s == seg && m == mask));
        }
    }

    proptest! {
        #[test]
        fn split_pad_unpad_join_is_identity(len in 1usize..60, seg in 1usize..12) {
            let ep = episode(len, 0.5);
            let ds = sbb_build_dataset([ep.as_slice()], seg, 2).unwrap();
            prop_assert_eq!(ds.reconstruct_episodes().unwrap(), vec![ep]);
        }

        #[test]
        fn random_inserts_keep_invariants(lens in proptest::collection::vec(1usize..9, 1..60)) {
            let mut tape = Tape::new(16, 2).unwrap();
            for (k, &l) in lens.iter().enumerate() {
                tape.insert(&episode(l, k as f64), false).unwrap();
                tape.check_invariants().unwrap();
            }
        }
    }
}
