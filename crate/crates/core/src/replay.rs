//! FIFO transition store with contiguous H-step segment sampling.
//!
//! Transitions are addressed by their absolute push index. A start index is
//! valid for the configured horizon when the next `horizon` transitions are
//! in the buffer, belong to one episode and none but the last is terminal.
//! Valid starts are tracked incrementally so sampling is O(1) per segment.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub episode_id: u64,
}

impl Transition {
    pub fn is_finite(&self) -> bool {
        self.reward.is_finite()
            && self.state.iter().all(|x| x.is_finite())
            && self.action.iter().all(|x| x.is_finite())
            && self.next_state.iter().all(|x| x.is_finite())
    }
}

/// `horizon` consecutive transitions from one episode.
pub type Segment = Vec<Transition>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BufferConfig {
    pub capacity: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            capacity: 1_000_000,
            horizon: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayBuffer {
    config: BufferConfig,
    items: VecDeque<Transition>,
    /// Absolute index of `items[0]`.
    first_index: u64,
    valid_starts: VecDeque<u64>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(config: BufferConfig) -> Result<Self> {
        if config.horizon == 0 {
            return Err(Error::Config("buffer horizon must be >= 1".into()));
        }
        if config.capacity < config.horizon + 1 {
            return Err(Error::Config(format!(
                "buffer capacity {} must be >= horizon + 1 = {}",
                config.capacity,
                config.horizon + 1
            )));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            items: VecDeque::with_capacity(config.capacity.min(1 << 16)),
            first_index: 0,
            valid_starts: VecDeque::new(),
            rng,
            config,
        })
    }

    pub fn config(&self) -> &BufferConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total transitions ever pushed.
    pub fn total_pushed(&self) -> u64 {
        self.first_index + self.items.len() as u64
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn num_valid_segments(&self) -> usize {
        self.valid_starts.len()
    }

    pub fn push(&mut self, transition: Transition) -> Result<()> {
        if !transition.is_finite() {
            return Err(Error::non_finite("transition pushed to replay buffer"));
        }
        if self.items.len() == self.config.capacity {
            self.items.pop_front();
            self.first_index += 1;
            while self.valid_starts.front().is_some_and(|&s| s < self.first_index) {
                self.valid_starts.pop_front();
            }
        }
        self.items.push_back(transition);

        let h = self.config.horizon;
        if self.items.len() >= h {
            let start_pos = self.items.len() - h;
            if self.is_valid_at(start_pos, h) {
                self.valid_starts.push_back(self.first_index + start_pos as u64);
            }
        }
        Ok(())
    }

    fn is_valid_at(&self, pos: usize, horizon: usize) -> bool {
        if pos + horizon > self.items.len() {
            return false;
        }
        let episode = self.items[pos].episode_id;
        (pos..pos + horizon).all(|i| {
            let t = &self.items[i];
            t.episode_id == episode && (i + 1 == pos + horizon || !t.done)
        })
    }

    fn segment_at(&self, pos: usize, horizon: usize) -> Segment {
        self.items.range(pos..pos + horizon).cloned().collect()
    }

    /// Valid start positions (relative to the oldest stored transition).
    pub fn valid_start_positions(&self, horizon: usize) -> Vec<usize> {
        if horizon == self.config.horizon {
            self.valid_starts
                .iter()
                .map(|&s| (s - self.first_index) as usize)
                .collect()
        } else {
            (0..self.items.len())
                .filter(|&p| self.is_valid_at(p, horizon))
                .collect()
        }
    }

    /// Samples `count` segments uniformly over valid starts with the buffer's
    /// own seeded stream.
    pub fn sample_segments(&mut self, horizon: usize, count: usize) -> Result<Vec<Segment>> {
        let mut rng = self.rng.clone();
        let out = self.sample_segments_with(horizon, count, &mut rng);
        self.rng = rng;
        out
    }

    /// Like [`ReplayBuffer::sample_segments`] with a caller-supplied stream.
    pub fn sample_segments_with<R: Rng + ?Sized>(
        &self,
        horizon: usize,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<Segment>> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("segment horizon must be >= 1".into()));
        }
        if horizon == self.config.horizon {
            if self.valid_starts.is_empty() {
                return Err(Error::InsufficientData { horizon });
            }
            Ok((0..count)
                .map(|_| {
                    let k = rng.random_range(0..self.valid_starts.len());
                    let pos = (self.valid_starts[k] - self.first_index) as usize;
                    self.segment_at(pos, horizon)
                })
                .collect())
        } else {
            let starts = self.valid_start_positions(horizon);
            if starts.is_empty() {
                return Err(Error::InsufficientData { horizon });
            }
            Ok((0..count)
                .map(|_| self.segment_at(starts[rng.random_range(0..starts.len())], horizon))
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(id: f64, episode: u64, done: bool) -> Transition {
        Transition {
            state: vec![id],
            action: vec![0.0],
            reward: id,
            next_state: vec![id + 1.0],
            done,
            episode_id: episode,
        }
    }

    fn buffer(capacity: usize, horizon: usize) -> ReplayBuffer {
        ReplayBuffer::new(BufferConfig {
            capacity,
            horizon,
            seed: 7,
        })
        .unwrap()
    }

    #[test]
    fn push_then_len() {
        let mut b = buffer(10, 1);
        b.push(tr(0.0, 0, false)).unwrap();
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn fifo_eviction_at_capacity() {
        let mut b = buffer(2, 1);
        for i in 0..3 {
            b.push(tr(i as f64, 0, false)).unwrap();
        }
        let rewards: Vec<f64> = b.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![1.0, 2.0]);
    }

    #[test]
    fn non_finite_rejected() {
        let mut b = buffer(4, 1);
        assert!(b.push(tr(f64::NAN, 0, false)).is_err());
        assert!(b.is_empty());
    }

    #[test]
    fn capacity_must_exceed_horizon() {
        assert!(ReplayBuffer::new(BufferConfig {
            capacity: 3,
            horizon: 3,
            seed: 0
        })
        .is_err());
    }

    #[test]
    fn single_episode_of_length_h_is_the_only_segment() {
        let mut b = buffer(10, 3);
        b.push(tr(0.0, 0, false)).unwrap();
        b.push(tr(1.0, 0, false)).unwrap();
        b.push(tr(2.0, 0, true)).unwrap();
        let segs = b.sample_segments(3, 5).unwrap();
        for s in segs {
            let r: Vec<f64> = s.iter().map(|t| t.reward).collect();
            assert_eq!(r, vec![0.0, 1.0, 2.0]);
        }
    }

    #[test]
    fn short_episodes_never_sampled() {
        let mut b = buffer(20, 3);
        b.push(tr(0.0, 0, false)).unwrap();
        b.push(tr(1.0, 0, true)).unwrap();
        assert!(matches!(b.sample_segments(3, 1), Err(Error::InsufficientData { horizon: 3 })));
        for i in 0..4 {
            b.push(tr(10.0 + i as f64, 1, i == 3)).unwrap();
        }
        for s in b.sample_segments(3, 50).unwrap() {
            assert!(s.iter().all(|t| t.episode_id == 1));
        }
    }

    #[test]
    fn done_only_allowed_at_segment_end() {
        // Episode id stays fixed but a done flag sits mid-stream.
        let mut b = buffer(20, 2);
        b.push(tr(0.0, 0, false)).unwrap();
        b.push(tr(1.0, 0, true)).unwrap();
        b.push(tr(2.0, 0, false)).unwrap();
        assert_eq!(b.valid_start_positions(2), vec![0]);
        assert_eq!(b.valid_start_positions(3), Vec::<usize>::new());
    }

    #[test]
    fn eviction_drops_stale_starts() {
        let mut b = buffer(4, 2);
        for i in 0..6 {
            b.push(tr(i as f64, 0, false)).unwrap();
        }
        assert_eq!(b.valid_start_positions(2), vec![0, 1, 2]);
        let scan: Vec<usize> = (0..b.len()).filter(|&p| b.is_valid_at(p, 2)).collect();
        assert_eq!(scan, vec![0, 1, 2]);
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let mut a = buffer(100, 3);
        for i in 0..50 {
            a.push(tr(i as f64, i / 10, i % 10 == 9)).unwrap();
        }
        let mut b = a.clone();
        assert_eq!(a.sample_segments(3, 8).unwrap(), b.sample_segments(3, 8).unwrap());
        assert_eq!(a.sample_segments(3, 8).unwrap(), b.sample_segments(3, 8).unwrap());
    }
}
