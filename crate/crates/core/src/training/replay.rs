//! FIFO episode replay.

use std::collections::VecDeque;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::training::episode::EpisodeRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<EpisodeRecord>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Parameter("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            episodes: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.episodes.iter()
    }

    /// Appends, evicting the oldest episode when full.
    pub fn push(&mut self, episode: EpisodeRecord) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    /// Distinct positions drawn uniformly, in draw order.
    pub fn sample_indices(&self, batch: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
        if batch == 0 || batch > self.len() {
            return Err(Error::Contract(format!(
                "cannot sample {batch} episodes from a buffer holding {}",
                self.len()
            )));
        }
        Ok(index::sample(rng, self.len(), batch).into_vec())
    }

    pub fn sample(&self, batch: usize, rng: &mut RngStream) -> Result<Vec<&EpisodeRecord>> {
        Ok(self
            .sample_indices(batch, rng)?
            .into_iter()
            .map(|i| &self.episodes[i])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{AgentType, EnvState};

    fn episode(tag: usize) -> EpisodeRecord {
        EpisodeRecord {
            steps: Vec::new(),
            final_state: EnvState {
                agents: vec![(tag, 0)],
                types: vec![AgentType::Scout],
                prey: Vec::new(),
                alive: Vec::new(),
                t: tag,
            },
        }
    }

    #[test]
    fn evicts_oldest() {
        let mut b = ReplayBuffer::new(2).unwrap();
        for i in 0..3 {
            b.push(episode(i));
        }
        let tags: Vec<usize> = b.iter().map(|e| e.final_state.t).collect();
        assert_eq!(tags, vec![1, 2]);
    }

    #[test]
    fn full_sample_is_a_permutation_and_repeatable() {
        let mut b = ReplayBuffer::new(10).unwrap();
        for i in 0..6 {
            b.push(episode(i));
        }
        let mut idx = b.sample_indices(6, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(idx, b.sample_indices(6, &mut RngStream::new(3, 0)).unwrap());
        idx.sort_unstable();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
        assert!(matches!(
            b.sample(7, &mut RngStream::new(3, 0)),
            Err(Error::Contract(_))
        ));
    }
}
