use rand::Rng;

use crate::env::Transition;

/// Fixed-capacity ring buffer of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            data: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            inserted: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            let slot = (self.inserted % self.capacity as u64) as usize;
            self.data[slot] = t;
        }
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total pushes, including overwritten records.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Uniform sample with replacement; `None` until `len >= batch`.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Vec<Transition>> {
        if batch == 0 || self.data.len() < batch {
            return None;
        }
        Some((0..batch).map(|_| self.data[rng.gen_range(0..self.data.len())]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(tag: f64) -> Transition {
        Transition {
            obs: [tag; 6],
            action: [0.0; 2],
            reward: -tag,
            next_obs: [tag; 6],
            done: false,
            truncated: false,
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(tr(i as f64));
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.inserted(), 5);
        let mut tags: Vec<f64> = b.data.iter().map(|t| t.obs[0]).collect();
        tags.sort_by(f64::total_cmp);
        assert_eq!(tags, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn sampling_requires_a_full_batch_and_only_sees_inserted_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ReplayBuffer::new(100);
        for i in 0..10 {
            b.push(tr(i as f64 + 1.0));
        }
        assert!(b.sample(11, &mut rng).is_none());
        for _ in 0..50 {
            let s = b.sample(10, &mut rng).unwrap();
            assert!(s.iter().all(|t| (1.0..=10.0).contains(&t.obs[0])));
        }
    }
}
