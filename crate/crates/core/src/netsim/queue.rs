use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::SimError;

struct Entry<T> {
    time: f64,
    seq: u64,
    item: T,
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T> Eq for Entry<T> {}

impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Entry<T> {
    // reversed: BinaryHeap is a max-heap and we pop the earliest
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Min-queue over `(time, seq)`. `seq` is assigned at insertion, so items
/// with equal times come out in insertion order.
pub struct EventQueue<T> {
    heap: BinaryHeap<Entry<T>>,
    next_seq: u64,
    now: f64,
}

impl<T> Default for EventQueue<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> EventQueue<T> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
            now: 0.0,
        }
    }

    /// Time of the last popped item.
    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, time: f64, item: T) -> Result<u64, SimError> {
        if !time.is_finite() || time < self.now {
            return Err(SimError::PastEvent {
                at: time,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { time, seq, item });
        Ok(seq)
    }

    /// `None` once the queue is exhausted.
    pub fn pop(&mut self) -> Option<(f64, u64, T)> {
        let e = self.heap.pop()?;
        self.now = e.time;
        Some((e.time, e.seq, e.item))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;

    #[test]
    fn ties_pop_in_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(1.0, "a").unwrap();
        q.schedule(1.0, "b").unwrap();
        q.schedule(0.5, "c").unwrap();
        let order: Vec<&str> = std::iter::from_fn(|| q.pop().map(|e| e.2)).collect();
        assert_eq!(order, vec!["c", "a", "b"]);
        assert!(q.pop().is_none());
    }

    #[test]
    fn past_events_are_rejected() {
        let mut q = EventQueue::new();
        q.schedule(2.0, ()).unwrap();
        q.pop();
        assert!(matches!(q.schedule(1.0, ()), Err(SimError::PastEvent { .. })));
        assert!(q.schedule(2.0, ()).is_ok());
        assert!(q.schedule(f64::NAN, ()).is_err());
    }

    #[test]
    fn thousand_random_events_match_sort() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut q = EventQueue::new();
        let mut expected = Vec::new();
        for i in 0..1000u32 {
            // coarse times force plenty of ties
            let t = rng.random_range(0..50) as f64 * 0.25;
            let seq = q.schedule(t, i).unwrap();
            expected.push((t, seq, i));
        }
        expected.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let got: Vec<_> = std::iter::from_fn(|| q.pop()).collect();
        assert_eq!(got, expected);
    }

    proptest! {
        #[test]
        fn interleaved_pops_never_go_back_in_time(
            ops in proptest::collection::vec((0.0f64..10.0, any::<bool>()), 1..200)
        ) {
            let mut q = EventQueue::new();
            let mut last = (0.0f64, 0u64);
            for (dt, pop) in ops {
                let now = q.now();
                q.schedule(now + dt, ()).unwrap();
                if pop {
                    let (t, s, _) = q.pop().unwrap();
                    prop_assert!(t > last.0 || (t == last.0 && s > last.1) || last == (0.0, 0));
                    last = (t, s);
                }
            }
        }
    }
}
