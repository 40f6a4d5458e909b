use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Bounded FIFO of query accuracies. Pushing onto a full queue is refused;
/// the caller pops first, which keeps the window size explicit.
#[derive(Debug, Clone, PartialEq)]
pub struct AccQueue {
    entries: VecDeque<f64>,
    capacity: usize,
}

impl AccQueue {
    pub fn new(capacity: usize) -> Self {
        AccQueue {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, acc: f64) -> Result<()> {
        if self.entries.len() >= self.capacity {
            return Err(Error::usage(format!("queue already holds {} entries", self.capacity)));
        }
        self.entries.push_back(acc);
        Ok(())
    }

    pub fn pop_oldest(&mut self) -> Option<f64> {
        self.entries.pop_front()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().copied()
    }
}

/// Spread of the queue: `max - min`.
pub fn div(q: &AccQueue) -> Result<f64> {
    let mut it = q.entries();
    let first = it.next().ok_or_else(|| Error::usage("div of an empty queue"))?;
    let (lo, hi) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
    Ok(hi - lo)
}
