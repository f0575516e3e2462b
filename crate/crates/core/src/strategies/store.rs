use std::cell::Cell;

use casam_tensor::{Rng, Tensor};

use crate::bench::BoxPrompt;
use crate::data::{EncodedSample, EncodedTask};

/// Stream access with an audit of every read of a past task's training data.
///
/// Strategies see the current task's training set freely; anything from an
/// earlier task has to go through [`TaskStore::read_past`], which is counted.
#[derive(Debug)]
pub struct TaskStore<'a> {
    tasks: &'a [EncodedTask],
    current: Cell<usize>,
    past_reads: Cell<usize>,
}

impl<'a> TaskStore<'a> {
    pub fn new(tasks: &'a [EncodedTask]) -> Self {
        Self {
            tasks,
            current: Cell::new(0),
            past_reads: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn begin(&self, position: usize) {
        assert!(position < self.tasks.len(), "stage {} out of range", position);
        self.current.set(position);
    }

    pub fn current(&self) -> usize {
        self.current.get()
    }

    pub fn task(&self, position: usize) -> &'a EncodedTask {
        &self.tasks[position]
    }

    pub fn current_train(&self) -> Vec<&'a EncodedSample> {
        self.tasks[self.current.get()].train.iter().collect()
    }

    /// Training sample `index` of the task at `position`; counted unless it
    /// belongs to the current task.
    pub fn read(&self, position: usize, index: usize) -> &'a EncodedSample {
        if position != self.current.get() {
            self.past_reads.set(self.past_reads.get() + 1);
        }
        &self.tasks[position].train[index]
    }

    /// Every training sample of an earlier task, counted.
    pub fn read_past(&self, position: usize) -> Vec<&'a EncodedSample> {
        (0..self.tasks[position].train.len()).map(|i| self.read(position, i)).collect()
    }

    /// Test sets are evaluation-only and never counted.
    pub fn test(&self, position: usize) -> &'a [EncodedSample] {
        &self.tasks[position].test
    }

    pub fn past_reads(&self) -> usize {
        self.past_reads.get()
    }
}

/// A stored reference to a training sample, optionally with the logits the
/// model produced for it when it was stored.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryItem {
    pub position: usize,
    pub index: usize,
    pub logits: Option<Tensor>,
    /// Box prompt the stored logits were produced with.
    pub prompt: Option<BoxPrompt>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertionPolicy {
    /// Uniform over everything offered so far.
    Reservoir,
    /// Capacity split evenly over tasks, filled by uniform random selection.
    PerTaskQuota,
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    policy: InsertionPolicy,
    items: Vec<MemoryItem>,
    offered: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, policy: InsertionPolicy) -> Self {
        Self {
            capacity,
            policy,
            items: Vec::with_capacity(capacity),
            offered: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[MemoryItem] {
        &self.items
    }

    /// Reservoir step: the `n`-th offered item replaces a random slot with
    /// probability `capacity / n`.
    pub fn offer(&mut self, item: MemoryItem, rng: &mut Rng) {
        debug_assert_eq!(self.policy, InsertionPolicy::Reservoir);
        self.offered += 1;
        if self.capacity == 0 {
            return;
        }
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let j = rng.below(self.offered);
            if j < self.capacity {
                self.items[j] = item;
            }
        }
    }

    /// Per-task quota step: shrinks every stored task to the new share and
    /// fills the new task's share with a uniform random subset of its
    /// `count` samples.
    pub fn add_task(&mut self, position: usize, count: usize, rng: &mut Rng) {
        debug_assert_eq!(self.policy, InsertionPolicy::PerTaskQuota);
        let mut tasks: Vec<usize> = self.items.iter().map(|i| i.position).collect();
        tasks.dedup();
        let n_tasks = tasks.len() + 1;
        let quota = self.capacity / n_tasks;
        let mut kept = Vec::with_capacity(self.capacity);
        for t in tasks {
            kept.extend(self.items.iter().filter(|i| i.position == t).take(quota).cloned());
        }
        let mut order = rng.permutation(count);
        order.truncate(quota);
        order.sort_unstable();
        kept.extend(order.into_iter().map(|index| MemoryItem {
            position,
            index,
            logits: None,
            prompt: None,
        }));
        self.items = kept;
    }

    /// Uniform draw with replacement of `n` items.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<&MemoryItem> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.below(self.items.len())]).collect()
    }
}
