use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::losses::Provenance;
use crate::tensor::Tensor;

/// One history entry: a single image, or an (appearance, structure) pair,
/// with the origin of each part.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferItem<T> {
    pub parts: Vec<Tensor<T>>,
    pub tags: Vec<Provenance>,
}

/// History pool of generated images. Until full every query stores and
/// returns the new item; once full, a query returns a uniformly chosen
/// stored item (and stores the new one in its place) with probability 1/2,
/// or the new item otherwise. Capacity 0 passes every item through.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<BufferItem<T>>,
    pub(crate) rng: ChaCha8Rng,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity),
            rng,
        }
    }

    pub(crate) fn restore(capacity: usize, items: Vec<BufferItem<T>>, rng: ChaCha8Rng) -> Self {
        ReplayBuffer { capacity, items, rng }
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

    pub fn items(&self) -> &[BufferItem<T>] {
        &self.items
    }

    /// Returns the item to show the discriminator and whether it came from
    /// history.
    pub fn query(&mut self, item: BufferItem<T>) -> (BufferItem<T>, bool) {
        if self.capacity == 0 {
            return (item, false);
        }
        if self.items.len() < self.capacity {
            self.items.push(item.clone());
            return (item, false);
        }
        if self.rng.random_bool(0.5) {
            let i = self.rng.random_range(0..self.items.len());
            (std::mem::replace(&mut self.items[i], item), true)
        } else {
            (item, false)
        }
    }
}
