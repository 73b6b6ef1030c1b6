// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use parking_lot::{Condvar, Mutex};

/// Bounded FIFO shared by one producer and one consumer. Slots are reused
/// in ring order; a full buffer blocks the producer and an empty one blocks
/// the consumer until the other side moves or the buffer is closed.
pub struct CircularBuffer<T> {
    state: Mutex<Ring<T>>,
    not_empty: Condvar,
    not_full: Condvar,
}

struct Ring<T> {
    slots: Vec<Option<T>>,
    head: usize,
    len: usize,
    closed: bool,
    produced: u64,
    consumed: u64,
}

/// Returned to a producer when the buffer was closed; carries the batch back.
#[derive(Debug, PartialEq, Eq)]
pub struct Closed<T>(pub T);

impl<T> CircularBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        CircularBuffer {
            state: Mutex::new(Ring {
                slots: (0..capacity).map(|_| None).collect(),
                head: 0,
                len: 0,
                closed: false,
                produced: 0,
                consumed: 0,
            }),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.state.lock().slots.len()
    }

    pub fn len(&self) -> usize {
        self.state.lock().len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Block while full, then append.
    pub fn produce(&self, batch: T) -> Result<(), Closed<T>> {
        let mut ring = self.state.lock();
        while ring.len == ring.slots.len() && !ring.closed {
            self.not_full.wait(&mut ring);
        }
        if ring.closed {
            return Err(Closed(batch));
        }
        let cap = ring.slots.len();
        let tail = (ring.head + ring.len) % cap;
        debug_assert!(ring.slots[tail].is_none());
        ring.slots[tail] = Some(batch);
        ring.len += 1;
        ring.produced += 1;
        drop(ring);
        self.not_empty.notify_one();
        Ok(())
    }

    /// Block while empty; `None` once the buffer is closed and drained.
    pub fn consume(&self) -> Option<T> {
        let mut ring = self.state.lock();
        while ring.len == 0 && !ring.closed {
            self.not_empty.wait(&mut ring);
        }
        if ring.len == 0 {
            return None;
        }
        let head = ring.head;
        let batch = ring.slots[head].take().expect("occupied slot");
        ring.head = (head + 1) % ring.slots.len();
        ring.len -= 1;
        ring.consumed += 1;
        drop(ring);
        self.not_full.notify_one();
        Some(batch)
    }

    /// End the stream. Queued batches stay consumable; later produces fail.
    pub fn close(&self) {
        self.state.lock().closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().closed
    }

    /// (produced, consumed) totals so far.
    pub fn totals(&self) -> (u64, u64) {
        let ring = self.state.lock();
        (ring.produced, ring.consumed)
    }
}

/// Split a shared buffer into its two endpoints.
pub fn channel<T>(capacity: usize) -> (Producer<T>, Consumer<T>) {
    let buf = Arc::new(CircularBuffer::new(capacity));
    (Producer(buf.clone()), Consumer(buf))
}

pub struct Producer<T>(Arc<CircularBuffer<T>>);

impl<T> Producer<T> {
    pub fn produce(&self, batch: T) -> Result<(), Closed<T>> {
        self.0.produce(batch)
    }

    pub fn buffer(&self) -> &CircularBuffer<T> {
        &self.0
    }
}

impl<T> Drop for Producer<T> {
    fn drop(&mut self) {
        self.0.close();
    }
}

pub struct Consumer<T>(Arc<CircularBuffer<T>>);

impl<T> Consumer<T> {
    pub fn consume(&self) -> Option<T> {
        self.0.consume()
    }

    pub fn buffer(&self) -> &CircularBuffer<T> {
        &self.0
    }
}

impl<T> Drop for Consumer<T> {
    fn drop(&mut self) {
        self.0.close();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    #[test]
    fn fifo_order() {
        let b = CircularBuffer::new(128);
        for i in 1..=100 {
            b.produce(i).unwrap();
        }
        let got: Vec<i32> = (0..100).map(|_| b.consume().unwrap()).collect();
        assert_eq!(got, (1..=100).collect::<Vec<_>>());
        assert!(b.is_empty());
    }

    #[test]
    fn capacity_one_alternates() {
        let (p, c) = channel(1);
        let h = thread::spawn(move || {
            for i in 0..50 {
                p.produce(i).unwrap();
                assert!(p.buffer().len() <= 1);
            }
        });
        for i in 0..50 {
            assert_eq!(c.consume(), Some(i));
        }
        h.join().unwrap();
        assert_eq!(c.consume(), None);
    }

    #[test]
    fn wraps_around_the_ring() {
        let b = CircularBuffer::new(3);
        for round in 0..10 {
            b.produce(round * 2).unwrap();
            b.produce(round * 2 + 1).unwrap();
            assert_eq!(b.consume(), Some(round * 2));
            assert_eq!(b.consume(), Some(round * 2 + 1));
        }
        assert_eq!(b.totals(), (20, 20));
    }

    #[test]
    fn close_drains_then_ends() {
        let b = CircularBuffer::new(4);
        b.produce(1).unwrap();
        b.close();
        assert_eq!(b.produce(2), Err(Closed(2)));
        assert_eq!(b.consume(), Some(1));
        assert_eq!(b.consume(), None);
    }

    #[test]
    fn closing_wakes_blocked_producer() {
        let (p, c) = channel(1);
        p.produce(0).unwrap();
        let h = thread::spawn(move || p.produce(1));
        thread::sleep(std::time::Duration::from_millis(20));
        drop(c);
        assert_eq!(h.join().unwrap(), Err(Closed(1)));
    }
}
