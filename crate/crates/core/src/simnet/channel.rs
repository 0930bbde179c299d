//! A one-directional message buffer with the adversarial operations the
//! model checker may apply to it.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChannelOp {
    /// Remove the head message.
    Drop,
    /// Append a copy of the head message.
    Repeat,
    /// Move the head message to the back.
    Reorder,
}

impl ChannelOp {
    pub const ALL: [ChannelOp; 3] = [ChannelOp::Drop, ChannelOp::Repeat, ChannelOp::Reorder];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("channel is empty")]
pub struct EmptyQueue;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Channel<M> {
    queue: VecDeque<M>,
}

impl<M> Default for Channel<M> {
    fn default() -> Self {
        Channel { queue: VecDeque::new() }
    }
}

impl<M: Clone> Channel<M> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, m: M) {
        self.queue.push_back(m);
    }

    pub fn recv(&mut self) -> Option<M> {
        self.queue.pop_front()
    }

    pub fn head(&self) -> Option<&M> {
        self.queue.front()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn clear(&mut self) {
        self.queue.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = &M> {
        self.queue.iter()
    }

    pub fn apply(&mut self, op: ChannelOp) -> Result<(), EmptyQueue> {
        let head = self.queue.pop_front().ok_or(EmptyQueue)?;
        match op {
            ChannelOp::Drop => {}
            ChannelOp::Repeat => {
                self.queue.push_front(head.clone());
                self.queue.push_back(head);
            }
            ChannelOp::Reorder => self.queue.push_back(head),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chan(items: &[char]) -> Channel<char> {
        let mut c = Channel::new();
        for &i in items {
            c.send(i);
        }
        c
    }

    fn contents(c: &Channel<char>) -> Vec<char> {
        c.iter().copied().collect()
    }

    #[test]
    fn reorder_moves_head_to_back() {
        let mut c = chan(&['a', 'b']);
        c.apply(ChannelOp::Reorder).unwrap();
        assert_eq!(contents(&c), ['b', 'a']);
    }

    #[test]
    fn repeat_appends_copy() {
        let mut c = chan(&['a']);
        c.apply(ChannelOp::Repeat).unwrap();
        assert_eq!(contents(&c), ['a', 'a']);
    }

    #[test]
    fn drop_removes_head() {
        let mut c = chan(&['a']);
        c.apply(ChannelOp::Drop).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.apply(ChannelOp::Drop), Err(EmptyQueue));
    }
}
