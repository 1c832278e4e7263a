//! Block-granular KV cache accounting for one instance (or one pipeline
//! stage slice).
//!
//! Admission reserves a request's peak footprint up front; physical blocks
//! are then allocated lazily as its context crosses block boundaries. A
//! request can therefore never be starved of blocks mid-flight, and no
//! preemption is needed.

use std::collections::HashMap;

#[derive(Debug, Clone)]
pub(crate) struct KvLedger {
    pub capacity: u64,
    pub block_size: u32,
    reserved: u64,
    allocated: u64,
    peak_allocated: u64,
    held: HashMap<usize, Hold>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Hold {
    reserved: u64,
    allocated: u64,
}

impl KvLedger {
    pub fn new(capacity: u64, block_size: u32) -> Self {
        KvLedger {
            capacity,
            block_size,
            reserved: 0,
            allocated: 0,
            peak_allocated: 0,
            held: HashMap::new(),
        }
    }

    pub fn blocks_for(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.block_size as u64)
    }

    pub fn can_reserve(&self, blocks: u64) -> bool {
        self.reserved + blocks <= self.capacity
    }

    pub fn fits_ever(&self, blocks: u64) -> bool {
        blocks <= self.capacity
    }

    pub fn reserve(&mut self, req: usize, blocks: u64) {
        debug_assert!(self.can_reserve(blocks));
        self.reserved += blocks;
        self.held.entry(req).or_default().reserved += blocks;
    }

    /// Allocates up to `blocks` for `req`. Errors describe an invariant
    /// violation; the allocation is still applied so the run can continue.
    pub fn grow_to(&mut self, req: usize, blocks: u64) -> Result<(), String> {
        let hold = self.held.entry(req).or_default();
        if blocks <= hold.allocated {
            return Ok(());
        }
        let delta = blocks - hold.allocated;
        hold.allocated = blocks;
        let over_reservation = hold.allocated > hold.reserved;
        self.allocated += delta;
        self.peak_allocated = self.peak_allocated.max(self.allocated);
        if over_reservation {
            return Err(format!("request {req} allocated {blocks} blocks beyond its reservation"));
        }
        if self.allocated > self.capacity {
            return Err(format!(
                "allocated {} blocks exceeds capacity {}",
                self.allocated, self.capacity
            ));
        }
        Ok(())
    }

    pub fn release(&mut self, req: usize) {
        if let Some(h) = self.held.remove(&req) {
            self.reserved -= h.reserved;
            self.allocated -= h.allocated;
        }
    }

    pub fn free_blocks(&self) -> u64 {
        self.capacity.saturating_sub(self.reserved)
    }

    pub fn allocated(&self) -> u64 {
        self.allocated
    }

    pub fn peak_allocated(&self) -> u64 {
        self.peak_allocated
    }

    pub fn is_empty(&self) -> bool {
        self.held.is_empty() && self.reserved == 0 && self.allocated == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserve_grow_release() {
        let mut kv = KvLedger::new(10, 16);
        assert_eq!(kv.blocks_for(17), 2);
        kv.reserve(1, 6);
        assert!(kv.can_reserve(4));
        assert!(!kv.can_reserve(5));
        kv.grow_to(1, 3).unwrap();
        kv.grow_to(1, 2).unwrap();
        assert_eq!(kv.allocated(), 3);
        assert!(kv.grow_to(1, 7).is_err());
        kv.release(1);
        assert!(kv.is_empty());
        assert_eq!(kv.peak_allocated(), 7);
    }
}
