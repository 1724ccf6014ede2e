//! Best-fit local-memory allocator with address-ordered coalescing.

use std::collections::BTreeMap;

/// Words are 4 bytes; every block is word aligned.
pub const ALIGN: u64 = 4;

#[derive(Debug, Clone)]
pub struct Heap {
    size: u64,
    /// Free blocks keyed by start address.
    free: BTreeMap<u64, u64>,
    live: BTreeMap<u64, u64>,
    used: u64,
    high_water: u64,
}

impl Heap {
    pub fn new(size: u64) -> Self {
        let mut free = BTreeMap::new();
        if size > 0 {
            free.insert(0, size);
        }
        Heap { size, free, live: BTreeMap::new(), used: 0, high_water: 0 }
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    /// Largest number of bytes live at once.
    pub fn high_water(&self) -> u64 {
        self.high_water
    }

    /// Live blocks as `(addr, len)`.
    pub fn live_blocks(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.live.iter().map(|(&a, &l)| (a, l))
    }

    pub fn alloc(&mut self, len: u64) -> Option<u64> {
        let len = len.max(1).div_ceil(ALIGN) * ALIGN;
        let (&addr, &blk) = self.free.iter().filter(|(_, &l)| l >= len).min_by_key(|(&a, &l)| (l, a))?;
        self.free.remove(&addr);
        if blk > len {
            self.free.insert(addr + len, blk - len);
        }
        self.live.insert(addr, len);
        self.used += len;
        self.high_water = self.high_water.max(self.used);
        Some(addr)
    }

    /// Releases the block starting at `addr` and returns its length. Panics
    /// on a double free, which would be a scheduler bug.
    pub fn free(&mut self, addr: u64) -> u64 {
        let len = self.live.remove(&addr).expect("free of a block that is not live");
        self.used -= len;
        let (mut start, mut end) = (addr, addr + len);
        if let Some((&pa, &pl)) = self.free.range(..addr).next_back() {
            if pa + pl == addr {
                self.free.remove(&pa);
                start = pa;
            }
        }
        if let Some(nl) = self.free.remove(&end) {
            end += nl;
        }
        self.free.insert(start, end - start);
        len
    }

    /// Free bytes plus live bytes always equal the heap size.
    pub fn is_consistent(&self) -> bool {
        let free: u64 = self.free.values().sum();
        let mut blocks: Vec<(u64, u64)> = self.free.iter().chain(self.live.iter()).map(|(&a, &l)| (a, l)).collect();
        blocks.sort();
        free + self.used == self.size && blocks.windows(2).all(|w| w[0].0 + w[0].1 <= w[1].0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_fit_and_coalesce() {
        let mut h = Heap::new(64);
        let a = h.alloc(16).unwrap();
        let b = h.alloc(8).unwrap();
        let c = h.alloc(16).unwrap();
        assert_eq!((a, b, c), (0, 16, 24));
        h.free(b);
        // the 8-byte hole is the best fit for 6 bytes
        assert_eq!(h.alloc(6), Some(16));
        h.free(16);
        h.free(a);
        h.free(c);
        assert!(h.is_consistent());
        assert_eq!(h.alloc(64), Some(0));
        assert_eq!(h.high_water(), 64);
        assert_eq!(h.alloc(4), None);
    }
}
