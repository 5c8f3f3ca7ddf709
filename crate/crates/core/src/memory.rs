//! Tagged memory: sparse data bytes plus one 4-bit memory tag per 16-byte
//! granule, and the pointer representation that carries an address tag in
//! its top byte.

use std::collections::HashMap;
use std::fmt;

/// Bytes covered by a single memory tag.
pub const GRANULE_SIZE: u64 = 16;
/// Width of a memory tag in bits.
pub const TAG_BITS: u32 = 4;
/// Largest representable tag value.
pub const MAX_TAG: u8 = 15;

const TAG_SHIFT: u32 = 56;
const TOP_BYTE_MASK: u64 = 0xFF << TAG_SHIFT;
const HIGH_NIBBLE_MASK: u64 = 0xF0 << TAG_SHIFT;

/// Base address of the granule containing `addr`.
#[inline]
pub fn granule_base(addr: u64) -> u64 {
    addr & !(GRANULE_SIZE - 1)
}

/// Index of the granule containing `addr`.
#[inline]
pub fn granule_index(addr: u64) -> u64 {
    addr / GRANULE_SIZE
}

/// Fraction of physical storage consumed by tags for the given granule
/// geometry: `tag_bits / (granule_bytes * 8 + tag_bits)`.
pub fn tag_storage_overhead_for(granule_bytes: u64, tag_bits: u32) -> f64 {
    let tag_bits = tag_bits as f64;
    tag_bits / (granule_bytes as f64 * 8.0 + tag_bits)
}

/// A 64-bit pointer with a 4-bit address tag in bits [59:56].
///
/// Bits [63:60] must be zero for a well-formed pointer; the address used for
/// memory access ignores the whole top byte.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TaggedPointer(u64);

impl TaggedPointer {
    pub fn new(addr: u64, tag: u8) -> Self {
        debug_assert!(tag <= MAX_TAG);
        TaggedPointer((addr & !TOP_BYTE_MASK) | (u64::from(tag & MAX_TAG) << TAG_SHIFT))
    }

    pub const fn from_raw(raw: u64) -> Self {
        TaggedPointer(raw)
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    /// The address tag (low nibble of the top byte).
    pub const fn tag(self) -> u8 {
        ((self.0 >> TAG_SHIFT) & 0xF) as u8
    }

    /// The address with the top byte cleared.
    pub const fn address(self) -> u64 {
        self.0 & !TOP_BYTE_MASK
    }

    /// Whether bits [63:60] are clear.
    pub const fn is_canonical(self) -> bool {
        self.0 & HIGH_NIBBLE_MASK == 0
    }

    pub fn with_tag(self, tag: u8) -> Self {
        TaggedPointer::new(self.address(), tag)
    }
}

impl fmt::Debug for TaggedPointer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TaggedPointer({:#x}, tag={:#x})", self.address(), self.tag())
    }
}

impl From<u64> for TaggedPointer {
    fn from(raw: u64) -> Self {
        TaggedPointer(raw)
    }
}

/// Sparse byte store with per-granule memory tags. Untouched bytes read as 0
/// and untouched granules carry tag 0.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaggedMemory {
    data: HashMap<u64, u8>,
    tags: HashMap<u64, u8>,
}

impl TaggedMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets the memory tag of the granule containing `addr`.
    pub fn set_granule_tag(&mut self, addr: u64, tag: u8) {
        assert!(tag <= MAX_TAG, "memory tag {tag:#x} out of range");
        let idx = granule_index(addr);
        if tag == 0 {
            self.tags.remove(&idx);
        } else {
            self.tags.insert(idx, tag);
        }
    }

    /// Memory tag of the granule containing `addr`.
    pub fn get_granule_tag(&self, addr: u64) -> u8 {
        self.tags.get(&granule_index(addr)).copied().unwrap_or(0)
    }

    /// Tags every granule overlapping `[addr, addr + len)`.
    pub fn set_range_tag(&mut self, addr: u64, len: u64, tag: u8) {
        if len == 0 {
            return;
        }
        let mut g = granule_base(addr);
        let end = addr + len;
        while g < end {
            self.set_granule_tag(g, tag);
            g += GRANULE_SIZE;
        }
    }

    pub fn read_u8(&self, addr: u64) -> u8 {
        self.data.get(&addr).copied().unwrap_or(0)
    }

    pub fn write_u8(&mut self, addr: u64, value: u8) {
        if value == 0 {
            self.data.remove(&addr);
        } else {
            self.data.insert(addr, value);
        }
    }

    /// Unchecked read of `len` bytes; no tag check is performed.
    pub fn read_bytes(&self, addr: u64, len: usize) -> Vec<u8> {
        (0..len as u64).map(|i| self.read_u8(addr.wrapping_add(i))).collect()
    }

    /// Unchecked write; tags are unaffected.
    pub fn write_bytes(&mut self, addr: u64, bytes: &[u8]) {
        for (i, &b) in bytes.iter().enumerate() {
            self.write_u8(addr.wrapping_add(i as u64), b);
        }
    }

    /// Fraction of physical storage devoted to tags with 16-byte granules
    /// and 4-bit tags, i.e. 1/33.
    pub fn tag_storage_overhead() -> f64 {
        tag_storage_overhead_for(GRANULE_SIZE, TAG_BITS)
    }

    /// Addresses of all bytes currently holding a nonzero value, sorted.
    pub fn nonzero_bytes(&self) -> Vec<(u64, u8)> {
        let mut v: Vec<_> = self.data.iter().map(|(&a, &b)| (a, b)).collect();
        v.sort_unstable();
        v
    }

    /// Granules currently carrying a nonzero tag, as (granule base, tag), sorted.
    pub fn tagged_granules(&self) -> Vec<(u64, u8)> {
        let mut v: Vec<_> = self
            .tags
            .iter()
            .map(|(&idx, &t)| (idx * GRANULE_SIZE, t))
            .collect();
        v.sort_unstable();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tag_applies_to_whole_granule() {
        let mut m = TaggedMemory::new();
        m.set_granule_tag(0x1000, 0xA);
        assert_eq!(m.get_granule_tag(0x100F), 0xA);
        assert_eq!(m.get_granule_tag(0x1010), 0);

        m.set_granule_tag(0x1004, 0x3);
        assert_eq!(m.get_granule_tag(0x1000), 0x3);
    }

    #[test]
    fn default_tag_and_last_write_wins() {
        let mut m = TaggedMemory::new();
        assert_eq!(m.get_granule_tag(0xDEAD0), 0);
        m.set_granule_tag(0x20, 7);
        assert_eq!(m.get_granule_tag(0x20), 7);
        m.set_granule_tag(0x2F, 9);
        assert_eq!(m.get_granule_tag(0x20), 9);
    }

    #[test]
    fn raw_bytes() {
        let mut m = TaggedMemory::new();
        m.write_bytes(0x100, &[1, 2, 3]);
        assert_eq!(m.read_bytes(0x100, 3), vec![1, 2, 3]);
        assert_eq!(m.read_bytes(0x9999, 2), vec![0, 0]);
        m.write_bytes(0x10C, &[9, 8, 7, 6, 5, 4, 3, 2]);
        assert_eq!(m.read_bytes(0x10C, 8), vec![9, 8, 7, 6, 5, 4, 3, 2]);
        assert_eq!(m.get_granule_tag(0x110), 0);
    }

    #[test]
    fn overhead_constants() {
        assert!((TaggedMemory::tag_storage_overhead() - 1.0 / 33.0).abs() < 1e-15);
        assert!((tag_storage_overhead_for(1, 4) - 1.0 / 3.0).abs() < 1e-15);
        assert!((tag_storage_overhead_for(32, 4) - 4.0 / 260.0).abs() < 1e-15);
    }

    #[test]
    fn pointer_tag_bits() {
        let p = TaggedPointer::from_raw(0x0A00_0000_0000_1000);
        assert_eq!(p.tag(), 0xA);
        assert_eq!(p.address(), 0x1000);
        assert!(p.is_canonical());
        assert!(!TaggedPointer::from_raw(0x1A00_0000_0000_1000).is_canonical());
        assert_eq!(TaggedPointer::new(0x1000, 0xA), p);
    }

    #[derive(Debug, Clone)]
    enum MemOp {
        Tag(u64, u8),
        Write(u64, Vec<u8>),
    }

    fn mem_op() -> impl Strategy<Value = MemOp> {
        prop_oneof![
            (0u64..512, 0u8..16).prop_map(|(a, t)| MemOp::Tag(a, t)),
            (0u64..512, proptest::collection::vec(any::<u8>(), 0..24))
                .prop_map(|(a, b)| MemOp::Write(a, b)),
        ]
    }

    proptest! {
        #[test]
        fn tags_and_data_are_independent(ops in proptest::collection::vec(mem_op(), 0..64)) {
            let mut both = TaggedMemory::new();
            let mut tags_only = TaggedMemory::new();
            let mut data_only = TaggedMemory::new();
            for op in &ops {
                match op {
                    MemOp::Tag(a, t) => {
                        both.set_granule_tag(*a, *t);
                        tags_only.set_granule_tag(*a, *t);
                    }
                    MemOp::Write(a, b) => {
                        both.write_bytes(*a, b);
                        data_only.write_bytes(*a, b);
                    }
                }
            }
            prop_assert_eq!(both.tagged_granules(), tags_only.tagged_granules());
            prop_assert_eq!(both.nonzero_bytes(), data_only.nonzero_bytes());
        }

        #[test]
        fn granule_partition(a in any::<u64>(), t in 0u8..16, k in 0u64..16) {
            let mut m = TaggedMemory::new();
            m.set_granule_tag(a, t);
            let b = granule_base(a).wrapping_add(k);
            prop_assert_eq!(m.get_granule_tag(b), t);
            let once = m.clone();
            m.set_granule_tag(a, t);
            prop_assert_eq!(m, once);
        }
    }
}
