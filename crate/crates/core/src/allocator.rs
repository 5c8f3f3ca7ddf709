//! Primary-style tagging allocator.
//!
//! Allocations are carved from a bump region in 16-byte size classes and
//! recycled through a FIFO per class. Each allocation gets a random nonzero
//! tag; adjacent allocations get tags of opposite parity. Allocations whose
//! size is not a multiple of the granule own a *short granule*, which the
//! sampler may turn into a tripwire: its memory tag becomes the number of
//! addressable bytes and the real tag moves into the low nibble of the
//! granule's last byte.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::memory::{granule_base, TaggedMemory, TaggedPointer, GRANULE_SIZE, MAX_TAG};
use crate::rng::{substream, SimRng, ALLOCATOR_STREAM, SAMPLER_STREAM};
use crate::sampler::{SamplerConfig, TripwireSampler};

pub const DEFAULT_LARGE_THRESHOLD: u64 = 65536;
pub const HEAP_BASE: u64 = 0x1000_0000;
pub const DEFAULT_HEAP_SIZE: u64 = 1 << 32;
pub const LARGE_BASE: u64 = 0x40_0000_0000;
pub const LARGE_REGION_SIZE: u64 = 1 << 36;

/// Usable size for a request: the smallest multiple of 16 that holds it.
/// A zero-byte request gets the minimum class.
pub fn size_class(requested: u64) -> u64 {
    requested.max(1).div_ceil(GRANULE_SIZE) * GRANULE_SIZE
}

/// A set of 4-bit tags as a 16-bit mask.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TagSet(u16);

impl TagSet {
    pub const EMPTY: TagSet = TagSet(0);
    pub const ALL: TagSet = TagSet(0xFFFF);

    pub fn insert(&mut self, tag: u8) {
        self.0 |= 1 << (tag & MAX_TAG);
    }

    pub fn with(mut self, tag: u8) -> Self {
        self.insert(tag);
        self
    }

    pub fn contains(self, tag: u8) -> bool {
        self.0 & (1 << (tag & MAX_TAG)) != 0
    }

    pub fn len(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: TagSet) -> TagSet {
        TagSet(self.0 | other.0)
    }

    /// Every tag whose parity equals `parity_of`'s.
    pub fn same_parity_as(parity_of: u8) -> TagSet {
        let odd = parity_of & 1 == 1;
        TagSet(if odd { 0xAAAA } else { 0x5555 })
    }
}

impl FromIterator<u8> for TagSet {
    fn from_iter<I: IntoIterator<Item = u8>>(iter: I) -> Self {
        let mut s = TagSet::EMPTY;
        for t in iter {
            s.insert(t);
        }
        s
    }
}

impl fmt::Debug for TagSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set()
            .entries((0..=MAX_TAG).filter(|&t| self.contains(t)))
            .finish()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AllocError {
    #[error("out of simulated address space allocating {requested} bytes")]
    OutOfMemory { requested: u64 },
    #[error("no tag left to choose from (excluded: {excluded:?})")]
    TagSpaceExhausted { excluded: TagSet },
}

/// Draws a tag uniformly from the tags not in `exclude`. Tag 0 is always
/// excluded unless `allow_zero` is set.
pub fn generate_tag<R: Rng + ?Sized>(
    exclude: TagSet,
    allow_zero: bool,
    rng: &mut R,
) -> Result<u8, AllocError> {
    let exclude = if allow_zero { exclude } else { exclude.with(0) };
    let candidates: Vec<u8> = (0..=MAX_TAG).filter(|&t| !exclude.contains(t)).collect();
    if candidates.is_empty() {
        return Err(AllocError::TagSpaceExhausted { excluded: exclude });
    }
    Ok(candidates[rng.gen_range(0..candidates.len())])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AllocatorConfig {
    pub large_threshold: u64,
    pub odd_even: bool,
    pub tripwires: bool,
    /// Admit tag 0 for tagged allocations (16-tag space). Experiment use only.
    pub allow_zero_tag: bool,
    pub heap_size: u64,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        AllocatorConfig {
            large_threshold: DEFAULT_LARGE_THRESHOLD,
            odd_even: true,
            tripwires: true,
            allow_zero_tag: false,
            heap_size: DEFAULT_HEAP_SIZE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AllocState {
    Live,
    Freed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TripwireState {
    None,
    Armed,
    Delegated,
    Removed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AllocationRecord {
    pub id: u64,
    pub base: u64,
    pub requested_size: u64,
    pub usable_size: u64,
    pub tag: u8,
    pub state: AllocState,
    pub tripwire: TripwireState,
    pub large: bool,
}

impl AllocationRecord {
    pub fn end(&self) -> u64 {
        self.base + self.usable_size
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }

    /// Base address of the short granule, if the allocation has one.
    pub fn short_granule(&self) -> Option<u64> {
        (!self.requested_size.is_multiple_of(GRANULE_SIZE)).then(|| granule_base(self.base + self.requested_size))
    }

    /// Addressable bytes in the short granule (0 when there is none).
    pub fn short_granule_len(&self) -> u8 {
        (self.requested_size % GRANULE_SIZE) as u8
    }

    pub fn pointer(&self) -> TaggedPointer {
        TaggedPointer::new(self.base, self.tag)
    }
}

/// In-band tripwire metadata stored in a short granule's padding bytes.
///
/// Layout: byte 15 = `access_count[3:0] << 4 | real_tag`; when the padding is
/// at least two bytes, byte 14 holds `access_count[11:4]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShortGranuleMetadata {
    pub real_tag: u8,
    pub access_count: u16,
    pub capacity: u16,
}

pub const METADATA_BYTE: u64 = 15;
pub const COUNTER_HIGH_BYTE: u64 = 14;

impl ShortGranuleMetadata {
    /// Counter capacity for a short granule with `addressable` bytes.
    pub fn capacity_for(addressable: u8) -> u16 {
        if 16 - u16::from(addressable) >= 2 {
            4095
        } else {
            15
        }
    }

    pub fn read(mem: &TaggedMemory, granule: u64, addressable: u8) -> Self {
        let last = mem.read_u8(granule + METADATA_BYTE);
        let capacity = Self::capacity_for(addressable);
        let mut count = u16::from(last >> 4);
        if capacity > 15 {
            count |= u16::from(mem.read_u8(granule + COUNTER_HIGH_BYTE)) << 4;
        }
        ShortGranuleMetadata {
            real_tag: last & 0xF,
            access_count: count,
            capacity,
        }
    }

    pub fn write(&self, mem: &mut TaggedMemory, granule: u64) {
        debug_assert!(self.access_count <= self.capacity);
        let low = (self.access_count & 0xF) as u8;
        mem.write_u8(granule + METADATA_BYTE, (low << 4) | (self.real_tag & 0xF));
        if self.capacity > 15 {
            mem.write_u8(granule + COUNTER_HIGH_BYTE, (self.access_count >> 4) as u8);
        }
    }

    /// Zeroes the real-tag nibble and the counter bits.
    pub fn clear(mem: &mut TaggedMemory, granule: u64, addressable: u8) {
        mem.write_u8(granule + METADATA_BYTE, 0);
        if Self::capacity_for(addressable) > 15 {
            mem.write_u8(granule + COUNTER_HIGH_BYTE, 0);
        }
    }
}

/// Reconstructs an armed tripwire purely from in-band state: returns
/// `(real_tag, access_count, addressable_bytes)` when the granule's memory
/// tag and metadata nibble look like an armed tripwire.
pub fn read_tripwire_in_band(mem: &TaggedMemory, granule: u64) -> Option<(u8, u16, u8)> {
    let memtag = mem.get_granule_tag(granule);
    let meta = ShortGranuleMetadata::read(mem, granule, memtag);
    (memtag != 0 && meta.real_tag != 0 && meta.real_tag != memtag)
        .then_some((meta.real_tag, meta.access_count, memtag))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MismatchReason {
    /// The address is not the base of any allocation.
    NotAllocated,
    /// The allocation exists but is already freed.
    AlreadyFreed,
    /// Live allocation, but the pointer carries a different tag.
    TagMismatch,
}

/// Inputs for a bug report raised by an invalid free.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreeMismatch {
    pub ptr: TaggedPointer,
    pub memtag: u8,
    pub reason: MismatchReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreeVerdict {
    Ok,
    MismatchBug(FreeMismatch),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReallocError {
    #[error("invalid reallocation of {:#x}", .0.ptr.raw())]
    Mismatch(FreeMismatch),
    #[error(transparent)]
    Alloc(#[from] AllocError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AllocatorStats {
    pub allocations: u64,
    pub frees: u64,
    pub tripwires_armed: u64,
}

#[derive(Debug)]
pub struct Allocator {
    config: AllocatorConfig,
    sampler: TripwireSampler,
    tag_rng: SimRng,
    sampler_rng: SimRng,
    regions: BTreeMap<u64, AllocationRecord>,
    free_lists: HashMap<u64, VecDeque<u64>>,
    next_primary: u64,
    next_large: u64,
    next_id: u64,
    stats: AllocatorStats,
}

impl Allocator {
    pub fn new(config: AllocatorConfig, sampler: SamplerConfig, seed: u64) -> Self {
        Allocator {
            config,
            sampler: TripwireSampler::new(sampler),
            tag_rng: substream(seed, ALLOCATOR_STREAM),
            sampler_rng: substream(seed, SAMPLER_STREAM),
            regions: BTreeMap::new(),
            free_lists: HashMap::new(),
            next_primary: HEAP_BASE,
            next_large: LARGE_BASE,
            next_id: 1,
            stats: AllocatorStats::default(),
        }
    }

    pub fn config(&self) -> &AllocatorConfig {
        &self.config
    }

    pub fn sampler(&self) -> &TripwireSampler {
        &self.sampler
    }

    pub fn stats(&self) -> AllocatorStats {
        self.stats
    }

    pub fn records(&self) -> impl Iterator<Item = &AllocationRecord> {
        self.regions.values()
    }

    pub fn live(&self) -> impl Iterator<Item = &AllocationRecord> {
        self.regions.values().filter(|r| r.state == AllocState::Live)
    }

    pub fn record_at(&self, base: u64) -> Option<&AllocationRecord> {
        self.regions.get(&base)
    }

    /// The region (live or freed) whose usable range contains `addr`.
    pub fn find_containing(&self, addr: u64) -> Option<&AllocationRecord> {
        self.regions
            .range(..=addr)
            .next_back()
            .map(|(_, r)| r)
            .filter(|r| r.contains(addr))
    }

    /// The live allocation whose short granule starts at `granule`.
    pub fn find_by_short_granule(&self, granule: u64) -> Option<&AllocationRecord> {
        self.find_containing(granule)
            .filter(|r| r.state == AllocState::Live && r.short_granule() == Some(granule))
    }

    pub fn is_live_tag(&self, tag: u8) -> bool {
        self.live().any(|r| r.tag == tag)
    }

    pub fn set_tripwire_state(&mut self, base: u64, state: TripwireState) {
        if let Some(r) = self.regions.get_mut(&base) {
            r.tripwire = state;
        }
    }

    fn live_neighbors(&self, base: u64, usable: u64) -> (Option<u8>, Option<u8>) {
        let left = self
            .regions
            .range(..base)
            .next_back()
            .map(|(_, r)| r)
            .filter(|r| r.end() == base && r.state == AllocState::Live && !r.large)
            .map(|r| r.tag);
        let right = self
            .regions
            .get(&(base + usable))
            .filter(|r| r.state == AllocState::Live && !r.large)
            .map(|r| r.tag);
        (left, right)
    }

    fn fresh_tag(&mut self, base: u64, usable: u64, short_len: u8) -> Result<u8, AllocError> {
        let mut exclude = TagSet::EMPTY;
        if self.config.odd_even {
            let (left, right) = self.live_neighbors(base, usable);
            if let Some(l) = left {
                exclude = exclude.with(l).union(TagSet::same_parity_as(l));
            }
            if let Some(r) = right {
                exclude.insert(r);
            }
        }
        // A tripwire tag equal to the real tag would never fault.
        if short_len != 0 {
            exclude.insert(short_len);
        }
        generate_tag(exclude, self.config.allow_zero_tag, &mut self.tag_rng)
    }

    /// Allocates `requested` bytes and returns the tagged pointer.
    pub fn allocate(&mut self, mem: &mut TaggedMemory, requested: u64) -> Result<TaggedPointer, AllocError> {
        let requested = requested.max(1);
        let usable = size_class(requested);
        if requested > self.config.large_threshold {
            return self.allocate_large(requested, usable);
        }
        let short_len = (requested % GRANULE_SIZE) as u8;

        let (base, tag, reused) = match self.free_lists.get_mut(&usable).and_then(VecDeque::pop_front) {
            Some(base) => (base, self.regions[&base].tag, true),
            None => {
                let base = self.next_primary;
                if base + usable > HEAP_BASE + self.config.heap_size {
                    return Err(AllocError::OutOfMemory { requested });
                }
                let tag = self.fresh_tag(base, usable, short_len)?;
                self.next_primary += usable;
                (base, tag, false)
            }
        };
        if !reused {
            mem.set_range_tag(base, usable, tag);
        }

        let mut tripwire = TripwireState::None;
        if short_len != 0 {
            let granule = granule_base(base + requested);
            for off in u64::from(short_len)..GRANULE_SIZE {
                mem.write_u8(granule + off, 0);
            }
            if self.config.tripwires && self.sampler.should_arm(&mut self.sampler_rng) {
                // Reused regions keep their free-time tag; when it collides
                // with the tripwire tag the granule stays a plain granule.
                if tag != short_len && tag != 0 {
                    mem.set_granule_tag(granule, short_len);
                    ShortGranuleMetadata {
                        real_tag: tag,
                        access_count: 0,
                        capacity: ShortGranuleMetadata::capacity_for(short_len),
                    }
                    .write(mem, granule);
                    tripwire = TripwireState::Armed;
                    self.stats.tripwires_armed += 1;
                }
            }
        }

        let id = self.next_id;
        self.next_id += 1;
        self.regions.insert(
            base,
            AllocationRecord {
                id,
                base,
                requested_size: requested,
                usable_size: usable,
                tag,
                state: AllocState::Live,
                tripwire,
                large: false,
            },
        );
        self.stats.allocations += 1;
        Ok(TaggedPointer::new(base, tag))
    }

    fn allocate_large(&mut self, requested: u64, usable: u64) -> Result<TaggedPointer, AllocError> {
        let base = self.next_large;
        if base + usable > LARGE_BASE + LARGE_REGION_SIZE {
            return Err(AllocError::OutOfMemory { requested });
        }
        self.next_large += usable;
        let id = self.next_id;
        self.next_id += 1;
        self.regions.insert(
            base,
            AllocationRecord {
                id,
                base,
                requested_size: requested,
                usable_size: usable,
                tag: 0,
                state: AllocState::Live,
                tripwire: TripwireState::None,
                large: true,
            },
        );
        self.stats.allocations += 1;
        Ok(TaggedPointer::new(base, 0))
    }

    fn validate(&self, mem: &TaggedMemory, ptr: TaggedPointer) -> Result<u64, FreeMismatch> {
        let addr = ptr.address();
        let mismatch = |reason| FreeMismatch {
            ptr,
            memtag: mem.get_granule_tag(addr),
            reason,
        };
        match self.regions.get(&addr) {
            None => Err(mismatch(MismatchReason::NotAllocated)),
            Some(r) if r.state == AllocState::Freed => Err(mismatch(MismatchReason::AlreadyFreed)),
            Some(r) if r.tag != ptr.tag() || !ptr.is_canonical() => Err(mismatch(MismatchReason::TagMismatch)),
            Some(_) => Ok(addr),
        }
    }

    /// Frees `ptr`. Misuse is reported as a verdict, never as an error.
    pub fn free(&mut self, mem: &mut TaggedMemory, ptr: TaggedPointer) -> FreeVerdict {
        let base = match self.validate(mem, ptr) {
            Ok(b) => b,
            Err(m) => return FreeVerdict::MismatchBug(m),
        };
        let rec = self.regions[&base].clone();
        self.stats.frees += 1;
        if rec.large {
            let r = self.regions.get_mut(&base).expect("validated");
            r.state = AllocState::Freed;
            return FreeVerdict::Ok;
        }
        if let Some(granule) = rec.short_granule() {
            ShortGranuleMetadata::clear(mem, granule, rec.short_granule_len());
        }
        let new_tag = generate_tag(TagSet::EMPTY.with(rec.tag), self.config.allow_zero_tag, &mut self.tag_rng)
            .expect("at least 14 tags remain");
        mem.set_range_tag(base, rec.usable_size, new_tag);
        let r = self.regions.get_mut(&base).expect("validated");
        r.state = AllocState::Freed;
        r.tag = new_tag;
        r.tripwire = TripwireState::None;
        self.free_lists.entry(rec.usable_size).or_default().push_back(base);
        FreeVerdict::Ok
    }

    /// Moves a live allocation to a fresh region of `new_size` bytes.
    pub fn reallocate(
        &mut self,
        mem: &mut TaggedMemory,
        ptr: TaggedPointer,
        new_size: u64,
    ) -> Result<TaggedPointer, ReallocError> {
        let base = self.validate(mem, ptr).map_err(ReallocError::Mismatch)?;
        let old_requested = self.regions[&base].requested_size;
        let new_ptr = self.allocate(mem, new_size)?;
        let keep = old_requested.min(new_size.max(1)) as usize;
        let bytes = mem.read_bytes(base, keep);
        mem.write_bytes(new_ptr.address(), &bytes);
        match self.free(mem, ptr) {
            FreeVerdict::Ok => Ok(new_ptr),
            FreeVerdict::MismatchBug(m) => Err(ReallocError::Mismatch(m)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    fn armed() -> Allocator {
        Allocator::new(AllocatorConfig::default(), SamplerConfig::always_arm(), 42)
    }

    #[test]
    fn size_classes() {
        assert_eq!(size_class(40), 48);
        assert_eq!(size_class(16), 16);
        assert_eq!(size_class(1), 16);
        assert_eq!(size_class(0), 16);
        assert_eq!(size_class(65536), 65536);
    }

    #[test]
    fn tag_generation_respects_exclusions() {
        let mut rng = substream(3, "t");
        let forced: TagSet = (1..=14).collect();
        for _ in 0..100 {
            assert_eq!(generate_tag(forced, false, &mut rng).unwrap(), 15);
            assert_ne!(generate_tag(TagSet::EMPTY, false, &mut rng).unwrap(), 0);
        }
        let all_nonzero: TagSet = (1..=15).collect();
        assert!(matches!(
            generate_tag(all_nonzero, false, &mut rng),
            Err(AllocError::TagSpaceExhausted { .. })
        ));
        assert_eq!(generate_tag(all_nonzero, true, &mut rng).unwrap(), 0);
    }

    #[test]
    fn tag_generation_is_uniform() {
        // Chi-square with 14 degrees of freedom; the 0.99 quantile is 29.14.
        let mut rng = substream(11, "chi");
        let mut counts = [0u32; 16];
        let n = 15_000;
        for _ in 0..n {
            counts[generate_tag(TagSet::EMPTY, false, &mut rng).unwrap() as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        let expected = n as f64 / 15.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 29.14, "chi-square {chi2}");
    }

    #[test]
    fn armed_short_granule_layout() {
        let mut mem = TaggedMemory::new();
        let mut a = armed();
        let p = a.allocate(&mut mem, 40).unwrap();
        let t = p.tag();
        let base = p.address();
        assert_eq!(mem.get_granule_tag(base), t);
        assert_eq!(mem.get_granule_tag(base + 16), t);
        assert_eq!(mem.get_granule_tag(base + 32), 8);
        assert_eq!(mem.read_u8(base + 47) & 0xF, t);
        assert_ne!(t, 8);
        assert_eq!(a.record_at(base).unwrap().tripwire, TripwireState::Armed);
    }

    #[test]
    fn granule_multiple_never_consults_sampler() {
        let mut mem = TaggedMemory::new();
        let mut a = armed();
        let p = a.allocate(&mut mem, 32).unwrap();
        assert_eq!(a.sampler().alloc_count(), 0);
        assert_eq!(mem.get_granule_tag(p.address()), p.tag());
        assert_eq!(mem.get_granule_tag(p.address() + 16), p.tag());
        assert_eq!(a.record_at(p.address()).unwrap().tripwire, TripwireState::None);
    }

    #[test]
    fn unarmed_short_granule_is_plainly_tagged() {
        let mut mem = TaggedMemory::new();
        let cfg = AllocatorConfig { tripwires: false, ..Default::default() };
        let mut a = Allocator::new(cfg, SamplerConfig::always_arm(), 1);
        let p = a.allocate(&mut mem, 40).unwrap();
        assert_eq!(mem.get_granule_tag(p.address() + 32), p.tag());
        assert_eq!(mem.read_bytes(p.address() + 40, 8), vec![0; 8]);
    }

    #[test]
    fn adjacent_allocations_alternate_parity() {
        let mut mem = TaggedMemory::new();
        let mut a = armed();
        let ptrs: Vec<_> = (0..200).map(|i| a.allocate(&mut mem, 8 + i % 50).unwrap()).collect();
        for w in ptrs.windows(2) {
            assert_ne!(w[0].tag() & 1, w[1].tag() & 1);
        }
    }

    #[test]
    fn double_free_is_a_mismatch() {
        let mut mem = TaggedMemory::new();
        let mut a = armed();
        let p = a.allocate(&mut mem, 24).unwrap();
        assert_eq!(a.free(&mut mem, p), FreeVerdict::Ok);
        match a.free(&mut mem, p) {
            FreeVerdict::MismatchBug(m) => assert_eq!(m.reason, MismatchReason::AlreadyFreed),
            v => panic!("{v:?}"),
        }
        let wild = TaggedPointer::new(0x1234_5670, 3);
        assert!(matches!(a.free(&mut mem, wild), FreeVerdict::MismatchBug(_)));
    }

    #[test]
    fn free_retags_and_clears_metadata() {
        let mut mem = TaggedMemory::new();
        let mut a = armed();
        let p = a.allocate(&mut mem, 40).unwrap();
        let base = p.address();
        assert_eq!(a.free(&mut mem, p), FreeVerdict::Ok);
        for g in 0..3 {
            let t = mem.get_granule_tag(base + 16 * g);
            assert_ne!(t, p.tag());
            assert_ne!(t, 0);
        }
        assert_eq!(mem.read_u8(base + 47), 0);
    }

    #[test]
    fn reuse_serves_free_time_tag() {
        let mut mem = TaggedMemory::new();
        let mut a = armed();
        let p = a.allocate(&mut mem, 32).unwrap();
        a.free(&mut mem, p);
        let free_tag = mem.get_granule_tag(p.address());
        let q = a.allocate(&mut mem, 32).unwrap();
        assert_eq!(q.address(), p.address());
        assert_eq!(q.tag(), free_tag);
    }

    #[test]
    fn realloc_shrinks_and_preserves_prefix() {
        let mut mem = TaggedMemory::new();
        let mut a = armed();
        let p = a.allocate(&mut mem, 40).unwrap();
        let data: Vec<u8> = (1..=40).collect();
        mem.write_bytes(p.address(), &data);
        let q = a.reallocate(&mut mem, p, 24).unwrap();
        assert_eq!(mem.read_bytes(q.address(), 24), data[..24].to_vec());
        assert_eq!(mem.get_granule_tag(q.address() + 16), 8);
        assert_eq!(mem.read_u8(q.address() + 31) & 0xF, q.tag());
        assert_eq!(mem.read_u8(p.address() + 47), 0);
        assert_eq!(a.record_at(p.address()).unwrap().state, AllocState::Freed);

        let r = a.allocate(&mut mem, 16).unwrap();
        mem.write_bytes(r.address(), &[7; 16]);
        let s = a.reallocate(&mut mem, r, 16).unwrap();
        assert_eq!(mem.read_bytes(s.address(), 16), vec![7; 16]);

        assert!(matches!(a.reallocate(&mut mem, p, 8), Err(ReallocError::Mismatch(_))));
    }

    #[test]
    fn metadata_reconstructs_without_registry() {
        let mut mem = TaggedMemory::new();
        let mut a = armed();
        let p = a.allocate(&mut mem, 21).unwrap();
        let granule = p.address() + 16;
        drop(a);
        assert_eq!(read_tripwire_in_band(&mem, granule), Some((p.tag(), 0, 5)));
    }

    #[test]
    fn counter_layouts() {
        let mut mem = TaggedMemory::new();
        let m = ShortGranuleMetadata { real_tag: 0xA, access_count: 0xABC, capacity: 4095 };
        m.write(&mut mem, 0x100);
        assert_eq!(mem.read_u8(0x10F), 0xCA);
        assert_eq!(mem.read_u8(0x10E), 0xAB);
        assert_eq!(ShortGranuleMetadata::read(&mem, 0x100, 8), m);
        assert_eq!(ShortGranuleMetadata::capacity_for(15), 15);
        assert_eq!(ShortGranuleMetadata::capacity_for(14), 4095);
        ShortGranuleMetadata::clear(&mut mem, 0x100, 8);
        assert_eq!(mem.read_bytes(0x10E, 2), vec![0, 0]);
    }

    #[test]
    fn large_allocations_are_untagged() {
        let mut mem = TaggedMemory::new();
        let mut a = armed();
        let p = a.allocate(&mut mem, 100_000).unwrap();
        assert_eq!(p.tag(), 0);
        assert_eq!(mem.get_granule_tag(p.address()), 0);
        assert_eq!(a.free(&mut mem, p), FreeVerdict::Ok);
    }

    #[test]
    fn out_of_memory() {
        let mut mem = TaggedMemory::new();
        let cfg = AllocatorConfig { heap_size: 64, ..Default::default() };
        let mut a = Allocator::new(cfg, SamplerConfig::default(), 0);
        a.allocate(&mut mem, 64).unwrap();
        assert_eq!(a.allocate(&mut mem, 1), Err(AllocError::OutOfMemory { requested: 1 }));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Alloc(u64),
        Free(usize),
    }

    fn ops() -> impl Strategy<Value = Vec<Op>> {
        proptest::collection::vec(
            prop_oneof![(1u64..100).prop_map(Op::Alloc), any::<usize>().prop_map(Op::Free)],
            1..80,
        )
    }

    proptest! {
        #[test]
        fn allocator_invariants_hold(seed in any::<u64>(), ops in ops()) {
            let mut mem = TaggedMemory::new();
            let mut a = Allocator::new(AllocatorConfig::default(), SamplerConfig { alloc_threshold: 5, sampling_rate: 2 }, seed);
            let mut live: Vec<TaggedPointer> = Vec::new();
            for op in ops {
                match op {
                    Op::Alloc(n) => live.push(a.allocate(&mut mem, n).unwrap()),
                    Op::Free(i) if !live.is_empty() => {
                        let p = live.swap_remove(i % live.len());
                        let old = p.tag();
                        let rec = a.record_at(p.address()).unwrap().clone();
                        prop_assert_eq!(a.free(&mut mem, p), FreeVerdict::Ok);
                        for g in (rec.base..rec.end()).step_by(16) {
                            prop_assert_ne!(mem.get_granule_tag(g), old);
                        }
                    }
                    Op::Free(_) => {}
                }
                let mut recs: Vec<&AllocationRecord> = a.live().collect();
                recs.sort_by_key(|r| r.base);
                for w in recs.windows(2) {
                    prop_assert!(w[0].end() <= w[1].base);
                }
                for r in &recs {
                    prop_assert!(r.tag != 0);
                    prop_assert_eq!(r.base % 16, 0);
                    prop_assert_eq!(r.usable_size % 16, 0);
                    prop_assert!(r.usable_size >= r.requested_size);
                    let short = r.short_granule();
                    for g in (r.base..r.end()).step_by(16) {
                        let t = mem.get_granule_tag(g);
                        if r.tripwire == TripwireState::Armed && Some(g) == short {
                            prop_assert_eq!(t, r.short_granule_len());
                            prop_assert_eq!(mem.read_u8(g + 15) & 0xF, r.tag);
                        } else {
                            prop_assert_eq!(t, r.tag);
                        }
                    }
                    if r.tripwire != TripwireState::None {
                        prop_assert!(r.requested_size % 16 != 0);
                    }
                }
            }
        }

        #[test]
        fn fresh_neighbors_have_opposite_parity(seed in any::<u64>(), sizes in proptest::collection::vec(1u64..200, 2..40)) {
            let mut mem = TaggedMemory::new();
            let mut a = Allocator::new(AllocatorConfig::default(), SamplerConfig::default(), seed);
            let ptrs: Vec<_> = sizes.iter().map(|&s| a.allocate(&mut mem, s).unwrap()).collect();
            for w in ptrs.windows(2) {
                prop_assert_ne!(w[0].tag() & 1, w[1].tag() & 1);
            }
        }
    }
}
