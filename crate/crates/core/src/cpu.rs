//! Register machine state, access decoding and hardware tag checks.

use std::collections::{BTreeSet, VecDeque};

use serde::Serialize;
use thiserror::Error;

use crate::isa::{MemAccess, Offset, Program, NUM_REGS};
use crate::memory::{granule_base, TaggedMemory, TaggedPointer, GRANULE_SIZE};

/// Tag-check mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Off,
    Async,
    #[default]
    Sync,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(Mode::Off),
            "async" => Ok(Mode::Async),
            "sync" => Ok(Mode::Sync),
            _ => Err(format!("unknown mode `{s}` (expected off, async or sync)")),
        }
    }
}

/// A decoded memory access.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessDescriptor {
    /// Untagged start address.
    pub start: u64,
    pub size: u64,
    pub addrtag: u8,
    pub pc: usize,
    pub is_store: bool,
    pub atomic: bool,
    pub overread_ok: bool,
    /// Bits [63:60] of the effective address are clear.
    pub canonical: bool,
}

impl AccessDescriptor {
    pub fn end(&self) -> u64 {
        self.start.wrapping_add(self.size)
    }
}

/// Computes the access described by a load/store against the register file.
///
/// The effective address is the 64-bit sum of the base register and the
/// offset, so a register offset contributes its own top byte to the tag.
pub fn decode(access: &MemAccess, is_store: bool, regs: &[u64; NUM_REGS], pc: usize) -> AccessDescriptor {
    let base = regs[access.base.index()];
    let offset = match access.offset {
        Offset::Imm(i) => i as u64,
        Offset::Reg(r) => regs[r.index()],
    };
    let ptr = TaggedPointer::from_raw(base.wrapping_add(offset));
    AccessDescriptor {
        start: ptr.address(),
        size: access.size(),
        addrtag: ptr.tag(),
        pc,
        is_store,
        atomic: access.atomic,
        overread_ok: access.overread_ok,
        canonical: ptr.is_canonical(),
    }
}

/// A precise tag-check fault.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fault {
    pub pc: usize,
    /// Lowest accessed address inside the first mismatching granule.
    pub fault_address: u64,
    pub regs: [u64; NUM_REGS],
    pub access: AccessDescriptor,
}

/// Walks the granules covered by the access in ascending order and returns
/// the fault address at the first granule whose tag differs from the
/// address tag.
pub fn first_mismatch(desc: &AccessDescriptor, mem: &TaggedMemory) -> Option<u64> {
    if desc.size == 0 {
        return None;
    }
    let last = desc.start.wrapping_add(desc.size - 1);
    let mut g = granule_base(desc.start);
    loop {
        if mem.get_granule_tag(g) != desc.addrtag {
            return Some(g.max(desc.start));
        }
        if g >= granule_base(last) {
            return None;
        }
        g += GRANULE_SIZE;
    }
}

pub fn tag_check(desc: &AccessDescriptor, mem: &TaggedMemory, regs: &[u64; NUM_REGS]) -> Option<Fault> {
    first_mismatch(desc, mem).map(|fault_address| Fault {
        pc: desc.pc,
        fault_address,
        regs: *regs,
        access: *desc,
    })
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("no trap can be planted at instruction {pc}")]
pub struct TrapUnavailable {
    pub pc: usize,
}

#[derive(Clone, Debug)]
pub struct MachineState {
    pub regs: [u64; NUM_REGS],
    pub pc: usize,
    pub mode: Mode,
    traps: BTreeSet<usize>,
    pub(crate) pending_async: VecDeque<AsyncFault>,
}

/// A fault recorded in asynchronous mode, with the granule state captured
/// when it happened.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AsyncFault {
    pub fault: Fault,
    pub memtag: u8,
    pub metadata: u8,
}

impl MachineState {
    pub fn new(mode: Mode) -> Self {
        MachineState {
            regs: [0; NUM_REGS],
            pc: 0,
            mode,
            traps: BTreeSet::new(),
            pending_async: VecDeque::new(),
        }
    }

    /// Plants a trap that fires before instruction `pc` executes. Slots
    /// holding `ret` or `halt`, or past the end, cannot hold a trap.
    pub fn set_trap(&mut self, program: &Program, pc: usize) -> Result<(), TrapUnavailable> {
        match program.get(pc) {
            Some(ins) if ins.trappable() => {
                self.traps.insert(pc);
                Ok(())
            }
            _ => Err(TrapUnavailable { pc }),
        }
    }

    pub fn clear_trap(&mut self, pc: usize) {
        self.traps.remove(&pc);
    }

    pub fn has_trap(&self, pc: usize) -> bool {
        self.traps.contains(&pc)
    }

    pub fn trap_count(&self) -> usize {
        self.traps.len()
    }

    pub fn pending_async_faults(&self) -> usize {
        self.pending_async.len()
    }
}

/// Reads `pair` consecutive registers' worth of `width` bytes each; a
/// register receives the low eight bytes of its slot.
pub(crate) fn execute_load(mem: &TaggedMemory, access: &MemAccess, desc: &AccessDescriptor, regs: &mut [u64; NUM_REGS]) {
    let width = access.width.bytes();
    for i in 0..u64::from(access.pair) {
        let bytes = mem.read_bytes(desc.start.wrapping_add(i * width), width as usize);
        let mut buf = [0u8; 8];
        let n = bytes.len().min(8);
        buf[..n].copy_from_slice(&bytes[..n]);
        regs[access.reg.index() + i as usize] = u64::from_le_bytes(buf);
    }
}

/// Stores each register little-endian, zero-extended to `width` bytes.
pub(crate) fn execute_store(mem: &mut TaggedMemory, access: &MemAccess, desc: &AccessDescriptor, regs: &[u64; NUM_REGS]) -> Vec<u8> {
    let width = access.width.bytes() as usize;
    let mut written = Vec::with_capacity(width * usize::from(access.pair));
    for i in 0..usize::from(access.pair) {
        let value = regs[access.reg.index() + i].to_le_bytes();
        let mut slot = vec![0u8; width];
        let n = width.min(8);
        slot[..n].copy_from_slice(&value[..n]);
        written.extend_from_slice(&slot);
    }
    mem.write_bytes(desc.start, &written);
    written
}
