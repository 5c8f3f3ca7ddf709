//! The trace instruction set and its canonical textual rendering.

use std::fmt;

use thiserror::Error;

/// Stack pointer register index.
pub const SP: u8 = 31;
pub const NUM_REGS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(u8);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("register r{0} out of range")]
pub struct BadRegister(pub u64);

impl Reg {
    pub fn new(index: u8) -> Result<Self, BadRegister> {
        if usize::from(index) < NUM_REGS {
            Ok(Reg(index))
        } else {
            Err(BadRegister(u64::from(index)))
        }
    }

    pub const fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Bytes per transferred register.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Width {
    B1,
    B2,
    B4,
    B8,
    B16,
}

impl Width {
    pub const ALL: [Width; 5] = [Width::B1, Width::B2, Width::B4, Width::B8, Width::B16];

    pub const fn bytes(self) -> u64 {
        match self {
            Width::B1 => 1,
            Width::B2 => 2,
            Width::B4 => 4,
            Width::B8 => 8,
            Width::B16 => 16,
        }
    }

    pub fn from_bytes(n: u64) -> Option<Width> {
        Width::ALL.into_iter().find(|w| w.bytes() == n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Offset {
    Imm(i64),
    Reg(Reg),
}

/// Operands of a load or store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MemAccess {
    /// Destination (load) or source (store); `pair == 2` also uses the next register.
    pub reg: Reg,
    pub base: Reg,
    pub offset: Offset,
    pub width: Width,
    pub pair: u8,
    pub atomic: bool,
    pub overread_ok: bool,
}

impl MemAccess {
    pub fn size(&self) -> u64 {
        self.width.bytes() * u64::from(self.pair)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Instruction {
    Load(MemAccess),
    Store(MemAccess),
    Mov { dst: Reg, imm: i64 },
    Add { dst: Reg, src: Reg, imm: i64 },
    Alloc { dst: Reg, size: u64 },
    Free { src: Reg },
    Syscall,
    Ret,
    Halt,
}

impl Instruction {
    pub fn mem_access(&self) -> Option<(&MemAccess, bool)> {
        match self {
            Instruction::Load(m) => Some((m, false)),
            Instruction::Store(m) => Some((m, true)),
            _ => None,
        }
    }

    /// Whether a trap may be planted on this slot.
    pub fn trappable(&self) -> bool {
        !matches!(self, Instruction::Ret | Instruction::Halt)
    }
}

fn fmt_mem(f: &mut fmt::Formatter<'_>, op: &str, m: &MemAccess) -> fmt::Result {
    write!(f, "{op} {} [{}, ", m.reg, m.base)?;
    match m.offset {
        Offset::Imm(i) => write!(f, "#{i}")?,
        Offset::Reg(r) => write!(f, "{r}")?,
    }
    write!(f, "] w{} p{}", m.width.bytes(), m.pair)?;
    if m.atomic {
        f.write_str(" atomic")?;
    }
    if m.overread_ok {
        f.write_str(" overread_ok")?;
    }
    Ok(())
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instruction::Load(m) => fmt_mem(f, "ld", m),
            Instruction::Store(m) => fmt_mem(f, "st", m),
            Instruction::Mov { dst, imm } => write!(f, "mov {dst} {imm}"),
            Instruction::Add { dst, src, imm } => write!(f, "add {dst} {src} {imm}"),
            Instruction::Alloc { dst, size } => write!(f, "alloc {dst} {size}"),
            Instruction::Free { src } => write!(f, "free {src}"),
            Instruction::Syscall => f.write_str("syscall"),
            Instruction::Ret => f.write_str("ret"),
            Instruction::Halt => f.write_str("halt"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProgramError {
    #[error("program is empty")]
    Empty,
    #[error("program must end with halt")]
    MissingHalt,
    #[error("instruction {index}: register pair starting at {reg} runs past r31")]
    PairOutOfRange { index: usize, reg: Reg },
}

/// A validated trace program. The last instruction is always `halt`.
#[derive(Clone, Debug)]
pub struct Program {
    instructions: Vec<Instruction>,
    source_lines: Vec<usize>,
}

impl PartialEq for Program {
    fn eq(&self, other: &Self) -> bool {
        self.instructions == other.instructions
    }
}

impl Eq for Program {}

impl Program {
    pub fn new(instructions: Vec<Instruction>) -> Result<Self, ProgramError> {
        let lines = (1..=instructions.len()).collect();
        Self::with_lines(instructions, lines)
    }

    pub(crate) fn with_lines(instructions: Vec<Instruction>, source_lines: Vec<usize>) -> Result<Self, ProgramError> {
        match instructions.last() {
            None => return Err(ProgramError::Empty),
            Some(Instruction::Halt) => {}
            Some(_) => return Err(ProgramError::MissingHalt),
        }
        for (index, ins) in instructions.iter().enumerate() {
            if let Some((m, _)) = ins.mem_access() {
                if m.pair == 2 && m.reg.index() + 1 >= NUM_REGS {
                    return Err(ProgramError::PairOutOfRange { index, reg: m.reg });
                }
            }
        }
        Ok(Program {
            instructions,
            source_lines,
        })
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    pub fn get(&self, pc: usize) -> Option<&Instruction> {
        self.instructions.get(pc)
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// 1-based source line of instruction `pc`.
    pub fn source_line(&self, pc: usize) -> Option<usize> {
        self.source_lines.get(pc).copied()
    }

    /// Canonical text, one instruction per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for ins in &self.instructions {
            out.push_str(&ins.to_string());
            out.push('\n');
        }
        out
    }
}
