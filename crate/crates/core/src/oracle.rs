//! Exact-bounds reference checker.
//!
//! Tracks which allocation each register points into and at what offset,
//! and flags every access or free that leaves its allocation's requested
//! bounds. It knows nothing about tags, granules or addresses, which makes it
//! an independent judge of the generated corpora.

use std::collections::HashMap;

use crate::isa::{Instruction, Offset, Program, NUM_REGS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    OutOfBounds,
    UseAfterFree,
    InvalidFree,
    DoubleFree,
    /// Access through a register that holds no pointer.
    WildAccess,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Violation {
    pub pc: usize,
    pub kind: ViolationKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Value {
    Data(i128),
    Ptr { id: usize, offset: i128 },
}

/// Runs the program over pointer provenance and returns every violation in
/// program order. Execution continues past violations.
pub fn check_bounds(program: &Program) -> Vec<Violation> {
    let mut regs = [Value::Data(0); NUM_REGS];
    // id -> (requested size, live)
    let mut allocs: HashMap<usize, (u64, bool)> = HashMap::new();
    let mut out = Vec::new();

    for (pc, ins) in program.instructions().iter().enumerate() {
        match *ins {
            Instruction::Load(m) | Instruction::Store(m) => {
                let extra = match m.offset {
                    Offset::Imm(i) => Value::Data(i128::from(i)),
                    Offset::Reg(r) => regs[r.index()],
                };
                let kind = match (regs[m.base.index()], extra) {
                    (Value::Ptr { id, offset }, Value::Data(d)) => {
                        let (size, live) = allocs[&id];
                        let start = offset + d;
                        let end = start + i128::from(m.size());
                        if !live {
                            Some(ViolationKind::UseAfterFree)
                        } else if start < 0 || end > i128::from(size) {
                            Some(ViolationKind::OutOfBounds)
                        } else {
                            None
                        }
                    }
                    // The pointer sits in the offset register; its distance from
                    // an integer base is not tracked, so any such access counts.
                    (Value::Data(_), Value::Ptr { id, .. }) => Some(if allocs[&id].1 {
                        ViolationKind::OutOfBounds
                    } else {
                        ViolationKind::UseAfterFree
                    }),
                    _ => Some(ViolationKind::WildAccess),
                };
                if let Some(kind) = kind {
                    out.push(Violation { pc, kind });
                }
                if matches!(ins, Instruction::Load(_)) {
                    for i in 0..usize::from(m.pair) {
                        regs[m.reg.index() + i] = Value::Data(0);
                    }
                }
            }
            Instruction::Mov { dst, imm } => regs[dst.index()] = Value::Data(i128::from(imm)),
            Instruction::Add { dst, src, imm } => {
                regs[dst.index()] = match regs[src.index()] {
                    Value::Ptr { id, offset } => Value::Ptr {
                        id,
                        offset: offset + i128::from(imm),
                    },
                    Value::Data(d) => Value::Data(d + i128::from(imm)),
                }
            }
            Instruction::Alloc { dst, size } => {
                let id = allocs.len();
                allocs.insert(id, (size.max(1), true));
                regs[dst.index()] = Value::Ptr { id, offset: 0 };
            }
            Instruction::Free { src } => match regs[src.index()] {
                Value::Ptr { id, offset: 0 } => {
                    let entry = allocs.get_mut(&id).expect("known allocation");
                    if entry.1 {
                        entry.1 = false;
                    } else {
                        out.push(Violation {
                            pc,
                            kind: ViolationKind::DoubleFree,
                        });
                    }
                }
                _ => out.push(Violation {
                    pc,
                    kind: ViolationKind::InvalidFree,
                }),
            },
            Instruction::Syscall | Instruction::Ret | Instruction::Halt => {}
        }
    }
    out
}
