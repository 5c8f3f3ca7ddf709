//! Deterministic simulator of a tagged-memory machine with a hardened
//! allocator and byte-granular tripwire overflow detection.

pub mod allocator;
pub mod corpus;
pub mod cpu;
pub mod detector;
pub mod experiments;
pub mod isa;
pub mod memory;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod sim;
pub mod trace;
pub mod workload;

pub use cpu::Mode;
pub use detector::{check_access, BugKind, BugReport};
pub use isa::{Instruction, Program};
pub use memory::{TaggedMemory, TaggedPointer};
pub use sim::{run_program, Outcome, RunReport, SimConfig, SimError, Simulator};
pub use trace::{parse_program, ParseError};
