//! Runs a program on one machine with its own memory, allocator and
//! detector, and summarizes the run.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::allocator::{AllocError, Allocator, AllocatorConfig, FreeVerdict, DEFAULT_HEAP_SIZE, DEFAULT_LARGE_THRESHOLD};
use crate::cpu::{decode, execute_load, execute_store, tag_check, AsyncFault, MachineState, Mode};
use crate::detector::{
    classify, make_bug_report, make_free_report, Action, BugReport, Detector, DetectorConfig, DetectorError,
    FaultContext, Mutation, TrapAction, DEFAULT_ACCESS_THRESHOLD,
};
use crate::isa::{Instruction, Program, NUM_REGS};
use crate::memory::{TaggedMemory, TaggedPointer};
use crate::sampler::{SamplerConfig, DEFAULT_ALLOC_THRESHOLD, DEFAULT_SAMPLING_RATE};

/// Effective configuration of a run. Serialized verbatim into run reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SimConfig {
    pub mode: Mode,
    pub seed: u64,
    pub tripwires: bool,
    pub alloc_threshold: u64,
    pub sampling_rate: u64,
    pub access_threshold: u16,
    pub overread_skip: bool,
    pub odd_even: bool,
    pub large_threshold: u64,
    pub allow_zero_tag: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mutation: Option<Mutation>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            mode: Mode::Sync,
            seed: 0,
            tripwires: true,
            alloc_threshold: DEFAULT_ALLOC_THRESHOLD,
            sampling_rate: DEFAULT_SAMPLING_RATE,
            access_threshold: DEFAULT_ACCESS_THRESHOLD,
            overread_skip: false,
            odd_even: true,
            large_threshold: DEFAULT_LARGE_THRESHOLD,
            allow_zero_tag: false,
            mutation: None,
        }
    }
}

impl SimConfig {
    /// Tripwires need precise faults, so they only exist in sync mode.
    pub fn tripwires_active(&self) -> bool {
        self.tripwires && self.mode == Mode::Sync
    }

    pub fn allocator_config(&self) -> AllocatorConfig {
        AllocatorConfig {
            large_threshold: self.large_threshold,
            odd_even: self.odd_even,
            tripwires: self.tripwires_active(),
            allow_zero_tag: self.allow_zero_tag,
            heap_size: DEFAULT_HEAP_SIZE,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            alloc_threshold: self.alloc_threshold,
            sampling_rate: self.sampling_rate,
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            access_threshold: self.access_threshold,
            tripwires_enabled: self.tripwires_active(),
            overread_skip: self.overread_skip,
            mutation: self.mutation,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub instructions_executed: u64,
    pub faults_delivered: u64,
    pub traps_delivered: u64,
    pub tripwires_armed: u64,
    pub tripwires_removed_by_threshold: u64,
    pub tripwires_removed_by_ret_edge: u64,
    pub allocations: u64,
    pub frees: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Outcome {
    CleanHalt,
    BugReported,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub outcome: Outcome,
    pub bug: Option<BugReport>,
    pub counters: Counters,
    pub config: SimConfig,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        match self.outcome {
            Outcome::CleanHalt => 0,
            Outcome::BugReported => 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run report serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    Halted,
    BugReported(Box<BugReport>),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("instruction {pc}: pointer {raw:#018x} has nonzero bits [63:60]")]
    NonCanonicalAddress { pc: usize, raw: u64 },
    #[error("program counter {0} is outside the program")]
    PcOutOfRange(usize),
    #[error("instruction {pc}: {source}")]
    Alloc { pc: usize, source: AllocError },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("instruction {pc}: access still faults after the handler resumed it")]
    UnresolvedFault { pc: usize },
}

/// One executed load or store, used to compare runs instruction by instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemEffect {
    pub pc: usize,
    pub addr: u64,
    pub is_store: bool,
    pub bytes: Vec<u8>,
}

#[derive(Debug)]
pub struct Simulator {
    program: Program,
    config: SimConfig,
    machine: MachineState,
    mem: TaggedMemory,
    alloc: Allocator,
    detector: Detector,
    counters: Counters,
    effects: Option<Vec<MemEffect>>,
    written: BTreeSet<u64>,
    finished: Option<StepOutcome>,
}

impl Simulator {
    pub fn new(program: Program, config: SimConfig) -> Self {
        Simulator {
            program,
            machine: MachineState::new(config.mode),
            mem: TaggedMemory::new(),
            alloc: Allocator::new(config.allocator_config(), config.sampler_config(), config.seed),
            detector: Detector::new(config.detector_config()),
            counters: Counters::default(),
            effects: None,
            written: BTreeSet::new(),
            finished: None,
            config,
        }
    }

    /// Keep a log of every executed memory access.
    pub fn record_effects(mut self) -> Self {
        self.effects = Some(Vec::new());
        self
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn machine(&self) -> &MachineState {
        &self.machine
    }

    pub fn memory(&self) -> &TaggedMemory {
        &self.mem
    }

    pub fn allocator(&self) -> &Allocator {
        &self.alloc
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn effects(&self) -> &[MemEffect] {
        self.effects.as_deref().unwrap_or(&[])
    }

    /// Addresses written by program stores.
    pub fn written_addresses(&self) -> &BTreeSet<u64> {
        &self.written
    }

    pub fn counters(&self) -> Counters {
        let a = self.alloc.stats();
        let d = self.detector.stats();
        Counters {
            tripwires_armed: a.tripwires_armed,
            allocations: a.allocations,
            frees: a.frees,
            tripwires_removed_by_threshold: d.removed_by_threshold,
            tripwires_removed_by_ret_edge: d.removed_by_ret_edge,
            ..self.counters
        }
    }

    fn finish(&mut self, outcome: StepOutcome) -> StepOutcome {
        self.finished = Some(outcome.clone());
        outcome
    }

    fn drain_async(&mut self, pc: usize) -> Option<StepOutcome> {
        let pending = self.machine.pending_async.pop_front()?;
        let AsyncFault { mut fault, memtag, metadata } = pending;
        let ctx = FaultContext { memtag, metadata };
        let kind = classify(&fault, ctx, &self.alloc);
        fault.pc = pc;
        fault.regs = self.machine.regs;
        let report = make_bug_report(&fault, ctx, kind);
        Some(self.finish(StepOutcome::BugReported(Box::new(report))))
    }

    /// Executes one instruction slot.
    pub fn step(&mut self) -> Result<StepOutcome, SimError> {
        if let Some(done) = &self.finished {
            return Ok(done.clone());
        }
        let pc = self.machine.pc;
        let ins = *self.program.get(pc).ok_or(SimError::PcOutOfRange(pc))?;

        if self.machine.has_trap(pc) {
            self.counters.traps_delivered += 1;
            let action = self.detector.handle_trap(pc, &mut self.mem, &mut self.alloc, &mut self.machine)?;
            if action == TrapAction::Skip {
                self.machine.pc += 1;
                return Ok(StepOutcome::Continue);
            }
        }

        self.counters.instructions_executed += 1;
        let regs = &mut self.machine.regs;
        match ins {
            Instruction::Load(m) | Instruction::Store(m) => {
                let is_store = matches!(ins, Instruction::Store(_));
                let desc = decode(&m, is_store, regs, pc);
                if !desc.canonical {
                    let raw = TaggedPointer::new(desc.start, desc.addrtag).raw();
                    return Err(SimError::NonCanonicalAddress { pc, raw });
                }
                if self.config.mode != Mode::Off {
                    let mut resumed = 0;
                    while let Some(fault) = tag_check(&desc, &self.mem, &self.machine.regs) {
                        self.counters.faults_delivered += 1;
                        if self.config.mode == Mode::Async {
                            let ctx = FaultContext::read(&self.mem, fault.fault_address);
                            self.machine.pending_async.push_back(AsyncFault {
                                fault,
                                memtag: ctx.memtag,
                                metadata: ctx.metadata,
                            });
                            break;
                        }
                        match self.detector.handle_tag_mismatch(
                            &fault,
                            &mut self.mem,
                            &mut self.alloc,
                            &mut self.machine,
                            &self.program,
                        )? {
                            Action::Report(r) => return Ok(self.finish(StepOutcome::BugReported(r))),
                            Action::Resume => {}
                        }
                        resumed += 1;
                        if resumed > 2 {
                            return Err(SimError::UnresolvedFault { pc });
                        }
                    }
                }
                let regs = &mut self.machine.regs;
                let bytes = if is_store {
                    let bytes = execute_store(&mut self.mem, &m, &desc, regs);
                    self.written.extend((0..bytes.len() as u64).map(|i| desc.start.wrapping_add(i)));
                    bytes
                } else {
                    execute_load(&self.mem, &m, &desc, regs);
                    Vec::new()
                };
                if let Some(log) = &mut self.effects {
                    let bytes = if is_store {
                        bytes
                    } else {
                        self.mem.read_bytes(desc.start, desc.size as usize)
                    };
                    log.push(MemEffect {
                        pc,
                        addr: desc.start,
                        is_store,
                        bytes,
                    });
                }
            }
            Instruction::Mov { dst, imm } => regs[dst.index()] = imm as u64,
            Instruction::Add { dst, src, imm } => regs[dst.index()] = regs[src.index()].wrapping_add(imm as u64),
            Instruction::Alloc { dst, size } => {
                regs[dst.index()] = match self.alloc.allocate(&mut self.mem, size) {
                    Ok(p) => p.raw(),
                    Err(AllocError::OutOfMemory { .. }) => 0,
                    Err(source) => return Err(SimError::Alloc { pc, source }),
                };
            }
            Instruction::Free { src } => {
                let ptr = TaggedPointer::from_raw(regs[src.index()]);
                if let FreeVerdict::MismatchBug(m) = self.alloc.free(&mut self.mem, ptr) {
                    let report = make_free_report(pc, &m, &self.machine.regs);
                    return Ok(self.finish(StepOutcome::BugReported(Box::new(report))));
                }
            }
            Instruction::Syscall => {
                if let Some(done) = self.drain_async(pc) {
                    return Ok(done);
                }
            }
            Instruction::Ret => {}
            Instruction::Halt => {
                if let Some(done) = self.drain_async(pc) {
                    return Ok(done);
                }
                return Ok(self.finish(StepOutcome::Halted));
            }
        }
        self.machine.pc += 1;
        Ok(StepOutcome::Continue)
    }

    /// Runs until the program halts or a bug is reported.
    pub fn run_to_end(&mut self) -> Result<StepOutcome, SimError> {
        loop {
            match self.step()? {
                StepOutcome::Continue => continue,
                done => return Ok(done),
            }
        }
    }

    pub fn report(&self) -> RunReport {
        let (outcome, bug) = match &self.finished {
            Some(StepOutcome::BugReported(r)) => (Outcome::BugReported, Some((**r).clone())),
            _ => (Outcome::CleanHalt, None),
        };
        RunReport {
            outcome,
            bug,
            counters: self.counters(),
            config: self.config,
        }
    }

    pub fn final_registers(&self) -> [u64; NUM_REGS] {
        self.machine.regs
    }
}

/// Runs `program` to completion under `config`.
pub fn run_program(program: &Program, config: SimConfig) -> Result<RunReport, SimError> {
    let mut sim = Simulator::new(program.clone(), config);
    sim.run_to_end()?;
    Ok(sim.report())
}
