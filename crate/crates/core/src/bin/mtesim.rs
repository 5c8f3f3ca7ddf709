use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mtesim::allocator::TagSet;
use mtesim::corpus::{read_corpus, write_corpus};
use mtesim::experiments::{
    exp_arm_frequency, exp_collision_rate, exp_detection_rate, exp_recovery_transparency, exp_vulnerable_fraction,
    CollisionSetup,
};
use mtesim::memory::{tag_storage_overhead_for, GRANULE_SIZE, TAG_BITS};
use mtesim::sampler::{DEFAULT_ALLOC_THRESHOLD, DEFAULT_SAMPLING_RATE};
use mtesim::workload::{
    default_size_distribution, generate_workload, parse_size_distribution, uniform_sizes, SizeWeight, WorkloadKind,
    WorkloadSpec, DEFAULT_PREAMBLE,
};
use mtesim::{parse_program, Mode, SimConfig, Simulator};

#[derive(Parser)]
#[command(name = "mtesim", version, about = "Tagged-memory machine simulator with tripwire overflow detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a trace program and print the run report as JSON.
    Run(RunArgs),
    /// Generate a corpus of trace programs.
    Gen(GenArgs),
    /// Run a statistical experiment and print the result as JSON.
    #[command(subcommand)]
    Exp(ExpCommand),
}

#[derive(Args, Clone)]
struct SimArgs {
    #[arg(long, default_value = "sync")]
    mode: Mode,
    #[arg(long, default_value_t = DEFAULT_SAMPLING_RATE, value_parser = clap::value_parser!(u64).range(1..))]
    sampling_rate: u64,
    #[arg(long, default_value_t = DEFAULT_ALLOC_THRESHOLD)]
    alloc_threshold: u64,
    /// Arm every short granule (never leave slow start).
    #[arg(long, conflicts_with = "alloc_threshold")]
    always_arm: bool,
    #[arg(long, default_value_t = mtesim::detector::DEFAULT_ACCESS_THRESHOLD, value_parser = clap::value_parser!(u16).range(1..))]
    access_threshold: u16,
    #[arg(long, env = "MTESIM_SEED", default_value_t = 0)]
    seed: u64,
    /// Plain tag checks only.
    #[arg(long)]
    no_tripwires: bool,
    /// Let accesses marked overread_ok read past the addressable bytes.
    #[arg(long)]
    overread_skip: bool,
    #[arg(long)]
    no_odd_even: bool,
    /// Admit tag 0 for tagged allocations.
    #[arg(long)]
    allow_zero_tag: bool,
}

impl SimArgs {
    fn config(&self) -> SimConfig {
        SimConfig {
            mode: self.mode,
            seed: self.seed,
            tripwires: !self.no_tripwires,
            alloc_threshold: if self.always_arm { u64::MAX } else { self.alloc_threshold },
            sampling_rate: self.sampling_rate,
            access_threshold: self.access_threshold,
            overread_skip: self.overread_skip,
            odd_even: !self.no_odd_even,
            allow_zero_tag: self.allow_zero_tag,
            ..SimConfig::default()
        }
    }
}

#[derive(Args)]
struct RunArgs {
    trace: PathBuf,
    #[command(flatten)]
    sim: SimArgs,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Debug)]
struct Sizes(Vec<SizeWeight>);

fn parse_sizes_arg(text: &str) -> Result<Sizes, String> {
    parse_size_distribution(text).map(Sizes)
}

#[derive(Args, Clone)]
struct WorkloadArgs {
    #[arg(long)]
    kind: WorkloadKind,
    /// Size distribution as size:weight pairs, e.g. 24:1,40:1.
    #[arg(long, value_parser = parse_sizes_arg)]
    sizes: Option<Sizes>,
    #[arg(long, default_value_t = DEFAULT_PREAMBLE)]
    preamble: usize,
    /// Allocations between attacker and victim in cross-granule overflows.
    #[arg(long, default_value_t = 0)]
    gap: usize,
    /// Allocate/free cycles before a use-after-free access.
    #[arg(long, default_value_t = 0)]
    reuse_cycles: usize,
}

impl WorkloadArgs {
    fn spec(&self, count: usize, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            preamble: self.preamble,
            gap_allocations: self.gap,
            reuse_cycles: self.reuse_cycles,
            ..WorkloadSpec::new(self.kind, self.sizes.clone().map_or_else(default_size_distribution, |s| s.0), count, seed)
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, env = "MTESIM_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "corpus")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ExpCommand {
    /// Detection rate over generated single-bug programs.
    Detection {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, default_value_t = 1000)]
        trials: u64,
    },
    /// Fraction of drawn sizes that leave a short granule.
    VulnerableFraction {
        /// Defaults to uniform over 1..=256.
        #[arg(long, value_parser = parse_sizes_arg)]
        sizes: Option<Sizes>,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, env = "MTESIM_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Collision rate of independently drawn tags.
    Collision {
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, env = "MTESIM_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        allow_zero_tag: bool,
        /// Comma-separated tags to exclude.
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<u8>,
    },
    /// Compare benign runs with tag checks off and with every tripwire armed.
    Transparency {
        /// Corpus directory; generates benign programs when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_parser = parse_sizes_arg)]
        sizes: Option<Sizes>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, env = "MTESIM_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Post-slow-start tripwire arm frequency.
    ArmFrequency {
        #[arg(long, default_value_t = DEFAULT_SAMPLING_RATE, value_parser = clap::value_parser!(u64).range(1..))]
        sampling_rate: u64,
        #[arg(long, default_value_t = 100_000)]
        allocations: u64,
        #[arg(long, env = "MTESIM_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Tag storage overhead.
    Overhead {
        #[arg(long, default_value_t = GRANULE_SIZE)]
        granule: u64,
    },
}

fn fail(message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(2)
}

fn emit(text: &str) {
    // A closed pipe (e.g. `| head`) is not worth a panic.
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json<T: serde::Serialize>(value: &T) {
    emit(&format!("{}\n", serde_json::to_string_pretty(value).expect("serializable")));
}

fn cmd_run(args: &RunArgs) -> ExitCode {
    let text = match fs::read_to_string(&args.trace) {
        Ok(t) => t,
        Err(e) => return fail(format!("{}: {e}", args.trace.display())),
    };
    let program = match parse_program(&text) {
        Ok(p) => p,
        Err(e) => return fail(format!("{}: {e}", args.trace.display())),
    };
    let mut sim = Simulator::new(program, args.sim.config());
    if let Err(e) = sim.run_to_end() {
        return fail(format!("{}: {e}", args.trace.display()));
    }
    let report = sim.report();
    let mut json = report.to_json();
    json.push('\n');
    match &args.report {
        Some(path) => {
            if let Err(e) = fs::write(path, json) {
                return fail(format!("{}: {e}", path.display()));
            }
        }
        None => emit(&json),
    }
    ExitCode::from(report.exit_code() as u8)
}

fn cmd_gen(args: &GenArgs) -> ExitCode {
    let spec = args.workload.spec(args.count, args.seed);
    match write_corpus(&spec, &args.out) {
        Ok(dir) => {
            eprintln!("wrote {} programs to {}", spec.count, dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn load_or_generate(corpus: Option<&Path>, sizes: Option<Sizes>, trials: usize, seed: u64) -> Result<Vec<mtesim::Program>, String> {
    match corpus {
        Some(dir) => Ok(read_corpus(dir).map_err(|e| e.to_string())?.into_iter().map(|(_, p)| p).collect()),
        None if trials == 0 => Ok(Vec::new()),
        None => {
            let spec = WorkloadSpec::new(WorkloadKind::Benign, sizes.map_or_else(default_size_distribution, |s| s.0), trials, seed);
            generate_workload(&spec).map_err(|e| e.to_string())
        }
    }
}

fn cmd_exp(cmd: ExpCommand) -> ExitCode {
    match cmd {
        ExpCommand::Detection { workload, sim, trials } => {
            let spec = workload.spec(trials as usize, sim.seed);
            match exp_detection_rate(&spec, &sim.config(), trials, sim.seed) {
                Ok(r) => print_json(&r),
                Err(e) => return fail(e),
            }
        }
        ExpCommand::VulnerableFraction { sizes, trials, seed } => {
            let sizes = sizes.map_or_else(|| uniform_sizes(1, 256), |s| s.0);
            match exp_vulnerable_fraction(&sizes, trials, seed) {
                Ok(r) => print_json(&r),
                Err(e) => return fail(e),
            }
        }
        ExpCommand::Collision {
            trials,
            seed,
            allow_zero_tag,
            exclude,
        } => {
            if let Some(t) = exclude.iter().find(|&&t| t > 15) {
                return fail(format!("tag {t} out of range"));
            }
            let setup = CollisionSetup {
                allow_zero_tag,
                exclude: exclude.into_iter().collect::<TagSet>(),
            };
            match exp_collision_rate(setup, trials, seed) {
                Ok(r) => print_json(&r),
                Err(e) => return fail(e),
            }
        }
        ExpCommand::Transparency {
            corpus,
            sizes,
            trials,
            seed,
        } => {
            let programs = match load_or_generate(corpus.as_deref(), sizes, trials, seed) {
                Ok(p) => p,
                Err(e) => return fail(e),
            };
            let r = exp_recovery_transparency(&programs, &SimConfig::default(), seed);
            if let Some(w) = &r.warning {
                eprintln!("warning: {w}");
            }
            print_json(&r);
            if !r.passed {
                return ExitCode::from(1);
            }
        }
        ExpCommand::ArmFrequency {
            sampling_rate,
            allocations,
            seed,
        } => {
            print_json(&exp_arm_frequency(sampling_rate, allocations, seed));
        }
        ExpCommand::Overhead { granule } => {
            if granule == 0 {
                return fail("granule size must be at least 1");
            }
            print_json(&serde_json::json!({
                "granule_bytes": granule,
                "tag_bits": TAG_BITS,
                "tag_storage_overhead": tag_storage_overhead_for(granule, TAG_BITS),
            }));
        }
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Gen(args) => cmd_gen(&args),
        Command::Exp(cmd) => cmd_exp(cmd),
    }
}
