//! Command-line driver for the rewriting toolkit.
//!
//! Exit codes: 0 success, 1 stage or usage error, 2 validation failure.
//! `run` instead passes through the program's own exit code (low 8 bits).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use zar::analyses;
use zar::corpus::{self, SizeClass};
use zar::harness;
use zar::irdb::{self, store, FuncId, ProgramIR};
use zar::isa::Instr;
use zar::transforms::{self, TransformSpec};
use zar::vm::{self, Outcome};
use zar::zxe::Executable;

#[derive(Parser)]
#[command(name = "zar", version, about = "Static rewriting toolkit for ZAR-32 executables")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Decode a ZXE container into an instruction database file.
    Lift { input: PathBuf, output: PathBuf },
    /// Lift a container, apply transforms, and reconstitute it.
    Rewrite {
        input: PathBuf,
        output: PathBuf,
        /// Transform invocation `name[:key=value,...]`; repeatable, applied in order.
        #[arg(long = "transform")]
        transforms: Vec<String>,
        /// Seed stream for randomized transforms.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the address assigned to every instruction record.
        #[arg(long)]
        dump_placement: bool,
    },
    /// Execute a container; stdin feeds console reads, stdout receives writes.
    /// Exits with the program's exit code (low 8 bits).
    Run {
        input: PathBuf,
        #[arg(long, default_value_t = vm::DEFAULT_STEP_LIMIT)]
        step_limit: u64,
    },
    /// Print one analysis of a saved database as stable text.
    Analyze {
        input: PathBuf,
        which: Which,
        /// Function selector, e.g. `f0` (defaults to the entry function).
        function: Option<String>,
    },
    /// Generate seeded, convention-conforming test programs into a directory.
    ///
    /// Writes `<seed>.zxe`, `<seed>.in`, `<seed>.out`, and `<seed>.exit` per
    /// program and prints per-binary statistics as CSV.
    GenCorpus {
        dir: PathBuf,
        /// First seed; programs use seed, seed+1, ...
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: u32,
        /// Force one size class instead of the standard 80/15/5 mix.
        #[arg(long)]
        size: Option<Size>,
    },
    /// Differentially test rewrites over a freshly generated corpus and
    /// report pass rate, instruction overhead, and size growth.
    Harness {
        /// Transform invocation `name[:key=value,...]`; repeatable, applied in order.
        #[arg(long = "transform")]
        transforms: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corpus size (seeds 1..=count, standard class mix).
        #[arg(long, default_value_t = 500)]
        count: u32,
        #[arg(long, default_value_t = vm::DEFAULT_STEP_LIMIT)]
        step_limit: u64,
        /// Write the full per-program CSV report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Cfg,
    Dominators,
    Callgraph,
    Liveness,
    Loops,
}

#[derive(Clone, Copy, ValueEnum)]
enum Size {
    Small,
    Medium,
    Large,
}

impl Size {
    fn class(self) -> SizeClass {
        match self {
            Size::Small => SizeClass::Small,
            Size::Medium => SizeClass::Medium,
            Size::Large => SizeClass::Large,
        }
    }
}

/// A stage failure (exit 1) or validation failure (exit 2), with diagnostic.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn stage(message: impl Into<String>) -> Failure {
        Failure { code: 1, message: message.into() }
    }

    fn validation(message: impl Into<String>) -> Failure {
        Failure { code: 2, message: message.into() }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("zar: {}", f.message);
            f.code
        }
    };
    std::process::exit(code);
}

fn dispatch(cmd: Cmd) -> Result<i32, Failure> {
    match cmd {
        Cmd::Lift { input, output } => {
            let ir = lift_validated(&input)?;
            store::save_file(&ir, &output)
                .map_err(|e| Failure::stage(format!("{}: {e}", output.display())))?;
            Ok(0)
        }
        Cmd::Rewrite { input, output, transforms, seed, dump_placement } => {
            let mut ir = lift_validated(&input)?;
            let specs = parse_transforms(&transforms)?;
            transforms::apply_transforms(&mut ir, &specs, seed).map_err(|e| match e {
                transforms::TransformError::PostValidation { .. } => {
                    Failure::validation(e.to_string())
                }
                other => Failure::stage(other.to_string()),
            })?;
            let out = zar::backend::rewrite(&ir).map_err(|e| Failure::stage(e.to_string()))?;
            if dump_placement {
                print!("{}", out.placement.dump());
            }
            out.exe
                .save(&output)
                .map_err(|e| Failure::stage(format!("{}: {e}", output.display())))?;
            Ok(0)
        }
        Cmd::Run { input, step_limit } => {
            let exe = load_exe(&input)?;
            let mut input_bytes = Vec::new();
            std::io::stdin()
                .read_to_end(&mut input_bytes)
                .map_err(|e| Failure::stage(format!("stdin: {e}")))?;
            let result = vm::run_with_limit(&exe, &input_bytes, step_limit);
            std::io::stdout()
                .write_all(&result.output)
                .map_err(|e| Failure::stage(format!("stdout: {e}")))?;
            match result.outcome {
                Outcome::Exit(code) => Ok((code & 0xff) as i32),
                Outcome::Trap(t) => Err(Failure::stage(format!("program trapped: {t}"))),
                Outcome::StepLimit => {
                    Err(Failure::stage(format!("step limit of {step_limit} exceeded")))
                }
            }
        }
        Cmd::Analyze { input, which, function } => {
            let ir = store::load_file(&input)
                .map_err(|e| Failure::stage(format!("{}: {e}", input.display())))?;
            print!("{}", analyze(&ir, which, function.as_deref())?);
            Ok(0)
        }
        Cmd::GenCorpus { dir, seed, count, size } => {
            std::fs::create_dir_all(&dir)
                .map_err(|e| Failure::stage(format!("{}: {e}", dir.display())))?;
            print!("{}", gen_corpus(&dir, seed, count, size)?);
            Ok(0)
        }
        Cmd::Harness { transforms, seed, count, step_limit, report } => {
            let specs = parse_transforms(&transforms)?;
            let corpus = corpus::standard_corpus(count);
            let rep = harness::diff_harness(&corpus, &specs, seed, step_limit);
            if let Some(path) = report {
                std::fs::write(&path, rep.to_csv())
                    .map_err(|e| Failure::stage(format!("{}: {e}", path.display())))?;
            }
            println!(
                "programs={} transforms={} pass_rate={:.2}% median_overhead={:.4}% \
                 max_overhead={:.4}% median_expansion={:.4}",
                rep.rows.len(),
                rep.transforms,
                rep.pass_rate(),
                rep.median_overhead_pct(),
                rep.max_overhead_pct(),
                rep.median_expansion(),
            );
            for row in rep.failures() {
                println!("fail seed={} [{}]: {:?}", row.seed, row.class, row.status);
            }
            Ok(if rep.failures().is_empty() { 0 } else { 1 })
        }
    }
}

fn load_exe(path: &Path) -> Result<Executable, Failure> {
    Executable::load(path).map_err(|e| Failure::stage(format!("{}: {e}", path.display())))
}

fn lift_validated(path: &Path) -> Result<ProgramIR, Failure> {
    let exe = load_exe(path)?;
    let source = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let ir = zar::frontend::lift(&exe, &source)
        .map_err(|e| Failure::stage(format!("{}: {e}", path.display())))?;
    let violations = irdb::validate(&ir);
    if !violations.is_empty() {
        let mut msg = format!("{}: lifted database fails validation:", path.display());
        for v in violations {
            msg.push_str(&format!("\n  {v}"));
        }
        return Err(Failure::validation(msg));
    }
    Ok(ir)
}

fn parse_transforms(raw: &[String]) -> Result<Vec<TransformSpec>, Failure> {
    raw.iter().map(|s| transforms::parse_spec(s).map_err(|e| Failure::stage(e.to_string()))).collect()
}

/// Resolves `f3` / `3` / nothing (entry function) to a function id.
fn pick_function(ir: &ProgramIR, selector: Option<&str>) -> Result<FuncId, Failure> {
    match selector {
        None => ir
            .functions
            .values()
            .find(|f| Some(f.head) == ir.pins.get(&ir.entry_addr).copied())
            .or_else(|| ir.functions.values().next())
            .map(|f| f.id)
            .ok_or_else(|| Failure::stage("database has no functions")),
        Some(s) => {
            let digits = s.strip_prefix('f').unwrap_or(s);
            let id = digits
                .parse::<u64>()
                .map(FuncId)
                .map_err(|_| Failure::stage(format!("bad function selector `{s}`")))?;
            if ir.functions.contains_key(&id) {
                Ok(id)
            } else {
                Err(Failure::stage(format!(
                    "no function `{s}`; available: {}",
                    ir.functions.keys().map(|f| format!("f{f}")).collect::<Vec<_>>().join(" ")
                )))
            }
        }
    }
}

fn analyze(ir: &ProgramIR, which: Which, function: Option<&str>) -> Result<String, Failure> {
    let mut out = String::new();
    match which {
        Which::Callgraph => {
            let graph = analyses::call_graph(ir);
            for (caller, callees) in &graph.edges {
                let list =
                    callees.iter().map(|c| format!("f{c}")).collect::<Vec<_>>().join(" ");
                out.push_str(&format!("f{caller} -> {list}\n"));
            }
        }
        Which::Cfg => {
            let f = pick_function(ir, function)?;
            let cfg = analyses::build_cfg(ir, f);
            out.push_str(&format!("function f{f}: {} blocks, entry b{}\n", cfg.blocks.len(), cfg.entry.0));
            for b in &cfg.blocks {
                let succs = b
                    .succs
                    .iter()
                    .map(|(s, kind)| {
                        let k = match kind {
                            analyses::EdgeKind::Fallthrough => "fall",
                            analyses::EdgeKind::Taken => "taken",
                            analyses::EdgeKind::CallReturn => "ret",
                        };
                        format!("b{}[{k}]", s.0)
                    })
                    .collect::<Vec<_>>()
                    .join(" ");
                out.push_str(&format!("b{}: {} records -> {succs}\n", b.id.0, b.records.len()));
            }
        }
        Which::Dominators => {
            let f = pick_function(ir, function)?;
            let cfg = analyses::build_cfg(ir, f);
            let doms = analyses::dominators(&cfg);
            out.push_str(&format!("function f{f}: entry b{}\n", cfg.entry.0));
            for &b in &doms.rpo {
                if b == cfg.entry {
                    continue;
                }
                if let Some(idom) = doms.idom(b) {
                    out.push_str(&format!("idom(b{}) = b{}\n", b.0, idom.0));
                }
            }
            for b in &doms.unreachable {
                out.push_str(&format!("unreachable: b{}\n", b.0));
            }
        }
        Which::Liveness => {
            let f = pick_function(ir, function)?;
            out.push_str(&format!("function f{f}: dead registers before each record\n"));
            for (id, dead) in analyses::dead_before_map(ir, f) {
                if dead.is_empty() {
                    continue;
                }
                let regs = dead.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" ");
                out.push_str(&format!("record {id}: {regs}\n"));
            }
        }
        Which::Loops => {
            let f = pick_function(ir, function)?;
            let cfg = analyses::build_cfg(ir, f);
            let doms = analyses::dominators(&cfg);
            let headers = analyses::loop_headers(&cfg, &doms);
            if headers.is_empty() {
                out.push_str(&format!("function f{f}: no loop headers\n"));
            } else {
                let list = headers.iter().map(|b| format!("b{}", b.0)).collect::<Vec<_>>().join(" ");
                out.push_str(&format!("function f{f}: loop headers {list}\n"));
            }
        }
    }
    Ok(out)
}

fn gen_corpus(dir: &Path, seed: u64, count: u32, size: Option<Size>) -> Result<String, Failure> {
    let mut stats = String::from("seed,class,instructions,text_bytes,pins,indirect_sites\n");
    for s in seed..seed + count as u64 {
        let class = size.map(Size::class).unwrap_or_else(|| SizeClass::for_seed(s));
        let entry = corpus::generate(s, class);
        let write = |ext: &str, bytes: &[u8]| {
            let path = dir.join(format!("{s}.{ext}"));
            std::fs::write(&path, bytes)
                .map_err(|e| Failure::stage(format!("{}: {e}", path.display())))
        };
        write("zxe", &entry.exe.to_bytes())?;
        write("in", &entry.input)?;
        write("out", &entry.expected.output)?;
        let exit = match entry.expected.outcome {
            Outcome::Exit(c) => c,
            other => return Err(Failure::stage(format!("seed {s}: unexpected {other:?}"))),
        };
        write("exit", format!("{exit}\n").as_bytes())?;

        let ir = zar::frontend::lift(&entry.exe, "corpus")
            .map_err(|e| Failure::stage(format!("seed {s}: {e}")))?;
        let instructions =
            ir.records.values().filter(|r| r.original_address.is_some()).count();
        let indirect = ir
            .records
            .values()
            .filter(|r| matches!(r.instr, Instr::CallR { .. } | Instr::JmpR { .. }))
            .count();
        let text_bytes: usize = entry
            .exe
            .sections
            .iter()
            .filter(|sec| sec.kind == zar::zxe::SectionKind::Text)
            .map(|sec| sec.bytes.len())
            .sum();
        stats.push_str(&format!(
            "{s},{},{instructions},{text_bytes},{},{indirect}\n",
            class.label(),
            ir.pins.len(),
        ));
    }
    Ok(stats)
}
