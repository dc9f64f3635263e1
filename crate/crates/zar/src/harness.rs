//! Differential testing and overhead measurement over a corpus.
//!
//! For each program the harness lifts, transforms, reconstitutes, and runs
//! the rewritten binary on the program's recorded input, comparing console
//! output and exit code against the untouched binary's recorded run. Nothing
//! here panics on a misbehaving program — every failure becomes a report row.
//!
//! The CSV rendering is byte-stable for fixed inputs. Columns:
//!
//! ```text
//! seed,class,transforms,status,orig_steps,new_steps,overhead_pct,orig_text_bytes,new_text_bytes,expansion
//! ```
//!
//! * `transforms` — `;`-joined transform invocations, or `none`.
//! * `status` — `pass`, `output-diff`, or `error:<stage>`.
//! * `overhead_pct` — executed-instruction growth in percent, 4 decimals.
//! * `expansion` — rewritten text bytes over original text bytes, 4 decimals.

use crate::corpus::CorpusEntry;
use crate::transforms::{self, TransformSpec};
use crate::vm;
use crate::zxe::{Executable, SectionKind};

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Status {
    Pass,
    /// Ran to completion but console output or exit code differed.
    OutputDiff,
    /// The pipeline itself failed; the payload names the stage.
    Error(String),
}

impl Status {
    fn label(&self) -> String {
        match self {
            Status::Pass => "pass".into(),
            Status::OutputDiff => "output-diff".into(),
            Status::Error(stage) => format!("error:{stage}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Row {
    pub seed: u64,
    pub class: &'static str,
    pub status: Status,
    pub orig_steps: u64,
    pub new_steps: u64,
    pub orig_text: usize,
    pub new_text: usize,
}

impl Row {
    /// Executed-instruction growth in percent.
    pub fn overhead_pct(&self) -> f64 {
        (self.new_steps as f64 - self.orig_steps as f64) / self.orig_steps as f64 * 100.0
    }

    pub fn expansion(&self) -> f64 {
        self.new_text as f64 / self.orig_text as f64
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub transforms: String,
    pub rows: Vec<Row>,
}

impl Report {
    pub fn pass_rate(&self) -> f64 {
        let passed = self.rows.iter().filter(|r| r.status == Status::Pass).count();
        passed as f64 / self.rows.len() as f64 * 100.0
    }

    /// Median executed-instruction overhead across passing rows.
    pub fn median_overhead_pct(&self) -> f64 {
        median(self.passing().map(Row::overhead_pct))
    }

    pub fn max_overhead_pct(&self) -> f64 {
        self.passing().map(Row::overhead_pct).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn median_expansion(&self) -> f64 {
        median(self.passing().map(Row::expansion))
    }

    pub fn failures(&self) -> Vec<&Row> {
        self.rows.iter().filter(|r| r.status != Status::Pass).collect()
    }

    fn passing(&self) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(|r| r.status == Status::Pass)
    }

    /// Stable CSV rendering (see the module docs for the column contract).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "seed,class,transforms,status,orig_steps,new_steps,overhead_pct,\
             orig_text_bytes,new_text_bytes,expansion\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.4},{},{},{:.4}\n",
                r.seed,
                r.class,
                self.transforms,
                r.status.label(),
                r.orig_steps,
                r.new_steps,
                r.overhead_pct(),
                r.orig_text,
                r.new_text,
                r.expansion(),
            ));
        }
        out
    }
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 }
}

fn text_bytes(exe: &Executable) -> usize {
    exe.sections.iter().filter(|s| s.kind == SectionKind::Text).map(|s| s.bytes.len()).sum()
}

pub fn spec_label(specs: &[TransformSpec]) -> String {
    if specs.is_empty() {
        return "none".into();
    }
    specs
        .iter()
        .map(|s| {
            let opts: Vec<String> = s.options.iter().map(|(k, v)| format!("{k}={v}")).collect();
            if opts.is_empty() { s.name.clone() } else { format!("{}:{}", s.name, opts.join(",")) }
        })
        .collect::<Vec<_>>()
        .join(";")
}

/// Rewrites one program and compares its behaviour against the recorded run.
pub fn run_one(entry: &CorpusEntry, specs: &[TransformSpec], seed: u64, step_limit: u64) -> Row {
    let orig_text = text_bytes(&entry.exe);
    let mut row = Row {
        seed: entry.seed,
        class: entry.class.label(),
        status: Status::Pass,
        orig_steps: entry.expected.steps,
        new_steps: 0,
        orig_text,
        new_text: 0,
    };

    let mut ir = match crate::frontend::lift(&entry.exe, &format!("corpus-{}", entry.seed)) {
        Ok(ir) => ir,
        Err(e) => {
            row.status = Status::Error(format!("lift ({e})"));
            return row;
        }
    };
    if let Err(e) = transforms::apply_transforms(&mut ir, specs, seed) {
        row.status = Status::Error(format!("transform ({e})"));
        return row;
    }
    let rewritten = match crate::backend::rewrite(&ir) {
        Ok(out) => out.exe,
        Err(e) => {
            row.status = Status::Error(format!("rewrite ({e})"));
            return row;
        }
    };
    row.new_text = text_bytes(&rewritten);

    let result = vm::run_with_limit(&rewritten, &entry.input, step_limit);
    row.new_steps = result.steps;
    if (result.outcome, &result.output) != (entry.expected.outcome, &entry.expected.output) {
        row.status = Status::OutputDiff;
    }
    row
}

/// Runs the whole corpus under one transform list.
pub fn diff_harness(
    corpus: &[CorpusEntry],
    specs: &[TransformSpec],
    seed: u64,
    step_limit: u64,
) -> Report {
    let mut rows: Vec<Row> =
        corpus.iter().map(|entry| run_one(entry, specs, seed, step_limit)).collect();
    rows.sort_by_key(|r| r.seed);
    Report { transforms: spec_label(specs), rows }
}
