//! Static binary rewriting toolkit for the ZAR-32 toy architecture.
//!
//! The crate covers the full pipeline:
//!
//! * [`isa`] / [`zxe`] — the instruction codec and the ZXE container format;
//! * [`vm`] — a deterministic reference emulator, the behavioral oracle;
//! * [`frontend`] — union disassembly and lifting into an IR database;
//! * [`irdb`] — the identity-linked program IR, its validator, and a
//!   line-oriented persistent form;
//! * [`analyses`] — CFG, dominators, call graph, dead registers, loop headers;
//! * [`transforms`] — composable rewriting passes (stack hygiene, stack
//!   padding, return-address stamping, edge coverage, indirect-transfer
//!   checks);
//! * [`backend`] — pin-preserving code layout, patching, and emission;
//! * [`corpus`] / [`harness`] — a seeded program generator and the
//!   differential-testing harness built on it.
//!
//! Rewriting never moves a pinned address: every address that indirect control
//! flow can reach keeps its meaning, either by placing the original code there
//! or by leaving a short trampoline to wherever it moved.

pub mod analyses;
pub mod asm;
pub mod backend;
pub mod corpus;
pub mod frontend;
pub mod harness;
pub mod irdb;
pub mod isa;
pub mod transforms;
pub mod vm;
pub mod zxe;
