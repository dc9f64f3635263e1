//! End-to-end scenarios: container in, lift, optional transforms, rewrite,
//! container out, execute. Each test exercises one architectural promise that
//! unit tests can only cover piecewise.

use zar::asm::Asm;
use zar::backend::{rewrite, rewrite_with_plugin, Dollop, LayoutPlugin};
use zar::corpus::standard_corpus;
use zar::frontend::lift;
use zar::irdb::{RelocSite, Relocation};
use zar::isa::{AluImmOp, AluOp, Instr, Reg, ShiftOp};
use zar::transforms::{apply_transforms, parse_spec, TransformSpec};
use zar::vm::{self, Outcome, Trap};
use zar::zxe::{Executable, Section};

fn specs(list: &[&str]) -> Vec<TransformSpec> {
    list.iter().map(|s| parse_spec(s).unwrap()).collect()
}

/// Container -> lift -> transforms -> reconstituted container.
fn pipeline(exe: &Executable, list: &[&str], seed: u64) -> Executable {
    let mut ir = lift(exe, "pipeline-test").unwrap();
    apply_transforms(&mut ir, &specs(list), seed).unwrap();
    rewrite(&ir).unwrap().exe
}

/// Both binaries must produce the same output and exit the same way.
fn assert_same_behavior(original: &Executable, rewritten: &Executable, input: &[u8]) {
    let a = vm::run(original, input);
    let b = vm::run(rewritten, input);
    assert_eq!(a.outcome, b.outcome, "outcome diverged on input {input:?}");
    assert_eq!(a.output, b.output, "output diverged on input {input:?}");
}

/// Two decodings of the same bytes, both statically referenced: the rewriter
/// must give each stream its own placement so the program works whichever
/// interpretation really runs.
#[test]
fn overlapping_streams_both_survive_rewriting() {
    let mut a = Asm::new(0x1000);
    a.label("entry");
    a.i(Instr::Sys { code: 2 });
    a.i(Instr::Cmpi { a: Reg::R0, imm: 0 });
    a.br(zar::isa::Cond::Z, "take_outer");
    a.movi_label(Reg::R2, "inner");
    a.i(Instr::JmpR { target: Reg::R2 });
    a.label("take_outer");
    a.jmp("decoy");
    a.label("decoy");
    // MOVI r4, imm — the immediate bytes themselves decode as `MOVI r0, 41`,
    // so "inner" (decoy+2) starts a second stream inside this instruction.
    a.raw(&[0x11, 0x04]);
    a.label("inner");
    a.raw(&[0x11, 0x00, 0x29, 0x00]);
    a.raw(&[0x00, 0x00, 0x00]); // finish inner's immediate; then HALT for both
    let out = a.finish().unwrap();
    let (decoy, inner) = (out.addr("decoy"), out.addr("inner"));
    let exe = out.into_exe("entry", vec![]).unwrap();

    let ir = lift(&exe, "overlap").unwrap();
    let starts: Vec<u32> = ir.records.values().filter_map(|r| r.original_address).collect();
    assert!(starts.contains(&decoy), "outer interpretation lifted");
    assert!(starts.contains(&inner), "inner interpretation lifted");

    let rewritten = pipeline(&exe, &[], 0);
    assert_same_behavior(&exe, &rewritten, &[0]); // outer: falls through decoy, exit 0
    assert_same_behavior(&exe, &rewritten, &[1]); // inner: hidden MOVI, exit 41
    assert_eq!(vm::run(&rewritten, &[1]).outcome, Outcome::Exit(41));
}

/// Bytes that never decode are data, even in the middle of the text section;
/// loads must find them at their original address after rewriting.
#[test]
fn in_text_data_reached_by_loads_is_preserved() {
    let mut a = Asm::new(0x1000);
    a.label("entry");
    a.jmp("after");
    a.label("tbl");
    a.raw(&[0xFF, 0xFF, 0xFF, 0xFF]); // 0xFF never decodes
    a.label("after");
    a.movi_label(Reg::R1, "tbl");
    a.i(Instr::Load { dst: Reg::R2, base: Reg::R1, offset: 0 });
    a.i(Instr::AluImm { op: AluImmOp::Addi, dst: Reg::R2, imm: 1 });
    a.i(Instr::Mov { dst: Reg::R0, src: Reg::R2 });
    a.i(Instr::Sys { code: 3 }); // prints 0xFFFFFFFF + 1 == 0
    a.i(Instr::Halt);
    let out = a.finish().unwrap();
    let tbl = out.addr("tbl");
    let exe = out.into_exe("entry", vec![]).unwrap();

    let ir = lift(&exe, "blob").unwrap();
    let blob = ir.data_objects.values().find(|o| o.vaddr == tbl).expect("table kept as a blob");
    assert_eq!(blob.bytes, vec![0xFF; 4]);

    let rewritten = pipeline(&exe, &[], 0);
    assert_same_behavior(&exe, &rewritten, &[]);
    assert_eq!(vm::run(&rewritten, &[]).output, b"0");
}

/// A classic jump table: data words holding function addresses, dispatched
/// through an input-scaled indirect call. The words are pinned, so the table
/// keeps working without being rewritten.
#[test]
fn indirect_dispatch_through_a_data_table() {
    let mut a = Asm::new(0x1000);
    a.label("entry");
    a.i(Instr::Sys { code: 2 });
    a.i(Instr::ShiftImm { op: ShiftOp::Shl, dst: Reg::R0, amount: 2 });
    a.i(Instr::Movi { dst: Reg::R1, imm: 0x2000_0000 });
    a.i(Instr::Alu { op: AluOp::Add, dst: Reg::R1, src: Reg::R0 });
    a.i(Instr::Load { dst: Reg::R2, base: Reg::R1, offset: 0 });
    a.i(Instr::CallR { target: Reg::R2 });
    a.i(Instr::Movi { dst: Reg::R0, imm: 0 });
    a.i(Instr::Halt);
    for d in 0..3u32 {
        a.label(&format!("h{d}"));
        a.i(Instr::Movi { dst: Reg::R0, imm: 48 + d }); // ASCII digit
        a.i(Instr::Sys { code: 1 });
        a.i(Instr::Ret);
    }
    let out = a.finish().unwrap();
    let table: Vec<u8> =
        (0..3).flat_map(|d| out.addr(&format!("h{d}")).to_le_bytes()).collect();
    let exe = out.into_exe("entry", vec![Section::data(0x2000_0000, table)]).unwrap();

    for arm in [&[][..], &["p1_pad:seed=9"][..], &["stack_stamp", "kill_deads"][..]] {
        let rewritten = pipeline(&exe, arm, 11);
        for i in 0..3u8 {
            assert_same_behavior(&exe, &rewritten, &[i]);
            assert_eq!(vm::run(&rewritten, &[i]).output, vec![b'0' + i]);
        }
    }
}

/// With nothing pinned apart from the entry and no instrumentation, a
/// straight-line program coalesces into the identical byte string.
#[test]
fn straight_line_rewrite_is_byte_identical() {
    let mut a = Asm::new(0x1000);
    a.label("entry");
    a.i(Instr::Movi { dst: Reg::R0, imm: 7 });
    a.i(Instr::AluImm { op: AluImmOp::Addi, dst: Reg::R0, imm: 35 });
    a.i(Instr::Sys { code: 3 });
    a.i(Instr::Halt);
    let exe = a.finish().unwrap().into_exe("entry", vec![]).unwrap();
    let rewritten = pipeline(&exe, &[], 0);
    assert_eq!(rewritten.text().bytes, exe.text().bytes);
    assert_eq!(vm::run(&rewritten, &[]).output, b"42");
}

/// Uninitialized-read leak, end to end: the caller dirties the memory below
/// its frame, the callee reads a local it never wrote. Untransformed, the
/// callee leaks the caller's sentinel; with frame zeroing it reads zero.
#[test]
fn frame_zeroing_blocks_a_cross_call_leak() {
    let mut a = Asm::new(0x1000);
    a.label("entry");
    a.i(Instr::Movi { dst: Reg::R3, imm: 0x5EC4E7 });
    a.i(Instr::Store { base: Reg::SP, offset: -8, src: Reg::R3 });
    a.call("f");
    a.i(Instr::Halt);
    a.label("f");
    a.i(Instr::Load { dst: Reg::R0, base: Reg::SP, offset: -4 }); // never written by f
    a.i(Instr::Sys { code: 3 });
    a.i(Instr::Ret);
    let exe = a.finish().unwrap().into_exe("entry", vec![]).unwrap();

    assert_eq!(vm::run(&exe, &[]).output, format!("{}", 0x5EC4E7).into_bytes());
    let hardened = pipeline(&exe, &["initialize_stack"], 0);
    assert_eq!(vm::run(&hardened, &[]).output, b"0");
}

/// Return-address stamping, end to end: a callee that overwrites its own
/// saved return address redirects the original binary to attacker-chosen
/// code; in the stamped binary the forged address is descrambled into
/// nonsense and the machine never reaches it.
#[test]
fn return_address_stamp_defeats_a_forged_frame() {
    const KEY: u32 = 0x8000_0000;
    let mut a = Asm::new(0x1000);
    a.label("entry");
    a.call("f");
    a.i(Instr::Movi { dst: Reg::R0, imm: 0 });
    a.i(Instr::Halt);
    a.label("f");
    a.movi_label(Reg::R2, "thief");
    a.i(Instr::Store { base: Reg::SP, offset: 0, src: Reg::R2 }); // the return slot
    a.i(Instr::Ret);
    a.label("thief");
    a.i(Instr::Movi { dst: Reg::R0, imm: 99 });
    a.i(Instr::Halt);
    let out = a.finish().unwrap();
    let thief = out.addr("thief");
    let exe = out.into_exe("entry", vec![]).unwrap();

    assert_eq!(vm::run(&exe, &[]).outcome, Outcome::Exit(99), "forgery works untransformed");

    let stamped = pipeline(&exe, &[&format!("stack_stamp:key={KEY}")], 0);
    let got = vm::run(&stamped, &[]);
    assert_ne!(got.outcome, Outcome::Exit(99), "stamped binary must not reach the thief");
    assert_eq!(
        got.outcome,
        Outcome::Trap(Trap::PcOutsideText { pc: thief ^ KEY }),
        "the forged address comes out of the final unscramble garbled by the key"
    );
}

/// Different pad seeds produce different texts; every one of them behaves
/// like the original.
#[test]
fn pad_seeds_diversify_layout_without_changing_behavior() {
    let entry = &standard_corpus(1)[0];
    let mut texts = Vec::new();
    for seed in 1..=3u32 {
        let arm = format!("p1_pad:seed={seed}");
        let rewritten = pipeline(&entry.exe, &[&arm], 0);
        assert_same_behavior(&entry.exe, &rewritten, &entry.input);
        texts.push(rewritten.text().bytes.clone());
    }
    assert!(texts[0] != texts[1] && texts[1] != texts[2] && texts[0] != texts[2],
        "three pad seeds must yield three distinct layouts");
}

/// A placement plugin that deliberately picks the *largest* adequate gap.
struct WorstFit;

impl LayoutPlugin for WorstFit {
    fn propose_placement(&self, dollop: &Dollop, gaps: &[(u32, u32)]) -> Option<u32> {
        // Conservative size bound: no instruction widens past 6 bytes, plus
        // a possible 5-byte terminator jump.
        let need = dollop.records.len() as u32 * 6 + 5;
        gaps.iter().filter(|g| g.1 >= need).max_by_key(|g| g.1).map(|g| g.0)
    }
}

#[test]
fn plugin_can_steer_placement() {
    let entry = &standard_corpus(16)[15]; // medium program, many dollops
    let mut ir = lift(&entry.exe, "plugin").unwrap();
    apply_transforms(&mut ir, &specs(&["p1_pad:seed=1"]), 0).unwrap();

    let plain = rewrite(&ir).unwrap();
    let steered = rewrite_with_plugin(&ir, Some(&WorstFit)).unwrap();
    assert_ne!(
        plain.placement.record_addrs, steered.placement.record_addrs,
        "the plugin's proposals must actually steer placement"
    );

    let got = vm::run(&steered.exe, &entry.input);
    assert_eq!(got.outcome, entry.expected.outcome);
    assert_eq!(got.output, entry.expected.output);
}

/// A relocation plugin that patches the first table word from one callee to
/// another: the emitted container must dispatch to the substitute.
struct RedirectFirstWord {
    to: u32,
}

impl LayoutPlugin for RedirectFirstWord {
    fn custom_reloc(&self, reloc: &Relocation, _resolved: u32) -> Option<u32> {
        match reloc.site {
            RelocSite::Data { offset: 0, .. } => Some(self.to),
            _ => None,
        }
    }
}

#[test]
fn plugin_can_patch_relocated_words() {
    let mut a = Asm::new(0x1000);
    a.label("entry");
    a.i(Instr::Movi { dst: Reg::R1, imm: 0x2000_0000 });
    a.i(Instr::Load { dst: Reg::R2, base: Reg::R1, offset: 0 });
    a.i(Instr::CallR { target: Reg::R2 });
    a.i(Instr::Halt);
    a.label("f");
    a.i(Instr::Movi { dst: Reg::R0, imm: 7 });
    a.i(Instr::Ret);
    a.label("g");
    a.i(Instr::Movi { dst: Reg::R0, imm: 8 });
    a.i(Instr::Ret);
    let out = a.finish().unwrap();
    let (f, g) = (out.addr("f"), out.addr("g"));
    // Both callees sit in the table so both are pinned at their addresses.
    let table: Vec<u8> = [f, g].iter().flat_map(|v| v.to_le_bytes()).collect();
    let exe = out.into_exe("entry", vec![Section::data(0x2000_0000, table)]).unwrap();

    let ir = lift(&exe, "redirect").unwrap();
    assert_eq!(vm::run(&rewrite(&ir).unwrap().exe, &[]).outcome, Outcome::Exit(7));
    let patched = rewrite_with_plugin(&ir, Some(&RedirectFirstWord { to: g })).unwrap();
    assert_eq!(vm::run(&patched.exe, &[]).outcome, Outcome::Exit(8));
}

/// The reconstituted container is itself a well-formed, reloadable container.
#[test]
fn rewritten_containers_revalidate_and_reload() {
    for entry in &standard_corpus(10) {
        let rewritten = pipeline(&entry.exe, &["stack_stamp", "p1_pad", "coverage"], 5);
        rewritten.validate().unwrap();
        let bytes = rewritten.to_bytes();
        let back = Executable::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let got = vm::run(&rewritten, &entry.input);
        assert_eq!(got.outcome, entry.expected.outcome, "seed {}", entry.seed);
        assert_eq!(got.output, entry.expected.output, "seed {}", entry.seed);
    }
}
