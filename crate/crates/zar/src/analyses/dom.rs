//! Dominator trees via the iterative reverse-postorder algorithm, and
//! natural-loop headers derived from back edges.

use std::collections::BTreeSet;

use super::cfg::{BlockId, Cfg};

#[derive(Clone, Debug)]
pub struct Dominators {
    /// Immediate dominator per block; the entry maps to itself, unreachable
    /// blocks are absent.
    idom: Vec<Option<BlockId>>,
    /// Reverse postorder of the reachable blocks, entry first.
    pub rpo: Vec<BlockId>,
    /// Blocks with no path from the entry. They have no dominator
    /// relationships and are excluded from loop detection.
    pub unreachable: BTreeSet<BlockId>,
    entry: BlockId,
}

impl Dominators {
    pub fn idom(&self, b: BlockId) -> Option<BlockId> {
        if b == self.entry { None } else { self.idom[b.0] }
    }

    /// Does `a` dominate `b`? Reflexive; false if either is unreachable.
    pub fn dominates(&self, a: BlockId, b: BlockId) -> bool {
        if self.unreachable.contains(&a) || self.unreachable.contains(&b) {
            return false;
        }
        let mut cur = b;
        loop {
            if cur == a {
                return true;
            }
            if cur == self.entry {
                return false;
            }
            cur = self.idom[cur.0].expect("reachable block has idom");
        }
    }
}

/// Computes the dominator tree of `cfg`.
pub fn dominators(cfg: &Cfg) -> Dominators {
    let n = cfg.blocks.len();

    // Postorder DFS from the entry.
    let mut po: Vec<BlockId> = Vec::with_capacity(n);
    let mut po_index = vec![usize::MAX; n];
    let mut visited = vec![false; n];
    // Iterative DFS with explicit successor cursor.
    let mut stack: Vec<(BlockId, usize)> = vec![(cfg.entry, 0)];
    visited[cfg.entry.0] = true;
    while let Some(&mut (b, ref mut cursor)) = stack.last_mut() {
        let succs = &cfg.blocks[b.0].succs;
        if *cursor < succs.len() {
            let next = succs[*cursor].0;
            *cursor += 1;
            if !visited[next.0] {
                visited[next.0] = true;
                stack.push((next, 0));
            }
        } else {
            po_index[b.0] = po.len();
            po.push(b);
            stack.pop();
        }
    }
    let rpo: Vec<BlockId> = po.iter().rev().copied().collect();
    let unreachable: BTreeSet<BlockId> =
        (0..n).filter(|&i| !visited[i]).map(BlockId).collect();

    let mut idom: Vec<Option<BlockId>> = vec![None; n];
    idom[cfg.entry.0] = Some(cfg.entry);

    let intersect = |idom: &[Option<BlockId>], mut a: BlockId, mut b: BlockId| {
        while a != b {
            while po_index[a.0] < po_index[b.0] {
                a = idom[a.0].unwrap();
            }
            while po_index[b.0] < po_index[a.0] {
                b = idom[b.0].unwrap();
            }
        }
        a
    };

    let mut changed = true;
    while changed {
        changed = false;
        for &b in &rpo {
            if b == cfg.entry {
                continue;
            }
            let mut new_idom: Option<BlockId> = None;
            for &p in &cfg.blocks[b.0].preds {
                if idom[p.0].is_none() {
                    continue; // unprocessed or unreachable
                }
                new_idom = Some(match new_idom {
                    None => p,
                    Some(cur) => intersect(&idom, cur, p),
                });
            }
            if new_idom.is_some() && idom[b.0] != new_idom {
                idom[b.0] = new_idom;
                changed = true;
            }
        }
    }

    Dominators { idom, rpo, unreachable, entry: cfg.entry }
}

/// Heads of natural loops: targets of back edges `u -> h` where `h`
/// dominates `u`.
pub fn loop_headers(cfg: &Cfg, doms: &Dominators) -> BTreeSet<BlockId> {
    let mut out = BTreeSet::new();
    for b in &cfg.blocks {
        for &(succ, _) in &b.succs {
            if doms.dominates(succ, b.id) {
                out.insert(succ);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::cfg::{build_cfg, Block, BlockId, Cfg, EdgeKind};
    use super::*;
    use crate::asm::Asm;
    use crate::frontend::lift;
    use crate::irdb::{FuncId, InstrId};
    use crate::isa::{AluImmOp, Cond, Instr, Reg};

    /// Builds a bare CFG from an adjacency list (analyses never look at the
    /// records for dominance, so placeholder ids suffice).
    fn graph(edges: &[(usize, usize)], n: usize) -> Cfg {
        let mut blocks: Vec<Block> = (0..n)
            .map(|i| Block {
                id: BlockId(i),
                records: vec![InstrId(i as u64)],
                succs: Vec::new(),
                preds: Vec::new(),
            })
            .collect();
        for &(a, b) in edges {
            blocks[a].succs.push((BlockId(b), EdgeKind::Taken));
            blocks[b].preds.push(BlockId(a));
        }
        let block_of = blocks.iter().map(|b| (b.records[0], b.id)).collect();
        Cfg { func: FuncId(0), blocks, entry: BlockId(0), block_of }
    }

    #[test]
    fn diamond_dominators() {
        let (ir, func) = super::super::cfg::tests::diamond_ir();
        let cfg = build_cfg(&ir, func);
        let doms = dominators(&cfg);
        assert_eq!(doms.idom(BlockId(1)), Some(BlockId(0)));
        assert_eq!(doms.idom(BlockId(2)), Some(BlockId(0)));
        assert_eq!(doms.idom(BlockId(3)), Some(BlockId(0)));
        assert!(doms.dominates(BlockId(0), BlockId(3)));
        assert!(!doms.dominates(BlockId(1), BlockId(3)));
        assert!(doms.dominates(BlockId(3), BlockId(3)));
        assert!(doms.unreachable.is_empty());
    }

    #[test]
    fn nested_loops_have_two_headers() {
        // 0 -> 1 -> 2 -> 1, 2 -> 3 -> 0? no: outer loop 1..3 back to 1? Use:
        // 0 -> 1; 1 -> 2; 2 -> 2 (inner self loop); 2 -> 3; 3 -> 1 (outer); 3 -> 4.
        let cfg = graph(&[(0, 1), (1, 2), (2, 2), (2, 3), (3, 1), (3, 4)], 5);
        let doms = dominators(&cfg);
        let headers = loop_headers(&cfg, &doms);
        assert_eq!(headers, [BlockId(1), BlockId(2)].into_iter().collect());
    }

    #[test]
    fn unreachable_blocks_are_reported_and_excluded() {
        let cfg = graph(&[(0, 1), (2, 1)], 3); // block 2 unreachable
        let doms = dominators(&cfg);
        assert_eq!(doms.unreachable, [BlockId(2)].into_iter().collect());
        assert!(!doms.dominates(BlockId(2), BlockId(1)));
        assert!(!doms.dominates(BlockId(0), BlockId(2)));
        // The unreachable predecessor must not perturb reachable dominance.
        assert_eq!(doms.idom(BlockId(1)), Some(BlockId(0)));
    }

    #[test]
    fn lifted_countdown_loop_has_one_header() {
        let mut a = Asm::new(0x1000);
        a.label("entry");
        a.i(Instr::Movi { dst: Reg::R0, imm: 5 });
        a.label("loop");
        a.i(Instr::AluImm { op: AluImmOp::Addi, dst: Reg::R0, imm: -1i32 as u32 });
        a.i(Instr::Cmpi { a: Reg::R0, imm: 0 });
        a.br8(Cond::Nz, "loop");
        a.i(Instr::Halt);
        let exe = a.finish().unwrap().into_exe("entry", vec![]).unwrap();
        let ir = lift(&exe, "test").unwrap();
        let func = ir.functions.keys().copied().next().unwrap();
        let cfg = build_cfg(&ir, func);
        let doms = dominators(&cfg);
        assert_eq!(loop_headers(&cfg, &doms), [BlockId(1)].into_iter().collect());
    }
}
