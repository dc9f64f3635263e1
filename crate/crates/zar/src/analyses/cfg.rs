//! Basic blocks over a function's records.
//!
//! A record starts a block when it is the function head, is pinned (control
//! may enter from outside), is a branch target, follows a control-flow
//! instruction, or has more than one predecessor. Blocks are numbered in
//! ascending head-record order, so the graph is deterministic.
//!
//! Edges are intra-procedural: a call contributes its return edge
//! ([`EdgeKind::CallReturn`]) but not the callee edge, and targets outside
//! the member set (tail transfers into other code) contribute no edge.

use std::collections::BTreeMap;

use crate::irdb::{FuncId, InstrId, ProgramIR};

/// Index of a block within its [`Cfg`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct BlockId(pub usize);

impl std::fmt::Display for BlockId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "B{}", self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum EdgeKind {
    /// Sequential execution into the next block.
    Fallthrough,
    /// A taken jump or branch.
    Taken,
    /// Execution resuming after a call returns.
    CallReturn,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub id: BlockId,
    /// Straight-line records, first is the block head.
    pub records: Vec<InstrId>,
    pub succs: Vec<(BlockId, EdgeKind)>,
    pub preds: Vec<BlockId>,
}

#[derive(Clone, Debug)]
pub struct Cfg {
    pub func: FuncId,
    pub blocks: Vec<Block>,
    pub entry: BlockId,
    pub block_of: BTreeMap<InstrId, BlockId>,
}

impl Cfg {
    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id.0]
    }

    /// The record the block's control flow decision rests on (its last).
    pub fn terminator(&self, id: BlockId) -> InstrId {
        *self.block(id).records.last().unwrap()
    }
}

/// Builds the block graph for one function.
pub fn build_cfg(ir: &ProgramIR, func: FuncId) -> Cfg {
    let f = &ir.functions[&func];
    let members = &f.members;

    // Predecessor counts and post-control flags drive leader selection.
    let mut pred_count: BTreeMap<InstrId, usize> = BTreeMap::new();
    let mut after_control: BTreeMap<InstrId, bool> = BTreeMap::new();
    let mut is_target: BTreeMap<InstrId, bool> = BTreeMap::new();
    for &m in members {
        let rec = ir.record(m);
        if let Some(ft) = rec.fallthrough {
            if members.contains(&ft) {
                *pred_count.entry(ft).or_default() += 1;
                if rec.instr.is_control() {
                    after_control.insert(ft, true);
                }
            }
        }
        if !rec.instr.is_call() {
            if let Some(t) = rec.target {
                if members.contains(&t) {
                    *pred_count.entry(t).or_default() += 1;
                    is_target.insert(t, true);
                }
            }
        }
    }

    let leader = |id: InstrId| {
        id == f.head
            || ir.record(id).pinned_at.is_some()
            || is_target.get(&id).copied().unwrap_or(false)
            || after_control.get(&id).copied().unwrap_or(false)
            || pred_count.get(&id).copied().unwrap_or(0) > 1
    };

    let mut leaders: Vec<InstrId> = members.iter().copied().filter(|&m| leader(m)).collect();
    leaders.sort();

    let mut blocks = Vec::new();
    let mut block_of: BTreeMap<InstrId, BlockId> = BTreeMap::new();
    let emit = |head: InstrId, blocks: &mut Vec<Block>, block_of: &mut BTreeMap<InstrId, BlockId>| {
        let id = BlockId(blocks.len());
        let mut records = vec![head];
        block_of.insert(head, id);
        let mut cur = head;
        loop {
            let rec = ir.record(cur);
            if rec.instr.is_control() {
                break;
            }
            match rec.fallthrough {
                Some(next) if members.contains(&next) && !leader(next) => {
                    records.push(next);
                    block_of.insert(next, id);
                    cur = next;
                }
                _ => break,
            }
        }
        blocks.push(Block { id, records, succs: Vec::new(), preds: Vec::new() });
    };
    for &l in &leaders {
        emit(l, &mut blocks, &mut block_of);
    }
    // Members not reached from any leader would indicate a malformed member
    // set; give each its own block so the graph still covers the function.
    let stragglers: Vec<InstrId> =
        members.iter().copied().filter(|m| !block_of.contains_key(m)).collect();
    for s in stragglers {
        if !block_of.contains_key(&s) {
            emit(s, &mut blocks, &mut block_of);
        }
    }

    // Edges from each block's final record.
    let mut all_edges = Vec::new();
    for b in &blocks {
        let last = *b.records.last().unwrap();
        let rec = ir.record(last);
        let mut edges: Vec<(BlockId, EdgeKind)> = Vec::new();
        if let Some(ft) = rec.fallthrough {
            if let Some(&to) = block_of.get(&ft) {
                let kind =
                    if rec.instr.is_call() { EdgeKind::CallReturn } else { EdgeKind::Fallthrough };
                edges.push((to, kind));
            }
        }
        if !rec.instr.is_call() {
            if let Some(t) = rec.target {
                if let Some(&to) = block_of.get(&t) {
                    edges.push((to, EdgeKind::Taken));
                }
            }
        }
        all_edges.push(edges);
    }
    for (i, edges) in all_edges.into_iter().enumerate() {
        for &(to, _) in &edges {
            blocks[to.0].preds.push(BlockId(i));
        }
        blocks[i].succs = edges;
    }

    let entry = block_of[&f.head];
    Cfg { func, blocks, entry, block_of }
}
