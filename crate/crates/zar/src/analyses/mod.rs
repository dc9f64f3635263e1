//! Read-only analyses over the IR database.
//!
//! Everything here works on identity links, never on addresses, so results
//! stay valid as transforms insert code. All outputs iterate in id order and
//! are deterministic.
//!
//! * [`cfg`] — intra-procedural basic-block graphs.
//! * [`dom`] — dominator trees and natural-loop headers.
//! * [`calls`] — the inter-procedural call graph, with register-indirect
//!   calls resolved conservatively to every pinned function head.
//! * [`live`] — backward may-liveness of registers, the basis for picking
//!   provably dead registers.

pub mod calls;
pub mod cfg;
pub mod dom;
pub mod live;

pub use calls::{call_graph, CallGraph};
pub use cfg::{build_cfg, Block, BlockId, Cfg, EdgeKind};
pub use dom::{dominators, loop_headers, Dominators};
pub use live::{dead_before_map, live_in_map};
