//! Memoroids: monoid-based recurrent memory with resettable associative
//! scans, and the batching and Q-learning machinery built on top of them.
//!
//! * [`scan`]: associative operators, sequential and work-efficient
//!   parallel prefix scans.
//! * [`memoroid`]: lift/readout wrappers and the resettable transform.
//! * [`models`]: linear attention, S5, LRU and FFM memory models.
//! * [`returns`]: discounted returns and GAE as scans.
//! * [`batching`]: tape-based and segment-based replay storage.
//! * [`qlearn`]: a small recurrent Q-learning pipeline, training loop and
//!   gradient sensitivity analysis.
//! * [`verify`]: self-check suites used by the command-line tool.

pub mod autodiff;
pub mod batching;
pub mod bench;
pub mod error;
pub mod memoroid;
pub mod models;
pub mod params;
pub mod qlearn;
pub mod returns;
pub mod scan;
pub mod verify;

pub use error::{Error, Result};
pub use memoroid::{apply, apply_resettable, make_resettable, step, Memoroid, PartialTransition};
pub use scan::{scan_parallel, scan_sequential, AssociativeOp, ScanSchedule};
