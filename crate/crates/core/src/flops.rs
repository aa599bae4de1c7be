//! Thread-local FLOP accounting.
//!
//! Matrix products count `2·m·k·n` and softmax counts
//! [`SOFTMAX_FLOPS_PER_ELEMENT`] per score. Attention modules additionally
//! book their whole cost into the `attention` bucket. Counting is
//! per-thread, so measure on the thread that runs the computation.

use std::cell::Cell;

pub const SOFTMAX_FLOPS_PER_ELEMENT: u64 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub total: u64,
    pub attention: u64,
}

thread_local! {
    static COUNTER: Cell<FlopCount> = const { Cell::new(FlopCount { total: 0, attention: 0 }) };
}

pub fn add(n: u64) {
    COUNTER.with(|c| {
        let mut v = c.get();
        v.total += n;
        c.set(v);
    });
}

pub(crate) fn add_attention(n: u64) {
    COUNTER.with(|c| {
        let mut v = c.get();
        v.attention += n;
        c.set(v);
    });
}

/// Runs `f` and returns the FLOPs it performed. Nests: the enclosing
/// measurement still sees the inner work.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, FlopCount) {
    let saved = COUNTER.with(|c| c.replace(FlopCount::default()));
    let out = f();
    let inner = COUNTER.with(|c| c.get());
    COUNTER.with(|c| {
        c.set(FlopCount {
            total: saved.total + inner.total,
            attention: saved.attention + inner.attention,
        })
    });
    (out, inner)
}
