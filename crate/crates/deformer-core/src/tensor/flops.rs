//! Thread-local floating-point operation counter.
//!
//! Every tape primitive reports its cost here as it executes, so a forward
//! pass can be metered by resetting the counter, running the pass, and
//! reading the total. The per-element costs below are the single source of
//! truth shared with the analytic formulas in the metering module; the two
//! must agree exactly for the instrumented cross-check to hold.
//!
//! Convention: one multiply-accumulate counts as 2 FLOPs, so a matrix
//! product of an `m x k` by a `k x n` costs `2·m·k·n`.

use std::cell::Cell;

/// FLOPs per element of a GELU activation (tanh approximation: three
/// multiplies for the cubic, two scales, one tanh, one add, one final
/// product — tanh counted as a single transcendental op).
pub const GELU_FLOPS_PER_ELEM: u64 = 8;

/// FLOPs per element of layer normalization (mean, variance, subtract,
/// scale by inverse stddev, gain multiply, bias add amortized per element).
pub const LAYER_NORM_FLOPS_PER_ELEM: u64 = 8;

/// FLOPs per element of a softmax lane (max subtraction, exp, sum, divide,
/// with the reductions amortized per element).
pub const SOFTMAX_FLOPS_PER_ELEM: u64 = 5;

/// FLOPs per element of a natural logarithm.
pub const LN_FLOPS_PER_ELEM: u64 = 1;

thread_local! {
    static FLOP_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Resets the current thread's counter to zero.
pub fn reset() {
    FLOP_COUNT.with(|c| c.set(0));
}

/// Reads the current thread's accumulated count.
pub fn read() -> u64 {
    FLOP_COUNT.with(|c| c.get())
}

/// Adds `n` to the current thread's counter.
pub(crate) fn record(n: u64) {
    FLOP_COUNT.with(|c| c.set(c.get() + n));
}

/// Runs `f` with a fresh counter and returns its result alongside the FLOPs
/// it recorded, restoring the caller's running total afterwards.
pub fn counting<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = read();
    reset();
    let out = f();
    let counted = read();
    FLOP_COUNT.with(|c| c.set(before + counted));
    (out, counted)
}
