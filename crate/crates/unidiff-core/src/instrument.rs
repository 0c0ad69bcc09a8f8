//! Counters proving what the inference path does and does not evaluate.
//!
//! Counters are per-thread: sampling and the step loop are driven from one
//! thread, so a reset/snapshot pair around a section counts exactly that
//! section's evaluations regardless of what other threads do.

use std::cell::Cell;

thread_local! {
    static FORWARD_EVALS: Cell<u64> = const { Cell::new(0) };
    static PROJECTION_HEAD_EVALS: Cell<u64> = const { Cell::new(0) };
    static TEACHER_EVALS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counters {
    pub forward_evals: u64,
    pub projection_head_evals: u64,
    pub teacher_evals: u64,
}

pub fn reset() {
    FORWARD_EVALS.with(|c| c.set(0));
    PROJECTION_HEAD_EVALS.with(|c| c.set(0));
    TEACHER_EVALS.with(|c| c.set(0));
}

pub fn snapshot() -> Counters {
    Counters {
        forward_evals: FORWARD_EVALS.with(Cell::get),
        projection_head_evals: PROJECTION_HEAD_EVALS.with(Cell::get),
        teacher_evals: TEACHER_EVALS.with(Cell::get),
    }
}

pub(crate) fn count_forward() {
    FORWARD_EVALS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn count_projection_head() {
    PROJECTION_HEAD_EVALS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn count_teacher() {
    TEACHER_EVALS.with(|c| c.set(c.get() + 1));
}
