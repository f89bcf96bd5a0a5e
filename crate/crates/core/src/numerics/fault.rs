//! Test-only corruption of selected backward rules.
//!
//! Used as a negative control for the gradient checker: with a fault active,
//! the named rule scales its input gradient by 1.01 on the current thread.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SigmoidBackward,
    MatMulBackward,
}

thread_local! {
    static ACTIVE: Cell<Option<Fault>> = const { Cell::new(None) };
}

pub(crate) fn active() -> Option<Fault> {
    ACTIVE.with(Cell::get)
}

/// Runs `f` with `fault` injected into backward passes on this thread.
pub fn with_corrupted_backward<R>(fault: Fault, f: impl FnOnce() -> R) -> R {
    struct Restore(Option<Fault>);
    impl Drop for Restore {
        fn drop(&mut self) {
            ACTIVE.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(ACTIVE.with(|c| c.replace(Some(fault))));
    f()
}
