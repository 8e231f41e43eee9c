//! Per-thread call counters for training and evaluation entry points.
//!
//! Tests use these to check that evaluating a checkpoint does not run code
//! that belongs to later stages.

use std::cell::RefCell;
use std::collections::BTreeMap;

thread_local! {
    static COUNTS: RefCell<BTreeMap<&'static str, usize>> = const { RefCell::new(BTreeMap::new()) };
}

pub const STAGE1: &str = "train.stage1";
pub const STAGE2: &str = "train.stage2";
pub const COLLECT: &str = "collect";
pub const UAPO: &str = "uapo";
pub const EVAL: &str = "eval";

pub fn hit(path: &'static str) {
    COUNTS.with(|c| *c.borrow_mut().entry(path).or_default() += 1);
}

pub fn count(path: &str) -> usize {
    COUNTS.with(|c| c.borrow().get(path).copied().unwrap_or(0))
}

pub fn snapshot() -> BTreeMap<&'static str, usize> {
    COUNTS.with(|c| c.borrow().clone())
}

pub fn reset() {
    COUNTS.with(|c| c.borrow_mut().clear());
}
