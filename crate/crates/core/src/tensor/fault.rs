//! Deliberate backward-pass corruption for exercising the gradient checker.
//!
//! Nothing here is active unless [`inject`] is called. The gradcheck
//! command uses it to prove a broken primitive is reported.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Fault {
    None = 0,
    /// Negate the input gradient produced by `conv2d`.
    Conv2dSignFlip = 1,
}

static ACTIVE: AtomicU8 = AtomicU8::new(Fault::None as u8);

pub fn inject(fault: Fault) {
    ACTIVE.store(fault as u8, Ordering::SeqCst);
}

pub fn clear() {
    inject(Fault::None);
}

pub(crate) fn active(fault: Fault) -> bool {
    ACTIVE.load(Ordering::Relaxed) == fault as u8
}

impl std::str::FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Fault::None),
            "conv2d" => Ok(Fault::Conv2dSignFlip),
            other => Err(format!("unknown fault '{other}' (expected conv2d or none)")),
        }
    }
}
