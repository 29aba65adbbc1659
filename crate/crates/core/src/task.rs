use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// A retention task `LT_d`: the revisit frequency over a `horizon`-day window.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub horizon: usize,
}

impl TaskSpec {
    pub fn new(name: &str, horizon: usize) -> Self {
        TaskSpec {
            name: name.into(),
            horizon,
        }
    }

    /// The default task pair, `LT1` and `LT7`.
    pub fn defaults() -> Vec<TaskSpec> {
        vec![TaskSpec::new("LT1", 1), TaskSpec::new("LT7", 7)]
    }
}
