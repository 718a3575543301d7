use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The four jointly trained tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Und,
    Pixel,
    Depth,
    Seg,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Und, Task::Pixel, Task::Depth, Task::Seg];
    pub const GENERATION: [Task; 3] = [Task::Pixel, Task::Depth, Task::Seg];

    pub fn name(self) -> &'static str {
        match self {
            Task::Und => "und",
            Task::Pixel => "pixel",
            Task::Depth => "depth",
            Task::Seg => "seg",
        }
    }

    pub fn is_generation(self) -> bool {
        self != Task::Und
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "und" => Ok(Task::Und),
            "pixel" => Ok(Task::Pixel),
            "depth" => Ok(Task::Depth),
            "seg" => Ok(Task::Seg),
            other => Err(Error::config(format!("unknown task {other:?}"))),
        }
    }
}
