use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// The two task families every gated component switches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskType {
    Comprehension,
    Generation,
}

impl TaskType {
    pub const ALL: [TaskType; 2] = [TaskType::Comprehension, TaskType::Generation];

    /// Short tag used in parameter names, CSV rows and the command line.
    pub fn tag(self) -> &'static str {
        match self {
            TaskType::Comprehension => "comp",
            TaskType::Generation => "gen",
        }
    }

    pub fn other(self) -> TaskType {
        match self {
            TaskType::Comprehension => TaskType::Generation,
            TaskType::Generation => TaskType::Comprehension,
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "comp" | "comprehension" => Ok(TaskType::Comprehension),
            "gen" | "generation" => Ok(TaskType::Generation),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}
