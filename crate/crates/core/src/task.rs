use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Saliency,
    Action,
    Summary,
}

impl Task {
    /// Round-robin order used by the training stream.
    pub const ALL: [Task; 3] = [Task::Saliency, Task::Action, Task::Summary];

    pub fn index(self) -> usize {
        match self {
            Task::Saliency => 0,
            Task::Action => 1,
            Task::Summary => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Saliency => "saliency",
            Task::Action => "action",
            Task::Summary => "summary",
        }
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
            "saliency" => Ok(Task::Saliency),
            "action" => Ok(Task::Action),
            "summary" => Ok(Task::Summary),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

/// A subset of the three tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TaskSet([bool; 3]);

impl TaskSet {
    pub fn all() -> Self {
        TaskSet([true; 3])
    }

    pub fn none() -> Self {
        TaskSet([false; 3])
    }

    pub fn only(task: Task) -> Self {
        let mut s = Self::none();
        s.0[task.index()] = true;
        s
    }

    pub fn from_tasks(tasks: &[Task]) -> Self {
        let mut s = Self::none();
        for t in tasks {
            s.0[t.index()] = true;
        }
        s
    }

    pub fn contains(&self, task: Task) -> bool {
        self.0[task.index()]
    }

    pub fn insert(&mut self, task: Task) {
        self.0[task.index()] = true;
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn iter(&self) -> impl Iterator<Item = Task> + '_ {
        Task::ALL.into_iter().filter(|t| self.contains(*t))
    }

    pub fn is_subset(&self, other: &TaskSet) -> bool {
        self.iter().all(|t| other.contains(t))
    }
}

impl fmt::Display for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Task::name).collect();
        f.write_str(&names.join(","))
    }
}

/// Parses `all` or a comma-separated task list.
impl FromStr for TaskSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            return Ok(TaskSet::all());
        }
        let mut set = TaskSet::none();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            set.insert(part.parse()?);
        }
        if set.is_empty() {
            return Err(Error::Config("empty task list".into()));
        }
        Ok(set)
    }
}
