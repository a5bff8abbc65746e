use std::fmt;
use std::path::Path;

use mapd::dataset::DatasetError;
use mapd::eval::EvalError;
use mapd::models::ModelError;
use mapd::pso::PsoError;
use mapd::scenario::ScenarioError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Io,
    Numeric,
    Infeasible,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Io => 3,
            Category::Numeric => 4,
            Category::Infeasible => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Io => "io",
            Category::Numeric => "numeric",
            Category::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self { category, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Category::Config, message)
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        Self::new(Category::Io, format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    /// Single line: `error[<category>]: <message>`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.category.name(), self.message.replace('\n', " "))
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<PsoError> for CliError {
    fn from(e: PsoError) -> Self {
        let category = match e {
            PsoError::Infeasible { .. } => Category::Infeasible,
            PsoError::InvalidConfig(_) | PsoError::PreviousMismatch { .. } => Category::Config,
        };
        Self::new(category, e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        use DatasetError::*;
        let category = match &e {
            Pso { source: PsoError::Infeasible { .. }, .. } => Category::Infeasible,
            InvalidSpec(_) | Scenario(_) | Channel(_) | Pso { .. } | WindowTooLong { .. } | InvalidSplit(_) => Category::Config,
            Io { .. } | MalformedHeader(_) | VersionMismatch { .. } | Metadata(_) | Truncated { .. } | Parse { .. } => Category::Io,
        };
        Self::new(category, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        use ModelError::*;
        let category = match &e {
            Config(_) | Input { .. } | EmptyTrainSet => Category::Config,
            Diverged { .. } => Category::Numeric,
            Io { .. } | Format(_) | Version { .. } | KindMismatch { .. } | Truncated { .. } | ParamShape { .. } => Category::Io,
        };
        Self::new(category, e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        use EvalError::*;
        match e {
            Model(m) => m.into(),
            ZeroNorm => Self::new(Category::Numeric, e.to_string()),
            Io { .. } => Self::new(Category::Io, e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}
