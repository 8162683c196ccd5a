//! An LLM-driven evolutionary loop for iterative GPU kernel optimization.
//!
//! A population of kernel variants is grown one generation at a time:
//!
//! 1. [`selector`]: the selector model reads the population table and picks
//!    a Base kernel to modify and a Reference kernel to learn from.
//! 2. [`designer`]: the designer model proposes ten avenues and five
//!    experiment plans; three plans are chosen by a fixed rule.
//! 3. [`writer`]: three writer calls run concurrently, each turning one plan
//!    into a complete kernel plus a technique report.
//! 4. [`evaluation`]: candidates are benchmarked strictly one at a time.
//!
//! Everything is persisted under a workspace directory ([`population`],
//! [`knowledge`], and per-generation logs written by [`orchestrator`]), so
//! a run can be stopped and resumed.

pub mod config;
pub mod designer;
pub mod evaluation;
mod fsutil;
pub mod gateway;
pub mod knowledge;
pub mod orchestrator;
pub mod population;
pub mod selector;
pub mod textdoc;
pub mod writer;

pub use designer::{DesignOutput, ExperimentPlan, PerformanceRange};
pub use evaluation::{EvalOutcome, Evaluator, EvaluatorConfig};
pub use gateway::{ChatBackend, Gateway, GatewayConfig, RoleName};
pub use knowledge::{KnowledgeBase, KnowledgeDoc};
pub use orchestrator::{GenerationLog, Scientist};
pub use population::{BenchmarkReport, BenchmarkShape, KernelRecord, KernelStatus, Population, RecordId};
pub use selector::SelectionDecision;
