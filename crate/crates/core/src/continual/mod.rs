//! Class-incremental engine: task splitting, exemplar replay, and the
//! per-task training loop for every trainable mode.

mod buffer;
mod engine;
mod stream;

pub use buffer::{select_exemplars, ReplayBuffer};
pub use engine::{run_stream, RunArtifacts, Trainer};
pub use stream::{split_tasks, Task, TaskStream};
