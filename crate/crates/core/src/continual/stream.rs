//! Class-incremental task splitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::seeding;
use crate::synthdata::SynthDataset;

/// One task: a disjoint class set plus its train/test example indices into
/// the backing dataset.
#[derive(Debug, Clone)]
pub struct Task {
    pub task_id: usize,
    pub classes: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Classes of tasks 0..=stage in ascending order.
    pub fn seen_classes(&self, stage: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.tasks[..=stage]
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Permutes the class ids by seed and partitions them into `t` equal
/// contiguous groups.
pub fn split_tasks(dataset: &SynthDataset, t: usize, seed: u64) -> Result<TaskStream> {
    let n_classes = dataset.cfg.n_classes;
    if t == 0 {
        return Err(Error::Contract("task count must be >= 1".into()));
    }
    if n_classes % t != 0 {
        return Err(Error::Contract(format!(
            "{n_classes} classes cannot be split into {t} equal tasks"
        )));
    }
    let per_task = n_classes / t;
    let mut order: Vec<usize> = (0..n_classes).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seeding::mix(seed, "task-split"));
    order.shuffle(&mut rng);

    let tasks = (0..t)
        .map(|task_id| {
            let classes: Vec<usize> = order[task_id * per_task..(task_id + 1) * per_task].to_vec();
            let member = |label: usize| classes.contains(&label);
            let train_indices = dataset
                .train
                .iter()
                .enumerate()
                .filter(|(_, e)| member(e.label))
                .map(|(i, _)| i)
                .collect();
            let test_indices = dataset
                .test
                .iter()
                .enumerate()
                .filter(|(_, e)| member(e.label))
                .map(|(i, _)| i)
                .collect();
            Task {
                task_id,
                classes,
                train_indices,
                test_indices,
            }
        })
        .collect();
    Ok(TaskStream { tasks })
}
