use casam_tensor::{derive_seed, Rng};

use super::render::{render_task, Sample};
use super::spec::{validate_stream, TaskSpec};
use crate::error::{CoreError, Result};

/// One task's specification with its train and test splits.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Default shift magnitude for the built-in catalogue.
pub const FULL_SHIFT: f64 = 1.0;

/// A stream of `n_tasks` catalogue domains at full shift.
pub fn generate_stream(
    n_tasks: usize,
    per_task_train: usize,
    per_task_test: usize,
    master_seed: u64,
) -> Result<Vec<TaskData>> {
    if n_tasks == 0 {
        return Err(CoreError::invalid("a stream needs at least one task"));
    }
    let specs: Vec<TaskSpec> = (0..n_tasks)
        .map(|i| TaskSpec::preset(i, FULL_SHIFT, derive_seed(master_seed, &format!("preset/{}", i))))
        .collect();
    generate_from_specs(&specs, per_task_train, per_task_test, master_seed)
}

/// Samples data for explicit task specs. A task's pixels depend only on
/// `master_seed` and its own seed, never on its position in the list, so
/// reordering the specs reorders the data and nothing else.
pub fn generate_from_specs(
    specs: &[TaskSpec],
    per_task_train: usize,
    per_task_test: usize,
    master_seed: u64,
) -> Result<Vec<TaskData>> {
    if specs.is_empty() {
        return Err(CoreError::invalid("a stream needs at least one task"));
    }
    validate_stream(specs)?;
    Ok(specs
        .iter()
        .map(|spec| TaskData {
            spec: spec.clone(),
            train: sample_split(spec, master_seed, "train", per_task_train),
            test: sample_split(spec, master_seed, "test", per_task_test),
        })
        .collect())
}

/// Draws `count` samples of one split.
pub fn sample_split(spec: &TaskSpec, master_seed: u64, split: &str, count: usize) -> Vec<Sample> {
    let base = derive_seed(master_seed, &format!("task/{}/{}", spec.seed, split));
    let mut rng = Rng::new(base);
    (0..count).map(|_| render_task(spec, &mut rng)).collect()
}
