//! Shared run orchestration used by the CLI and the C bindings: resolve a
//! run description into data splits, a black box and (optionally) a trained
//! checkpoint.

use crate::blackbox::BlackboxArtifact;
use crate::config::{ResolvedRun, Task};
use crate::data::{gen_synth, load_mnist_dir, DataSplits};
use crate::error::Result;
use crate::nets::{BlackBox, ModelBlackBox};
use crate::trainer::{train_vibi, TrainOutput};

/// Task data plus the black box to explain.
pub struct TaskEnv {
    pub splits: DataSplits,
    pub blackbox: Box<dyn BlackBox>,
    /// Ground-truth relevant chunks (synthetic tasks only).
    pub truth: Option<Vec<usize>>,
}

/// Materialize the data and black box of a resolved run. The MNIST task
/// loads its black-box artifact from the resolved path, so `train-blackbox`
/// must have run first.
pub fn load_task(run: &ResolvedRun) -> Result<TaskEnv> {
    match run.config.task {
        Task::Synthetic => {
            let spec = run.config.synthetic.clone().unwrap_or_default();
            let task = gen_synth(&spec, run.seed)?;
            Ok(TaskEnv {
                splits: task.splits,
                blackbox: Box::new(task.blackbox),
                truth: Some(task.relevant),
            })
        }
        Task::Mnist => {
            let m = run.config.mnist.as_ref().expect("resolved");
            let splits = load_mnist_dir(&m.dir)?;
            let artifact = BlackboxArtifact::load(m.blackbox_path.as_ref().expect("resolved"))?;
            let model = artifact.model()?;
            Ok(TaskEnv {
                splits,
                blackbox: Box::new(ModelBlackBox::new(model)?),
                truth: None,
            })
        }
    }
}

/// Train the explainer/approximator pair of a resolved run.
pub fn train_run(run: &ResolvedRun, env: &TaskEnv) -> Result<TrainOutput> {
    train_vibi(&env.splits, env.blackbox.as_ref(), &run.vibi, run.loss_mode)
}
