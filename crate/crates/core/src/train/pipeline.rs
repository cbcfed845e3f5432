use serde::{Deserialize, Serialize};

use super::{
    evaluate, stratified_holdout, Checkpoint, EpochRecord, Evaluation, Result, SampleMode,
    TrainConfig, TrainError, Trainer,
};
use crate::data::{Dataset, WindowConfig};
use crate::graph::NetworkGraph;
use crate::inflation::{build_fusion, inflate_graph, InflationPolicy};
use crate::tensor::Exec;
use crate::weights::WeightStore;
use crate::zoo::{random_init, BackboneConfig};

/// Backbone plus the inflation and fusion applied to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub policy: InflationPolicy,
}

impl ModelSpec {
    /// The 2D backbone with seeded random weights.
    pub fn build_2d(&self, seed: u64) -> Result<(NetworkGraph, WeightStore)> {
        let g = self.backbone.build()?;
        let w = random_init(&g, seed)?;
        Ok((g, w))
    }

    /// Inflates `w2` and applies the fusion rewrite of `window`.
    pub fn inflate(
        &self,
        g2: &NetworkGraph,
        w2: &WeightStore,
        window: &WindowConfig,
    ) -> Result<(NetworkGraph, WeightStore)> {
        let (g3, w3) = inflate_graph(g2, w2, &self.policy)?;
        Ok(build_fusion(&g3, &w3, &window.fusion)?)
    }

    /// The fused 3D network with weights drawn directly in 3D.
    pub fn scratch_3d(&self, window: &WindowConfig, seed: u64) -> Result<(NetworkGraph, WeightStore)> {
        let (g2, w2) = self.build_2d(seed)?;
        let (g, _) = self.inflate(&g2, &w2, window)?;
        let w = random_init(&g, seed)?;
        Ok((g, w))
    }
}

/// Starting point of the 3D network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Scratch,
    /// Train the 2D backbone on single slices for this many epochs, then
    /// inflate.
    Pretrained2d { epochs: usize },
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub graph: NetworkGraph,
    pub checkpoint: Checkpoint,
    pub pretrain_history: Vec<EpochRecord>,
    pub evaluation: Evaluation,
}

/// Which stage an epoch callback reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain2d,
    Train3d,
}

/// (train, test) case indices of `fold`.
pub fn fold_cases(assignment: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    (0..assignment.len()).partition(|&i| assignment[i] != fold)
}

/// Trains on all folds but `fold` (minus a stratified validation holdout)
/// and evaluates on `fold`. With `resume`, training continues from that
/// graph and checkpoint and `init` is ignored.
#[allow(clippy::too_many_arguments)]
pub fn run_fold(
    spec: &ModelSpec,
    ds: &Dataset,
    window: &WindowConfig,
    cfg: &TrainConfig,
    init: Init,
    assignment: &[usize],
    fold: usize,
    exec: Exec,
    resume: Option<(NetworkGraph, Checkpoint)>,
    mut on_epoch: impl FnMut(Stage, &EpochRecord, &Checkpoint) -> Result<()>,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    if assignment.len() != ds.len() {
        return Err(TrainError::Config(format!(
            "fold assignment covers {} cases but the dataset has {}",
            assignment.len(),
            ds.len()
        )));
    }
    let (train_all, test) = fold_cases(assignment, fold);
    if test.is_empty() || train_all.is_empty() {
        return Err(TrainError::Config(format!("fold {fold} leaves an empty split")));
    }
    let labels = ds.labels();
    let (train, val) = stratified_holdout(&train_all, &labels, cfg.val_fraction, cfg.seed.wrapping_add(fold as u64));
    let seed = cfg.seed.wrapping_add(fold as u64);
    let run_cfg = TrainConfig { seed, ..cfg.clone() };

    let (graph, start, pretrain_history) = match (resume, init) {
        (Some((g, ck)), _) => (g, ck, Vec::new()),
        (None, Init::Scratch) => {
            let (g, w) = spec.scratch_3d(window, seed)?;
            (g, Checkpoint::fresh(w, cfg.adam.lr), Vec::new())
        }
        (None, Init::Pretrained2d { epochs }) => {
            let (g2, w2) = spec.build_2d(seed)?;
            let trainer = Trainer {
                graph: &g2,
                dataset: ds,
                mode: SampleMode::Slices {
                    modalities: window.fusion.modalities.clone(),
                },
                cfg: TrainConfig {
                    max_epochs: epochs,
                    ..run_cfg.clone()
                },
                exec,
            };
            let ck = trainer.train(Checkpoint::fresh(w2, cfg.adam.lr), &train, &val, |r, c| {
                on_epoch(Stage::Pretrain2d, r, c)
            })?;
            let (g, w) = spec.inflate(&g2, ck.best_weights(), window)?;
            (g, Checkpoint::fresh(w, cfg.adam.lr), ck.history)
        }
    };
    let trainer = Trainer {
        graph: &graph,
        dataset: ds,
        mode: SampleMode::Volumes(window.clone()),
        cfg: run_cfg,
        exec,
    };
    let checkpoint = trainer.train(start, &train, &val, |r, c| {
        on_epoch(Stage::Train3d, r, c)
    })?;
    let evaluation = evaluate(&graph, checkpoint.best_weights(), ds, &test, window, cfg.batch_size, exec)?;
    Ok(FoldOutcome {
        fold,
        graph,
        checkpoint,
        pretrain_history,
        evaluation,
    })
}
