use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, early_stop, reduce_lr_on_plateau, AdamConfig, AdamState, Confusion, Metrics,
    Result, ScheduleConfig, TrainError,
};
use crate::data::{
    assemble_batch, test_window, train_windows, Dataset, InputKind, SliceWindow, WindowConfig,
};
use crate::graph::{backward, execute, forward_train, ExecOptions, NetworkGraph, Seed};
use crate::tensor::{cross_entropy, BnMode, Exec, Tensor};
use crate::weights::WeightStore;

pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_MAX_EPOCHS: usize = 50;
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub schedule: ScheduleConfig,
    pub max_epochs: usize,
    pub folds: usize,
    /// Share of each training fold held out (stratified) to monitor loss.
    pub val_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_input(kind: InputKind) -> Self {
        TrainConfig {
            batch_size: kind.default_batch(),
            adam: AdamConfig::default(),
            schedule: ScheduleConfig::default(),
            max_epochs: DEFAULT_MAX_EPOCHS,
            folds: DEFAULT_FOLDS,
            val_fraction: DEFAULT_VAL_FRACTION,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        let s = &self.schedule;
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(s.plateau_factor > 0.0 && s.plateau_factor < 1.0) {
            return bad(format!("plateau factor {} outside (0, 1)", s.plateau_factor));
        }
        if s.plateau_patience == 0 || s.early_stop_patience == 0 {
            return bad("patience values must be >= 1".into());
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and >= 0", self.adam.lr));
        }
        if self.folds < 2 {
            return bad(format!("need at least 2 folds, got {}", self.folds));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("validation fraction {} outside [0, 1)", self.val_fraction));
        }
        Ok(())
    }
}

/// How cases are cut into training samples.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleMode {
    /// k-slice windows assembled per the window config.
    Volumes(WindowConfig),
    /// Single slices of each listed modality, tiled to 3 channels.
    Slices { modalities: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Window(SliceWindow),
    Slice { modality: usize, slice: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Sample {
    case: usize,
    part: Part,
}

fn collect_samples(ds: &Dataset, cases: &[usize], mode: &SampleMode) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for &case in cases {
        let vc = &ds.manifest.cases[case];
        match mode {
            SampleMode::Volumes(w) => {
                out.extend(
                    train_windows(vc, w)?
                        .into_iter()
                        .map(|w| Sample { case, part: Part::Window(w) }),
                );
            }
            SampleMode::Slices { modalities } => {
                for modality in 0..modalities.len() {
                    for slice in vc.lo()..=vc.hi() {
                        out.push(Sample {
                            case,
                            part: Part::Slice { modality, slice },
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

fn assemble(
    ds: &Dataset,
    samples: &[Sample],
    mode: &SampleMode,
) -> Result<(HashMap<String, Tensor<f32>>, Vec<usize>)> {
    let labels = samples.iter().map(|s| ds.cases[s.case].label.index()).collect();
    let inputs = match mode {
        SampleMode::Volumes(cfg) => {
            let items: Vec<_> = samples
                .iter()
                .map(|s| match s.part {
                    Part::Window(w) => (&ds.cases[s.case], w),
                    Part::Slice { .. } => unreachable!("volume mode yields windows"),
                })
                .collect();
            assemble_batch(&items, cfg)?.into_map()
        }
        SampleMode::Slices { modalities } => {
            let s = ds.size;
            let mut data = Vec::with_capacity(samples.len() * 3 * s * s);
            for smp in samples {
                let Part::Slice { modality, slice } = smp.part else {
                    unreachable!("slice mode yields slices")
                };
                data.extend_from_slice(ds.cases[smp.case].slice_image(&modalities[modality], slice)?.data());
            }
            let t = Tensor::new(vec![samples.len(), 3, s, s], data).expect("dims match");
            HashMap::from([("input".to_string(), t)])
        }
    };
    Ok((inputs, labels))
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub train_acc: f64,
}

const HISTORY_FIELDS: usize = 5;

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr,train_acc\n");
    for r in history {
        writeln!(s, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr, r.train_acc)
            .expect("writing to a String");
    }
    s
}

pub fn write_history_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, history_csv(history)).map_err(|e| TrainError::io(path, e))
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: WeightStore,
    pub adam: AdamState,
    /// Learning rate for the next epoch.
    pub lr: f64,
    pub history: Vec<EpochRecord>,
    /// Lowest monitored loss so far and the weights that reached it.
    pub best: Option<(f64, WeightStore)>,
}

const MODEL: &str = "model/";
const BEST: &str = "best/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const STATE: &str = "state/";

impl Checkpoint {
    pub fn fresh(weights: WeightStore, lr: f64) -> Self {
        Checkpoint {
            weights,
            adam: AdamState::new(),
            lr,
            history: Vec::new(),
            best: None,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    /// Best weights if any epoch finished, else the current ones.
    pub fn best_weights(&self) -> &WeightStore {
        self.best.as_ref().map_or(&self.weights, |(_, w)| w)
    }

    pub fn to_store(&self) -> Result<WeightStore> {
        let mut s = WeightStore::new();
        let scalar = |v: f64| Tensor::new(vec![1], vec![v]).expect("one value");
        for (name, t) in self.weights.iter() {
            s.insert(format!("{MODEL}{name}"), t.clone())?;
        }
        if let Some((loss, w)) = &self.best {
            s.insert(format!("{STATE}best_loss"), scalar(*loss))?;
            for (name, t) in w.iter() {
                s.insert(format!("{BEST}{name}"), t.clone())?;
            }
        }
        for (prefix, moments) in [(ADAM_M, &self.adam.m), (ADAM_V, &self.adam.v)] {
            for (name, v) in moments {
                s.insert(format!("{prefix}{name}"), Tensor::new(vec![v.len()], v.clone())?)?;
            }
        }
        s.insert(format!("{STATE}step"), scalar(self.adam.step as f64))?;
        s.insert(format!("{STATE}lr"), scalar(self.lr))?;
        if !self.history.is_empty() {
            let flat = self
                .history
                .iter()
                .flat_map(|r| [r.epoch as f64, r.train_loss, r.val_loss, r.lr, r.train_acc])
                .collect();
            s.insert(
                format!("{STATE}history"),
                Tensor::new(vec![self.history.len(), HISTORY_FIELDS], flat)?,
            )?;
        }
        Ok(s)
    }

    pub fn from_store(s: &WeightStore) -> Result<Self> {
        let scalar = |name: &str| -> Result<f64> {
            s.get_as::<f64>(&format!("{STATE}{name}"))
                .map(|t| t.data()[0])
                .ok_or_else(|| TrainError::Checkpoint(format!("missing {STATE}{name}")))
        };
        let mut ck = Checkpoint::fresh(WeightStore::new(), scalar("lr")?);
        ck.adam.step = scalar("step")? as u64;
        let mut best = WeightStore::new();
        for (name, t) in s.iter() {
            if let Some(n) = name.strip_prefix(MODEL) {
                ck.weights.insert(n, t.clone())?;
            } else if let Some(n) = name.strip_prefix(BEST) {
                best.insert(n, t.clone())?;
            } else if let Some(n) = name.strip_prefix(ADAM_M) {
                ck.adam.m.insert(n.to_string(), t.to_dtype::<f32>().data().to_vec());
            } else if let Some(n) = name.strip_prefix(ADAM_V) {
                ck.adam.v.insert(n.to_string(), t.to_dtype::<f32>().data().to_vec());
            }
        }
        if let Some(h) = s.get_as::<f64>(&format!("{STATE}history")) {
            ck.history = h
                .data()
                .chunks(HISTORY_FIELDS)
                .map(|r| EpochRecord {
                    epoch: r[0] as usize,
                    train_loss: r[1],
                    val_loss: r[2],
                    lr: r[3],
                    train_acc: r[4],
                })
                .collect();
        }
        if !best.is_empty() {
            ck.best = Some((scalar("best_loss")?, best));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_store()?.save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&WeightStore::load(path)?)
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Mini-batch Adam on cross-entropy with plateau and early-stopping rules
/// driven by the validation loss.
pub struct Trainer<'a> {
    pub graph: &'a NetworkGraph,
    pub dataset: &'a Dataset,
    pub mode: SampleMode,
    pub cfg: TrainConfig,
    pub exec: Exec,
}

impl Trainer<'_> {
    fn opts(&self, bn_mode: BnMode) -> ExecOptions {
        ExecOptions {
            exec: self.exec,
            bn_mode,
            ..ExecOptions::default()
        }
    }

    /// Trains from `start` until `max_epochs` or early stopping, calling
    /// `on_epoch` after every epoch. Without validation cases the training
    /// loss is monitored instead.
    pub fn train(
        &self,
        start: Checkpoint,
        train_cases: &[usize],
        val_cases: &[usize],
        mut on_epoch: impl FnMut(&EpochRecord, &Checkpoint) -> Result<()>,
    ) -> Result<Checkpoint> {
        self.cfg.validate()?;
        self.graph.check_weights(&start.weights)?;
        let samples = collect_samples(self.dataset, train_cases, &self.mode)?;
        if samples.is_empty() {
            return Err(TrainError::Config("no training samples".into()));
        }
        let val = collect_samples(self.dataset, val_cases, &self.mode)?;
        let monitor = |ck: &Checkpoint| -> Vec<f64> { ck.history.iter().map(|r| r.val_loss).collect() };
        let mut ck = start;
        while ck.epochs_done() < self.cfg.max_epochs && !early_stop(&monitor(&ck), &self.cfg.schedule) {
            let epoch = ck.epochs_done() + 1;
            let mut order = samples.clone();
            order.shuffle(&mut epoch_rng(self.cfg.seed, epoch));
            let lr = ck.lr;
            let adam = AdamConfig { lr, ..self.cfg.adam };
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            for (batch, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
                let at = |source| TrainError::Numeric { epoch, batch, source };
                let (inputs, labels) = assemble(self.dataset, chunk, &self.mode)?;
                let tape = forward_train(self.graph, &ck.weights, &inputs, &self.opts(BnMode::Train)).map_err(at)?;
                let probs = tape.output();
                let loss = cross_entropy(probs, &labels).map_err(|e| TrainError::Config(e.to_string()))?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, batch });
                }
                loss_sum += loss * chunk.len() as f64;
                let k = probs.dims()[1];
                correct += probs
                    .data()
                    .chunks(k)
                    .zip(&labels)
                    .filter(|(row, &l)| argmax(row) == l)
                    .count();
                let grads = backward(self.graph, &ck.weights, &tape, Seed::SoftmaxCrossEntropy(&labels)).map_err(at)?;
                let running = tape.running_updates(self.graph, &ck.weights).map_err(at)?;
                drop(tape);
                match adam_step(&mut ck.weights, &grads.params, &mut ck.adam, &adam) {
                    Ok(()) => {}
                    Err(TrainError::NonFiniteGradient(slot)) => {
                        log::warn!("epoch {epoch} batch {batch}: non-finite gradient in {slot:?}, step skipped");
                        continue;
                    }
                    Err(e) => return Err(e),
                }
                for (slot, t) in running {
                    ck.weights.set(slot, t)?;
                }
            }
            let train_loss = loss_sum / order.len() as f64;
            let val_loss = if val.is_empty() {
                train_loss
            } else {
                self.mean_loss(&ck.weights, &val, epoch)?
            };
            let rec = EpochRecord {
                epoch,
                train_loss,
                val_loss,
                lr,
                train_acc: correct as f64 / order.len() as f64,
            };
            ck.history.push(rec);
            if ck.best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
                ck.best = Some((val_loss, ck.weights.clone()));
            }
            ck.lr = reduce_lr_on_plateau(&monitor(&ck), ck.lr, &self.cfg.schedule);
            on_epoch(&rec, &ck)?;
        }
        Ok(ck)
    }

    fn mean_loss(&self, w: &WeightStore, samples: &[Sample], epoch: usize) -> Result<f64> {
        let mut sum = 0.0;
        for (batch, chunk) in samples.chunks(self.cfg.batch_size).enumerate() {
            let (inputs, labels) = assemble(self.dataset, chunk, &self.mode)?;
            let out = execute(self.graph, w, &inputs, &self.opts(BnMode::Infer))
                .map_err(|source| TrainError::Numeric { epoch, batch, source })?;
            sum += cross_entropy(&out.output, &labels).map_err(|e| TrainError::Config(e.to_string()))?
                * chunk.len() as f64;
        }
        Ok(sum / samples.len() as f64)
    }
}

/// Case-level predictions on each case's test window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub confusion: Confusion,
    /// (case id, truth, predicted, class probabilities).
    pub predictions: Vec<(String, usize, usize, Vec<f64>)>,
}

/// Class probabilities for each case's test window.
pub fn predict_cases(
    g: &NetworkGraph,
    w: &WeightStore,
    ds: &Dataset,
    cases: &[usize],
    window: &WindowConfig,
    batch_size: usize,
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    let opts = ExecOptions {
        exec,
        ..ExecOptions::default()
    };
    let mut out = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(batch_size.max(1)) {
        let items = chunk
            .iter()
            .map(|&c| Ok((&ds.cases[c], test_window(&ds.manifest.cases[c], window)?)))
            .collect::<Result<Vec<_>>>()?;
        let inputs = assemble_batch(&items, window)?.into_map();
        let probs = execute(g, w, &inputs, &opts)?.output;
        let k = probs.dims()[1];
        out.extend(probs.data().chunks(k).map(|r| r.iter().map(|&p| p as f64).collect()));
    }
    Ok(out)
}

pub fn evaluate(
    g: &NetworkGraph,
    w: &WeightStore,
    ds: &Dataset,
    cases: &[usize],
    window: &WindowConfig,
    batch_size: usize,
    exec: Exec,
) -> Result<Evaluation> {
    if cases.is_empty() {
        return Err(TrainError::Config("no cases to evaluate".into()));
    }
    let probs = predict_cases(g, w, ds, cases, window, batch_size, exec)?;
    let mut predictions = Vec::with_capacity(cases.len());
    for (&c, p) in cases.iter().zip(probs) {
        let pred = p
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0;
        predictions.push((ds.cases[c].id.clone(), ds.cases[c].label.index(), pred, p));
    }
    let truth: Vec<usize> = predictions.iter().map(|p| p.1).collect();
    let pred: Vec<usize> = predictions.iter().map(|p| p.2).collect();
    let confusion = Confusion::from_pairs(&truth, &pred)?;
    Ok(Evaluation {
        metrics: Metrics::from_confusion(&confusion)?,
        confusion,
        predictions,
    })
}
