//! Desk-scale training: tape autodiff with straight-through binarizers, SGD
//! with momentum, and the staged binarization schedule.
//!
//! Stage 1 trains with the local feature module and fuse layer binarized and
//! the transformer in full precision. Stage 2 freezes the binarized local
//! tensors and trains with transformer weights and projection inputs
//! binarized. Stage 3 switches on DYNAMIC binarization of Q, K, V and the
//! attention matrix and only evaluates.

pub mod dataset;
pub mod graph;
pub mod metrics;

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binmodules::model::{forward, BinFlags, Model, ParamGroup};
use crate::binmodules::sampling::CloudPlan;
use crate::binmodules::PointCloud;
use crate::error::{Error, Result};
use crate::quantize::SCALE_FLOOR;
use crate::tensor::Tensor;

pub use dataset::{synth_dataset, Dataset, Shape};
pub use graph::{ste_grad, Graph, Var};
pub use metrics::{accuracy, evaluate, evaluate_detailed, EpochRecord, EvalResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    /// training clouds used to fit static quantizers at each stage start
    pub calibration_clouds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 40,
            stage2_epochs: 10,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 16,
            seed: 0,
            schedule: Schedule::Cosine,
            calibration_clouds: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!("weight decay {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.calibration_clouds == 0 {
            return Err(Error::InvalidArgument("batch size and calibration clouds must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for `epoch` (0-based) of a stage lasting `epochs`.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => 0.5 * self.learning_rate * (1.0 + (PI * epoch as f64 / epochs.max(1) as f64).cos()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    S1NonTransformer,
    S2TransformerWeights,
    S3DynamicActivations,
    /// control run: everything binarized from the start
    AllAtOnce,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::S1NonTransformer => "s1",
            Stage::S2TransformerWeights => "s2",
            Stage::S3DynamicActivations => "s3",
            Stage::AllAtOnce => "all_at_once",
        }
    }

    pub fn flags(self) -> BinFlags {
        match self {
            Stage::S1NonTransformer => BinFlags::STAGE1,
            Stage::S2TransformerWeights => BinFlags::STAGE2,
            Stage::S3DynamicActivations | Stage::AllAtOnce => BinFlags::ALL,
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageState {
    pub stage: Stage,
    /// parameter names excluded from updates
    pub frozen: BTreeSet<String>,
}

impl StageState {
    /// Move forward to `next`; the staged schedule never goes back and the
    /// control run is never mixed with it.
    pub fn advance(&mut self, next: Stage, model: &Model) -> Result<()> {
        let ok = match (self.stage, next) {
            (Stage::AllAtOnce, _) | (_, Stage::AllAtOnce) => false,
            (a, b) => b > a,
        };
        if !ok {
            return Err(Error::StageViolation(format!("cannot go from {:?} to {:?}", self.stage, next)));
        }
        if next == Stage::S2TransformerWeights {
            for (name, _, _, g) in model.config.binary_layers() {
                if g == ParamGroup::Local {
                    for p in ["weight", "bias", "in.shift", "in.scale"] {
                        self.frozen.insert(format!("{name}.{p}"));
                    }
                }
            }
        }
        if next == Stage::S3DynamicActivations {
            self.frozen = model.params.iter().map(|(n, _)| n.to_string()).collect();
        }
        self.stage = next;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

/// Training state over a fixed train/validation split.
pub struct Trainer<'d> {
    pub model: Model,
    pub state: StageState,
    pub cfg: TrainConfig,
    train: &'d [PointCloud],
    train_plans: Vec<CloudPlan>,
    val: &'d Dataset,
    val_plans: Vec<CloudPlan>,
    velocity: Vec<Option<Tensor>>,
    scale_ids: Vec<usize>,
    pub history: Vec<EpochRecord>,
}

/// Loss and parameter gradients for one labeled cloud.
pub fn sample_gradients(model: &Model, plan: &CloudPlan, cloud: &PointCloud) -> Result<(f64, Vec<Option<Tensor>>)> {
    let label = cloud.label.ok_or_else(|| Error::InvalidArgument("unlabeled training cloud".into()))?;
    let mut g = Graph::new(model);
    let logits = forward(model, &mut g, plan, &cloud.points)?;
    let loss = g.cross_entropy(logits, label)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).data()[0], grads))
}

/// Mean loss and summed gradients over a batch. Samples run in parallel;
/// the reduction runs in batch order, so results do not depend on the
/// thread count.
pub fn batch_gradients(model: &Model, batch: &[(&CloudPlan, &PointCloud)]) -> Result<(f64, Vec<Option<Tensor>>)> {
    let per: Vec<_> = batch
        .par_iter()
        .map(|(p, c)| sample_gradients(model, p, c))
        .collect::<Result<_>>()?;
    let mut total = vec![None::<Tensor>; model.params.len()];
    let mut loss = 0.0;
    for (l, grads) in per {
        loss += l;
        for (t, g) in total.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match t {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => *t = Some(g),
            }
        }
    }
    Ok((loss / batch.len() as f64, total))
}

impl<'d> Trainer<'d> {
    pub fn new(model: Model, train: &'d Dataset, val: &'d Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let train_plans = metrics::plan_all(&model, &train.clouds)?;
        let val_plans = metrics::plan_all(&model, &val.clouds)?;
        let scale_ids = model
            .params
            .iter()
            .enumerate()
            .filter(|(_, (n, _))| n.ends_with(".in.scale"))
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            velocity: vec![None; model.params.len()],
            model,
            state: StageState {
                stage: Stage::S1NonTransformer,
                frozen: BTreeSet::new(),
            },
            cfg,
            train: &train.clouds,
            train_plans,
            val,
            val_plans,
            scale_ids,
            history: Vec::new(),
        })
    }

    /// Set the stage's flags and fit its newly active static quantizers.
    pub fn begin(&mut self, stage: Stage) -> Result<()> {
        self.begin_with(stage, stage.flags())
    }

    fn begin_with(&mut self, stage: Stage, flags: BinFlags) -> Result<()> {
        if stage != self.state.stage {
            self.state.advance(stage, &self.model)?;
        }
        self.model.flags = flags;
        self.velocity = vec![None; self.model.params.len()];
        let n = self.cfg.calibration_clouds.min(self.train.len());
        let inputs: Vec<(&CloudPlan, &Tensor)> = self.train_plans[..n]
            .iter()
            .zip(&self.train[..n])
            .map(|(p, c)| (p, &c.points))
            .collect();
        self.model.calibrate_acts(&inputs)
    }

    /// One SGD step on the given training indices.
    pub fn step(&mut self, batch: &[usize], lr: f64) -> Result<f64> {
        if self.state.stage == Stage::S3DynamicActivations {
            return Err(Error::StageViolation("no parameter updates in the inference-only stage".into()));
        }
        let items: Vec<(&CloudPlan, &PointCloud)> = batch.iter().map(|&i| (&self.train_plans[i], &self.train[i])).collect();
        let (loss, grads) = batch_gradients(&self.model, &items)?;
        let inv = 1.0 / batch.len() as f64;
        let (mom, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if self.state.frozen.contains(self.model.params.name(id)) {
                continue;
            }
            let w = self.model.params.value_mut(id);
            let v = self.velocity[id].get_or_insert_with(|| Tensor::zeros(w.rows(), w.cols()));
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = mom * *vi + gi * inv + wd * *wi;
                *wi -= lr * *vi;
            }
        }
        for &id in &self.scale_ids {
            let s = self.model.params.value_mut(id);
            s.data_mut()[0] = s.data()[0].max(SCALE_FLOOR);
        }
        self.model.sync_packed()?;
        Ok(loss)
    }

    pub fn evaluate_val(&self) -> Result<EvalResult> {
        metrics::evaluate_planned(&self.model, &self.val.clouds, &self.val_plans, self.val.classes)
    }

    /// Train for `epochs` epochs in the current stage.
    pub fn run_epochs(&mut self, epochs: usize) -> Result<()> {
        let stage = self.state.stage;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        for e in 0..epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(stage.index() << 32 | e as u64);
            order.shuffle(&mut rng);
            let lr = self.cfg.lr_at(e, epochs);
            let mut loss = 0.0;
            let chunks: Vec<Vec<usize>> = order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect();
            for b in &chunks {
                loss += self.step(b, lr)? * b.len() as f64;
            }
            let ev = self.evaluate_val()?;
            let rec = EpochRecord {
                stage: stage.label().into(),
                epoch: e + 1,
                loss: loss / self.train.len() as f64,
                oa: ev.oa,
                macc: ev.macc,
                attn_entropy: ev.attn_entropy,
            };
            log::info!("{}", rec.to_json_line());
            self.history.push(rec);
        }
        Ok(())
    }

    /// Enter the inference-only stage: dynamic transformer activations on,
    /// every static quantizer frozen, one evaluation record.
    pub fn finish(&mut self) -> Result<EvalResult> {
        if self.state.stage != Stage::AllAtOnce {
            self.begin(Stage::S3DynamicActivations)?;
        }
        self.model.frozen = true;
        let ev = self.evaluate_val()?;
        self.history.push(EpochRecord {
            stage: self.state.stage.label().into(),
            epoch: 0,
            loss: ev.loss,
            oa: ev.oa,
            macc: ev.macc,
            attn_entropy: ev.attn_entropy,
        });
        Ok(ev)
    }
}

/// The staged scheme: stage 1 and stage 2 training, then inference-only
/// evaluation with dynamic activation binarization. With both epoch counts
/// zero the model is returned untouched.
pub fn hierarchical_train(train: &Dataset, val: &Dataset, model: Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage1_epochs == 0 && cfg.stage2_epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history: Vec::new(),
        });
    }
    let mut t = Trainer::new(model, train, val, cfg.clone())?;
    t.begin(Stage::S1NonTransformer)?;
    t.run_epochs(cfg.stage1_epochs)?;
    t.begin(Stage::S2TransformerWeights)?;
    t.run_epochs(cfg.stage2_epochs)?;
    t.finish()?;
    Ok(TrainOutcome {
        model: t.model,
        history: t.history,
    })
}

/// Control: the fully binary network trained from the start for the same
/// total epoch budget.
pub fn all_at_once_train(train: &Dataset, val: &Dataset, model: Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    fixed_flags_train(train, val, model, cfg, BinFlags::ALL)
}

/// Train with one binarization setting throughout for the combined epoch
/// budget of both stages; used for the control run and ablations.
pub fn fixed_flags_train(train: &Dataset, val: &Dataset, model: Model, cfg: &TrainConfig, flags: BinFlags) -> Result<TrainOutcome> {
    cfg.validate()?;
    let epochs = cfg.stage1_epochs + cfg.stage2_epochs;
    if epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history: Vec::new(),
        });
    }
    let mut t = Trainer::new(model, train, val, cfg.clone())?;
    t.state.stage = Stage::AllAtOnce;
    t.begin_with(Stage::AllAtOnce, flags)?;
    t.run_epochs(epochs)?;
    t.finish()?;
    Ok(TrainOutcome {
        model: t.model,
        history: t.history,
    })
}
