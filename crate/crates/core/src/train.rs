//! Joint mini-batch training of all encoders, the shared head and the
//! center bank.
//!
//! Each step encodes every modality of a batch, classifies through the
//! shared head, combines the three losses, backpropagates, applies momentum
//! SGD with weight decay to network parameters, and finally moves the class
//! centers with the explicit center rule.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{Dataset, Instance};
use crate::error::{Error, Result};
use crate::losses::{
    apply_center_update, center_delta, combined_loss, cross_modal_center_loss, cross_modal_mse, discriminative_loss,
    CenterBank, LossWeights, Reduction,
};
use crate::model::{classify, Model, ModelDims};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    /// Flat number of optimizer steps.
    Iterations(usize),
    /// Epochs of `floor(N / batch_size)` steps each.
    Epochs(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub budget: Budget,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub weights: LossWeights,
    pub center_lr: f64,
    pub center_reduction: Reduction,
    pub mse_reduction: Reduction,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            budget: Budget::Iterations(3000),
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.001,
            lr_decay_factor: 0.1,
            lr_decay_every: 2000,
            weights: LossWeights::default(),
            center_lr: 0.5,
            center_reduction: Reduction::Mean,
            mse_reduction: Reduction::Mean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be finite and >= 0"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("lr_decay_factor", "must lie in (0, 1]"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::config("lr_decay_every", "must be positive"));
        }
        if !(self.center_lr >= 0.0 && self.center_lr.is_finite()) {
            return Err(Error::config("center_lr", "must be finite and >= 0"));
        }
        self.weights.validate()
    }

    /// Optimizer steps for a training set of `n` instances.
    pub fn total_steps(&self, n: usize) -> usize {
        match self.budget {
            Budget::Iterations(it) => it,
            Budget::Epochs(e) => e * (n / self.batch_size.max(1)),
        }
    }
}

/// Step-decayed learning rate `lr * factor^floor(iteration / every)`.
pub fn lr_schedule(iteration: usize, cfg: &TrainConfig) -> f64 {
    let drops = (iteration / cfg.lr_decay_every.max(1)) as i32;
    cfg.learning_rate * cfg.lr_decay_factor.powi(drops)
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &Model<T>) -> Self {
        OptimizerState {
            velocity: model.params().iter().map(|(_, p)| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Classical momentum: `v <- mu v + g + lambda theta`, `theta <- theta - lr v`.
    /// Weight decay `lambda` applies to weight matrices only.
    pub fn step(&mut self, model: &mut Model<T>, lr: T, momentum: T, weight_decay: T) -> Result<()> {
        let mask = model.weight_mask();
        for ((param, vel), is_weight) in model.params_mut().into_iter().zip(&mut self.velocity).zip(mask) {
            let Some(grad) = param.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let decay = if is_weight { weight_decay } else { T::zero() };
            let values = param.values_mut();
            for ((theta, v), g) in values.iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = momentum * *v + g + decay * *theta;
                *theta = *theta - lr * *v;
            }
            if values.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "sgd_step" });
            }
        }
        Ok(())
    }
}

/// Draws `batch_size` distinct instance indices uniformly from `0..n`.
pub fn sample_minibatch(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::config(
            "batch_size",
            format!("must lie in 1..={n} for a dataset of {n} instances"),
        ));
    }
    Ok(rand::seq::index::sample(rng, n, batch_size).into_vec())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub total: f64,
    pub center: f64,
    pub disc: f64,
    pub mse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub lr: f64,
    pub metrics: StepMetrics,
}

/// Runs one forward/backward pass, updates parameters and centers, and
/// returns the losses measured before the update.
pub fn train_step<T: Scalar>(
    batch: &[&Instance<T>],
    model: &mut Model<T>,
    bank: &mut CenterBank<T>,
    opt: &mut OptimizerState<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    if bank.num_classes() != model.num_classes || bank.dim() != model.dims.embed_dim {
        return Err(Error::Shape {
            op: "train_step",
            left: vec![model.num_classes, model.dims.embed_dim],
            right: bank.centers().shape().to_vec(),
        });
    }
    let labels: Vec<usize> = batch.iter().map(|i| i.label).collect();

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut embeddings = Vec::with_capacity(model.encoders.len());
    let mut log_probs = Vec::with_capacity(model.encoders.len());
    for m in 0..model.encoders.len() {
        let input = model.stack_inputs(m, batch)?;
        let v = model.forward_modality(&mut tape, &bound, m, input)?;
        log_probs.push(classify(&mut tape, &bound.head, v)?);
        embeddings.push(v);
    }

    let l_c = cross_modal_center_loss(&mut tape, &embeddings, &labels, bank, cfg.center_reduction)?;
    let l_d = discriminative_loss(&mut tape, &log_probs, &labels)?;
    let l_m = cross_modal_mse(&mut tape, &embeddings, cfg.mse_reduction)?;
    let total = combined_loss(&mut tape, l_c, l_d, l_m, &cfg.weights)?;
    tape.backward(total)?;

    let item = |v| tape.item(v).expect("losses are scalars").as_f64();
    let metrics = StepMetrics {
        total: item(total),
        center: item(l_c),
        disc: item(l_d),
        mse: item(l_m),
    };

    for (param, var) in model.params_mut().into_iter().zip(bound.vars()) {
        let grad = tape
            .grad(var)
            .map_or_else(|| vec![T::zero(); param.len()], <[T]>::to_vec);
        param.set_grad(Some(grad))?;
    }
    opt.step(
        model,
        T::from_f64_lossy(lr),
        T::from_f64_lossy(cfg.momentum),
        T::from_f64_lossy(cfg.weight_decay),
    )?;

    let values: Vec<&Tensor<T>> = embeddings.iter().map(|&v| tape.value(v)).collect();
    let delta = center_delta(&values, &labels, bank)?;
    apply_center_update(bank, &delta)?;
    Ok(metrics)
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training state that can be advanced step by step.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub bank: CenterBank<T>,
    pub opt: OptimizerState<T>,
    pub cfg: TrainConfig,
    pub history: Vec<HistoryRow>,
    iteration: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    /// Seeds the model, the centers and the batch sampler from `cfg.seed`.
    pub fn new(train: &Dataset<T>, dims: ModelDims, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(train.modalities(), train.num_classes(), dims, cfg.seed)?;
        let bank = CenterBank::init(
            train.num_classes(),
            dims.embed_dim,
            T::from_f64_lossy(cfg.center_lr),
            derive_seed(cfg.seed, 1),
        )?;
        Self::from_parts(model, bank, cfg)
    }

    pub fn from_parts(model: Model<T>, bank: CenterBank<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = OptimizerState::new(&model);
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
        Ok(Trainer {
            model,
            bank,
            opt,
            cfg,
            history: Vec::new(),
            iteration: 0,
            rng,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step(&mut self, train: &Dataset<T>) -> Result<StepMetrics> {
        let idx = sample_minibatch(train.len(), self.cfg.batch_size, &mut self.rng)?;
        let batch: Vec<&Instance<T>> = idx.iter().map(|&i| &train.instances()[i]).collect();
        let lr = lr_schedule(self.iteration, &self.cfg);
        let metrics = train_step(&batch, &mut self.model, &mut self.bank, &mut self.opt, &self.cfg, lr)?;
        self.history.push(HistoryRow {
            iteration: self.iteration,
            lr,
            metrics,
        });
        self.iteration += 1;
        Ok(metrics)
    }

    pub fn run(&mut self, train: &Dataset<T>, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step(train)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub bank: CenterBank<T>,
    pub history: Vec<HistoryRow>,
}

/// Runs the full budget from a fresh seeded initialization.
pub fn run_training<T: Scalar>(train: &Dataset<T>, dims: ModelDims, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(train, dims, cfg.clone())?;
    let steps = cfg.total_steps(train.len());
    if steps > 0 && cfg.batch_size > train.len() {
        return Err(Error::config(
            "batch_size",
            format!("{} exceeds the {} training instances", cfg.batch_size, train.len()),
        ));
    }
    trainer.run(train, steps)?;
    Ok(TrainOutcome {
        model: trainer.model,
        bank: trainer.bank,
        history: trainer.history,
    })
}

/// Mean Euclidean distance from each (instance, modality) embedding to its
/// class center.
pub fn mean_center_distance<T: Scalar>(
    model: &Model<T>,
    bank: &CenterBank<T>,
    instances: &[&Instance<T>],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for m in 0..model.encoders.len() {
        let emb = model.embed_batch(m, instances)?;
        for (i, inst) in instances.iter().enumerate() {
            let d: f64 = emb
                .row(i)
                .iter()
                .zip(bank.center(inst.label))
                .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum();
            total += d.sqrt();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

pub const HISTORY_HEADER: &str = "iteration,lr,L,L_c,L_d,L_m";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        let m = r.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.lr, m.total, m.center, m.disc, m.mse
        ));
    }
    out
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(history_csv(rows).as_bytes())
        .map_err(|e| Error::io(path, e))
}
