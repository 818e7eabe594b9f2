//! Minibatch training with an optional per-example gradient transform, plus
//! top-k evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{MobilityDataset, Split, Trajectory};
use crate::error::{Error, Result};
use crate::model::{rank_of, Example, Gradient, PoiModel};
use crate::seed::{rng_for, STREAM_TRAIN};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { lr: f64, momentum: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    /// Stop after this many epochs without a validation top-10 improvement.
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
    /// Evaluate top-1/top-10 on the VALID split after every epoch.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 200,
            optimizer: Optimizer::default(),
            weight_decay: 0.0,
            early_stop_patience: None,
            seed: 0,
            validate: true,
        }
    }
}

impl TrainConfig {
    pub fn validate_config(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::Config("early_stop_patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Replaces plain gradient averaging for a batch, e.g. with clipping and noise.
pub trait GradientHook {
    /// Receives one gradient per example and returns the batch gradient to apply.
    fn aggregate(&mut self, per_example: Vec<Gradient>) -> Result<Gradient>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: Option<f64>,
    pub val_top10: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
    pub early_stopped: bool,
}

impl TrainLog {
    /// Delimited text, one record per epoch.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("epoch,train_loss,val_top1,val_top10\n");
        for e in &self.epochs {
            s += &format!("{},{},{},{}\n", e.epoch, e.train_loss, fmt(e.val_top1), fmt(e.val_top10));
        }
        s
    }
}

/// (trajectory index, prefix length) pairs: a trajectory of length n yields n-1 examples.
pub fn example_index(trajectories: &[&Trajectory], mask: Option<usize>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (ti, t) in trajectories.iter().enumerate() {
        for i in 1..t.visits.len() {
            if Some(t.visits[i].location) != mask {
                out.push((ti, i));
            }
        }
    }
    out
}

struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, opt: &Optimizer, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match *opt {
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                let step = lr / c1;
                let c2s = c2.sqrt();
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    params[i] -= step * self.m[i] / (self.v[i].sqrt() / c2s + eps);
                }
            }
            Optimizer::SgdMomentum { lr, momentum } => {
                for i in 0..params.len() {
                    self.m[i] = momentum * self.m[i] + grad[i];
                    params[i] -= lr * self.m[i];
                }
            }
        }
    }
}

pub fn train(
    model: &mut PoiModel,
    ds: &MobilityDataset,
    cfg: &TrainConfig,
    hook: Option<&mut dyn GradientHook>,
) -> Result<TrainLog> {
    train_with(model, ds, cfg, hook, &mut |_, _| {})
}

/// Trains on the TRAIN split. `on_epoch` sees the model after every epoch.
pub fn train_with(
    model: &mut PoiModel,
    ds: &MobilityDataset,
    cfg: &TrainConfig,
    mut hook: Option<&mut dyn GradientHook>,
    on_epoch: &mut dyn FnMut(&PoiModel, &EpochMetrics),
) -> Result<TrainLog> {
    cfg.validate_config()?;
    let train_set: Vec<&Trajectory> = ds.split(Split::Train).collect();
    let mask = model.mask_location();
    let mut examples = example_index(&train_set, Some(mask));
    if examples.is_empty() {
        return Err(Error::EmptyDataset("no TRAIN examples".into()));
    }
    let has_valid = cfg.validate && ds.split(Split::Valid).next().is_some();
    if model.epoch == 0 {
        model.rng = rng_for(cfg.seed, &[STREAM_TRAIN]);
    }
    let mut state = OptimizerState::new(model.params().len());
    let mut log = TrainLog::default();
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0;

    for _ in 0..cfg.epochs {
        examples.shuffle(&mut model.rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in examples.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Example> = chunk
                .iter()
                .map(|&(ti, i)| {
                    let t = train_set[ti];
                    Example {
                        user: t.user,
                        prefix: &t.visits[..i],
                        target: t.visits[i].location,
                    }
                })
                .collect();
            let (mut grad, loss) = match hook.as_deref_mut() {
                None => {
                    let (g, l) = model.gradient(&batch)?;
                    (g, l * batch.len() as f64)
                }
                Some(h) => {
                    let per = model.per_example_gradients(&batch)?;
                    let loss: f64 = per.iter().map(|(_, l)| l).sum();
                    let g = h.aggregate(per.into_iter().map(|(g, _)| g).collect())?;
                    (g, loss)
                }
            };
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {} batch {bi}: loss {loss}, gradient finite: {}",
                    model.epoch + 1,
                    grad.is_finite()
                )));
            }
            loss_sum += loss;
            if cfg.weight_decay > 0.0 {
                crate::model::axpy(cfg.weight_decay, model.params(), &mut grad.0);
            }
            state.step(&cfg.optimizer, model.params_mut(), &grad.0);
        }
        model.epoch += 1;
        if !model.all_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {}", model.epoch)));
        }
        let (val_top1, val_top10) = if has_valid {
            let acc = evaluate_topk(model, ds, Split::Valid, &[1, 10])?;
            (Some(acc[0]), Some(acc[1]))
        } else {
            (None, None)
        };
        let metrics = EpochMetrics {
            epoch: model.epoch,
            train_loss: loss_sum / examples.len() as f64,
            val_top1,
            val_top10,
        };
        on_epoch(model, &metrics);
        log.epochs.push(metrics);
        if let (Some(patience), Some(score)) = (cfg.early_stop_patience, val_top10) {
            if score > best {
                best = score;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    log.early_stopped = true;
                    break;
                }
            }
        }
    }
    Ok(log)
}

/// Fraction of (prefix, next location) pairs in `split` whose target is among
/// the `k` largest logits, for each `k`.
pub fn evaluate_topk(model: &PoiModel, ds: &MobilityDataset, split: Split, ks: &[usize]) -> Result<Vec<f64>> {
    let mut hits = vec![0usize; ks.len()];
    let mut total = 0usize;
    for t in ds.split(split) {
        let outputs = model.prefix_logits(t.user, &t.visits[..t.visits.len() - 1])?;
        for (logits, v) in outputs.iter().zip(&t.visits[1..]) {
            if v.location >= logits.len() {
                continue;
            }
            let rank = rank_of(logits, v.location);
            for (h, &k) in hits.iter_mut().zip(ks) {
                if rank < k {
                    *h += 1;
                }
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset(format!("{split:?} split has no examples")));
    }
    Ok(hits.into_iter().map(|h| h as f64 / total as f64).collect())
}

/// Top-k accuracy on `split` of always predicting the most frequent TRAIN targets.
pub fn popularity_baseline(ds: &MobilityDataset, split: Split, ks: &[usize]) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; ds.n_locations()];
    for t in ds.split(Split::Train) {
        for v in &t.visits[1..] {
            counts[v.location] += 1.0;
        }
    }
    let mut hits = vec![0usize; ks.len()];
    let mut total = 0;
    for t in ds.split(split) {
        for v in &t.visits[1..] {
            let rank = rank_of(&counts, v.location);
            for (h, &k) in hits.iter_mut().zip(ks) {
                if rank < k {
                    *h += 1;
                }
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset(format!("{split:?} split has no examples")));
    }
    Ok(hits.into_iter().map(|h| h as f64 / total as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, Location, SynthConfig, Visit};
    use crate::model::ModelConfig;

    fn tiny() -> MobilityDataset {
        synth_generate(&SynthConfig {
            n_users: 8,
            n_locations: 12,
            n_days: 6,
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap()
        .0
    }

    fn small_model(ds: &MobilityDataset, seed: u64) -> PoiModel {
        PoiModel::new(
            ModelConfig {
                user_embed_dim: 4,
                loc_embed_dim: 4,
                hidden_dim: 8,
                seed,
                ..ModelConfig::default()
            },
            ds.n_users,
            ds.n_locations(),
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_rejected() {
        let ds = tiny();
        let mut m = small_model(&ds, 0);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut m, &ds, &cfg, None), Err(Error::Config(_))));
    }

    #[test]
    fn equal_seeds_give_identical_parameters() {
        let ds = tiny();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let mut a = small_model(&ds, 1);
        let mut b = small_model(&ds, 1);
        train(&mut a, &ds, &cfg, None).unwrap();
        train(&mut b, &ds, &cfg, None).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.epoch(), 3);
    }

    #[test]
    fn loss_decreases_on_small_data() {
        let ds = tiny();
        let mut m = small_model(&ds, 2);
        let cfg = TrainConfig {
            epochs: 30,
            optimizer: Optimizer::adam(1e-2),
            ..TrainConfig::default()
        };
        let log = train(&mut m, &ds, &cfg, None).unwrap();
        assert!(log.epochs.last().unwrap().train_loss < log.epochs[0].train_loss);
        assert!(log.to_csv().starts_with("epoch,train_loss,val_top1,val_top10\n1,"));
    }

    #[test]
    fn early_stop_does_not_fire_while_improving() {
        let ds = tiny();
        let mut m = small_model(&ds, 3);
        let cfg = TrainConfig {
            epochs: 4,
            early_stop_patience: Some(5),
            ..TrainConfig::default()
        };
        let log = train(&mut m, &ds, &cfg, None).unwrap();
        assert!(!log.early_stopped);
        assert_eq!(log.epochs.len(), 4);
    }

    #[test]
    fn topk_with_k_equal_to_location_count_is_one() {
        let ds = tiny();
        let m = small_model(&ds, 5);
        let acc = evaluate_topk(&m, &ds, Split::Test, &[ds.n_locations()]).unwrap();
        assert_eq!(acc, vec![1.0]);
    }

    #[test]
    fn topk_hand_enumeration() {
        // Three examples with a zeroed output layer and hand-set biases:
        // logits are the bias vector [0, 3, 2, 1] for every query, so the
        // ranking is 1, 2, 3, 0. Targets 1, 3, 0 have ranks 0, 2, 3.
        let ds = MobilityDataset {
            n_users: 1,
            locations: vec![Location { latitude: 0.0, longitude: 0.0 }; 4],
            trajectories: vec![crate::data::Trajectory {
                user: 0,
                day: None,
                split: Split::Test,
                visits: vec![Visit::new(2, 0.1), Visit::new(1, 0.2), Visit::new(3, 0.3), Visit::new(0, 0.4)],
            }],
            user_ids: vec!["u".into()],
            location_ids: (0..4).map(|i| i.to_string()).collect(),
            preprocess: None,
        };
        let mut m = small_model(&ds, 6);
        m.zero_output_layer();
        let ob = m.layout().out_b;
        m.params_mut()[ob..ob + 4].copy_from_slice(&[0.0, 3.0, 2.0, 1.0]);
        let acc = evaluate_topk(&m, &ds, Split::Test, &[1, 3, 4]).unwrap();
        assert_eq!(acc, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }
}
