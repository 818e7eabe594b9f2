//! Membership inference with the likelihood-ratio test against a shadow
//! ensemble: location-level targets scored by spatial-temporal probing and
//! trajectory-level targets scored by mean next-step confidence.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{MobilityDataset, Split, Trajectory, Visit};
use crate::error::{Error, Result};
use crate::model::{softmax, ModelConfig, PoiModel, PoiOracle, PROB_FLOOR};
use crate::seed::{derive_seed, rng_for, STREAM_CARRIER, STREAM_SHADOW, STREAM_SPATEM};
use crate::train::{train, TrainConfig};

pub const VARIANCE_FLOOR: f64 = 1e-12;
const PHI_CLAMP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocTarget {
    pub user: usize,
    pub location: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajTarget {
    pub user: usize,
    pub visits: Vec<Visit>,
}

impl TrajTarget {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        Self {
            user: t.user,
            visits: t.visits.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpaTemConfig {
    pub n_t: usize,
    pub n_l: usize,
    pub seed: u64,
}

impl Default for SpaTemConfig {
    fn default() -> Self {
        Self { n_t: 10, n_l: 10, seed: 0 }
    }
}

impl SpaTemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 || self.n_l == 0 {
            return Err(Error::Config("n_t and n_l must be at least 1".into()));
        }
        Ok(())
    }
}

/// Confidence that `target.user` visits `target.location`.
///
/// At each timestamp `i / n_t` the model is probed with `n_l` single check-ins
/// at random locations and the probability of the target location is
/// averaged; the result is the largest per-timestamp average. The probe
/// locations depend only on the seed and the target, so the victim and every
/// shadow model see the same probes.
pub fn spa_tem_query<O: PoiOracle + ?Sized>(oracle: &O, target: &LocTarget, cfg: &SpaTemConfig) -> Result<f64> {
    cfg.validate()?;
    let n = oracle.n_locations();
    if target.location >= n {
        return Err(Error::OutOfBounds {
            what: "target location",
            index: target.location,
            bound: n,
        });
    }
    let mut rng = rng_for(
        cfg.seed,
        &[STREAM_SPATEM, target.user as u64, target.location as u64],
    );
    let mut best = f64::NEG_INFINITY;
    for i in 0..cfg.n_t {
        let t = i as f64 / cfg.n_t as f64;
        let mut sum = 0.0;
        for _ in 0..cfg.n_l {
            let probe = Visit::new(rng.gen_range(0..n), t);
            sum += softmax(&oracle.query(target.user, &[probe])?)[target.location];
        }
        best = best.max(sum / cfg.n_l as f64);
    }
    Ok(best)
}

/// Mean probability the model assigns to each next location of the trajectory.
pub fn traj_confidence<O: PoiOracle + ?Sized>(oracle: &O, user: usize, visits: &[Visit]) -> Result<f64> {
    let n = visits.len();
    if n < 2 {
        return Err(Error::Precondition("trajectory confidence needs at least two check-ins".into()));
    }
    let outputs = oracle.query_prefixes(user, &visits[..n - 1])?;
    let mut sum = 0.0;
    for (logits, v) in outputs.iter().zip(&visits[1..]) {
        if v.location >= logits.len() {
            return Err(Error::OutOfBounds {
                what: "target location",
                index: v.location,
                bound: logits.len(),
            });
        }
        sum += softmax(logits)[v.location].max(PROB_FLOOR);
    }
    Ok(sum / (n - 1) as f64)
}

/// Transform applied to raw confidences before fitting Gaussians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phi {
    /// `ln(p / (1 − p))` with `p` clamped to `[1e-9, 1 − 1e-9]`.
    #[default]
    Logit,
    Identity,
}

impl Phi {
    pub fn apply(self, p: f64) -> f64 {
        match self {
            Phi::Logit => {
                let p = p.clamp(PHI_CLAMP, 1.0 - PHI_CLAMP);
                (p / (1.0 - p)).ln()
            }
            Phi::Identity => p,
        }
    }
}

/// A membership target and how it is scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Target {
    Loc(LocTarget),
    Traj(TrajTarget),
}

impl Target {
    pub fn user(&self) -> usize {
        match self {
            Target::Loc(t) => t.user,
            Target::Traj(t) => t.user,
        }
    }

    /// Raw confidence of `oracle` on this target.
    pub fn confidence<O: PoiOracle + ?Sized>(&self, oracle: &O, spatem: &SpaTemConfig) -> Result<f64> {
        match self {
            Target::Loc(t) => spa_tem_query(oracle, t, spatem),
            Target::Traj(t) => traj_confidence(oracle, t.user, &t.visits),
        }
    }
}

/// Which shadow slots train on which targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowPlan {
    /// N: each target is IN for N slots and OUT for N slots.
    pub n_models: usize,
    pub seed: u64,
    pub background_fraction: f64,
    /// Per slot, indices into the shadow data's trajectories.
    pub background: Vec<Vec<usize>>,
    /// `membership[target][slot]` is true when the slot trains on the target.
    pub membership: Vec<Vec<bool>>,
}

impl ShadowPlan {
    pub fn n_slots(&self) -> usize {
        2 * self.n_models
    }

    pub fn n_targets(&self) -> usize {
        self.membership.len()
    }

    /// Targets a slot trains on.
    pub fn in_targets(&self, slot: usize) -> Vec<usize> {
        (0..self.n_targets()).filter(|&t| self.membership[t][slot]).collect()
    }

    pub fn slot_seed(&self, slot: usize) -> u64 {
        derive_seed(self.seed, &[STREAM_SHADOW, slot as u64])
    }
}

/// Plans `2N` shadow slots over `shadow_data`.
///
/// Each slot trains on a seeded random `background_fraction` of the shadow
/// trajectories plus the carriers of its IN targets. Every target is IN for
/// exactly `n_models` slots chosen uniformly at random.
pub fn plan_shadows(
    shadow_data: &MobilityDataset,
    n_targets: usize,
    n_models: usize,
    background_fraction: f64,
    seed: u64,
) -> Result<ShadowPlan> {
    if n_models == 0 {
        return Err(Error::Config("shadow plan needs N ≥ 1 (2N slots)".into()));
    }
    if !(background_fraction > 0.0 && background_fraction <= 1.0) {
        return Err(Error::Config("background_fraction must be in (0, 1]".into()));
    }
    let pool = shadow_data.trajectories.len();
    let take = (pool as f64 * background_fraction).round() as usize;
    if take == 0 {
        return Err(Error::Config(format!(
            "shadow data with {pool} trajectories is too small to subsample"
        )));
    }
    let slots = 2 * n_models;
    let background = (0..slots)
        .map(|s| {
            let mut rng = rng_for(seed, &[STREAM_SHADOW, s as u64, 0]);
            let mut idx = sample(&mut rng, pool, take).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    let membership = (0..n_targets)
        .map(|t| {
            let mut rng = rng_for(seed, &[STREAM_SHADOW, u64::MAX, t as u64]);
            let mut row = vec![false; slots];
            for s in sample(&mut rng, slots, n_models) {
                row[s] = true;
            }
            row
        })
        .collect();
    Ok(ShadowPlan {
        n_models,
        seed,
        background_fraction,
        background,
        membership,
    })
}

/// A trajectory that places `(user, location)` in a shadow training set.
///
/// Length `length` (at least 2), target location in the middle, context
/// locations drawn from the shadow data's check-in marginal, all stamped `t_s`.
pub fn synthesize_carrier(
    target: &LocTarget,
    shadow_data: &MobilityDataset,
    t_s: f64,
    length: usize,
    seed: u64,
) -> Result<Trajectory> {
    let marginal: Vec<usize> = shadow_data
        .trajectories
        .iter()
        .flat_map(|t| t.visits.iter().map(|v| v.location))
        .collect();
    if marginal.is_empty() {
        return Err(Error::EmptyDataset("shadow data has no check-ins".into()));
    }
    if length < 2 {
        return Err(Error::Config("carrier length must be at least 2".into()));
    }
    let mut rng = rng_for(
        seed,
        &[STREAM_CARRIER, target.user as u64, target.location as u64],
    );
    let mid = length / 2;
    let visits = (0..length)
        .map(|i| {
            let loc = if i == mid {
                target.location
            } else {
                marginal[rng.gen_range(0..marginal.len())]
            };
            Visit::new(loc, t_s)
        })
        .collect();
    Ok(Trajectory {
        user: target.user,
        day: None,
        split: Split::Train,
        visits,
    })
}

/// The training set of one shadow slot.
pub fn slot_dataset(plan: &ShadowPlan, slot: usize, shadow_data: &MobilityDataset, carriers: &[Trajectory]) -> MobilityDataset {
    let mut ds = shadow_data.subset(&plan.background[slot], Split::Train);
    for t in plan.in_targets(slot) {
        ds.trajectories.push(Trajectory {
            split: Split::Train,
            ..carriers[t].clone()
        });
    }
    ds
}

/// Trains every slot of `plan` in parallel. Slot `s` uses model and training
/// seeds derived from `plan.slot_seed(s)`.
pub fn train_shadows(
    plan: &ShadowPlan,
    shadow_data: &MobilityDataset,
    carriers: &[Trajectory],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<PoiModel>> {
    if carriers.len() != plan.n_targets() {
        return Err(Error::Config(format!(
            "{} carriers for {} planned targets",
            carriers.len(),
            plan.n_targets()
        )));
    }
    (0..plan.n_slots())
        .into_par_iter()
        .map(|slot| {
            let ds = slot_dataset(plan, slot, shadow_data, carriers);
            let seed = plan.slot_seed(slot);
            let mut model = PoiModel::new(
                ModelConfig {
                    seed,
                    ..model_cfg.clone()
                },
                shadow_data.n_users,
                shadow_data.n_locations(),
            )?;
            let cfg = TrainConfig {
                seed,
                validate: false,
                ..train_cfg.clone()
            };
            train(&mut model, &ds, &cfg, None)?;
            Ok(model)
        })
        .collect()
}

/// Outcome of the likelihood-ratio test for one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiraResult {
    pub conf_obs: f64,
    pub mu_in: f64,
    pub mu_out: f64,
    pub var_in: f64,
    pub var_out: f64,
    /// `ln Λ`; kept in the log domain because `Λ` itself overflows easily.
    pub log_lambda: f64,
    pub decision_threshold: f64,
}

impl LiraResult {
    pub fn lambda(&self) -> f64 {
        self.log_lambda.exp()
    }

    pub fn is_member(&self) -> bool {
        self.log_lambda > self.decision_threshold.ln()
    }
}

/// Sample mean and unbiased variance, the variance floored.
pub fn fit_gaussian(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::Statistics(format!("need at least 2 scores, got {}", xs.len())));
    }
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0);
    Ok((mu, var.max(VARIANCE_FLOOR)))
}

pub fn log_normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * ((x - mu) * (x - mu) / var + (std::f64::consts::TAU * var).ln())
}

/// Likelihood ratio of `conf_obs` under the IN versus OUT score Gaussians.
pub fn lira_from_scores(conf_obs: f64, scores_in: &[f64], scores_out: &[f64], threshold: f64) -> Result<LiraResult> {
    let (mu_in, var_in) = fit_gaussian(scores_in)?;
    let (mu_out, var_out) = fit_gaussian(scores_out)?;
    Ok(LiraResult {
        conf_obs,
        mu_in,
        mu_out,
        var_in,
        var_out,
        log_lambda: log_normal_pdf(conf_obs, mu_in, var_in) - log_normal_pdf(conf_obs, mu_out, var_out),
        decision_threshold: threshold,
    })
}

/// `phi(confidence)` of one model on every target, in target order.
pub fn score_targets<O: PoiOracle + ?Sized>(
    oracle: &O,
    targets: &[Target],
    spatem: &SpaTemConfig,
    phi: Phi,
) -> Result<Vec<f64>> {
    targets
        .par_iter()
        .map(|t| t.confidence(oracle, spatem).map(|c| phi.apply(c)))
        .collect()
}

/// Transformed shadow scores, `scores[slot][target]`.
pub fn score_shadows(shadows: &[PoiModel], targets: &[Target], spatem: &SpaTemConfig, phi: Phi) -> Result<Vec<Vec<f64>>> {
    shadows.iter().map(|m| score_targets(m, targets, spatem, phi)).collect()
}

/// Runs the test for every target given precomputed shadow and victim scores.
pub fn lira_all(plan: &ShadowPlan, shadow_scores: &[Vec<f64>], victim_scores: &[f64], threshold: f64) -> Result<Vec<LiraResult>> {
    if shadow_scores.len() != plan.n_slots() || victim_scores.len() != plan.n_targets() {
        return Err(Error::Config("score table does not match the shadow plan".into()));
    }
    (0..plan.n_targets())
        .map(|t| {
            let (mut sin, mut sout) = (Vec::new(), Vec::new());
            for (slot, scores) in shadow_scores.iter().enumerate() {
                if plan.membership[t][slot] {
                    sin.push(scores[t]);
                } else {
                    sout.push(scores[t]);
                }
            }
            lira_from_scores(victim_scores[t], &sin, &sout, threshold)
        })
        .collect()
}

/// End-to-end test of one target against trained shadows.
pub fn lira_test<O: PoiOracle + ?Sized>(
    victim: &O,
    target: &Target,
    target_index: usize,
    plan: &ShadowPlan,
    shadows: &[PoiModel],
    spatem: &SpaTemConfig,
    phi: Phi,
) -> Result<LiraResult> {
    if shadows.len() != plan.n_slots() {
        return Err(Error::Precondition(format!(
            "{} trained shadows for {} slots",
            shadows.len(),
            plan.n_slots()
        )));
    }
    let (mut sin, mut sout) = (Vec::new(), Vec::new());
    for (slot, m) in shadows.iter().enumerate() {
        let s = phi.apply(target.confidence(m, spatem)?);
        if plan.membership[target_index][slot] {
            sin.push(s);
        } else {
            sout.push(s);
        }
    }
    let obs = phi.apply(target.confidence(victim, spatem)?);
    lira_from_scores(obs, &sin, &sout, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use std::sync::Mutex;

    struct Constant(Vec<f64>);

    impl PoiOracle for Constant {
        fn n_users(&self) -> usize {
            10
        }
        fn n_locations(&self) -> usize {
            self.0.len()
        }
        fn query(&self, _: usize, _: &[Visit]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    /// Records every query and its output.
    struct Recorder<'a> {
        inner: &'a PoiModel,
        log: Mutex<Vec<(Vec<Visit>, Vec<f64>)>>,
    }

    impl PoiOracle for Recorder<'_> {
        fn n_users(&self) -> usize {
            self.inner.n_users()
        }
        fn n_locations(&self) -> usize {
            self.inner.n_locations()
        }
        fn query(&self, user: usize, prefix: &[Visit]) -> Result<Vec<f64>> {
            let out = self.inner.query(user, prefix)?;
            self.log.lock().unwrap().push((prefix.to_vec(), out.clone()));
            Ok(out)
        }
    }

    fn model(n_loc: usize) -> PoiModel {
        let cfg = ModelConfig {
            user_embed_dim: 4,
            loc_embed_dim: 4,
            hidden_dim: 5,
            seed: 11,
            ..ModelConfig::default()
        };
        PoiModel::new(cfg, 6, n_loc).unwrap()
    }

    // exp(-(x-mu)^2 / (2 var)) / sqrt(2 pi var), evaluated directly.
    fn pdf(x: f64, mu: f64, var: f64) -> f64 {
        (-(x - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    #[test]
    fn constant_model_confidence_is_its_probability() {
        let logits = vec![0.3, -1.0, 2.0, 0.0];
        let p = softmax(&logits)[2];
        let o = Constant(logits);
        for (n_t, n_l) in [(1, 1), (3, 7), (10, 10)] {
            let cfg = SpaTemConfig { n_t, n_l, seed: 4 };
            let c = spa_tem_query(&o, &LocTarget { user: 1, location: 2 }, &cfg).unwrap();
            assert!((c - p).abs() < 1e-15);
        }
    }

    #[test]
    fn spatem_replays_recorded_queries() {
        let m = model(9);
        let rec = Recorder {
            inner: &m,
            log: Mutex::new(Vec::new()),
        };
        let target = LocTarget { user: 2, location: 5 };
        let cfg = SpaTemConfig { n_t: 2, n_l: 3, seed: 8 };
        let got = spa_tem_query(&rec, &target, &cfg).unwrap();
        let log = rec.log.into_inner().unwrap();
        assert_eq!(log.len(), 6);
        let prob = |i: usize| {
            let z = &log[i].1;
            let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
            e[5] / e.iter().sum::<f64>()
        };
        for (i, (q, _)) in log.iter().enumerate() {
            assert_eq!(q.len(), 1);
            assert_eq!(q[0].time, if i < 3 { 0.0 } else { 0.5 });
        }
        let a = (prob(0) + prob(1) + prob(2)) / 3.0;
        let b = (prob(3) + prob(4) + prob(5)) / 3.0;
        assert!((got - a.max(b)).abs() < 1e-12);
        // A single probe reads exactly one query.
        let one = SpaTemConfig { n_t: 1, n_l: 1, seed: 8 };
        let c = crate::extraction::CountingOracle::new(&m);
        spa_tem_query(&c, &target, &one).unwrap();
        assert_eq!(c.queries(), 1);
    }

    #[test]
    fn trajectory_confidence_is_mean_step_probability() {
        let m = model(8);
        let visits = vec![Visit::new(1, 0.1), Visit::new(4, 0.2), Visit::new(0, 0.4), Visit::new(7, 0.9)];
        let got = traj_confidence(&m, 3, &visits).unwrap();
        let mut sum = 0.0;
        for i in 1..4 {
            sum += m.predict(3, &visits[..i]).unwrap().probabilities[visits[i].location];
        }
        assert!((got - sum / 3.0).abs() < 1e-14);
        let two = traj_confidence(&m, 3, &visits[..2]).unwrap();
        assert_eq!(two, m.predict(3, &visits[..1]).unwrap().probabilities[4]);
        assert!(traj_confidence(&m, 3, &visits[..1]).is_err());
    }

    #[test]
    fn certain_model_gives_confidence_one() {
        let mut logits = vec![-60.0; 4];
        logits[2] = 60.0;
        let o = Constant(logits);
        let c = traj_confidence(&o, 0, &[Visit::new(0, 0.5), Visit::new(2, 0.5), Visit::new(2, 0.5)]).unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn symmetric_case_is_uninformative() {
        let r = lira_from_scores(0.4, &[0.3, 0.5], &[0.3, 0.5], 1.0).unwrap();
        assert_eq!(r.log_lambda, 0.0);
        assert_eq!(r.lambda(), 1.0);
        assert!(!r.is_member());
    }

    #[test]
    fn lambda_matches_pdf_ratio() {
        // Scores with mean 0.9 / 0.1 and standard deviation 0.05.
        let sin = [0.85, 0.95];
        let sout = [0.05, 0.15];
        let r = lira_from_scores(0.88, &sin, &sout, 1.0).unwrap();
        assert!((r.mu_in - 0.9).abs() < 1e-15 && (r.mu_out - 0.1).abs() < 1e-15);
        assert!((r.var_in - 0.005).abs() < 1e-15);
        let oracle = pdf(0.88, 0.9, 0.005) / pdf(0.88, 0.1, 0.005);
        assert!(oracle > 1e20);
        assert!((r.lambda() / oracle - 1.0).abs() < 1e-9);
        assert!(r.is_member());
    }

    #[test]
    fn lambda_monotone_in_observation() {
        let sin = [1.0, 2.0, 3.0];
        let sout = [-1.0, 0.0, 1.0];
        let mut prev = f64::NEG_INFINITY;
        for i in -20..20 {
            let r = lira_from_scores(i as f64 * 0.25, &sin, &sout, 1.0).unwrap();
            assert!(r.log_lambda > prev);
            prev = r.log_lambda;
        }
    }

    #[test]
    fn variance_floor_and_sample_size() {
        let r = lira_from_scores(1.0, &[1.0, 1.0], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(r.var_in, VARIANCE_FLOOR);
        assert!(r.log_lambda.is_finite());
        assert!(matches!(lira_from_scores(0.0, &[1.0], &[0.0, 1.0], 1.0), Err(Error::Statistics(_))));
    }

    #[test]
    fn phi_logit_is_clamped() {
        assert_eq!(Phi::Logit.apply(0.5), 0.0);
        assert!((Phi::Logit.apply(1.0) - ((1.0 - 1e-9) / 1e-9f64).ln()).abs() < 1e-6);
        assert!(Phi::Logit.apply(0.0).is_finite());
        assert_eq!(Phi::Identity.apply(0.3), 0.3);
    }

    #[test]
    fn plan_is_balanced_and_reproducible() {
        let (ds, _) = synth_generate(&SynthConfig {
            n_users: 10,
            n_locations: 20,
            n_days: 10,
            ..SynthConfig::default()
        })
        .unwrap();
        let plan = plan_shadows(&ds, 1, 2, 0.5, 3).unwrap();
        assert_eq!(plan.n_slots(), 4);
        assert_eq!(plan.membership[0].iter().filter(|&&b| b).count(), 2);
        let plan = plan_shadows(&ds, 25, 4, 0.5, 3).unwrap();
        for row in &plan.membership {
            assert_eq!(row.iter().filter(|&&b| b).count(), 4);
        }
        let half = (ds.trajectories.len() as f64 * 0.5).round() as usize;
        assert!(plan.background.iter().all(|b| b.len() == half));
        assert_eq!(plan, plan_shadows(&ds, 25, 4, 0.5, 3).unwrap());
        assert_ne!(plan, plan_shadows(&ds, 25, 4, 0.5, 4).unwrap());
        assert!(plan_shadows(&ds.without_trajectories(), 3, 2, 0.5, 0).is_err());
    }

    #[test]
    fn carriers_land_only_in_in_slots() {
        let (ds, _) = synth_generate(&SynthConfig {
            n_users: 8,
            n_locations: 15,
            n_days: 6,
            ..SynthConfig::default()
        })
        .unwrap();
        let targets: Vec<LocTarget> = (0..6).map(|i| LocTarget { user: i, location: 14 - i }).collect();
        let carriers: Vec<Trajectory> = targets
            .iter()
            .map(|t| synthesize_carrier(t, &ds, 0.5, 3, 1).unwrap())
            .collect();
        let plan = plan_shadows(&ds, targets.len(), 3, 0.5, 9).unwrap();
        for slot in 0..plan.n_slots() {
            let sds = slot_dataset(&plan, slot, &ds, &carriers);
            for (ti, c) in carriers.iter().enumerate() {
                let present = sds.trajectories.iter().any(|t| t.user == c.user && t.visits == c.visits && t.day.is_none());
                assert_eq!(present, plan.membership[ti][slot]);
            }
        }
    }

    #[test]
    fn carrier_shape() {
        let (ds, _) = synth_generate(&SynthConfig {
            n_users: 8,
            n_locations: 15,
            n_days: 6,
            ..SynthConfig::default()
        })
        .unwrap();
        let t = LocTarget { user: 5, location: 9 };
        let c = synthesize_carrier(&t, &ds, 0.5, 3, 2).unwrap();
        assert_eq!(c.user, 5);
        assert_eq!(c.visits.len(), 3);
        assert_eq!(c.visits[1].location, 9);
        assert!(c.visits.iter().all(|v| v.time == 0.5));
        assert_eq!(c, synthesize_carrier(&t, &ds, 0.5, 3, 2).unwrap());
        assert!(synthesize_carrier(&t, &ds.without_trajectories(), 0.5, 3, 2).is_err());
    }
}
