//! Attack metrics and the aggregate-statistics vulnerability analysis.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{MobilityDataset, Split};
use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0088;
pub const NEIGHBORHOOD_KM: f64 = 1.0;

/// Hit flags per target and success rate at each `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionEval {
    pub ks: Vec<usize>,
    /// `hits[target][j]`: the target was recovered within the top `ks[j]`.
    pub hits: Vec<Vec<bool>>,
    pub asr: Vec<f64>,
}

impl ExtractionEval {
    fn from_hits(ks: &[usize], hits: Vec<Vec<bool>>) -> Result<Self> {
        if hits.is_empty() {
            return Err(Error::Evaluation("no extraction targets".into()));
        }
        let n = hits.len() as f64;
        let asr = (0..ks.len())
            .map(|j| hits.iter().filter(|h| h[j]).count() as f64 / n)
            .collect();
        Ok(Self {
            ks: ks.to_vec(),
            hits,
            asr,
        })
    }
}

/// Location extraction: a target user counts as extracted at `k` when their
/// most common location is among the first `k` predictions.
pub fn loc_extraction_asr(predictions: &[Vec<usize>], truth: &[Option<usize>], ks: &[usize]) -> Result<ExtractionEval> {
    if predictions.len() != truth.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} ground-truth entries",
            predictions.len(),
            truth.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(i, (pred, t))| {
            let t = t.ok_or_else(|| Error::Evaluation(format!("target {i} has no ground truth")))?;
            let pos = pred.iter().position(|&l| l == t);
            Ok(ks.iter().map(|&k| pos.is_some_and(|p| p < k)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    ExtractionEval::from_hits(ks, hits)
}

/// Contiguous location windows of length `n` in each user's TRAIN trajectories.
pub fn training_sequences(ds: &MobilityDataset, n: usize) -> HashSet<(usize, Vec<usize>)> {
    let mut out = HashSet::new();
    for t in ds.split(Split::Train) {
        let locs = t.locations();
        for w in locs.windows(n) {
            out.insert((t.user, w.to_vec()));
        }
    }
    out
}

/// Trajectory extraction: a `(user, start)` pair counts as extracted at `k`
/// when any of its first `k` candidate sequences occurs verbatim in that
/// user's training data. Every pair must start a training window.
pub fn traj_extraction_asr(
    predictions: &[Vec<Vec<usize>>],
    pairs: &[(usize, usize)],
    ds: &MobilityDataset,
    n: usize,
    ks: &[usize],
) -> Result<ExtractionEval> {
    if predictions.len() != pairs.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} target pairs",
            predictions.len(),
            pairs.len()
        )));
    }
    let truth = training_sequences(ds, n);
    let starts: HashSet<(usize, usize)> = truth.iter().map(|(u, s)| (*u, s[0])).collect();
    let hits = predictions
        .iter()
        .zip(pairs)
        .map(|(cands, &(u, l0))| {
            if !starts.contains(&(u, l0)) {
                return Err(Error::Evaluation(format!(
                    "user {u} has no length-{n} training sequence starting at {l0}"
                )));
            }
            let first = cands.iter().position(|c| c[0] == l0 && truth.contains(&(u, c.clone())));
            Ok(ks.iter().map(|&k| first.is_some_and(|p| p < k)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    ExtractionEval::from_hits(ks, hits)
}

/// Threshold-free membership metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaEval {
    pub auc: f64,
    pub acc: f64,
    /// `(fpr level, tpr)` pairs.
    pub tpr_at_fpr: Vec<(f64, f64)>,
    pub n_members: usize,
    pub n_nonmembers: usize,
}

/// Empirical ROC as `(fpr, tpr)` points from the strictest threshold down.
/// Targets with equal scores enter at one threshold.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::Evaluation("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Evaluation("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Evaluation("membership labels must contain both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

pub fn mia_eval(scores: &[f64], labels: &[bool], fpr_levels: &[f64]) -> Result<MiaEval> {
    let roc = roc_curve(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    let auc = roc
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    // Predicting "member" above each threshold: correct = TP + TN.
    let acc = roc
        .iter()
        .map(|&(fpr, tpr)| (tpr * pos as f64 + (1.0 - fpr) * neg as f64) / labels.len() as f64)
        .fold(0.0, f64::max);
    let tpr_at_fpr = fpr_levels
        .iter()
        .map(|&level| {
            let tpr = roc
                .iter()
                .filter(|(fpr, _)| *fpr <= level)
                .map(|&(_, tpr)| tpr)
                .fold(0.0, f64::max);
            (level, tpr)
        })
        .collect();
    Ok(MiaEval {
        auc,
        acc,
        tpr_at_fpr,
        n_members: pos,
        n_nonmembers: neg,
    })
}

/// Great-circle distance in kilometres.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserStats {
    pub total_checkins: usize,
    pub unique_pois: usize,
    pub n_trajectories: usize,
    pub avg_trajectory_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationStats {
    pub distinct_users: usize,
    /// Check-ins at any location within 1 km, this one included.
    pub checkins_within_1km: usize,
    pub trajectories_sharing: usize,
    /// Arithmetic mean of normalized visit times; `None` when never visited.
    pub mean_visit_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    /// Distinct users, the owner included, with the same location sequence.
    pub users_sharing: usize,
    pub checkins_within_1km: usize,
    /// Other trajectories sharing at least one location with this one.
    pub intercepting: usize,
    pub mean_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub users: Vec<UserStats>,
    pub locations: Vec<LocationStats>,
    pub trajectories: Vec<TrajectoryStats>,
}

/// Locations within `NEIGHBORHOOD_KM` of each location, itself included.
pub fn neighborhoods(ds: &MobilityDataset) -> Vec<Vec<usize>> {
    let locs = &ds.locations;
    (0..locs.len())
        .map(|i| {
            (0..locs.len())
                .filter(|&j| {
                    i == j
                        || haversine_km(locs[i].latitude, locs[i].longitude, locs[j].latitude, locs[j].longitude)
                            <= NEIGHBORHOOD_KM
                })
                .collect()
        })
        .collect()
}

/// User-, location- and trajectory-level statistics over all trajectories of `ds`.
pub fn compute_aggregate_stats(ds: &MobilityDataset) -> AggregateStats {
    let n_loc = ds.n_locations();
    let mut loc_checkins = vec![0usize; n_loc];
    let mut loc_users: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_loc];
    let mut loc_trajs: Vec<Vec<usize>> = vec![Vec::new(); n_loc];
    let mut loc_time = vec![0.0; n_loc];
    let mut user_checkins = vec![0usize; ds.n_users];
    let mut user_pois: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); ds.n_users];
    let mut user_trajs = vec![0usize; ds.n_users];
    let mut seq_users: HashMap<Vec<usize>, BTreeSet<usize>> = HashMap::new();

    for (ti, t) in ds.trajectories.iter().enumerate() {
        user_trajs[t.user] += 1;
        user_checkins[t.user] += t.len();
        for v in &t.visits {
            loc_checkins[v.location] += 1;
            loc_time[v.location] += v.time;
            loc_users[v.location].insert(t.user);
            user_pois[t.user].insert(v.location);
            if loc_trajs[v.location].last() != Some(&ti) {
                loc_trajs[v.location].push(ti);
            }
        }
        seq_users.entry(t.locations()).or_default().insert(t.user);
    }
    let near = neighborhoods(ds);

    let users = (0..ds.n_users)
        .map(|u| UserStats {
            total_checkins: user_checkins[u],
            unique_pois: user_pois[u].len(),
            n_trajectories: user_trajs[u],
            avg_trajectory_length: if user_trajs[u] == 0 {
                0.0
            } else {
                user_checkins[u] as f64 / user_trajs[u] as f64
            },
        })
        .collect();
    let locations = (0..n_loc)
        .map(|l| LocationStats {
            distinct_users: loc_users[l].len(),
            checkins_within_1km: near[l].iter().map(|&j| loc_checkins[j]).sum(),
            trajectories_sharing: loc_trajs[l].len(),
            mean_visit_time: (loc_checkins[l] > 0).then(|| loc_time[l] / loc_checkins[l] as f64),
        })
        .collect();
    let trajectories = ds
        .trajectories
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            let pois: BTreeSet<usize> = t.visits.iter().map(|v| v.location).collect();
            let nearby: BTreeSet<usize> = pois.iter().flat_map(|&l| near[l].iter().copied()).collect();
            let others: BTreeSet<usize> = pois
                .iter()
                .flat_map(|&l| loc_trajs[l].iter().copied())
                .filter(|&o| o != ti)
                .collect();
            TrajectoryStats {
                users_sharing: seq_users[&t.locations()].len(),
                checkins_within_1km: nearby.iter().map(|&j| loc_checkins[j]).sum(),
                intercepting: others.len(),
                mean_time: t.visits.iter().map(|v| v.time).sum::<f64>() / t.len() as f64,
            }
        })
        .collect();
    AggregateStats {
        users,
        locations,
        trajectories,
    }
}

/// Targets grouped by percentile of a statistic, with the mean vulnerability
/// signal per group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityBins {
    /// `n_bins + 1` edges; bin `b` holds statistics in `[edges[b], edges[b+1])`,
    /// the last bin closed on the right.
    pub edges: Vec<f64>,
    /// `None` for empty bins.
    pub mean_signal: Vec<Option<f64>>,
    pub population: Vec<usize>,
}

impl VulnerabilityBins {
    /// Plot-ready delimited table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,lower,upper,population,mean_signal\n");
        for b in 0..self.population.len() {
            let mean = self.mean_signal[b].map(|m| m.to_string()).unwrap_or_default();
            s += &format!("{b},{},{},{},{mean}\n", self.edges[b], self.edges[b + 1], self.population[b]);
        }
        s
    }

    /// Indices of non-empty bins, lowest statistic first.
    pub fn occupied(&self) -> Vec<usize> {
        (0..self.population.len()).filter(|&b| self.population[b] > 0).collect()
    }
}

/// Bins targets at the `n_bins`-quantiles of `stat`. Equal statistics always
/// share a bin, so a constant statistic fills exactly one bin.
pub fn vulnerability_binning(stat: &[f64], signal: &[f64], n_bins: usize) -> Result<VulnerabilityBins> {
    if stat.len() != signal.len() {
        return Err(Error::Evaluation("statistic and signal differ in length".into()));
    }
    if n_bins == 0 || n_bins > stat.len() {
        return Err(Error::Evaluation(format!(
            "{n_bins} bins for a population of {}",
            stat.len()
        )));
    }
    if stat.iter().chain(signal).any(|x| x.is_nan()) {
        return Err(Error::Evaluation("NaN in binning input".into()));
    }
    let mut sorted = stat.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let edges: Vec<f64> = (0..=n_bins)
        .map(|k| if k == n_bins { sorted[n - 1] } else { sorted[k * n / n_bins] })
        .collect();
    let mut sums = vec![0.0; n_bins];
    let mut population = vec![0usize; n_bins];
    for (&x, &s) in stat.iter().zip(signal) {
        let b = (0..n_bins).rev().find(|&b| x >= edges[b]).unwrap_or(0);
        sums[b] += s;
        population[b] += 1;
    }
    let mean_signal = sums
        .iter()
        .zip(&population)
        .map(|(&s, &p)| (p > 0).then(|| s / p as f64))
        .collect();
    Ok(VulnerabilityBins {
        edges,
        mean_signal,
        population,
    })
}
