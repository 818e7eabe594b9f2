//! Defenses: overfitting controls, DP-SGD, two-phase selective training on
//! redacted data, and planar-Laplace location perturbation.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{most_common_locations, MobilityDataset, Split, Visit};
use crate::error::{Error, Result};
use crate::eval::{haversine_km, EARTH_RADIUS_KM};
use crate::model::{Gradient, PoiModel};
use crate::seed::{rng_for, STREAM_DP_NOISE, STREAM_GEO, STREAM_PROTECT};
use crate::train::{train, GradientHook, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            epsilon: 5.0,
            delta: 1e-3,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.delta > 0.0 && self.delta < 1.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("DP-SGD needs epsilon > 0, delta in (0, 1), clip_norm > 0".into()));
        }
        Ok(())
    }

    /// Gaussian-mechanism noise multiplier `sqrt(2 ln(1.25/δ)) / ε`.
    ///
    /// Applied per step, without composition across steps.
    pub fn sigma(&self) -> f64 {
        (2.0 * (1.25 / self.delta).ln()).sqrt() / self.epsilon
    }
}

/// Scales `g` to global L2 norm at most `c`. Returns the pre-clip norm.
pub fn clip_gradient(g: &mut Gradient, c: f64) -> f64 {
    let norm = g.l2_norm();
    if norm > c {
        g.scale(c / norm);
    }
    norm
}

/// Clips each per-example gradient, averages, and adds `N(0, (σC/B)²)` noise
/// per coordinate.
pub struct DpSgdHook {
    cfg: DpConfig,
    sigma: f64,
    rng: ChaCha8Rng,
}

impl DpSgdHook {
    pub fn new(cfg: DpConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            sigma: cfg.sigma(),
            rng: rng_for(cfg.seed, &[STREAM_DP_NOISE]),
            cfg,
        })
    }

    pub fn noise_std(&self, batch: usize) -> f64 {
        self.sigma * self.cfg.clip_norm / batch as f64
    }
}

impl GradientHook for DpSgdHook {
    fn aggregate(&mut self, per_example: Vec<Gradient>) -> Result<Gradient> {
        let b = per_example.len();
        let Some(first) = per_example.first() else {
            return Err(Error::Precondition("empty batch".into()));
        };
        let mut out = Gradient::zeros(first.0.len());
        for mut g in per_example {
            if !g.is_finite() {
                return Err(Error::NonFinite("per-example gradient".into()));
            }
            clip_gradient(&mut g, self.cfg.clip_norm);
            out.add_scaled(&g, 1.0 / b as f64);
        }
        let std = self.noise_std(b);
        for x in &mut out.0 {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *x += std * z;
        }
        Ok(out)
    }
}

/// Weight decay and/or early stopping on validation top-10 accuracy.
pub fn overfit_controls(cfg: &TrainConfig, weight_decay: Option<f64>, patience: Option<usize>) -> TrainConfig {
    let mut out = cfg.clone();
    if let Some(wd) = weight_decay {
        out.weight_decay = wd;
    }
    if let Some(p) = patience {
        out.early_stop_patience = Some(p);
        out.validate = true;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    LocExtract,
    TrajExtract,
    LocMia,
    TrajMia,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProtectedItem {
    /// A user's check-ins at one location.
    Location { user: usize, location: usize },
    /// A user's contiguous location sequence.
    Sequence { user: usize, locations: Vec<usize> },
    /// One trajectory, by index into the dataset.
    Trajectory { index: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scope {
    All,
    Targeted { fraction: f64 },
}

impl Scope {
    pub fn targeted() -> Self {
        Scope::Targeted { fraction: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtectedSet {
    pub attack: AttackKind,
    pub scope: Scope,
    pub items: Vec<ProtectedItem>,
}

impl ProtectedSet {
    pub fn empty(attack: AttackKind) -> Self {
        Self {
            attack,
            scope: Scope::All,
            items: Vec::new(),
        }
    }

    /// Restricts `candidates` to the scope, sampling targeted subsets with `seed`.
    pub fn from_candidates(attack: AttackKind, scope: Scope, candidates: Vec<ProtectedItem>, seed: u64) -> Result<Self> {
        let items = match scope {
            Scope::All => candidates,
            Scope::Targeted { fraction } => {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(Error::Config("targeted fraction must be in (0, 1]".into()));
                }
                let k = (candidates.len() as f64 * fraction).round() as usize;
                let mut rng = rng_for(seed, &[STREAM_PROTECT]);
                let mut idx = sample(&mut rng, candidates.len(), k).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| candidates[i].clone()).collect()
            }
        };
        Ok(Self { attack, scope, items })
    }

    /// Sensitive items of `ds`'s TRAIN split for an attack: most common
    /// locations (LocExtract), visited user-location pairs (LocMIA), length-`n`
    /// location windows (TrajExtract) or trajectories (TrajMIA).
    pub fn for_attack(ds: &MobilityDataset, attack: AttackKind, scope: Scope, seq_len: usize, seed: u64) -> Result<Self> {
        let candidates: Vec<ProtectedItem> = match attack {
            AttackKind::LocExtract => most_common_locations(ds, Some(Split::Train))
                .into_iter()
                .enumerate()
                .filter_map(|(user, l)| l.map(|location| ProtectedItem::Location { user, location }))
                .collect(),
            AttackKind::LocMia => {
                let pairs: std::collections::BTreeSet<(usize, usize)> = ds
                    .split(Split::Train)
                    .flat_map(|t| t.visits.iter().map(move |v| (t.user, v.location)))
                    .collect();
                pairs
                    .into_iter()
                    .map(|(user, location)| ProtectedItem::Location { user, location })
                    .collect()
            }
            AttackKind::TrajExtract => {
                let seqs: std::collections::BTreeSet<(usize, Vec<usize>)> = ds
                    .split(Split::Train)
                    .flat_map(|t| {
                        let locs = t.locations();
                        locs.windows(seq_len.max(1)).map(|w| (t.user, w.to_vec())).collect::<Vec<_>>()
                    })
                    .collect();
                seqs.into_iter()
                    .map(|(user, locations)| ProtectedItem::Sequence { user, locations })
                    .collect()
            }
            AttackKind::TrajMia => ds
                .split_indices(Split::Train)
                .into_iter()
                .map(|index| ProtectedItem::Trajectory { index })
                .collect(),
        };
        Self::from_candidates(attack, scope, candidates, seed)
    }

    fn locations(&self) -> HashSet<(usize, usize)> {
        self.items
            .iter()
            .filter_map(|i| match i {
                ProtectedItem::Location { user, location } => Some((*user, *location)),
                _ => None,
            })
            .collect()
    }

    /// Whether trajectory `index` of `ds` is dropped or fully protected.
    fn covers_trajectory(&self, ds: &MobilityDataset, index: usize) -> bool {
        let t = &ds.trajectories[index];
        self.items.iter().any(|i| match i {
            ProtectedItem::Trajectory { index: j } => *j == index,
            ProtectedItem::Sequence { user, locations } => {
                *user == t.user && t.locations().windows(locations.len()).any(|w| w == locations.as_slice())
            }
            ProtectedItem::Location { .. } => false,
        })
    }
}

/// Redacted copy of `ds` for JFT phase I. In the TRAIN split, protected
/// user-location check-ins become the MASK location `ds.n_locations()`, and
/// protected trajectories and trajectories containing protected sequences are
/// dropped. Other splits are copied unchanged.
pub fn redact(ds: &MobilityDataset, protected: &ProtectedSet) -> Result<MobilityDataset> {
    let mask = ds.n_locations();
    let locs = protected.locations();
    let mut out = ds.without_trajectories();
    for (i, t) in ds.trajectories.iter().enumerate() {
        if t.split != Split::Train {
            out.trajectories.push(t.clone());
            continue;
        }
        if protected.covers_trajectory(ds, i) {
            continue;
        }
        let mut t = t.clone();
        for v in &mut t.visits {
            if locs.contains(&(t.user, v.location)) {
                v.location = mask;
            }
        }
        out.trajectories.push(t);
    }
    if out.split(Split::Train).next().is_none() {
        return Err(Error::EmptyDataset("redaction removed every TRAIN trajectory".into()));
    }
    Ok(out)
}

/// Two-phase training: `phase_one` on the redacted data, then optional DP
/// fine-tuning on the original data.
pub fn jft_train(
    model: &mut PoiModel,
    ds: &MobilityDataset,
    protected: &ProtectedSet,
    dp: &DpConfig,
    phase_one: &TrainConfig,
    phase_two: Option<&TrainConfig>,
) -> Result<(TrainLog, Option<TrainLog>)> {
    let redacted = redact(ds, protected)?;
    let log1 = train(model, &redacted, phase_one, None)?;
    let log2 = match phase_two {
        Some(cfg) => {
            let mut hook = DpSgdHook::new(dp.clone())?;
            Some(train(model, ds, cfg, Some(&mut hook))?)
        }
        None => None,
    };
    Ok((log1, log2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeoIndConfig {
    /// Privacy parameter per metre.
    pub epsilon_g: f64,
    pub radius_m: f64,
    pub seed: u64,
}

impl Default for GeoIndConfig {
    fn default() -> Self {
        Self {
            epsilon_g: 0.01,
            radius_m: 400.0,
            seed: 0,
        }
    }
}

/// `P(R ≤ r)` for the planar Laplacian's radius at scale `1/ε`.
pub fn planar_laplace_radial_cdf(r: f64, eps: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    1.0 - (1.0 + eps * r) * (-eps * r).exp()
}

/// The `W₋₁` branch of the Lambert W function on `[-1/e, 0)`.
pub fn lambert_w_minus1(x: f64) -> Option<f64> {
    let branch = -1.0 / std::f64::consts::E;
    if !(branch..0.0).contains(&x) {
        return None;
    }
    if x == branch {
        return Some(-1.0);
    }
    // Initial guess from the series at the branch point or the log asymptote.
    let mut w = if x < -0.25 {
        let p = -(2.0 * (1.0 + std::f64::consts::E * x)).sqrt();
        -1.0 + p - p * p / 3.0
    } else {
        let l1 = (-x).ln();
        l1 - (-l1).ln()
    };
    for _ in 0..64 {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        if wp1 == 0.0 {
            break;
        }
        // Halley step.
        let step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1));
        w -= step;
        if step.abs() <= 1e-15 * (1.0 + w.abs()) {
            break;
        }
    }
    w.is_finite().then_some(w)
}

/// Radius with `P(R ≤ r) = p` at scale `1/ε`.
pub fn planar_laplace_inverse_cdf(p: f64, eps: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    let closed = lambert_w_minus1((p - 1.0) / std::f64::consts::E).map(|w| -(w + 1.0) / eps);
    match closed {
        Some(r) if r.is_finite() && r >= 0.0 && (planar_laplace_radial_cdf(r, eps) - p).abs() < 1e-9 => r,
        _ => bisect_radius(p, eps),
    }
}

fn bisect_radius(p: f64, eps: f64) -> f64 {
    let mut hi = 1.0 / eps;
    while planar_laplace_radial_cdf(hi, eps) < p {
        hi *= 2.0;
        if !hi.is_finite() {
            return f64::MAX;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if planar_laplace_radial_cdf(mid, eps) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Planar Laplace displacement `(east, north)` in metres.
pub fn sample_planar_laplace<R: Rng + ?Sized>(rng: &mut R, eps: f64) -> (f64, f64) {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    if eps.is_infinite() {
        return (0.0, 0.0);
    }
    let r = planar_laplace_inverse_cdf(rng.gen::<f64>(), eps);
    (r * theta.cos(), r * theta.sin())
}

/// Moves `(lat, lon)` by `(east, north)` metres.
pub fn displace(lat: f64, lon: f64, east_m: f64, north_m: f64) -> (f64, f64) {
    let r = EARTH_RADIUS_KM * 1000.0;
    let lat2 = (lat + (north_m / r).to_degrees()).clamp(-90.0, 90.0);
    let coslat = lat.to_radians().cos().max(1e-12);
    let mut lon2 = lon + (east_m / (r * coslat)).to_degrees();
    if lon2 > 180.0 {
        lon2 -= 360.0;
    } else if lon2 < -180.0 {
        lon2 += 360.0;
    }
    (lat2, lon2)
}

/// Index of the location nearest to `(lat, lon)`, ties to the lower index.
pub fn nearest_location(ds: &MobilityDataset, lat: f64, lon: f64) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, l) in ds.locations.iter().enumerate() {
        let d = haversine_km(lat, lon, l.latitude, l.longitude);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Replaces each protected TRAIN check-in with the POI nearest to a
/// planar-Laplace perturbation of its coordinates. Protected trajectories have
/// all their check-ins perturbed; other check-ins are untouched.
pub fn geo_ind_perturb(ds: &MobilityDataset, protected: &ProtectedSet, cfg: &GeoIndConfig) -> Result<MobilityDataset> {
    if !(cfg.epsilon_g > 0.0) || !(cfg.radius_m > 0.0) {
        return Err(Error::Config("geo-indistinguishability needs epsilon_g > 0 and radius > 0".into()));
    }
    let locs = protected.locations();
    let mut out = ds.clone();
    for (i, t) in out.trajectories.iter_mut().enumerate() {
        if t.split != Split::Train {
            continue;
        }
        let whole = protected.covers_trajectory(ds, i);
        let user = t.user;
        for (j, v) in t.visits.iter_mut().enumerate() {
            if !(whole || locs.contains(&(user, v.location))) {
                continue;
            }
            let mut rng = rng_for(cfg.seed, &[STREAM_GEO, i as u64, j as u64]);
            *v = perturb_visit(ds, v, cfg.epsilon_g, &mut rng);
        }
    }
    Ok(out)
}

fn perturb_visit<R: Rng + ?Sized>(ds: &MobilityDataset, v: &Visit, eps: f64, rng: &mut R) -> Visit {
    let loc = ds.locations[v.location];
    let (east, north) = sample_planar_laplace(rng, eps);
    if east == 0.0 && north == 0.0 {
        return *v;
    }
    let (lat, lon) = displace(loc.latitude, loc.longitude, east, north);
    Visit::new(nearest_location(ds, lat, lon), v.time)
}

/// Utility and attack outcome of one defended model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRecord {
    pub defense: String,
    pub top1: f64,
    pub top10: f64,
    pub attack: AttackKind,
    pub metric: String,
    /// Attack metric over all sensitive items.
    pub all: f64,
    /// Attack metric over the protected subset.
    pub targeted: f64,
}

/// Test-split utility plus LocExtract ASR over all users and over the users
/// whose most common location is protected.
pub fn tradeoff_eval(
    defenses: &[(String, &PoiModel)],
    ds: &MobilityDataset,
    protected: &ProtectedSet,
    loc_cfg: &crate::extraction::LocExtractConfig,
) -> Result<Vec<TradeoffRecord>> {
    let truth = most_common_locations(ds, Some(Split::Train));
    let users: Vec<usize> = (0..ds.n_users).filter(|&u| truth[u].is_some()).collect();
    let protected_users: HashSet<usize> = protected
        .items
        .iter()
        .filter_map(|i| match i {
            ProtectedItem::Location { user, location } if truth[*user] == Some(*location) => Some(*user),
            _ => None,
        })
        .collect();
    defenses
        .iter()
        .map(|(name, model)| {
            let acc = crate::train::evaluate_topk(model, ds, Split::Test, &[1, 10])?;
            let preds = crate::extraction::loc_extract_all(*model, &users, loc_cfg)?;
            let hit: Vec<bool> = users.iter().zip(&preds).map(|(&u, p)| p.first() == truth[u].as_ref()).collect();
            let rate = |sel: &dyn Fn(usize) -> bool| {
                let (mut n, mut h) = (0usize, 0usize);
                for (i, &u) in users.iter().enumerate() {
                    if sel(u) {
                        n += 1;
                        h += usize::from(hit[i]);
                    }
                }
                if n == 0 {
                    0.0
                } else {
                    h as f64 / n as f64
                }
            };
            Ok(TradeoffRecord {
                defense: name.clone(),
                top1: acc[0],
                top10: acc[1],
                attack: AttackKind::LocExtract,
                metric: "top1_asr".into(),
                all: rate(&|_| true),
                targeted: rate(&|u| protected_users.contains(&u)),
            })
        })
        .collect()
}
