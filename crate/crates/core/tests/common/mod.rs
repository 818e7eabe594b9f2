#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;

use poiaudit_core::data::{MobilityDataset, Split};
use poiaudit_core::defense::{ProtectedItem, ProtectedSet};
use poiaudit_core::extraction::Candidate;
use poiaudit_core::model::{softmax, Example, ModelConfig, PoiModel, PoiOracle, PROB_FLOOR};
use poiaudit_core::Visit;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Largest relative error per parameter group between the analytic gradient
/// and central differences of the mean loss.
pub fn finite_difference_errors(model: &PoiModel, batch: &[Example], h: f64) -> Vec<(&'static str, f64)> {
    let (analytic, _) = model.gradient(batch).unwrap();
    let mean_loss = |m: &PoiModel| {
        batch
            .iter()
            .map(|e| m.loss(e.user, e.prefix, e.target).unwrap())
            .sum::<f64>()
            / batch.len() as f64
    };
    let mut probe = model.clone();
    model
        .layout()
        .groups()
        .into_iter()
        .map(|(name, range)| {
            let mut worst: f64 = 0.0;
            for i in range {
                let x = probe.params()[i];
                probe.params_mut()[i] = x + h;
                let up = mean_loss(&probe);
                probe.params_mut()[i] = x - h;
                let down = mean_loss(&probe);
                probe.params_mut()[i] = x;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.0[i];
                // Entries that are zero either way carry no information.
                let scale = a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((a - numeric).abs() / scale);
            }
            (name, worst)
        })
        .collect()
}

pub fn small_model(n_users: usize, n_locations: usize, cfg: ModelConfig) -> PoiModel {
    let mut m = PoiModel::new(cfg, n_users, n_locations).unwrap();
    // Default initialisation keeps the output layer small; scale it up so
    // every group has a well-conditioned gradient.
    for p in m.params_mut() {
        *p *= 3.0;
    }
    m
}

/// Every length-`n` sequence from `start`, ranked by the summed floored
/// negative log-probabilities, ties in lexicographic order.
pub fn exhaustive_ranking<O: PoiOracle>(oracle: &O, user: usize, start: usize, n: usize, t: f64) -> Vec<Candidate> {
    let l = oracle.n_locations();
    let mut out = Vec::new();
    let total = l.pow((n - 1) as u32);
    for code in 0..total {
        let mut seq = vec![start];
        let mut c = code;
        let mut tail = Vec::new();
        for _ in 1..n {
            tail.push(c % l);
            c /= l;
        }
        tail.reverse();
        seq.extend(tail);
        let mut ppl = 0.0;
        for k in 1..n {
            let prefix: Vec<Visit> = seq[..k].iter().map(|&x| Visit::new(x, t)).collect();
            let p = softmax(&oracle.query(user, &prefix).unwrap())[seq[k]];
            ppl += -p.max(PROB_FLOOR).ln();
        }
        out.push(Candidate { locations: seq, ppl });
    }
    out.sort_by(|a, b| a.ppl.total_cmp(&b.ppl).then_with(|| a.locations.cmp(&b.locations)));
    out
}

/// Oracle with the same logits for every prefix: all sequences tie.
pub struct FlatOracle(pub usize);

impl PoiOracle for FlatOracle {
    fn n_users(&self) -> usize {
        1
    }
    fn n_locations(&self) -> usize {
        self.0
    }
    fn query(&self, _user: usize, _prefix: &[Visit]) -> poiaudit_core::Result<Vec<f64>> {
        Ok(vec![0.0; self.0])
    }
}

/// Probability that a random member outscores a random non-member, ties half.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Independent reading of a `user, time, lat, lon, location` file: the
/// per-user and per-location counts surviving the occurrence filter and
/// the removal of single-check-in days, iterated to a fixed point.
pub struct PreprocessOracle {
    pub users: Vec<String>,
    pub locations: Vec<String>,
    pub n_checkins: usize,
    pub n_trajectories: usize,
}

pub fn preprocess_oracle(text: &str, delimiter: char, min_occurrence: usize) -> PreprocessOracle {
    // (user, location, day key, seconds of day)
    let mut rows: Vec<(String, String, String)> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(delimiter).collect();
            // "Tue Apr 03 18:00:09 +0000 2012": month, day and year identify the date.
            let t: Vec<&str> = f[1].split_whitespace().collect();
            (f[0].to_string(), f[4].to_string(), format!("{} {} {}", t[5], t[1], t[2]))
        })
        .collect();
    loop {
        let before = rows.len();
        let mut uc: HashMap<String, usize> = HashMap::new();
        let mut lc: HashMap<String, usize> = HashMap::new();
        for (u, l, _) in &rows {
            *uc.entry(u.clone()).or_default() += 1;
            *lc.entry(l.clone()).or_default() += 1;
        }
        rows.retain(|(u, l, _)| uc[u] >= min_occurrence && lc[l] >= min_occurrence);
        let mut days: HashMap<(String, String), usize> = HashMap::new();
        for (u, _, d) in &rows {
            *days.entry((u.clone(), d.clone())).or_default() += 1;
        }
        rows.retain(|(u, _, d)| days[&(u.clone(), d.clone())] >= 2);
        if rows.len() == before {
            break;
        }
    }
    let mut users: Vec<String> = rows.iter().map(|r| r.0.clone()).collect::<HashSet<_>>().into_iter().collect();
    let mut locations: Vec<String> = rows.iter().map(|r| r.1.clone()).collect::<HashSet<_>>().into_iter().collect();
    users.sort();
    locations.sort();
    let n_trajectories = rows.iter().map(|r| (&r.0, &r.2)).collect::<HashSet<_>>().len();
    PreprocessOracle {
        users,
        locations,
        n_checkins: rows.len(),
        n_trajectories,
    }
}

/// Protected items still visible in any TRAIN training example of `ds`,
/// where an example is a prefix plus its next location. `original` resolves
/// trajectory indices.
pub fn leaked_items(ds: &MobilityDataset, original: &MobilityDataset, protected: &ProtectedSet) -> usize {
    let mut leaks = 0;
    let train: Vec<_> = ds.split(Split::Train).collect();
    let mut seen_pairs: HashSet<(usize, usize)> = HashSet::new();
    let mut seen_windows: BTreeMap<(usize, usize), HashSet<Vec<usize>>> = BTreeMap::new();
    for t in &train {
        let locs = t.locations();
        for end in 1..locs.len() {
            // Example: prefix locs[..end], target locs[end].
            for &l in &locs[..=end] {
                seen_pairs.insert((t.user, l));
            }
            for start in 0..end {
                let w = locs[start..=end].to_vec();
                seen_windows.entry((t.user, w.len())).or_default().insert(w);
            }
        }
    }
    for item in &protected.items {
        let hit = match item {
            ProtectedItem::Location { user, location } => seen_pairs.contains(&(*user, *location)),
            ProtectedItem::Sequence { user, locations } => seen_windows
                .get(&(*user, locations.len()))
                .is_some_and(|s| s.contains(locations)),
            ProtectedItem::Trajectory { index } => {
                let target = &original.trajectories[*index];
                train.iter().any(|t| t.user == target.user && t.visits == target.visits)
            }
        };
        leaks += usize::from(hit);
    }
    leaks
}
