//! Black-box extraction attacks: recovering a user's most common location
//! (`loc_extract`) and location sequences from the training data
//! (`traj_extract`).

use std::cmp::Ordering;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Visit;
use crate::error::{Error, Result};
use crate::model::{softmax, top_k, PoiOracle, PROB_FLOOR};
use crate::seed::{rng_for, STREAM_LOC_EXTRACT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Voting {
    /// Rank locations by the mean output vector over all queries.
    Soft,
    /// Rank locations by how often they are a query's argmax.
    Hard,
}

/// Vector averaged by soft voting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftSpace {
    Logits,
    Probabilities,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocExtractConfig {
    pub query_budget: usize,
    pub query_timestamp: f64,
    pub top_k: usize,
    pub voting: Voting,
    pub soft_space: SoftSpace,
    pub seed: u64,
}

impl Default for LocExtractConfig {
    fn default() -> Self {
        Self {
            query_budget: 50,
            query_timestamp: 0.5,
            top_k: 1,
            voting: Voting::Soft,
            soft_space: SoftSpace::Logits,
            seed: 0,
        }
    }
}

impl LocExtractConfig {
    pub fn validate(&self) -> Result<()> {
        if self.query_budget == 0 || self.top_k == 0 {
            return Err(Error::Config("query_budget and top_k must be at least 1".into()));
        }
        check_timestamp(self.query_timestamp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajExtractConfig {
    pub beam_width: usize,
    pub target_length: usize,
    pub query_timestamp: f64,
    /// How many of the final beam entries to return; `None` returns all.
    pub top_out: Option<usize>,
    pub seed: u64,
}

impl Default for TrajExtractConfig {
    fn default() -> Self {
        Self {
            beam_width: 50,
            target_length: 4,
            query_timestamp: 0.5,
            top_out: None,
            seed: 0,
        }
    }
}

impl TrajExtractConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if self.target_length < 2 {
            return Err(Error::Config("target_length must be at least 2".into()));
        }
        if let Some(k) = self.top_out {
            if k == 0 || k > self.beam_width {
                return Err(Error::Config("top_out must be in 1..=beam_width".into()));
            }
        }
        check_timestamp(self.query_timestamp)
    }
}

fn check_timestamp(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("query timestamp {t} outside [0, 1]")));
    }
    Ok(())
}

/// Ranked guesses for `user`'s most common location, best first.
///
/// Issues exactly `query_budget` single-check-in queries at seeded random
/// locations, all stamped `query_timestamp`.
pub fn loc_extract<O: PoiOracle + ?Sized>(oracle: &O, user: usize, cfg: &LocExtractConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let n = oracle.n_locations();
    let mut rng = rng_for(cfg.seed, &[STREAM_LOC_EXTRACT, user as u64]);
    let mut acc = vec![0.0; n];
    for _ in 0..cfg.query_budget {
        let probe = Visit::new(rng.gen_range(0..n), cfg.query_timestamp);
        let logits = oracle.query(user, &[probe])?;
        match cfg.voting {
            Voting::Soft => {
                let v = match cfg.soft_space {
                    SoftSpace::Logits => logits,
                    SoftSpace::Probabilities => softmax(&logits),
                };
                acc.iter_mut().zip(&v).for_each(|(a, x)| *a += x);
            }
            Voting::Hard => acc[top_k(&logits, 1)[0]] += 1.0,
        }
    }
    // Vote counts and sums rank the same as means, so no division is needed.
    Ok(top_k(&acc, cfg.top_k))
}

/// `loc_extract` for many users in parallel.
pub fn loc_extract_all<O: PoiOracle + ?Sized>(
    oracle: &O,
    users: &[usize],
    cfg: &LocExtractConfig,
) -> Result<Vec<Vec<usize>>> {
    users.par_iter().map(|&u| loc_extract(oracle, u, cfg)).collect()
}

/// One extracted candidate sequence and its log perplexity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub locations: Vec<usize>,
    pub ppl: f64,
}

/// Orders by log perplexity, then lexicographically by location sequence.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    a.ppl.total_cmp(&b.ppl).then_with(|| a.locations.cmp(&b.locations))
}

/// Beam search for low-perplexity length-`target_length` sequences starting at `start`.
///
/// Each beam entry costs one query per expansion step, and that query scores
/// all of its children at once. A full run therefore issues `1 + β·(n−2)`
/// queries when the beam stays full. The output is ascending by perplexity.
pub fn traj_extract<O: PoiOracle + ?Sized>(
    oracle: &O,
    user: usize,
    start: usize,
    cfg: &TrajExtractConfig,
) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    let n_loc = oracle.n_locations();
    if start >= n_loc {
        return Err(Error::OutOfBounds {
            what: "start location",
            index: start,
            bound: n_loc,
        });
    }
    let t = cfg.query_timestamp;
    let mut beam = vec![Candidate {
        locations: vec![start],
        ppl: 0.0,
    }];
    for _ in 1..cfg.target_length {
        // (parent index, child location, cumulative ppl)
        let mut children: Vec<(usize, usize, f64)> = Vec::with_capacity(beam.len() * n_loc);
        for (pi, parent) in beam.iter().enumerate() {
            let prefix: Vec<Visit> = parent.locations.iter().map(|&l| Visit::new(l, t)).collect();
            // Same arithmetic as `neg_log_prob`, with the softmax shared by all children.
            let probs = softmax(&oracle.query(user, &prefix)?);
            for (child, p) in probs.iter().enumerate() {
                children.push((pi, child, parent.ppl + -p.max(PROB_FLOOR).ln()));
            }
        }
        let cmp = |a: &(usize, usize, f64), b: &(usize, usize, f64)| {
            a.2.total_cmp(&b.2)
                .then_with(|| beam[a.0].locations.cmp(&beam[b.0].locations))
                .then(a.1.cmp(&b.1))
        };
        let keep = cfg.beam_width.min(children.len());
        if keep < children.len() {
            children.select_nth_unstable_by(keep - 1, cmp);
            children.truncate(keep);
        }
        children.sort_unstable_by(cmp);
        let next = children
            .iter()
            .map(|&(pi, child, ppl)| {
                let mut locations = beam[pi].locations.clone();
                locations.push(child);
                Candidate { locations, ppl }
            })
            .collect();
        beam = next;
    }
    if let Some(k) = cfg.top_out {
        beam.truncate(k);
    }
    Ok(beam)
}

/// Wraps an oracle and counts the queries issued through it.
pub struct CountingOracle<'a, O: PoiOracle + ?Sized> {
    inner: &'a O,
    count: AtomicUsize,
}

impl<'a, O: PoiOracle + ?Sized> CountingOracle<'a, O> {
    pub fn new(inner: &'a O) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn queries(&self) -> usize {
        self.count.load(AtomicOrdering::Relaxed)
    }
}

impl<O: PoiOracle + ?Sized> PoiOracle for CountingOracle<'_, O> {
    fn n_users(&self) -> usize {
        self.inner.n_users()
    }

    fn n_locations(&self) -> usize {
        self.inner.n_locations()
    }

    fn query(&self, user: usize, prefix: &[Visit]) -> Result<Vec<f64>> {
        self.count.fetch_add(1, AtomicOrdering::Relaxed);
        self.inner.query(user, prefix)
    }

    fn query_prefixes(&self, user: usize, prefix: &[Visit]) -> Result<Vec<Vec<f64>>> {
        self.count.fetch_add(prefix.len(), AtomicOrdering::Relaxed);
        self.inner.query_prefixes(user, prefix)
    }
}
