//! Check-in data model, loading, preprocessing, synthesis and summary statistics.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, Geometric, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_for, STREAM_SPLIT, STREAM_SYNTH};

pub const SECONDS_PER_DAY: f64 = 86_400.0;
pub const DATASET_FORMAT: &str = "poiaudit-dataset/1";

/// One check-in inside a trajectory. `time` is the normalized time of day in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub location: usize,
    pub time: f64,
}

impl Visit {
    pub fn new(location: usize, time: f64) -> Self {
        Self { location, time }
    }
}

/// A check-in with its user and coordinates resolved.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckIn {
    pub user: usize,
    pub location: usize,
    pub time: f64,
    pub latitude: f64,
    pub longitude: f64,
}

/// A check-in as read from disk, before filtering and normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckIn {
    pub user: usize,
    pub location: usize,
    pub datetime: NaiveDateTime,
    pub latitude: f64,
    pub longitude: f64,
}

/// Raw records plus the dense id tables built while loading.
#[derive(Clone, Debug, Default)]
pub struct RawCheckIns {
    pub records: Vec<RawCheckIn>,
    pub user_ids: Vec<String>,
    pub location_ids: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user: usize,
    pub day: Option<NaiveDate>,
    pub split: Split,
    pub visits: Vec<Visit>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    pub fn locations(&self) -> Vec<usize> {
        self.visits.iter().map(|v| v.location).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub latitude: f64,
    pub longitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub min_occurrence: usize,
    pub segment_hours: f64,
    pub split_ratio: [f64; 3],
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_occurrence: 10,
            segment_hours: 24.0,
            split_ratio: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_occurrence == 0 {
            return Err(Error::Config("min_occurrence must be at least 1".into()));
        }
        if self.split_ratio.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("split ratios must be positive".into()));
        }
        let total: f64 = self.split_ratio.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {total}, expected 1")));
        }
        // Only calendar-day segmentation is implemented.
        if (self.segment_hours - 24.0).abs() > 1e-9 {
            return Err(Error::Config("segment_hours must be 24".into()));
        }
        Ok(())
    }
}

/// Preprocessed mobility data: a location table and split-tagged daily trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MobilityDataset {
    pub n_users: usize,
    pub locations: Vec<Location>,
    pub trajectories: Vec<Trajectory>,
    pub user_ids: Vec<String>,
    pub location_ids: Vec<String>,
    pub preprocess: Option<PreprocessConfig>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    dataset: MobilityDataset,
}

impl MobilityDataset {
    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn n_checkins(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.trajectories
            .iter()
            .enumerate()
            .filter(|(_, t)| t.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(move |t| t.split == split)
    }

    pub fn checkins(&self) -> impl Iterator<Item = CheckIn> + '_ {
        self.trajectories.iter().flat_map(move |t| {
            t.visits.iter().map(move |v| {
                let loc = self.locations[v.location];
                CheckIn {
                    user: t.user,
                    location: v.location,
                    time: v.time,
                    latitude: loc.latitude,
                    longitude: loc.longitude,
                }
            })
        })
    }

    /// Copy of the dataset holding only the given trajectories, all tagged `split`.
    pub fn subset(&self, indices: &[usize], split: Split) -> MobilityDataset {
        let trajectories = indices
            .iter()
            .map(|&i| Trajectory {
                split,
                ..self.trajectories[i].clone()
            })
            .collect();
        MobilityDataset {
            trajectories,
            ..self.without_trajectories()
        }
    }

    /// Same id tables and locations, no trajectories.
    pub fn without_trajectories(&self) -> MobilityDataset {
        MobilityDataset {
            n_users: self.n_users,
            locations: self.locations.clone(),
            trajectories: Vec::new(),
            user_ids: self.user_ids.clone(),
            location_ids: self.location_ids.clone(),
            preprocess: self.preprocess.clone(),
        }
    }

    /// Checks the structural invariants of the data model.
    pub fn validate(&self) -> Result<()> {
        for (idx, loc) in self.locations.iter().enumerate() {
            if !(-90.0..=90.0).contains(&loc.latitude) || !(-180.0..=180.0).contains(&loc.longitude) {
                return Err(Error::Precondition(format!(
                    "location {idx} has invalid coordinates ({}, {})",
                    loc.latitude, loc.longitude
                )));
            }
        }
        for (idx, t) in self.trajectories.iter().enumerate() {
            if t.user >= self.n_users {
                return Err(Error::OutOfBounds {
                    what: "user",
                    index: t.user,
                    bound: self.n_users,
                });
            }
            if t.len() < 2 {
                return Err(Error::Precondition(format!("trajectory {idx} has length {}", t.len())));
            }
            for v in &t.visits {
                if v.location >= self.locations.len() {
                    return Err(Error::OutOfBounds {
                        what: "location",
                        index: v.location,
                        bound: self.locations.len(),
                    });
                }
                if !(0.0..=1.0).contains(&v.time) {
                    return Err(Error::Precondition(format!(
                        "trajectory {idx} has timestamp {} outside [0, 1]",
                        v.time
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = DatasetFile {
            format: DATASET_FORMAT.to_string(),
            dataset: self.clone(),
        };
        crate::io::write_json_atomic(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: DatasetFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if file.format != DATASET_FORMAT {
            return Err(Error::Config(format!(
                "{}: unsupported dataset format {:?}",
                path.display(),
                file.format
            )));
        }
        file.dataset.validate()?;
        Ok(file.dataset)
    }
}

/// Layout of a delimited check-in file. Columns are always
/// `user, time, latitude, longitude, location`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordFormat {
    pub delimiter: u8,
    pub has_header: bool,
}

impl Default for RecordFormat {
    fn default() -> Self {
        Self {
            delimiter: b',',
            has_header: false,
        }
    }
}

impl RecordFormat {
    pub fn tab() -> Self {
        Self {
            delimiter: b'\t',
            ..Self::default()
        }
    }
}

/// Parses the timestamp formats seen in public check-in dumps. Offsets are
/// dropped and the wall-clock time is kept as given.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(secs) = s.parse::<i64>() {
        return DateTime::from_timestamp(secs, 0).map(|d| d.naive_utc());
    }
    if let Ok(d) = DateTime::parse_from_rfc3339(s) {
        return Some(d.naive_local());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(d) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(d);
        }
    }
    DateTime::parse_from_str(s, "%a %b %d %H:%M:%S %z %Y")
        .ok()
        .map(|d| d.naive_local())
}

struct IdTable {
    index: HashMap<String, usize>,
    names: Vec<String>,
}

impl IdTable {
    fn new() -> Self {
        Self {
            index: HashMap::new(),
            names: Vec::new(),
        }
    }

    fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.index.insert(name.to_string(), i);
        self.names.push(name.to_string());
        i
    }
}

pub fn load_checkins(path: &Path, format: RecordFormat) -> Result<RawCheckIns> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .has_headers(format.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut users = IdTable::new();
    let mut locations = IdTable::new();
    let mut records = Vec::new();
    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        message,
    };
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1 + usize::from(format.has_header);
        let rec = rec.map_err(|e| parse_err(row, e.to_string()))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != 5 {
            return Err(parse_err(row, format!("expected 5 fields, found {}", rec.len())));
        }
        let datetime =
            parse_timestamp(&rec[1]).ok_or_else(|| parse_err(row, format!("unparseable timestamp {:?}", &rec[1])))?;
        let latitude: f64 = rec[2]
            .parse()
            .map_err(|_| parse_err(row, format!("bad latitude {:?}", &rec[2])))?;
        let longitude: f64 = rec[3]
            .parse()
            .map_err(|_| parse_err(row, format!("bad longitude {:?}", &rec[3])))?;
        if !(-90.0..=90.0).contains(&latitude) || !(-180.0..=180.0).contains(&longitude) {
            return Err(parse_err(row, format!("coordinates ({latitude}, {longitude}) out of range")));
        }
        records.push(RawCheckIn {
            user: users.intern(&rec[0]),
            location: locations.intern(&rec[4]),
            datetime,
            latitude,
            longitude,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(format!("{} contains no check-ins", path.display())));
    }
    Ok(RawCheckIns {
        records,
        user_ids: users.names,
        location_ids: locations.names,
    })
}

/// Writes a dataset back out as delimited check-in rows. Times are rendered on
/// each trajectory's day (or 2012-01-01 plus the trajectory index when absent).
pub fn write_checkins(ds: &MobilityDataset, path: &Path, format: RecordFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let base = NaiveDate::from_ymd_opt(2012, 1, 1).expect("valid date");
    let delim = format.delimiter as char;
    if format.has_header {
        writeln!(w, "user{delim}time{delim}latitude{delim}longitude{delim}location")?;
    }
    for (ti, t) in ds.trajectories.iter().enumerate() {
        let day = t.day.unwrap_or(base + Duration::days(ti as i64));
        for v in &t.visits {
            let secs = (v.time * SECONDS_PER_DAY).round().min(SECONDS_PER_DAY - 1.0) as i64;
            let dt = day.and_hms_opt(0, 0, 0).expect("midnight") + Duration::seconds(secs);
            let loc = ds.locations[v.location];
            writeln!(
                w,
                "{}{delim}{}{delim}{}{delim}{}{delim}{}",
                ds.user_ids[t.user],
                dt.format("%Y-%m-%dT%H:%M:%S"),
                loc.latitude,
                loc.longitude,
                ds.location_ids[v.location]
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn normalize_time(dt: &NaiveDateTime) -> f64 {
    f64::from(dt.num_seconds_from_midnight()) / SECONDS_PER_DAY
}

/// Inverse of [`normalize_time`], to the nearest second.
pub fn denormalize_time(t: f64) -> u32 {
    (t * SECONDS_PER_DAY).round() as u32
}

fn count_by<F: Fn(&RawCheckIn) -> usize>(records: &[&RawCheckIn], n: usize, key: F) -> Vec<usize> {
    let mut counts = vec![0; n];
    for r in records {
        counts[key(r)] += 1;
    }
    counts
}

/// Groups records into per-user calendar-day segments, ordered by user then day.
fn segment<'a>(records: &[&'a RawCheckIn]) -> Vec<(usize, NaiveDate, Vec<&'a RawCheckIn>)> {
    let mut by_key: BTreeMap<(usize, NaiveDate), Vec<&RawCheckIn>> = BTreeMap::new();
    for r in records {
        by_key.entry((r.user, r.datetime.date())).or_default().push(r);
    }
    by_key
        .into_iter()
        .map(|((user, day), mut recs)| {
            recs.sort_by_key(|r| r.datetime);
            (user, day, recs)
        })
        .collect()
}

/// Filters, segments, normalizes and splits raw check-ins.
///
/// Filtering and singleton-trajectory removal are repeated until no user or
/// POI falls below `min_occurrence`, so the threshold holds on the output.
pub fn preprocess(raw: &RawCheckIns, cfg: &PreprocessConfig) -> Result<MobilityDataset> {
    cfg.validate()?;
    if raw.records.is_empty() {
        return Err(Error::EmptyDataset("no check-ins to preprocess".into()));
    }
    let n_users = raw.user_ids.len();
    let n_locs = raw.location_ids.len();
    let mut active: Vec<&RawCheckIn> = raw.records.iter().collect();
    let segments = loop {
        let before = active.len();
        let users = count_by(&active, n_users, |r| r.user);
        let locs = count_by(&active, n_locs, |r| r.location);
        active.retain(|r| users[r.user] >= cfg.min_occurrence && locs[r.location] >= cfg.min_occurrence);
        let segments: Vec<_> = segment(&active).into_iter().filter(|s| s.2.len() >= 2).collect();
        let kept: usize = segments.iter().map(|s| s.2.len()).sum();
        if kept == before {
            break segments;
        }
        active = segments.into_iter().flat_map(|s| s.2).collect();
        if active.is_empty() {
            break Vec::new();
        }
    };
    if segments.is_empty() {
        return Err(Error::EmptyDataset("all check-ins were filtered out".into()));
    }

    // Dense re-indexing in original-id order.
    let mut user_map = vec![usize::MAX; n_users];
    let mut loc_map = vec![usize::MAX; n_locs];
    let mut loc_coords = vec![None; n_locs];
    for (_, _, recs) in &segments {
        for r in recs {
            user_map[r.user] = 0;
            loc_map[r.location] = 0;
            loc_coords[r.location].get_or_insert(Location {
                latitude: r.latitude,
                longitude: r.longitude,
            });
        }
    }
    let mut user_ids = Vec::new();
    for (i, slot) in user_map.iter_mut().enumerate() {
        if *slot == 0 {
            *slot = user_ids.len();
            user_ids.push(raw.user_ids[i].clone());
        }
    }
    let mut location_ids = Vec::new();
    let mut locations = Vec::new();
    for (i, slot) in loc_map.iter_mut().enumerate() {
        if *slot == 0 {
            *slot = location_ids.len();
            location_ids.push(raw.location_ids[i].clone());
            locations.push(loc_coords[i].expect("coordinates recorded"));
        }
    }

    let mut trajectories: Vec<Trajectory> = segments
        .into_iter()
        .map(|(user, day, recs)| Trajectory {
            user: user_map[user],
            day: Some(day),
            split: Split::Train,
            visits: recs
                .iter()
                .map(|r| Visit::new(loc_map[r.location], normalize_time(&r.datetime)))
                .collect(),
        })
        .collect();
    trajectories.sort_by(|a, b| (a.user, a.day).cmp(&(b.user, b.day)));
    assign_splits(&mut trajectories, cfg.split_ratio, cfg.seed);

    Ok(MobilityDataset {
        n_users: user_ids.len(),
        locations,
        trajectories,
        user_ids,
        location_ids,
        preprocess: Some(cfg.clone()),
    })
}

/// Trajectory-level random split: a seeded shuffle, then contiguous blocks.
pub fn assign_splits(trajectories: &mut [Trajectory], ratio: [f64; 3], seed: u64) {
    let n = trajectories.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[STREAM_SPLIT]));
    let n_train = ((ratio[0] * n as f64).round() as usize).min(n);
    let n_valid = ((ratio[1] * n as f64).round() as usize).min(n - n_train);
    for (rank, &i) in order.iter().enumerate() {
        trajectories[i].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
}

/// Parameters of the synthetic check-in generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_locations: usize,
    pub n_days: usize,
    pub seed: u64,
    pub zipf_exponent: f64,
    /// Beta shape parameters of the time-of-day density.
    pub time_beta: [f64; 2],
    /// Beta shape parameters of each user's daily activity probability.
    pub activity_beta: [f64; 2],
    /// Mean number of check-ins beyond the first two in a trajectory.
    pub mean_extra_length: f64,
    pub center: [f64; 2],
    /// Half-width of the bounding box in degrees.
    pub extent_deg: f64,
    pub split_ratio: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_locations: 500,
            n_days: 60,
            seed: 0,
            zipf_exponent: 1.2,
            time_beta: [3.0, 3.0],
            activity_beta: [2.0, 3.0],
            mean_extra_length: 1.63,
            center: [40.73, -73.95],
            extent_deg: 0.1,
            split_ratio: [0.8, 0.1, 0.1],
        }
    }
}

/// What the generator knows that the dataset alone does not state directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Designated most-common location per user.
    pub most_common: Vec<usize>,
    /// Membership label per trajectory (`true` for TRAIN).
    pub membership: Vec<bool>,
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<(MobilityDataset, GroundTruth)> {
    if cfg.n_users < 2 || cfg.n_locations < 2 {
        return Err(Error::Config("synthetic data needs at least 2 users and 2 locations".into()));
    }
    if cfg.n_days == 0 {
        return Err(Error::Config("n_days must be positive".into()));
    }
    if !(cfg.zipf_exponent > 0.0) || !(cfg.mean_extra_length >= 0.0) {
        return Err(Error::Config("zipf_exponent must be positive, mean_extra_length non-negative".into()));
    }
    let bad = |e: rand_distr::BetaError| Error::Config(format!("beta parameters: {e}"));
    let time_dist = Beta::new(cfg.time_beta[0], cfg.time_beta[1]).map_err(bad)?;
    let activity_dist = Beta::new(cfg.activity_beta[0], cfg.activity_beta[1]).map_err(bad)?;
    let zipf = Zipf::new(cfg.n_locations as u64, cfg.zipf_exponent)
        .map_err(|e| Error::Config(format!("zipf: {e:?}")))?;
    let extra = Geometric::new(1.0 / (1.0 + cfg.mean_extra_length))
        .map_err(|e| Error::Config(format!("geometric: {e:?}")))?;

    let mut rng = rng_for(cfg.seed, &[STREAM_SYNTH]);
    let locations: Vec<Location> = (0..cfg.n_locations)
        .map(|_| Location {
            latitude: cfg.center[0] + rng.gen_range(-cfg.extent_deg..cfg.extent_deg),
            longitude: cfg.center[1] + rng.gen_range(-cfg.extent_deg..cfg.extent_deg),
        })
        .collect();
    let base_day = NaiveDate::from_ymd_opt(2012, 4, 12).expect("valid date");

    let mut trajectories = Vec::new();
    let mut most_common = Vec::with_capacity(cfg.n_users);
    for user in 0..cfg.n_users {
        let mut prefs: Vec<usize> = (0..cfg.n_locations).collect();
        prefs.shuffle(&mut rng);
        let activity = activity_dist.sample(&mut rng);
        let mut days: Vec<usize> = (0..cfg.n_days).filter(|_| rng.gen_bool(activity)).collect();
        if days.is_empty() {
            days.push(rng.gen_range(0..cfg.n_days));
        }
        let first = trajectories.len();
        for day in days {
            let len = 2 + extra.sample(&mut rng) as usize;
            let mut times: Vec<u32> = (0..len)
                .map(|_| ((time_dist.sample(&mut rng) * SECONDS_PER_DAY) as u32).min(86_399))
                .collect();
            times.sort_unstable();
            let visits = times
                .into_iter()
                .map(|s| {
                    let rank = zipf.sample(&mut rng) as usize;
                    Visit::new(prefs[rank - 1], f64::from(s) / SECONDS_PER_DAY)
                })
                .collect();
            trajectories.push(Trajectory {
                user,
                day: Some(base_day + Duration::days(day as i64)),
                split: Split::Train,
                visits,
            });
        }
        enforce_mode(&mut trajectories[first..], prefs[0]);
        most_common.push(prefs[0]);
    }
    assign_splits(&mut trajectories, cfg.split_ratio, cfg.seed);
    let membership = trajectories.iter().map(|t| t.split == Split::Train).collect();
    let ds = MobilityDataset {
        n_users: cfg.n_users,
        locations,
        trajectories,
        user_ids: (0..cfg.n_users).map(|u| format!("u{u}")).collect(),
        location_ids: (0..cfg.n_locations).map(|l| format!("poi{l}")).collect(),
        preprocess: None,
    };
    Ok((ds, GroundTruth { most_common, membership }))
}

/// Rewrites the latest visits of the runner-up location until `designated`
/// is the strict mode of the user's check-ins.
fn enforce_mode(trajectories: &mut [Trajectory], designated: usize) {
    loop {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for v in trajectories.iter().flat_map(|t| &t.visits) {
            *counts.entry(v.location).or_default() += 1;
        }
        let own = counts.get(&designated).copied().unwrap_or(0);
        let rival = counts
            .iter()
            .filter(|(&l, _)| l != designated)
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&l, &c)| (l, c));
        match rival {
            Some((loc, c)) if c >= own => {
                let v = trajectories
                    .iter_mut()
                    .rev()
                    .flat_map(|t| t.visits.iter_mut().rev())
                    .find(|v| v.location == loc)
                    .expect("rival location present");
                v.location = designated;
            }
            _ => return,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_pois: usize,
    pub n_checkins: usize,
    pub n_users: usize,
    pub n_trajectories: usize,
    pub avg_trajectory_length: f64,
}

pub fn dataset_stats(ds: &MobilityDataset) -> Result<DatasetStats> {
    if ds.trajectories.is_empty() {
        return Err(Error::EmptyDataset("dataset has no trajectories".into()));
    }
    let mut pois = vec![false; ds.n_locations()];
    let mut users = vec![false; ds.n_users];
    for t in &ds.trajectories {
        users[t.user] = true;
        for v in &t.visits {
            pois[v.location] = true;
        }
    }
    let n_checkins = ds.n_checkins();
    Ok(DatasetStats {
        n_pois: pois.iter().filter(|&&b| b).count(),
        n_checkins,
        n_users: users.iter().filter(|&&b| b).count(),
        n_trajectories: ds.trajectories.len(),
        avg_trajectory_length: n_checkins as f64 / ds.trajectories.len() as f64,
    })
}

/// Per-user most frequent location among TRAIN check-ins (ties to the lower id).
pub fn most_common_locations(ds: &MobilityDataset, split: Option<Split>) -> Vec<Option<usize>> {
    let mut counts: Vec<HashMap<usize, usize>> = vec![HashMap::new(); ds.n_users];
    for t in ds.trajectories.iter().filter(|t| split.map_or(true, |s| t.split == s)) {
        for v in &t.visits {
            *counts[t.user].entry(v.location).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|c| {
            c.into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(l, _)| l)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_single_row() {
        let f = write_tmp("42,2012-04-12T13:00:00,40.7,-74.0,POI_7\n");
        let raw = load_checkins(f.path(), RecordFormat::default()).unwrap();
        assert_eq!(raw.records.len(), 1);
        let r = &raw.records[0];
        assert_eq!((r.user, r.location), (0, 0));
        assert_eq!(raw.user_ids, vec!["42"]);
        assert_eq!(raw.location_ids, vec!["POI_7"]);
        assert_eq!(r.datetime.to_string(), "2012-04-12 13:00:00");
        assert_eq!((r.latitude, r.longitude), (40.7, -74.0));
    }

    #[test]
    fn short_row_is_a_parse_error_naming_the_row() {
        let f = write_tmp("1,2012-04-12T13:00:00,40.7,-74.0,a\n2,2012-04-12T13:00:00,40.7,-74.0\n");
        match load_checkins(f.path(), RecordFormat::default()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_rejected() {
        let f = write_tmp("");
        assert!(matches!(
            load_checkins(f.path(), RecordFormat::default()),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn tab_delimiter_and_foursquare_time_format() {
        let f = write_tmp("7\tTue Apr 03 18:00:09 +0000 2012\t40.7\t-74.0\tvenue\n");
        let raw = load_checkins(f.path(), RecordFormat::tab()).unwrap();
        assert_eq!(raw.records[0].datetime.to_string(), "2012-04-03 18:00:09");
    }

    fn rows(user: &str, day: u32, locs: &[&str]) -> String {
        locs.iter()
            .enumerate()
            .map(|(i, l)| format!("{user},2012-05-{day:02}T{:02}:00:00,40.7,-74.0,{l}\n", 8 + i))
            .collect()
    }

    #[test]
    fn user_below_threshold_is_dropped() {
        let mut s = String::new();
        // users a and c: 10 check-ins each on two POIs; user b: 9 check-ins.
        for u in ["a", "c"] {
            s += &rows(u, 1, &["p", "q", "p", "q", "p"]);
            s += &rows(u, 2, &["q", "p", "q", "p", "q"]);
        }
        s += &rows("b", 1, &["p", "q", "p", "q", "p"]);
        s += &rows("b", 2, &["q", "p", "q", "p"]);
        let f = write_tmp(&s);
        let raw = load_checkins(f.path(), RecordFormat::default()).unwrap();
        let ds = preprocess(&raw, &PreprocessConfig::default()).unwrap();
        assert_eq!(ds.user_ids, vec!["a", "c"]);
        assert_eq!(ds.n_checkins(), 20);
    }

    #[test]
    fn filtering_cascades_to_a_fixed_point() {
        let mut s = String::new();
        // POI "rare" has exactly 10 check-ins, 2 of them from user b who has 9
        // in total; dropping b pushes "rare" below threshold in a second pass.
        s += &rows("a", 1, &["rare", "rare", "rare", "rare", "x"]);
        s += &rows("a", 2, &["rare", "rare", "rare", "rare", "x"]);
        s += &rows("a", 3, &["x", "x", "x", "x", "x", "x", "x", "x", "x", "x"]);
        s += &rows("b", 1, &["rare", "rare", "x", "x", "x"]);
        s += &rows("b", 2, &["x", "x", "x", "x"]);
        let f = write_tmp(&s);
        let raw = load_checkins(f.path(), RecordFormat::default()).unwrap();
        let ds = preprocess(&raw, &PreprocessConfig::default()).unwrap();
        // Day 1 and 2 collapse to singletons once "rare" is gone.
        assert_eq!(ds.location_ids, vec!["x"]);
        assert_eq!(ds.user_ids, vec!["a"]);
        assert_eq!(ds.n_checkins(), 10);
        assert_eq!(ds.trajectories.len(), 1);
    }

    #[test]
    fn everything_filtered_is_an_error() {
        let f = write_tmp(&rows("a", 1, &["p", "q"]));
        let raw = load_checkins(f.path(), RecordFormat::default()).unwrap();
        assert!(matches!(
            preprocess(&raw, &PreprocessConfig::default()),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn normalization_round_trips_to_the_second() {
        let dt = NaiveDate::from_ymd_opt(2012, 4, 12)
            .unwrap()
            .and_hms_opt(23, 59, 59)
            .unwrap();
        let t = normalize_time(&dt);
        assert!(t <= 1.0);
        assert_eq!(denormalize_time(t), 86_399);
    }

    #[test]
    fn synth_is_deterministic_and_mode_matches_ground_truth() {
        let cfg = SynthConfig {
            n_users: 200,
            n_locations: 500,
            n_days: 60,
            seed: 7,
            ..SynthConfig::default()
        };
        let (a, truth) = synth_generate(&cfg).unwrap();
        let (b, _) = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        let empirical = most_common_locations(&a, None);
        for (u, m) in empirical.iter().enumerate() {
            assert_eq!(*m, Some(truth.most_common[u]), "user {u}");
        }
        // Strict mode: recount independently.
        for u in 0..a.n_users {
            let mut counts = vec![0usize; a.n_locations()];
            for t in a.trajectories.iter().filter(|t| t.user == u) {
                for v in &t.visits {
                    counts[v.location] += 1;
                }
            }
            let best = counts[truth.most_common[u]];
            assert_eq!(counts.iter().filter(|&&c| c >= best).count(), 1);
        }
    }

    #[test]
    fn synth_with_two_locations_uses_only_those() {
        let cfg = SynthConfig {
            n_users: 5,
            n_locations: 2,
            n_days: 10,
            seed: 1,
            ..SynthConfig::default()
        };
        let (ds, _) = synth_generate(&cfg).unwrap();
        assert!(ds.checkins().all(|c| c.location < 2));
        assert!(synth_generate(&SynthConfig { n_locations: 1, ..cfg }).is_err());
    }

    #[test]
    fn stats_of_single_trajectory() {
        let ds = MobilityDataset {
            n_users: 1,
            locations: vec![Location { latitude: 0.0, longitude: 0.0 }; 3],
            trajectories: vec![Trajectory {
                user: 0,
                day: None,
                split: Split::Train,
                visits: vec![Visit::new(0, 0.1), Visit::new(1, 0.2), Visit::new(0, 0.3)],
            }],
            user_ids: vec!["u".into()],
            location_ids: vec!["a".into(), "b".into(), "c".into()],
            preprocess: None,
        };
        let s = dataset_stats(&ds).unwrap();
        assert!(s.n_pois <= 3);
        assert_eq!((s.n_checkins, s.n_users, s.n_trajectories), (3, 1, 1));
        assert_eq!(s.avg_trajectory_length, 3.0);
    }

    #[test]
    fn synth_stats_match_recount() {
        let (ds, truth) = synth_generate(&SynthConfig {
            n_users: 30,
            n_locations: 40,
            n_days: 12,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let s = dataset_stats(&ds).unwrap();
        let checkins: usize = ds.trajectories.iter().map(|t| t.visits.len()).sum();
        assert_eq!(s.n_checkins, checkins);
        assert_eq!(s.n_trajectories, truth.membership.len());
        assert_eq!(s.n_users, 30);
    }

    #[test]
    fn split_is_a_partition_with_configured_ratio() {
        let (ds, _) = synth_generate(&SynthConfig {
            n_users: 50,
            n_locations: 30,
            n_days: 20,
            seed: 11,
            ..SynthConfig::default()
        })
        .unwrap();
        let n = ds.trajectories.len();
        let train = ds.split_indices(Split::Train).len();
        let valid = ds.split_indices(Split::Valid).len();
        let test = ds.split_indices(Split::Test).len();
        assert_eq!(train + valid + test, n);
        assert_eq!(train, (0.8 * n as f64).round() as usize);
        assert_eq!(valid, (0.1 * n as f64).round() as usize);
    }

    #[test]
    fn dataset_file_round_trip() {
        let (ds, _) = synth_generate(&SynthConfig {
            n_users: 4,
            n_locations: 6,
            n_days: 5,
            seed: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.json");
        ds.save(&p).unwrap();
        assert_eq!(MobilityDataset::load(&p).unwrap(), ds);
    }
}
