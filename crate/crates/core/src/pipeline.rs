//! Seed-replicated audit runs. Stages exchange data only through files in
//! the output directory; a manifest per seed records each artifact's cache
//! key and content hash so later runs can reuse and verify them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{most_common_locations, MobilityDataset, Split};
use crate::defense::{
    geo_ind_perturb, jft_train, overfit_controls, tradeoff_eval, AttackKind, DpSgdHook, ProtectedSet, Scope,
    TradeoffRecord,
};
use crate::error::{Error, Result};
use crate::eval::{compute_aggregate_stats, loc_extraction_asr, traj_extraction_asr, vulnerability_binning};
use crate::experiment::{
    attack_victim, build_ensemble, locmia_setup, train_victim, trajmia_setup, without_member_targets, DefenseSpec,
    ExperimentConfig, MiaSetup,
};
use crate::extraction::{loc_extract_all, traj_extract, CountingOracle, Voting};
use crate::io::{sha256_file, sha256_hex, write_bytes_atomic, write_json_atomic};
use crate::membership::{LiraResult, Target};
use crate::model::PoiModel;
use crate::train::{evaluate_topk, train, TrainConfig};

pub const MANIFEST: &str = "manifest.json";
pub const REPORT: &str = "report.json";
pub const SUMMARY: &str = "summary.csv";
pub const FAILURE_MARKER: &str = "FAILED.json";

pub type Metrics = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: Metrics,
    /// Per-target detail file, relative to the output directory.
    pub detail: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    /// SHA-256 of each seed's victim checkpoint, in seed order.
    pub checkpoints: Vec<String>,
    /// Resolved configuration, TOML-encoded.
    pub config: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: String,
    pub per_seed: Vec<SeedMetrics>,
    /// Arithmetic mean over seeds of every metric.
    pub mean: Metrics,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    /// artifact file name -> (cache key, content hash)
    artifacts: BTreeMap<String, (String, String)>,
}

#[derive(Serialize)]
struct FailureMarker<'a> {
    stage: &'a str,
    seed: Option<u64>,
    message: String,
}

fn stage<T>(name: &'static str, seed: Option<u64>, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            seed,
            source: Box::new(e),
        },
    })
}

/// Hash of the configuration with the output location blanked, so that the
/// same experiment hashes equally wherever it is written.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    Ok(sha256_hex(portable_toml(cfg)?.as_bytes()))
}

fn portable_toml(cfg: &ExperimentConfig) -> Result<String> {
    ExperimentConfig {
        output_dir: PathBuf::new(),
        ..cfg.clone()
    }
    .to_toml()
}

fn toml_of<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Config(format!("serializing config: {e}")))
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Cached artifacts of one seed replicate.
pub struct SeedStore {
    dir: PathBuf,
    manifest: Manifest,
}

impl SeedStore {
    pub fn open(out: &Path, seed: u64) -> Result<Self> {
        let dir = seed_dir(out, seed);
        fs::create_dir_all(&dir)?;
        let path = dir.join(MANIFEST);
        let manifest = if path.is_file() {
            let m: Manifest = serde_json::from_slice(&fs::read(&path)?)?;
            if m.seed != seed {
                return Err(Error::Config(format!("{} belongs to seed {}", path.display(), m.seed)));
            }
            m
        } else {
            Manifest {
                seed,
                ..Manifest::default()
            }
        };
        Ok(Self { dir, manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Path of `name` when it is cached under `key` and its hash still matches.
    fn cached(&self, name: &str, key: &str) -> Result<Option<PathBuf>> {
        let Some((k, hash)) = self.manifest.artifacts.get(name) else {
            return Ok(None);
        };
        let path = self.dir.join(name);
        if k != key || !path.is_file() {
            return Ok(None);
        }
        if &sha256_file(&path)? != hash {
            return Err(Error::HashMismatch { path });
        }
        Ok(Some(path))
    }

    fn record(&mut self, name: &str, key: &str) -> Result<String> {
        let hash = sha256_file(&self.dir.join(name))?;
        self.manifest
            .artifacts
            .insert(name.to_string(), (key.to_string(), hash.clone()));
        write_json_atomic(&self.dir.join(MANIFEST), &self.manifest)?;
        Ok(hash)
    }

    pub fn hash_of(&self, name: &str) -> Option<&str> {
        self.manifest.artifacts.get(name).map(|(_, h)| h.as_str())
    }
}

fn dataset_key(cfg: &ExperimentConfig, seed: u64) -> Result<String> {
    let mut text = toml_of(&cfg.dataset)? + &toml_of(&cfg.preprocess)? + &format!("seed={seed}\n");
    if let crate::experiment::DatasetSource::File { path, .. } = &cfg.dataset {
        text += &sha256_file(path)?;
    }
    Ok(sha256_hex(text.as_bytes()))
}

fn victim_key(cfg: &ExperimentConfig, seed: u64) -> Result<String> {
    let text = dataset_key(cfg, seed)? + &toml_of(&cfg.model)? + &toml_of(&cfg.train)?;
    Ok(sha256_hex(text.as_bytes()))
}

/// The seed's dataset, from cache when its key and hash match.
pub fn stage_dataset(cfg: &ExperimentConfig, store: &mut SeedStore) -> Result<MobilityDataset> {
    let seed = store.manifest.seed;
    let key = dataset_key(cfg, seed)?;
    if let Some(path) = store.cached("dataset.json", &key)? {
        return MobilityDataset::load(&path);
    }
    let (ds, _) = cfg.load_dataset(seed)?;
    ds.save(&store.dir.join("dataset.json"))?;
    store.record("dataset.json", &key)?;
    Ok(ds)
}

/// The seed's undefended victim, from cache when its key and hash match.
pub fn stage_victim(cfg: &ExperimentConfig, store: &mut SeedStore, ds: &MobilityDataset) -> Result<PoiModel> {
    let seed = store.manifest.seed;
    let key = victim_key(cfg, seed)?;
    if let Some(path) = store.cached("victim.json", &key)? {
        return PoiModel::load(&path);
    }
    let victim = train_victim(ds, &cfg.model, &cfg.train, seed, &[])?;
    write_bytes_atomic(&store.dir.join("victim_train.csv"), victim.log.to_csv().as_bytes())?;
    victim.model.save(&store.dir.join("victim.json"))?;
    store.record("victim.json", &key)?;
    Ok(victim.model)
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Per-seed outcome of the stages after training.
struct SeedOutcome {
    /// attack id -> (metrics, detail file name)
    attacks: Vec<(String, Metrics, Option<String>)>,
    checkpoint: String,
}

fn victim_metrics(model: &PoiModel, ds: &MobilityDataset) -> Result<Metrics> {
    let acc = evaluate_topk(model, ds, Split::Test, &[1, 10])?;
    Ok(Metrics::from([("top1".into(), acc[0]), ("top10".into(), acc[1])]))
}

fn run_locextract(cfg: &ExperimentConfig, model: &PoiModel, ds: &MobilityDataset, dir: &Path) -> Result<Metrics> {
    let truth_all = most_common_locations(ds, Some(Split::Train));
    let users: Vec<usize> = (0..ds.n_users).filter(|&u| truth_all[u].is_some()).collect();
    let truth: Vec<Option<usize>> = users.iter().map(|&u| truth_all[u]).collect();
    let preds = loc_extract_all(model, &users, &cfg.loc_extract)?;
    let eval = loc_extraction_asr(&preds, &truth, &cfg.ks)?;
    let mut header = vec!["user".to_string(), "truth".into(), "ranked".into()];
    header.extend(cfg.ks.iter().map(|k| format!("hit@{k}")));
    let rows = users
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let mut r = vec![u.to_string(), truth[i].map(|t| t.to_string()).unwrap_or_default(), join(&preds[i])];
            r.extend(eval.hits[i].iter().map(|h| u8::from(*h).to_string()));
            r
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_bytes_atomic(&dir.join("locextract.csv"), &csv_bytes(&header, rows)?)?;
    let mut m: Metrics = cfg.ks.iter().zip(&eval.asr).map(|(k, a)| (format!("asr@{k}"), *a)).collect();
    m.insert("n_targets".into(), users.len() as f64);
    m.insert("queries_per_target".into(), cfg.loc_extract.query_budget as f64);
    Ok(m)
}

/// One start location per user: the first location of their most frequent
/// length-`n` TRAIN window, ties to the lexicographically smallest window.
pub fn trajextract_pairs(ds: &MobilityDataset, n: usize) -> Vec<(usize, usize)> {
    let mut counts: Vec<BTreeMap<Vec<usize>, usize>> = vec![BTreeMap::new(); ds.n_users];
    for t in ds.split(Split::Train) {
        for w in t.locations().windows(n) {
            *counts[t.user].entry(w.to_vec()).or_default() += 1;
        }
    }
    counts
        .iter()
        .enumerate()
        .filter_map(|(u, c)| {
            let best = c.values().max()?;
            let (w, _) = c.iter().find(|(_, v)| *v == best)?;
            Some((u, w[0]))
        })
        .collect()
}

fn run_trajextract(cfg: &ExperimentConfig, model: &PoiModel, ds: &MobilityDataset, dir: &Path) -> Result<Metrics> {
    use rayon::prelude::*;
    let n = cfg.traj_extract.target_length;
    let pairs = trajextract_pairs(ds, n);
    let results: Vec<(Vec<Vec<usize>>, f64, usize)> = pairs
        .par_iter()
        .map(|&(u, l0)| {
            let counter = CountingOracle::new(model);
            let cands = traj_extract(&counter, u, l0, &cfg.traj_extract)?;
            let best = cands.first().map_or(f64::NAN, |c| c.ppl);
            Ok((cands.into_iter().map(|c| c.locations).collect(), best, counter.queries()))
        })
        .collect::<Result<_>>()?;
    let preds: Vec<Vec<Vec<usize>>> = results.iter().map(|r| r.0.clone()).collect();
    let eval = traj_extraction_asr(&preds, &pairs, ds, n, &cfg.ks)?;
    let mut header = vec!["user".to_string(), "start".into(), "best".into(), "best_ppl".into(), "queries".into()];
    header.extend(cfg.ks.iter().map(|k| format!("hit@{k}")));
    let rows = pairs
        .iter()
        .enumerate()
        .map(|(i, &(u, l0))| {
            let best = preds[i].first().map(|c| join(c)).unwrap_or_default();
            let mut r = vec![u.to_string(), l0.to_string(), best, results[i].1.to_string(), results[i].2.to_string()];
            r.extend(eval.hits[i].iter().map(|h| u8::from(*h).to_string()));
            r
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_bytes_atomic(&dir.join("trajextract.csv"), &csv_bytes(&header, rows)?)?;
    let mut m: Metrics = cfg.ks.iter().zip(&eval.asr).map(|(k, a)| (format!("asr@{k}"), *a)).collect();
    m.insert("n_targets".into(), pairs.len() as f64);
    let q: usize = results.iter().map(|r| r.2).sum();
    m.insert("queries_per_target".into(), q as f64 / pairs.len().max(1) as f64);
    Ok(m)
}

fn mia_rows(setup: &MiaSetup, results: &[LiraResult]) -> Vec<Vec<String>> {
    setup
        .targets
        .iter()
        .zip(&setup.labels)
        .zip(results)
        .enumerate()
        .map(|(i, ((t, label), r))| {
            let item = match t {
                Target::Loc(l) => l.location.to_string(),
                Target::Traj(tr) => join(&tr.visits.iter().map(|v| v.location).collect::<Vec<_>>()),
            };
            vec![
                i.to_string(),
                t.user().to_string(),
                item,
                u8::from(*label).to_string(),
                r.conf_obs.to_string(),
                r.mu_in.to_string(),
                r.mu_out.to_string(),
                r.var_in.to_string(),
                r.var_out.to_string(),
                r.log_lambda.to_string(),
                u8::from(r.is_member()).to_string(),
            ]
        })
        .collect()
}

const MIA_HEADER: [&str; 11] = [
    "target", "user", "item", "member", "conf_obs", "mu_in", "mu_out", "var_in", "var_out", "log_lambda", "predicted",
];

fn mia_metrics(eval: &crate::eval::MiaEval) -> Metrics {
    let mut m = Metrics::from([
        ("auc".to_string(), eval.auc),
        ("acc".to_string(), eval.acc),
        ("n_members".to_string(), eval.n_members as f64),
        ("n_nonmembers".to_string(), eval.n_nonmembers as f64),
    ]);
    for (fpr, tpr) in &eval.tpr_at_fpr {
        m.insert(format!("tpr@fpr={fpr}"), *tpr);
    }
    m
}

/// Per-target vulnerability statistics used for percentile binning.
fn target_statistics(ds: &MobilityDataset, setup: &MiaSetup) -> Vec<(&'static str, Vec<f64>)> {
    let stats = compute_aggregate_stats(ds);
    let users: Vec<usize> = setup.targets.iter().map(Target::user).collect();
    let mut out = vec![
        ("user_checkins", users.iter().map(|&u| stats.users[u].total_checkins as f64).collect()),
        ("user_unique_pois", users.iter().map(|&u| stats.users[u].unique_pois as f64).collect()),
    ];
    match setup.kind {
        AttackKind::TrajMia => {
            let idx: Vec<usize> = setup.source_index.iter().map(|i| i.expect("trajectory target")).collect();
            out.push(("traj_intercepting", idx.iter().map(|&i| stats.trajectories[i].intercepting as f64).collect()));
            out.push(("traj_users_sharing", idx.iter().map(|&i| stats.trajectories[i].users_sharing as f64).collect()));
        }
        _ => {
            let locs: Vec<usize> = setup
                .targets
                .iter()
                .map(|t| match t {
                    Target::Loc(l) => l.location,
                    Target::Traj(tr) => tr.visits[0].location,
                })
                .collect();
            out.push(("loc_distinct_users", locs.iter().map(|&l| stats.locations[l].distinct_users as f64).collect()));
            out.push(("loc_checkins_1km", locs.iter().map(|&l| stats.locations[l].checkins_within_1km as f64).collect()));
        }
    }
    out
}

/// Writes percentile-bin tables of `ln Λ` over the member targets and
/// returns, per statistic, the mean `ln Λ` of the lowest occupied bin minus
/// that of the highest.
fn analyze(
    ds: &MobilityDataset,
    setup: &MiaSetup,
    results: &[LiraResult],
    n_bins: usize,
    prefix: &str,
    dir: &Path,
) -> Result<Metrics> {
    let members = setup.member_indices();
    let signal: Vec<f64> = members.iter().map(|&i| results[i].log_lambda).collect();
    let mut m = Metrics::new();
    if signal.len() < n_bins {
        return Ok(m);
    }
    for (name, stat) in target_statistics(ds, setup) {
        let stat: Vec<f64> = members.iter().map(|&i| stat[i]).collect();
        let bins = vulnerability_binning(&stat, &signal, n_bins)?;
        write_bytes_atomic(&dir.join(format!("{prefix}_bins_{name}.csv")), bins.to_csv().as_bytes())?;
        let occ = bins.occupied();
        if occ.len() >= 2 {
            let lo = bins.mean_signal[occ[0]].expect("occupied");
            let hi = bins.mean_signal[*occ.last().expect("occupied")].expect("occupied");
            m.insert(format!("low_minus_high@{name}"), lo - hi);
        }
    }
    Ok(m)
}

fn run_mia(
    cfg: &ExperimentConfig,
    kind: AttackKind,
    model: &PoiModel,
    ds: &MobilityDataset,
    seed: u64,
    dir: &Path,
) -> Result<Vec<(String, Metrics, Option<String>)>> {
    let (setup, name) = match kind {
        AttackKind::TrajMia => (trajmia_setup(ds, &cfg.mia, seed)?, "trajmia"),
        _ => (locmia_setup(ds, &cfg.mia, seed)?, "locmia"),
    };
    let ensemble = build_ensemble(&setup, &cfg.model, &cfg.train, &cfg.mia)?;
    let (results, eval) = attack_victim(model, &setup, &ensemble, &cfg.mia)?;
    let file = format!("{name}.csv");
    write_bytes_atomic(&dir.join(&file), &csv_bytes(&MIA_HEADER, mia_rows(&setup, &results))?)?;
    let mut metrics = mia_metrics(&eval);
    metrics.extend(analyze(ds, &setup, &results, cfg.vulnerability_bins, name, dir)?);
    let mut out = vec![(name.to_string(), metrics, Some(file))];
    if cfg.mia.null_control && kind == AttackKind::TrajMia {
        let null_ds = without_member_targets(ds, &setup);
        let null = train_victim(&null_ds, &cfg.model, &cfg.train, seed, &[])?;
        let (null_results, null_eval) = attack_victim(&null.model, &setup, &ensemble, &cfg.mia)?;
        let file = format!("{name}_null.csv");
        write_bytes_atomic(&dir.join(&file), &csv_bytes(&MIA_HEADER, mia_rows(&setup, &null_results))?)?;
        out.push((format!("{name}-null"), mia_metrics(&null_eval), Some(file)));
    }
    Ok(out)
}

/// Trains the model a defense prescribes, plus the protected set its
/// targeted metrics refer to.
pub fn train_defended(
    cfg: &ExperimentConfig,
    spec: &DefenseSpec,
    ds: &MobilityDataset,
    seed: u64,
) -> Result<(PoiModel, ProtectedSet)> {
    let n = cfg.traj_extract.target_length;
    let mut model = PoiModel::new(
        crate::model::ModelConfig {
            seed,
            ..cfg.model.clone()
        },
        ds.n_users,
        ds.n_locations(),
    )?;
    let tcfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let default_protected = || ProtectedSet::for_attack(ds, AttackKind::LocExtract, Scope::targeted(), n, seed);
    let protected = match spec {
        DefenseSpec::L2 { weight_decay } => {
            train(&mut model, ds, &overfit_controls(&tcfg, Some(*weight_decay), None), None)?;
            default_protected()?
        }
        DefenseSpec::EarlyStop { patience } => {
            train(&mut model, ds, &overfit_controls(&tcfg, None, Some(*patience)), None)?;
            default_protected()?
        }
        DefenseSpec::Dpsgd(dp) => {
            let mut hook = DpSgdHook::new(dp.clone())?;
            train(&mut model, ds, &tcfg, Some(&mut hook))?;
            default_protected()?
        }
        DefenseSpec::Jft {
            dp,
            protect,
            scope,
            phase_two_epochs,
        } => {
            let protected = ProtectedSet::for_attack(ds, *protect, *scope, n, seed)?;
            let phase_two = TrainConfig {
                epochs: *phase_two_epochs,
                ..tcfg.clone()
            };
            jft_train(&mut model, ds, &protected, dp, &tcfg, (*phase_two_epochs > 0).then_some(&phase_two))?;
            protected
        }
        DefenseSpec::Geoind { geo, protect, scope } => {
            let protected = ProtectedSet::for_attack(ds, *protect, *scope, n, seed)?;
            let perturbed = geo_ind_perturb(ds, &protected, geo)?;
            train(&mut model, &perturbed, &tcfg, None)?;
            protected
        }
    };
    Ok((model, protected))
}

fn tradeoff_metrics(r: &TradeoffRecord) -> Metrics {
    Metrics::from([
        ("top1".to_string(), r.top1),
        ("top10".to_string(), r.top10),
        (format!("{}_all", r.metric), r.all),
        (format!("{}_targeted", r.metric), r.targeted),
    ])
}

fn run_defenses(
    cfg: &ExperimentConfig,
    victim: &PoiModel,
    ds: &MobilityDataset,
    seed: u64,
    dir: &Path,
) -> Result<Vec<(String, Metrics, Option<String>)>> {
    let mut records = Vec::new();
    for spec in &cfg.defenses {
        let (model, protected) = train_defended(cfg, spec, ds, seed)?;
        let mut recs = tradeoff_eval(&[("none".to_string(), victim), (spec.id(), &model)], ds, &protected, &cfg.loc_extract)?;
        // The undefended row is re-evaluated against each defense's protected set.
        recs[0].defense = format!("none/{}", spec.id());
        records.extend(recs);
    }
    let rows = records
        .iter()
        .map(|r| {
            vec![
                r.defense.clone(),
                r.top1.to_string(),
                r.top10.to_string(),
                format!("{:?}", r.attack).to_lowercase(),
                r.metric.clone(),
                r.all.to_string(),
                r.targeted.to_string(),
            ]
        })
        .collect();
    let header = ["defense", "top1", "top10", "attack", "metric", "all", "targeted"];
    write_bytes_atomic(&dir.join("defense.csv"), &csv_bytes(&header, rows)?)?;
    Ok(records
        .iter()
        .map(|r| (format!("defense:{}", r.defense), tradeoff_metrics(r), Some("defense.csv".to_string())))
        .collect())
}

fn run_seed(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<SeedOutcome> {
    let mut store = stage("open", Some(seed), SeedStore::open(out, seed))?;
    let ds = stage("dataset", Some(seed), stage_dataset(cfg, &mut store))?;
    let model = stage("train", Some(seed), stage_victim(cfg, &mut store, &ds))?;
    let dir = store.dir().to_path_buf();
    let mut attacks = vec![(
        "victim".to_string(),
        stage("train", Some(seed), victim_metrics(&model, &ds))?,
        None,
    )];
    for kind in &cfg.attacks {
        match kind {
            AttackKind::LocExtract => {
                let m = stage("attack locextract", Some(seed), run_locextract(cfg, &model, &ds, &dir))?;
                attacks.push(("locextract".into(), m, Some("locextract.csv".into())));
            }
            AttackKind::TrajExtract => {
                let m = stage("attack trajextract", Some(seed), run_trajextract(cfg, &model, &ds, &dir))?;
                attacks.push(("trajextract".into(), m, Some("trajextract.csv".into())));
            }
            AttackKind::LocMia => {
                attacks.extend(stage("attack locmia", Some(seed), run_mia(cfg, *kind, &model, &ds, seed, &dir))?)
            }
            AttackKind::TrajMia => {
                attacks.extend(stage("attack trajmia", Some(seed), run_mia(cfg, *kind, &model, &ds, seed, &dir))?)
            }
        }
    }
    if !cfg.defenses.is_empty() {
        attacks.extend(stage("defend", Some(seed), run_defenses(cfg, &model, &ds, seed, &dir))?);
    }
    let checkpoint = store.hash_of("victim.json").unwrap_or_default().to_string();
    Ok(SeedOutcome { attacks, checkpoint })
}

fn mean_metrics(per_seed: &[SeedMetrics]) -> Metrics {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in per_seed {
        for (k, v) in &s.metrics {
            let e = sums.entry(k.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn summary_csv(reports: &[AttackReport]) -> Result<Vec<u8>> {
    let seeds: Vec<u64> = reports
        .first()
        .map(|r| r.per_seed.iter().map(|s| s.seed).collect())
        .unwrap_or_default();
    let mut header = vec!["attack".to_string(), "metric".into(), "mean".into()];
    header.extend(seeds.iter().map(|s| format!("seed-{s}")));
    let mut rows = Vec::new();
    for r in reports {
        for (metric, mean) in &r.mean {
            let mut row = vec![r.attack.clone(), metric.clone(), mean.to_string()];
            row.extend(
                r.per_seed
                    .iter()
                    .map(|s| s.metrics.get(metric).map(|v| v.to_string()).unwrap_or_default()),
            );
            rows.push(row);
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_bytes(&header, rows)
}

/// Runs every configured stage for every seed and writes per-seed detail
/// files, `report.json` and `summary.csv` under the output directory.
///
/// A failing stage aborts the run, leaves a `FAILED.json` marker naming the
/// stage, and returns an [`Error::Stage`].
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Vec<AttackReport>> {
    let out = cfg.resolved_output_dir();
    run_pipeline_in(cfg, &out)
}

/// [`run_pipeline`] writing to `out` regardless of configuration and environment.
pub fn run_pipeline_in(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AttackReport>> {
    stage("validate", None, cfg.validate())?;
    let result = run_checked(cfg, out);
    if let Err(Error::Stage { stage, seed, source }) = &result {
        let marker = FailureMarker {
            stage,
            seed: *seed,
            message: source.to_string(),
        };
        // Best effort: the original error matters more than the marker.
        let _ = write_json_atomic(&out.join(FAILURE_MARKER), &marker);
    }
    result
}

fn run_checked(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AttackReport>> {
    stage("setup", None, fs::create_dir_all(out).map_err(Error::from))?;
    let marker = out.join(FAILURE_MARKER);
    if marker.exists() {
        stage("setup", None, fs::remove_file(&marker).map_err(Error::from))?;
    }
    let hash = stage("setup", None, config_hash(cfg))?;
    let config = stage("setup", None, portable_toml(cfg))?;
    let mut by_attack: BTreeMap<String, Vec<SeedMetrics>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut checkpoints = Vec::new();
    for seed in cfg.seeds() {
        let outcome = run_seed(cfg, out, seed)?;
        checkpoints.push(outcome.checkpoint);
        for (attack, metrics, detail) in outcome.attacks {
            if !by_attack.contains_key(&attack) {
                order.push(attack.clone());
            }
            by_attack.entry(attack).or_default().push(SeedMetrics {
                seed,
                metrics,
                detail: detail.map(|d| format!("seed-{seed}/{d}")),
            });
        }
    }
    let provenance = Provenance {
        config_hash: hash,
        checkpoints,
        config,
    };
    let reports: Vec<AttackReport> = order
        .into_iter()
        .map(|attack| {
            let per_seed = by_attack.remove(&attack).expect("attack recorded");
            AttackReport {
                mean: mean_metrics(&per_seed),
                attack,
                per_seed,
                provenance: provenance.clone(),
            }
        })
        .collect();
    stage("report", None, write_json_atomic(&out.join(REPORT), &reports))?;
    stage("report", None, summary_csv(&reports).and_then(|b| write_bytes_atomic(&out.join(SUMMARY), &b)))?;
    Ok(reports)
}

pub fn load_reports(out: &Path) -> Result<Vec<AttackReport>> {
    Ok(serde_json::from_slice(&fs::read(out.join(REPORT))?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    QueryBudget,
    QueryTimestamp,
    Voting,
    BeamWidth,
    TrajLength,
    ShadowCount,
    Nt,
    Nl,
    Epochs,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 9] = [
        SweepAxis::QueryBudget,
        SweepAxis::QueryTimestamp,
        SweepAxis::Voting,
        SweepAxis::BeamWidth,
        SweepAxis::TrajLength,
        SweepAxis::ShadowCount,
        SweepAxis::Nt,
        SweepAxis::Nl,
        SweepAxis::Epochs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::QueryBudget => "query-budget",
            SweepAxis::QueryTimestamp => "query-timestamp",
            SweepAxis::Voting => "voting",
            SweepAxis::BeamWidth => "beam-width",
            SweepAxis::TrajLength => "traj-length",
            SweepAxis::ShadowCount => "shadow-count",
            SweepAxis::Nt => "nt",
            SweepAxis::Nl => "nl",
            SweepAxis::Epochs => "epochs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis {s:?}")))
    }

    /// Attacks whose outcome the axis can change; empty means every attack.
    fn attacks(self) -> &'static [AttackKind] {
        match self {
            SweepAxis::QueryBudget | SweepAxis::Voting => &[AttackKind::LocExtract],
            SweepAxis::QueryTimestamp => &[AttackKind::LocExtract, AttackKind::TrajExtract],
            SweepAxis::BeamWidth | SweepAxis::TrajLength => &[AttackKind::TrajExtract],
            SweepAxis::ShadowCount => &[AttackKind::LocMia, AttackKind::TrajMia],
            SweepAxis::Nt | SweepAxis::Nl => &[AttackKind::LocMia],
            SweepAxis::Epochs => &[],
        }
    }

    /// `cfg` with the axis set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let bad = || Error::Config(format!("{value:?} is not a valid {} value", self.name()));
        let int = || value.parse::<usize>().map_err(|_| bad());
        let mut c = cfg.clone();
        match self {
            SweepAxis::QueryBudget => c.loc_extract.query_budget = int()?,
            SweepAxis::QueryTimestamp => {
                let t = value.parse::<f64>().map_err(|_| bad())?;
                c.loc_extract.query_timestamp = t;
                c.traj_extract.query_timestamp = t;
            }
            SweepAxis::Voting => {
                c.loc_extract.voting = match value {
                    "soft" => Voting::Soft,
                    "hard" => Voting::Hard,
                    _ => return Err(bad()),
                }
            }
            SweepAxis::BeamWidth => {
                c.traj_extract.beam_width = int()?;
                c.traj_extract.top_out = c.traj_extract.top_out.map(|k| k.min(c.traj_extract.beam_width));
            }
            SweepAxis::TrajLength => c.traj_extract.target_length = int()?,
            SweepAxis::ShadowCount => c.mia.n_shadow = int()?,
            SweepAxis::Nt => c.mia.spatem.n_t = int()?,
            SweepAxis::Nl => c.mia.spatem.n_l = int()?,
            SweepAxis::Epochs => c.train.epochs = int()?,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub attack: String,
    pub metric: String,
    pub mean: f64,
}

/// One pipeline run per value, all from the configured base seed, each in
/// `<out>/sweep-<axis>/<value>`. Writes `sweep-<axis>.csv` with one row per
/// (value, attack, metric).
pub fn ablation_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let relevant = axis.attacks();
    if !relevant.is_empty() && !cfg.attacks.iter().any(|a| relevant.contains(a)) {
        return Err(Error::Config(format!(
            "axis {} does not affect any configured attack",
            axis.name()
        )));
    }
    let configs = values.iter().map(|v| axis.apply(cfg, v)).collect::<Result<Vec<_>>>()?;
    let out = cfg.resolved_output_dir();
    let mut rows = Vec::new();
    for (value, c) in values.iter().zip(&configs) {
        let dir = out.join(format!("sweep-{}", axis.name())).join(value);
        for r in run_pipeline_in(c, &dir)? {
            rows.extend(r.mean.iter().map(|(m, v)| SweepRow {
                value: value.clone(),
                attack: r.attack.clone(),
                metric: m.clone(),
                mean: *v,
            }));
        }
    }
    let table = rows
        .iter()
        .map(|r| vec![r.value.clone(), r.attack.clone(), r.metric.clone(), r.mean.to_string()])
        .collect();
    write_bytes_atomic(
        &out.join(format!("sweep-{}.csv", axis.name())),
        &csv_bytes(&[axis.name(), "attack", "metric", "mean"], table)?,
    )?;
    Ok(rows)
}

/// Re-hashes every artifact listed in the seed manifests under `out`.
pub fn verify_artifacts(out: &Path) -> Result<usize> {
    let mut checked = 0;
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    for dir in dirs {
        let m: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        for (name, (_, hash)) in &m.artifacts {
            let path = dir.join(name);
            if !path.is_file() || &sha256_file(&path)? != hash {
                return Err(Error::HashMismatch { path });
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Number of data rows in a detail file.
pub fn detail_row_count(path: &Path) -> Result<usize> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.records().count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defense::{DpConfig, GeoIndConfig};
    use crate::experiment::DatasetSource;

    fn smoke(n_seeds: usize) -> ExperimentConfig {
        ExperimentConfig {
            n_seeds,
            ..ExperimentConfig::smoke()
        }
    }

    fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
        let mut out = BTreeMap::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(read_tree(&p));
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
        out
    }

    #[test]
    fn reports_cover_every_seed_and_average_them() {
        let tmp = tempfile::tempdir().unwrap();
        let reports = run_pipeline_in(&smoke(3), tmp.path()).unwrap();
        let names: Vec<&str> = reports.iter().map(|r| r.attack.as_str()).collect();
        assert_eq!(names, ["victim", "locextract", "trajextract", "locmia", "trajmia"]);
        for r in &reports {
            assert_eq!(r.per_seed.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![0, 1, 2]);
            for (k, mean) in &r.mean {
                let sum: f64 = r.per_seed.iter().map(|s| s.metrics[k]).sum();
                assert!((mean - sum / 3.0).abs() < 1e-12);
            }
            assert_eq!(r.provenance.checkpoints.len(), 3);
        }
        for seed in 0..3 {
            for f in ["dataset.json", "victim.json", "locextract.csv", "trajmia.csv", MANIFEST] {
                assert!(seed_dir(tmp.path(), seed).join(f).is_file(), "{f}");
            }
        }
        assert_eq!(load_reports(tmp.path()).unwrap(), reports);
        assert!(tmp.path().join(SUMMARY).is_file());
    }

    #[test]
    fn detail_rows_match_summary_counts() {
        let tmp = tempfile::tempdir().unwrap();
        let reports = run_pipeline_in(&smoke(1), tmp.path()).unwrap();
        for r in reports.iter().filter(|r| r.attack.ends_with("mia")) {
            let s = &r.per_seed[0];
            let rows = detail_row_count(&tmp.path().join(s.detail.as_ref().unwrap())).unwrap();
            assert_eq!(rows as f64, s.metrics["n_members"] + s.metrics["n_nonmembers"]);
        }
        for r in reports.iter().filter(|r| r.attack.ends_with("extract")) {
            let s = &r.per_seed[0];
            let rows = detail_row_count(&tmp.path().join(s.detail.as_ref().unwrap())).unwrap();
            assert_eq!(rows as f64, s.metrics["n_targets"]);
        }
    }

    #[test]
    fn reruns_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = smoke(2);
        run_pipeline_in(&cfg, a.path()).unwrap();
        run_pipeline_in(&cfg, b.path()).unwrap();
        let before = read_tree(a.path());
        assert_eq!(before, read_tree(b.path()));
        // A rerun in place reuses the cached dataset and victim.
        run_pipeline_in(&cfg, a.path()).unwrap();
        assert_eq!(before, read_tree(a.path()));
    }

    #[test]
    fn tampered_artifacts_are_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            attacks: vec![AttackKind::LocExtract],
            ..smoke(1)
        };
        run_pipeline_in(&cfg, tmp.path()).unwrap();
        assert_eq!(verify_artifacts(tmp.path()).unwrap(), 2);
        let victim = seed_dir(tmp.path(), 0).join("victim.json");
        let mut bytes = fs::read(&victim).unwrap();
        bytes.push(b' ');
        fs::write(&victim, bytes).unwrap();
        assert!(matches!(verify_artifacts(tmp.path()), Err(Error::HashMismatch { .. })));
        match run_pipeline_in(&cfg, tmp.path()) {
            Err(Error::Stage { stage, seed, source }) => {
                assert_eq!((stage, seed), ("train", Some(0)));
                assert!(matches!(*source, Error::HashMismatch { .. }));
            }
            other => panic!("expected a stage error, got {other:?}"),
        }
        assert!(tmp.path().join(FAILURE_MARKER).is_file());
    }

    #[test]
    fn changed_training_config_invalidates_only_the_victim() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            attacks: vec![],
            ..smoke(1)
        };
        run_pipeline_in(&cfg, tmp.path()).unwrap();
        let dir = seed_dir(tmp.path(), 0);
        let ds_before = fs::read(dir.join("dataset.json")).unwrap();
        let victim_before = fs::read(dir.join("victim.json")).unwrap();
        let mut longer = cfg.clone();
        longer.train.epochs += 1;
        run_pipeline_in(&longer, tmp.path()).unwrap();
        assert_eq!(fs::read(dir.join("dataset.json")).unwrap(), ds_before);
        assert_ne!(fs::read(dir.join("victim.json")).unwrap(), victim_before);
    }

    #[test]
    fn missing_dataset_fails_before_writing() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("out");
        let cfg = ExperimentConfig {
            dataset: DatasetSource::File {
                path: tmp.path().join("missing.csv"),
                delimiter: ',',
                has_header: false,
            },
            ..smoke(1)
        };
        let err = run_pipeline_in(&cfg, &out).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(matches!(err, Error::Stage { stage: "validate", .. }));
        assert!(!out.exists());
    }

    #[test]
    fn runtime_failure_names_the_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig {
            attacks: vec![],
            ..smoke(1)
        };
        cfg.train.optimizer = crate::train::Optimizer::SgdMomentum { lr: 1e300, momentum: 0.0 };
        let err = run_pipeline_in(&cfg, tmp.path()).unwrap_err();
        assert!(matches!(&err, Error::Stage { stage: "train", seed: Some(0), .. }), "{err}");
        assert_eq!(err.exit_code(), 2);
        let marker: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join(FAILURE_MARKER)).unwrap()).unwrap();
        assert_eq!(marker["stage"], "train");
    }

    #[test]
    fn null_control_and_defenses_add_reports() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig {
            attacks: vec![AttackKind::TrajMia],
            ..smoke(1)
        };
        cfg.mia.null_control = true;
        cfg.defenses = vec![
            DefenseSpec::Dpsgd(DpConfig::default()),
            DefenseSpec::Geoind {
                geo: GeoIndConfig::default(),
                protect: AttackKind::LocExtract,
                scope: Scope::All,
            },
        ];
        let names: Vec<String> = run_pipeline_in(&cfg, tmp.path())
            .unwrap()
            .into_iter()
            .map(|r| r.attack)
            .collect();
        assert!(names.contains(&"trajmia-null".to_string()));
        assert!(names.iter().any(|n| n.starts_with("defense:dpsgd")));
        assert!(names.iter().any(|n| n.starts_with("defense:none/geoind")));
        assert_eq!(detail_row_count(&seed_dir(tmp.path(), 0).join("defense.csv")).unwrap(), 4);
    }

    #[test]
    fn sweep_axes_validate_values_and_applicability() {
        let cfg = ExperimentConfig {
            attacks: vec![AttackKind::LocExtract],
            ..smoke(1)
        };
        assert!(ablation_sweep(&cfg, SweepAxis::BeamWidth, &["3".into()]).is_err());
        assert!(SweepAxis::Voting.apply(&cfg, "plurality").is_err());
        assert!(SweepAxis::QueryTimestamp.apply(&cfg, "1.5").is_err());
        assert_eq!(SweepAxis::Nl.apply(&cfg, "7").unwrap().mia.spatem.n_l, 7);
        for a in SweepAxis::ALL {
            assert_eq!(SweepAxis::parse(a.name()).unwrap(), a);
        }
    }

    #[test]
    fn single_value_sweep_equals_a_pipeline_run() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            attacks: vec![AttackKind::LocExtract],
            output_dir: tmp.path().join("sweep"),
            ..smoke(1)
        };
        let rows = ablation_sweep(&cfg, SweepAxis::QueryBudget, &["3".into()]).unwrap();
        let direct = SweepAxis::QueryBudget.apply(&cfg, "3").unwrap();
        let reports = run_pipeline_in(&direct, &tmp.path().join("direct")).unwrap();
        let expected: usize = reports.iter().map(|r| r.mean.len()).sum();
        assert_eq!(rows.len(), expected);
        assert_eq!(
            fs::read(tmp.path().join("sweep/sweep-query-budget/3").join(REPORT)).unwrap(),
            fs::read(tmp.path().join("direct").join(REPORT)).unwrap()
        );
    }

    #[test]
    fn timestamp_sweep_has_one_row_set_per_value() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            attacks: vec![AttackKind::LocExtract],
            output_dir: tmp.path().to_path_buf(),
            ..smoke(1)
        };
        let values: Vec<String> = ["0", "0.25", "0.5", "0.75", "1"].map(String::from).to_vec();
        let rows = ablation_sweep(&cfg, SweepAxis::QueryTimestamp, &values).unwrap();
        let asr: Vec<&SweepRow> = rows
            .iter()
            .filter(|r| r.attack == "locextract" && r.metric == "asr@1")
            .collect();
        assert_eq!(asr.len(), 5);
        assert_eq!(detail_row_count(&tmp.path().join("sweep-query-timestamp.csv")).unwrap(), rows.len());
    }

    #[test]
    fn trajextract_pairs_start_a_training_window() {
        let (ds, _) = smoke(1).load_dataset(0).unwrap();
        let pairs = trajextract_pairs(&ds, 3);
        let truth = crate::eval::training_sequences(&ds, 3);
        assert!(!pairs.is_empty());
        for (u, l) in pairs {
            assert!(truth.iter().any(|(v, s)| *v == u && s[0] == l));
        }
    }
}
