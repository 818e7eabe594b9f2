//! Experiment harness: victim training, attack target construction, shadow
//! ensembles, and the seed-replicated pipeline that writes reports.

use std::collections::{BTreeSet, HashSet};
use std::path::PathBuf;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, GroundTruth, MobilityDataset, PreprocessConfig, RecordFormat, Split, SynthConfig, Trajectory};
use crate::defense::{AttackKind, DpConfig, GeoIndConfig, Scope};
use crate::error::{Error, Result};
use crate::eval::MiaEval;
use crate::extraction::{LocExtractConfig, TrajExtractConfig};
use crate::membership::{
    lira_all, plan_shadows, score_shadows, score_targets, synthesize_carrier, train_shadows, LiraResult, LocTarget,
    Phi, ShadowPlan, SpaTemConfig, Target, TrajTarget,
};
use crate::model::{ModelConfig, PoiModel, PoiOracle};
use crate::seed::{rng_for, STREAM_TARGETS};
use crate::train::{train_with, TrainConfig, TrainLog};

/// Environment variable overriding the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "POIAUDIT_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synth(SynthConfig),
    File {
        path: PathBuf,
        #[serde(default = "default_delimiter")]
        delimiter: char,
        #[serde(default)]
        has_header: bool,
    },
}

fn default_delimiter() -> char {
    ','
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synth(SynthConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiaConfig {
    /// N: the ensemble has 2N shadow models.
    pub n_shadow: usize,
    pub shadow_epochs: usize,
    pub background_fraction: f64,
    /// Cap on members and on non-members per attack.
    pub max_targets_per_class: usize,
    pub spatem: SpaTemConfig,
    pub phi: Phi,
    pub carrier_length: usize,
    pub carrier_timestamp: f64,
    pub fpr_levels: Vec<f64>,
    pub threshold: f64,
    /// Also attack a victim trained without any member target.
    pub null_control: bool,
}

impl Default for MiaConfig {
    fn default() -> Self {
        Self {
            n_shadow: 16,
            shadow_epochs: 50,
            background_fraction: 0.5,
            max_targets_per_class: 500,
            spatem: SpaTemConfig::default(),
            phi: Phi::Logit,
            carrier_length: 3,
            carrier_timestamp: 0.5,
            fpr_levels: vec![0.01, 0.1],
            threshold: 1.0,
            null_control: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "kebab-case")]
pub enum DefenseSpec {
    L2 { weight_decay: f64 },
    EarlyStop { patience: usize },
    Dpsgd(DpConfig),
    Jft {
        dp: DpConfig,
        protect: AttackKind,
        scope: Scope,
        phase_two_epochs: usize,
    },
    Geoind {
        geo: GeoIndConfig,
        protect: AttackKind,
        scope: Scope,
    },
}

impl DefenseSpec {
    pub fn id(&self) -> String {
        let scope = |s: &Scope| match s {
            Scope::All => "all".to_string(),
            Scope::Targeted { fraction } => format!("targeted:{fraction}"),
        };
        match self {
            DefenseSpec::L2 { weight_decay } => format!("l2:{weight_decay}"),
            DefenseSpec::EarlyStop { patience } => format!("early-stop:{patience}"),
            DefenseSpec::Dpsgd(dp) => format!("dpsgd:eps={}", dp.epsilon),
            DefenseSpec::Jft { dp, protect, scope: s, .. } => {
                format!("jft:eps={}:{protect:?}:{}", dp.epsilon, scope(s)).to_lowercase()
            }
            DefenseSpec::Geoind { geo, protect, scope: s } => {
                format!("geoind:eps_g={}:{protect:?}:{}", geo.epsilon_g, scope(s)).to_lowercase()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attacks: Vec<AttackKind>,
    pub loc_extract: LocExtractConfig,
    pub traj_extract: TrajExtractConfig,
    /// Extraction hit levels reported.
    pub ks: Vec<usize>,
    pub mia: MiaConfig,
    pub defenses: Vec<DefenseSpec>,
    /// Percentile bins for the vulnerability tables.
    pub vulnerability_bins: usize,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            attacks: vec![
                AttackKind::LocExtract,
                AttackKind::TrajExtract,
                AttackKind::LocMia,
                AttackKind::TrajMia,
            ],
            loc_extract: LocExtractConfig {
                top_k: 10,
                ..LocExtractConfig::default()
            },
            traj_extract: TrajExtractConfig::default(),
            ks: vec![1, 5, 10],
            mia: MiaConfig::default(),
            defenses: Vec::new(),
            vulnerability_bins: 10,
            n_seeds: 5,
            base_seed: 0,
            output_dir: PathBuf::from("poiaudit-out"),
        }
    }
}

impl ExperimentConfig {
    /// Workstation-sized setup: 200 users, 500 POIs, a 16/16/32 model, and a
    /// 2×16 shadow ensemble trained for 50 epochs.
    pub fn desk() -> Self {
        Self {
            dataset: DatasetSource::Synth(SynthConfig {
                n_days: 20,
                ..SynthConfig::default()
            }),
            model: ModelConfig {
                user_embed_dim: 16,
                loc_embed_dim: 16,
                hidden_dim: 32,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                validate: false,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    /// Seconds-scale configuration for smoke runs and tests.
    pub fn smoke() -> Self {
        Self {
            dataset: DatasetSource::Synth(SynthConfig {
                n_users: 16,
                n_locations: 40,
                n_days: 10,
                ..SynthConfig::default()
            }),
            model: ModelConfig {
                user_embed_dim: 4,
                loc_embed_dim: 4,
                hidden_dim: 8,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 4,
                validate: false,
                ..TrainConfig::default()
            },
            loc_extract: LocExtractConfig {
                query_budget: 10,
                top_k: 5,
                ..LocExtractConfig::default()
            },
            traj_extract: TrajExtractConfig {
                beam_width: 5,
                target_length: 3,
                ..TrajExtractConfig::default()
            },
            mia: MiaConfig {
                n_shadow: 2,
                shadow_epochs: 2,
                max_targets_per_class: 20,
                spatem: SpaTemConfig { n_t: 2, n_l: 2, seed: 0 },
                ..MiaConfig::default()
            },
            vulnerability_bins: 4,
            n_seeds: 2,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.base_seed + i).collect()
    }

    /// Output directory after applying the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be at least 1".into()));
        }
        if let DatasetSource::File { path, .. } = &self.dataset {
            if !path.is_file() {
                return Err(Error::Config(format!("dataset file {} does not exist", path.display())));
            }
        }
        self.preprocess.validate()?;
        self.model.validate()?;
        self.train.validate_config()?;
        self.loc_extract.validate()?;
        self.traj_extract.validate()?;
        self.mia.spatem.validate()?;
        if self.vulnerability_bins == 0 {
            return Err(Error::Config("vulnerability_bins must be at least 1".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be non-empty and positive".into()));
        }
        if self.mia.n_shadow == 0 || self.mia.shadow_epochs == 0 || self.mia.max_targets_per_class == 0 {
            return Err(Error::Config("n_shadow, shadow_epochs and max_targets_per_class must be positive".into()));
        }
        for d in &self.defenses {
            match d {
                DefenseSpec::Dpsgd(dp) | DefenseSpec::Jft { dp, .. } => dp.validate()?,
                DefenseSpec::L2 { weight_decay } if !(*weight_decay >= 0.0) => {
                    return Err(Error::Config("weight_decay must be non-negative".into()))
                }
                DefenseSpec::EarlyStop { patience: 0 } => {
                    return Err(Error::Config("patience must be at least 1".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Dataset for one seed replicate. Synthetic data is regenerated per seed;
    /// file data is re-split per seed.
    pub fn load_dataset(&self, seed: u64) -> Result<(MobilityDataset, Option<GroundTruth>)> {
        match &self.dataset {
            DatasetSource::Synth(s) => {
                let (ds, gt) = data::synth_generate(&SynthConfig { seed, ..s.clone() })?;
                Ok((ds, Some(gt)))
            }
            DatasetSource::File {
                path,
                delimiter,
                has_header,
            } => {
                let fmt = RecordFormat {
                    delimiter: u8::try_from(*delimiter)
                        .map_err(|_| Error::Config(format!("delimiter {delimiter:?} is not a single byte")))?,
                    has_header: *has_header,
                };
                let raw = data::load_checkins(path, fmt)?;
                let ds = data::preprocess(
                    &raw,
                    &PreprocessConfig {
                        seed,
                        ..self.preprocess.clone()
                    },
                )?;
                Ok((ds, None))
            }
        }
    }
}

/// A trained victim and optional parameter snapshots at chosen epochs.
#[derive(Clone, Debug)]
pub struct Victim {
    pub model: PoiModel,
    pub log: TrainLog,
    pub snapshots: Vec<(usize, PoiModel)>,
}

/// Trains a victim with model and training seeds set to `seed`.
pub fn train_victim(
    ds: &MobilityDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    snapshot_epochs: &[usize],
) -> Result<Victim> {
    let mut model = PoiModel::new(
        ModelConfig {
            seed,
            ..model_cfg.clone()
        },
        ds.n_users,
        ds.n_locations(),
    )?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let mut snapshots = Vec::new();
    let log = train_with(&mut model, ds, &cfg, None, &mut |m, e| {
        if snapshot_epochs.contains(&e.epoch) {
            snapshots.push((e.epoch, m.clone()));
        }
    })?;
    Ok(Victim { model, log, snapshots })
}

/// Membership targets with labels, the attacker's shadow data, and the
/// carrier trajectory each shadow slot trains on for an IN target.
#[derive(Clone, Debug)]
pub struct MiaSetup {
    pub kind: AttackKind,
    pub targets: Vec<Target>,
    pub labels: Vec<bool>,
    /// For trajectory targets, their index in the source dataset.
    pub source_index: Vec<Option<usize>>,
    pub shadow_data: MobilityDataset,
    pub carriers: Vec<Trajectory>,
    pub plan: ShadowPlan,
}

impl MiaSetup {
    pub fn member_indices(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i]).collect()
    }
}

fn balanced(members: Vec<usize>, nonmembers: Vec<usize>, cap: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let m = members.len().min(nonmembers.len()).min(cap);
    let pick = |v: Vec<usize>, rng: &mut _| {
        let mut idx = sample(rng, v.len(), m).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| v[i]).collect::<Vec<_>>()
    };
    let a = pick(members, rng);
    let b = pick(nonmembers, rng);
    (a, b)
}

/// TrajMIA: members are TRAIN trajectories, non-members VALID and TEST
/// trajectories, balanced by down-sampling. The shadow data is every
/// trajectory that is not a target.
pub fn trajmia_setup(ds: &MobilityDataset, cfg: &MiaConfig, seed: u64) -> Result<MiaSetup> {
    let mut rng = rng_for(seed, &[STREAM_TARGETS, 1]);
    let members = ds.split_indices(Split::Train);
    let nonmembers: Vec<usize> = (0..ds.trajectories.len()).filter(|&i| ds.trajectories[i].split != Split::Train).collect();
    let (mem, non) = balanced(members, nonmembers, cfg.max_targets_per_class, &mut rng);
    if mem.is_empty() {
        return Err(Error::Config("TrajMIA needs both member and non-member trajectories".into()));
    }
    let chosen: Vec<usize> = mem.iter().chain(&non).copied().collect();
    let chosen_set: HashSet<usize> = chosen.iter().copied().collect();
    let background: Vec<usize> = (0..ds.trajectories.len()).filter(|i| !chosen_set.contains(i)).collect();
    let shadow_data = ds.subset(&background, Split::Train);
    let targets = chosen
        .iter()
        .map(|&i| Target::Traj(TrajTarget::from_trajectory(&ds.trajectories[i])))
        .collect();
    let carriers = chosen.iter().map(|&i| ds.trajectories[i].clone()).collect();
    let labels = mem.iter().map(|_| true).chain(non.iter().map(|_| false)).collect();
    let plan = plan_shadows(&shadow_data, chosen.len(), cfg.n_shadow, cfg.background_fraction, seed)?;
    Ok(MiaSetup {
        kind: AttackKind::TrajMia,
        targets,
        labels,
        source_index: chosen.into_iter().map(Some).collect(),
        shadow_data,
        carriers,
        plan,
    })
}

/// LocMIA: the shadow data is the VALID and TEST trajectories. Members are
/// user-location pairs visited in TRAIN but absent from the shadow data;
/// non-members are pairs the user never visits, with locations drawn from
/// the check-in marginal.
pub fn locmia_setup(ds: &MobilityDataset, cfg: &MiaConfig, seed: u64) -> Result<MiaSetup> {
    let mut rng = rng_for(seed, &[STREAM_TARGETS, 2]);
    let visited: BTreeSet<(usize, usize)> = ds
        .trajectories
        .iter()
        .flat_map(|t| t.visits.iter().map(move |v| (t.user, v.location)))
        .collect();
    let shadow_idx: Vec<usize> = (0..ds.trajectories.len()).filter(|&i| ds.trajectories[i].split != Split::Train).collect();
    let in_shadow: HashSet<(usize, usize)> = shadow_idx
        .iter()
        .flat_map(|&i| {
            let t = &ds.trajectories[i];
            t.visits.iter().map(move |v| (t.user, v.location))
        })
        .collect();
    let member_pairs: Vec<(usize, usize)> = ds
        .split(Split::Train)
        .flat_map(|t| t.visits.iter().map(move |v| (t.user, v.location)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|p| !in_shadow.contains(p))
        .collect();
    let marginal: Vec<usize> = ds.trajectories.iter().flat_map(|t| t.visits.iter().map(|v| v.location)).collect();
    let users: Vec<usize> = member_pairs.iter().map(|p| p.0).collect::<BTreeSet<_>>().into_iter().collect();
    let mut non_pairs = BTreeSet::new();
    if !marginal.is_empty() && !users.is_empty() {
        let mut attempts = 0;
        while non_pairs.len() < member_pairs.len() && attempts < 100 * member_pairs.len().max(1) {
            attempts += 1;
            let u = *users.choose(&mut rng).expect("non-empty");
            let l = marginal[rng.gen_range(0..marginal.len())];
            if !visited.contains(&(u, l)) {
                non_pairs.insert((u, l));
            }
        }
    }
    let non_pairs: Vec<(usize, usize)> = non_pairs.into_iter().collect();
    let (mem, non) = balanced(
        (0..member_pairs.len()).collect(),
        (0..non_pairs.len()).collect(),
        cfg.max_targets_per_class,
        &mut rng,
    );
    if mem.is_empty() {
        return Err(Error::Config("LocMIA found no usable member/non-member pairs".into()));
    }
    let pairs: Vec<(usize, usize)> = mem
        .iter()
        .map(|&i| member_pairs[i])
        .chain(non.iter().map(|&i| non_pairs[i]))
        .collect();
    let shadow_data = ds.subset(&shadow_idx, Split::Train);
    let targets: Vec<Target> = pairs
        .iter()
        .map(|&(user, location)| Target::Loc(LocTarget { user, location }))
        .collect();
    let carriers = pairs
        .iter()
        .map(|&(user, location)| {
            synthesize_carrier(
                &LocTarget { user, location },
                &shadow_data,
                cfg.carrier_timestamp,
                cfg.carrier_length,
                seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = mem.iter().map(|_| true).chain(non.iter().map(|_| false)).collect();
    let plan = plan_shadows(&shadow_data, targets.len(), cfg.n_shadow, cfg.background_fraction, seed)?;
    Ok(MiaSetup {
        kind: AttackKind::LocMia,
        source_index: vec![None; targets.len()],
        targets,
        labels,
        shadow_data,
        carriers,
        plan,
    })
}

/// Trained shadow models and their transformed scores, `scores[slot][target]`.
pub struct ShadowEnsemble {
    pub models: Vec<PoiModel>,
    pub scores: Vec<Vec<f64>>,
}

pub fn build_ensemble(
    setup: &MiaSetup,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    cfg: &MiaConfig,
) -> Result<ShadowEnsemble> {
    let shadow_train = TrainConfig {
        epochs: cfg.shadow_epochs,
        validate: false,
        early_stop_patience: None,
        ..train_cfg.clone()
    };
    let models = train_shadows(&setup.plan, &setup.shadow_data, &setup.carriers, model_cfg, &shadow_train)?;
    let scores = score_shadows(&models, &setup.targets, &cfg.spatem, cfg.phi)?;
    Ok(ShadowEnsemble { models, scores })
}

/// LiRA results and metrics of one victim against an ensemble.
pub fn attack_victim<O: PoiOracle + ?Sized>(
    victim: &O,
    setup: &MiaSetup,
    ensemble: &ShadowEnsemble,
    cfg: &MiaConfig,
) -> Result<(Vec<LiraResult>, MiaEval)> {
    let obs = score_targets(victim, &setup.targets, &cfg.spatem, cfg.phi)?;
    let results = lira_all(&setup.plan, &ensemble.scores, &obs, cfg.threshold)?;
    let scores: Vec<f64> = results.iter().map(|r| r.log_lambda).collect();
    let eval = crate::eval::mia_eval(&scores, &setup.labels, &cfg.fpr_levels)?;
    Ok((results, eval))
}

/// `ds` without the member targets of a TrajMIA setup: training a victim on
/// it gives the null control in which no target was seen.
pub fn without_member_targets(ds: &MobilityDataset, setup: &MiaSetup) -> MobilityDataset {
    let drop: HashSet<usize> = setup
        .member_indices()
        .into_iter()
        .filter_map(|i| setup.source_index[i])
        .collect();
    let mut out = ds.without_trajectories();
    out.trajectories = ds
        .trajectories
        .iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, t)| t.clone())
        .collect();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_defenses() -> Vec<DefenseSpec> {
        vec![
            DefenseSpec::L2 { weight_decay: 1e-3 },
            DefenseSpec::EarlyStop { patience: 5 },
            DefenseSpec::Dpsgd(DpConfig::default()),
            DefenseSpec::Jft {
                dp: DpConfig::default(),
                protect: AttackKind::TrajMia,
                scope: Scope::targeted(),
                phase_two_epochs: 1,
            },
            DefenseSpec::Geoind {
                geo: GeoIndConfig::default(),
                protect: AttackKind::LocExtract,
                scope: Scope::All,
            },
        ]
    }

    #[test]
    fn toml_round_trip_and_defaulting() {
        let mut cfg = ExperimentConfig::smoke();
        cfg.defenses = all_defenses();
        cfg.dataset = DatasetSource::File {
            path: "checkins.csv".into(),
            delimiter: '\t',
            has_header: true,
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml("n_seeds = 3\n[train]\nepochs = 7\n").unwrap();
        assert_eq!(partial.n_seeds, 3);
        assert_eq!(partial.train.epochs, 7);
        assert_eq!(partial.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(partial.mia, MiaConfig::default());
        assert!(ExperimentConfig::from_toml("n_seeds = \"five\"").is_err());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        assert!(ExperimentConfig::default().validate().is_ok());
        assert!(ExperimentConfig::desk().validate().is_ok());
        let bad = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::smoke();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(&|c| c.n_seeds = 0));
        assert!(bad(&|c| c.ks = vec![0]));
        assert!(bad(&|c| c.mia.n_shadow = 0));
        assert!(bad(&|c| c.defenses = vec![DefenseSpec::EarlyStop { patience: 0 }]));
        assert!(bad(&|c| c.defenses = vec![DefenseSpec::L2 { weight_decay: -1.0 }]));
        assert!(bad(&|c| c.dataset = DatasetSource::File {
            path: "/nonexistent/checkins.csv".into(),
            delimiter: ',',
            has_header: false
        }));
    }

    #[test]
    fn seeds_are_distinct_and_offset() {
        let c = ExperimentConfig {
            base_seed: 7,
            n_seeds: 3,
            ..ExperimentConfig::default()
        };
        assert_eq!(c.seeds(), vec![7, 8, 9]);
    }

    #[test]
    fn trajmia_targets_are_balanced_and_excluded_from_shadow_data() {
        let cfg = ExperimentConfig::smoke();
        let (ds, _) = cfg.load_dataset(0).unwrap();
        let setup = trajmia_setup(&ds, &cfg.mia, 0).unwrap();
        let members = setup.labels.iter().filter(|&&l| l).count();
        assert_eq!(2 * members, setup.labels.len());
        assert!(members <= cfg.mia.max_targets_per_class);
        for (i, &label) in setup.labels.iter().enumerate() {
            let t = &ds.trajectories[setup.source_index[i].unwrap()];
            assert_eq!(label, t.split == Split::Train);
            assert!(!setup.shadow_data.trajectories.contains(t));
        }
        let null = without_member_targets(&ds, &setup);
        assert_eq!(null.trajectories.len(), ds.trajectories.len() - members);
    }

    #[test]
    fn locmia_members_are_unseen_by_the_attacker() {
        let cfg = ExperimentConfig::smoke();
        let (ds, _) = cfg.load_dataset(1).unwrap();
        let setup = locmia_setup(&ds, &cfg.mia, 1).unwrap();
        let shadow_pairs: HashSet<(usize, usize)> = setup
            .shadow_data
            .trajectories
            .iter()
            .flat_map(|t| t.visits.iter().map(move |v| (t.user, v.location)))
            .collect();
        let all_pairs: HashSet<(usize, usize)> = ds
            .trajectories
            .iter()
            .flat_map(|t| t.visits.iter().map(move |v| (t.user, v.location)))
            .collect();
        for (t, &label) in setup.targets.iter().zip(&setup.labels) {
            let Target::Loc(l) = t else { panic!("location target expected") };
            assert!(!shadow_pairs.contains(&(l.user, l.location)));
            assert_eq!(label, all_pairs.contains(&(l.user, l.location)));
        }
        assert_eq!(setup.carriers.len(), setup.targets.len());
    }

    #[test]
    fn victim_snapshots_are_taken_at_requested_epochs() {
        let cfg = ExperimentConfig::smoke();
        let (ds, _) = cfg.load_dataset(0).unwrap();
        let v = train_victim(&ds, &cfg.model, &cfg.train, 0, &[1, 3]).unwrap();
        let epochs: Vec<usize> = v.snapshots.iter().map(|s| s.0).collect();
        assert_eq!(epochs, vec![1, 3]);
        assert_ne!(v.snapshots[0].1.params(), v.model.params());
    }
}
