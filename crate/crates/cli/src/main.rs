use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use poiaudit_core::data::{
    dataset_stats, load_checkins, preprocess, synth_generate, write_checkins, PreprocessConfig,
    RecordFormat, SynthConfig,
};
use poiaudit_core::defense::{AttackKind, DpConfig, GeoIndConfig, Scope};
use poiaudit_core::eval::compute_aggregate_stats;
use poiaudit_core::experiment::{DatasetSource, DefenseSpec, ExperimentConfig};
use poiaudit_core::extraction::Voting;
use poiaudit_core::pipeline::{
    ablation_sweep, load_reports, run_pipeline, verify_artifacts, AttackReport, SweepAxis,
};
use poiaudit_core::{Error, MobilityDataset, Result};

#[derive(Parser)]
#[command(name = "poiaudit", version, about = "Privacy audits of next-POI recommendation models")]
struct Cli {
    /// Experiment configuration (TOML). Unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from a built-in configuration instead of the defaults.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Output directory; POIAUDIT_OUT takes precedence over the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Check-in file (user, time, latitude, longitude, location) to audit instead of synthetic data.
    #[arg(long, global = true)]
    checkins: Option<PathBuf>,
    /// Field delimiter of --checkins.
    #[arg(long, global = true, default_value = "\t")]
    delimiter: char,
    /// --checkins starts with a header row.
    #[arg(long, global = true)]
    header: bool,
    #[arg(long, global = true)]
    seeds: Option<usize>,
    #[arg(long, global = true)]
    base_seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 200 users, 500 POIs, 16/16/32 model, 2x16 shadows.
    Desk,
    /// Tiny run that finishes in seconds.
    Smoke,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic check-in file.
    Synth(SynthArgs),
    /// Filter, segment and split a check-in file into a dataset file.
    Preprocess(PreprocessArgs),
    /// Build datasets and train victims for every seed.
    Train,
    /// Run one attack against the victims.
    Attack {
        #[command(subcommand)]
        kind: AttackCommand,
    },
    /// Train a defended model and report its utility and attack exposure.
    Defend(DefendArgs),
    /// Dataset statistics and per-user, per-location and per-trajectory features.
    Analyze(AnalyzeArgs),
    /// Repeat the configured pipeline over values of one parameter.
    Sweep(SweepArgs),
    /// Print the summary of a finished run.
    Report(ReportArgs),
    /// Run every configured stage.
    Run,
    /// Print the resolved configuration.
    Config,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 500)]
    locations: usize,
    #[arg(long, default_value_t = 30)]
    days: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination check-in file, tab-delimited.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 10)]
    min_occurrence: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum AttackCommand {
    Locextract {
        /// Query budget.
        #[arg(long)]
        q: Option<usize>,
        /// Query timestamp in [0, 1].
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum)]
        voting: Option<VotingArg>,
    },
    Trajextract {
        /// Beam width.
        #[arg(long)]
        beta: Option<usize>,
        /// Sequence length.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        t: Option<f64>,
    },
    Locmia(MiaArgs),
    Trajmia {
        #[command(flatten)]
        mia: MiaArgs,
        /// Also attack a victim trained without the member targets.
        #[arg(long)]
        null_control: bool,
    },
}

#[derive(Args)]
struct MiaArgs {
    /// N; the ensemble holds 2N shadow models.
    #[arg(long)]
    shadows: Option<usize>,
    #[arg(long)]
    shadow_epochs: Option<usize>,
    #[arg(long)]
    nt: Option<usize>,
    #[arg(long)]
    nl: Option<usize>,
    #[arg(long)]
    max_targets: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VotingArg {
    Soft,
    Hard,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mechanism {
    L2,
    EarlyStop,
    Dpsgd,
    Jft,
    Geoind,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackArg {
    Locextract,
    Trajextract,
    Locmia,
    Trajmia,
}

impl From<AttackArg> for AttackKind {
    fn from(a: AttackArg) -> Self {
        match a {
            AttackArg::Locextract => AttackKind::LocExtract,
            AttackArg::Trajextract => AttackKind::TrajExtract,
            AttackArg::Locmia => AttackKind::LocMia,
            AttackArg::Trajmia => AttackKind::TrajMia,
        }
    }
}

#[derive(Args)]
struct DefendArgs {
    #[arg(long, value_enum)]
    mechanism: Mechanism,
    #[arg(long, default_value_t = 5.0)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    delta: f64,
    #[arg(long, default_value_t = 10.0)]
    clip: f64,
    /// Geo-indistinguishability level per metre.
    #[arg(long, default_value_t = 0.01)]
    eps_g: f64,
    /// Protection radius in metres.
    #[arg(long, default_value_t = 400.0)]
    radius: f64,
    /// `all` or `targeted:<fraction>`.
    #[arg(long, default_value = "targeted:0.3")]
    protect: String,
    /// Attack whose sensitive items JFT and Geo-Ind protect.
    #[arg(long, value_enum, default_value = "locextract")]
    protect_attack: AttackArg,
    #[arg(long, default_value_t = 1e-3)]
    weight_decay: f64,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 20)]
    phase_two_epochs: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Dataset file written by `preprocess`; defaults to the first seed's dataset of the run.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// query-budget, query-timestamp, voting, beam-width, traj-length, shadow-count, nt, nl or epochs.
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Restrict the attacks run at every value.
    #[arg(long, value_enum, value_delimiter = ',')]
    attacks: Vec<AttackArg>,
}

#[derive(Args)]
struct ReportArgs {
    /// Re-hash every cached artifact against its manifest.
    #[arg(long)]
    verify: bool,
}

fn parse_scope(s: &str) -> Result<Scope> {
    if s == "all" {
        return Ok(Scope::All);
    }
    s.strip_prefix("targeted:")
        .and_then(|f| f.parse::<f64>().ok())
        .filter(|f| *f > 0.0 && *f <= 1.0)
        .map(|fraction| Scope::Targeted { fraction })
        .ok_or_else(|| Error::Config(format!("--protect must be `all` or `targeted:<fraction in (0, 1]>`, got {s:?}")))
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => ExperimentConfig::from_toml(
            &std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?,
        )?,
        (None, Some(Preset::Desk)) => ExperimentConfig::desk(),
        (None, Some(Preset::Smoke)) => ExperimentConfig::smoke(),
        (None, None) => ExperimentConfig::default(),
    };
    if cli.config.is_some() && cli.preset.is_some() {
        return Err(Error::Config("--config and --preset are mutually exclusive".into()));
    }
    if let Some(path) = &cli.checkins {
        cfg.dataset = DatasetSource::File {
            path: path.clone(),
            delimiter: cli.delimiter,
            has_header: cli.header,
        };
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(n) = cli.seeds {
        cfg.n_seeds = n;
    }
    if let Some(s) = cli.base_seed {
        cfg.base_seed = s;
    }
    if let Some(e) = cli.epochs {
        cfg.train.epochs = e;
    }
    Ok(cfg)
}

fn apply_attack(cfg: &mut ExperimentConfig, cmd: &AttackCommand) {
    let mia = |cfg: &mut ExperimentConfig, a: &MiaArgs| {
        if let Some(n) = a.shadows {
            cfg.mia.n_shadow = n;
        }
        if let Some(e) = a.shadow_epochs {
            cfg.mia.shadow_epochs = e;
        }
        if let Some(n) = a.nt {
            cfg.mia.spatem.n_t = n;
        }
        if let Some(n) = a.nl {
            cfg.mia.spatem.n_l = n;
        }
        if let Some(m) = a.max_targets {
            cfg.mia.max_targets_per_class = m;
        }
    };
    cfg.defenses.clear();
    match cmd {
        AttackCommand::Locextract { q, t, k, voting } => {
            cfg.attacks = vec![AttackKind::LocExtract];
            let c = &mut cfg.loc_extract;
            c.query_budget = q.unwrap_or(c.query_budget);
            c.query_timestamp = t.unwrap_or(c.query_timestamp);
            c.top_k = k.unwrap_or(c.top_k);
            if let Some(v) = voting {
                c.voting = match v {
                    VotingArg::Soft => Voting::Soft,
                    VotingArg::Hard => Voting::Hard,
                };
            }
        }
        AttackCommand::Trajextract { beta, n, t } => {
            cfg.attacks = vec![AttackKind::TrajExtract];
            let c = &mut cfg.traj_extract;
            c.beam_width = beta.unwrap_or(c.beam_width);
            c.target_length = n.unwrap_or(c.target_length);
            c.query_timestamp = t.unwrap_or(c.query_timestamp);
        }
        AttackCommand::Locmia(a) => {
            cfg.attacks = vec![AttackKind::LocMia];
            mia(cfg, a);
        }
        AttackCommand::Trajmia { mia: a, null_control } => {
            cfg.attacks = vec![AttackKind::TrajMia];
            mia(cfg, a);
            cfg.mia.null_control |= *null_control;
        }
    }
}

fn defense_spec(a: &DefendArgs) -> Result<DefenseSpec> {
    let dp = DpConfig {
        epsilon: a.eps,
        delta: a.delta,
        clip_norm: a.clip,
        ..DpConfig::default()
    };
    Ok(match a.mechanism {
        Mechanism::L2 => DefenseSpec::L2 {
            weight_decay: a.weight_decay,
        },
        Mechanism::EarlyStop => DefenseSpec::EarlyStop { patience: a.patience },
        Mechanism::Dpsgd => DefenseSpec::Dpsgd(dp),
        Mechanism::Jft => DefenseSpec::Jft {
            dp,
            protect: a.protect_attack.into(),
            scope: parse_scope(&a.protect)?,
            phase_two_epochs: a.phase_two_epochs,
        },
        Mechanism::Geoind => DefenseSpec::Geoind {
            geo: GeoIndConfig {
                epsilon_g: a.eps_g,
                radius_m: a.radius,
                ..GeoIndConfig::default()
            },
            protect: a.protect_attack.into(),
            scope: parse_scope(&a.protect)?,
        },
    })
}

fn print_reports(reports: &[AttackReport]) {
    for r in reports {
        for (metric, v) in &r.mean {
            println!("{}\t{metric}\t{v:.6}", r.attack);
        }
    }
}

fn write_table<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn analyze(ds: &MobilityDataset, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let summary = dataset_stats(ds)?;
    println!(
        "pois\t{}\ncheckins\t{}\nusers\t{}\ntrajectories\t{}\navg_trajectory_length\t{:.3}",
        summary.n_pois, summary.n_checkins, summary.n_users, summary.n_trajectories, summary.avg_trajectory_length
    );
    let stats = compute_aggregate_stats(ds);
    write_table(&out.join("user_stats.csv"), &stats.users)?;
    write_table(&out.join("location_stats.csv"), &stats.locations)?;
    write_table(&out.join("trajectory_stats.csv"), &stats.trajectories)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Synth(a) => {
            let (ds, _) = synth_generate(&SynthConfig {
                n_users: a.users,
                n_locations: a.locations,
                n_days: a.days,
                seed: a.seed,
                ..SynthConfig::default()
            })?;
            write_checkins(&ds, &a.output, RecordFormat::tab())?;
            println!("wrote {} check-ins to {}", ds.n_checkins(), a.output.display());
        }
        Command::Preprocess(a) => {
            let fmt = RecordFormat {
                delimiter: u8::try_from(cli.delimiter)
                    .map_err(|_| Error::Config("delimiter must be a single byte".into()))?,
                has_header: cli.header,
            };
            let raw = load_checkins(&a.input, fmt)?;
            let ds = preprocess(
                &raw,
                &PreprocessConfig {
                    min_occurrence: a.min_occurrence,
                    seed: a.seed,
                    ..PreprocessConfig::default()
                },
            )?;
            ds.save(&a.output)?;
            let s = dataset_stats(&ds)?;
            println!(
                "{} users, {} POIs, {} check-ins, {} trajectories",
                s.n_users, s.n_pois, s.n_checkins, s.n_trajectories
            );
        }
        Command::Train => {
            cfg.attacks.clear();
            cfg.defenses.clear();
            print_reports(&run_pipeline(&cfg)?);
        }
        Command::Attack { kind } => {
            apply_attack(&mut cfg, kind);
            print_reports(&run_pipeline(&cfg)?);
        }
        Command::Defend(a) => {
            cfg.attacks.clear();
            cfg.defenses = vec![defense_spec(a)?];
            print_reports(&run_pipeline(&cfg)?);
        }
        Command::Analyze(a) => {
            let out = cfg.resolved_output_dir();
            let path = match &a.dataset {
                Some(p) => p.clone(),
                None => poiaudit_core::pipeline::seed_dir(&out, cfg.base_seed).join("dataset.json"),
            };
            if !path.is_file() {
                return Err(Error::Config(format!(
                    "no dataset at {}; run `train` first or pass --dataset",
                    path.display()
                )));
            }
            analyze(&MobilityDataset::load(&path)?, &out)?;
        }
        Command::Sweep(a) => {
            let axis = SweepAxis::parse(&a.axis)?;
            if !a.attacks.is_empty() {
                cfg.attacks = a.attacks.iter().map(|&k| k.into()).collect();
            }
            for row in ablation_sweep(&cfg, axis, &a.values)? {
                println!("{}\t{}\t{}\t{:.6}", row.value, row.attack, row.metric, row.mean);
            }
        }
        Command::Report(a) => {
            let out = cfg.resolved_output_dir();
            if a.verify {
                println!("verified {} artifacts", verify_artifacts(&out)?);
            }
            print_reports(&load_reports(&out)?);
        }
        Command::Run => print_reports(&run_pipeline(&cfg)?),
        Command::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
