//! `valence-gan`: synthesize a corpus, cache features, search, train,
//! evaluate and report.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use valence_gan::config::RunConfig;
use valence_gan::data::Corpus;
use valence_gan::eval::{self, experiment, report, search, ExperimentFailure, ExperimentReport};
use valence_gan::model::ModelKind;
use valence_gan::synth::{self, SynthSpec, MANIFEST_FILE};
use valence_gan::train::write_loss_csv;

const BUILD: &str = env!("VALENCE_GAN_BUILD");

#[derive(Parser, Debug)]
#[command(name = "valence-gan", version = BUILD, about = "Semi-supervised speech valence classification")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Global seed; overrides the config file.
    #[arg(long, global = true, env = "VALENCE_GAN_SEED")]
    seed: Option<u64>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a deterministic synthetic corpus.
    Synth(SynthArgs),
    /// Compute and cache log spectrograms for a manifest.
    Preprocess {
        #[arg(long, default_value = "corpus/manifest.jsonl")]
        manifest: PathBuf,
        #[arg(long, default_value = "cache")]
        cache: PathBuf,
    },
    /// Random hyper-parameter search on the first fold.
    Search {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
    /// Train a single fold, writing checkpoints and the per-step loss log.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// 1-based fold index.
        #[arg(long, default_value_t = 1)]
        fold: usize,
    },
    /// Run all folds and write report.json.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Render tables and loss curves from report.json files.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Output directory; defaults to the first report's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value = "corpus")]
    out: PathBuf,
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    labeled_per_speaker: Option<usize>,
    #[arg(long)]
    unlabeled: Option<usize>,
    #[arg(long)]
    min_duration: Option<f64>,
    #[arg(long)]
    max_duration: Option<f64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// BasicCNN, MultitaskCNN, BasicDCGAN or MultitaskDCGAN; optional with --config.
    kind: Option<ModelKind>,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the tuned per-kind hyper-parameters instead of desk defaults.
    #[arg(long)]
    tuned: bool,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    crop_width: Option<usize>,
    #[arg(long)]
    filter_size: Option<usize>,
    #[arg(long)]
    num_filters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

impl RunArgs {
    /// Returns the configuration with paths resolved against `workdir`, and
    /// the same configuration as written, for saving next to the outputs.
    fn resolve(&self, workdir: &Path, seed: Option<u64>) -> anyhow::Result<(RunConfig, RunConfig)> {
        let mut run = match (&self.config, self.kind) {
            (Some(path), kind) => {
                let mut run = RunConfig::load(&workdir.join(path))?;
                if let Some(k) = kind {
                    run.model.kind = k;
                }
                run
            }
            (None, Some(kind)) => {
                let mut run = RunConfig::desk(kind, PathBuf::from("corpus").join(MANIFEST_FILE));
                if self.tuned {
                    run.model = valence_gan::model::ModelConfig::tuned(kind);
                }
                run.corpus.cache_dir = Some("cache".into());
                run.output_dir = PathBuf::from("runs").join(kind.name());
                run
            }
            (None, None) => bail!(valence_gan::Error::Config("give a model kind or --config".into())),
        };
        if let Some(v) = &self.manifest {
            run.corpus.manifest = v.clone();
        }
        if let Some(v) = &self.cache_dir {
            run.corpus.cache_dir = Some(v.clone());
        }
        if let Some(v) = &self.out {
            run.output_dir = v.clone();
        }
        macro_rules! set {
            ($($field:ident => $dst:expr),*) => {$(
                if let Some(v) = self.$field {
                    $dst = v;
                }
            )*};
        }
        set!(
            max_epochs => run.max_epochs,
            patience => run.patience,
            checkpoint_every => run.checkpoint_every,
            crop_width => run.model.crop_width,
            filter_size => run.model.filter_size,
            num_filters => run.model.num_filters,
            batch_size => run.model.batch_size,
            learning_rate => run.model.learning_rate
        );
        if let Some(s) = seed {
            run.seed = s;
        }
        run.validate()?;
        let written = run.clone();
        run.resolve(workdir);
        Ok((run, written))
    }
}

fn load_corpus(run: &RunConfig) -> anyhow::Result<Corpus> {
    Ok(Corpus::load(&run.corpus.manifest, run.corpus.cache_dir.as_deref())?)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let workdir = &cli.workdir;
    match cli.command {
        Command::Synth(a) => {
            let d = SynthSpec::default();
            let spec = SynthSpec {
                n_sessions: a.sessions.unwrap_or(d.n_sessions),
                speakers_per_session: a.speakers.unwrap_or(d.speakers_per_session),
                labeled_per_speaker: a.labeled_per_speaker.unwrap_or(d.labeled_per_speaker),
                unlabeled_clips: a.unlabeled.unwrap_or(d.unlabeled_clips),
                min_duration_sec: a.min_duration.unwrap_or(d.min_duration_sec),
                max_duration_sec: a.max_duration.unwrap_or(d.max_duration_sec),
                seed: cli.seed.unwrap_or(d.seed),
            };
            let out = workdir.join(&a.out);
            let corpus = synth::generate(&spec, &out)?;
            let labeled = corpus.truths.iter().filter(|t| t.labeled).count();
            print_json(&json!({
                "manifest": corpus.manifest,
                "labeled": labeled,
                "unlabeled": corpus.truths.len() - labeled,
                "seed": spec.seed,
            }));
        }
        Command::Preprocess { manifest, cache } => {
            let cache = workdir.join(cache);
            let corpus = Corpus::load(&workdir.join(manifest), Some(&cache))?;
            print_json(&json!({
                "cache": cache,
                "clips": corpus.clips.len(),
                "labeled": corpus.labeled().count(),
                "unlabeled": corpus.unlabeled().count(),
            }));
        }
        Command::Search { run: args, trials } => {
            let kind = args.kind;
            let (run, written) = args.resolve(workdir, cli.seed)?;
            let kind = kind.unwrap_or(run.model.kind);
            let corpus = load_corpus(&run)?;
            let result = search::random_search(&run, &corpus, kind, trials, run.seed)?;
            create_dir(&run.output_dir)?;
            search::write_trials_csv(&run.output_dir.join("trials.csv"), &result.trials)?;
            let mut best = written;
            best.model = result.best_config().clone();
            write(&run.output_dir.join("best.toml"), &best.to_toml())?;
            let t = &result.trials[result.best];
            print_json(&json!({
                "best_trial": t.trial,
                "validation_accuracy": t.validation_accuracy,
                "config": t.config,
                "trials_csv": run.output_dir.join("trials.csv"),
            }));
        }
        Command::Train { run: args, fold } => {
            let (run, _) = args.resolve(workdir, cli.seed)?;
            let corpus = load_corpus(&run)?;
            let folds = eval::make_folds(corpus.labeled().map(|c| (c.session.as_str(), c.speaker.as_str())))?;
            let split = folds
                .get(fold.wrapping_sub(1))
                .ok_or_else(|| valence_gan::Error::Config(format!("fold {fold} not in 1..={}", folds.len())))?;
            let dir = run.output_dir.join(format!("fold{fold}"));
            create_dir(&dir)?;
            let result = experiment::run_fold(&run, &corpus, split, Some(&dir.join("checkpoints")))?;
            write_loss_csv(&dir.join("losses.csv"), &result.state.history)?;
            let doc = json!({ "config": run, "build": BUILD, "fold": result.report });
            write(&dir.join("fold_report.json"), &(serde_json::to_string_pretty(&doc)? + "\n"))?;
            let s = &result.report.scores;
            print_json(&json!({
                "fold": fold,
                "acc5": s.acc5,
                "acc3": s.acc3,
                "rho": s.rho,
                "best_epoch": result.report.best_epoch,
                "output": dir,
            }));
        }
        Command::Evaluate { run: args } => {
            let (run, written) = args.resolve(workdir, cli.seed)?;
            let corpus = load_corpus(&run)?;
            create_dir(&run.output_dir)?;
            write(&run.output_dir.join("run.toml"), &written.to_toml())?;
            let ckpt = (run.checkpoint_every > 0).then(|| run.output_dir.join("checkpoints"));
            let path = run.output_dir.join("report.json");
            match experiment::run_experiment(&run, &corpus, BUILD, ckpt.as_deref()) {
                Ok(report) => {
                    write(&path, &report.to_json()?)?;
                    print_json(&json!({ "report": path, "aggregate": report.aggregate }));
                }
                Err(failure) => {
                    write(&path, &failure.report.to_json()?)?;
                    return Err(failure.into());
                }
            }
        }
        Command::Report { reports, out } => {
            let mut parsed = Vec::new();
            for p in &reports {
                let p = workdir.join(p);
                let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                let r: ExperimentReport = serde_json::from_str(&text)
                    .map_err(|e| anyhow!(valence_gan::Error::Format { format: "report.json", reason: e.to_string() }))?;
                parsed.push(r);
            }
            let out = match out {
                Some(o) => workdir.join(o),
                None => workdir.join(&reports[0]).parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            create_dir(&out)?;
            let text = report::render(&parsed);
            write(&out.join("report.txt"), &text)?;
            for r in &parsed {
                for (name, svg) in report::loss_curves(r) {
                    write(&out.join(name), &svg)?;
                }
            }
            print!("{text}");
        }
    }
    Ok(())
}

/// Machine-readable kind of a failure.
fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(f) = e.downcast_ref::<ExperimentFailure>() {
        return f.error.kind();
    }
    if let Some(v) = e.downcast_ref::<valence_gan::Error>() {
        return v.kind();
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    "error"
}

fn envelope(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", envelope("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", envelope(error_kind(&e), &format!("{e:#}")));
            ExitCode::from(1)
        }
    }
}
