use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use attnback::baselines::{plda_fit, PldaModel, PldaOptions, PLDA_MAGIC};
use attnback::codec::write_atomic;
use attnback::data::{
    generate_synthetic, read_embeddings, read_trials, split_train_eval, write_embeddings,
    write_trials, EmbeddingSet, ScaleScope, SyntheticSpec,
};
use attnback::metrics::{
    det_points, eer, format_det, min_dcf, read_scores, write_scores, OperatingPoint,
};
use attnback::model::{AttentionBackendParams, BackendConfig};
use attnback::numerics::Rng;
use attnback::scoring::{score_trials, Aggregation, Scorer};
use attnback::trainer::{self, BatchSpec, CyclicalLrSchedule, TrainOptions};
use attnback::{Error, Result};

#[derive(Parser)]
#[command(
    name = "attnback",
    version,
    about = "Speaker-verification back-ends on precomputed embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding set, a train subset and a trial list.
    Synth(SynthArgs),
    /// Train the attention back-end, or fit LDA + PLDA.
    Train(TrainArgs),
    /// Score a trial list.
    Score(ScoreArgs),
    /// EER, minDCF and DET points of a labeled score file.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Backend {
    Attention,
    Cosine,
    Plda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Agg {
    Mean,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Scope {
    Speaker,
    Utterance,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct SynthArgs {
    /// Output directory for embeddings.emb, train.emb and trials.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    speakers: Option<usize>,
    /// Utterances per speaker.
    #[arg(long)]
    utts: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Between-speaker standard deviation.
    #[arg(long)]
    between: Option<f64>,
    /// Within-speaker standard deviation.
    #[arg(long)]
    within: Option<f64>,
    /// Heteroscedastic within-speaker range `LO,HI`; overrides --within.
    #[arg(long, value_delimiter = ',', value_name = "LO,HI")]
    within_range: Option<Vec<f64>>,
    /// Draw the within scale per speaker or per utterance.
    #[arg(long, value_enum)]
    hetero_scope: Option<Scope>,
    /// Fraction of speakers held out for the trial list.
    #[arg(long)]
    eval_fraction: Option<f64>,
    /// Enrollment utterances per held-out speaker.
    #[arg(long)]
    enrollments: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file with any of the long option names as keys (snake_case).
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct TrainArgs {
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output model file (trainer checkpoint, or PLDA model).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume attention training from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    /// Total epochs (a resumed run continues up to this count).
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_speakers: Option<usize>,
    #[arg(long)]
    batch_utts: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    half_cycle: Option<u64>,
    #[arg(long)]
    sdsa_heads: Option<usize>,
    #[arg(long)]
    ffsa_heads: Option<usize>,
    #[arg(long)]
    ffsa_hidden: Option<usize>,
    /// LDA output dimension before PLDA; 0 disables LDA.
    #[arg(long)]
    lda_dim: Option<usize>,
    #[arg(long)]
    plda_latent: Option<usize>,
    #[arg(long)]
    plda_iters: Option<usize>,
    /// Length-normalize embeddings before PLDA.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    length_norm: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct ScoreArgs {
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Model file; not needed for the cosine back-end.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    #[arg(long, value_enum)]
    agg: Option<Agg>,
    /// Score file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct EvalArgs {
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Target prior for minDCF; repeatable.
    #[arg(long)]
    p_target: Option<Vec<f64>>,
    /// DET points file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| usage(format!("--{flag} is required")))
}

/// Every key accepted in a config file: the long options of all subcommands.
fn known_keys() -> BTreeSet<String> {
    let cmd = Cli::command();
    cmd.get_subcommands()
        .flat_map(|s| {
            s.get_arguments()
                .map(|a| a.get_id().to_string())
                .collect::<Vec<_>>()
        })
        .filter(|k| k != "config" && k != "help")
        .collect()
}

/// Config-file values overlaid by command-line values.
fn resolve<T: Serialize + DeserializeOwned>(cli: &T, config: Option<&Path>) -> Result<T> {
    let mut table = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let table: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| usage(format!("{}: {e}", path.display())))?;
            let known = known_keys();
            if let Some(bad) = table.keys().find(|k| !known.contains(*k)) {
                return Err(usage(format!("{}: unknown key {bad:?}", path.display())));
            }
            table
        }
        None => toml::Table::new(),
    };
    let overrides = toml::Table::try_from(cli).map_err(|e| usage(e.to_string()))?;
    table.extend(overrides);
    table
        .try_into()
        .map_err(|e: toml::de::Error| usage(format!("config: {e}")))
}

fn log_config<T: Serialize>(name: &str, resolved: &T) {
    match toml::to_string(resolved) {
        Ok(text) => log::info!("resolved {name} config:\n{text}"),
        Err(e) => log::warn!("could not render resolved config: {e}"),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut a = resolve(&args, args.config.as_deref())?;
    let d = SyntheticSpec::default();
    a.speakers.get_or_insert(d.speakers);
    a.utts.get_or_insert(d.utts_per_speaker);
    a.dim.get_or_insert(d.dim);
    a.between.get_or_insert(d.between_scale);
    a.within.get_or_insert(d.within_scale);
    a.hetero_scope.get_or_insert(Scope::Speaker);
    a.eval_fraction.get_or_insert(0.2);
    a.enrollments.get_or_insert(3);
    a.seed.get_or_insert(0);
    log_config("synth", &a);

    let out = required(&a.out, "out")?;
    let within_range = match a.within_range.as_deref() {
        None => None,
        Some([lo, hi]) => Some((*lo, *hi)),
        Some(_) => return Err(usage("--within-range takes exactly two values LO,HI")),
    };
    let spec = SyntheticSpec {
        speakers: a.speakers.unwrap(),
        utts_per_speaker: a.utts.unwrap(),
        dim: a.dim.unwrap(),
        between_scale: a.between.unwrap(),
        within_scale: a.within.unwrap(),
        within_range,
        scope: match a.hetero_scope.unwrap() {
            Scope::Speaker => ScaleScope::Speaker,
            Scope::Utterance => ScaleScope::Utterance,
        },
        seed: a.seed.unwrap(),
    };
    let data = generate_synthetic(&spec)?;
    let split = split_train_eval(
        &data.set,
        a.eval_fraction.unwrap(),
        a.enrollments.unwrap(),
        &mut Rng::new(spec.seed).substream(2),
    )?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_embeddings(&data.set, &out.join("embeddings.emb"))?;
    write_embeddings(&split.train, &out.join("train.emb"))?;
    write_trials(&split.trials, &out.join("trials.txt"))?;
    log::info!(
        "wrote {} records ({} train), {} trials to {}",
        data.set.len(),
        split.train.len(),
        split.trials.len(),
        out.display()
    );
    Ok(())
}

fn plda_dims(
    set: &EmbeddingSet,
    a: &TrainArgs,
    explicit: &TrainArgs,
) -> Result<(Option<usize>, usize)> {
    let speakers = set.speakers().len();
    let lda_cap = set.dim().min(speakers.saturating_sub(1));
    let lda = match a.lda_dim.unwrap() {
        0 => None,
        k if k > lda_cap && explicit.lda_dim.is_none() => {
            log::warn!("default LDA dim {k} exceeds what the data supports; using {lda_cap}");
            Some(lda_cap)
        }
        k => Some(k),
    };
    let space = lda.unwrap_or(set.dim());
    let latent = match a.plda_latent.unwrap() {
        r if r > space && explicit.plda_latent.is_none() => {
            log::warn!("default PLDA latent dim {r} exceeds the {space}-dim input; using {space}");
            space
        }
        r => r,
    };
    Ok((lda, latent))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let explicit = resolve(&args, args.config.as_deref())?;
    let mut a = explicit.clone();
    a.backend.get_or_insert(Backend::Attention);
    a.epochs.get_or_insert(40);
    a.batch_speakers.get_or_insert(BatchSpec::DEFAULT_SPEAKERS);
    a.batch_utts.get_or_insert(BatchSpec::DEFAULT_UTTS);
    a.lambda.get_or_insert(attnback::objectives::DEFAULT_LAMBDA);
    let sched = CyclicalLrSchedule::default();
    a.lr_min.get_or_insert(sched.lr_min);
    a.lr_max.get_or_insert(sched.lr_max);
    a.half_cycle.get_or_insert(sched.half_cycle);
    a.sdsa_heads.get_or_insert(4);
    a.ffsa_heads.get_or_insert(4);
    a.ffsa_hidden.get_or_insert(64);
    a.lda_dim.get_or_insert(400);
    a.plda_latent.get_or_insert(150);
    a.plda_iters.get_or_insert(10);
    a.length_norm.get_or_insert(false);
    a.seed.get_or_insert(0);
    log_config("train", &a);

    let pool = read_embeddings(&required(&a.embeddings, "embeddings")?)?;
    let out = required(&a.out, "out")?;
    match a.backend.unwrap() {
        Backend::Cosine => Err(usage("the cosine back-end has nothing to train")),
        Backend::Plda => {
            let (lda_dim, latent_dim) = plda_dims(&pool, &a, &explicit)?;
            let options = PldaOptions {
                latent_dim,
                iters: a.plda_iters.unwrap(),
                lda_dim,
                length_norm: a.length_norm.unwrap(),
            };
            let fit = plda_fit(&pool, &options)?;
            for (i, ll) in fit.log_likelihood.iter().enumerate() {
                log::info!("em iteration {i}: log-likelihood {ll:.6}");
            }
            fit.model.save(&out)
        }
        Backend::Attention => {
            let config = BackendConfig::new(
                pool.dim(),
                a.sdsa_heads.unwrap(),
                a.ffsa_heads.unwrap(),
                a.ffsa_hidden.unwrap(),
            )?;
            let options = TrainOptions {
                batch: BatchSpec::new(
                    a.batch_speakers.unwrap(),
                    a.batch_utts.unwrap(),
                    a.seed.unwrap(),
                )?,
                schedule: CyclicalLrSchedule::new(
                    a.lr_min.unwrap(),
                    a.lr_max.unwrap(),
                    a.half_cycle.unwrap(),
                )?,
                lambda: a.lambda.unwrap(),
                epochs: a.epochs.unwrap(),
            };
            let log_epoch = |s: &trainer::EpochStats| log::info!("epoch\t{}", s.log_line());
            let state = match &a.checkpoint {
                Some(path) => {
                    let state = trainer::load_checkpoint(path)?;
                    if state.params.config() != &config {
                        return Err(usage(format!(
                            "checkpoint {} has config {:?}, requested {:?}",
                            path.display(),
                            state.params.config(),
                            config
                        )));
                    }
                    trainer::resume(state, &pool, &options, log_epoch)?
                }
                None => trainer::train(&pool, config, &options, log_epoch)?,
            };
            trainer::save_checkpoint(&state, &out)?;
            let mut log_text = String::from("epoch\ttotal\tbce\tge2e\tlr\n");
            for s in &state.history {
                writeln!(log_text, "{}", s.log_line()).expect("writing to a String");
            }
            write_atomic(&log_path(&out), log_text.as_bytes())
        }
    }
}

fn log_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".log");
    PathBuf::from(name)
}

enum LoadedModel {
    Attention(AttentionBackendParams),
    Plda(PldaModel),
    None,
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let mut a = resolve(&args, args.config.as_deref())?;
    a.backend.get_or_insert(Backend::Attention);
    a.agg.get_or_insert(Agg::Mean);
    log_config("score", &a);

    let set = read_embeddings(&required(&a.embeddings, "embeddings")?)?;
    let trials = read_trials(&required(&a.trials, "trials")?)?;
    let agg = match a.agg.unwrap() {
        Agg::Mean => Aggregation::Mean,
        Agg::Concat => Aggregation::Concat,
    };
    let backend = a.backend.unwrap();
    let model = match backend {
        Backend::Cosine => LoadedModel::None,
        Backend::Attention => LoadedModel::Attention(trainer::load_params_any(&required(
            &a.checkpoint,
            "checkpoint",
        )?)?),
        Backend::Plda => {
            let path = required(&a.checkpoint, "checkpoint")?;
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if !bytes.starts_with(PLDA_MAGIC) {
                return Err(usage(format!(
                    "{} is not a PLDA model file",
                    path.display()
                )));
            }
            LoadedModel::Plda(PldaModel::from_bytes(&bytes)?)
        }
    };
    let scorer = match &model {
        LoadedModel::Attention(p) => {
            if agg != Aggregation::Mean {
                log::info!(
                    "the attention back-end consumes the full enrollment list; --agg is ignored"
                );
            }
            Scorer::Attention(p)
        }
        LoadedModel::Plda(m) => Scorer::Plda(m, agg),
        LoadedModel::None => Scorer::Cosine(agg),
    };
    let scores = score_trials(&scorer, &set, &trials)?;
    match &a.out {
        Some(path) => write_scores(&scores, path),
        None => emit(&attnback::metrics::format_scores(&scores)?),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut a = resolve(&args, args.config.as_deref())?;
    if a.p_target.as_ref().is_none_or(Vec::is_empty) {
        a.p_target = Some(vec![0.01, 0.001]);
    }
    log_config("eval", &a);

    let scores = read_scores(&required(&a.scores, "scores")?)?;
    if scores.records.iter().any(|r| r.label.is_none()) {
        return Err(usage("evaluation needs a labeled score file"));
    }
    let e = eer(&scores)?;
    let mut report = format!("eer\t{:?}\t{:.2}%\n", e.eer, 100.0 * e.eer);
    for &p in a.p_target.as_deref().unwrap_or_default() {
        let dcf = min_dcf(&scores, &OperatingPoint::with_prior(p)?)?;
        let _ = writeln!(
            report,
            "min_dcf({p})\t{:?}\t{:.4}",
            dcf.min_dcf, dcf.min_dcf
        );
    }
    if let Some(path) = &a.out {
        write_atomic(path, format_det(&det_points(&scores)?).as_bytes())?;
    }
    emit(&report)
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
