use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use raywatch::features::load_external_features;
use raywatch::imagery::{write_dataset, CropRegion, FlipAxis, Manifest, Preprocess, SynthSeries};
use raywatch::pipelines::{
    emit_prediction_plot_data, evaluate, flip_experiment, flip_table, load_features,
    online_records_jsonl, run_online, sample_eval_indices, sample_eval_pool, train_offline,
    train_on_features, FeatureSource, ManifestSource, ModelKind, ModelSpec, OnlineConfig,
    TrainConfig, TuningData, DEFAULT_WARM_UP,
};
use raywatch::sentinel::{
    classify_cli, serve, workflow_driver, BundleDetector, Client, Detector, DriverConfig, Endpoint,
    EndpointDetector, SentinelError, WarmUpPolicy, ENDPOINT_ENV,
};
use raywatch::tuner::{history_jsonl, render_table};
use raywatch::{Bundle, FeatureMatrix64, Label};

#[derive(Parser)]
#[command(
    name = "raywatch",
    version,
    about = "One-class anomaly detection for simulation state images"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic entropy slices and a manifest.
    Synth(SynthArgs),
    /// Train a bundle on the valid images of a manifest.
    Train(TrainArgs),
    /// Evaluate a bundle against a labelled manifest.
    Eval(EvalArgs),
    /// Evaluate a bundle on flipped copies of the images.
    Flips(FlipsArgs),
    /// Retrain-per-frame harness over a time-ordered manifest.
    Online(OnlineArgs),
    /// Random hyperparameter search on misclassification rate.
    Tune(TuneArgs),
    /// Classify one image; exit 0 valid, 1 anomalous, 2 error.
    Classify(ClassifyArgs),
    /// Serve classification requests until shut down.
    Serve(ServeArgs),
    /// Talk to a running daemon; exit codes as for `classify`.
    Query(QueryArgs),
    /// Simulate the step, classify, rewind loop.
    Drive(DriveArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    count_valid: usize,
    #[arg(long)]
    count_anomalous: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// `iforest` or `ocsvm`.
    #[arg(long, default_value = "iforest")]
    model: ModelKind,
    #[arg(long, default_value_t = 125)]
    trees: usize,
    #[arg(long, default_value_t = 0.0)]
    contamination: f64,
    #[arg(long, default_value_t = 1e-3)]
    gamma: f64,
    #[arg(long, default_value_t = 0.01)]
    nu: f64,
}

impl ModelArgs {
    fn spec(&self) -> Result<ModelSpec> {
        let p = match self.model {
            ModelKind::Iforest => [
                ("trees", self.trees as f64),
                ("contamination", self.contamination),
            ],
            ModelKind::Ocsvm => [("gamma", self.gamma), ("nu", self.nu)],
        };
        let params = p.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        self.model.spec(&params).map_err(|e| anyhow!(e))
    }
}

#[derive(Args, Clone)]
struct FeatureArgs {
    /// `production` (plot-area crop resized to 640x480), `none`, or
    /// `crop=XLO:XHI:YLO:YHI` with an optional `,resize=HxW`.
    #[arg(long, default_value = "production", value_parser = parse_preprocess)]
    preprocess: Preprocess,
    /// PCA components to keep.
    #[arg(long, default_value_t = 512, conflicts_with = "no_pca")]
    pca: usize,
    /// Train on scaled rows without projection.
    #[arg(long)]
    no_pca: bool,
}

impl FeatureArgs {
    fn pca(&self) -> Option<usize> {
        (!self.no_pca).then_some(self.pca)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Labelled manifest; only valid entries are trained on.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Pre-extracted feature rows (FMX1); labels come from `--manifest` when given.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    feat: FeatureArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_WARM_UP)]
    warm_up: usize,
}

#[derive(Args, Clone)]
struct PoolArgs {
    /// Evaluate a random `VALID,ANOMALOUS` subset instead of the whole manifest.
    #[arg(long, value_parser = parse_pair)]
    pool: Option<(usize, usize)>,
    #[arg(long, default_value_t = 0)]
    pool_seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    pool: PoolArgs,
    /// Write per-image verdict records here (`-` for stdout).
    #[arg(long)]
    jsonl: Option<PathBuf>,
}

#[derive(Args)]
struct FlipsArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    pool: PoolArgs,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "identity,horizontal,vertical,both"
    )]
    axes: Vec<FlipAxis>,
    #[arg(long)]
    jsonl: Option<PathBuf>,
}

#[derive(Args)]
struct OnlineArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    start: usize,
    #[arg(long, default_value_t = 9)]
    lookahead: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "production", value_parser = parse_preprocess)]
    preprocess: Preprocess,
    /// PCA components per step model; raw scaled pixels when absent.
    #[arg(long)]
    pca: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_WARM_UP)]
    warm_up: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tab-separated per-step data for plotting.
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long)]
    jsonl: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "ocsvm")]
    model: ModelKind,
    #[arg(long, default_value_t = 20)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    feat: FeatureArgs,
    /// `VALID,ANOMALOUS` evaluation pool.
    #[arg(long, value_parser = parse_pair, default_value = "40,20")]
    pool: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pool_seed: u64,
    /// Run trials on all cores; the history is unchanged.
    #[arg(long)]
    parallel: bool,
    /// Line-delimited trial records.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Keep wall times in the history file.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    bundle: PathBuf,
    image: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// `host:port` or a socket path.
    #[arg(long, env = ENDPOINT_ENV)]
    listen: String,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long, env = ENDPOINT_ENV)]
    endpoint: String,
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
    #[arg(long, conflicts_with_all = ["shutdown", "image"])]
    ping: bool,
    #[arg(long, conflicts_with = "image")]
    shutdown: bool,
    image: Option<PathBuf>,
}

#[derive(Args)]
struct DriveArgs {
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    inject_at: Option<usize>,
    #[arg(long, default_value_t = 10)]
    checkpoint_every: usize,
    #[arg(long, default_value_t = 3)]
    max_attempts: usize,
    /// `trust` or `ignore-negative`.
    #[arg(long, default_value = "trust")]
    policy: WarmUpPolicy,
    /// `bundle:PATH` or `endpoint:ADDR`; defaults to the endpoint in the environment.
    #[arg(long)]
    detector: Option<String>,
    /// Seed of the synthetic series.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Where frames are written for a daemon detector.
    #[arg(long)]
    workdir: Option<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
    /// Line-delimited run log.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected VALID,ANOMALOUS")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

fn parse_preprocess(s: &str) -> Result<Preprocess, String> {
    match s {
        "production" => return Ok(Preprocess::PRODUCTION),
        "none" => return Ok(Preprocess::default()),
        _ => {}
    }
    let mut p = Preprocess::default();
    for part in s.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("bad preprocess step `{part}`"))?;
        match key {
            "crop" => {
                let v: Vec<usize> = value
                    .split(':')
                    .map(|x| x.parse().map_err(|e| format!("crop bound `{x}`: {e}")))
                    .collect::<Result<_, _>>()?;
                let [x_lo, x_hi, y_lo, y_hi] = v[..] else {
                    return Err("crop expects XLO:XHI:YLO:YHI".into());
                };
                p.crop = Some(CropRegion::new(x_lo, x_hi, y_lo, y_hi).map_err(|e| e.to_string())?);
            }
            "resize" => {
                let (h, w) = value.split_once('x').ok_or("resize expects HxW")?;
                p.resize = Some((
                    h.parse().map_err(|e| format!("{e}"))?,
                    w.parse().map_err(|e| format!("{e}"))?,
                ));
            }
            other => return Err(format!("unknown preprocess step `{other}`")),
        }
    }
    Ok(p)
}

fn write_output(path: &Path, text: &str) -> Result<()> {
    if path == Path::new("-") {
        print!("{text}");
        return Ok(());
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("reading manifest {}", path.display()))
}

fn load_bundle(path: &Path) -> Result<Bundle> {
    Bundle::load(path).with_context(|| format!("loading bundle {}", path.display()))
}

fn pooled(manifest: Manifest, pool: &PoolArgs) -> Result<Manifest> {
    match pool.pool {
        Some((v, a)) => Ok(sample_eval_pool(&manifest, v, a, pool.pool_seed)?),
        None => Ok(manifest),
    }
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "n/a".into(), |v| format!("{:.4}", v))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut series = SynthSeries::with_seed(a.seed);
    series.base.height = a.height;
    series.base.width = a.width;
    let frames = series.dataset(a.count_valid, a.count_anomalous);
    let manifest = write_dataset(&a.out, &frames)?;
    println!(
        "wrote {} images and {}",
        manifest.len(),
        a.out.join("manifest.csv").display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        model: a.model.spec()?,
        pca: a.feat.pca(),
        preprocess: a.feat.preprocess,
        seed: a.seed,
        warm_up_threshold: a.warm_up,
    };
    let started = Instant::now();
    let bundle: Bundle = match (&a.features, &a.manifest) {
        (Some(f), manifest) => {
            let x = load_external_features::<f64>(f)
                .with_context(|| format!("reading {}", f.display()))?;
            let (labels, digest) = match manifest {
                Some(m) => {
                    let m = load_manifest(m)?;
                    (m.entries.iter().map(|e| e.label).collect(), m.digest())
                }
                None => (
                    vec![Label::Valid; x.n()],
                    raywatch::digest_hex(&fs::read(f)?),
                ),
            };
            train_on_features(&x, &labels, &config, FeatureSource::External, digest)?
        }
        (None, Some(m)) => train_offline(&load_manifest(m)?, &config)?,
        (None, None) => bail!("train needs --manifest or --features"),
    };
    bundle.save(&a.out)?;
    println!(
        "trained {} on {} rows of width {} in {:.2}s; model {}{}",
        bundle.spec.name(),
        bundle.provenance.n_train,
        bundle.provenance.n_features,
        started.elapsed().as_secs_f64(),
        bundle.model_id(),
        if bundle.warm_up { " (warm-up)" } else { "" }
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let bundle = load_bundle(&a.bundle)?;
    let manifest = pooled(load_manifest(&a.manifest)?, &a.pool)?;
    let report = evaluate(&bundle, &manifest);
    print!("{}", report.confusion_table());
    println!("normal accuracy     {}", fmt_acc(report.valid_accuracy()));
    println!(
        "anomalous accuracy  {}",
        fmt_acc(report.anomalous_accuracy())
    );
    if report.failures > 0 {
        println!("failed images       {}", report.failures);
    }
    if let Some(p) = &a.jsonl {
        write_output(p, &report.verdicts_jsonl())?;
    }
    Ok(())
}

fn flips(a: FlipsArgs) -> Result<()> {
    let bundle = load_bundle(&a.bundle)?;
    let manifest = pooled(load_manifest(&a.manifest)?, &a.pool)?;
    let reports = flip_experiment(&bundle, &manifest, &a.axes);
    print!("{}", flip_table(&reports));
    if let Some(p) = &a.jsonl {
        let mut out = String::new();
        for (axis, r) in &reports {
            let record = serde_json::json!({
                "flip": axis.name(),
                "correct_valid": r.correct_valid(),
                "total_valid": r.valid_passed + r.valid_flagged,
                "correct_anomalous": r.correct_anomalous(),
                "total_anomalous": r.anomalous_missed + r.anomalous_flagged,
                "weighted_accuracy": r.weighted_accuracy(),
                "failures": r.failures,
            });
            out.push_str(&record.to_string());
            out.push('\n');
        }
        write_output(p, &out)?;
    }
    Ok(())
}

fn online(a: OnlineArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let source = ManifestSource {
        manifest: &manifest,
        preprocess: a.preprocess,
    };
    let config = OnlineConfig {
        start: a.start,
        model: a.model.spec()?,
        pca: a.pca,
        warm_up_threshold: a.warm_up,
        base_seed: a.seed,
        lookahead: a.lookahead,
    };
    let (records, summary) = run_online::<f64, _>(&source, &config)?;
    println!(
        "{:>6} {:>6} {:>9} {:>6} {:>8}",
        "step", "train", "correct%", "next", "warm-up"
    );
    for r in &records {
        let next = match r.first_unseen_correct {
            Some(true) => "ok",
            Some(false) => "miss",
            None => "-",
        };
        println!(
            "{:>6} {:>6} {:>9.1} {:>6} {:>8}",
            r.step,
            r.training_size,
            r.percent_correct(),
            next,
            r.warm_up
        );
    }
    println!(
        "steps {}  next-frame accuracy {}  warm-up {} ({})  steady {}",
        summary.steps,
        fmt_acc(summary.first_unseen_accuracy),
        summary.warm_up_steps,
        fmt_acc(summary.warm_up_first_unseen_accuracy),
        fmt_acc(summary.steady_first_unseen_accuracy)
    );
    if let Some(p) = &a.plot {
        write_output(p, &emit_prediction_plot_data(&records))?;
    }
    if let Some(p) = &a.jsonl {
        write_output(p, &online_records_jsonl(&records))?;
    }
    Ok(())
}

fn tune(a: TuneArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let labels: Vec<Label> = manifest.entries.iter().map(|e| e.label).collect();
    let rows = load_features::<f64>(&manifest, &a.feat.preprocess, FlipAxis::Identity)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let x = FeatureMatrix64::from_rows(&rows)?;
    drop(rows);
    let pool = sample_eval_indices(&labels, a.pool.0, a.pool.1, a.pool_seed)?;
    let data = TuningData::prepare(&x, &labels, a.feat.pca(), &pool)?;
    drop(x);
    let result = data.tune(
        a.model,
        &a.model.default_space(),
        a.budget,
        a.seed,
        a.parallel,
    )?;
    print!("{}", render_table(&result));
    if let Some(p) = &a.history {
        write_output(p, &history_jsonl(&result.history, a.timing))?;
    }
    Ok(())
}

fn exit_for(verdict: std::result::Result<raywatch::sentinel::Verdict, SentinelError>) -> ExitCode {
    match verdict {
        Ok(v) => {
            println!("{}", v.to_json_line());
            ExitCode::from(v.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn query(a: QueryArgs) -> Result<ExitCode> {
    let endpoint = Endpoint::parse(&a.endpoint)?;
    let timeout = Duration::from_secs_f64(a.timeout);
    let connect = || Client::connect(&endpoint, timeout);
    if a.ping {
        return Ok(match connect().and_then(|mut c| c.ping()) {
            Ok(id) => {
                println!("{}", serde_json::json!({ "pong": true, "model_id": id }));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        });
    }
    if a.shutdown {
        connect()?.shutdown()?;
        return Ok(ExitCode::SUCCESS);
    }
    let image = a
        .image
        .ok_or_else(|| anyhow!("query needs an image path, --ping or --shutdown"))?;
    let image = fs::canonicalize(&image).unwrap_or(image);
    Ok(exit_for(connect().and_then(|mut c| c.classify(&image))))
}

fn drive(a: DriveArgs) -> Result<ExitCode> {
    let mut series = SynthSeries::with_seed(a.seed);
    series.base.height = a.height;
    series.base.width = a.width;
    let config = DriverConfig {
        steps: a.steps,
        inject_at: a.inject_at,
        checkpoint_every: a.checkpoint_every,
        max_attempts: a.max_attempts,
        policy: a.policy,
        series,
    };
    let spec = match a.detector {
        Some(d) => d,
        None => format!(
            "endpoint:{}",
            std::env::var(ENDPOINT_ENV)
                .context("no --detector and no endpoint in the environment")?
        ),
    };
    let timeout = Duration::from_secs_f64(a.timeout);
    let mut detector: Box<dyn Detector> = match spec.split_once(':') {
        Some(("bundle", p)) => Box::new(BundleDetector::new(load_bundle(Path::new(p))?)),
        Some(("endpoint", e)) => {
            let workdir = a.workdir.clone().unwrap_or_else(|| {
                std::env::temp_dir().join(format!("raywatch-drive-{}", std::process::id()))
            });
            Box::new(EndpointDetector::connect(
                &Endpoint::parse(e)?,
                workdir,
                timeout,
            )?)
        }
        _ => bail!("detector must be bundle:PATH or endpoint:ADDR"),
    };
    let outcome = workflow_driver(&config, detector.as_mut());
    let (log, code) = match outcome {
        Ok(log) => (log, ExitCode::SUCCESS),
        Err(SentinelError::RewindLimitExceeded {
            checkpoint,
            attempts,
            log,
        }) => {
            eprintln!("error: checkpoint {checkpoint} failed {attempts} times; giving up");
            (*log, ExitCode::from(1))
        }
        Err(e) => return Err(e.into()),
    };
    let steps = log
        .events
        .iter()
        .filter(|e| matches!(e, raywatch::sentinel::LogEvent::Step { .. }))
        .count();
    for (from, to) in log.rewinds() {
        println!("rewind: step {from} -> checkpoint {to}");
    }
    println!(
        "{} after {} classified steps with {} rewinds",
        if log.completed {
            "completed"
        } else {
            "aborted"
        },
        steps,
        log.rewinds().len()
    );
    if let Some(p) = &a.log {
        write_output(p, &log.to_jsonl())?;
    }
    Ok(code)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth(a) => synth(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Flips(a) => flips(a)?,
        Command::Online(a) => online(a)?,
        Command::Tune(a) => tune(a)?,
        Command::Classify(a) => {
            let (stdout, stderr) = (std::io::stdout(), std::io::stderr());
            let code = classify_cli(&a.bundle, &a.image, &mut stdout.lock(), &mut stderr.lock());
            return Ok(ExitCode::from(code as u8));
        }
        Command::Serve(a) => serve(&a.bundle, &Endpoint::parse(&a.listen)?)?,
        Command::Query(a) => return query(a),
        Command::Drive(a) => return drive(a),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" }),
    )
    .init();
    match run(cli) {
        Ok(code) => {
            let _ = std::io::stdout().flush();
            code
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
