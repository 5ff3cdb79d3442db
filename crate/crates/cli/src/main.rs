//! `lode` — generate Lorenz measurement data, train the joint
//! fit/embedding/dynamics model, and run forecasting and filtering reports.
//!
//! Exit codes: 0 success, 1 usage/configuration/IO errors, 2 numeric
//! failures (non-finite losses, diverged integrations).

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{error::ErrorKind, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lode_core::config::{config_hash, load_config, ExperimentConfig};
use lode_core::data::{
    add_noise, format_f64, integrate_lorenz, measure_x, read_series, rescale, split_and_segment,
    write_series, write_trajectory, LorenzParams, Provenance, ScalingRecord, Segment, TimeSeries,
};
use lode_core::dynamics::{forecast, measure};
use lode_core::embedding::{delay_rows, fnn_fractions};
use lode_core::error::{Error, Result};
use lode_core::evaluation::{
    decoded_series, filter_csv, filter_table, filtering_report, fit_series, forecast_horizon,
};
use lode_core::training::{
    infer_initial_state, measure_mode, metrics_csv_row, read_checkpoint, run_schedule, state_at,
    Phase, TrainBundle, METRICS_HEADER,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "lode",
    version,
    about = "Learn a smooth fit, a masked embedding, and a latent ODE from a scalar series",
    long_about = None,
    after_help = "Precedence: command-line flags override values from the config file \
                  (--config, or the LODE_CONFIG environment variable); unset values fall \
                  back to the built-in full-scale defaults."
)]
struct Cli {
    /// Config file (TOML, or JSON with a .json extension).
    #[arg(short, long, global = true, env = "LODE_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the Lorenz system and write measurement series.
    Generate(GenerateArgs),
    /// Run the two-phase training schedule; writes checkpoint, metrics, and
    /// a run manifest.
    Train(TrainArgs),
    /// Forecast from a trained checkpoint and write a time,value CSV.
    Forecast(ForecastArgs),
    /// False-nearest-neighbor fractions of a series; writes dimension,gamma.
    FnnScan(FnnScanArgs),
    /// Filtering and forecast-horizon reports for trained checkpoints.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Integration steps (the series gets steps+1 samples). Required.
    #[arg(long)]
    steps: usize,
    /// Initial condition as x,y,z.
    #[arg(long, value_parser = parse_ic)]
    ic: Option<[f64; 3]>,
    /// Sampling step.
    #[arg(long)]
    dt: Option<f64>,
    /// Noise level as a fraction of the signal std; 0 emits clean only.
    #[arg(long)]
    eta: Option<f64>,
    /// Noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// File name prefix.
    #[arg(long, default_value = "lorenz")]
    prefix: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Noisy series CSV (time,value). Without it the series is synthesized
    /// from the config's ic/dt/steps/eta/noise_seed.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path (default from config, else lode-checkpoint.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Metrics CSV path (default from config, else metrics.csv).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Resume from the checkpoint instead of starting fresh.
    #[arg(long)]
    resume: bool,
    /// Override the config's segment count S.
    #[arg(long)]
    segments: Option<usize>,
    /// Override the config's phase-1 segment updates.
    #[arg(long)]
    phase1_iters: Option<usize>,
    /// Override the config's phase-2 segment updates.
    #[arg(long)]
    phase2_iters: Option<usize>,
    /// Override the config's second-phase mode (delay | autoencoder).
    #[arg(long)]
    mode: Option<String>,
    /// Override the config's noise level for synthesized data.
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Args)]
struct ForecastArgs {
    /// Trained checkpoint (its .manifest.json sibling must exist).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Forecast origin (time units). A window around it is refitted to
    /// infer the latent state.
    #[arg(long)]
    t0: f64,
    /// Forecast steps; 0 writes a header-only CSV.
    #[arg(long)]
    steps: usize,
    /// Output CSV path.
    #[arg(long, default_value = "forecast.csv")]
    out: PathBuf,
    /// Half-width of the state-inference window (time units).
    #[arg(long, default_value_t = 1.0)]
    window: f64,
    /// Seed for the window refit.
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// Series to infer the state from (default: the manifest's data path,
    /// else data synthesized from the manifest config).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct FnnScanArgs {
    /// Series CSV (time,value), uniformly sampled.
    #[arg(long)]
    series: PathBuf,
    /// Delay-vector length.
    #[arg(long)]
    m: Option<usize>,
    /// Delay spacing (time units); must be a multiple of the sampling step.
    #[arg(long)]
    tau: Option<f64>,
    /// Number of delay vectors to scan (at least 2).
    #[arg(long)]
    samples: usize,
    /// Output CSV path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Clean reference series CSV (time,value).
    #[arg(long)]
    clean: PathBuf,
    /// A case as label,checkpoint,noisy-csv. Repeatable.
    #[arg(long = "case", value_parser = parse_case, required = true)]
    cases: Vec<CaseSpec>,
    /// Filtering report CSV path (default: stdout table only).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Forecast-horizon report CSV path.
    #[arg(long)]
    horizon_out: Option<PathBuf>,
    /// Forecast steps for the horizon report.
    #[arg(long, default_value_t = 200)]
    steps: usize,
}

#[derive(Clone, Debug)]
struct CaseSpec {
    label: String,
    checkpoint: PathBuf,
    data: PathBuf,
}

fn parse_case(s: &str) -> std::result::Result<CaseSpec, String> {
    let parts: Vec<&str> = s.splitn(3, ',').collect();
    if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
        return Err("expected label,checkpoint,noisy-csv".into());
    }
    Ok(CaseSpec {
        label: parts[0].to_string(),
        checkpoint: PathBuf::from(parts[1]),
        data: PathBuf::from(parts[2]),
    })
}

fn parse_ic(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected x,y,z".into());
    }
    let mut ic = [0.0; 3];
    for (slot, p) in ic.iter_mut().zip(&parts) {
        *slot = p.trim().parse().map_err(|e| format!("bad coordinate {p:?}: {e}"))?;
    }
    Ok(ic)
}

/// Sidecar written next to every checkpoint so later commands can rebuild
/// the exact preprocessing (scaling, splits, network shapes).
#[derive(Serialize, Deserialize)]
struct RunManifest {
    format: String,
    config_hash: String,
    scaling: ScalingRecord,
    config: ExperimentConfig,
    data_path: Option<PathBuf>,
}

const MANIFEST_FORMAT: &str = "lode-manifest-v1";

fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut os = checkpoint.as_os_str().to_os_string();
    os.push(".manifest.json");
    PathBuf::from(os)
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

fn read_manifest(checkpoint: &Path) -> Result<RunManifest> {
    let path = manifest_path(checkpoint);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        Error::Config(format!(
            "no run manifest at {} ({e}); `lode train` writes it next to the checkpoint",
            path.display()
        ))
    })?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Config(format!("unknown manifest format {:?}", manifest.format)));
    }
    manifest.config.validate()?;
    Ok(manifest)
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let cfg = match load_effective_config(cli.config.as_deref()) {
        Ok(cfg) => cfg,
        Err(e) => exit_with(e),
    };
    let outcome = match cli.command {
        Command::Generate(args) => cmd_generate(cfg, args),
        Command::Train(args) => cmd_train(cfg, args),
        Command::Forecast(args) => cmd_forecast(args),
        Command::FnnScan(args) => cmd_fnn_scan(cfg, args),
        Command::Eval(args) => cmd_eval(args),
    };
    if let Err(e) = outcome {
        exit_with(e);
    }
}

fn exit_with(e: Error) -> ! {
    eprintln!("error: {e}");
    let code = match e {
        Error::Numeric(_) => 2,
        _ => 1,
    };
    std::process::exit(code)
}

fn load_effective_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(ExperimentConfig::default()),
    }
}

// ---------------------------------------------------------------------------
// generate

fn cmd_generate(mut cfg: ExperimentConfig, args: GenerateArgs) -> Result<()> {
    cfg.steps = args.steps;
    if let Some(ic) = args.ic {
        cfg.ic = ic;
    }
    if let Some(dt) = args.dt {
        cfg.dt = dt;
    }
    if let Some(eta) = args.eta {
        cfg.eta = eta;
    }
    if let Some(seed) = args.seed {
        cfg.noise_seed = seed;
    }
    cfg.validate_series()?;
    let hash = config_hash(&cfg);

    let traj = integrate_lorenz(cfg.ic, cfg.dt, cfg.steps, &LorenzParams::default())?;
    let meta = Provenance {
        ic: Some(cfg.ic),
        dt: Some(cfg.dt),
        eta: Some(cfg.eta),
        seed: Some(cfg.noise_seed),
    };
    let clean = measure_x(&traj, cfg.dt, meta.clone());

    std::fs::create_dir_all(&args.out_dir)?;
    let file = |suffix: &str| args.out_dir.join(format!("{}_{suffix}", args.prefix));
    let comments = vec![
        format!("config {hash}"),
        format!(
            "ic {},{},{} dt {} steps {} eta {} seed {}",
            format_f64(cfg.ic[0]),
            format_f64(cfg.ic[1]),
            format_f64(cfg.ic[2]),
            format_f64(cfg.dt),
            cfg.steps,
            format_f64(cfg.eta),
            cfg.noise_seed
        ),
    ];

    let traj_path = file("traj.csv");
    write_trajectory(&traj_path, &traj, cfg.dt, &comments)?;
    let clean_path = file("clean.csv");
    write_series(&clean_path, &clean, &comments)?;
    let mut written = vec![traj_path, clean_path];

    if cfg.eta > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
        let noisy = add_noise(&clean, cfg.eta, &mut rng);
        let noisy_path = file("noisy.csv");
        write_series(&noisy_path, &noisy, &comments)?;
        written.push(noisy_path);
    }

    let meta_json = serde_json::json!({
        "config_hash": hash,
        "ic": cfg.ic,
        "dt": cfg.dt,
        "steps": cfg.steps,
        "eta": cfg.eta,
        "noise_seed": cfg.noise_seed,
    });
    let meta_path = file("meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta_json)?)?;
    written.push(meta_path);

    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn cmd_train(mut cfg: ExperimentConfig, args: TrainArgs) -> Result<()> {
    if let Some(p) = args.data {
        cfg.data_path = Some(p);
    }
    if let Some(p) = args.checkpoint {
        cfg.checkpoint_path = Some(p);
    }
    if let Some(p) = args.metrics {
        cfg.metrics_path = Some(p);
    }
    if let Some(s) = args.segments {
        cfg.segments = s;
    }
    if let Some(n) = args.phase1_iters {
        cfg.phase1_iters = n;
    }
    if let Some(n) = args.phase2_iters {
        cfg.phase2_iters = n;
    }
    if let Some(mode) = &args.mode {
        cfg.mode = match mode.as_str() {
            "delay" => Phase::Delay,
            "autoencoder" => Phase::Autoencoder,
            other => return Err(Error::Usage(format!("unknown mode {other:?}"))),
        };
    }
    if let Some(eta) = args.eta {
        cfg.eta = eta;
    }
    cfg.validate()?;
    let hash = config_hash(&cfg);

    let noisy = load_or_synthesize(&cfg)?;
    let (scaled, record) = rescale(&noisy, cfg.train_end)?;
    let data = split_and_segment(&scaled, cfg.segments, cfg.m, cfg.tau, cfg.train_end, cfg.val_end)?;
    let opt = cfg.train_options();

    let ckpt_path =
        cfg.checkpoint_path.clone().unwrap_or_else(|| PathBuf::from("lode-checkpoint.json"));
    let metrics_path = cfg.metrics_path.clone().unwrap_or_else(|| PathBuf::from("metrics.csv"));

    let resume = if args.resume { Some(read_checkpoint(&ckpt_path)?) } else { None };
    let mut metrics_file = if args.resume {
        std::fs::OpenOptions::new().append(true).create(true).open(&metrics_path)?
    } else {
        let mut f = File::create(&metrics_path)?;
        writeln!(f, "# config {hash}")?;
        writeln!(f, "{METRICS_HEADER}")?;
        f
    };

    println!("training: S={} segments, {} + {} segment updates", cfg.segments, cfg.phase1_iters, cfg.phase2_iters);
    let result = run_schedule(&data, cfg.dt, &opt, resume, Some(&ckpt_path), |em| {
        writeln!(metrics_file, "{}", metrics_csv_row(em))?;
        if let Some(v) = em.val_nmse {
            println!(
                "epoch {:>4}  L_fit {:.5}  L_rec {:.5}  L_ode {:.5}  d {}  val {:.5}",
                em.epoch, em.l_fit, em.l_rec, em.l_ode, em.d, v
            );
        }
        Ok(())
    })?;
    metrics_file.flush()?;

    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        config_hash: hash.clone(),
        scaling: record,
        config: cfg.clone(),
        data_path: cfg.data_path.clone(),
    };
    write_manifest(&manifest_path(&ckpt_path), &manifest)?;

    println!(
        "done: d={}, best val NMSE {}, checkpoint {}, metrics {}",
        result.state.bundle.mask.d,
        result.best_val.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into()),
        ckpt_path.display(),
        metrics_path.display()
    );
    Ok(())
}

/// The training series: an explicit file, or the config's synthetic Lorenz
/// measurement protocol.
fn load_or_synthesize(cfg: &ExperimentConfig) -> Result<TimeSeries> {
    match &cfg.data_path {
        Some(p) => read_series(p),
        None => {
            let traj = integrate_lorenz(cfg.ic, cfg.dt, cfg.steps, &LorenzParams::default())?;
            let meta = Provenance {
                ic: Some(cfg.ic),
                dt: Some(cfg.dt),
                eta: Some(cfg.eta),
                seed: Some(cfg.noise_seed),
            };
            let clean = measure_x(&traj, cfg.dt, meta);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
            Ok(add_noise(&clean, cfg.eta, &mut rng))
        }
    }
}

/// Deployment bundle: the best-validation snapshot when one was recorded,
/// else the final state.
fn deployed(state: lode_core::training::TrainerState) -> (TrainBundle, Phase, usize) {
    let epoch = state.epoch;
    let phase = state.best_phase.unwrap_or(Phase::Autoencoder);
    match state.best_bundle {
        Some(b) => (b, phase, epoch),
        None => (state.bundle, phase, epoch),
    }
}

// ---------------------------------------------------------------------------
// forecast

fn cmd_forecast(args: ForecastArgs) -> Result<()> {
    let state = read_checkpoint(&args.checkpoint)?;
    let manifest = read_manifest(&args.checkpoint)?;
    let cfg = &manifest.config;
    let opt = cfg.train_options();
    let (bundle, phase, _) = deployed(state);

    let series = match &args.data {
        Some(p) => read_series(p)?,
        None => match &manifest.data_path {
            Some(p) => read_series(p)?,
            None => load_or_synthesize(cfg)?,
        },
    };
    let scaling = manifest.scaling;

    // Window around t0, in scaled units, for the state refit.
    let lo = args.t0 - args.window - 1e-9;
    let hi = args.t0 + args.window + 1e-9;
    let mut w_times = Vec::new();
    let mut w_vals = Vec::new();
    for (&t, &v) in series.times.iter().zip(&series.values) {
        if t >= lo && t <= hi {
            w_times.push(t);
            w_vals.push(scaling.apply(v));
        }
    }
    if w_times.is_empty() {
        return Err(Error::Usage(format!(
            "no samples within {} of t0 = {}",
            args.window, args.t0
        )));
    }
    let window = Segment { times: w_times, values: w_vals };
    let (u0, _) =
        infer_initial_state(&window, args.t0, &bundle, phase, &opt, cfg.infer_iters, args.seed)?;

    let states = forecast(&bundle.theta_f, &bundle.mask.w, &u0, cfg.dt, args.steps)?;
    let preds = measure(&states[1..], measure_mode(phase), Some(&bundle.theta_d))?;

    let mut f = File::create(&args.out)?;
    writeln!(f, "# config {}", manifest.config_hash)?;
    writeln!(
        f,
        "# forecast t0 {} steps {} window {} seed {}",
        format_f64(args.t0),
        args.steps,
        format_f64(args.window),
        args.seed
    )?;
    writeln!(f, "time,value")?;
    for (k, p) in preds.iter().enumerate() {
        let t = args.t0 + (k + 1) as f64 * cfg.dt;
        writeln!(f, "{},{}", format_f64(t), format_f64(scaling.invert(*p)))?;
    }
    println!("wrote {} ({} rows)", args.out.display(), preds.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// fnn-scan

fn cmd_fnn_scan(cfg: ExperimentConfig, args: FnnScanArgs) -> Result<()> {
    let series = read_series(&args.series)?;
    let m = args.m.unwrap_or(cfg.m);
    let tau = args.tau.unwrap_or(cfg.tau);
    if series.len() < 2 {
        return Err(Error::Usage("series has fewer than 2 samples".into()));
    }
    let dt = series.times[1] - series.times[0];
    for w in series.times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 {
            return Err(Error::Usage("the scan needs a uniformly sampled series".into()));
        }
    }
    let lag_f = tau / dt;
    let lag = lag_f.round();
    if lag < 1.0 || (lag_f - lag).abs() > 1e-6 {
        return Err(Error::Usage(format!(
            "tau {} is not a positive multiple of the sampling step {}",
            format_f64(tau),
            format_f64(dt)
        )));
    }
    let batch = delay_rows(&series.values, m, lag as usize, args.samples)?;
    let gamma = fnn_fractions(&batch, args.samples, m, &cfg.thresholds())?;

    let hash = config_hash(&cfg);
    let mut out = format!(
        "# config {hash}\n# series {} m {m} tau {} samples {}\ndimension,gamma\n",
        args.series.display(),
        format_f64(tau),
        args.samples
    );
    for (i, g) in gamma.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, format_f64(*g)));
    }
    match &args.out {
        Some(p) => {
            std::fs::write(p, out)?;
            println!("wrote {}", p.display());
        }
        None => print!("{out}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let clean = read_series(&args.clean)?;
    let mut filter_rows = Vec::new();
    let mut horizon_rows = Vec::new();
    let mut header = String::new();

    for case in &args.cases {
        let state = read_checkpoint(&case.checkpoint)?;
        let manifest = read_manifest(&case.checkpoint)?;
        let cfg = &manifest.config;
        let opt = cfg.train_options();
        let (bundle, phase, _) = deployed(state);

        let noisy = read_series(&case.data)?;
        let (scaled, record) = rescale(&noisy, cfg.train_end)?;
        let drift = (record.shift - manifest.scaling.shift)
            .abs()
            .max((record.scale - manifest.scaling.scale).abs());
        if drift > 1e-9 * manifest.scaling.scale.abs() {
            return Err(Error::Config(format!(
                "case {:?}: the data rescales to shift {}, scale {} but the checkpoint was \
                 trained with shift {}, scale {} — wrong series for this checkpoint?",
                case.label,
                format_f64(record.shift),
                format_f64(record.scale),
                format_f64(manifest.scaling.shift),
                format_f64(manifest.scaling.scale)
            )));
        }
        let data =
            split_and_segment(&scaled, cfg.segments, cfg.m, cfg.tau, cfg.train_end, cfg.val_end)?;

        let (times, fit_scaled) = fit_series(&bundle, &data, &opt.delay, cfg.dt)?;
        let n = times.len();
        if clean.len() < n {
            return Err(Error::Usage(format!(
                "clean series has {} samples but the training split needs {n}",
                clean.len()
            )));
        }
        let fit: Vec<f64> = fit_scaled.iter().map(|&v| record.invert(v)).collect();
        let decoded = if matches!(phase, Phase::Autoencoder) {
            let (_, dec) = decoded_series(&bundle, &data, &opt.delay, cfg.dt)?;
            Some(dec.iter().map(|&v| record.invert(v)).collect::<Vec<f64>>())
        } else {
            None
        };
        let row = filtering_report(
            &clean.values[..n],
            &noisy.values[..n],
            &fit,
            decoded.as_deref(),
        )?;
        filter_rows.push((case.label.clone(), row));

        // Forecast from the training-set end against the clean continuation.
        let last = data.segments.len() - 1;
        let seg = &data.segments[last];
        let t_end = *seg.times.last().unwrap();
        let i_end = (t_end / cfg.dt).round() as usize;
        let avail = clean.len().saturating_sub(i_end + 1).min(args.steps);
        let u0 = state_at(&bundle, phase, seg, last, t_end, &opt.delay)?;
        let horizon = match forecast(&bundle.theta_f, &bundle.mask.w, &u0, cfg.dt, avail) {
            Ok(states) => {
                let pred_scaled = measure(&states[1..], measure_mode(phase), Some(&bundle.theta_d))?;
                let pred: Vec<f64> = pred_scaled.iter().map(|&v| record.invert(v)).collect();
                let truth = &clean.values[i_end + 1..i_end + 1 + avail];
                forecast_horizon(truth, &pred, cfg.dt, cfg.horizon_tol)
            }
            Err(_) => 0.0,
        };
        horizon_rows.push((case.label.clone(), horizon));
        header.push_str(&format!("# case {} config {}\n", case.label, manifest.config_hash));
    }

    let filter_report = format!("{header}{}", filter_csv(&filter_rows));
    print!("{}", filter_table(&filter_rows));
    println!("{:<12} {:>12}", "case", "horizon");
    for (label, h) in &horizon_rows {
        println!("{label:<12} {h:>12.3}");
    }
    if let Some(p) = &args.out {
        std::fs::write(p, &filter_report)?;
        println!("wrote {}", p.display());
    }
    if let Some(p) = &args.horizon_out {
        let mut out = format!("{header}label,horizon\n");
        for (label, h) in &horizon_rows {
            out.push_str(&format!("{label},{}\n", format_f64(*h)));
        }
        std::fs::write(p, out)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}
