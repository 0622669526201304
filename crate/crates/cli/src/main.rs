//! `specfuse`: command-line front end for fusion, guidance export, the
//! synthetic benchmark, detection evaluation and the built-in checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric-invariant
//! violation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use specfuse_core::fgsa::{deformable_sample, identity_w_k, OffsetField};
use specfuse_core::pipeline::{self, ExternalFeatures, ModelParams};
use specfuse_core::selftest::{self, Fault};
use specfuse_core::synth::{self, SynthConfig, Texture};
use specfuse_core::{backbone, eval, gradcheck, io, Config, Error, GradOp, ParamStore};

#[derive(Debug, Parser)]
#[command(name = "specfuse", version, about = "Frequency-guided RGB-thermal feature alignment and fusion")]
struct Cli {
    /// Worker threads for internal parallelism (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the full pipeline and export fused features, guidance and timing.
    Fuse(FuseArgs),
    /// Run the pipeline and export only the guidance maps.
    Guidance(FuseArgs),
    /// Write a synthetic misaligned pair with ground truth.
    Bench(BenchArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradArgs),
    /// Run the embedded invariant suite.
    Selftest(SelftestArgs),
    /// Write the deterministic default weights as a manifest.
    InitWeights(InitArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct FuseArgs {
    /// 8-bit three-channel RGB PNG.
    #[arg(long)]
    rgb: PathBuf,

    /// 8- or 16-bit single-channel thermal PNG/PGM.
    #[arg(long)]
    thermal: PathBuf,

    /// Weight manifest; the built-in initialization is used when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,

    /// Precomputed backbone features (manifest with `rgb.{s}`/`thermal.{s}`).
    #[arg(long)]
    features_in: Option<PathBuf>,

    #[command(flatten)]
    config: ConfigArgs,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Thermal displacement `dx,dy` in pixels.
    #[arg(long, default_value = "2,0", value_parser = parse_pair)]
    shift: (f64, f64),

    #[arg(long, default_value_t = 1.0)]
    gain: f64,

    #[arg(long, default_value_t = 0.0)]
    noise: f64,

    /// Image size `HxW`.
    #[arg(long, default_value = "128x128", value_parser = parse_size)]
    size: (usize, usize),

    #[arg(long, default_value = "perlin-like", value_parser = parse_texture)]
    texture: Texture,

    #[arg(long, default_value_t = 3)]
    targets: usize,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    dets: PathBuf,

    #[arg(long)]
    gt: PathBuf,
}

#[derive(Debug, Args)]
struct GradArgs {
    /// Operator to check, or `all`.
    #[arg(long, default_value = "all")]
    op: String,

    #[arg(long, default_value_t = gradcheck::DEFAULT_POINTS)]
    points: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
    eps: f64,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    /// Deliberately break an invariant to exercise the suite.
    #[arg(long, hide = true, value_parser = parse_fault)]
    inject_fault: Option<Fault>,
}

#[derive(Debug, Args)]
struct InitArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[command(flatten)]
    config: ConfigArgs,

    #[arg(long)]
    out: PathBuf,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected `dx,dy`")?;
    Ok((
        a.trim().parse().map_err(|_| format!("bad number `{a}`"))?,
        b.trim().parse().map_err(|_| format!("bad number `{b}`"))?,
    ))
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected `HxW`")?;
    Ok((
        h.trim().parse().map_err(|_| format!("bad height `{h}`"))?,
        w.trim().parse().map_err(|_| format!("bad width `{w}`"))?,
    ))
}

fn parse_texture(s: &str) -> Result<Texture, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_fault(s: &str) -> Result<Fault, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Core(Error),
    /// Checks ran but reported violations; details already printed.
    Invariant(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(e) if e.is_numeric() => 3,
            Failure::Core(_) => 2,
            Failure::Invariant(_) => 3,
        }
    }
}

type CliResult = Result<(), Failure>;

fn effective_config(args: &ConfigArgs) -> Result<Config, Failure> {
    let mut config = match &args.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        config.set(k, v).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(config)
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source }.into())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source }.into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    write_text(path, &(to_json(value) + "\n"))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize")
}

fn load_inputs(args: &FuseArgs) -> Result<(specfuse_core::FeatureMap, specfuse_core::FeatureMap), Failure> {
    let hint = |e: Error| match e {
        Error::Format(msg) => Error::Format(format!("{msg} (inputs are registered pairs, 640x512 by default)")),
        other => other,
    };
    let rgb = io::load_rgb(&args.rgb).map_err(hint)?;
    let thermal = io::load_thermal(&args.thermal).map_err(hint)?;
    Ok((rgb, thermal))
}

fn run_pipeline(args: &FuseArgs) -> Result<(Config, pipeline::FusionResult), Failure> {
    let config = effective_config(&args.config)?;
    let (rgb, thermal) = load_inputs(args)?;
    let params = match &args.weights {
        Some(path) => ModelParams::from_store(&ParamStore::load(path)?, &config)?,
        None => {
            eprintln!("no --weights given; using the built-in initialization (seed 0)");
            pipeline::default_params(&config, 0)?
        }
    };
    let external = args
        .features_in
        .as_deref()
        .map(|p| ExternalFeatures::load(p, config.scales))
        .transpose()?;
    let result = pipeline::run_with_features(&rgb, &thermal, &params, &config, external.as_ref())?;
    Ok((config, result))
}

fn print_timing(result: &pipeline::FusionResult) {
    for stage in pipeline::STAGES {
        if let Some(ms) = result.timing.stages_ms.get(stage) {
            println!("{stage:>9}: {ms:10.1} ms");
        }
    }
}

fn fuse(args: FuseArgs) -> CliResult {
    let (config, result) = run_pipeline(&args)?;
    pipeline::export(&result, &args.out)?;
    write_text(&args.out.join("config.txt"), &config.to_text())?;
    print_timing(&result);
    println!("wrote {} scales to {}", result.fused.len(), args.out.display());
    Ok(())
}

fn guidance(args: FuseArgs) -> CliResult {
    let (config, result) = run_pipeline(&args)?;
    create_dir(&args.out)?;
    for (s, g) in result.guidance.iter().enumerate() {
        pipeline::write_guidance_pngs(g, s, &args.out)?;
    }
    pipeline::write_guidance_summary(&result.guidance, &args.out.join("guidance_summary.json"))?;
    write_text(&args.out.join("config.txt"), &config.to_text())?;
    println!("wrote guidance for {} scales to {}", result.guidance.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    config: SynthConfig,
    true_shift: (f64, f64),
    correlation_peak: (isize, isize),
    /// Interior mean absolute error between thermal and RGB luma.
    alignment_error_zero_offsets: f64,
    /// The same after resampling thermal with the true displacement.
    alignment_error_oracle_offsets: f64,
    boxes: Vec<eval::BBox>,
    contrasts: Vec<f64>,
}

fn bench(args: BenchArgs) -> CliResult {
    let cfg = SynthConfig {
        seed: args.seed,
        height: args.size.0,
        width: args.size.1,
        shift: args.shift,
        intensity_gain: args.gain,
        noise_sigma: args.noise,
        texture: args.texture,
        n_targets: args.targets,
        ..SynthConfig::default()
    };
    let pair = synth::generate_pair(&cfg).map_err(|e| match e {
        Error::Config(msg) => Failure::Usage(msg),
        other => Failure::Core(other),
    })?;
    create_dir(&args.out)?;
    io::save_rgb8(&pair.rgb, &args.out.join("rgb.png"))?;
    io::save_gray16(&pair.thermal, &args.out.join("thermal.png"))?;

    let luma = backbone::luma(&pair.rgb)?;
    let (h, w) = (cfg.height, cfg.width);
    let margin = (cfg.shift.0.abs().max(cfg.shift.1.abs()).ceil() as usize + 2).min(h.min(w) / 2 - 1);
    let mask = synth::interior_mask(h, w, margin);
    let w_k = identity_w_k(9, 1)?;
    let oracle = deformable_sample(&pair.thermal, &OffsetField::uniform(h, w, 9, cfg.shift.0 as f32, cfg.shift.1 as f32), &w_k)?;
    let max_lag = (cfg.shift.0.abs().max(cfg.shift.1.abs()).ceil() as usize + 2).min(h.min(w) / 2 - 1);
    let report = BenchReport {
        true_shift: pair.shift,
        correlation_peak: synth::correlation_peak(&luma, &pair.thermal, max_lag)?,
        alignment_error_zero_offsets: synth::alignment_error(&pair.thermal, &luma, &mask)?,
        alignment_error_oracle_offsets: synth::alignment_error(&oracle, &luma, &mask)?,
        boxes: pair.boxes.clone(),
        contrasts: pair.contrasts.clone(),
        config: cfg,
    };
    let gt: Vec<eval::GroundTruth> = pair
        .boxes
        .iter()
        .map(|&bbox| eval::GroundTruth { image_id: format!("seed{}", args.seed), bbox })
        .collect();
    write_json(&args.out.join("gt.json"), &gt)?;
    write_json(&args.out.join("report.json"), &report)?;
    println!("{}", to_json(&report));
    Ok(())
}

fn evaluate(args: EvalArgs) -> CliResult {
    let dets = eval::load_detections(&args.dets)?;
    let gts = eval::load_ground_truth(&args.gt)?;
    println!("{}", to_json(&eval::ap_range(&dets, &gts)?));
    Ok(())
}

fn gradcheck_cmd(args: GradArgs) -> CliResult {
    let ops: Vec<GradOp> = if args.op == "all" {
        GradOp::ALL.to_vec()
    } else {
        vec![args.op.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?]
    };
    if args.points == 0 || !(args.eps > 0.0 && args.eps < 0.1) {
        return Err(Failure::Usage("--points must be positive and --eps in (0, 0.1)".into()));
    }
    let reports = ops
        .iter()
        .enumerate()
        .map(|(i, &op)| gradcheck::check_gradient(op, args.points, args.seed.wrapping_add(i as u64), args.eps))
        .collect::<Result<Vec<_>, _>>()?;
    println!("{}", to_json(&reports));
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.op.name()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn selftest_cmd(args: SelftestArgs) -> CliResult {
    let report = selftest::run(args.inject_fault);
    println!("{}", to_json(&report));
    if report.all_passed() {
        return Ok(());
    }
    let names: Vec<_> = report.failures().map(|c| c.name.as_str()).collect();
    Err(Failure::Invariant(format!("failing invariants: {}", names.join(", "))))
}

fn init_weights(args: InitArgs) -> CliResult {
    let config = effective_config(&args.config)?;
    let store = pipeline::default_params(&config, args.seed)?.to_store(&config)?;
    create_dir(&args.out)?;
    let manifest = store.save(&args.out, "weights")?;
    write_text(&args.out.join("config.txt"), &config.to_text())?;
    println!("{}", manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: cannot start worker pool: {e}");
        return ExitCode::from(2);
    }
    let outcome = match cli.command {
        Command::Fuse(a) => fuse(a),
        Command::Guidance(a) => guidance(a),
        Command::Bench(a) => bench(a),
        Command::Eval(a) => evaluate(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Selftest(a) => selftest_cmd(a),
        Command::InitWeights(a) => init_weights(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(msg) => eprintln!("error: {msg}\n\nRun `specfuse --help` for usage."),
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Invariant(msg) => eprintln!("error: {msg}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
