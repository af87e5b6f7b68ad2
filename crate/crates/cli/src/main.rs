//! `gazelabel` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gazelabel::annotate::FrameLabels;
use gazelabel::audio::WindowFunction;
use gazelabel::eval::{confusion, merge_zones_7, ConfusionMatrix, Metrics};
use gazelabel::illum::{
    chromaticity, decompose, export_kernel, init_kernel, ChromaticityParams, KernelInitSpec,
    RadiationConstants, Validation,
};
use gazelabel::pipeline::{
    annotate_dataset, refine_dataset, BackendChoice, PipelineConfig, STT_COMMAND_ENV,
};
use gazelabel::sessions::{load_dataset, split_subjects, Partition};
use gazelabel::synth::{write_dataset, SynthDatasetSpec};
use serde::Serialize;

const EXIT_SESSION_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "gazelabel",
    version,
    about = "Per-frame gaze-zone labels from speech-marked recordings"
)]
struct Cli {
    /// Log more (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Transcribe, align, rectify and emit frame labels for every session.
    Annotate(AnnotateArgs),
    /// Reassign transition frames by embedding clusters and propagate labels over blinks.
    Refine(RefineArgs),
    /// Generate a synthetic dataset with ground truth.
    Synth(SynthArgs),
    /// Subject-disjoint train/val/test split.
    Split(SplitArgs),
    /// Accuracy, macro-F1 and confusion matrix of predicted against true labels.
    Eval(EvalArgs),
    /// Skin chromaticity model and kernel initialisation.
    #[command(subcommand)]
    Illum(IllumCommand),
}

#[derive(Args)]
struct Common {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Pipeline config (JSON); flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sessions processed in parallel; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct AnnotateArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for `<session>.labels.csv`, `<session>.timeline.json` and the report.
    #[arg(long)]
    out: PathBuf,
    /// Analysis window length in seconds. [default: 0.25]
    #[arg(long)]
    window_s: Option<f64>,
    /// Hop between analysis windows in seconds. [default: 0.10]
    #[arg(long)]
    hop_s: Option<f64>,
    /// Lower edge of the voice band in Hz (speech range 300-3000 Hz). [default: 300]
    #[arg(long)]
    band_lo_hz: Option<f64>,
    /// Upper edge of the voice band in Hz. [default: 3000]
    #[arg(long)]
    band_hi_hz: Option<f64>,
    /// Minimum share of spectral energy inside the voice band. [default: 0.5]
    #[arg(long)]
    ratio_threshold: Option<f64>,
    /// Analysis taper: hann or rectangular. [default: hann]
    #[arg(long)]
    window_fn: Option<WindowFunction>,
    /// Frames added before and after each utterance. [default: 10]
    #[arg(long)]
    offset_frames: Option<usize>,
    /// Minimum token confidence, after the 0.9 alias penalty. [default: 0.5]
    #[arg(long)]
    min_confidence: Option<f64>,
    /// Accept only the canonical words "one".."nine", no homophones.
    #[arg(long)]
    no_aliases: bool,
    /// Transcript source: auto, sidecar, external or tone-spotter. [default: auto]
    #[arg(long)]
    backend: Option<BackendChoice>,
    /// External speech-to-text program, called as `<cmd> [args] <wav>`.
    #[arg(long, env = STT_COMMAND_ENV)]
    stt_command: Option<PathBuf>,
    /// Seconds before the external program is killed. [default: 120]
    #[arg(long)]
    stt_timeout_s: Option<f64>,
}

#[derive(Args)]
struct RefineArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding `<session>.labels.csv` from `annotate`.
    #[arg(long)]
    labels: PathBuf,
    /// Output directory for refined label files and `refine_report.json`.
    #[arg(long)]
    out: PathBuf,
    /// Number of clusters (one per gaze zone). [default: 9]
    #[arg(long)]
    k: Option<usize>,
    /// Seed for k-means++ initialisation. [default: 42]
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum Lloyd iterations. [default: 300]
    #[arg(long)]
    max_iters: Option<usize>,
    /// Frames on each side of a label boundary treated as transition frames. [default: 10]
    #[arg(long)]
    transition_halfwidth: Option<usize>,
    /// Fit one clustering over all sessions instead of one per session.
    #[arg(long)]
    corpus_wide: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset spec (JSON); built-in defaults when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory; receives audio, transcripts, truth files and `manifest.json`.
    #[arg(long)]
    out: PathBuf,
    /// Number of sessions. [default: 4]
    #[arg(long)]
    sessions: Option<usize>,
    /// Base seed; session i uses seed + i. [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Probability of dropping a token. [default: 0]
    #[arg(long)]
    miss_rate: Option<f64>,
    /// Probability of replacing a token with a non-keyword. [default: 0]
    #[arg(long)]
    substitute_rate: Option<f64>,
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.60, 0.245, 0.155])]
    fractions: Vec<f64>,
    /// Shuffle seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write the split here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth label CSV, or a directory of `<session>.truth.csv` / `<session>.labels.csv`.
    #[arg(long)]
    truth: PathBuf,
    /// Predicted label CSV, or a directory of `<session>.labels.csv`.
    #[arg(long)]
    pred: PathBuf,
    /// Score in the 7-zone scheme: zones 1+2 and 5+6 merged.
    #[arg(long)]
    merge7: bool,
    /// Zones in the label files.
    #[arg(long, default_value_t = 9)]
    n_zones: u8,
    /// Print the metrics as JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Also write the metrics JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum IllumCommand {
    /// Print chromaticity c and its parts A and B as JSON.
    Dump(DumpArgs),
    /// Initialise a kernel and export it in the binary matrix format.
    Kernel(KernelArgs),
}

#[derive(Args)]
struct ParamArgs {
    /// Chromaticity parameters (JSON); defaults when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Colour temperature in kelvin. [default: 5000]
    #[arg(long)]
    t_kelvin: Option<f64>,
    /// Channel wavelengths in nm, red,green,blue. [default: 685,532.5,472.5]
    #[arg(long, value_delimiter = ',')]
    lambda_nm: Option<Vec<f64>>,
    /// Allow equal wavelengths and wavelengths outside their colour band.
    #[arg(long)]
    relaxed: bool,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    params: ParamArgs,
}

#[derive(Args)]
struct KernelArgs {
    #[command(flatten)]
    params: ParamArgs,
    /// Kernel spec (JSON); defaults when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
    /// Output channels. [default: 1]
    #[arg(long)]
    out_channels: Option<usize>,
    /// Kernel height. [default: 3]
    #[arg(long)]
    height: Option<usize>,
    /// Kernel width. [default: 3]
    #[arg(long)]
    width: Option<usize>,
    /// Mean of the sampled colour temperature in kelvin. [default: 5000]
    #[arg(long)]
    t_mean: Option<f64>,
    /// Standard deviation of the sampled temperature. [default: 500]
    #[arg(long)]
    t_std: Option<f64>,
    /// Sampling seed. [default: 42]
    #[arg(long)]
    seed: Option<u64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn base_config(path: Option<&Path>) -> anyhow::Result<PipelineConfig> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    })
}

fn annotate(args: AnnotateArgs) -> anyhow::Result<u8> {
    let mut config = base_config(args.common.config.as_deref())?;
    set(&mut config.voice.window_s, args.window_s);
    set(&mut config.voice.hop_s, args.hop_s);
    set(&mut config.voice.band_lo_hz, args.band_lo_hz);
    set(&mut config.voice.band_hi_hz, args.band_hi_hz);
    set(&mut config.voice.ratio_threshold, args.ratio_threshold);
    set(&mut config.voice.window_fn, args.window_fn);
    set(&mut config.offset_frames, args.offset_frames);
    set(&mut config.min_confidence, args.min_confidence);
    set(&mut config.backend, args.backend);
    set(&mut config.stt_timeout_s, args.stt_timeout_s);
    if args.stt_command.is_some() {
        config.stt_command = args.stt_command;
    }
    if args.no_aliases {
        config.aliases = false;
    }
    config.validate()?;
    let sessions = load_dataset(&args.common.manifest)?;
    let report = annotate_dataset(&sessions, &config, &args.out, args.common.jobs)?;
    for s in &report.sessions {
        match &s.error {
            None => println!(
                "{}: {} detected, {} recovered, {} unresolved, {} frames labeled",
                s.session_id,
                s.detected,
                s.recovered.len(),
                s.unresolved.len(),
                s.labeled_frames
            ),
            Some(e) => println!("{}: FAILED: {e}", s.session_id),
        }
    }
    Ok(if report.failed() > 0 {
        EXIT_SESSION_FAILED
    } else {
        0
    })
}

fn refine(args: RefineArgs) -> anyhow::Result<u8> {
    let mut config = base_config(args.common.config.as_deref())?;
    set(&mut config.k, args.k);
    set(&mut config.seed, args.seed);
    set(&mut config.max_iters, args.max_iters);
    set(&mut config.transition_halfwidth, args.transition_halfwidth);
    if args.corpus_wide {
        config.corpus_wide = true;
    }
    config.validate()?;
    let sessions = load_dataset(&args.common.manifest)?;
    let report = refine_dataset(
        &sessions,
        &args.labels,
        &config,
        &args.out,
        args.common.jobs,
    )?;
    for s in &report.sessions {
        match (&s.report, &s.error) {
            (Some(r), _) => println!(
                "{}: {} transition frames, {} changed, {} propagated over blinks",
                s.session_id, r.transition_frames, r.changed_frames, r.propagated_frames
            ),
            (None, e) => println!("{}: FAILED: {}", s.session_id, e.as_deref().unwrap_or("")),
        }
    }
    Ok(if report.failed() > 0 {
        EXIT_SESSION_FAILED
    } else {
        0
    })
}

fn synth(args: SynthArgs) -> anyhow::Result<u8> {
    let mut spec: SynthDatasetSpec = match &args.spec {
        Some(p) => read_json(p)?,
        None => SynthDatasetSpec::default(),
    };
    set(&mut spec.n_sessions, args.sessions);
    set(&mut spec.session.seed, args.seed);
    set(&mut spec.session.corruption.miss_rate, args.miss_rate);
    set(
        &mut spec.session.corruption.substitute_rate,
        args.substitute_rate,
    );
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let manifest = write_dataset(&args.out, &spec)?;
    println!("{}", manifest.display());
    Ok(0)
}

#[derive(Serialize)]
struct SplitOutput {
    seed: u64,
    fractions: [f64; 3],
    subjects: std::collections::BTreeMap<Partition, usize>,
    sessions: std::collections::BTreeMap<Partition, usize>,
    assignment: gazelabel::sessions::DatasetSplit,
}

fn split(args: SplitArgs) -> anyhow::Result<u8> {
    let [ft, fv, fs] = args.fractions[..] else {
        bail!(gazelabel::Error::Argument(
            "--fractions takes three values".into()
        ));
    };
    let sessions = load_dataset(&args.manifest)?;
    let split = split_subjects(&sessions, (ft, fv, fs), args.seed)?;
    let out = SplitOutput {
        seed: args.seed,
        fractions: [ft, fv, fs],
        subjects: split.counts(),
        sessions: split.session_counts(&sessions),
        assignment: split,
    };
    match &args.out {
        Some(p) => gazelabel::fsio::write_json_atomic(p, &out)?,
        None => println!("{}", serde_json::to_string_pretty(&out)?),
    }
    Ok(0)
}

const EVAL_FPS: f64 = 30.0;

/// Pairs of (truth, prediction) files to score.
fn eval_pairs(truth: &Path, pred: &Path) -> anyhow::Result<Vec<(PathBuf, PathBuf)>> {
    if !pred.is_dir() {
        return Ok(vec![(truth.to_path_buf(), pred.to_path_buf())]);
    }
    if !truth.is_dir() {
        bail!(gazelabel::Error::Argument(
            "--pred is a directory, so --truth must be one too".into()
        ));
    }
    let mut names: Vec<String> = std::fs::read_dir(pred)
        .with_context(|| format!("listing {}", pred.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".labels.csv"))
        .collect();
    names.sort();
    let mut pairs = Vec::new();
    for name in names {
        let id = name.trim_end_matches(".labels.csv");
        let candidates = [truth.join(format!("{id}.truth.csv")), truth.join(&name)];
        let Some(t) = candidates.into_iter().find(|p| p.exists()) else {
            bail!("no ground truth for session {id} in {}", truth.display());
        };
        pairs.push((t, pred.join(&name)));
    }
    if pairs.is_empty() {
        bail!("no *.labels.csv files in {}", pred.display());
    }
    Ok(pairs)
}

fn eval(args: EvalArgs) -> anyhow::Result<u8> {
    let mut total: Option<ConfusionMatrix> = None;
    for (t, p) in eval_pairs(&args.truth, &args.pred)? {
        let mut truth = FrameLabels::read_csv(&t, EVAL_FPS, args.n_zones)?;
        let mut pred = FrameLabels::read_csv(&p, EVAL_FPS, args.n_zones)?;
        if args.merge7 {
            truth = merge_zones_7(&truth)?;
            pred = merge_zones_7(&pred)?;
        }
        let cm = confusion(&truth, &pred).with_context(|| format!("comparing {}", p.display()))?;
        match &mut total {
            Some(acc) => acc.absorb(&cm)?,
            None => total = Some(cm),
        }
    }
    let metrics = Metrics::from_confusion(&total.expect("at least one pair"))?;
    if let Some(p) = &args.out {
        gazelabel::fsio::write_json_atomic(p, &metrics)?;
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&metrics)?);
    } else {
        print!("{metrics}");
    }
    Ok(0)
}

fn chroma_params(args: &ParamArgs) -> anyhow::Result<(ChromaticityParams, Validation)> {
    let mut params: ChromaticityParams = match &args.params {
        Some(p) => read_json(p)?,
        None => ChromaticityParams::default(),
    };
    set(&mut params.t_kelvin, args.t_kelvin);
    if let Some(l) = &args.lambda_nm {
        let [r, g, b] = l[..] else {
            bail!(gazelabel::Error::Argument(
                "--lambda-nm takes three values".into()
            ));
        };
        params.lambda_nm = [r, g, b];
    }
    let validation = if args.relaxed {
        Validation::Relaxed
    } else {
        Validation::Strict
    };
    Ok((params, validation))
}

#[derive(Serialize)]
struct Dump {
    params: ChromaticityParams,
    k2: f64,
    c: [f64; 3],
    a: [f64; 3],
    b: [f64; 3],
}

fn illum(cmd: IllumCommand) -> anyhow::Result<u8> {
    let constants = RadiationConstants::DEFAULT;
    match cmd {
        IllumCommand::Dump(args) => {
            let (params, validation) = chroma_params(&args.params)?;
            let c = chromaticity(&params, &constants, validation)?;
            let d = decompose(&params, &constants, validation)?;
            let dump = Dump {
                params,
                k2: constants.k2(),
                c,
                a: d.a,
                b: d.b,
            };
            println!("{}", serde_json::to_string_pretty(&dump)?);
        }
        IllumCommand::Kernel(args) => {
            let (params, validation) = chroma_params(&args.params)?;
            decompose(&params, &constants, validation)?;
            let mut spec: KernelInitSpec = match &args.spec {
                Some(p) => read_json(p)?,
                None => KernelInitSpec::default(),
            };
            set(&mut spec.out_channels, args.out_channels);
            set(&mut spec.height, args.height);
            set(&mut spec.width, args.width);
            set(&mut spec.t_mean, args.t_mean);
            set(&mut spec.t_std, args.t_std);
            set(&mut spec.seed, args.seed);
            let kernel = init_kernel(&spec, &params, &constants)?;
            export_kernel(&kernel, &args.out)?;
            println!("{} {:?}", args.out.display(), kernel.shape);
        }
    }
    Ok(0)
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Annotate(a) => annotate(a),
        Command::Refine(a) => refine(a),
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Eval(a) => eval(a),
        Command::Illum(c) => illum(c),
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<gazelabel::Error>() {
        Some(gazelabel::Error::Argument(_)) => EXIT_USAGE,
        _ => EXIT_SESSION_FAILED,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
