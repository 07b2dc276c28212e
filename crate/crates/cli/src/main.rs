//! `ecaformer`: dataset synthesis, training, enhancement, evaluation and
//! self-verification for the dual cross-attention enhancer.
//!
//! Exit codes: 0 success, 1 I/O or runtime failure, 2 argument error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use ecaformer::attention::AttentionKind;
use ecaformer::checkpoint::Checkpoint;
use ecaformer::data::{
    build_synth_dataset, load_dataset, load_image, save_image, DegradeParams, PairManifest,
};
use ecaformer::network::{Model, ModelConfig};
use ecaformer::objectives::{psnr, ssim, LossWeights};
use ecaformer::training::{
    resume_from, train, Schedule, TrainOptions, TrainState, CHECKPOINT_FILE, LOG_FILE,
};
use ecaformer::verify::{run_all, VerifyOptions};
use ecaformer::Tensor;

/// Environment variable consulted for the seed when neither a flag nor the
/// config file sets one.
const SEED_ENV: &str = "ECAF_SEED";
/// Analytic gradients are scaled by this under `--plant-grad-bug`.
const PLANTED_GRAD_SCALE: f64 = 1.01;

const DEFAULTS_NOTE: &str =
    "Defaults are desk scale (minutes on one CPU core). Full-scale values are listed next \
to each flag where they differ; pass them explicitly for a full-scale run.";

#[derive(Parser, Debug)]
#[command(name = "ecaformer", version, about = "Low-light image enhancement with dual cross-attention", after_help = DEFAULTS_NOTE)]
struct Cli {
    /// File of key=value lines setting the subcommand's flags, keyed by long
    /// flag name (e.g. `lr-start=1e-4`). Flags override it; unknown keys are
    /// errors.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic paired dataset and its manifest.
    Synth(SynthArgs),
    /// Train a model on a manifest of pairs.
    #[command(after_help = DEFAULTS_NOTE)]
    Train(TrainArgs),
    /// Enhance one image with a checkpoint.
    Enhance(EnhanceArgs),
    /// Report PSNR/SSIM over a manifest, for a checkpoint or the identity.
    Eval(EvalArgs),
    /// Run the gradient, identity and accounting self-checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of pairs [default: 8]
    #[arg(long)]
    n: Option<usize>,
    /// Square image size in pixels [default: 64]
    #[arg(long)]
    size: Option<usize>,
    /// Seed; falls back to the config file, then ECAF_SEED, then 0
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (required)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory
    #[arg(long)]
    force: bool,
    /// Gamma of the darkening curve [default: 2.2]
    #[arg(long)]
    gamma: Option<f64>,
    /// Exposure gain in (0,1] [default: 0.3]
    #[arg(long)]
    gain: Option<f64>,
    /// Standard deviation of the additive Gaussian noise [default: 0.02]
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Ablation {
    /// One feature stream instead of the visual/semantic split
    NoVsf,
    /// Standard self-attention instead of dual cross-attention
    NoDmsa,
    /// Plain L1 loss instead of the perceptual + Charbonnier mix
    L1Only,
}

impl FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Self as ValueEnum>::from_str(s.trim(), false)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Manifest of low/reference pairs (required)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for train.jsonl and latest.ecaf (required)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total iterations of the schedule [desk default: 2000; full-scale: 250000]
    #[arg(long)]
    iters: Option<usize>,
    /// Stop after this iteration, keeping the full schedule (resume later)
    #[arg(long)]
    stop_at: Option<usize>,
    /// Pairs per batch [desk default: 2; full-scale: 8]
    #[arg(long)]
    batch: Option<usize>,
    /// Square training crop [desk default: 64; full-scale: 256]
    #[arg(long)]
    patch: Option<usize>,
    /// Learning rate at the first iteration [default: 2e-4, same at full scale]
    #[arg(long)]
    lr_start: Option<f64>,
    /// Learning rate at the last iteration [default: 1e-6, same at full scale]
    #[arg(long)]
    lr_end: Option<f64>,
    /// Weight of the perceptual term; Charbonnier gets 1 - lambda [default: 0.2]
    #[arg(long)]
    lambda: Option<f64>,
    /// Charbonnier epsilon [default: 1e-3]
    #[arg(long)]
    epsilon: Option<f64>,
    /// Base channel width [desk default: 8; full-scale width unspecified]
    #[arg(long)]
    c0: Option<usize>,
    /// Heads per level, one value for all or a comma list of 3 [default: 2]
    #[arg(long)]
    heads: Option<Heads>,
    /// Seed for initialization and sampling; falls back to the config file,
    /// then ECAF_SEED, then 0
    #[arg(long)]
    seed: Option<u64>,
    /// Ablations to apply; repeatable
    #[arg(long, value_enum)]
    ablate: Vec<Ablation>,
    /// Clip the global gradient norm to this value [default: off]
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Disable dihedral augmentation [default: augmentation on]
    #[arg(long)]
    no_augment: bool,
    /// Log a JSON record every N iterations [default: 10]
    #[arg(long)]
    log_every: Option<usize>,
    /// Evaluate PSNR/SSIM on the first pair every N iterations [default: 100]
    #[arg(long)]
    eval_every: Option<usize>,
    /// Write latest.ecaf every N iterations and at the end [default: 500]
    #[arg(long)]
    ckpt_every: Option<usize>,
    /// Resume from a checkpoint written by an earlier run with the same options
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    /// Checkpoint to load (required)
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Input image, .ppm or .png (required)
    #[arg(long = "in", value_name = "IN")]
    input: Option<PathBuf>,
    /// Output image; format from the extension (required)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Expected base width; a checkpoint built otherwise is rejected
    #[arg(long)]
    c0: Option<usize>,
    /// Expected heads per level; a checkpoint built otherwise is rejected
    #[arg(long)]
    heads: Option<Heads>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Manifest of low/reference pairs (required)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint to evaluate; without it the low images are scored as-is
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Seed of the random test inputs; falls back to the config file, then
    /// ECAF_SEED, then 0
    #[arg(long)]
    seed: Option<u64>,
    /// Test hook: scale every analytic gradient by 1.01 so the gradient
    /// checks must fail
    #[arg(long)]
    plant_grad_bug: bool,
}

/// Heads per level as given on the command line: one count or a list.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Heads(Vec<usize>);

impl FromStr for Heads {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let v: Vec<usize> = s
            .split(',')
            .map(|h| {
                h.trim()
                    .parse()
                    .map_err(|_| format!("bad head count `{h}`"))
            })
            .collect::<Result<_, _>>()?;
        if v.is_empty() || v.contains(&0) {
            return Err(format!("bad head list `{s}`"));
        }
        Ok(Self(v))
    }
}

impl Display for Heads {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl Heads {
    fn per_level(&self, levels: usize) -> Result<Vec<usize>, Failure> {
        match self.0.len() {
            1 => Ok(vec![self.0[0]; levels]),
            n if n == levels => Ok(self.0.clone()),
            n => Err(Failure::Usage(format!(
                "--heads lists {n} levels, expected 1 or {levels}"
            ))),
        }
    }
}

#[derive(Debug)]
enum Failure {
    /// Bad flags or config values: exit 2.
    Usage(String),
    /// Anything that fails while doing the work: exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<ecaformer::Error> for Failure {
    fn from(e: ecaformer::Error) -> Self {
        Self::Runtime(e.into())
    }
}

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

/// Values from `--config`, restricted to the keys a subcommand accepts.
struct FileConfig {
    path: Option<PathBuf>,
    values: BTreeMap<String, String>,
}

fn load_config(
    path: Option<&Path>,
    command: &str,
    allowed: &[&str],
) -> Result<FileConfig, Failure> {
    let mut values = BTreeMap::new();
    let Some(path) = path else {
        return Ok(FileConfig { path: None, values });
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = || format!("{} line {}", path.display(), i + 1);
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{}: expected key=value", at())))?;
        let k = k.trim().trim_start_matches("--").replace('_', "-");
        if !allowed.contains(&k.as_str()) {
            return Err(usage(format!(
                "{}: unknown key `{k}` for `{command}` (accepted: {})",
                at(),
                allowed.join(", ")
            )));
        }
        if values.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(usage(format!("{}: key `{k}` given twice", at())));
        }
    }
    Ok(FileConfig {
        path: Some(path.to_path_buf()),
        values,
    })
}

/// Resolves each setting as flag, then config file, then default, and
/// remembers where every value came from.
struct Resolver<'a> {
    file: &'a FileConfig,
    used: Vec<(String, String, &'static str)>,
}

impl<'a> Resolver<'a> {
    fn new(file: &'a FileConfig) -> Self {
        Self {
            file,
            used: Vec::new(),
        }
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>, Failure> {
        match self.file.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                let p = self.file.path.as_deref().unwrap_or(Path::new("config"));
                usage(format!("{}: bad value `{v}` for `{key}`", p.display()))
            }),
        }
    }

    fn record<T: Display>(&mut self, key: &str, v: &T, source: &'static str) {
        self.used.push((key.to_string(), v.to_string(), source));
    }

    fn optional<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>, Failure> {
        let (v, src) = match flag {
            Some(v) => (Some(v), "flag"),
            None => (self.from_file(key)?, "config"),
        };
        if let Some(v) = &v {
            self.record(key, v, src);
        }
        Ok(v)
    }

    fn get<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, Failure> {
        match self.optional(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.record(key, &default, "default");
                Ok(default)
            }
        }
    }

    fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T, Failure> {
        self.optional(key, flag)?
            .ok_or_else(|| usage(format!("--{key} is required (flag or config key `{key}`)")))
    }

    /// Boolean switches only ever turn a setting on from the command line.
    fn switch(&mut self, key: &str, flag: bool) -> Result<bool, Failure> {
        self.get(key, flag.then_some(true), false)
    }

    /// Flag, then config file, then `ECAF_SEED`, then 0.
    fn seed(&mut self, flag: Option<u64>) -> Result<u64, Failure> {
        if let Some(v) = self.optional("seed", flag)? {
            return Ok(v);
        }
        if let Ok(v) = std::env::var(SEED_ENV) {
            let s: u64 = v
                .trim()
                .parse()
                .map_err(|_| usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
            self.record("seed", &s, "env");
            return Ok(s);
        }
        self.record("seed", &0, "default");
        Ok(0)
    }

    fn describe(&self) -> String {
        self.used
            .iter()
            .map(|(k, v, s)| format!("{k}={v} ({s})"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

const SYNTH_KEYS: &[&str] = &[
    "n", "size", "seed", "out", "force", "gamma", "gain", "sigma",
];
const TRAIN_KEYS: &[&str] = &[
    "manifest",
    "out",
    "iters",
    "stop-at",
    "batch",
    "patch",
    "lr-start",
    "lr-end",
    "lambda",
    "epsilon",
    "c0",
    "heads",
    "seed",
    "ablate",
    "clip-norm",
    "no-augment",
    "log-every",
    "eval-every",
    "ckpt-every",
    "resume",
];
const ENHANCE_KEYS: &[&str] = &["ckpt", "in", "out", "c0", "heads"];
const EVAL_KEYS: &[&str] = &["manifest", "ckpt"];
const VERIFY_KEYS: &[&str] = &["seed", "plant-grad-bug"];

fn cmd_synth(a: SynthArgs, config: Option<&Path>) -> Result<(), Failure> {
    let file = load_config(config, "synth", SYNTH_KEYS)?;
    let mut r = Resolver::new(&file);
    let out: PathBuf = r
        .required("out", a.out.map(|p| p.display().to_string()))?
        .into();
    let n = r.get("n", a.n, 8)?;
    let size = r.get("size", a.size, 64)?;
    let seed = r.seed(a.seed)?;
    let force = r.switch("force", a.force)?;
    let d = DegradeParams::default();
    let params = DegradeParams {
        gamma: r.get("gamma", a.gamma, d.gamma)?,
        gain: r.get("gain", a.gain, d.gain)?,
        noise_sigma: r.get("sigma", a.sigma, d.noise_sigma)?,
        seed,
    };
    params.validate().map_err(usage)?;
    if size == 0 {
        return Err(usage("--size must be positive"));
    }
    log::info!("synth: {}", r.describe());
    let manifest = build_synth_dataset(n, size, seed, &params, &out, force)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_train(a: TrainArgs, config: Option<&Path>) -> Result<(), Failure> {
    let file = load_config(config, "train", TRAIN_KEYS)?;
    let mut r = Resolver::new(&file);
    let manifest: PathBuf = r
        .required("manifest", a.manifest.map(|p| p.display().to_string()))?
        .into();
    let out: PathBuf = r
        .required("out", a.out.map(|p| p.display().to_string()))?
        .into();
    let resume: Option<PathBuf> = r
        .optional("resume", a.resume.map(|p| p.display().to_string()))?
        .map(PathBuf::from);
    let sd = Schedule::default();
    let td = TrainOptions::default();
    let wd = LossWeights::default();
    let md = ModelConfig::default();
    let iters = r.get("iters", a.iters, sd.total_iters)?;
    let stop_at = r.optional("stop-at", a.stop_at)?;
    let batch = r.get("batch", a.batch, td.batch)?;
    let patch = r.get("patch", a.patch, td.patch)?;
    let lr_start = r.get("lr-start", a.lr_start, sd.lr_start)?;
    let lr_end = r.get("lr-end", a.lr_end, sd.lr_end)?;
    let lambda = r.get("lambda", a.lambda, wd.lambda)?;
    let epsilon = r.get("epsilon", a.epsilon, wd.epsilon)?;
    let c0 = r.get("c0", a.c0, md.c0)?;
    let heads = r.get("heads", a.heads, Heads(vec![2]))?;
    let seed = r.seed(a.seed)?;
    let clip_norm = r.optional("clip-norm", a.clip_norm)?;
    let no_augment = r.switch("no-augment", a.no_augment)?;
    let log_every = r.get("log-every", a.log_every, td.log_every)?;
    let eval_every = r.get("eval-every", a.eval_every, td.eval_every)?;
    let ckpt_every = r.get("ckpt-every", a.ckpt_every, td.ckpt_every)?;
    let ablate: Vec<Ablation> = if !a.ablate.is_empty() {
        a.ablate
    } else if let Some(list) = file.values.get("ablate") {
        list.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.parse().map_err(usage))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    if !ablate.is_empty() {
        let names: Vec<String> = ablate
            .iter()
            .map(|a| {
                a.to_possible_value()
                    .map(|v| v.get_name().to_string())
                    .unwrap_or_default()
            })
            .collect();
        r.record("ablate", &names.join(","), "flag/config");
    }

    let mut cfg = ModelConfig { c0, seed, ..md };
    cfg.heads = heads.per_level(cfg.stages + 1)?;
    cfg.vsf = !ablate.contains(&Ablation::NoVsf);
    if ablate.contains(&Ablation::NoDmsa) {
        cfg.attention = AttentionKind::Single;
    }
    cfg.validate().map_err(usage)?;
    let opts = TrainOptions {
        schedule: Schedule {
            lr_start,
            lr_end,
            total_iters: iters,
        },
        batch,
        patch,
        weights: LossWeights {
            lambda,
            epsilon,
            ..wd
        },
        l1_only: ablate.contains(&Ablation::L1Only),
        augment: !no_augment,
        seed,
        clip_norm,
        log_every,
        eval_every,
        ckpt_every,
        stop_at,
    };
    opts.validate().map_err(usage)?;

    log::info!(
        "defaults: desk scale (iters {}, batch {}, patch {}, c0 {}); full-scale: iters 250000, batch 8, patch 256",
        sd.total_iters,
        td.batch,
        td.patch,
        md.c0
    );
    log::info!("train: {}", r.describe());

    let data = load_dataset(&manifest)?;
    if let Some((low, _)) = data
        .pairs
        .iter()
        .find(|(low, _)| low.shape()[1].min(low.shape()[2]) < patch)
    {
        return Err(usage(format!(
            "--patch {patch} exceeds an image of {}x{}",
            low.shape()[1],
            low.shape()[2]
        )));
    }
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let (mut model, mut state) = match &resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if let Some((key, want, found)) = cfg.first_difference(&ck.config) {
                return Err(ecaformer::Error::ConfigMismatch {
                    key: key.to_string(),
                    expected: want,
                    found,
                }
                .into());
            }
            let (m, s) = resume_from::<f32>(&ck, &opts)?;
            log::info!("resuming {} at iteration {}", path.display(), s.iter);
            (m, s)
        }
        None => {
            let m = Model::<f32>::new(cfg)?;
            let s = TrainState::new(&m);
            (m, s)
        }
    };
    log::info!("model: {} parameters", model.param_count());

    let report = train(&mut model, &mut state, &data, &opts, Some(&out)).map_err(|e| match e {
        ecaformer::Error::NonFiniteLoss { .. } => {
            Failure::Runtime(anyhow!("{e}; try a smaller --lr-start or set --clip-norm"))
        }
        e => e.into(),
    })?;
    let first = report.records.first().and_then(|r| r.psnr_db);
    let last = report.records.iter().rev().find_map(|r| r.psnr_db);
    println!(
        "trained to iteration {} in {:.1} s; first-pair PSNR {} -> {} dB; log {}, checkpoint {}",
        state.iter,
        report.wall_s,
        first.map_or("-".into(), |v| format!("{v:.2}")),
        last.map_or("-".into(), |v| format!("{v:.2}")),
        out.join(LOG_FILE).display(),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn cmd_enhance(a: EnhanceArgs, config: Option<&Path>) -> Result<(), Failure> {
    let file = load_config(config, "enhance", ENHANCE_KEYS)?;
    let mut r = Resolver::new(&file);
    let ckpt: PathBuf = r
        .required("ckpt", a.ckpt.map(|p| p.display().to_string()))?
        .into();
    let input: PathBuf = r
        .required("in", a.input.map(|p| p.display().to_string()))?
        .into();
    let out: PathBuf = r
        .required("out", a.out.map(|p| p.display().to_string()))?
        .into();
    let c0 = r.optional("c0", a.c0)?;
    let heads = r.optional("heads", a.heads)?;

    let ck = Checkpoint::load(&ckpt)?;
    let mut expected = ck.config.clone();
    if let Some(c0) = c0 {
        expected.c0 = c0;
    }
    if let Some(h) = heads {
        expected.heads = h.per_level(expected.stages + 1)?;
    }
    let model: Model<f32> = ck.to_model(Some(&expected))?;
    let img = load_image(&input)?;
    let start = Instant::now();
    let y = model.enhance(&Tensor::stack(&[img])?)?.unstack(0)?;
    let secs = start.elapsed().as_secs_f64();
    save_image(&y, &out)?;
    println!("{} -> {} in {secs:.3} s", input.display(), out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs, config: Option<&Path>) -> Result<(), Failure> {
    let file = load_config(config, "eval", EVAL_KEYS)?;
    let mut r = Resolver::new(&file);
    let manifest: PathBuf = r
        .required("manifest", a.manifest.map(|p| p.display().to_string()))?
        .into();
    let ckpt: Option<PathBuf> = r
        .optional("ckpt", a.ckpt.map(|p| p.display().to_string()))?
        .map(PathBuf::from);

    let m = PairManifest::load(&manifest)?;
    let data = load_dataset(&manifest)?;
    let model: Option<Model<f32>> = match &ckpt {
        Some(p) => Some(Checkpoint::load(p)?.to_model(None)?),
        None => None,
    };
    let mut rows = Vec::new();
    for ((low, reference), (lp, rp)) in data.pairs.iter().zip(&m.pairs) {
        let pred = match &model {
            Some(model) => model
                .enhance(&Tensor::stack(std::slice::from_ref(low))?)?
                .unstack(0)?,
            None => low.clone(),
        };
        rows.push((
            lp.display().to_string(),
            rp.display().to_string(),
            psnr(&pred, reference)?,
            ssim(&pred, reference)?,
        ));
    }
    if rows.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "{} lists no pairs",
            manifest.display()
        )));
    }
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.2).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.3).sum::<f64>() / n;

    let mut out = std::io::stdout().lock();
    let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(3).max(4);
    let io = |e: std::io::Error| Failure::Runtime(e.into());
    writeln!(out, "{:<w$}  {:>9}  {:>7}", "pair", "psnr_db", "ssim").map_err(io)?;
    for (lp, _, p, s) in &rows {
        writeln!(out, "{lp:<w$}  {p:>9.4}  {s:>7.5}").map_err(io)?;
    }
    writeln!(out, "{:<w$}  {mean_psnr:>9.4}  {mean_ssim:>7.5}", "mean").map_err(io)?;
    let json = serde_json::json!({
        "model": ckpt.as_ref().map_or("identity".to_string(), |p| p.display().to_string()),
        "pairs": rows.iter().map(|(l, r, p, s)| serde_json::json!({"low": l, "ref": r, "psnr_db": p, "ssim": s})).collect::<Vec<_>>(),
        "mean_psnr_db": mean_psnr,
        "mean_ssim": mean_ssim,
    });
    writeln!(out, "{json}").map_err(io)?;
    Ok(())
}

fn cmd_verify(a: VerifyArgs, config: Option<&Path>) -> Result<bool, Failure> {
    let file = load_config(config, "verify", VERIFY_KEYS)?;
    let mut r = Resolver::new(&file);
    let seed = r.seed(a.seed)?;
    let planted = r.switch("plant-grad-bug", a.plant_grad_bug)?;
    let opts = VerifyOptions {
        seed,
        grad_scale: if planted { PLANTED_GRAD_SCALE } else { 1.0 },
    };
    if planted {
        log::warn!("planted fault: analytic gradients scaled by {PLANTED_GRAD_SCALE}");
    }
    let start = Instant::now();
    let checks = run_all(&opts)?;
    let mut out = std::io::stdout().lock();
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{tag}  {}: {}", c.name, c.detail).map_err(|e| Failure::Runtime(e.into()))?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    writeln!(
        out,
        "{} of {} checks passed in {:.1} s",
        checks.len() - failed,
        checks.len(),
        start.elapsed().as_secs_f64()
    )
    .map_err(|e| Failure::Runtime(e.into()))?;
    Ok(failed == 0)
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, rec| match rec.level() {
            log::Level::Info => writeln!(buf, "{}", rec.args()),
            l => writeln!(buf, "{}: {}", l.as_str().to_lowercase(), rec.args()),
        })
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    let config = cli.config.as_deref();
    let name = match &cli.cmd {
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Enhance(_) => "enhance",
        Command::Eval(_) => "eval",
        Command::Verify(_) => "verify",
    };
    let result = match cli.cmd {
        Command::Synth(a) => cmd_synth(a, config).map(|()| true),
        Command::Train(a) => cmd_train(a, config).map(|()| true),
        Command::Enhance(a) => cmd_enhance(a, config).map(|()| true),
        Command::Eval(a) => cmd_eval(a, config).map(|()| true),
        Command::Verify(a) => cmd_verify(a, config),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            let mut cmd = Cli::command();
            let usage = cmd
                .find_subcommand_mut(name)
                .map(|c| c.render_usage().to_string())
                .unwrap_or_default();
            eprintln!(
                "error: {msg}\n\n{usage}\n\nFor more information, try 'ecaformer {name} --help'."
            );
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
