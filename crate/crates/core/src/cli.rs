//! The `flowharm` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O or data
//! error, 4 numerical abort, 5 every item of a batch command failed.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baselines::{
    histogram_match, low_freq_replace, simulate_domain, DomainTransform, ReferenceStats,
};
use crate::config::{InitChoice, RunConfig};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::harmonize::{harmonize, harmonize_batch, HarmonizeConfig, InitMode};
use crate::io::{
    load_checkpoint, load_dataset, read_image, read_image_dir, save_checkpoint, write_atomic,
    write_image,
};
use crate::metrics::{score_pair, EvalReport, ReportRow, REPORT_HEADER};
use crate::numeric::{minmax_normalize, ImageGrid};
use crate::phantom::{phantom_corpus, PhantomConfig};
use crate::train::train_with;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_ALL_FAILED: i32 = 5;

/// Parameters accepted by `sweep --param`.
pub const SWEEPABLE: &[&str] = &["alpha", "beta1", "beta2", "iterations", "mask_quantile"];

#[derive(Debug, Parser)]
#[command(name = "flowharm", version, about = "Blind MR intensity harmonization with a flow prior")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a flow on a directory of target-domain images.
    Train(TrainArgs),
    /// Draw samples from a trained flow.
    Sample(SampleArgs),
    /// Apply an intensity transform to every image of a directory.
    Simulate(SimulateArgs),
    /// Harmonize every image of a directory.
    Harmonize(HarmonizeArgs),
    /// Score harmonized images against their targets.
    Evaluate(EvaluateArgs),
    /// Harmonize and score once per value of one hyperparameter.
    Sweep(SweepArgs),
    /// Write a corpus of synthetic head phantoms.
    Phantom(PhantomArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TransformKind {
    Exp,
    Log,
    Gamma,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub transform: TransformKind,
    #[arg(long, default_value_t = 0.7)]
    pub gamma_power: f64,
    #[arg(long, default_value_t = crate::baselines::DEFAULT_LOG_EPSILON)]
    pub log_epsilon: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct HarmonizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub mean_image: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-image iteration traces.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Tab-separated manifest with columns `domain source target` followed
    /// by one column per harmonization method.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Comma-separated method names. `HM` and `SSIMH` are computed on the
    /// fly from `--reference` when the manifest has no such column.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    /// Target-domain training images used by the HM and SSIMH baselines.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    /// Targets matched to `--source` by sorted file order.
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long)]
    pub mean_image: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Domain label written to the report.
    #[arg(long, default_value = "source")]
    pub domain: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure of a command together with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_USAGE,
            Error::NumericalAbort { .. } => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<i32, Failure>;

fn require_exists(path: &Path, what: &str) -> std::result::Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_DATA,
            message: format!("{what} {} does not exist", path.display()),
        })
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn file_name(path: &Path) -> &std::ffi::OsStr {
    path.file_name().expect("listed files have names")
}

/// Configures the global worker pool from `BH_THREADS` (0 or unset = auto).
fn configure_threads() {
    let n = std::env::var("BH_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    configure_threads();
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Harmonize(a) => cmd_harmonize(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Phantom(a) => cmd_phantom(&a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    require_exists(&a.data, "data directory")?;
    if let Some(c) = &a.config {
        require_exists(c, "config file")?;
    }
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let dataset = load_dataset(&a.data)?;
    let log_path = with_suffix(&a.out, ".log");
    let log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let every = cfg.train.checkpoint_every;
    let model = train_with(&dataset, cfg.arch, &cfg.train, |record, model| {
        writeln!(log, "{record}").map_err(|e| Error::io(&log_path, e))?;
        if record.step % every == 0 {
            save_checkpoint(model, &a.out)?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save_checkpoint(&model, &a.out)?;
    write_image(with_suffix(&a.out, ".mean.bhimg"), dataset.mean_image())?;
    Ok(EXIT_OK)
}

/// Tiles images into a near-square grid, each clamped to [0, 1].
pub fn contact_sheet(images: &[ImageGrid]) -> Option<ImageGrid> {
    let first = images.first()?;
    let (h, w) = first.dims();
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let mut sheet = ImageGrid::zeros(rows * h, cols * w);
    for (k, img) in images.iter().enumerate() {
        let (r, c) = (k / cols, k % cols);
        for i in 0..h {
            for j in 0..w {
                sheet.set(r * h + i, c * w + j, img.get(i, j).clamp(0.0, 1.0));
            }
        }
    }
    Some(sheet)
}

fn cmd_sample(a: &SampleArgs) -> CmdResult {
    require_exists(&a.ckpt, "checkpoint")?;
    if !(a.temperature >= 0.0 && a.temperature.is_finite()) {
        return Err(usage(format!("temperature must be >= 0, got {}", a.temperature)));
    }
    let model = load_checkpoint(&a.ckpt)?;
    ensure_dir(&a.out)?;
    let mut samples = Vec::with_capacity(a.n);
    for i in 0..a.n {
        let img = if a.temperature == 0.0 {
            model.inverse_flat(&vec![0.0; model.dimension()])?.value
        } else {
            model.sample(a.seed.wrapping_add(i as u64), a.temperature)?
        };
        write_image(a.out.join(format!("sample_{i:04}.bhimg")), &img)?;
        samples.push(img);
    }
    if let Some(sheet) = contact_sheet(&samples) {
        write_image(a.out.join("contact_sheet.pgm"), &sheet)?;
    }
    Ok(EXIT_OK)
}

fn transform_of(kind: TransformKind, gamma_power: f64, log_epsilon: f64) -> Result<DomainTransform> {
    let t = match kind {
        TransformKind::Exp => DomainTransform::Exp,
        TransformKind::Log => DomainTransform::Log {
            epsilon: log_epsilon,
        },
        TransformKind::Gamma => DomainTransform::Gamma { power: gamma_power },
    };
    t.validate()?;
    Ok(t)
}

/// The manifest line describing a transform, e.g. `transform=gamma power=0.7`.
pub fn transform_manifest(t: &DomainTransform) -> String {
    match t {
        DomainTransform::Exp => "transform=exp".into(),
        DomainTransform::Log { epsilon } => format!("transform=log epsilon={epsilon}"),
        DomainTransform::Gamma { power } => format!("transform=gamma power={power}"),
    }
}

fn cmd_simulate(a: &SimulateArgs) -> CmdResult {
    require_exists(&a.data, "data directory")?;
    let t = transform_of(a.transform, a.gamma_power, a.log_epsilon)?;
    let images = read_image_dir(&a.data)?;
    ensure_dir(&a.out)?;
    for (path, img) in &images {
        let y = simulate_domain(&minmax_normalize(img)?, t)?;
        write_image(a.out.join(file_name(path)), &y)?;
    }
    let manifest = format!("{}\n", transform_manifest(&t));
    write_atomic(&a.out.join("manifest.txt"), manifest.as_bytes())?;
    Ok(EXIT_OK)
}

fn harmonize_config(cfg: &RunConfig) -> Result<HarmonizeConfig> {
    let mut h = cfg.harmonize.clone();
    h.init_mode = match cfg.init {
        InitChoice::Mean => InitMode::MeanImage,
        InitChoice::Source => InitMode::SourceImage,
        InitChoice::Custom => {
            let path = cfg.init_image.as_ref().expect("validated");
            InitMode::Custom(read_image(path)?)
        }
    };
    Ok(h)
}

fn read_normalized_dir(dir: &Path) -> Result<Vec<(PathBuf, ImageGrid)>> {
    read_image_dir(dir)?
        .into_iter()
        .map(|(p, img)| Ok((p, minmax_normalize(&img)?)))
        .collect()
}

fn cmd_harmonize(a: &HarmonizeArgs) -> CmdResult {
    require_exists(&a.ckpt, "checkpoint")?;
    require_exists(&a.source, "source directory")?;
    require_exists(&a.mean_image, "mean image")?;
    if let Some(c) = &a.config {
        require_exists(c, "config file")?;
    }
    let cfg = load_config(a.config.as_deref())?;
    let hcfg = harmonize_config(&cfg)?;
    let model = load_checkpoint(&a.ckpt)?;
    let mean = read_image(&a.mean_image)?;
    let sources = read_normalized_dir(&a.source)?;
    ensure_dir(&a.out)?;
    if let Some(t) = &a.trace {
        ensure_dir(t)?;
    }
    let images: Vec<ImageGrid> = sources.iter().map(|(_, x)| x.clone()).collect();
    let results = harmonize_batch(&model, &images, &mean, &hcfg);
    let mut successes = 0;
    for ((path, _), result) in sources.iter().zip(results) {
        match result {
            Ok((out, trace)) => {
                write_image(a.out.join(file_name(path)), &out)?;
                if let Some(dir) = &a.trace {
                    let stem = Path::new(file_name(path)).with_extension("tsv");
                    write_atomic(&dir.join(stem), trace.to_tsv().as_bytes())?;
                }
                successes += 1;
            }
            Err(e) => eprintln!("warning: {}: {e}", path.display()),
        }
    }
    if successes == 0 {
        eprintln!("error: every image failed");
        return Ok(EXIT_ALL_FAILED);
    }
    Ok(EXIT_OK)
}

/// One row of an evaluation manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub domain: String,
    pub source: PathBuf,
    pub target: PathBuf,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub methods: Vec<String>,
    pub rows: Vec<ManifestRow>,
}

/// Parses a manifest; relative paths are resolved against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Manifest> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("manifest is empty".into()))?;
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    if cols.len() < 3 || cols[..3] != ["domain", "source", "target"] {
        return Err(Error::InvalidInput(
            "manifest header must start with domain, source, target".into(),
        ));
    }
    let methods: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::InvalidInput(format!(
                "manifest line {}: {} fields, header has {}",
                idx + 1,
                fields.len(),
                cols.len()
            )));
        }
        rows.push(ManifestRow {
            domain: fields[0].to_string(),
            source: resolve(fields[1]),
            target: resolve(fields[2]),
            outputs: fields[3..].iter().map(|f| resolve(f)).collect(),
        });
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("manifest has no rows".into()));
    }
    Ok(Manifest { methods, rows })
}

enum MethodSource {
    Column(usize),
    Hm,
    Ssimh,
}

fn score_rows(method: &str, domain: &str, pairs: &[(ImageGrid, ImageGrid)]) -> Result<ReportRow> {
    let mut p = Vec::with_capacity(pairs.len());
    let mut s = Vec::with_capacity(pairs.len());
    for (x, t) in pairs {
        let (a, b) = score_pair(x, t)?;
        p.push(a);
        s.push(b);
    }
    Ok(ReportRow::from_scores(method, domain, &p, &s))
}

fn cmd_evaluate(a: &EvaluateArgs) -> CmdResult {
    require_exists(&a.pairs, "manifest")?;
    if let Some(r) = &a.reference {
        require_exists(r, "reference directory")?;
    }
    let cfg = load_config(a.config.as_deref())?;
    let text = fs::read_to_string(&a.pairs).map_err(|e| Error::io(&a.pairs, e))?;
    let base = a.pairs.parent().unwrap_or(Path::new("."));
    let manifest = parse_manifest(&text, base)?;
    let methods: Vec<String> = if a.methods.is_empty() {
        manifest.methods.clone()
    } else {
        a.methods.clone()
    };
    let mut reference = None;
    let mut sources = Vec::new();
    for m in &methods {
        let src = if let Some(k) = manifest.methods.iter().position(|c| c == m) {
            MethodSource::Column(k)
        } else if m == "HM" || m == "SSIMH" {
            let dir = a.reference.as_ref().ok_or_else(|| {
                usage(format!("method {m} is not in the manifest and --reference is missing"))
            })?;
            if reference.is_none() {
                reference = Some(ReferenceStats::from_images(load_dataset(dir)?.images())?);
            }
            if m == "HM" {
                MethodSource::Hm
            } else {
                MethodSource::Ssimh
            }
        } else {
            return Err(Failure {
                code: EXIT_DATA,
                message: format!("method {m} has no column in {}", a.pairs.display()),
            });
        };
        sources.push(src);
    }

    let mut domains: Vec<&str> = Vec::new();
    for r in &manifest.rows {
        if !domains.contains(&r.domain.as_str()) {
            domains.push(&r.domain);
        }
    }
    let mut report = EvalReport::default();
    for domain in domains {
        let rows: Vec<&ManifestRow> = manifest.rows.iter().filter(|r| r.domain == domain).collect();
        let mut src_imgs = Vec::with_capacity(rows.len());
        let mut targets = Vec::with_capacity(rows.len());
        for r in &rows {
            let s = minmax_normalize(&read_image(&r.source)?)?;
            let t = minmax_normalize(&read_image(&r.target)?)?;
            s.ensure_same_dims(&t, "source vs target")?;
            src_imgs.push(s);
            targets.push(t);
        }
        let pairs: Vec<_> = src_imgs.iter().cloned().zip(targets.iter().cloned()).collect();
        report.rows.push(score_rows("Source", domain, &pairs)?);
        for (m, src) in methods.iter().zip(&sources) {
            let mut pairs = Vec::with_capacity(rows.len());
            for ((r, s), t) in rows.iter().zip(&src_imgs).zip(&targets) {
                let out = match src {
                    MethodSource::Column(k) => read_image(&r.outputs[*k])?,
                    MethodSource::Hm => histogram_match(s, reference.as_ref().expect("loaded"))?,
                    MethodSource::Ssimh => {
                        low_freq_replace(s, reference.as_ref().expect("loaded"), cfg.cutoff_radius)?
                    }
                };
                pairs.push((out, t.clone()));
            }
            report.rows.push(score_rows(m, domain, &pairs)?);
        }
    }
    write_atomic(&a.out, report.to_tsv().as_bytes())?;
    Ok(EXIT_OK)
}

/// Applies `value` to the named hyperparameter.
pub fn apply_sweep_value(cfg: &mut HarmonizeConfig, param: &str, value: &str) -> Result<()> {
    let num: f64 = value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("sweep value {value:?} is not numeric")))?;
    match param {
        "alpha" => cfg.alpha = num,
        "beta1" => cfg.beta1 = num,
        "beta2" => cfg.beta2 = num,
        "mask_quantile" => cfg.mask_quantile = num,
        "iterations" => {
            if num.fract() != 0.0 || num < 0.0 {
                return Err(Error::Config(format!("iterations must be an integer, got {value}")));
            }
            cfg.iterations = num as usize;
        }
        _ => {
            return Err(Error::Config(format!(
                "unknown sweep parameter {param:?}; sweepable: {}",
                SWEEPABLE.join(", ")
            )))
        }
    }
    cfg.validate()
}

fn cmd_sweep(a: &SweepArgs) -> CmdResult {
    if !SWEEPABLE.contains(&a.param.as_str()) {
        return Err(usage(format!(
            "unknown sweep parameter {:?}; sweepable: {}",
            a.param,
            SWEEPABLE.join(", ")
        )));
    }
    let base = load_config(a.config.as_deref())?;
    let base_h = harmonize_config(&base)?;
    let mut configs = Vec::with_capacity(a.values.len());
    for v in &a.values {
        let mut h = base_h.clone();
        apply_sweep_value(&mut h, &a.param, v)?;
        configs.push((v.trim().to_string(), h));
    }
    for (p, what) in [
        (&a.ckpt, "checkpoint"),
        (&a.source, "source directory"),
        (&a.targets, "target directory"),
        (&a.mean_image, "mean image"),
    ] {
        require_exists(p, what)?;
    }
    let model: FlowModel = load_checkpoint(&a.ckpt)?;
    let mean = read_image(&a.mean_image)?;
    let sources = read_normalized_dir(&a.source)?;
    let targets = read_normalized_dir(&a.targets)?;
    if sources.len() != targets.len() {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!(
                "{} sources but {} targets",
                sources.len(),
                targets.len()
            ),
        });
    }
    let mut out = format!("param_value\t{REPORT_HEADER}\n");
    for (value, h) in &configs {
        let mut src_pairs = Vec::new();
        let mut bh_pairs = Vec::new();
        for ((_, s), (_, t)) in sources.iter().zip(&targets) {
            let (x, _) = harmonize(&model, s, &mean, h)?;
            src_pairs.push((s.clone(), t.clone()));
            bh_pairs.push((x, t.clone()));
        }
        for row in [
            score_rows("Source", &a.domain, &src_pairs)?,
            score_rows("BlindHarmony", &a.domain, &bh_pairs)?,
        ] {
            let _ = writeln!(out, "{value}\t{}", row.tsv_fields());
        }
    }
    write_atomic(&a.out, out.as_bytes())?;
    Ok(EXIT_OK)
}

fn cmd_phantom(a: &PhantomArgs) -> CmdResult {
    if a.size < 8 {
        return Err(usage("phantom size must be at least 8"));
    }
    let cfg = PhantomConfig {
        size: a.size,
        ..Default::default()
    };
    ensure_dir(&a.out)?;
    for (i, img) in phantom_corpus(&cfg, a.n, a.seed).iter().enumerate() {
        write_image(a.out.join(format!("phantom_{i:04}.bhimg")), img)?;
    }
    Ok(EXIT_OK)
}
