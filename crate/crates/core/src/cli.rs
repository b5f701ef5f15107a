//! `vitnt` command-line interface.
//!
//! Every command writes plain TSV plus a JSON run manifest that echoes the
//! configuration and the SHA-256 of every input, so a run can be replayed.
//! Outputs depend only on inputs and flags; `--jobs` changes speed, never
//! bytes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::degradation::{self, DegradationKind, Level};
use crate::evaluation::{self, PairQuality};
use crate::model_io::{self, FeaturePooling, VitConfig, VitModel};
use crate::quality::{self, Aggregation, BlockSet, QualityConfig, QualityResult};
use crate::tensor::L2_NORM_EPS;
use crate::vit;

pub const EPS_NORM_ENV: &str = "VITNT_EPS_NORM";

#[derive(Debug, Parser)]
#[command(
    name = "vitnt",
    version,
    about = "Training-free face image quality from ViT block stability"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score images; writes `path<TAB>Q` per image.
    Score(ScoreArgs),
    /// Error-versus-discard curves from comparison scores and qualities.
    EvalEdc(EvalEdcArgs),
    /// Distance statistics across synthetic degradation levels.
    ValidateGradient(GradientArgs),
    /// Print a model's config, tensor inventory and validation result.
    InspectModel(InspectArgs),
    /// Write a seeded random (or neutral) model, for fixtures and smoke tests.
    InitModel(InitArgs),
}

#[derive(Debug, Clone, Args)]
pub struct QualityFlags {
    /// Scale α of the distance-to-quality map.
    #[arg(long, default_value_t = quality::DEFAULT_ALPHA)]
    pub alpha: f32,
    /// Consecutive block range `first..last`, inclusive [default: 0..min(L,12)-1].
    #[arg(long)]
    pub blocks: Option<BlockSet>,
    /// Patch aggregation: uniform, attn-last or attn-all.
    #[arg(long = "agg", default_value = "attn-last")]
    pub aggregation: Aggregation,
}

impl QualityFlags {
    fn resolve(&self, num_blocks: usize) -> anyhow::Result<QualityConfig> {
        let block_set = match self.blocks {
            Some(b) if b.last() >= num_blocks => {
                bail!("--blocks {b} exceeds model depth {num_blocks}")
            }
            Some(b) => b,
            None => BlockSet::default_for(num_blocks)?,
        };
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            bail!("--alpha must be > 0, got {}", self.alpha);
        }
        Ok(QualityConfig {
            block_set,
            alpha: self.alpha,
            aggregation: self.aggregation,
            eps_norm: eps_norm_from_env()?,
        })
    }
}

fn eps_norm_from_env() -> anyhow::Result<f32> {
    match std::env::var(EPS_NORM_ENV) {
        Ok(v) => {
            let eps: f32 = v
                .trim()
                .parse()
                .with_context(|| format!("{EPS_NORM_ENV}={v:?} is not a number"))?;
            if !(eps > 0.0 && eps.is_finite()) {
                bail!("{EPS_NORM_ENV} must be > 0, got {eps}");
            }
            Ok(eps)
        }
        Err(_) => Ok(L2_NORM_EPS),
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Score file; the manifest goes to `<out>.manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub quality: QualityFlags,
    /// Also write `<out>.patches.tsv` with per-patch distance, quality, weight.
    #[arg(long)]
    pub per_patch: bool,
    /// Worker threads [default: available parallelism].
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Binary PPM images matching the model's input size.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalEdcArgs {
    /// `id_a<TAB>id_b<TAB>similarity<TAB>is_genuine` lines.
    #[arg(long)]
    pub pairs: PathBuf,
    /// `id<TAB>score` lines (the output of `score` works as-is).
    #[arg(long)]
    pub qualities: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Target false match rates; one curve file each.
    #[arg(long = "fmr", num_args = 1.., default_values_t = [1e-3, 1e-4])]
    pub fmr: Vec<f64>,
    /// Number of evenly spaced discard fractions over [0, 1].
    #[arg(long, default_value_t = evaluation::DEFAULT_GRID_POINTS)]
    pub grid: usize,
    #[arg(long, default_value = "min")]
    pub pair_quality: PairQuality,
}

#[derive(Debug, Args)]
pub struct GradientArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of source `.ppm` images (read in file-name order).
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Comma-separated degradation kinds [default: all four].
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<DegradationKind>>,
    /// Comma-separated levels to generate [default: 0..=10].
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<u8>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub quality: QualityFlags,
    /// Also write every degraded image plus a `<level><TAB><path>` manifest.
    #[arg(long)]
    pub save_images: bool,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub image_size: usize,
    #[arg(long, default_value_t = 4)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 8)]
    pub embed_dim: usize,
    #[arg(long = "num-blocks", default_value_t = 2)]
    pub num_blocks: usize,
    #[arg(long, default_value_t = 2)]
    pub num_heads: usize,
    #[arg(long, default_value_t = 4.0)]
    pub mlp_ratio: f64,
    #[arg(long)]
    pub class_token: bool,
    #[arg(long)]
    pub pool_class_token: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// All-zero blocks with unit norm gains: every block is an identity.
    #[arg(long)]
    pub neutral: bool,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<InputDigest>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<Failure>,
}

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Failure {
    pub path: String,
    pub error: String,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: BTreeMap::new(),
            inputs: Vec::new(),
            failures: Vec::new(),
        }
    }

    fn set(&mut self, key: &str, value: impl Serialize) {
        self.config.insert(
            key.to_string(),
            serde_json::to_value(value).expect("manifest values serialize"),
        );
    }

    fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    fn quality(&mut self, model: &Path, cfg: &QualityConfig) {
        self.set("model", model.display().to_string());
        self.set("alpha", cfg.alpha);
        self.set("block_set", cfg.block_set.to_string());
        self.set("aggregation", cfg.aggregation.as_str());
        self.set("eps_norm", cfg.eps_norm);
    }

    fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(path, text.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_file(path: &Path) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn thread_pool(jobs: Option<usize>) -> anyhow::Result<rayon::ThreadPool> {
    let jobs = jobs.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(usize::from)
            .unwrap_or(1)
    });
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

fn load_model(path: &Path, manifest: &mut RunManifest) -> anyhow::Result<VitModel> {
    let bytes = read_file(path)?;
    manifest.input(path, &bytes);
    let model = model_io::decode_model(&bytes)
        .with_context(|| format!("loading model {}", path.display()))?;
    let violations = model_io::validate_model(&model);
    if !violations.is_empty() {
        return Err(crate::Error::Validation(violations))
            .with_context(|| format!("loading model {}", path.display()));
    }
    Ok(model)
}

fn score_one(bytes: &[u8], model: &VitModel, cfg: &QualityConfig) -> crate::Result<QualityResult> {
    let raw = degradation::decode_ppm(bytes)?;
    let img = vit::preprocess(&raw, model.config.image_size)?;
    quality::score_image(&img, model, cfg)
}

/// Returns the process exit code.
pub fn cmd_score(args: &ScoreArgs) -> anyhow::Result<i32> {
    let mut manifest = RunManifest::new("score");
    let model = load_model(&args.model, &mut manifest)?;
    let cfg = args.quality.resolve(model.config.num_blocks)?;
    manifest.quality(&args.model, &cfg);
    manifest.set("per_patch", args.per_patch);

    // Read serially so the manifest lists inputs in argument order.
    let inputs: Vec<(PathBuf, std::io::Result<Vec<u8>>)> = args
        .images
        .iter()
        .map(|p| (p.clone(), std::fs::read(p)))
        .collect();
    for (path, bytes) in &inputs {
        if let Ok(bytes) = bytes {
            manifest.input(path, bytes);
        }
    }

    let pool = thread_pool(args.jobs)?;
    let results: Vec<crate::Result<QualityResult>> = pool.install(|| {
        inputs
            .par_iter()
            .map(|(path, bytes)| match bytes {
                Ok(bytes) => score_one(bytes, &model, &cfg),
                Err(e) => Err(crate::Error::io(
                    path.clone(),
                    std::io::Error::new(e.kind(), e.to_string()),
                )),
            })
            .collect()
    });

    let mut scores = String::new();
    let mut patches = String::new();
    for ((path, _), result) in inputs.iter().zip(&results) {
        match result {
            Ok(r) => {
                let _ = writeln!(scores, "{}\t{}", path.display(), r.image_score);
                if args.per_patch {
                    for (p, ((d, q), w)) in r
                        .per_patch_mean_distance
                        .iter()
                        .zip(&r.per_patch_quality)
                        .zip(&r.patch_weights)
                        .enumerate()
                    {
                        let _ = writeln!(patches, "{}\t{p}\t{d}\t{q}\t{w}", path.display());
                    }
                }
            }
            Err(e) => {
                eprintln!("vitnt: {}: {e}", path.display());
                manifest.failures.push(Failure {
                    path: path.display().to_string(),
                    error: e.to_string(),
                });
            }
        }
    }

    write_file(&args.out, scores.as_bytes())?;
    if args.per_patch {
        write_file(&with_suffix(&args.out, ".patches.tsv"), patches.as_bytes())?;
    }
    manifest.write(&with_suffix(&args.out, ".manifest.json"))?;

    let failed = manifest.failures.len();
    if failed > 0 {
        eprintln!("vitnt: {failed} of {} image(s) failed", inputs.len());
    }
    Ok(if failed == inputs.len() { 1 } else { 0 })
}

pub fn cmd_eval_edc(args: &EvalEdcArgs) -> anyhow::Result<i32> {
    let mut manifest = RunManifest::new("eval-edc");
    let pairs_bytes = read_file(&args.pairs)?;
    let quality_bytes = read_file(&args.qualities)?;
    manifest.input(&args.pairs, &pairs_bytes);
    manifest.input(&args.qualities, &quality_bytes);
    manifest.set("fmr", &args.fmr);
    manifest.set("grid", args.grid);
    manifest.set("pair_quality", args.pair_quality.as_str());

    let pairs = evaluation::parse_pairs(
        std::str::from_utf8(&pairs_bytes).context("pairs file is not UTF-8")?,
        &args.pairs.display().to_string(),
    )?;
    let qualities = evaluation::parse_qualities(
        std::str::from_utf8(&quality_bytes).context("qualities file is not UTF-8")?,
        &args.qualities.display().to_string(),
    )?;
    let pairs = evaluation::attach_qualities(&pairs, &qualities)?;
    if !pairs.iter().any(|p| p.is_genuine) {
        bail!(
            "{}: no genuine comparisons (is_genuine = 1)",
            args.pairs.display()
        );
    }
    if !pairs.iter().any(|p| !p.is_genuine) {
        bail!(
            "{}: no impostor comparisons (is_genuine = 0)",
            args.pairs.display()
        );
    }
    if args.fmr.is_empty() {
        bail!("at least one --fmr target is required");
    }
    let grid = evaluation::reject_grid(args.grid);

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mut summary =
        String::from("fmr_target\tthreshold\tfnmr_at_0\tauc\tpauc25\tbelow_resolution\n");
    for &fmr in &args.fmr {
        let curve = evaluation::edc_curve(&pairs, fmr, &grid, args.pair_quality)?;
        if curve.threshold.below_resolution {
            eprintln!(
                "vitnt: warning: fmr {fmr} is below 1/{} impostor comparisons; threshold sits above the highest impostor score",
                pairs.iter().filter(|p| !p.is_genuine).count()
            );
        }
        write_file(
            &args.out_dir.join(format!("edc_fmr_{fmr}.tsv")),
            evaluation::format_curve(&curve).as_bytes(),
        )?;
        let _ = writeln!(
            summary,
            "{fmr}\t{}\t{}\t{}\t{}\t{}",
            curve.threshold.value,
            curve.samples[0].fnmr,
            curve.auc,
            curve.pauc25,
            u8::from(curve.threshold.below_resolution)
        );
    }
    write_file(&args.out_dir.join("summary.tsv"), summary.as_bytes())?;
    manifest.write(&args.out_dir.join("manifest.json"))?;
    print!("{summary}");
    Ok(0)
}

fn list_ppm(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn cmd_validate_gradient(args: &GradientArgs) -> anyhow::Result<i32> {
    let mut manifest = RunManifest::new("validate-gradient");
    let model = load_model(&args.model, &mut manifest)?;
    let cfg = args.quality.resolve(model.config.num_blocks)?;
    manifest.quality(&args.model, &cfg);

    let kinds = args
        .kinds
        .clone()
        .unwrap_or_else(|| DegradationKind::ALL.to_vec());
    let levels: Vec<Level> = match &args.levels {
        Some(ls) => ls
            .iter()
            .map(|&l| Level::new(l))
            .collect::<crate::Result<_>>()?,
        None => Level::all().collect(),
    };
    manifest.set(
        "kinds",
        kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>(),
    );
    manifest.set("levels", levels.iter().map(|l| l.get()).collect::<Vec<_>>());
    manifest.set("seed", args.seed);

    let paths = list_ppm(&args.images)?;
    if paths.is_empty() {
        bail!("no .ppm images in {}", args.images.display());
    }
    let mut sources = Vec::with_capacity(paths.len());
    for path in &paths {
        let bytes = read_file(path)?;
        manifest.input(path, &bytes);
        sources.push(
            degradation::decode_ppm(&bytes)
                .with_context(|| format!("reading {}", path.display()))?,
        );
    }

    let pool = thread_pool(args.jobs)?;
    let groups = degradation::make_quality_groups(&sources, &kinds, &levels, args.seed)?;
    let distances: Vec<f64> = pool.install(|| {
        groups
            .par_iter()
            .map(|g| -> crate::Result<f64> {
                let img = vit::preprocess(&g.image, model.config.image_size)?;
                Ok(quality::score_image(&img, &model, &cfg)?.mean_distance())
            })
            .collect::<crate::Result<Vec<_>>>()
    })?;

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;

    let mut samples = String::from("source\tkind\tlevel\tmean_distance\n");
    for (g, d) in groups.iter().zip(&distances) {
        let _ = writeln!(
            samples,
            "{}\t{}\t{}\t{d}",
            paths[g.source].display(),
            g.kind,
            g.level
        );
    }
    write_file(
        &args.out_dir.join("gradient_samples.tsv"),
        samples.as_bytes(),
    )?;

    if args.save_images {
        let image_dir = args.out_dir.join("images");
        std::fs::create_dir_all(&image_dir)?;
        let mut entries = Vec::with_capacity(groups.len());
        for g in &groups {
            let name = format!("src{:04}_{}_l{:02}.ppm", g.source, g.kind, g.level.get());
            let path = image_dir.join(name);
            degradation::write_ppm(&g.image, &path)?;
            entries.push((g.level, path));
        }
        degradation::write_group_manifest(&entries, args.out_dir.join("groups.tsv"))?;
    }

    let table = gradient_table(&groups, &distances);
    write_file(&args.out_dir.join("gradient_stats.tsv"), table.as_bytes())?;
    manifest.write(&args.out_dir.join("manifest.json"))?;
    print!("{table}");
    Ok(0)
}

fn gradient_table(groups: &[degradation::GroupedImage], distances: &[f64]) -> String {
    let levelled: Vec<(u8, f64)> = groups
        .iter()
        .zip(distances)
        .map(|(g, &d)| (g.level.get(), d))
        .collect();
    let mut out = String::from("level\tcount\tq1\tmedian\tq3\twhisker_lo\twhisker_hi\tmean\n");
    for s in evaluation::group_distance_stats(&levelled) {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.level, s.count, s.q1, s.median, s.q3, s.whisker_lo, s.whisker_hi, s.mean
        );
    }
    let x: Vec<f64> = levelled.iter().map(|&(l, _)| f64::from(l)).collect();
    let y: Vec<f64> = levelled.iter().map(|&(_, d)| d).collect();
    match evaluation::spearman(&x, &y) {
        Ok(rho) => {
            let _ = writeln!(out, "# spearman(level, mean_distance)={rho}");
        }
        Err(e) => {
            let _ = writeln!(out, "# spearman(level, mean_distance)=undefined\t{e}");
        }
    }
    out
}

pub fn cmd_inspect_model(args: &InspectArgs) -> anyhow::Result<i32> {
    let model = model_io::read_model_unchecked(&args.model)?;
    let mut out = String::from("# config\n");
    out.push_str(&serde_json::to_string_pretty(&model.config)?);
    out.push('\n');
    let _ = writeln!(out, "# tensors ({})", model.tensors.len());
    for (name, t) in &model.tensors {
        let _ = writeln!(out, "{name}\t{:?}", t.shape());
    }
    let violations = model_io::validate_model(&model);
    let _ = writeln!(out, "# violations ({})", violations.len());
    for v in &violations {
        let _ = writeln!(out, "{v}");
    }
    print!("{out}");
    Ok(if violations.is_empty() { 0 } else { 1 })
}

pub fn cmd_init_model(args: &InitArgs) -> anyhow::Result<i32> {
    let config = VitConfig {
        image_size: args.image_size,
        patch_size: args.patch_size,
        embed_dim: args.embed_dim,
        num_blocks: args.num_blocks,
        num_heads: args.num_heads,
        mlp_ratio: args.mlp_ratio,
        has_class_token: args.class_token || args.pool_class_token,
        feature_pooling: if args.pool_class_token {
            FeaturePooling::ClassToken
        } else {
            FeaturePooling::MeanPatch
        },
    };
    let problems = config.problems();
    if !problems.is_empty() {
        bail!("invalid config: {}", problems.join("; "));
    }
    let model = if args.neutral {
        VitModel::neutral(config)
    } else {
        VitModel::random(config, args.seed)
    };
    model_io::write_model(&model, &args.out)?;
    Ok(0)
}

pub fn run(cli: &Cli) -> anyhow::Result<i32> {
    match &cli.command {
        Command::Score(a) => cmd_score(a),
        Command::EvalEdc(a) => cmd_eval_edc(a),
        Command::ValidateGradient(a) => cmd_validate_gradient(a),
        Command::InspectModel(a) => cmd_inspect_model(a),
        Command::InitModel(a) => cmd_init_model(a),
    }
}

/// Parses arguments, runs the command, and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("vitnt: error: {e:#}");
            1
        }
    }
}
