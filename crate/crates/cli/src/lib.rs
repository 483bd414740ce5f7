//! The `textcav` command line.
//!
//! Human-readable tables go to standard output; machine-readable JSON is
//! written only to the file named by `--out`. Relative paths are resolved
//! against `TEXTCAV_DATA_DIR` when it is set.
//!
//! Exit codes: 0 success, 1 usage, 2 bad or inconsistent data, 3 numerical
//! failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use textcav_core::cav::{compare_models, rank_concepts, RankOptions, SensitivityRanking};
use textcav_core::concepts::{
    category_report, crs_report, dedup_concepts, filter_concepts, load_annotations, DEFAULT_DEDUP_THRESHOLD,
};
use textcav_core::store::{
    load_concepts, load_feature_set, load_head, meta_path_for, read_json, save_concepts, write_atomic, Workspace,
};
use textcav_core::synth::{gen_world, inject_bias, BiasSpec, WorldParams};
use textcav_core::trainer::{load_checkpoint, save_checkpoint, train_maps, TrainingConfig};

pub const DATA_DIR_ENV: &str = "TEXTCAV_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] textcav_core::Error),
    #[error("{0}")]
    Data(String),
    #[error("writing output: {0}")]
    Output(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "textcav", version, about = "Explain image classifiers with text concepts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the feature maps h and g on paired image features.
    Train(TrainArgs),
    /// Rank concepts by directional derivative for one class.
    Rank(RankArgs),
    /// Concept list maintenance.
    #[command(subcommand)]
    Concepts(ConceptsCommand),
    /// Generate a synthetic workspace with known ground truth.
    Synth(SynthArgs),
    /// Concept relevance score of a saved ranking.
    Crs(CrsArgs),
    /// Count an annotation category in two saved rankings.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub target_features: PathBuf,
    #[arg(long)]
    pub vl_image_features: PathBuf,
    #[arg(long)]
    pub vl_text_features: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Weight of the cycle loss.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Square the cycle residual norms.
    #[arg(long)]
    pub cycle_squared: bool,
    /// Checkpoint directory to create or replace.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub map: PathBuf,
    /// Classifier head weights (`.fmx` with a `.meta.json` sidecar).
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub concepts: PathBuf,
    #[arg(long)]
    pub class: String,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ConceptsCommand {
    /// Filter articles, plurals and long phrases, then drop near duplicates.
    Prep(PrepArgs),
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DEDUP_THRESHOLD)]
    pub dedup_threshold: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `N` for a square world or `N,M` for vision-language and target dims.
    #[arg(long, default_value = "32", value_parser = parse_dims)]
    pub dims: (usize, usize),
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Remove positives of CLASS that lack attribute ATTR.
    #[arg(long, value_parser = parse_bias)]
    pub bias: Option<BiasSpec>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CrsArgs {
    #[arg(long)]
    pub ranking: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub top: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub category: String,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub top: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let parse = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("bad dimension {p:?}: {e}"));
    match s.split_once(',') {
        Some((n, m)) => Ok((parse(n)?, parse(m)?)),
        None => parse(s).map(|n| (n, n)),
    }
}

fn parse_bias(s: &str) -> Result<BiasSpec, String> {
    match s.split_once(':') {
        Some((class, attr)) if !class.is_empty() && !attr.is_empty() => Ok(BiasSpec {
            target_class: class.to_owned(),
            proxy_attribute: attr.to_owned(),
        }),
        _ => Err(format!("expected CLASS:ATTR, got {s:?}")),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

struct Paths {
    base: Option<PathBuf>,
}

impl Paths {
    fn from_env() -> Self {
        Self {
            base: std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from),
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let paths = Paths::from_env();
    match &cli.command {
        Command::Train(a) => train(a, &paths, out),
        Command::Rank(a) => rank(a, &paths, out),
        Command::Concepts(ConceptsCommand::Prep(a)) => prep(a, &paths, out),
        Command::Synth(a) => synth(a, &paths, out),
        Command::Crs(a) => crs(a, &paths, out),
        Command::Compare(a) => compare(a, &paths, out),
    }
}

fn require_top(top: usize) -> Result<(), CliError> {
    if top == 0 {
        Err(CliError::Usage("--top must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn write_out(path: Option<&PathBuf>, paths: &Paths, body: &str) -> Result<(), CliError> {
    if let Some(p) = path {
        let p = paths.resolve(p);
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        }
        write_atomic(&p, body.as_bytes())?;
    }
    Ok(())
}

fn train(a: &TrainArgs, paths: &Paths, out: &mut dyn Write) -> Result<(), CliError> {
    let load = |p: &Path| {
        let p = paths.resolve(p);
        load_feature_set(&p, meta_path_for(&p))
    };
    let ws = Workspace::new(
        load(&a.target_features)?,
        load(&a.vl_image_features)?,
        a.vl_text_features.as_deref().map(load).transpose()?,
        None,
    )?;
    let config = TrainingConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        cycle_weight: a.lambda,
        seed: a.seed,
        cycle_squared: a.cycle_squared,
        ..TrainingConfig::default()
    };
    let outcome = train_maps(&ws, &config)?;
    let dir = paths.resolve(&a.out);
    save_checkpoint(&dir, &outcome.maps, &outcome.report)?;
    let last = outcome.report.final_epoch();
    writeln!(
        out,
        "trained {}x{} maps on {} samples ({} held out) for {} epochs",
        ws.target_dim(),
        ws.vl_dim(),
        outcome.report.history.train_samples,
        outcome.report.history.held_out_samples,
        last.epoch
    )?;
    writeln!(out, "{:<10} {:>14} {:>14}", "loss", "train", "held-out")?;
    let held = last.held_out;
    let rows: [(&str, f64, Option<f64>); 5] = [
        ("mse", last.train.mse, held.map(|h| h.mse)),
        ("cycle_t", last.train.cycle_target, held.map(|h| h.cycle_target)),
        ("cycle_i", last.train.cycle_vl_image, held.map(|h| h.cycle_vl_image)),
        ("cycle_txt", last.train.cycle_vl_text, held.map(|h| h.cycle_vl_text)),
        ("total", last.train.total, held.map(|h| h.total)),
    ];
    for (name, t, h) in rows {
        let h = h.map_or_else(|| "-".to_owned(), |v| format!("{v:.6e}"));
        writeln!(out, "{name:<10} {t:>14.6e} {h:>14}")?;
    }
    writeln!(out, "checkpoint written to {}", dir.display())?;
    Ok(())
}

fn file_id(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Ranks with ids derived from file names so the JSON equals what the
/// service returns for the same workspace files.
pub fn rank_files(map: &Path, head: &Path, concepts: &Path, class: &str, top: usize) -> Result<SensitivityRanking, CliError> {
    require_top(top)?;
    let maps = load_checkpoint(map)?;
    let (head_w, _) = load_head(head, meta_path_for(head))?;
    let concepts = load_concepts(concepts)?;
    let k = head_w.class_index(class).ok_or_else(|| {
        CliError::Data(format!(
            "unknown class {class:?}; valid classes: {}",
            head_w.class_names.join(", ")
        ))
    })?;
    let map_dir = std::fs::canonicalize(map).unwrap_or_else(|_| map.to_path_buf());
    let opts = RankOptions {
        map_id: map_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        head_id: file_id(head),
        ..RankOptions::default()
    };
    Ok(rank_concepts(&head_w, k, concepts.entries(), &maps.h, top, &opts)?)
}

fn rank(a: &RankArgs, paths: &Paths, out: &mut dyn Write) -> Result<(), CliError> {
    let ranking = rank_files(
        &paths.resolve(&a.map),
        &paths.resolve(&a.head),
        &paths.resolve(&a.concepts),
        &a.class,
        a.top,
    )?;
    writeln!(
        out,
        "class {} | map {} | head {}",
        ranking.class_name, ranking.map_id, ranking.head_id
    )?;
    writeln!(out, "{:>4}  {:>14}  concept", "rank", "score")?;
    for (i, e) in ranking.entries.iter().enumerate() {
        writeln!(out, "{:>4}  {:>14.6e}  {}", i + 1, e.score, e.text)?;
    }
    write_out(a.out.as_ref(), paths, &ranking.to_json())
}

fn prep(a: &PrepArgs, paths: &Paths, out: &mut dyn Write) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.dedup_threshold) {
        return Err(CliError::Usage(format!(
            "--dedup-threshold must lie in [0, 1], got {}",
            a.dedup_threshold
        )));
    }
    let input = load_concepts(paths.resolve(&a.input))?;
    let (filtered, stats) = filter_concepts(&input);
    let deduped = dedup_concepts(&filtered, a.dedup_threshold)?;
    let dest = paths.resolve(&a.out);
    save_concepts(&deduped, &dest)?;
    writeln!(out, "{:<12} {:>6}", "input", input.len())?;
    writeln!(out, "{:<12} {:>6}", "articles", stats.articles)?;
    writeln!(out, "{:<12} {:>6}", "too long", stats.too_long)?;
    writeln!(out, "{:<12} {:>6}", "plurals", stats.plurals)?;
    writeln!(out, "{:<12} {:>6}", "duplicates", filtered.len() - deduped.len())?;
    writeln!(out, "{:<12} {:>6}", "kept", deduped.len())?;
    writeln!(out, "wrote {}", dest.display())?;
    Ok(())
}

fn synth(a: &SynthArgs, paths: &Paths, out: &mut dyn Write) -> Result<(), CliError> {
    let params = WorldParams::new(a.seed, a.dims.0, a.dims.1, a.classes, a.samples, a.noise);
    let mut world = gen_world(&params)?;
    if let Some(spec) = &a.bias {
        world = inject_bias(&world, spec)?;
    }
    let dir = paths.resolve(&a.out_dir);
    world.export(&dir)?;
    writeln!(
        out,
        "synthetic world seed {}: {} samples, vl dim {}, target dim {}, {} classes, {} concepts",
        a.seed,
        world.target_image.rows(),
        params.vl_dim,
        params.target_dim,
        world.class_names.len(),
        world.bank.len()
    )?;
    match &world.bias {
        Some(info) => writeln!(
            out,
            "bias: removed {} positives of {} without {} ({} remain); heads clean, biased",
            info.removed, info.spec.target_class, info.spec.proxy_attribute, info.remaining
        )?,
        None => writeln!(out, "heads: clean")?,
    }
    writeln!(out, "wrote {}", dir.display())?;
    Ok(())
}

fn load_ranking(path: &Path) -> Result<SensitivityRanking, CliError> {
    Ok(read_json(path)?)
}

fn crs(a: &CrsArgs, paths: &Paths, out: &mut dyn Write) -> Result<(), CliError> {
    require_top(a.top)?;
    let ranking = load_ranking(&paths.resolve(&a.ranking))?;
    let annotations = load_annotations(paths.resolve(&a.annotations))?;
    let report = crs_report(&annotations, &ranking, a.top)?;
    writeln!(
        out,
        "class {} | map {} | head {}",
        report.class, report.map_id, report.head_id
    )?;
    writeln!(out, "CRS@{} = {} ({}/{})", report.top, report.crs, report.relevant, report.top)?;
    for (cat, n) in &report.categories {
        writeln!(out, "  {cat}: {n}/{}", report.top)?;
    }
    let mut json = serde_json::to_string_pretty(&report).expect("serializable report");
    json.push('\n');
    write_out(a.out.as_ref(), paths, &json)
}

fn truncated(mut r: SensitivityRanking, top: usize) -> SensitivityRanking {
    r.entries.truncate(top);
    r
}

fn compare(a: &CompareArgs, paths: &Paths, out: &mut dyn Write) -> Result<(), CliError> {
    require_top(a.top)?;
    let ra = truncated(load_ranking(&paths.resolve(&a.a))?, a.top);
    let rb = truncated(load_ranking(&paths.resolve(&a.b))?, a.top);
    if ra.class_name != rb.class_name {
        return Err(CliError::Data(format!(
            "rankings are for different classes ({} vs {})",
            ra.class_name, rb.class_name
        )));
    }
    let annotations = load_annotations(paths.resolve(&a.annotations))?;
    let (ca, na) = category_report(&annotations, &ra, &a.category, a.top)?;
    let (cb, nb) = category_report(&annotations, &rb, &a.category, a.top)?;
    writeln!(out, "class {} | category {}", ra.class_name, a.category)?;
    writeln!(out, "  a ({} / {}): {ca}/{na}", ra.head_id, ra.map_id)?;
    writeln!(out, "  b ({} / {}): {cb}/{nb}", rb.head_id, rb.map_id)?;
    if a.out.is_some() {
        let report = compare_models(&ra, &rb, &annotations.category_labels(&ra.class_name))?;
        let mut json = serde_json::to_string_pretty(&report).expect("serializable report");
        json.push('\n');
        write_out(a.out.as_ref(), paths, &json)?;
    }
    Ok(())
}
