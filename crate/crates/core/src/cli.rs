//! The `normkit` command line.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage error, 3 input error,
//! 4 training diverged.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::compare::{compare_norms, summary_table};
use crate::error::{Error, Result};
use crate::generator::{Generator, NormKind};
use crate::gradcheck::{gradcheck, Subject, DEFAULT_STEP};
use crate::io::{load_generator, load_weights, read_ppm, save_generator, write_ppm, ImageRgb};
use crate::layers::PaddingMode;
use crate::loss::FeatureExtractor;
use crate::rng::RngStream;
use crate::synth;
use crate::tensor::{sample_gaussian, Tensor4};
use crate::train::{train_with, AdamConfig, RunReport, TrainConfig, TrainData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "normkit",
    version,
    about = "Feed-forward stylization with batch, instance or no normalization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a generator and write its weights plus a loss log.
    Train(TrainArgs),
    /// Run a trained generator on one image.
    Stylize(StylizeArgs),
    /// Train batch-norm and instance-norm generators side by side.
    CompareNorms(CompareArgs),
    /// Check every backward pass against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a small synthetic dataset (content images and a style image).
    DemoData(DemoArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Style image (binary PPM).
    #[arg(long)]
    pub style: PathBuf,
    /// Directory of `.ppm` content images, all the same size.
    #[arg(long)]
    pub content_dir: PathBuf,
    #[arg(long, default_value = "reflect")]
    pub padding: PaddingMode,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    #[arg(long, default_value_t = 1e-3, value_parser = positive_f64)]
    pub lr: f64,
    #[arg(long, default_value_t = crate::loss::DEFAULT_CONTENT_WEIGHT)]
    pub content_weight: f64,
    #[arg(long, default_value_t = crate::loss::DEFAULT_STYLE_WEIGHT)]
    pub style_weight: f64,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub base_channels: u64,
    #[arg(long, default_value_t = 3)]
    pub residual_blocks: usize,
    #[arg(long, default_value_t = 1)]
    pub noise_channels: usize,
    /// Seed of the random feature extractor used by the loss.
    #[arg(long, default_value_t = 0)]
    pub extractor_seed: u64,
    /// Load extractor weights (`block{k}.weight` entries) instead.
    #[arg(long)]
    pub extractor_weights: Option<PathBuf>,
    /// Log the loss every N steps (0 disables).
    #[arg(long, default_value_t = 20)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "instance")]
    pub norm: NormKind,
    /// Weight file to write; the report goes to `<out>.log`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StylizeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Seed of the noise input.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated training seeds.
    #[arg(long, value_parser = seed_list, default_value = "1,2,3")]
    pub seeds: SeedList,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Image stylized by every trained generator. Defaults to a synthetic
    /// image outside the training set.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `all` or one subject name.
    #[arg(long, default_value = "all", value_parser = subject_list)]
    pub subject: SubjectList,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_STEP, value_parser = positive_f64)]
    pub h: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SeedList(pub Vec<u64>);

#[derive(Clone, Debug)]
pub struct SubjectList(pub Vec<Subject>);

fn seed_list(s: &str) -> std::result::Result<SeedList, String> {
    let seeds = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<u64>().map_err(|e| format!("bad seed `{p}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        return Err("at least one seed is required".into());
    }
    Ok(SeedList(seeds))
}

fn subject_list(s: &str) -> std::result::Result<SubjectList, String> {
    if s == "all" {
        return Ok(SubjectList(Subject::ALL.to_vec()));
    }
    s.parse::<Subject>()
        .map(|k| SubjectList(vec![k]))
        .map_err(|_| {
            let names: Vec<&str> = Subject::ALL.iter().map(|k| k.name()).collect();
            format!(
                "unknown subject `{s}`, expected all or one of: {}",
                names.join(", ")
            )
        })
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("must be a positive number, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_INPUT,
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Stylize(a) => cmd_stylize(&a),
        Command::CompareNorms(a) => cmd_compare_norms(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::DemoData(a) => cmd_demo_data(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn input_error(path: &Path, message: impl Into<String>) -> Error {
    Error::InputError {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_image(path: &Path) -> Result<Tensor4> {
    match read_ppm(path) {
        Ok(img) => Ok(img.to_tensor()),
        Err(Error::FormatError { offset, message }) => Err(input_error(
            path,
            format!("format error at byte {offset}: {message}"),
        )),
        Err(e) => Err(e),
    }
}

fn load_data(args: &DataArgs) -> Result<TrainData> {
    let dir = &args.content_dir;
    let listing = fs::read_dir(dir).map_err(|e| input_error(dir, e.to_string()))?;
    let mut paths = Vec::new();
    for entry in listing {
        let path = entry.map_err(|e| input_error(dir, e.to_string()))?.path();
        if path
            .extension()
            .is_some_and(|x| x.eq_ignore_ascii_case("ppm"))
        {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(input_error(dir, "no .ppm content images"));
    }
    let contents = paths
        .iter()
        .map(|p| read_image(p))
        .collect::<Result<Vec<_>>>()?;
    let style = read_image(&args.style)?;
    TrainData::new(contents, style).map_err(|e| input_error(dir, e.to_string()))
}

fn extractor(args: &DataArgs) -> Result<FeatureExtractor> {
    match &args.extractor_weights {
        Some(path) => {
            let entries = load_weights(path)?;
            FeatureExtractor::from_named(&entries).map_err(|e| input_error(path, e.to_string()))
        }
        None => Ok(FeatureExtractor::seeded(args.extractor_seed)),
    }
}

fn train_config(args: &DataArgs, norm: NormKind) -> TrainConfig {
    let base = TrainConfig::default();
    TrainConfig {
        seed: args.seed,
        steps: args.steps as usize,
        batch_size: args.batch_size as usize,
        adam: AdamConfig {
            learning_rate: args.lr,
            ..AdamConfig::default()
        },
        content_weight: args.content_weight,
        style_weight: args.style_weight,
        generator: crate::generator::GeneratorConfig {
            norm,
            padding: args.padding,
            base_channels: args.base_channels as usize,
            residual_blocks: args.residual_blocks,
            noise_channels: args.noise_channels,
            ..base.generator
        },
        extractor_seed: args.extractor_seed,
        log_every: args.log_every,
    }
}

fn with_extractor_note(mut report: RunReport, args: &DataArgs) -> RunReport {
    if let Some(p) = &args.extractor_weights {
        report
            .config
            .push(("extractor_weights".into(), p.display().to_string()));
    }
    report
}

fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let data = load_data(&args.data)?;
    let phi = extractor(&args.data)?;
    let config = train_config(&args.data, args.norm);
    let (generator, report) = train_with(&config, &data, &phi)?;
    let report = with_extractor_note(report, &args.data);
    save_generator(&args.out, &generator)?;
    fs::write(log_path(&args.out), report.to_text())?;
    info!(
        "trained {} steps in {:.1?}: loss {:.6} -> {:.6}",
        report.losses.len(),
        report.wall_time,
        report.initial_loss(),
        report.final_loss()
    );
    Ok(EXIT_OK)
}

/// Runs `generator` on `input` with noise drawn from `seed`.
pub fn stylize(generator: &Generator, input: &Tensor4, seed: u64) -> Result<Tensor4> {
    let nc = generator.config().noise_channels;
    let z = if nc > 0 {
        let s = input.shape();
        Some(sample_gaussian(
            &mut RngStream::new(seed),
            (s.t, nc, s.w, s.h),
        )?)
    } else {
        None
    };
    generator.infer(input, z.as_ref())
}

fn cmd_stylize(args: &StylizeArgs) -> Result<i32> {
    let generator = load_generator(&args.weights).map_err(|e| match e {
        Error::InputError { .. } => e,
        other => input_error(&args.weights, other.to_string()),
    })?;
    let input = read_image(&args.input)?;
    let out = stylize(&generator, &input, args.seed)
        .map_err(|e| input_error(&args.input, e.to_string()))?;
    write_ppm(&args.output, &ImageRgb::from_tensor(&out)?)?;
    Ok(EXIT_OK)
}

fn cmd_compare_norms(args: &CompareArgs) -> Result<i32> {
    let data = load_data(&args.data)?;
    let phi = extractor(&args.data)?;
    let holdout = match &args.holdout {
        Some(p) => read_image(p)?,
        None => {
            let s = data.contents()[0].shape();
            synth::content_image(s.w.max(s.h), args.data.seed, u64::MAX).to_tensor()
        }
    };
    let config = train_config(&args.data, NormKind::Instance);
    let rows = compare_norms(&config, &data, &phi, &args.seeds.0)?;
    let dir = &args.out_dir;
    fs::create_dir_all(dir)?;
    for row in &rows {
        for (run, name) in [(&row.batch, "batch"), (&row.instance, "instance")] {
            let stem = format!("seed{}-{name}", row.seed);
            let report = with_extractor_note(run.report.clone(), &args.data);
            fs::write(dir.join(format!("{stem}.log")), report.to_text())?;
            save_generator(dir.join(format!("{stem}.nrmk")), &run.generator)?;
            let out = stylize(&run.generator, &holdout, args.data.seed)?;
            write_ppm(
                dir.join(format!("{stem}.ppm")),
                &ImageRgb::from_tensor(&out)?,
            )?;
        }
    }
    let summary = summary_table(&rows);
    fs::write(dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let mut ok = true;
    println!("subject group checked max_rel_error status");
    for &subject in &args.subject.0 {
        let report = gradcheck(subject, args.seed, args.h)?;
        for g in &report.groups {
            let pass = g.max_rel_error < args.tol;
            ok &= pass;
            println!(
                "{} {} {} {:.3e} {}",
                g.subject,
                g.group,
                g.checked,
                g.max_rel_error,
                if pass { "ok" } else { "FAIL" }
            );
        }
    }
    println!(
        "{} (tol {:e})",
        if ok { "all passed" } else { "failures" },
        args.tol
    );
    Ok(if ok { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_demo_data(args: &DemoArgs) -> Result<i32> {
    if args.size == 0 || args.count == 0 {
        return Err(Error::InvalidArgument("count and size must be >= 1".into()));
    }
    let content = args.out_dir.join("content");
    fs::create_dir_all(&content)?;
    for (i, img) in synth::content_images(args.count, args.size, args.seed)
        .iter()
        .enumerate()
    {
        write_ppm(content.join(format!("{i:03}.ppm")), img)?;
    }
    write_ppm(
        args.out_dir.join("style.ppm"),
        &synth::style_image(args.size),
    )?;
    Ok(EXIT_OK)
}
