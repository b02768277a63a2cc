//! Command surface: key management, anonymization, recovery, training,
//! evaluation and identity-embedding export.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use clap::{ArgGroup, Parser, Subcommand};
use dbaf_core::checkpoint::{load_from_path, Checkpoint};
use dbaf_core::eval::{self, EvalReport, RecognitionConfig};
use dbaf_core::kria::{generate_key, read_key_file, write_key_file, AnonKey, KeySource};
use dbaf_core::losses::Embedder;
use dbaf_core::model::{AblationMode, Pipeline};
use dbaf_core::training::{self, Dataset, StepRecord, TrainConfig};
use dbaf_core::types::ImageTensor;
use dbaf_core::{imageio, DbafError};
use rayon::prelude::*;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dbaf", version, about = "Reversible keyed face de-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a key file from a seed or passphrase.
    #[command(group(ArgGroup::new("source").required(true).args(["seed", "passphrase"])))]
    GenKey {
        /// 64-bit key seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Passphrase; hashed to a 64-bit seed.
        #[arg(long)]
        passphrase: Option<String>,
        /// Output key file (dbaf-key-v1).
        #[arg(long)]
        out: PathBuf,
        /// Additionally store the raw key matrices in the file.
        #[arg(long)]
        export_raw: bool,
        /// Key width; must match the model the key will be used with.
        #[arg(long, default_value_t = 64)]
        d: usize,
    },
    /// Anonymize one image or a directory of images under a key.
    #[command(group(ArgGroup::new("keysrc").required(true).args(["key", "key_dir"])))]
    Anonymize {
        #[arg(long)]
        model: PathBuf,
        /// Key file applied to every input.
        #[arg(long)]
        key: Option<PathBuf>,
        /// Directory of per-image key files (<basename>.json).
        #[arg(long)]
        key_dir: Option<PathBuf>,
        #[arg(long = "in", value_name = "IN")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover images with the same keyed mapping; the matching key restores
    /// the original identity.
    #[command(group(ArgGroup::new("keysrc").required(true).args(["key", "key_dir"])))]
    Recover {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        key_dir: Option<PathBuf>,
        #[arg(long = "in", value_name = "IN")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage 1 or stage 2, or run an ablation configuration.
    #[command(group(ArgGroup::new("data_source").args(["data", "synthetic"])))]
    Train {
        /// TOML file mirroring the training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stage: Option<u8>,
        /// Directory of training PNGs.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use a procedural set of this many faces instead of --data.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Ablation mode: full, single_stage, no_cid, no_maar.
        #[arg(long)]
        ablation: Option<String>,
        /// Stage-1 checkpoint to initialize stage 2 from.
        #[arg(long)]
        from_stage1: Option<PathBuf>,
        /// Continue training from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output checkpoint path (dbaf-ckpt-v1).
        #[arg(long)]
        out: PathBuf,
        /// Line-delimited loss log destination.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compute metrics over an image set and write a structured report.
    #[command(group(ArgGroup::new("gen_source").required(true).args(["generated", "key"])))]
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory of original images.
        #[arg(long)]
        set: PathBuf,
        /// Directory of already generated images (paired by file name).
        #[arg(long)]
        generated: Option<PathBuf>,
        /// Key file; generates anonymized counterparts with --model.
        #[arg(long)]
        key: Option<PathBuf>,
        /// Comma-separated list: mse,psnr,lpips,fid,recognition-arcface,recognition-facenet.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Anonymize every image under every key and export identity embeddings.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        set: Option<PathBuf>,
        /// Use a procedural set of this many faces instead of --set.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 200)]
        num_keys: usize,
        #[arg(long, default_value_t = 1000)]
        base_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<DbafError> for CliError {
    fn from(e: DbafError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if !path.is_dir() {
        return Err(usage(format!("{what} is not a directory: {}", path.display())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenKey { seed, passphrase, out, export_raw, d } => {
            cmd_gen_key(seed, passphrase, &out, export_raw, d)
        }
        Command::Anonymize { model, key, key_dir, input, out } => {
            cmd_apply("anonymize", &model, key.as_deref(), key_dir.as_deref(), &input, &out)
        }
        Command::Recover { model, key, key_dir, input, out } => {
            cmd_apply("recover", &model, key.as_deref(), key_dir.as_deref(), &input, &out)
        }
        Command::Train {
            config,
            stage,
            data,
            synthetic,
            steps,
            batch_size,
            learning_rate,
            ablation,
            from_stage1,
            resume,
            out,
            log,
        } => cmd_train(TrainArgs {
            config,
            stage,
            data,
            synthetic,
            steps,
            batch_size,
            learning_rate,
            ablation,
            from_stage1,
            resume,
            out,
            log,
        }),
        Command::Evaluate { model, set, generated, key, metrics, report } => {
            cmd_evaluate(model.as_deref(), &set, generated.as_deref(), key.as_deref(), &metrics, &report)
        }
        Command::ExportEmbeddings { model, set, synthetic, num_keys, base_seed, out } => {
            cmd_export_embeddings(&model, set.as_deref(), synthetic, num_keys, base_seed, &out)
        }
    }
}

// ---- gen-key ----

fn cmd_gen_key(
    seed: Option<u64>,
    passphrase: Option<String>,
    out: &Path,
    export_raw: bool,
    d: usize,
) -> CliResult<()> {
    let source = match (seed, passphrase) {
        (Some(s), None) => KeySource::Seed(s),
        (None, Some(p)) => KeySource::Passphrase(p),
        _ => return Err(usage("exactly one of --seed or --passphrase is required")),
    };
    let key = generate_key(&source, d).map_err(|e| usage(e.to_string()))?;
    let mut buf = Vec::new();
    write_key_file(&key, &mut buf, export_raw)?;
    write_atomic(out, &buf)?;
    println!("key fingerprint: {}", key.fingerprint());
    Ok(())
}

// ---- anonymize / recover ----

fn load_model(path: &Path) -> CliResult<Checkpoint> {
    require_file(path, "model checkpoint")?;
    Ok(load_from_path(path)?)
}

fn load_key(path: &Path) -> CliResult<AnonKey> {
    require_file(path, "key file")?;
    let file = std::fs::File::open(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(read_key_file(file)?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    tmp.write_all(bytes).map_err(|e| CliError::Runtime(e.to_string()))?;
    tmp.persist(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

fn png_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Runtime(e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_apply(
    verb: &str,
    model_path: &Path,
    key: Option<&Path>,
    key_dir: Option<&Path>,
    input: &Path,
    out: &Path,
) -> CliResult<()> {
    let ckpt = load_model(model_path)?;
    let pipeline = Pipeline::new(ckpt.model);
    let shared_key = key.map(load_key).transpose()?;
    if let Some(dir) = key_dir {
        require_dir(dir, "key directory")?;
    }

    let key_for = |image_path: &Path| -> CliResult<AnonKey> {
        match (&shared_key, key_dir) {
            (Some(k), _) => Ok(k.clone()),
            (None, Some(dir)) => {
                let stem = image_path
                    .file_stem()
                    .ok_or_else(|| usage("input file has no stem"))?;
                let mut key_path = dir.join(stem);
                key_path.set_extension("json");
                load_key(&key_path)
            }
            (None, None) => Err(usage("either --key or --key-dir is required")),
        }
    };

    let apply_one = |src: &Path, dst: &Path| -> CliResult<()> {
        let image = imageio::load_png(src)?;
        let k = key_for(src)?;
        let result = pipeline.anonymize(&image, &k)?;
        write_atomic(dst, &imageio::encode_png(&result)?)
    };

    if input.is_file() {
        apply_one(input, out)?;
        println!("{verb}: wrote {}", out.display());
        Ok(())
    } else if input.is_dir() {
        let files = png_files(input)?;
        if files.is_empty() {
            return Err(usage(format!("no .png files in {}", input.display())));
        }
        std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(e.to_string()))?;
        let failures: Vec<String> = files
            .par_iter()
            .filter_map(|src| {
                let dst = out.join(src.file_name().expect("file name"));
                match apply_one(src, &dst) {
                    Ok(()) => None,
                    Err(e) => Some(format!("{}: {}", src.display(), e.message())),
                }
            })
            .collect();
        println!("{verb}: processed {} of {} files", files.len() - failures.len(), files.len());
        if failures.is_empty() {
            Ok(())
        } else {
            for f in &failures {
                eprintln!("failed {f}");
            }
            Err(CliError::Runtime(format!("{} file(s) failed", failures.len())))
        }
    } else {
        Err(usage(format!("input not found: {}", input.display())))
    }
}

// ---- train ----

struct TrainArgs {
    config: Option<PathBuf>,
    stage: Option<u8>,
    data: Option<PathBuf>,
    synthetic: Option<usize>,
    steps: Option<u64>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    ablation: Option<String>,
    from_stage1: Option<PathBuf>,
    resume: Option<PathBuf>,
    out: PathBuf,
    log: Option<PathBuf>,
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            require_file(path, "config file")?;
            TrainConfig::from_toml_path(path).map_err(|e| usage(e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(stage) = args.stage {
        cfg.stage = stage;
    }
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(mode) = &args.ablation {
        cfg.ablation = mode.parse::<AblationMode>().map_err(|e| usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let dataset = match (&args.data, args.synthetic) {
        (Some(dir), None) => {
            require_dir(dir, "data directory")?;
            Dataset::from_dir(dir)?
        }
        (None, n) => Dataset::synthetic(
            n.unwrap_or(16),
            cfg.model.backbone.image_size,
            cfg.data_seed,
        )?,
        (Some(_), Some(_)) => return Err(usage("--data conflicts with --synthetic")),
    };

    let mut log_file = match &args.log {
        Some(path) => Some(
            std::fs::File::create(path).map_err(|e| CliError::Runtime(e.to_string()))?,
        ),
        None => None,
    };
    let log_every = cfg.log_every.max(1);
    let mut on_step = |rec: &StepRecord| {
        if let Some(f) = log_file.as_mut() {
            let _ = writeln!(f, "{}", rec.to_json_line());
        }
        if rec.step % log_every == 0 {
            println!(
                "stage {} step {:>6}  total {:.5}  d_loss {:.5}",
                rec.stage, rec.step, rec.report.total, rec.d_loss
            );
        }
    };

    let ckpt = if let Some(resume_path) = &args.resume {
        require_file(resume_path, "resume checkpoint")?;
        let prev = load_from_path(resume_path)?;
        training::resume_with(&prev, &dataset, cfg.steps, &mut on_step)?
    } else if cfg.ablation != AblationMode::Full {
        training::run_ablation_with(cfg.ablation, &dataset, &cfg, &mut on_step)?
    } else {
        match cfg.stage {
            1 => training::train_stage1_with(&dataset, &cfg, &mut on_step)?,
            2 => {
                let s1 = args
                    .from_stage1
                    .as_ref()
                    .ok_or_else(|| usage("stage 2 requires --from-stage1 <ckpt>"))?;
                require_file(s1, "stage-1 checkpoint")?;
                let prev = load_from_path(s1)?;
                training::train_stage2_with(&dataset, &cfg, Some(&prev), &mut on_step)?
            }
            other => return Err(usage(format!("unknown stage {other} (expected 1 or 2)"))),
        }
    };

    let mut buf = Vec::new();
    dbaf_core::checkpoint::save(&ckpt, &mut buf)?;
    write_atomic(&args.out, &buf)?;
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

// ---- evaluate ----

const VALID_METRICS: &[&str] =
    &["mse", "psnr", "lpips", "fid", "recognition-arcface", "recognition-facenet"];

fn cmd_evaluate(
    model: Option<&Path>,
    set: &Path,
    generated: Option<&Path>,
    key: Option<&Path>,
    metrics: &[String],
    report_path: &Path,
) -> CliResult<()> {
    if metrics.is_empty() {
        return Err(usage(format!("no metrics given; valid: {}", VALID_METRICS.join(", "))));
    }
    for m in metrics {
        if !VALID_METRICS.contains(&m.as_str()) {
            return Err(usage(format!(
                "unknown metric {m:?}; valid: {}",
                VALID_METRICS.join(", ")
            )));
        }
    }
    let needs_model = metrics.iter().any(|m| m != "mse" && m != "psnr");
    require_dir(set, "image set")?;
    let originals = png_files(set)?;
    if originals.is_empty() {
        return Err(usage(format!("no .png files in {}", set.display())));
    }

    let ckpt = match model {
        Some(p) => Some(load_model(p)?),
        None if needs_model || key.is_some() => {
            return Err(usage("--model is required for the requested metrics"))
        }
        None => None,
    };

    // build (original, generated) pairs
    let mut pairs: Vec<(ImageTensor, ImageTensor)> = Vec::new();
    match (generated, key) {
        (Some(gen_dir), None) => {
            require_dir(gen_dir, "generated set")?;
            for src in &originals {
                let name = src.file_name().expect("file name");
                let gen_path = gen_dir.join(name);
                if !gen_path.is_file() {
                    return Err(usage(format!(
                        "generated counterpart missing: {}",
                        gen_path.display()
                    )));
                }
                pairs.push((imageio::load_png(src)?, imageio::load_png(&gen_path)?));
            }
        }
        (None, Some(key_path)) => {
            let k = load_key(key_path)?;
            let pipeline = Pipeline::new(ckpt.as_ref().expect("model required").model.clone());
            for src in &originals {
                let img = imageio::load_png(src)?;
                let anon = pipeline.anonymize(&img, &k)?;
                pairs.push((img, anon));
            }
        }
        _ => return Err(usage("exactly one of --generated or --key is required")),
    }

    let mut report = EvalReport::new(pairs.len());
    for metric in metrics {
        match metric.as_str() {
            "mse" => {
                let v: f64 = pairs.iter().map(|(a, b)| eval::mse(b, a)).sum::<f64>()
                    / pairs.len() as f64;
                report.metrics.insert("mse".into(), v);
            }
            "psnr" => {
                let v: f64 = pairs
                    .iter()
                    .map(|(a, b)| eval::psnr_of(b, a, 2.0))
                    .sum::<f64>()
                    / pairs.len() as f64;
                report.metrics.insert("psnr".into(), v);
            }
            "lpips" => {
                let m = ckpt.as_ref().expect("model required");
                let embedder = m.model.perceptual_embedder();
                let mut acc = 0.0;
                for (a, b) in &pairs {
                    acc += eval::perceptual_distance(b, a, &embedder)?;
                }
                report.metrics.insert("lpips".into(), acc / pairs.len() as f64);
            }
            "fid" => {
                let m = ckpt.as_ref().expect("model required");
                let embedder = m.model.identity_embedder();
                let dim = embedder.dim();
                let embed_set = |side: &dyn Fn(&(ImageTensor, ImageTensor)) -> &ImageTensor| {
                    let mut mat = ndarray::Array2::<f64>::zeros((pairs.len(), dim));
                    for (i, pair) in pairs.iter().enumerate() {
                        let e = embedder.embed_image(side(pair))?;
                        for (j, v) in e.iter().enumerate() {
                            mat[[i, j]] = *v;
                        }
                    }
                    Ok::<_, DbafError>(mat)
                };
                let set_a = embed_set(&|p| &p.0)?;
                let set_b = embed_set(&|p| &p.1)?;
                report.metrics.insert("fid".into(), eval::fid(&set_a, &set_b)?);
            }
            "recognition-arcface" | "recognition-facenet" => {
                let m = ckpt.as_ref().expect("model required");
                let embedder = m.model.identity_embedder();
                let cfg = if metric == "recognition-arcface" {
                    RecognitionConfig::arcface()
                } else {
                    RecognitionConfig::facenet()
                };
                let rate = eval::recognition_rate(&pairs, &embedder, &cfg)?;
                report.metrics.insert(metric.clone(), rate);
            }
            _ => unreachable!("validated above"),
        }
    }
    let text = report.to_json_pretty()?;
    write_atomic(report_path, text.as_bytes())?;
    println!("report written to {}", report_path.display());
    for (name, value) in &report.metrics {
        println!("  {name}: {value:.6}");
    }
    Ok(())
}

// ---- export-embeddings ----

fn cmd_export_embeddings(
    model: &Path,
    set: Option<&Path>,
    synthetic: Option<usize>,
    num_keys: usize,
    base_seed: u64,
    out: &Path,
) -> CliResult<()> {
    if num_keys == 0 {
        return Err(usage("--num-keys must be positive"));
    }
    let ckpt = load_model(model)?;
    let d = ckpt.model.d();
    let size = ckpt.model.image_size();
    let images: Vec<(String, ImageTensor)> = match (set, synthetic) {
        (Some(dir), None) => {
            require_dir(dir, "image set")?;
            let files = png_files(dir)?;
            if files.is_empty() {
                return Err(usage(format!("no .png files in {}", dir.display())));
            }
            files
                .iter()
                .map(|p| {
                    Ok((
                        p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                        imageio::load_png(p)?,
                    ))
                })
                .collect::<Result<_, DbafError>>()?
        }
        (None, n) => dbaf_core::synthetic::synthetic_faces(n.unwrap_or(5), size, 77)
            .into_iter()
            .enumerate()
            .map(|(i, img)| (format!("face{i:02}"), img))
            .collect(),
        (Some(_), Some(_)) => return Err(usage("--set conflicts with --synthetic")),
    };
    let keys: Vec<AnonKey> = (0..num_keys)
        .map(|i| generate_key(&KeySource::Seed(base_seed + i as u64), d))
        .collect::<Result<_, DbafError>>()?;
    let embedder = ckpt.model.identity_embedder();
    let pipeline = Pipeline::new(ckpt.model.clone());
    let mut buf = Vec::new();
    let rows = eval::export_identity_embeddings(&images, &keys, &pipeline, &embedder, &mut buf)?;
    write_atomic(out, &buf)?;
    println!("wrote {rows} embedding rows to {}", out.display());
    Ok(())
}
