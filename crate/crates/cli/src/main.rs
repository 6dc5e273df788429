//! Command line front end: data generation, training, evaluation,
//! cost benchmarking and the ζ ablation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use gmic3d::config::RunConfig;
use gmic3d::cost::{extrapolate_linear, ModelKind, Profile};
use gmic3d::phantom::{generate_dataset, Dataset, PhantomSpec, DATASET_FILE};
use gmic3d::report::{evaluate, EvalOptions};
use gmic3d::roi::Zeta;
use gmic3d::training::{random_search, train, Checkpoint, EpochRecord, TrainStatus};
use gmic3d::{Error, Result};

const CHECKPOINT_FILE: &str = "checkpoint.g3d";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "gmic3d", version, about = "Saliency-guided patch classifier for 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenerateData(GenerateArgs),
    /// Train a model, optionally with random hyperparameter search.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metrics report.
    Eval(EvalArgs),
    /// Analytic compute and memory cost of a model.
    Bench(BenchArgs),
    /// Train and evaluate once per ζ value.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Phantom spec (TOML); defaults apply to missing keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Start from the easy preset instead of the default spec.
    #[arg(long)]
    easy: bool,
    #[arg(long)]
    out: PathBuf,
    /// Number of two-view groups.
    #[arg(long, default_value_t = 100)]
    groups: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Random search trials; 0 trains the configuration as given.
    #[arg(long, default_value_t = 0)]
    search: usize,
    /// Data-parallel global module (results may differ in the last bits).
    #[arg(long)]
    parallel: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Also write the retrieved patch locations of every volume (JSON).
    #[arg(long)]
    dump_patches: Option<PathBuf>,
    /// Test-time augmentations; defaults to the checkpoint's setting.
    #[arg(long)]
    tta: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    /// Which volumes to score: all, train or val (group split by --val-modulus).
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long, default_value_t = 5)]
    val_modulus: u32,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value = "desk")]
    profile: String,
    /// gmic3d, dense2d, dense3d or all.
    #[arg(long, default_value = "all")]
    model: String,
    #[arg(long, default_value_t = 96)]
    slices: u64,
    /// Slice counts to measure and extrapolate from, e.g. 4,8,16.
    #[arg(long, value_delimiter = ',')]
    extrapolate: Option<Vec<u64>>,
    /// Also write the rows as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated ζ values; `inf` covers every slice.
    #[arg(long, value_delimiter = ',', default_value = "0,5,10,inf")]
    zeta: Vec<String>,
    #[arg(long)]
    tta: Option<usize>,
    #[arg(long, default_value_t = 200)]
    bootstrap: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        return report_error(&e);
    }
    let result = match cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> ExitCode {
    let msg = e.to_string().replace('\n', " ");
    eprintln!("error[{}]: {msg}", e.category());
    ExitCode::from(1)
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("GMIC3D_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| Error::Config(format!("GMIC3D_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn out_dir(flag: PathBuf) -> PathBuf {
    std::env::var_os("GMIC3D_OUT_DIR").map(PathBuf::from).unwrap_or(flag)
}

/// Output directory built under a sibling staging name and renamed into place
/// once complete, so a failed run never leaves a partial directory behind.
struct Staging {
    staging: PathBuf,
    target: PathBuf,
}

impl Staging {
    fn new(target: PathBuf) -> Result<Self> {
        if target.exists() {
            let empty = target.is_dir() && fs::read_dir(&target)?.next().is_none();
            if !empty {
                return Err(Error::Config(format!("output `{}` already exists", target.display())));
            }
        }
        let name = target
            .file_name()
            .ok_or_else(|| Error::Config(format!("invalid output path `{}`", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging)?;
        Ok(Self { staging, target })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.staging.join(file)
    }

    fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir(&self.target)?;
        }
        fs::rename(&self.staging, &self.target)?;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if self.staging.exists() {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_string_pretty(v)? + "\n")?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn manifest(command: &str, seed: u64, parallel: bool, extra: Value) -> Value {
    json!({
        "command": command,
        "args": std::env::args().collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "concurrency": if parallel { "parallel" } else { "strict" },
        "threads": rayon::current_num_threads(),
        "details": extra,
    })
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_toml(&fs::read_to_string(p)?),
        None => RunConfig::profile("desk"),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => PhantomSpec::from_toml(&fs::read_to_string(p)?)?,
        None if a.easy => PhantomSpec::easy(),
        None => PhantomSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let ds = generate_dataset(&spec, a.groups)?;
    let stage = Staging::new(out_dir(a.out))?;
    ds.save(&stage.path(DATASET_FILE))?;
    write_json(
        &stage.path(MANIFEST_FILE),
        &manifest("generate-data", spec.seed, false, json!({ "spec": spec, "groups": a.groups, "volumes": ds.len() })),
    )?;
    let dir = stage.commit()?;
    println!("wrote {} volumes to {}", ds.len(), dir.display());
    Ok(())
}

fn log_epoch(prefix: &str, r: &EpochRecord) {
    println!(
        "{prefix}epoch {:>3}  loss {:.5}  val_auc_malignant {:.4}  mean_saliency {:.5}  {:.1}s",
        r.epoch, r.train_loss, r.val_auc_malignant, r.mean_saliency, r.seconds
    );
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    cfg.train.parallel |= a.parallel;
    let ds = Dataset::load_any(&a.data)?;
    let (train_set, val_set) = ds.split_by_group(cfg.val_modulus);
    let stage = Staging::new(out_dir(a.out))?;
    fs::write(stage.path("config.toml"), cfg.to_toml())?;
    let (outcome, trials) = if a.search > 0 {
        let s = random_search::<f32>(&train_set, &val_set, &cfg.train, &cfg.search()?, a.search, &mut |t, r| {
            log_epoch(&format!("trial {t:>2}  "), r)
        })?;
        println!("best trial {}", s.best_trial);
        (s.best, Some(s.trials))
    } else {
        (train::<f32>(&train_set, &val_set, &cfg.train, None, &mut |r| log_epoch("", r))?, None)
    };
    outcome.checkpoint.save(&stage.path(CHECKPOINT_FILE))?;
    write_json(&stage.path("history.json"), &serde_json::to_value(&outcome.history)?)?;
    if let Some(t) = &trials {
        write_json(&stage.path("trials.json"), &serde_json::to_value(t)?)?;
    }
    write_json(
        &stage.path(MANIFEST_FILE),
        &manifest(
            "train",
            cfg.train.seed,
            cfg.train.parallel,
            json!({
                "config": cfg.to_toml(),
                "train_volumes": train_set.len(),
                "val_volumes": val_set.len(),
                "status": outcome.status,
                "best_metric": outcome.checkpoint.best_metric,
            }),
        ),
    )?;
    let dir = stage.commit()?;
    println!("checkpoint written to {}", dir.join(CHECKPOINT_FILE).display());
    if let TrainStatus::Diverged { epoch, reason } = outcome.status {
        return Err(Error::Diverged { epoch, reason });
    }
    Ok(())
}

fn select_split(ds: Dataset, split: &str, modulus: u32) -> Result<Dataset> {
    match split {
        "all" => Ok(ds),
        "train" => Ok(ds.split_by_group(modulus).0),
        "val" => Ok(ds.split_by_group(modulus).1),
        s => Err(Error::Config(format!("unknown split `{s}` (expected all, train or val)"))),
    }
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let model = ck.model()?;
    let ds = select_split(Dataset::load_any(&a.data)?, &a.split, a.val_modulus)?;
    let opts = EvalOptions {
        tta: a.tta.unwrap_or(ck.config.tta),
        augment: ck.config.augment,
        seed: ck.config.seed,
        bootstrap_iterations: a.bootstrap,
        ..EvalOptions::default()
    };
    let ev = evaluate(&model, &ds, &opts)?;
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(&a.report, &Value::Object(ev.report.clone()))?;
    if let Some(p) = &a.dump_patches {
        let rows: Vec<Value> = ev
            .volumes
            .iter()
            .map(|v| json!({ "index": v.index, "group": v.group_id, "view": v.view_id, "p_final": v.p_final, "patches": v.patches }))
            .collect();
        write_json(p, &Value::Array(rows))?;
    }
    for key in ["image_auc_malignant", "group_auc_malignant", "max_proj_dsc_malignant", "max_proj_pxap_malignant"] {
        println!("{key:<28} {}", ev.report.get(key).unwrap_or(&Value::Null));
    }
    println!("report written to {}", a.report.display());
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let profile = Profile::by_name(&a.profile)?;
    let kinds: Vec<ModelKind> = match a.model.as_str() {
        "all" => vec![ModelKind::Gmic3d, ModelKind::Dense2d, ModelKind::Dense3d],
        m => vec![m.parse()?],
    };
    println!(
        "{:<8} {:>6} {:>14} {:>14} {:>14} {:>12}  source",
        "model", "slices", "GMACs", "peak MB", "stream MB", "params"
    );
    let mut rows = Vec::new();
    for kind in kinds {
        let name = serde_json::to_value(kind)?.as_str().unwrap_or("?").to_string();
        let direct = profile.count(kind, a.slices)?;
        let mut row = json!({
            "model": name,
            "slices": a.slices,
            "gmacs": direct.total_macs as f64 / 1e9,
            "peak_mb": direct.peak_activation_bytes as f64 / 1e6,
            "streaming_mb": direct.streaming_activation_bytes as f64 / 1e6,
            "parameters": direct.parameters,
            "modules": direct.modules,
            "source": "count",
        });
        print_row(&row);
        if let Some(xs) = &a.extrapolate {
            let measured: Vec<_> = xs.iter().map(|&s| profile.count(kind, s)).collect::<Result<_>>()?;
            let pts = |f: fn(&gmic3d::cost::CostReport) -> f64| -> Vec<(f64, f64)> {
                xs.iter().zip(&measured).map(|(&s, r)| (s as f64, f(r))).collect()
            };
            let target = a.slices as f64;
            let ex = json!({
                "model": name,
                "slices": a.slices,
                "gmacs": extrapolate_linear(&pts(|r| r.total_macs as f64), target)? / 1e9,
                "peak_mb": extrapolate_linear(&pts(|r| r.peak_activation_bytes as f64), target)? / 1e6,
                "streaming_mb": extrapolate_linear(&pts(|r| r.streaming_activation_bytes as f64), target)? / 1e6,
                "parameters": direct.parameters,
                "source": format!("extrapolated from {xs:?}"),
            });
            print_row(&ex);
            row["extrapolated"] = ex;
        }
        rows.push(row);
    }
    if let Some(p) = &a.json {
        write_json(p, &Value::Array(rows))?;
    }
    Ok(())
}

fn print_row(r: &Value) {
    println!(
        "{:<8} {:>6} {:>14.3} {:>14.2} {:>14.2} {:>12}  {}",
        r["model"].as_str().unwrap_or(""),
        r["slices"],
        r["gmacs"].as_f64().unwrap_or(f64::NAN),
        r["peak_mb"].as_f64().unwrap_or(f64::NAN),
        r["streaming_mb"].as_f64().unwrap_or(f64::NAN),
        r["parameters"],
        r["source"].as_str().unwrap_or("")
    );
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let zetas: Vec<Zeta> = a.zeta.iter().map(|z| z.parse()).collect::<Result<_>>()?;
    if zetas.is_empty() {
        return Err(Error::Config("no ζ values given".into()));
    }
    let ds = Dataset::load_any(&a.data)?;
    let (train_set, val_set) = ds.split_by_group(cfg.val_modulus);
    let stage = Staging::new(out_dir(a.out))?;
    let metrics = [
        "image_auc_malignant",
        "group_auc_malignant",
        "image_auc_benign",
        "group_auc_benign",
        "max_proj_dsc_malignant",
        "max_proj_pxap_malignant",
    ];
    let mut rows = Vec::new();
    let mut csv = format!("zeta,{}\n", metrics.join(","));
    for z in zetas {
        let mut c = cfg.train.clone();
        c.model.zeta = z;
        let outcome = train::<f32>(&train_set, &val_set, &c, None, &mut |r| log_epoch(&format!("zeta {z:>3}  "), r))?;
        if let TrainStatus::Diverged { epoch, reason } = &outcome.status {
            return Err(Error::Diverged {
                epoch: *epoch,
                reason: format!("zeta {z}: {reason}"),
            });
        }
        fs::create_dir(stage.path(&format!("zeta-{z}")))?;
        outcome.checkpoint.save(&stage.path(&format!("zeta-{z}/{CHECKPOINT_FILE}")))?;
        let opts = EvalOptions {
            tta: a.tta.unwrap_or(c.tta),
            augment: c.augment,
            seed: c.seed,
            bootstrap_iterations: a.bootstrap,
            ..EvalOptions::default()
        };
        let ev = evaluate(&outcome.checkpoint.model()?, &val_set, &opts)?;
        let mut row = serde_json::Map::new();
        row.insert("zeta".into(), serde_json::to_value(z)?);
        let mut line = z.to_string();
        for m in metrics {
            let v = ev.report.get(m).cloned().unwrap_or(Value::Null);
            line.push(',');
            line.push_str(&v.as_f64().map(|x| x.to_string()).unwrap_or_default());
            row.insert(m.into(), v);
            let ci = format!("{m}_ci");
            row.insert(ci.clone(), ev.report.get(&ci).cloned().unwrap_or(Value::Null));
        }
        println!("zeta {z:>3}  {line}");
        csv.push_str(&line);
        csv.push('\n');
        rows.push(Value::Object(row));
    }
    fs::write(stage.path("ablation.csv"), &csv)?;
    write_json(&stage.path("ablation.json"), &Value::Array(rows))?;
    write_json(
        &stage.path(MANIFEST_FILE),
        &manifest("ablate", cfg.train.seed, cfg.train.parallel, json!({ "config": cfg.to_toml(), "zeta": a.zeta })),
    )?;
    let dir = stage.commit()?;
    println!("ablation written to {}", dir.display());
    Ok(())
}
