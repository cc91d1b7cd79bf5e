use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use partasm::config::{ConfigError, Encodings, GeneratorKind, RunConfig};
use partasm::data::{
    export_shape, load_dataset, load_task, save_dataset, split_ids, synth_dataset, AssemblyTask,
    Category, DataError, Dataset, Pattern, PointStorage, SplitManifest,
};
use partasm::generator::{AssemblyModel, ModelError};
use partasm::metrics::{aggregate, eval_threads, evaluate_object, MetricReport, MetricsError};
use partasm::numerics::{load_checkpoint, save_checkpoint, NumericsError, ParamStore};
use partasm::objective::{
    evaluate_model, evaluate_predictions, fit, EpochRecord, Sample, TrainError,
};

/// Failure carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn config(m: impl fmt::Display) -> Self {
        CliError {
            code: 2,
            message: m.to_string(),
        }
    }

    pub fn data(m: impl fmt::Display) -> Self {
        CliError {
            code: 3,
            message: m.to_string(),
        }
    }

    pub fn numeric(m: impl fmt::Display) -> Self {
        CliError {
            code: 4,
            message: m.to_string(),
        }
    }

    pub fn code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::config(e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::data(e)
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::data(e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(NumericsError::Checkpoint(_) | NumericsError::Io(_)) => {
                CliError::data(e)
            }
            _ => CliError::config(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::numeric(e),
            TrainError::Model(m) => m.into(),
            TrainError::Empty => CliError::data(e),
            _ => CliError::config(e),
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Kind {
    Table,
    Chair,
    Shelf,
    Mixed,
}

impl Kind {
    fn categories(self) -> Vec<Category> {
        match self {
            Kind::Table => vec![Category::Table],
            Kind::Chair => vec![Category::Chair],
            Kind::Shelf => vec![Category::Shelf],
            Kind::Mixed => Category::ALL.to_vec(),
        }
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value = "mixed")]
    pub kind: Kind,
    #[arg(long, default_value_t = 512)]
    pub count: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Assembly pattern stored in each object's chain.
    #[arg(long, default_value = "diagonal", value_parser = parse_pattern)]
    pub pattern: Pattern,
    /// Store points in little-endian f32 sidecar files instead of inline JSON.
    #[arg(long)]
    pub sidecar: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_pattern(s: &str) -> Result<Pattern, String> {
    s.parse().map_err(|e: DataError| e.to_string())
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    if a.count == 0 {
        return Err(CliError::config("--count must be positive"));
    }
    let tasks = synth_dataset(&a.kind.categories(), a.count, a.seed, a.pattern);
    let ids: Vec<String> = tasks.iter().map(|t| t.id.clone()).collect();
    let split = split_ids(&ids, a.seed);
    let storage = if a.sidecar {
        PointStorage::Sidecar
    } else {
        PointStorage::Inline
    };
    save_dataset(&tasks, Some(&split), &a.out, storage)?;
    println!(
        "wrote {} objects to {} (train {}, val {}, test {})",
        tasks.len(),
        a.out.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

/// Config from `--config`, or `config.json` beside the checkpoint.
fn resolve_config(config: Option<&Path>, ckpt: Option<&Path>) -> Result<RunConfig, CliError> {
    let path = match (config, ckpt) {
        (Some(c), _) => c.to_path_buf(),
        (None, Some(k)) => k.with_file_name("config.json"),
        (None, None) => return Ok(RunConfig::default()),
    };
    if !path.exists() {
        return Err(CliError::config(format!(
            "{}: config not found; pass --config",
            path.display()
        )));
    }
    Ok(RunConfig::load(&path)?)
}

fn dataset_split(ds: &Dataset) -> SplitManifest {
    ds.split.clone().unwrap_or_else(|| {
        let ids: Vec<String> = ds.tasks.iter().map(|t| t.id.clone()).collect();
        split_ids(&ids, 0)
    })
}

fn samples(tasks: &[AssemblyTask], cfg: &RunConfig) -> Result<Vec<Sample>, CliError> {
    tasks
        .iter()
        .map(|t| {
            if t.len() > cfg.model.n_max {
                return Err(CliError::config(format!(
                    "object {} has {} parts; model.n_max is {}",
                    t.id,
                    t.len(),
                    cfg.model.n_max
                )));
            }
            let order = t.sequence(cfg.pattern, t.seed);
            Sample::from_task(t, cfg.model.points, Some(&order))
                .map_err(|e| CliError::data(format!("object {}: {e}", t.id)))
        })
        .collect()
}

fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<(AssemblyModel, ParamStore), CliError> {
    let (model, mut store) = AssemblyModel::new(&cfg.model, cfg.train.seed)?;
    let loaded =
        load_checkpoint(ckpt).map_err(|e| CliError::data(format!("{}: {e}", ckpt.display())))?;
    store
        .load_from(&loaded)
        .map_err(|e| CliError::config(format!("{}: {e}", ckpt.display())))?;
    Ok((model, store))
}

fn report_json(report: &MetricReport) -> String {
    report.to_json()
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Trains on the train split, selects on val, reports on test. Returns the report.
fn run_training(
    cfg: &RunConfig,
    ds: &Dataset,
    out: &Path,
    quiet: bool,
) -> Result<MetricReport, CliError> {
    let split = dataset_split(ds);
    let train = samples(&ds.subset(&split.train)?, cfg)?;
    let val = samples(&ds.subset(&split.val)?, cfg)?;
    let test = samples(&ds.subset(&split.test)?, cfg)?;
    write_file(&out.join("config.json"), cfg.to_json())?;
    let threads = eval_threads();
    let (model, store) = AssemblyModel::new(&cfg.model, cfg.train.seed)?;
    let result = fit(
        &model,
        store,
        &train,
        &val,
        cfg,
        threads,
        |r: &EpochRecord| {
            if !quiet {
                let val = r
                    .val_pa
                    .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "epoch {:>4}  lr {:.3e}  loss {:.5}  val_pa {val}",
                    r.epoch, r.lr, r.train_loss
                );
            }
        },
    );
    let result = match result {
        Ok(r) => r,
        Err(e) => {
            if let TrainError::NonFinite {
                epoch,
                batch,
                objects,
            } = &e
            {
                let dump =
                    serde_json::json!({ "epoch": epoch, "batch": batch, "objects": objects });
                write_file(&out.join("nonfinite.json"), dump.to_string())?;
            }
            return Err(e.into());
        }
    };
    save_checkpoint(&result.best, &out.join("checkpoint.spac")).map_err(CliError::data)?;
    save_checkpoint(&result.last, &out.join("last.spac")).map_err(CliError::data)?;
    write_file(
        &out.join("history.json"),
        serde_json::to_string_pretty(&result.history).expect("history serializes"),
    )?;
    let eval_set = if test.is_empty() { &val } else { &test };
    let reports = evaluate_model(&model, &result.best, eval_set, cfg, threads)?;
    let report = aggregate(
        reports,
        serde_json::from_str(&cfg.to_json()).expect("config is JSON"),
    )?;
    write_file(&out.join("report.json"), report_json(&report))?;
    Ok(report)
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&a.config)?;
    let ds = load_dataset(&a.data)?;
    let report = run_training(&cfg, &ds, &a.out, false)?;
    let o = &report.overall;
    println!(
        "test: SCD {:.3}  PA {:.4}  CA {:.4}  SR {:.4}",
        o.scd, o.pa, o.ca, o.sr
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint; its directory's config.json is used unless --config is given.
    #[arg(long, required_unless_present = "gt_as_prediction")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Score the GT poses themselves (sanity check of data and metrics).
    #[arg(long)]
    pub gt_as_prediction: bool,
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let cfg = resolve_config(a.config.as_deref(), a.ckpt.as_deref())?;
    let ds = load_dataset(&a.data)?;
    let split = dataset_split(&ds);
    let tasks = match a.split {
        SplitName::Train => ds.subset(&split.train)?,
        SplitName::Val => ds.subset(&split.val)?,
        SplitName::Test => ds.subset(&split.test)?,
        SplitName::All => ds.tasks.clone(),
    };
    if tasks.is_empty() {
        return Err(CliError::data("selected split is empty"));
    }
    let threads = eval_threads();
    let reports = if a.gt_as_prediction {
        let s: Vec<Sample> = tasks
            .iter()
            .map(|t| Sample::from_task(t, t.parts[0].len().min(cfg.model.points), None))
            .collect::<Result<_, _>>()
            .map_err(CliError::data)?;
        let gt: Vec<_> = s.iter().map(|x| x.gt.clone()).collect();
        evaluate_predictions(&s, &gt, &cfg.metrics, threads)?
    } else {
        let ckpt = a.ckpt.as_deref().expect("required by clap");
        let (model, store) = load_model(&cfg, ckpt)?;
        evaluate_model(&model, &store, &samples(&tasks, &cfg)?, &cfg, threads)?
    };
    let report = aggregate(
        reports,
        serde_json::from_str(&cfg.to_json()).expect("config is JSON"),
    )?;
    write_file(&a.report, report_json(&report))?;
    let o = &report.overall;
    println!(
        "{} objects: SCD {:.3}  PA {:.4}  CA {:.4}  SR {:.4}",
        o.objects, o.scd, o.pa, o.ca, o.sr
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct AssembleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One object JSON file.
    #[arg(long)]
    pub object: PathBuf,
    #[arg(long, default_value = "diagonal", value_parser = parse_pattern)]
    pub pattern: Pattern,
    /// Write the assembled shape (.ply or .obj).
    #[arg(long)]
    pub export: Option<PathBuf>,
}

pub fn assemble(a: &AssembleArgs) -> Result<(), CliError> {
    let mut cfg = resolve_config(a.config.as_deref(), Some(&a.ckpt))?;
    cfg.pattern = a.pattern;
    let task = load_task(&a.object)?;
    let (model, store) = load_model(&cfg, &a.ckpt)?;
    let sample = samples(std::slice::from_ref(&task), &cfg)?.remove(0);
    let pred = model.predict(
        &store,
        &sample.input_refs(),
        &sample.grouping,
        cfg.encodings,
    )?;
    let r = evaluate_object(
        &sample.id,
        &sample.category,
        &sample.parts,
        &sample.gt,
        &pred,
        &sample.grouping,
        &sample.contacts,
        &cfg.metrics,
    );
    if let Some(path) = &a.export {
        export_shape(&sample.parts, &pred, path)?;
    }
    let out = serde_json::json!({ "metrics": r, "poses": pred });
    println!(
        "{}",
        serde_json::to_string_pretty(&out).expect("serializes")
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Encodings,
    Pattern,
    Generator,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub axis: Axis,
    #[arg(long)]
    pub out: PathBuf,
    /// Existing dataset; without it a table dataset is generated into OUT/data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub count: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// The encoding rows of the ablation grid, baseline first.
pub const ENCODING_GRID: [Encodings; 7] = [
    Encodings {
        oenc: false,
        renc: false,
        senc: false,
    },
    Encodings {
        oenc: false,
        renc: true,
        senc: false,
    },
    Encodings {
        oenc: false,
        renc: false,
        senc: true,
    },
    Encodings {
        oenc: true,
        renc: false,
        senc: false,
    },
    Encodings {
        oenc: true,
        renc: true,
        senc: false,
    },
    Encodings {
        oenc: true,
        renc: false,
        senc: true,
    },
    Encodings {
        oenc: true,
        renc: true,
        senc: true,
    },
];

fn ablation_runs(base: &RunConfig, axis: Axis) -> Vec<(String, RunConfig)> {
    match axis {
        Axis::Encodings => ENCODING_GRID
            .iter()
            .map(|e| {
                let mut c = base.clone();
                c.encodings = *e;
                (e.label().replace('+', "-").to_lowercase(), c)
            })
            .collect(),
        Axis::Pattern => Pattern::ALL
            .iter()
            .map(|p| {
                let mut c = base.clone();
                c.pattern = *p;
                (p.name().to_string(), c)
            })
            .collect(),
        Axis::Generator => [GeneratorKind::Parallel, GeneratorKind::Autoregressive]
            .iter()
            .map(|g| {
                let mut c = base.clone();
                c.model.generator = *g;
                (g.to_string(), c)
            })
            .collect(),
    }
}

pub fn ablate(a: &AblateArgs) -> Result<(), CliError> {
    let base = RunConfig::load(&a.config)?;
    let data_dir = match &a.data {
        Some(d) => d.clone(),
        None => {
            let d = a.out.join("data");
            gen_data(&GenDataArgs {
                kind: Kind::Table,
                count: a.count,
                seed: a.seed,
                pattern: Pattern::Diagonal,
                sidecar: true,
                out: d.clone(),
            })?;
            d
        }
    };
    let ds = load_dataset(&data_dir)?;
    let mut summary = serde_json::Map::new();
    for (name, cfg) in ablation_runs(&base, a.axis) {
        cfg.validate()?;
        println!("== {name}");
        let report = run_training(&cfg, &ds, &a.out.join(&name), true)?;
        let o = &report.overall;
        println!(
            "   SCD {:.3}  PA {:.4}  CA {:.4}  SR {:.4}",
            o.scd, o.pa, o.ca, o.sr
        );
        summary.insert(name, serde_json::to_value(o).expect("summary serializes"));
    }
    write_file(
        &a.out.join("summary.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(summary)).expect("serializes"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_axis_has_five_named_runs() {
        let runs = ablation_runs(&RunConfig::default(), Axis::Pattern);
        let names: Vec<&str> = runs.iter().map(|r| r.0.as_str()).collect();
        assert_eq!(
            names,
            [
                "diagonal",
                "top-to-bottom",
                "bottom-to-top",
                "descending-size",
                "random"
            ]
        );
    }

    #[test]
    fn encoding_axis_ends_with_full() {
        let runs = ablation_runs(&RunConfig::default(), Axis::Encodings);
        assert_eq!(runs.len(), 7);
        assert_eq!(runs[0].0, "vanilla");
        assert_eq!(runs[6].0, "o-r-s");
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(ConfigError::Invalid("x".into())).code(), 2);
        assert_eq!(
            CliError::from(DataError::Unknown {
                what: "pattern",
                value: "x".into()
            })
            .code(),
            3
        );
        let nf = TrainError::NonFinite {
            epoch: 0,
            batch: 1,
            objects: vec![],
        };
        assert_eq!(CliError::from(nf).code(), 4);
    }
}
