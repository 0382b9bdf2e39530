//! `ptsc`: generate data, train, evaluate and inspect partial time-series
//! classifiers.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ptsc::data::{
    generate_synthetic, load_dataset, read_tsv, save_dataset, Dataset, DatasetMeta, Normalization,
    SeriesRecord, SyntheticConfig,
};
use ptsc::eval::{evaluate, format_reports, tertile_boundaries, Protocol};
use ptsc::temporal::te_correlation;
use ptsc::train::{split_validation, train, write_history_csv, TrainConfig};
use ptsc::{build_model, Checkpoint, Model, ModelConfig, Scalar};

const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Parser)]
#[command(name = "ptsc", version, about = "Partial time-series classification")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON configuration (run config for train, generator config for gen-data)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset file (or a directory holding train.ptsc / test.ptsc)
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    /// Allow overwriting existing outputs
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test pair, or convert tab-separated archive files
    GenData {
        /// Training split in the tab-separated archive layout
        #[arg(long)]
        from_tsv: Option<PathBuf>,
        /// Test split matching --from-tsv
        #[arg(long, requires = "from_tsv")]
        tsv_test: Option<PathBuf>,
    },
    /// Train a model; writes checkpoints, history and the resolved config
    Train,
    /// Score a trained run on a test file
    Eval {
        /// `best`, `last`, or a checkpoint path
        #[arg(long, default_value = "best")]
        checkpoint: String,
        #[arg(long, default_value = "both")]
        protocol: Protocol,
        /// Run directory to read from (defaults to --out)
        #[arg(long)]
        run: Option<PathBuf>,
        /// Also write the correlation matrix of the temporal encoding
        #[arg(long)]
        dump_te_correlation: bool,
    },
    /// Print receptive field and jump per block
    RfReport {
        /// Named architecture instead of --config
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Export the temporal-encoding table of a trained run as CSV
    DumpTe {
        #[arg(long, default_value = "best")]
        checkpoint: String,
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

/// Model and optimisation settings of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Debug)]
enum Failure {
    /// Bad input: usage, configuration, data files. Exit code 1.
    Invalid(String),
    /// Anything that went wrong while doing valid work. Exit code 2.
    Runtime(String),
}

impl From<ptsc::Error> for Failure {
    fn from(e: ptsc::Error) -> Self {
        use ptsc::Error::*;
        match e {
            InvalidArgument(_) | Parse { .. } | Checkpoint(_) | Json(_) => Failure::Invalid(e.to_string()),
            Io(_) | NonFinite { .. } => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(msg.into())
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config_sha256: Option<String>,
    seed: Option<u64>,
    precision: Precision,
    versions: BTreeMap<&'static str, String>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Manifest {
    fn new(command: &str, g: &Global) -> Self {
        let versions = BTreeMap::from([
            ("ptsc", env!("CARGO_PKG_VERSION").to_string()),
            ("checkpoint_format", CHECKPOINT_FORMAT.to_string()),
            ("data_format", "PTSC v1".to_string()),
        ]);
        Self {
            command: command.to_string(),
            config_sha256: None,
            seed: g.seed,
            precision: g.precision,
            versions,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Outcome {
        let bytes = fs::read(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `gen-data` and `train` own their directory; the other commands usually
/// write into a run directory and keep their manifests apart.
fn manifest_name(command: &str) -> String {
    match command {
        "gen-data" | "train" => "manifest.json".to_string(),
        other => format!("{other}.manifest.json"),
    }
}

/// Output directory with overwrite protection.
struct OutDir {
    root: PathBuf,
    force: bool,
    written: Vec<String>,
}

impl OutDir {
    fn new(g: &Global) -> Outcome<Self> {
        let root = g.out.clone().ok_or_else(|| invalid("--out is required"))?;
        Ok(Self {
            root,
            force: g.force,
            written: Vec::new(),
        })
    }

    /// Fails before any work is done if one of `names` already exists.
    fn claim(&self, names: &[&str]) -> Outcome {
        if self.force {
            return Ok(());
        }
        for n in names {
            let p = self.root.join(n);
            if p.exists() {
                return Err(invalid(format!("{} exists; pass --force to overwrite", p.display())));
            }
        }
        Ok(())
    }

    fn path(&mut self, name: &str) -> Outcome<PathBuf> {
        fs::create_dir_all(&self.root)?;
        self.written.push(name.to_string());
        Ok(self.root.join(name))
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Outcome {
        let p = self.path(name)?;
        fs::write(p, bytes)?;
        Ok(())
    }

    fn finish(mut self, mut manifest: Manifest) -> Outcome {
        manifest.outputs = std::mem::take(&mut self.written);
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Failure::Runtime(e.to_string()))?;
        self.write(&manifest_name(&manifest.command), &json)
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Outcome<(T, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let v = serde_json::from_slice(&bytes).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok((v, bytes))
}

fn to_json(v: &impl Serialize) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serialisable");
    s.push(b'\n');
    s
}

/// A dataset path may name a file or a directory containing `default`.
fn dataset_path(p: &Path, default: &str) -> PathBuf {
    if p.is_dir() {
        p.join(default)
    } else {
        p.to_path_buf()
    }
}

fn load(path: &Path) -> Outcome<Dataset> {
    if !path.exists() {
        return Err(invalid(format!("{} does not exist", path.display())));
    }
    Ok(load_dataset(path)?)
}

fn gen_data(g: &Global, from_tsv: Option<&Path>, tsv_test: Option<&Path>) -> Outcome {
    let mut out = OutDir::new(g)?;
    out.claim(&["train.ptsc", "test.ptsc", "manifest.json"])?;
    let mut manifest = Manifest::new("gen-data", g);
    let (train, test) = if let Some(path) = from_tsv {
        manifest.input(path)?;
        let (train, test) = convert_tsv(path, tsv_test)?;
        if let Some(t) = tsv_test {
            manifest.input(t)?;
        }
        (train, test)
    } else {
        let cfg = match &g.config {
            Some(p) => {
                let (cfg, bytes) = read_json::<SyntheticConfig>(p)?;
                manifest.config_sha256 = Some(sha256_hex(&bytes));
                cfg
            }
            None => SyntheticConfig::default(),
        };
        let seed = g.seed.unwrap_or(0);
        manifest.seed = Some(seed);
        let (train, test) = generate_synthetic(&cfg, seed)?;
        (train, Some(test))
    };
    save_dataset(&train, &out.path("train.ptsc")?)?;
    if let Some(test) = test {
        save_dataset(&test, &out.path("test.ptsc")?)?;
    }
    out.finish(manifest)
}

/// Reads archive files and maps both splits onto one label set.
fn convert_tsv(train: &Path, test: Option<&Path>) -> Outcome<(Dataset, Option<Dataset>)> {
    let read = |p: &Path| -> Outcome<Dataset> {
        let f = fs::File::open(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
        Ok(read_tsv(std::io::BufReader::new(f), p)?)
    };
    let a = read(train)?;
    let Some(test) = test else {
        return Ok((a, None));
    };
    let b = read(test)?;
    let mut names: Vec<String> = a.meta.class_names.clone();
    for n in &b.meta.class_names {
        if !names.contains(n) {
            names.push(n.clone());
        }
    }
    if names.iter().all(|n| n.parse::<f64>().is_ok()) {
        names.sort_by(|x, y| x.parse::<f64>().unwrap().total_cmp(&y.parse::<f64>().unwrap()));
    } else {
        names.sort();
    }
    let t_min = a.meta.t_min.min(b.meta.t_min);
    let t_max = a.meta.t_max.max(b.meta.t_max);
    let relabel = |ds: Dataset| {
        let mut meta = DatasetMeta::new(1, names.len(), t_min, t_max);
        meta.class_names = names.clone();
        let records = ds
            .records
            .into_iter()
            .map(|mut r| {
                let name = &ds.meta.class_names[r.label];
                r.label = names.iter().position(|n| n == name).expect("name in union");
                r
            })
            .collect();
        Dataset { meta, records }
    };
    Ok((relabel(a), Some(relabel(b))))
}

fn load_run_config(g: &Global) -> Outcome<(RunConfig, Vec<u8>)> {
    let path = g.config.as_ref().ok_or_else(|| invalid("--config is required"))?;
    let (mut cfg, _) = read_json::<RunConfig>(path)?;
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let bytes = to_json(&cfg);
    Ok((cfg, bytes))
}

fn check_compatible(model: &ModelConfig, meta: &DatasetMeta) -> Outcome {
    if model.input_channels != meta.channels {
        return Err(invalid(format!(
            "model expects {} channels, data has {}",
            model.input_channels, meta.channels
        )));
    }
    if model.classes != meta.classes {
        return Err(invalid(format!(
            "model has {} classes, data has {}",
            model.classes, meta.classes
        )));
    }
    if let Some(te) = &model.te {
        if !te.cyclic && te.t_max < meta.t_max {
            return Err(invalid(format!(
                "temporal encoding covers {} timestamps, data reaches {}",
                te.t_max, meta.t_max
            )));
        }
    }
    Ok(())
}

fn train_cmd(g: &Global) -> Outcome {
    let mut out = OutDir::new(g)?;
    let (cfg, cfg_bytes) = load_run_config(g)?;
    let data_arg = g.data.as_ref().ok_or_else(|| invalid("--data is required"))?;
    let data_path = dataset_path(data_arg, "train.ptsc");
    let mut ds = load(&data_path)?;
    check_compatible(&cfg.model, &ds.meta)?;
    out.claim(&[
        "config.json",
        "normalization.json",
        "best.ckpt",
        "last.ckpt",
        "history.csv",
        "history.json",
        "manifest.json",
    ])?;
    let mut manifest = Manifest::new("train", g);
    manifest.seed = Some(cfg.train.seed);
    manifest.config_sha256 = Some(sha256_hex(&cfg_bytes));
    manifest.input(&data_path)?;

    let norm = Normalization::fit(&ds.records)?;
    norm.apply_all(&mut ds.records);
    let (fit, val) = split_validation(
        &ds.records,
        ds.meta.classes,
        cfg.train.validation_fraction,
        cfg.train.seed,
    )?;
    log::info!("{} training and {} validation records", fit.len(), val.len());
    match g.precision {
        Precision::F32 => run_training::<f32>(&cfg, &fit, &val, ds.meta.t_max, &mut out)?,
        Precision::F64 => run_training::<f64>(&cfg, &fit, &val, ds.meta.t_max, &mut out)?,
    }
    out.write("config.json", &cfg_bytes)?;
    out.write("normalization.json", &to_json(&norm))?;
    out.finish(manifest)
}

fn run_training<S: Scalar>(
    cfg: &RunConfig,
    fit: &[SeriesRecord],
    val: &[SeriesRecord],
    t_max: usize,
    out: &mut OutDir,
) -> Outcome {
    let mut model: Model<S> = build_model(&cfg.model, cfg.train.seed)?;
    let result = match train(&mut model, fit, val, t_max, &cfg.train) {
        Ok(r) => r,
        Err(ptsc::Error::NonFinite { epoch, checkpoint }) => {
            checkpoint.save(&out.path("last_good.ckpt")?)?;
            return Err(Failure::Runtime(format!(
                "loss became non-finite at epoch {epoch}; last good parameters saved to last_good.ckpt"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    result.best.save(&out.path("best.ckpt")?)?;
    result.last.save(&out.path("last.ckpt")?)?;
    let mut csv = Vec::new();
    write_history_csv(&result.history, &mut csv)?;
    out.write("history.csv", &csv)?;
    out.write("history.json", &to_json(&result.history))?;
    log::info!(
        "best epoch {} of {}{}",
        result.best_epoch,
        result.history.len(),
        if result.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

/// Config, normalisation and checkpoint of a finished run.
fn open_run(run: &Path, which: &str) -> Outcome<(RunConfig, Normalization, Checkpoint)> {
    let (cfg, _) = read_json::<RunConfig>(&run.join("config.json"))?;
    let (norm, _) = read_json::<Normalization>(&run.join("normalization.json"))?;
    let path = match which {
        "best" | "last" => run.join(format!("{which}.ckpt")),
        other => PathBuf::from(other),
    };
    if !path.exists() {
        return Err(invalid(format!("checkpoint {} does not exist", path.display())));
    }
    Ok((cfg, norm, Checkpoint::load(&path)?))
}

fn eval_cmd(g: &Global, checkpoint: &str, protocol: Protocol, run: Option<&Path>, dump_corr: bool) -> Outcome {
    let mut out = OutDir::new(g)?;
    let run = run.map(Path::to_path_buf).unwrap_or_else(|| out.root.clone());
    let (cfg, norm, ck) = open_run(&run, checkpoint)?;
    let data_arg = g.data.as_ref().ok_or_else(|| invalid("--data is required"))?;
    let data_path = dataset_path(data_arg, "test.ptsc");
    let mut ds = load(&data_path)?;
    check_compatible(&cfg.model, &ds.meta)?;
    let manifest_file = manifest_name("eval");
    let mut names = vec!["eval.json", manifest_file.as_str()];
    if dump_corr {
        names.push("te_correlation.csv");
    }
    out.claim(&names)?;
    let mut manifest = Manifest::new("eval", g);
    manifest.seed = Some(cfg.train.seed);
    manifest.config_sha256 = Some(sha256_hex(&to_json(&cfg)));
    manifest.input(&data_path)?;
    norm.apply_all(&mut ds.records);
    match g.precision {
        Precision::F32 => eval_with::<f32>(&cfg, &ck, &ds, protocol, dump_corr, &mut out)?,
        Precision::F64 => eval_with::<f64>(&cfg, &ck, &ds, protocol, dump_corr, &mut out)?,
    }
    out.finish(manifest)
}

#[derive(Serialize)]
struct EvalFile<'a> {
    boundaries: &'a [usize],
    reports: &'a [ptsc::eval::EvalReport],
}

fn eval_with<S: Scalar>(
    cfg: &RunConfig,
    ck: &Checkpoint,
    ds: &Dataset,
    protocol: Protocol,
    dump_corr: bool,
    out: &mut OutDir,
) -> Outcome {
    let mut model: Model<S> = build_model(&cfg.model, cfg.train.seed)?;
    model.load_checkpoint(ck)?;
    let boundaries = tertile_boundaries(&ds.lengths());
    let mut reports = evaluate(&model, &ds.records, ds.meta.t_max, protocol, &boundaries)?;
    for r in &mut reports {
        r.seed = Some(cfg.train.seed);
    }
    print!("{}", format_reports(&reports));
    out.write(
        "eval.json",
        &to_json(&EvalFile {
            boundaries: &boundaries,
            reports: &reports,
        }),
    )?;
    if dump_corr {
        let te = model
            .temporal_encoding()
            .ok_or_else(|| invalid("the model has no temporal encoding"))?;
        let corr = te_correlation(model.params.get(te.table))?;
        let p = corr.dim(0);
        let mut csv = String::new();
        for row in corr.data().chunks(p) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            csv.push_str(&line.join(","));
            csv.push('\n');
        }
        out.write("te_correlation.csv", csv.as_bytes())?;
    }
    Ok(())
}

fn rf_report_cmd(g: &Global, preset: Option<&str>, json: bool) -> Outcome {
    let model = match (preset, &g.config) {
        (Some(name), None) => ModelConfig::preset(name, 1, 2, 1024)?,
        (None, Some(path)) => {
            let (v, _) = read_json::<serde_json::Value>(path)?;
            let inner = v.get("model").cloned().unwrap_or(v);
            let m: ModelConfig = serde_json::from_value(inner)
                .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            m.validate()?;
            m
        }
        _ => return Err(invalid("pass exactly one of --config or --preset")),
    };
    let report = model.rf_report();
    let text = if json {
        String::from_utf8(to_json(&report)).expect("utf-8")
    } else {
        report.to_table()
    };
    print!("{text}");
    if g.out.is_some() {
        let mut out = OutDir::new(g)?;
        let name = if json { "rf_report.json" } else { "rf_report.txt" };
        out.claim(&[name, &manifest_name("rf-report")])?;
        let mut manifest = Manifest::new("rf-report", g);
        manifest.config_sha256 = Some(sha256_hex(&to_json(&model)));
        out.write(name, text.as_bytes())?;
        out.finish(manifest)?;
    }
    Ok(())
}

fn dump_te_cmd(g: &Global, checkpoint: &str, run: Option<&Path>) -> Outcome {
    let mut out = OutDir::new(g)?;
    let run = run.map(Path::to_path_buf).unwrap_or_else(|| out.root.clone());
    let (cfg, _, ck) = open_run(&run, checkpoint)?;
    out.claim(&["te.csv", &manifest_name("dump-te")])?;
    let model: Model<f64> = {
        let mut m = build_model(&cfg.model, cfg.train.seed)?;
        m.load_checkpoint(&ck)?;
        m
    };
    let te = model
        .temporal_encoding()
        .ok_or_else(|| invalid("the model has no temporal encoding"))?;
    let table = model.params.get(te.table);
    let (c, p) = (table.dim(0), table.dim(1));
    let mut csv = String::from("timestamp");
    for k in 0..c {
        csv.push_str(&format!(",e{k}"));
    }
    csv.push('\n');
    for t in 0..p {
        csv.push_str(&(t + 1).to_string());
        for k in 0..c {
            csv.push_str(&format!(",{:?}", table.at(&[k, t])));
        }
        csv.push('\n');
    }
    out.write("te.csv", csv.as_bytes())?;
    let mut manifest = Manifest::new("dump-te", g);
    manifest.seed = Some(cfg.train.seed);
    manifest.config_sha256 = Some(sha256_hex(&to_json(&cfg)));
    out.finish(manifest)
}

fn run(cli: Cli) -> Outcome {
    let g = &cli.global;
    match &cli.command {
        Command::GenData { from_tsv, tsv_test } => gen_data(g, from_tsv.as_deref(), tsv_test.as_deref()),
        Command::Train => train_cmd(g),
        Command::Eval {
            checkpoint,
            protocol,
            run,
            dump_te_correlation,
        } => eval_cmd(g, checkpoint, *protocol, run.as_deref(), *dump_te_correlation),
        Command::RfReport { preset, json } => rf_report_cmd(g, preset.as_deref(), *json),
        Command::DumpTe { checkpoint, run } => dump_te_cmd(g, checkpoint, run.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            let _ = writeln!(std::io::stderr(), "error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            let _ = writeln!(std::io::stderr(), "runtime error: {m}");
            ExitCode::from(2)
        }
    }
}
