//! Subcommands wiring the pipeline: task generation, pretraining, curation,
//! codebook training, evaluation, selection statistics and latency.
//!
//! Settings resolve as defaults, then a flat `key = value` config file, then
//! `MRLAB_SEED`, then flags. Each run writes its resolved settings to
//! `<out>/<command>.config`.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backbone::{self, Backbone, BackboneConfig, LateRead, PretrainConfig};
use crate::checkpoint::Container;
use crate::codebook::{Codebook, CodebookConfig};
use crate::infer::{self, Engine, RagStore};
use crate::ot::{AlignConfig, LayerSet};
use crate::reflectgen::{self, BackboneActor, ScriptedReflector, TaskEnvironment};
use crate::sampling::GumbelConfig;
use crate::tasks::{self, DatasetConfig, PretrainTextConfig, Record, TaskInstance};
use crate::train::{self, TrainConfig};
use crate::vocab::Vocab;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error("output directory {} is locked by another run", .0.display())]
    Locked(PathBuf),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Missing(_) => EXIT_MISSING,
            CliError::Locked(_) | CliError::Run(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

struct Key {
    name: &'static str,
    default: Option<&'static str>,
    help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Some(default),
        help,
    }
}

const SEED: Key = Key {
    name: "seed",
    default: None,
    help: "random seed",
};

const GEN_KEYS: &[Key] = &[
    SEED,
    key("families", "8", "number of task families"),
    key("per_family", "100", "instances per family"),
    key("digit_pool", "24", "distinct digit strings shared across families"),
];

const PRETRAIN_KEYS: &[Key] = &[
    key("seed", "0", "random seed"),
    key("steps", "1200", "optimizer steps"),
    key("batch", "16", "sequences per step"),
    key("pack", "4", "sequences per packed forward pass"),
    key("lr", "1e-3", "peak learning rate"),
    key("warmup", "100", "linear warmup steps"),
    key("clip", "1.0", "global gradient norm ceiling"),
    key("heldout", "200", "held-out sequences for the accuracy check"),
    key("accuracy_floor", "0.9", "minimum held-out format accuracy"),
    key("width", "128", "model width"),
    key("layers", "8", "transformer blocks"),
    key("heads", "4", "attention heads"),
    key("max_positions", "96", "position table size"),
    key("hint_rate", "0.8", "fraction of sequences carrying a hint"),
    key("diff_rate", "0.5", "fraction of hints naming a position"),
    key("late_rate", "0.5", "fraction of sequences reading the hint slot late"),
    key("late_layer", "2", "first block that late sequences read the hint slot in"),
];

const CURATE_KEYS: &[Key] = &[key("max_iters", "4", "reflection rounds per task")];

const TRAIN_KEYS: &[Key] = &[
    key("seed", "0", "random seed"),
    key("units", "512", "codebook size"),
    key("select", "16", "units selected per question"),
    key("layer", "2", "insertion layer"),
    key("align_epochs", "2", "alignment epochs"),
    key("align_lr", "1e-4", "alignment learning rate"),
    key("sft_epochs", "3", "fine-tuning epochs"),
    key("sft_lr", "1e-4", "fine-tuning learning rate"),
    key("batch", "4", "examples per step"),
    key("lambda", "20", "entropic transport strength"),
    key("sinkhorn_iters", "10", "Sinkhorn iterations"),
    key("layer_set", "after", "aligned states: after or from the insertion layer"),
    key("gumbel", "true", "Gumbel noise on selection scores"),
    key("temperature", "1.0", "perturbed softmax temperature"),
    key("sft_noise", "false", "keep Gumbel noise during fine-tuning"),
    key("align_token_loss", "false", "add answer cross-entropy to alignment"),
];

const EVAL_KEYS: &[Key] = &[
    key("baseline", "none", "extra baseline: none or rag"),
    key("rag_min_size", "1", "stored reflections needed before retrieval"),
    key("split", "test", "task split: test or train"),
];

const INSPECT_KEYS: &[Key] = &[key("split", "test", "task split: test or train")];

const BENCH_KEYS: &[Key] = &[key("queries", "50", "questions timed")];

const COMMANDS: &[(&str, &[Key], &str)] = &[
    ("gen-tasks", GEN_KEYS, "generate the family task corpus"),
    ("pretrain", PRETRAIN_KEYS, "pretrain and freeze the backbone"),
    ("curate", CURATE_KEYS, "collect reflection-bearing records"),
    ("train", TRAIN_KEYS, "train the codebook"),
    ("eval", EVAL_KEYS, "accuracy of the codebook and baselines"),
    ("inspect", INSPECT_KEYS, "selection statistics"),
    ("bench", BENCH_KEYS, "retrieval and first-token latency"),
];

fn flag(name: &str) -> String {
    name.replace('_', "-")
}

pub fn command() -> Command {
    let mut cmd = Command::new("mrlab")
        .about("Reflection codebook lab")
        .subcommand_required(true)
        .arg(
            Arg::new("out")
                .long("out")
                .global(true)
                .default_value("run")
                .help("artifact directory"),
        )
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .help("flat key = value settings file"),
        );
    for (name, keys, about) in COMMANDS {
        let mut sub = Command::new(*name).about(*about);
        for k in *keys {
            sub = sub.arg(Arg::new(k.name).long(flag(k.name)).help(k.help));
        }
        if *name == "inspect" {
            sub = sub.arg(
                Arg::new("histogram")
                    .long("histogram")
                    .action(ArgAction::SetTrue)
                    .help("write the per-unit selection counts"),
            );
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Resolved `key = value` settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse_file(text: &str) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", i + 1)))?;
            out.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(out)
    }

    fn resolve(keys: &[Key], file: &BTreeMap<String, String>, env_seed: Option<&str>, m: &ArgMatches) -> Result<Self> {
        let mut values = BTreeMap::new();
        for k in keys {
            if let Some(d) = k.default {
                values.insert(k.name.to_string(), d.to_string());
            }
        }
        for (k, v) in file {
            if !keys.iter().any(|key| key.name == k) {
                return Err(CliError::Config(format!("unknown setting `{k}`")));
            }
            values.insert(k.clone(), v.clone());
        }
        if let Some(s) = env_seed {
            if keys.iter().any(|k| k.name == "seed") {
                values.insert("seed".into(), s.to_string());
            }
        }
        for k in keys {
            if let Some(v) = m.get_one::<String>(k.name) {
                values.insert(k.name.to_string(), v.clone());
            }
        }
        for k in keys {
            if !values.contains_key(k.name) {
                return Err(CliError::Config(format!("missing --{}", flag(k.name))));
            }
        }
        Ok(Settings { values })
    }

    pub fn get<T: std::str::FromStr>(&self, name: &str) -> Result<T> {
        let raw = self
            .values
            .get(name)
            .ok_or_else(|| CliError::Config(format!("missing --{}", flag(name))))?;
        raw.parse()
            .map_err(|_| CliError::Config(format!("--{}: cannot parse `{raw}`", flag(name))))
    }

    pub fn snapshot(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Holds `<dir>/.lock` for the life of a run.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(run_err)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf())),
            Err(e) => Err(run_err(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Write through a temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(run_err)?;
    tmp.write_all(bytes).map_err(run_err)?;
    tmp.as_file().sync_all().map_err(run_err)?;
    tmp.persist(path).map_err(run_err)?;
    Ok(())
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    fs::read(path).map_err(run_err)
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_input(path)?).map_err(run_err)
}

fn progress(cmd: &str, fields: Value) {
    let mut line = json!({ "cmd": cmd });
    if let (Some(o), Value::Object(f)) = (line.as_object_mut(), fields) {
        o.extend(f);
    }
    eprintln!("{line}");
}

/// Artifact paths inside the output directory.
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn tasks(&self, split: &str) -> PathBuf {
        self.dir.join(format!("tasks.{split}.jsonl"))
    }
    pub fn backbone(&self) -> PathBuf {
        self.dir.join("backbone.ckpt")
    }
    pub fn reflections(&self) -> PathBuf {
        self.dir.join("reflections.jsonl")
    }
    pub fn codebook(&self) -> PathBuf {
        self.dir.join("codebook.ckpt")
    }
    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn load_backbone(l: &Layout) -> Result<Backbone> {
    let bytes = read_input(&l.backbone())?;
    let c = Container::from_bytes(&bytes).map_err(run_err)?;
    Backbone::from_container(&c).map_err(run_err)
}

fn load_codebook(l: &Layout) -> Result<Codebook> {
    let bytes = read_input(&l.codebook())?;
    let c = Container::from_bytes(&bytes).map_err(run_err)?;
    Codebook::from_container(&c).map_err(run_err)
}

fn load_tasks(l: &Layout, split: &str) -> Result<Vec<TaskInstance>> {
    if split != "test" && split != "train" {
        return Err(CliError::Config(format!("--split must be test or train, got `{split}`")));
    }
    let recs = tasks::read_records(&read_text(&l.tasks(split))?).map_err(run_err)?;
    recs.iter().map(|r| r.to_task().map_err(run_err)).collect()
}

fn load_reflections(l: &Layout) -> Result<Vec<Record>> {
    tasks::read_records(&read_text(&l.reflections())?).map_err(run_err)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    write_atomic(path, (serde_json::to_string_pretty(v).expect("json") + "\n").as_bytes())
}

fn gen_tasks(s: &Settings, l: &Layout) -> Result<Value> {
    let cfg = DatasetConfig {
        families: s.get("families")?,
        per_family: s.get("per_family")?,
        digit_pool: s.get("digit_pool")?,
        seed: s.get("seed")?,
    };
    let splits = tasks::generate_family_dataset(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    for (name, split) in [("train", &splits.train), ("test", &splits.test)] {
        let recs = split
            .iter()
            .map(Record::from_task)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(run_err)?;
        write_atomic(&l.tasks(name), tasks::write_records(&recs).as_bytes())?;
    }
    Ok(json!({ "train": splits.train.len(), "test": splits.test.len() }))
}

fn pretrain(s: &Settings, l: &Layout) -> Result<Value> {
    let cfg = PretrainConfig {
        model: BackboneConfig {
            vocab: Vocab::get().len(),
            width: s.get("width")?,
            layers: s.get("layers")?,
            heads: s.get("heads")?,
            max_positions: s.get("max_positions")?,
        },
        steps: s.get("steps")?,
        batch: s.get("batch")?,
        pack: s.get("pack")?,
        lr: s.get("lr")?,
        warmup: s.get("warmup")?,
        clip: s.get("clip")?,
        seed: s.get("seed")?,
        heldout: s.get("heldout")?,
        accuracy_floor: s.get("accuracy_floor")?,
        late_rate: s.get("late_rate")?,
        late_read: LateRead {
            layer: s.get("late_layer")?,
            ..LateRead::default()
        },
    };
    cfg.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if !(0.0..=1.0).contains(&cfg.late_rate) {
        return Err(CliError::Config(format!("late_rate {} outside [0, 1]", cfg.late_rate)));
    }
    if cfg.late_rate > 0.0 && (cfg.late_read.layer == 0 || cfg.late_read.layer >= cfg.model.layers) {
        return Err(CliError::Config(format!(
            "late_layer {} must satisfy 0 < layer < {}",
            cfg.late_read.layer, cfg.model.layers
        )));
    }
    let text = PretrainTextConfig {
        hint_rate: s.get("hint_rate")?,
        diff_rate: s.get("diff_rate")?,
    };
    let corpus = tasks::pretrain_corpus(cfg.steps * cfg.batch + cfg.heldout, &text, cfg.seed);
    let start = Instant::now();
    let (model, report) = backbone::pretrain_backbone(&corpus, &cfg, |step, loss| {
        if step % 50 == 0 {
            progress("pretrain", json!({ "step": step, "loss": loss, "elapsed_s": start.elapsed().as_secs_f64() }));
        }
    })
    .map_err(run_err)?;
    write_atomic(&l.backbone(), &model.to_container().to_bytes())?;
    let losses: String = report
        .losses
        .iter()
        .enumerate()
        .map(|(i, x)| json!({ "step": i, "loss": x }).to_string() + "\n")
        .collect();
    write_atomic(&l.file("pretrain.metrics.jsonl"), losses.as_bytes())?;
    let summary = json!({
        "format_accuracy": report.format_accuracy,
        "answer_accuracy": report.answer_accuracy,
        "final_loss": report.losses.last(),
        "checksum": model.checksum(),
    });
    write_json(&l.file("pretrain.json"), &summary)?;
    Ok(summary)
}

fn curate(s: &Settings, l: &Layout) -> Result<Value> {
    let model = load_backbone(l)?;
    let tasks = load_tasks(l, "train")?;
    let actor = BackboneActor::new(&model);
    let (records, stats) = reflectgen::curate_dataset(
        &tasks,
        &actor,
        &ScriptedReflector,
        &TaskEnvironment,
        s.get("max_iters")?,
    )
    .map_err(run_err)?;
    write_atomic(&l.reflections(), tasks::write_records(&records).as_bytes())?;
    let summary = serde_json::to_value(&stats).expect("json");
    write_json(&l.file("curate.json"), &summary)?;
    Ok(summary)
}

pub fn train_config(s: &Settings, model: &Backbone) -> Result<TrainConfig> {
    let seed: u64 = s.get("seed")?;
    let layer_set: String = s.get("layer_set")?;
    let cfg = TrainConfig {
        codebook: CodebookConfig {
            units: s.get("units")?,
            width: model.width(),
            select: s.get("select")?,
            layer: s.get("layer")?,
        },
        align_epochs: s.get("align_epochs")?,
        align_lr: s.get("align_lr")?,
        sft_epochs: s.get("sft_epochs")?,
        sft_lr: s.get("sft_lr")?,
        batch: s.get("batch")?,
        align: AlignConfig {
            lambda: s.get("lambda")?,
            iters: s.get("sinkhorn_iters")?,
            layers: LayerSet::parse(&layer_set)
                .ok_or_else(|| CliError::Config(format!("unknown --layer-set `{layer_set}`")))?,
        },
        gumbel: GumbelConfig {
            enabled: s.get("gumbel")?,
            seed,
            temperature: s.get("temperature")?,
        },
        sft_noise: s.get("sft_noise")?,
        align_token_loss: s.get("align_token_loss")?,
        seed,
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    cfg.codebook
        .validate_for(model.layers(), model.width())
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn train_cmd(s: &Settings, l: &Layout) -> Result<Value> {
    let model = load_backbone(l)?;
    let records = load_reflections(l)?;
    let cfg = train_config(s, &model)?;
    let start = Instant::now();
    let out = train::train(&model, &records, &cfg, |r| {
        if r.step % 10 == 0 {
            progress(
                "train",
                json!({ "phase": r.phase.name(), "step": r.step, "loss": r.loss, "elapsed_s": start.elapsed().as_secs_f64() }),
            );
        }
    })
    .map_err(run_err)?;
    write_atomic(&l.file("codebook.align.ckpt"), &out.after_align.to_container().to_bytes())?;
    write_atomic(&l.codebook(), &out.codebook.to_container().to_bytes())?;
    let mut trace = out.align_trace.clone();
    trace.extend(out.sft_trace.iter().cloned());
    write_atomic(&l.file("train.metrics.jsonl"), train::metrics_jsonl(&trace).as_bytes())?;
    let summary = json!({
        "records": records.len(),
        "align_steps": out.align_trace.len(),
        "sft_steps": out.sft_trace.len(),
        "final_align_loss": out.align_trace.last().map(|r| r.loss),
        "final_sft_loss": out.sft_trace.last().map(|r| r.loss),
        "checksum": out.codebook.checksum(),
    });
    write_json(&l.file("train.json"), &summary)?;
    Ok(summary)
}

fn eval_cmd(s: &Settings, l: &Layout) -> Result<Value> {
    let baseline: String = s.get("baseline")?;
    if baseline != "none" && baseline != "rag" {
        return Err(CliError::Config(format!("--baseline must be none or rag, got `{baseline}`")));
    }
    let model = load_backbone(l)?;
    let cb = load_codebook(l)?;
    let split: String = s.get("split")?;
    let tasks = load_tasks(l, &split)?;
    let engine = Engine::new(&model, &cb).map_err(run_err)?;
    let (acc, traces) = infer::eval_codebook(&engine, &tasks).map_err(run_err)?;
    let zero = infer::eval_zero_shot(&model, &tasks).map_err(run_err)?;
    let oracle = infer::eval_oracle_hint(&model, &tasks).map_err(run_err)?;
    let mut summary = json!({
        "split": split,
        "questions": tasks.len(),
        "codebook": acc.accuracy,
        "zero_shot": zero.accuracy,
        "oracle_hint": oracle.accuracy,
    });
    if baseline == "rag" {
        let recs = load_reflections(l)?;
        let store = RagStore::build(&model, &recs, cb.config().layer, s.get("rag_min_size")?).map_err(run_err)?;
        let rag = infer::eval_rag(&model, &store, &tasks).map_err(run_err)?;
        summary["rag"] = json!(rag.accuracy);
        let table = format!(
            "method\taccuracy\ncodebook\t{:.4}\nrag\t{:.4}\nzero-shot\t{:.4}\noracle-hint\t{:.4}\n",
            acc.accuracy, rag.accuracy, zero.accuracy, oracle.accuracy
        );
        write_atomic(&l.file("eval.table.tsv"), table.as_bytes())?;
        eprint!("{table}");
    }
    write_atomic(&l.file("traces.jsonl"), infer::traces_jsonl(&traces).as_bytes())?;
    write_json(&l.file("eval.json"), &summary)?;
    Ok(summary)
}

fn inspect(s: &Settings, l: &Layout, histogram: bool) -> Result<Value> {
    let model = load_backbone(l)?;
    let cb = load_codebook(l)?;
    let split: String = s.get("split")?;
    let tasks = load_tasks(l, &split)?;
    let engine = Engine::new(&model, &cb).map_err(run_err)?;
    let traces = tasks
        .iter()
        .map(|t| engine.answer(&t.id, &t.question).map(|(_, tr)| tr))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(run_err)?;
    let counts = infer::selection_histogram(&traces, cb.config().units).map_err(run_err)?;
    if histogram {
        write_atomic(&l.file("histogram.csv"), infer::histogram_csv(&counts).as_bytes())?;
    }
    Ok(json!({
        "traces": traces.len(),
        "distinct_units": counts.iter().filter(|&&c| c > 0).count(),
        "total_selections": counts.iter().sum::<usize>(),
        "max_count": counts.iter().max(),
    }))
}

fn bench(s: &Settings, l: &Layout) -> Result<Value> {
    let model = load_backbone(l)?;
    let cb = load_codebook(l)?;
    let tasks = load_tasks(l, "test")?;
    let n: usize = s.get("queries")?;
    let queries: Vec<_> = tasks.iter().cycle().take(n.min(tasks.len().max(1) * 1000)).map(|t| t.question.clone()).collect();
    let engine = Engine::new(&model, &cb).map_err(run_err)?;
    let report = infer::bench_latency(&engine, &queries).map_err(run_err)?;
    let v = serde_json::to_value(&report).expect("json");
    write_json(&l.file("bench.json"), &v)?;
    Ok(v)
}

/// Run one invocation; returns the exit code. The summary goes to `stdout`.
pub fn run<I, T>(args: I, env_seed: Option<String>, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let m = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&m, env_seed.as_deref()) {
        Ok(summary) => {
            let _ = writeln!(stdout, "{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(m: &ArgMatches, env_seed: Option<&str>) -> Result<Value> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let keys = COMMANDS
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|(_, k, _)| *k)
        .expect("known subcommand");
    let file = match sub.get_one::<String>("config") {
        Some(p) => Settings::parse_file(&read_text(Path::new(p))?)?,
        None => BTreeMap::new(),
    };
    let settings = Settings::resolve(keys, &file, env_seed, sub)?;
    let dir = PathBuf::from(sub.get_one::<String>("out").expect("defaulted"));
    let _lock = DirLock::acquire(&dir)?;
    let layout = Layout { dir };
    let start = Instant::now();
    let summary = match name {
        "gen-tasks" => gen_tasks(&settings, &layout),
        "pretrain" => pretrain(&settings, &layout),
        "curate" => curate(&settings, &layout),
        "train" => train_cmd(&settings, &layout),
        "eval" => eval_cmd(&settings, &layout),
        "inspect" => inspect(&settings, &layout, sub.get_flag("histogram")),
        "bench" => bench(&settings, &layout),
        _ => unreachable!("known subcommand"),
    }?;
    write_atomic(&layout.file(&format!("{name}.config")), settings.snapshot().as_bytes())?;
    progress(name, json!({ "done": true, "elapsed_s": start.elapsed().as_secs_f64() }));
    Ok(summary)
}
