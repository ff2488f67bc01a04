//! Command implementations behind the CLI.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use msr_core::datagen::{latent_auc, BenchmarkConfig, Split};
use msr_core::features::{Sample, Standardizer};
use msr_core::kd::{pretrain_target_memory, train_kd, CityMemoryBank, KdEpochRecord, KdModel, KdMonitor};
use msr_core::model::{ModelConfig, MvModel};
use msr_core::train::{evaluate_split, seeded, train_mv, EpochRecord, Monitor, TrainConfig, STREAM_INIT};
use serde::Serialize;
use serde_json::json;

use crate::bench::{infer_latency, train_scaling};
use crate::checkpoint::{Branch, Checkpoint, Model, ModelKind, HISTORY_FILE, MODEL_FILE};
use crate::cli::{
    BenchArgs, BenchKind, Command, EvalArgs, ExportArgs, GenDataArgs, ServeArgs, SplitName, TrainKdArgs,
    TrainKind, TrainMvArgs,
};
use crate::dataset::{self, load_split};
use crate::error::{io, Error, Result};
use crate::serve::{Server, Transport};

/// Embedding sizes and memory rows covered by `train-mv --sweep`.
pub const SWEEP_EMBED: [usize; 4] = [16, 32, 64, 128];
pub const SWEEP_ROWS: [usize; 3] = [8, 16, 32];

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::TrainMv(a) => train_mv_cmd(&a),
        Command::ExportMemory(a) => export_memory(&a),
        Command::TrainKd(a) => train_kd_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::Bench(a) => bench(&a),
        Command::Serve(a) => serve(&a),
    }
}

fn announce(command: &str, args: &impl Serialize) {
    log::info!("{command} {}", serde_json::to_string(args).expect("args serialize"));
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    let text = serde_json::to_string(value).expect("report serializes");
    writeln!(out, "{text}").map_err(io("<stdout>"))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("history serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io(path))
}

/// Directory a training run writes into.
pub fn model_dir(ckpt: &Path, city: &str, suffix: &str) -> PathBuf {
    if suffix.is_empty() {
        ckpt.join(city)
    } else {
        ckpt.join(format!("{city}-{suffix}"))
    }
}

pub fn memory_path(ckpt: &Path, city: &str) -> PathBuf {
    ckpt.join(format!("{city}.mem"))
}

fn context_len(split: &Split) -> Result<usize> {
    let len = split.train.first().map(|s| s.context.len()).unwrap_or(0);
    let all = split.train.iter().chain(&split.val).chain(&split.test);
    if len == 0 || all.clone().any(|s| s.context.len() != len) {
        return Err(Error::Schema("rows must share one non-zero context length".into()));
    }
    Ok(len)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    announce("gen-data", a);
    let cfg = BenchmarkConfig {
        source_rows: a.source_rows,
        target_rows: a.target_rows,
        delta: a.delta,
        ctx_len: a.ctx_len,
        seed: a.seed,
        ..BenchmarkConfig::default()
    };
    if a.source_rows == 0 || a.target_rows == 0 || a.ctx_len == 0 || !(a.delta >= 0.0) {
        return Err(Error::Usage("row counts and --ctx-len must be >= 1 and --delta >= 0".into()));
    }
    let manifest = dataset::generate(&a.out, &cfg)?;
    print_json(&manifest)
}

/// Wall-clock timing plus per-epoch logging.
struct Progress {
    start: Instant,
    label: String,
}

impl Progress {
    fn new(label: impl Into<String>) -> Self {
        Self {
            start: Instant::now(),
            label: label.into(),
        }
    }
}

impl Monitor for Progress {
    fn now(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn epoch(&mut self, r: &EpochRecord) {
        log::info!(
            "{} epoch {}: loss {:.5} val auc {} rmse {:.5} ({:.1}s)",
            self.label,
            r.epoch,
            r.loss,
            r.val_auc.map_or("n/a".into(), |a| format!("{a:.5}")),
            r.val_rmse,
            r.secs
        );
    }
}

impl KdMonitor for Progress {
    fn now(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn epoch(&mut self, r: &KdEpochRecord) {
        log::info!(
            "{} epoch {}: loss {:.5} cos {:.4} val auc teacher {} student {} (a {:.3} b {:.3} g {:.3}, {:.1}s)",
            self.label,
            r.epoch,
            r.loss,
            r.mean_cos,
            r.val_auc_teacher.map_or("n/a".into(), |a| format!("{a:.5}")),
            r.val_auc_student.map_or("n/a".into(), |a| format!("{a:.5}")),
            r.alpha,
            r.beta,
            r.gamma,
            r.secs
        );
    }
}

#[derive(Serialize)]
struct HistoryLine {
    epoch: usize,
    loss: f64,
    val_auc: Option<f64>,
    val_rmse: f64,
    secs: f64,
}

impl From<&EpochRecord> for HistoryLine {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            loss: r.loss,
            val_auc: r.val_auc,
            val_rmse: r.val_rmse,
            secs: r.secs,
        }
    }
}

#[derive(Serialize)]
struct KdHistoryLine {
    epoch: usize,
    loss: f64,
    bce_teacher: f64,
    bce_student: f64,
    mean_cos: f64,
    val_auc_teacher: Option<f64>,
    val_auc_student: Option<f64>,
    val_rmse_student: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
    secs: f64,
}

impl From<&KdEpochRecord> for KdHistoryLine {
    fn from(r: &KdEpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            loss: r.loss,
            bce_teacher: r.bce_teacher,
            bce_student: r.bce_student,
            mean_cos: r.mean_cos,
            val_auc_teacher: r.val_auc_teacher,
            val_auc_student: r.val_auc_student,
            val_rmse_student: r.val_rmse_student,
            alpha: r.alpha,
            beta: r.beta,
            gamma: r.gamma,
            secs: r.secs,
        }
    }
}

struct Trained {
    model: MvModel,
    history: Vec<EpochRecord>,
    best_epoch: usize,
}

fn fit(kind: TrainKind, config: ModelConfig, split: &Split, cfg: &TrainConfig, label: &str) -> Result<Trained> {
    let stats = Standardizer::fit(&split.train);
    let mut rng = seeded(cfg.seed, STREAM_INIT);
    let mut model = match kind {
        TrainKind::Mv => MvModel::new(config, stats, &mut rng)?,
        TrainKind::Student => MvModel::student(config, stats, &mut rng)?,
    };
    let outcome = train_mv(&mut model, &split.train, &split.val, cfg, &mut Progress::new(label))?;
    Ok(Trained {
        model,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
    })
}

fn train_mv_cmd(a: &TrainMvArgs) -> Result<()> {
    announce("train-mv", a);
    let cfg = a.fit.train_config()?;
    let split = load_split(&a.data, &a.city)?;
    let config = a.model_args.config(context_len(&split)?)?;
    if a.sweep {
        return sweep(a, config, &split, &cfg);
    }
    let t = fit(a.model, config, &split, &cfg, &a.city)?;
    let (kind, suffix) = match a.model {
        TrainKind::Mv => (ModelKind::Mv, config.ablation.tag()),
        TrainKind::Student => (ModelKind::Student, "student"),
    };
    let dir = model_dir(&a.ckpt, &a.city, if suffix == "mv" { "" } else { suffix });
    let mut ckpt = Checkpoint::from_store(kind, &a.city, cfg.seed, config, Some(t.model.stats.clone()), &t.model.store);
    ckpt.header.meta.insert("best_epoch".into(), json!(t.best_epoch));
    ckpt.save(&dir.join(MODEL_FILE))?;
    let lines: Vec<HistoryLine> = t.history.iter().map(Into::into).collect();
    write_jsonl(&dir.join(HISTORY_FILE), &lines)?;
    let test = evaluate_split(&split.test, |s| t.model.predict(s))?;
    print_json(&json!({
        "city": a.city,
        "kind": kind,
        "ablation": config.ablation.tag(),
        "dir": dir,
        "best_epoch": t.best_epoch,
        "val_auc": t.history[t.best_epoch - 1].val_auc,
        "test_auc": test.auc,
        "test_rmse": test.rmse,
        "oracle_auc": latent_auc(&split.test),
    }))
}

fn sweep(a: &TrainMvArgs, base: ModelConfig, split: &Split, cfg: &TrainConfig) -> Result<()> {
    let dir = model_dir(&a.ckpt, &a.city, "sweep");
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let mut summary = Vec::new();
    for &d in &SWEEP_EMBED {
        for &n in &SWEEP_ROWS {
            let config = ModelConfig {
                embed_dim: d,
                hidden: d,
                mem_rows: n,
                ..base
            };
            let label = format!("{} d={d} n={n}", a.city);
            let t = fit(a.model, config, split, cfg, &label)?;
            let lines: Vec<HistoryLine> = t.history.iter().map(Into::into).collect();
            write_jsonl(&dir.join(format!("d{d}_n{n}.jsonl")), &lines)?;
            let test = evaluate_split(&split.test, |s| t.model.predict(s))?;
            summary.push(json!({
                "embed_dim": d,
                "mem_rows": n,
                "best_epoch": t.best_epoch,
                "val_auc": t.history[t.best_epoch - 1].val_auc,
                "test_auc": test.auc,
                "test_rmse": test.rmse,
            }));
        }
    }
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("serializes") + "\n").map_err(io(&path))?;
    print_json(&json!({ "city": a.city, "dir": dir, "points": summary }))
}

fn export_memory(a: &ExportArgs) -> Result<()> {
    announce("export-memory", a);
    let path = model_dir(&a.ckpt, &a.city, "").join(MODEL_FILE);
    let ckpt = Checkpoint::load(&path)?;
    let header = ckpt.header.clone();
    let memory = match ckpt.into_model().map_err(|source| Error::Checkpoint { path: path.clone(), source })? {
        Model::Mv(m) => m
            .memory()
            .cloned()
            .ok_or_else(|| Error::Usage(format!("{} has no memory (ablation {})", path.display(), header.ablation)))?,
        _ => return Err(Error::Usage(format!("{} is not a multi-view checkpoint", path.display()))),
    };
    let out = memory_path(&a.ckpt, &a.city);
    Checkpoint::memory(&a.city, header.seed, header.config, &memory).save(&out)?;
    print_json(&json!({
        "city": a.city,
        "file": out,
        "rows": memory.rows(),
        "cols": memory.cols(),
        "frobenius": memory.frobenius_norm(),
    }))
}

fn load_bank(ckpt: &Path, target: &str, sources: &[String]) -> Result<CityMemoryBank> {
    let cities: Vec<String> = if sources.is_empty() {
        let mut found = Vec::new();
        for entry in fs::read_dir(ckpt).map_err(io(ckpt))? {
            let path = entry.map_err(io(ckpt))?.path();
            if path.extension().is_some_and(|e| e == "mem") {
                if let Some(city) = path.file_stem().and_then(|s| s.to_str()) {
                    if city != target {
                        found.push(city.to_string());
                    }
                }
            }
        }
        found.sort();
        found
    } else {
        sources.to_vec()
    };
    if cities.is_empty() {
        return Err(Error::Usage(format!(
            "no source memories in {}; run export-memory first",
            ckpt.display()
        )));
    }
    let mut entries = Vec::new();
    for city in cities {
        let path = memory_path(ckpt, &city);
        let model = Checkpoint::load(&path)?
            .into_model()
            .map_err(|source| Error::Checkpoint { path: path.clone(), source })?;
        match model {
            Model::Memory(m) => entries.push((city, m)),
            _ => return Err(Error::Usage(format!("{} is not a memory file", path.display()))),
        }
    }
    Ok(CityMemoryBank::new(entries)?)
}

fn train_kd_cmd(a: &TrainKdArgs) -> Result<()> {
    announce("train-kd", a);
    let cfg = a.fit.train_config()?;
    if a.pretrain_epochs == 0 {
        return Err(Error::Usage("--pretrain-epochs must be >= 1".into()));
    }
    let split = load_split(&a.data, &a.city)?;
    let config = a.model_args.config(context_len(&split)?)?;
    if config.ablation.plain_gru {
        return Err(Error::Usage("the teacher needs the memory encoder; --ablate s3 is not allowed".into()));
    }
    let bank = load_bank(&a.ckpt, &a.city, &a.sources)?;
    log::info!("bank: {}", bank.cities.join(", "));
    let memory = pretrain_target_memory(config, &split.train, &split.val, &cfg, a.pretrain_epochs)?;
    let stats = Standardizer::fit(&split.train);
    let mut model = KdModel::new(config, &bank, Some(&memory), stats, &mut seeded(cfg.seed, STREAM_INIT))?;
    let outcome = train_kd(&mut model, &split.train, &split.val, &cfg, &mut Progress::new(&a.city))?;
    let dir = model_dir(&a.ckpt, &a.city, "kd");
    let mut ckpt = Checkpoint::from_store(ModelKind::Kd, &a.city, cfg.seed, config, Some(model.stats.clone()), &model.store);
    ckpt.header.meta.insert("best_epoch".into(), json!(outcome.best_epoch));
    ckpt.header.meta.insert("bank".into(), json!(bank.cities));
    ckpt.header.meta.insert("pretrain_epochs".into(), json!(a.pretrain_epochs));
    ckpt.save(&dir.join(MODEL_FILE))?;
    let lines: Vec<KdHistoryLine> = outcome.history.iter().map(Into::into).collect();
    write_jsonl(&dir.join(HISTORY_FILE), &lines)?;
    let teacher = evaluate_split(&split.test, |s| model.predict_teacher(s))?;
    let student = evaluate_split(&split.test, |s| model.predict_student(s))?;
    let (tp, sp) = model.param_counts();
    print_json(&json!({
        "city": a.city,
        "kind": ModelKind::Kd,
        "dir": dir,
        "bank": bank.cities,
        "best_epoch": outcome.best_epoch,
        "teacher": { "test_auc": teacher.auc, "test_rmse": teacher.rmse, "params": tp },
        "student": { "test_auc": student.auc, "test_rmse": student.rmse, "params": sp },
        "oracle_auc": latent_auc(&split.test),
    }))
}

fn load_model(dir: &Path) -> Result<(Checkpoint, Model)> {
    let path = dir.join(MODEL_FILE);
    let ckpt = Checkpoint::load(&path)?;
    let model = ckpt
        .clone()
        .into_model()
        .map_err(|source| Error::Checkpoint { path, source })?;
    Ok((ckpt, model))
}

fn split_rows(split: Split, name: SplitName) -> Vec<Sample> {
    match name {
        SplitName::Train => split.train,
        SplitName::Val => split.val,
        SplitName::Test => split.test,
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    announce("eval", a);
    let (ckpt, model) = load_model(&a.ckpt)?;
    let branch = a.model.unwrap_or_else(|| model.default_branch());
    model.check_branch(branch)?;
    let city = &ckpt.header.city;
    let rows = split_rows(load_split(&a.data, city)?, a.split);
    let ctx = model.config().map(|c| c.ctx_len).unwrap_or(0);
    if rows.iter().any(|s| s.context.len() != ctx) {
        return Err(Error::Schema(format!("data context length differs from the model's {ctx}")));
    }
    let scores = model.predict(branch, &rows)?;
    let labels: Vec<f64> = rows.iter().map(|s| f64::from(s.label)).collect();
    let metrics = msr_core::metrics::evaluate(&scores, &labels)?;
    print_json(&json!({
        "city": city,
        "split": a.split,
        "kind": ckpt.header.kind,
        "model": branch,
        "ablation": ckpt.header.ablation,
        "rows": rows.len(),
        "auc": metrics.auc,
        "rmse": metrics.rmse,
        "oracle_auc": latent_auc(&rows),
    }))
}

fn bench(a: &BenchArgs) -> Result<()> {
    announce("bench", a);
    let split = load_split(&a.data, &a.city)?;
    match a.kind {
        BenchKind::TrainScaling => {
            let config = a.model_args.config(context_len(&split)?)?;
            let base = a.rows.unwrap_or(split.train.len() / 2);
            if base == 0 || 2 * base > split.train.len() {
                return Err(Error::Usage(format!(
                    "base size {base} needs {} training rows, {} available",
                    2 * base,
                    split.train.len()
                )));
            }
            let cfg = TrainConfig {
                batch: a.batch,
                max_epochs: a.epochs,
                seed: a.seed,
                ..TrainConfig::default()
            };
            cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
            let val = &split.val[..split.val.len().min(256)];
            let report = train_scaling(config, &split.train, val, base, &cfg)?;
            print_json(&json!({
                "kind": "train-scaling",
                "city": a.city,
                "points": report.points,
                "slope": report.fit.slope,
                "intercept": report.fit.intercept,
                "r2": report.fit.r2,
            }))
        }
        BenchKind::InferLatency => {
            let dir = a
                .ckpt
                .as_ref()
                .ok_or_else(|| Error::Usage("infer-latency needs --ckpt".into()))?;
            let (_, model) = load_model(dir)?;
            if !matches!(model, Model::Kd(_)) {
                return Err(Error::Usage("infer-latency needs a distillation checkpoint".into()));
            }
            if a.requests == 0 {
                return Err(Error::Usage("--requests must be >= 1".into()));
            }
            let teacher = infer_latency(&model, Branch::Teacher, &split.test, a.requests)?;
            let student = infer_latency(&model, Branch::Student, &split.test, a.requests)?;
            print_json(&json!({
                "kind": "infer-latency",
                "city": a.city,
                "unit": "micros",
                "teacher": teacher,
                "student": student,
            }))
        }
    }
}

fn serve(a: &ServeArgs) -> Result<()> {
    announce("serve", a);
    let transport: Transport = a.transport.parse()?;
    let (_, model) = load_model(&a.ckpt)?;
    let server = Server::new(model, a.model)?;
    log::info!("serving the {:?} model", server.branch());
    server.run(transport)
}
