use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mmrec::data::{filter_and_split, generate_synthetic, load_dataset, write_dataset, Catalog, Dataset, DatasetStats, SplitDataset};
use mmrec::eval::{evaluate, evaluate_cold_start, EvalOptions, MetricsReport, RandomScorer, Scorer};
use mmrec::gradcheck::run_loss_suite;
use mmrec::model::{ItemRepr, Model};
use mmrec::rng::derive_seed;
use mmrec::training::{finetune, pretrain, TrainOutcome};
use mmrec::transfer::{load_bundle, load_components, load_model, save_bundle, ModelScorer};

use crate::config::{RunConfig, ScorerKind};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Pretrain,
    Finetune,
    Evaluate,
    ColdEval,
    GradCheck,
    Stats,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::ColdEval => "cold-eval",
            Command::GradCheck => "grad-check",
            Command::Stats => "stats",
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("cannot write {}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Runtime(format!("cannot write to stdout: {e}")))
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str, cmd: Command) -> Result<&'a Path, CliError> {
    let path = value.as_deref().ok_or_else(|| {
        CliError::Validation(format!("`{}` needs config key `{key}`", cmd.name()))
    })?;
    if !path.is_file() {
        return Err(CliError::Validation(format!(
            "config key `{key}`: file {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}

fn load(cfg: &RunConfig, cmd: Command) -> Result<Dataset, CliError> {
    let items = required(&cfg.items, "items", cmd)?;
    let interactions = required(&cfg.interactions, "interactions", cmd)?;
    load_dataset(items, interactions, cfg.patch_shape()).map_err(|e| match e {
        mmrec::Error::Io { path, source } => {
            CliError::Validation(format!("cannot read {}: {source}", path.display()))
        }
        other => other.into(),
    })
}

fn load_split(cfg: &RunConfig, cmd: Command) -> Result<(SplitDataset, Catalog), CliError> {
    let ds = load(cfg, cmd)?;
    let split = filter_and_split(&ds, cfg.min_interactions).map_err(|e| {
        CliError::Validation(format!(
            "{} with min_interactions = {}: {e}",
            cfg.items.as_deref().unwrap_or(Path::new("")).display(),
            cfg.min_interactions
        ))
    })?;
    let catalog = split.catalog()?;
    Ok((split, catalog))
}

fn dataset_label(cfg: &RunConfig) -> String {
    cfg.items
        .as_deref()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().trim_end_matches(".items.tsv").to_string())
        .unwrap_or_default()
}

struct Outputs {
    dir: PathBuf,
    prefix: &'static str,
}

impl Outputs {
    fn create(cfg: &RunConfig, cmd: Command) -> Result<Self, CliError> {
        let dir = cfg.out_dir.clone();
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::Runtime(format!("cannot create out_dir {}: {e}", dir.display())))?;
        let o = Outputs { dir, prefix: cmd.name() };
        write_file(&o.path("config"), cfg.dump())?;
        Ok(o)
    }

    fn path(&self, ext: &str) -> PathBuf {
        self.dir.join(format!("{}.{ext}", self.prefix))
    }
}

fn write_training(o: &Outputs, outcome: &TrainOutcome<f64>, seconds: f64) -> Result<(), CliError> {
    let log: String = outcome.log.iter().map(|r| r.to_json_line() + "\n").collect();
    write_file(&o.path("log.jsonl"), log)?;
    write_file(
        &o.path("timing.json"),
        format!("{{\"command\":\"{}\",\"seconds\":{:.3}}}\n", o.prefix, seconds),
    )?;
    let ckpt = o.path("ckpt");
    save_bundle(&outcome.model, &ckpt).map_err(|e| CliError::Runtime(e.to_string()))
}

fn training_summary(outcome: &TrainOutcome<f64>, o: &Outputs) -> String {
    let best = &outcome.log[outcome.best_epoch];
    format!(
        "epochs run {}, best epoch {} (valid HR@10 {:.4}, NDCG@10 {:.4})\nwrote {}\n",
        outcome.log.len() - 1,
        outcome.best_epoch,
        best.valid_hr10,
        best.valid_ndcg10,
        o.path("ckpt").display()
    )
}

fn gen_data(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    cfg.validate_synthetic()?;
    let o = Outputs::create(cfg, Command::GenData)?;
    let syn = generate_synthetic(&cfg.synthetic_config())?;
    let mut domains = vec![("source", &syn.source)];
    if !syn.target.users.is_empty() {
        domains.push(("target", &syn.target));
    }
    for (name, ds) in domains {
        let items = o.dir.join(format!("{name}.items.tsv"));
        let inter = o.dir.join(format!("{name}.interactions.tsv"));
        write_dataset(ds, &items, &inter).map_err(|e| CliError::Runtime(e.to_string()))?;
        emit(out, &format!("{name}: {} / {}\n{}", items.display(), inter.display(), DatasetStats::of(ds)))?;
    }
    Ok(())
}

fn stats(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let ds = load(cfg, Command::Stats)?;
    let o = Outputs::create(cfg, Command::Stats)?;
    let table = DatasetStats::of(&ds).to_string();
    write_file(&o.path("txt"), &table)?;
    emit(out, &table)
}

fn run_pretrain(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let (split, catalog) = load_split(cfg, Command::Pretrain)?;
    let o = Outputs::create(cfg, Command::Pretrain)?;
    let model = Model::<f64>::new(cfg.model.clone(), ItemRepr::Fused, derive_seed(cfg.seed, "init"))?;
    let t0 = Instant::now();
    let outcome = pretrain(model, &split, &catalog, &cfg.train_config())?;
    write_training(&o, &outcome, t0.elapsed().as_secs_f64())?;
    emit(out, &training_summary(&outcome, &o))
}

fn run_finetune(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let (split, catalog) = load_split(cfg, Command::Finetune)?;
    let init_seed = derive_seed(cfg.seed, "finetune-init");
    let model = match &cfg.checkpoint {
        Some(_) => {
            let path = required(&cfg.checkpoint, "checkpoint", Command::Finetune)?;
            let bundle = load_bundle::<f64>(path)
                .map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", path.display())))?;
            load_components(&bundle, cfg.mode, init_seed, &cfg.model)
                .map_err(|e| CliError::Validation(format!("checkpoint {} (mode {}): {e}", path.display(), cfg.mode)))?
        }
        None => {
            emit(out, "no checkpoint given: training from scratch\n")?;
            Model::new(cfg.model.clone(), cfg.mode.repr(), init_seed)?
        }
    };
    let o = Outputs::create(cfg, Command::Finetune)?;
    let t0 = Instant::now();
    let outcome = finetune(model, &split, &catalog, &cfg.train_config())?;
    write_training(&o, &outcome, t0.elapsed().as_secs_f64())?;
    emit(out, &training_summary(&outcome, &o))
}

fn with_scorer<F>(cfg: &RunConfig, cmd: Command, catalog: &Catalog, f: F) -> Result<MetricsReport, CliError>
where
    F: FnOnce(&mut dyn Scorer) -> mmrec::Result<MetricsReport>,
{
    match cfg.scorer {
        ScorerKind::Random => Ok(f(&mut RandomScorer::new(catalog.len(), derive_seed(cfg.seed, "random-scorer")))?),
        ScorerKind::Model => {
            let path = required(&cfg.checkpoint, "checkpoint", cmd)?;
            let model = load_model::<f64>(path)
                .map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", path.display())))?;
            let mut scorer = ModelScorer::new(&model, catalog);
            Ok(f(&mut scorer)?)
        }
    }
}

fn report(cfg: &RunConfig, cmd: Command, rep: MetricsReport, out: &mut dyn Write) -> Result<(), CliError> {
    let mode = match cfg.scorer {
        ScorerKind::Model => cfg.mode.name(),
        ScorerKind::Random => "random",
    };
    let phase = rep.phase.clone();
    let rep = rep.labeled(&dataset_label(cfg), mode, &phase);
    let o = Outputs::create(cfg, cmd)?;
    write_file(&o.path("metrics.txt"), rep.to_string())?;
    write_file(&o.path("metrics.jsonl"), rep.to_json_line() + "\n")?;
    emit(out, &rep.to_string())
}

fn run_evaluate(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let (split, catalog) = load_split(cfg, Command::Evaluate)?;
    let opts = EvalOptions {
        exclude_seen: cfg.exclude_seen,
        chunk: 0,
    };
    let rep = with_scorer(cfg, Command::Evaluate, &catalog, |s| {
        evaluate(s, &split, &catalog, cfg.phase, &opts)
    })?;
    report(cfg, Command::Evaluate, rep, out)
}

fn run_cold_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let (split, catalog) = load_split(cfg, Command::ColdEval)?;
    let opts = EvalOptions {
        exclude_seen: cfg.exclude_seen,
        chunk: 0,
    };
    let rep = with_scorer(cfg, Command::ColdEval, &catalog, |s| {
        evaluate_cold_start(s, &split, &catalog, cfg.cold_threshold, &opts)
    })?;
    report(cfg, Command::ColdEval, rep, out)
}

fn grad_check(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let o = Outputs::create(cfg, Command::GradCheck)?;
    let suite = cfg.suite_config();
    let reports = run_loss_suite(&suite)?;
    let mut table = format!("{:<6} {:>7} {:>12}  {:<28} result\n", "loss", "params", "max_rel_err", "worst parameter");
    let mut lines = String::new();
    let mut failed = Vec::new();
    for (name, r) in &reports {
        let worst = r.worst().map(|p| p.name.as_str()).unwrap_or("-");
        let verdict = if r.pass() { "PASS" } else { "FAIL" };
        table += &format!("{:<6} {:>7} {:>12.3e}  {:<28} {}\n", name, r.params.len(), r.max_rel_err(), worst, verdict);
        let json = serde_json::json!({ "loss": name, "pass": r.pass(), "max_rel_err": r.max_rel_err(), "tol": r.tol, "params": r.params });
        lines += &format!("{json}\n");
        if !r.pass() {
            failed.push(name.as_str());
        }
    }
    write_file(&o.path("jsonl"), lines)?;
    emit(out, &table)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check above tolerance {} for: {}",
            suite.tol,
            failed.join(", ")
        )))
    }
}

pub fn run(cmd: Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::GenData => gen_data(cfg, out),
        Command::Pretrain => run_pretrain(cfg, out),
        Command::Finetune => run_finetune(cfg, out),
        Command::Evaluate => run_evaluate(cfg, out),
        Command::ColdEval => run_cold_eval(cfg, out),
        Command::GradCheck => grad_check(cfg, out),
        Command::Stats => stats(cfg, out),
    }
}
