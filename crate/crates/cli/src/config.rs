//! Run configuration: `key = value` lines, `#` comments, then `MMREC_*`
//! environment variables, then command-line `key=value` pairs.

use std::collections::BTreeMap;
use std::fmt::{self, Display};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mmrec::data::{PatchShape, SyntheticConfig};
use mmrec::encoders::EncoderConfig;
use mmrec::eval::Phase;
use mmrec::gradcheck::SuiteConfig;
use mmrec::model::ModelConfig;
use mmrec::objectives::{ContrastiveVariant, ObjectiveConfig, Pooling};
use mmrec::training::TrainConfig;
use mmrec::transfer::TransferMode;
use mmrec::user_encoder::UserEncoderConfig;

use crate::CliError;

pub const ENV_PREFIX: &str = "MMREC_";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorerKind {
    Model,
    Random,
}

impl FromStr for ScorerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "model" => Ok(Self::Model),
            "random" => Ok(Self::Random),
            _ => Err("expected `model` or `random`".into()),
        }
    }
}

impl Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Model => "model",
            Self::Random => "random",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub out_dir: PathBuf,
    pub items: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub mode: TransferMode,
    pub min_interactions: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub phase: Phase,
    pub exclude_seen: bool,
    pub cold_threshold: usize,
    pub scorer: ScorerKind,
    /// vocab_size, q, patch_dim and seed come from the shared keys
    pub synthetic: SyntheticConfig,
    /// seed comes from the shared key
    pub gradcheck: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig {
            encoder: EncoderConfig {
                d: 16,
                n_blocks: 1,
                n_heads: 2,
                vocab_size: 1000,
                p_max: 8,
                q: 16,
                patch_dim: 12,
                trainable_top_blocks: None,
                patch_positions: true,
            },
            user: UserEncoderConfig {
                n_blocks: 1,
                n_heads: 2,
                l_max: 20,
                dropout: 0.0,
            },
        };
        Self {
            seed: 0,
            threads: 1,
            out_dir: PathBuf::from("out"),
            items: None,
            interactions: None,
            checkpoint: None,
            mode: TransferMode::Full,
            min_interactions: 5,
            train: TrainConfig {
                l_max: model.user.l_max,
                ..TrainConfig::default()
            },
            model,
            phase: Phase::Test,
            exclude_seen: false,
            cold_threshold: 10,
            scorer: ScorerKind::Model,
            synthetic: SyntheticConfig::default(),
            gradcheck: SuiteConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Validation(format!("config key `{key}`: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Validation(format!(
            "config key `{key}`: expected true or false, got `{value}`"
        ))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn show_opt<T: Display>(v: Option<T>, none: &str) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| none.to_string())
}

fn parse_phase(key: &str, value: &str) -> Result<Phase, CliError> {
    value
        .parse()
        .map_err(|e: mmrec::Error| CliError::Validation(format!("config key `{key}`: {e}")))
}

fn show_phase(p: Phase) -> &'static str {
    match p {
        Phase::Valid => "valid",
        Phase::Test => "test",
    }
}

fn parse_objectives(value: &str, base: &ObjectiveConfig) -> Result<ObjectiveConfig, CliError> {
    let mut o = ObjectiveConfig {
        dap: false,
        contrastive: None,
        nid: false,
        rcl: false,
        ..base.clone()
    };
    for name in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match name {
            "dap" => o.dap = true,
            "nid" => o.nid = true,
            "rcl" => o.rcl = true,
            other => {
                let v: ContrastiveVariant = other.parse().map_err(|_| {
                    CliError::Validation(format!(
                        "config key `objectives`: unknown objective `{other}` (dap, nicl, vcl, icl, nid, rcl)"
                    ))
                })?;
                if o.contrastive.is_some() {
                    return Err(CliError::Validation(
                        "config key `objectives`: at most one of nicl, vcl, icl may be enabled".into(),
                    ));
                }
                o.contrastive = Some(v);
            }
        }
    }
    Ok(o)
}

fn show_objectives(o: &ObjectiveConfig) -> String {
    let mut names = Vec::new();
    if o.dap {
        names.push("dap");
    }
    match o.contrastive {
        Some(ContrastiveVariant::Nicl) => names.push("nicl"),
        Some(ContrastiveVariant::Vcl) => names.push("vcl"),
        Some(ContrastiveVariant::Icl) => names.push("icl"),
        None => {}
    }
    if o.nid {
        names.push("nid");
    }
    if o.rcl {
        names.push("rcl");
    }
    names.join(",")
}

impl RunConfig {
    /// Every key with its current value, in dump order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.model.encoder;
        let u = &self.model.user;
        let t = &self.train;
        let o = &t.objectives;
        let s = &self.synthetic;
        let g = &self.gradcheck;
        vec![
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("items", show_path(&self.items)),
            ("interactions", show_path(&self.interactions)),
            ("checkpoint", show_path(&self.checkpoint)),
            ("mode", self.mode.to_string()),
            ("min_interactions", self.min_interactions.to_string()),
            ("d", e.d.to_string()),
            ("n_blocks", e.n_blocks.to_string()),
            ("n_heads", e.n_heads.to_string()),
            ("vocab_size", e.vocab_size.to_string()),
            ("p_max", e.p_max.to_string()),
            ("q", e.q.to_string()),
            ("patch_dim", e.patch_dim.to_string()),
            ("patch_positions", e.patch_positions.to_string()),
            ("trainable_top_blocks", show_opt(e.trainable_top_blocks, "all")),
            ("user_blocks", u.n_blocks.to_string()),
            ("user_heads", u.n_heads.to_string()),
            ("l_max", u.l_max.to_string()),
            ("dropout", format!("{:?}", u.dropout)),
            ("learning_rate", format!("{:?}", t.learning_rate)),
            ("weight_decay", format!("{:?}", t.weight_decay)),
            ("beta1", format!("{:?}", t.beta1)),
            ("beta2", format!("{:?}", t.beta2)),
            ("adam_eps", format!("{:?}", t.adam_eps)),
            ("max_epochs", t.max_epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("grad_clip", show_opt(t.grad_clip.map(|c| format!("{c:?}")), "none")),
            ("objectives", show_objectives(o)),
            ("temperature", format!("{:?}", o.temperature)),
            ("shuffle_rate", format!("{:?}", o.shuffle_rate)),
            ("replace_rate", format!("{:?}", o.replace_rate)),
            ("pooling", if o.pooling == Pooling::Mean { "mean" } else { "last" }.to_string()),
            ("weight_dap", format!("{:?}", o.weights.dap)),
            ("weight_contrastive", format!("{:?}", o.weights.contrastive)),
            ("weight_nid", format!("{:?}", o.weights.nid)),
            ("weight_rcl", format!("{:?}", o.weights.rcl)),
            ("phase", show_phase(self.phase).to_string()),
            ("exclude_seen", self.exclude_seen.to_string()),
            ("cold_threshold", self.cold_threshold.to_string()),
            ("scorer", self.scorer.to_string()),
            ("n_users", s.n_users.to_string()),
            ("n_items", s.n_items.to_string()),
            ("target_users", s.target_users.to_string()),
            ("target_items", s.target_items.to_string()),
            ("seq_min", s.l_min.to_string()),
            ("seq_max", s.l_max.to_string()),
            ("text_len", s.text_len.to_string()),
            ("n_latent_styles", s.n_latent_styles.to_string()),
            ("transition_noise", format!("{:?}", s.transition_noise)),
            ("dominant_prob", format!("{:?}", s.dominant_prob)),
            ("zipf_exponent", format!("{:?}", s.zipf_exponent)),
            ("patch_noise", format!("{:?}", s.patch_noise)),
            ("gc_batch", g.batch.to_string()),
            ("gc_len", g.len.to_string()),
            ("gc_d", g.d.to_string()),
            ("gc_p_max", g.p_max.to_string()),
            ("gc_q", g.q.to_string()),
            ("gc_step", format!("{:?}", g.step)),
            ("gc_tol", format!("{:?}", g.tol)),
            ("gc_jitter", format!("{:?}", g.jitter)),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        let e = &mut self.model.encoder;
        let u = &mut self.model.user;
        let t = &mut self.train;
        let s = &mut self.synthetic;
        let g = &mut self.gradcheck;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "items" => self.items = parse_path(value),
            "interactions" => self.interactions = parse_path(value),
            "checkpoint" => self.checkpoint = parse_path(value),
            "mode" => self.mode = parse(key, value)?,
            "min_interactions" => self.min_interactions = parse(key, value)?,
            "d" => e.d = parse(key, value)?,
            "n_blocks" => e.n_blocks = parse(key, value)?,
            "n_heads" => e.n_heads = parse(key, value)?,
            "vocab_size" => e.vocab_size = parse(key, value)?,
            "p_max" => e.p_max = parse(key, value)?,
            "q" => e.q = parse(key, value)?,
            "patch_dim" => e.patch_dim = parse(key, value)?,
            "patch_positions" => e.patch_positions = parse_bool(key, value)?,
            "trainable_top_blocks" => {
                e.trainable_top_blocks = if value == "all" { None } else { Some(parse(key, value)?) }
            }
            "user_blocks" => u.n_blocks = parse(key, value)?,
            "user_heads" => u.n_heads = parse(key, value)?,
            "l_max" => u.l_max = parse(key, value)?,
            "dropout" => u.dropout = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "grad_clip" => t.grad_clip = if value == "none" { None } else { Some(parse(key, value)?) },
            "objectives" => t.objectives = parse_objectives(value, &t.objectives)?,
            "temperature" => t.objectives.temperature = parse(key, value)?,
            "shuffle_rate" => t.objectives.shuffle_rate = parse(key, value)?,
            "replace_rate" => t.objectives.replace_rate = parse(key, value)?,
            "pooling" => {
                t.objectives.pooling = match value {
                    "mean" => Pooling::Mean,
                    "last" => Pooling::Last,
                    _ => return Err(CliError::Validation(format!("config key `{key}`: expected mean or last, got `{value}`"))),
                }
            }
            "weight_dap" => t.objectives.weights.dap = parse(key, value)?,
            "weight_contrastive" => t.objectives.weights.contrastive = parse(key, value)?,
            "weight_nid" => t.objectives.weights.nid = parse(key, value)?,
            "weight_rcl" => t.objectives.weights.rcl = parse(key, value)?,
            "phase" => self.phase = parse_phase(key, value)?,
            "exclude_seen" => self.exclude_seen = parse_bool(key, value)?,
            "cold_threshold" => self.cold_threshold = parse(key, value)?,
            "scorer" => self.scorer = parse(key, value)?,
            "n_users" => s.n_users = parse(key, value)?,
            "n_items" => s.n_items = parse(key, value)?,
            "target_users" => s.target_users = parse(key, value)?,
            "target_items" => s.target_items = parse(key, value)?,
            "seq_min" => s.l_min = parse(key, value)?,
            "seq_max" => s.l_max = parse(key, value)?,
            "text_len" => s.text_len = parse(key, value)?,
            "n_latent_styles" => s.n_latent_styles = parse(key, value)?,
            "transition_noise" => s.transition_noise = parse(key, value)?,
            "dominant_prob" => s.dominant_prob = parse(key, value)?,
            "zipf_exponent" => s.zipf_exponent = parse(key, value)?,
            "patch_noise" => s.patch_noise = parse(key, value)?,
            "gc_batch" => g.batch = parse(key, value)?,
            "gc_len" => g.len = parse(key, value)?,
            "gc_d" => g.d = parse(key, value)?,
            "gc_p_max" => g.p_max = parse(key, value)?,
            "gc_q" => g.q = parse(key, value)?,
            "gc_step" => g.step = parse(key, value)?,
            "gc_tol" => g.tol = parse(key, value)?,
            "gc_jitter" => g.jitter = parse(key, value)?,
            _ => return Err(CliError::Validation(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. `source` names the file in errors.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Validation(format!("{source}:{}: expected `key = value`, got `{line}`", n + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::Validation(format!("{source}:{}: {}", n + 1, e.message())))?;
        }
        Ok(())
    }

    /// `KEY=value` pairs as given on the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), CliError> {
        for pair in pairs {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                CliError::Validation(format!("override `{pair}` is not of the form key=value"))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// `MMREC_<KEY>` variables; anything else under the prefix is an error.
    pub fn apply_env(&mut self, vars: &BTreeMap<String, String>) -> Result<(), CliError> {
        let keys = Self::keys();
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            let key = rest.to_ascii_lowercase();
            if !keys.contains(&key.as_str()) {
                return Err(CliError::Validation(format!(
                    "environment variable `{name}` names unknown config key `{key}`"
                )));
            }
            self.set(&key, value)
                .map_err(|e| CliError::Validation(format!("environment variable `{name}`: {}", e.message())))?;
        }
        Ok(())
    }

    pub fn dump(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Cross-key checks plus the library's own validation.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, detail: String| Err(CliError::Validation(format!("config key `{key}`: {detail}")));
        if self.threads != 1 {
            return bad("threads", format!("{} requested, but execution is single-threaded; use 1", self.threads));
        }
        let e = &self.model.encoder;
        if e.n_heads == 0 || e.d % e.n_heads != 0 {
            return bad("n_heads", format!("{} must divide d={}", e.n_heads, e.d));
        }
        let u = &self.model.user;
        if u.n_heads == 0 || e.d % u.n_heads != 0 {
            return bad("user_heads", format!("{} must divide d={}", u.n_heads, e.d));
        }
        if u.n_blocks == 0 {
            return bad("user_blocks", "must be at least 1".into());
        }
        if u.l_max < 2 {
            return bad("l_max", "must be at least 2".into());
        }
        if !(0.0..1.0).contains(&u.dropout) {
            return bad("dropout", format!("{} outside [0, 1)", u.dropout));
        }
        if self.min_interactions < 3 {
            return bad("min_interactions", "leave-one-out splitting needs at least 3".into());
        }
        self.model
            .validate()
            .map_err(|err| CliError::Validation(format!("model config: {err}")))?;
        self.train_config().validate().map_err(CliError::from)?;
        Ok(())
    }

    /// Generator settings, checked only by commands that generate data.
    pub fn validate_synthetic(&self) -> Result<(), CliError> {
        self.synthetic_config().validate().map_err(|err| match err {
            mmrec::Error::Config { key, detail } => {
                let key = match key.as_str() {
                    "l_min" => "seq_min".to_string(),
                    "l_max" => "seq_max".to_string(),
                    _ => key,
                };
                CliError::Validation(format!("config key `{key}`: {detail}"))
            }
            other => other.into(),
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            l_max: self.model.user.l_max,
            seed: self.seed,
            trainable_top_blocks: self.model.encoder.trainable_top_blocks,
            ..self.train.clone()
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            vocab_size: self.model.encoder.vocab_size,
            q: self.model.encoder.q,
            patch_dim: self.model.encoder.patch_dim,
            seed: self.seed,
            ..self.synthetic.clone()
        }
    }

    pub fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            seed: self.seed,
            ..self.gradcheck.clone()
        }
    }

    pub fn patch_shape(&self) -> PatchShape {
        PatchShape {
            q: self.model.encoder.q,
            patch_dim: self.model.encoder.patch_dim,
        }
    }
}

/// Defaults, then the file, then the environment, then the overrides.
pub fn parse_config(
    file: Option<&Path>,
    env: &BTreeMap<String, String>,
    overrides: &[String],
) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config file {}: {e}", path.display())))?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    cfg.apply_env(env)?;
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env() -> BTreeMap<String, String> {
        BTreeMap::new()
    }

    #[test]
    fn empty_file_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        fs::write(&p, "# nothing here\n\n").unwrap();
        assert_eq!(parse_config(Some(&p), &no_env(), &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn override_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        fs::write(&p, "seed = 3\n").unwrap();
        let cfg = parse_config(Some(&p), &no_env(), &["seed=7".into()]).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train_config().seed, 7);
    }

    #[test]
    fn env_sits_between_file_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        fs::write(&p, "seed = 3\nd = 8\n").unwrap();
        let env: BTreeMap<_, _> = [("MMREC_SEED".to_string(), "5".to_string()), ("HOME".into(), "/x".into())].into();
        let cfg = parse_config(Some(&p), &env, &[]).unwrap();
        assert_eq!((cfg.seed, cfg.model.encoder.d), (5, 8));
        let cfg = parse_config(Some(&p), &env, &["seed=9".into()]).unwrap();
        assert_eq!(cfg.seed, 9);
        let env: BTreeMap<_, _> = [("MMREC_SEEDS".to_string(), "5".to_string())].into();
        let err = parse_config(Some(&p), &env, &[]).unwrap_err();
        assert!(err.message().contains("MMREC_SEEDS"));
    }

    #[test]
    fn unknown_key_is_named() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("seed = 1\nlearning_rat = 0.1\n", "run.conf").unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.message().contains("learning_rat"));
        assert!(err.message().contains("run.conf:2"));
    }

    #[test]
    fn type_mismatch_is_named() {
        let err = RunConfig::default().set("batch_size", "many").unwrap_err();
        assert!(err.message().contains("batch_size"));
        let err = RunConfig::default().set("exclude_seen", "maybe").unwrap_err();
        assert!(err.message().contains("exclude_seen"));
    }

    #[test]
    fn dump_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&[
            "learning_rate=0.0003".into(),
            "objectives=dap,vcl,rcl".into(),
            "grad_clip=5".into(),
            "trainable_top_blocks=1".into(),
            "checkpoint=some dir/pre.ckpt".into(),
            "mode=text-only".into(),
            "pooling=last".into(),
            "patch_noise=0.1".into(),
            "phase=valid".into(),
            "scorer=random".into(),
        ])
        .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.dump(), "dump").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.dump(), cfg.dump());
    }

    #[test]
    fn objective_list_rules() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("objectives", "dap,nicl,vcl").is_err());
        assert!(cfg.set("objectives", "dap,bpr").is_err());
        cfg.set("objectives", "dap").unwrap();
        assert!(cfg.train.objectives.only_dap());
        cfg.set("objectives", "").unwrap();
        assert!(cfg.validate().unwrap_err().message().contains("objectives"));
    }

    #[test]
    fn cross_key_validation() {
        let mut cfg = RunConfig::default();
        cfg.set("n_heads", "3").unwrap();
        assert!(cfg.validate().unwrap_err().message().contains("n_heads"));
        let mut cfg = RunConfig::default();
        cfg.set("threads", "4").unwrap();
        assert!(cfg.validate().unwrap_err().message().contains("threads"));
        let mut cfg = RunConfig::default();
        cfg.set("transition_noise", "1.5").unwrap();
        cfg.validate().unwrap();
        assert!(cfg.validate_synthetic().unwrap_err().message().contains("transition_noise"));
        let mut cfg = RunConfig::default();
        cfg.set("seq_min", "30").unwrap();
        assert!(cfg.validate_synthetic().unwrap_err().message().contains("seq_min"));
    }

    #[test]
    fn every_key_is_settable_from_its_dump() {
        let cfg = RunConfig::default();
        for (k, v) in cfg.entries() {
            let mut c = RunConfig::default();
            c.set(k, &v).unwrap_or_else(|e| panic!("{k}: {}", e.message()));
            assert_eq!(c, cfg, "{k}");
        }
    }
}
