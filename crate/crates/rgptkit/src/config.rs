//! Run configuration: one plain-text file drives every command.
//!
//! The format is flat `section.key = value` lines with `#` comment lines,
//! chosen over a structured format so experiment configs diff cleanly.
//! Unknown keys are rejected with their line number. A parsed config can
//! be written back out as a resolved snapshot that parses to the same
//! configuration, so every run can record exactly what it ran with.
//!
//! Precedence is strictly last-write-wins: defaults, then the config
//! file, then command-line overrides.

use std::ffi::OsStr;
use std::path::{Path, PathBuf};

use crate::backbone::{BackboneKind, Resample};
use crate::datasets::AnnotationFormat;
use crate::error::{Error, Result};
use crate::features::refine::RefineVariant;
use crate::model::optim::Stage;
use crate::model::PipelineConfig;
use crate::recap::RemoteConfig;
use crate::sequence::template::TaskKind;
use crate::sequence::ClassificationMode;

/// Environment variable naming a config file to load when no path is
/// given on the command line. A command-line path wins.
pub const CONFIG_ENV: &str = "RGPTKIT_CONFIG";

/// Which captioner a recap run talks to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Mock,
    Remote,
}

impl BackendKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mock" => Some(BackendKind::Mock),
            "remote" => Some(BackendKind::Remote),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Mock => "mock",
            BackendKind::Remote => "remote",
        }
    }
}

/// Which evaluation protocol to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalProtocol {
    Classification,
    Caption,
    Rec,
    Pope,
}

impl EvalProtocol {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "classification" => Some(EvalProtocol::Classification),
            "caption" => Some(EvalProtocol::Caption),
            "rec" => Some(EvalProtocol::Rec),
            "pope" => Some(EvalProtocol::Pope),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalProtocol::Classification => "classification",
            EvalProtocol::Caption => "caption",
            EvalProtocol::Rec => "rec",
            EvalProtocol::Pope => "pope",
        }
    }
}

/// Training-run settings on top of the stage's built-in plan.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSettings {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    /// Overrides the stage plan's peak learning rate when set.
    pub lr_max: Option<f64>,
    pub log_every: usize,
    /// Conversations JSONL to train on.
    pub input: Option<PathBuf>,
    /// Checkpoint to resume from; required for finetuning.
    pub init_from: Option<PathBuf>,
    /// Directory of image files named by reference; seeded synthetic
    /// images when unset.
    pub images: Option<PathBuf>,
}

impl Default for StageSettings {
    fn default() -> Self {
        StageSettings {
            stage: Stage::Pretrain,
            steps: 300,
            batch_size: 8,
            lr_max: None,
            log_every: 10,
            input: None,
            init_from: None,
            images: None,
        }
    }
}

/// Data-preparation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub input: Option<PathBuf>,
    pub format: AnnotationFormat,
    pub tasks: Vec<TaskKind>,
    pub per_class_cap: Option<usize>,
    pub per_image_cap: Option<usize>,
    pub max_turns: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            input: None,
            format: AnnotationFormat::CocoDetection,
            tasks: vec![TaskKind::Classification],
            per_class_cap: None,
            per_image_cap: None,
            max_turns: 20,
        }
    }
}

/// Recaptioning-run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RecapSettings {
    pub backend: BackendKind,
    /// Annotation records JSONL to caption.
    pub input: Option<PathBuf>,
    pub threshold: f64,
    pub workers: usize,
    /// Keep a resume journal next to the output.
    pub journal: bool,
    /// Directory of image files named by reference; seeded synthetic
    /// images when unset.
    pub images: Option<PathBuf>,
    pub remote: RemoteConfig,
}

impl Default for RecapSettings {
    fn default() -> Self {
        RecapSettings {
            backend: BackendKind::Mock,
            input: None,
            threshold: crate::recap::DEFAULT_THRESHOLD,
            workers: 1,
            journal: true,
            images: None,
            remote: RemoteConfig::default(),
        }
    }
}

/// Evaluation-run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub protocol: EvalProtocol,
    /// Question layout for the classification protocol.
    pub mode: ClassificationMode,
    /// Also rank candidate sets by model score for mean average precision.
    pub use_scores: bool,
    /// Items JSONL for the chosen protocol.
    pub input: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Directory of image files named by reference; seeded synthetic
    /// images when unset.
    pub images: Option<PathBuf>,
    /// Answer from the items' ground truth instead of a checkpoint;
    /// exercises the full protocol plumbing without a trained model.
    pub oracle: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            protocol: EvalProtocol::Classification,
            mode: ClassificationMode::OneTurnOne,
            use_scores: false,
            input: None,
            checkpoint: None,
            images: None,
            oracle: false,
        }
    }
}

/// Everything a command needs, with one global seed feeding all
/// randomness. Setting `seed` also reseeds the pipeline components;
/// explicit `backbone.seed` / `refinement.seed` lines after it still win.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub pipeline: PipelineConfig,
    pub stage: StageSettings,
    pub data: DataSettings,
    pub recap: RecapSettings,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            pipeline: PipelineConfig::default_desk(),
            stage: StageSettings::default(),
            data: DataSettings::default(),
            recap: RecapSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

fn bad_value(key: &str, expected: &str, value: &str) -> Error {
    Error::Config(format!("{key}: expected {expected}, got '{value}'"))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| bad_value(key, "a non-negative integer", value))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| bad_value(key, "a non-negative integer", value))
}

fn parse_u32(key: &str, value: &str) -> Result<u32> {
    value
        .parse()
        .map_err(|_| bad_value(key, "a non-negative integer", value))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| bad_value(key, "a number", value))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad_value(key, "true or false", value)),
    }
}

fn parse_opt_usize(key: &str, value: &str) -> Result<Option<usize>> {
    if value.is_empty() {
        Ok(None)
    } else {
        parse_usize(key, value).map(Some)
    }
}

fn parse_opt_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

fn opt_path_text(path: &Option<PathBuf>) -> String {
    path.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl RunConfig {
    /// Applies one `key = value` assignment. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => {
                let v = parse_u64(key, value)?;
                self.seed = v;
                self.pipeline.seed = v;
                self.pipeline.backbone.seed = v;
                self.pipeline.refine.seed = v;
            }
            "out_dir" => {
                if value.is_empty() {
                    return Err(bad_value(key, "a directory path", value));
                }
                self.out_dir = PathBuf::from(value);
            }

            "backbone.kind" => {
                self.pipeline.backbone.kind = BackboneKind::parse(value)
                    .ok_or_else(|| bad_value(key, "stub or external", value))?;
            }
            "backbone.input_size" => self.pipeline.backbone.input_size = parse_usize(key, value)?,
            "backbone.patch_size" => self.pipeline.backbone.patch_size = parse_usize(key, value)?,
            "backbone.feature_dim" => self.pipeline.backbone.feature_dim = parse_usize(key, value)?,
            "backbone.seed" => self.pipeline.backbone.seed = parse_u64(key, value)?,
            "backbone.resample" => {
                self.pipeline.backbone.resample = Resample::parse(value)
                    .ok_or_else(|| bad_value(key, "bilinear or nearest", value))?;
            }
            "backbone.fill" => self.pipeline.backbone.fill = parse_f64(key, value)?,

            "refinement.variant" => {
                self.pipeline.refine.variant = RefineVariant::parse(value).ok_or_else(|| {
                    bad_value(key, "deconv, bilinear16, deconv_bilinear or none", value)
                })?;
            }
            "refinement.kernel" => self.pipeline.refine.kernel = parse_usize(key, value)?,
            "refinement.stride" => self.pipeline.refine.stride = parse_usize(key, value)?,
            "refinement.seed" => self.pipeline.refine.seed = parse_u64(key, value)?,
            "refinement.channels" => {
                self.pipeline.refine.out_channels = if value.is_empty() {
                    None
                } else {
                    Some(
                        value
                            .split(',')
                            .map(|p| parse_usize(key, p.trim()))
                            .collect::<Result<Vec<usize>>>()?,
                    )
                };
            }

            "connector.hidden" => self.pipeline.connector_hidden = parse_usize(key, value)?,
            "connector.pool_rows" => self.pipeline.pool_target.0 = parse_usize(key, value)?,
            "connector.pool_cols" => self.pipeline.pool_target.1 = parse_usize(key, value)?,

            "decoder.embed_dim" => self.pipeline.embed_dim = parse_usize(key, value)?,
            "decoder.layers" => self.pipeline.layers = parse_usize(key, value)?,
            "decoder.heads" => self.pipeline.heads = parse_usize(key, value)?,
            "decoder.max_len" => self.pipeline.max_len = parse_usize(key, value)?,
            "decoder.max_new_tokens" => self.pipeline.max_new_tokens = parse_usize(key, value)?,

            "stage.name" => self.stage.stage = Stage::parse(value)?,
            "stage.steps" => self.stage.steps = parse_usize(key, value)?,
            "stage.batch_size" => self.stage.batch_size = parse_usize(key, value)?,
            "stage.lr_max" => {
                self.stage.lr_max = if value.is_empty() {
                    None
                } else {
                    Some(parse_f64(key, value)?)
                };
            }
            "stage.log_every" => self.stage.log_every = parse_usize(key, value)?,
            "stage.input" => self.stage.input = parse_opt_path(value),
            "stage.init_from" => self.stage.init_from = parse_opt_path(value),
            "stage.images" => self.stage.images = parse_opt_path(value),

            "data.input" => self.data.input = parse_opt_path(value),
            "data.format" => {
                self.data.format = AnnotationFormat::parse(value).ok_or_else(|| {
                    bad_value(key, "coco_detection, vg_regions or refexp", value)
                })?;
            }
            "data.tasks" => {
                let tasks: Vec<TaskKind> = value
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(|p| TaskKind::parse(p).ok_or_else(|| bad_value(key, "task names", p)))
                    .collect::<Result<_>>()?;
                if tasks.is_empty() {
                    return Err(bad_value(key, "at least one task name", value));
                }
                self.data.tasks = tasks;
            }
            "data.per_class_cap" => self.data.per_class_cap = parse_opt_usize(key, value)?,
            "data.per_image_cap" => self.data.per_image_cap = parse_opt_usize(key, value)?,
            "data.max_turns" => self.data.max_turns = parse_usize(key, value)?,

            "recap.backend" => {
                self.recap.backend = BackendKind::parse(value)
                    .ok_or_else(|| bad_value(key, "mock or remote", value))?;
            }
            "recap.input" => self.recap.input = parse_opt_path(value),
            "recap.threshold" => self.recap.threshold = parse_f64(key, value)?,
            "recap.workers" => self.recap.workers = parse_usize(key, value)?,
            "recap.journal" => self.recap.journal = parse_bool(key, value)?,
            "recap.images" => self.recap.images = parse_opt_path(value),
            "recap.url" => {
                if value.is_empty() {
                    return Err(bad_value(key, "a URL", value));
                }
                self.recap.remote.url = value.to_string();
            }
            "recap.timeout_ms" => self.recap.remote.timeout_ms = parse_u64(key, value)?,
            "recap.retries" => self.recap.remote.retries = parse_u32(key, value)?,
            "recap.backoff_ms" => self.recap.remote.backoff_ms = parse_u64(key, value)?,

            "eval.protocol" => {
                self.eval.protocol = EvalProtocol::parse(value).ok_or_else(|| {
                    bad_value(key, "classification, caption, rec or pope", value)
                })?;
            }
            "eval.mode" => {
                self.eval.mode = ClassificationMode::parse(value).ok_or_else(|| {
                    bad_value(key, "one_turn_all, multi_turn_all or one_turn_one", value)
                })?;
            }
            "eval.use_scores" => self.eval.use_scores = parse_bool(key, value)?,
            "eval.input" => self.eval.input = parse_opt_path(value),
            "eval.checkpoint" => self.eval.checkpoint = parse_opt_path(value),
            "eval.images" => self.eval.images = parse_opt_path(value),
            "eval.oracle" => self.eval.oracle = parse_bool(key, value)?,

            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a config file's text. Lines are `key = value`; blank lines
    /// and lines starting with `#` are skipped. Errors name the line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{line}'", i + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Applies `key=value` override strings, e.g. from command-line flags.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for pair in pairs {
            let pair = pair.as_ref();
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                Error::Config(format!("override '{pair}' is not of the form key=value"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Defaults plus one config file.
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// The full configuration as config-file text. Parsing the snapshot
    /// reproduces this configuration exactly.
    pub fn snapshot(&self) -> String {
        let p = &self.pipeline;
        let channels = p
            .refine
            .out_channels
            .as_ref()
            .map(|cs| {
                cs.iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .unwrap_or_default();
        let lr_max = self
            .stage
            .lr_max
            .map(|v| v.to_string())
            .unwrap_or_default();
        let opt_usize =
            |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
        let tasks = self
            .data
            .tasks
            .iter()
            .map(|t| t.name())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "# resolved configuration; rerun with this file to reproduce\n\
             seed = {seed}\n\
             out_dir = {out_dir}\n\
             \n\
             backbone.kind = {bk}\n\
             backbone.input_size = {bis}\n\
             backbone.patch_size = {bps}\n\
             backbone.feature_dim = {bfd}\n\
             backbone.seed = {bseed}\n\
             backbone.resample = {brs}\n\
             backbone.fill = {bfill}\n\
             \n\
             refinement.variant = {rv}\n\
             refinement.kernel = {rk}\n\
             refinement.stride = {rs}\n\
             refinement.seed = {rseed}\n\
             refinement.channels = {rch}\n\
             \n\
             connector.hidden = {ch}\n\
             connector.pool_rows = {pr}\n\
             connector.pool_cols = {pc}\n\
             \n\
             decoder.embed_dim = {de}\n\
             decoder.layers = {dl}\n\
             decoder.heads = {dh}\n\
             decoder.max_len = {dm}\n\
             decoder.max_new_tokens = {dn}\n\
             \n\
             stage.name = {sn}\n\
             stage.steps = {ss}\n\
             stage.batch_size = {sb}\n\
             stage.lr_max = {sl}\n\
             stage.log_every = {sg}\n\
             stage.input = {si}\n\
             stage.init_from = {sf}\n\
             stage.images = {sim}\n\
             \n\
             data.input = {di}\n\
             data.format = {df}\n\
             data.tasks = {dt}\n\
             data.per_class_cap = {dcc}\n\
             data.per_image_cap = {dic}\n\
             data.max_turns = {dmt}\n\
             \n\
             recap.backend = {rb}\n\
             recap.input = {ri}\n\
             recap.threshold = {rt}\n\
             recap.workers = {rw}\n\
             recap.journal = {rj}\n\
             recap.images = {rim}\n\
             recap.url = {ru}\n\
             recap.timeout_ms = {rto}\n\
             recap.retries = {rre}\n\
             recap.backoff_ms = {rbo}\n\
             \n\
             eval.protocol = {ep}\n\
             eval.mode = {em}\n\
             eval.use_scores = {es}\n\
             eval.input = {ei}\n\
             eval.checkpoint = {ec}\n\
             eval.images = {eim}\n\
             eval.oracle = {eo}\n",
            seed = self.seed,
            out_dir = self.out_dir.display(),
            bk = p.backbone.kind.name(),
            bis = p.backbone.input_size,
            bps = p.backbone.patch_size,
            bfd = p.backbone.feature_dim,
            bseed = p.backbone.seed,
            brs = p.backbone.resample.name(),
            bfill = p.backbone.fill,
            rv = p.refine.variant.name(),
            rk = p.refine.kernel,
            rs = p.refine.stride,
            rseed = p.refine.seed,
            rch = channels,
            ch = p.connector_hidden,
            pr = p.pool_target.0,
            pc = p.pool_target.1,
            de = p.embed_dim,
            dl = p.layers,
            dh = p.heads,
            dm = p.max_len,
            dn = p.max_new_tokens,
            sn = self.stage.stage.name(),
            ss = self.stage.steps,
            sb = self.stage.batch_size,
            sl = lr_max,
            sg = self.stage.log_every,
            si = opt_path_text(&self.stage.input),
            sf = opt_path_text(&self.stage.init_from),
            sim = opt_path_text(&self.stage.images),
            di = opt_path_text(&self.data.input),
            df = self.data.format.name(),
            dt = tasks,
            dcc = opt_usize(self.data.per_class_cap),
            dic = opt_usize(self.data.per_image_cap),
            dmt = self.data.max_turns,
            rb = self.recap.backend.name(),
            ri = opt_path_text(&self.recap.input),
            rt = self.recap.threshold,
            rw = self.recap.workers,
            rj = self.recap.journal,
            rim = opt_path_text(&self.recap.images),
            ru = self.recap.remote.url,
            rto = self.recap.remote.timeout_ms,
            rre = self.recap.remote.retries,
            rbo = self.recap.remote.backoff_ms,
            ep = self.eval.protocol.name(),
            em = self.eval.mode.name(),
            es = self.eval.use_scores,
            ei = opt_path_text(&self.eval.input),
            ec = opt_path_text(&self.eval.checkpoint),
            eim = opt_path_text(&self.eval.images),
            eo = self.eval.oracle,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if self.stage.steps == 0 {
            return Err(Error::Config("stage.steps must be at least 1".into()));
        }
        if self.stage.batch_size == 0 {
            return Err(Error::Config("stage.batch_size must be at least 1".into()));
        }
        if self.stage.log_every == 0 {
            return Err(Error::Config("stage.log_every must be at least 1".into()));
        }
        if let Some(lr) = self.stage.lr_max {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("stage.lr_max must be positive, got {lr}")));
            }
        }
        if self.data.max_turns == 0 {
            return Err(Error::Config("data.max_turns must be at least 1".into()));
        }
        if self.data.per_class_cap == Some(0) || self.data.per_image_cap == Some(0) {
            return Err(Error::Config("sampling caps must be at least 1 when set".into()));
        }
        if !(-1.0..=1.0).contains(&self.recap.threshold) {
            return Err(Error::Config(format!(
                "recap.threshold must lie in [-1, 1], got {}",
                self.recap.threshold
            )));
        }
        if self.recap.workers == 0 {
            return Err(Error::Config("recap.workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Picks the config file to load: an explicit path wins, then the
/// `RGPTKIT_CONFIG` environment value, then none (pure defaults).
pub fn resolve_config_path(
    explicit: Option<PathBuf>,
    env_value: Option<&OsStr>,
) -> Option<PathBuf> {
    explicit.or_else(|| {
        env_value
            .filter(|v| !v.is_empty())
            .map(|v| PathBuf::from(v.to_os_string()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_snapshot_is_stable() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.snapshot(), cfg.snapshot());
    }

    #[test]
    fn text_applies_with_comments_and_spacing() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# an experiment\n\
             \n\
             seed = 7\n\
             backbone.input_size=48\n\
             recap.threshold   =   0.35\n\
             data.tasks = brief_caption, rec\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.pipeline.backbone.input_size, 48);
        assert_eq!(cfg.recap.threshold, 0.35);
        assert_eq!(cfg.data.tasks, vec![TaskKind::BriefCaption, TaskKind::Rec]);
    }

    #[test]
    fn unknown_keys_and_bad_lines_name_the_line() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("seed = 1\n\nbackbone.window = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("backbone.window"), "{msg}");

        let err = cfg.apply_text("seed 5\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut cfg = RunConfig::default();
        for (key, value) in [
            ("stage.steps", "many"),
            ("recap.journal", "yes"),
            ("backbone.kind", "vit"),
            ("eval.protocol", "detection"),
            ("data.tasks", "juggling"),
        ] {
            let err = cfg.set(key, value).unwrap_err();
            assert!(err.to_string().contains(key), "{key}: {err}");
        }
    }

    #[test]
    fn every_enum_token_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("backbone.kind", "external").unwrap();
        assert_eq!(cfg.pipeline.backbone.kind, BackboneKind::External);
        cfg.set("backbone.resample", "nearest").unwrap();
        cfg.set("refinement.variant", "bilinear16").unwrap();
        assert_eq!(cfg.pipeline.refine.variant, RefineVariant::Bilinear16);
        cfg.set("stage.name", "finetune").unwrap();
        assert_eq!(cfg.stage.stage, Stage::Finetune);
        cfg.set("data.format", "vg_regions").unwrap();
        cfg.set("recap.backend", "remote").unwrap();
        assert_eq!(cfg.recap.backend, BackendKind::Remote);
        cfg.set("eval.protocol", "pope").unwrap();
        cfg.set("eval.mode", "multi_turn_all").unwrap();
        assert_eq!(cfg.eval.mode, ClassificationMode::MultiTurnAll);
    }

    #[test]
    fn later_assignments_win() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("recap.threshold = 0.4\n").unwrap();
        cfg.apply_overrides(&["recap.threshold=0.1"]).unwrap();
        assert_eq!(cfg.recap.threshold, 0.1);
        assert!(cfg.apply_overrides(&["nonsense"]).is_err());
    }

    #[test]
    fn snapshot_parses_back_to_the_same_config() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "seed = 11\n\
             out_dir = runs/exp3\n\
             backbone.input_size = 48\n\
             backbone.patch_size = 16\n\
             backbone.feature_dim = 16\n\
             refinement.variant = deconv_bilinear\n\
             refinement.channels = 8,4\n\
             connector.pool_rows = 2\n\
             connector.pool_cols = 2\n\
             decoder.embed_dim = 32\n\
             decoder.heads = 2\n\
             stage.name = finetune\n\
             stage.lr_max = 0.005\n\
             stage.input = conv.jsonl\n\
             data.per_class_cap = 3\n\
             data.tasks = classification,relation\n\
             recap.backend = remote\n\
             recap.url = http://10.0.0.2:9000\n\
             eval.protocol = rec\n\
             eval.use_scores = true\n\
             eval.oracle = true\n\
             eval.images = imgs\n",
        )
        .unwrap();
        let snapshot = cfg.snapshot();
        let mut reparsed = RunConfig::default();
        reparsed.apply_text(&snapshot).unwrap();
        assert_eq!(reparsed, cfg);
        assert_eq!(reparsed.snapshot(), snapshot);
    }

    #[test]
    fn threshold_outside_similarity_range_fails_validation() {
        let mut cfg = RunConfig::default();
        cfg.set("recap.threshold", "1.1").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("recap.threshold"), "{err}");
    }

    #[test]
    fn global_seed_feeds_components_until_overridden() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("seed = 7\n").unwrap();
        assert_eq!(cfg.pipeline.seed, 7);
        assert_eq!(cfg.pipeline.backbone.seed, 7);
        assert_eq!(cfg.pipeline.refine.seed, 7);

        cfg.apply_text("seed = 7\nbackbone.seed = 9\n").unwrap();
        assert_eq!(cfg.pipeline.backbone.seed, 9);
        assert_eq!(cfg.pipeline.refine.seed, 7);
    }

    #[test]
    fn empty_values_clear_optional_fields() {
        let mut cfg = RunConfig::default();
        cfg.set("stage.lr_max", "0.005").unwrap();
        cfg.set("stage.lr_max", "").unwrap();
        assert_eq!(cfg.stage.lr_max, None);
        cfg.set("data.per_class_cap", "4").unwrap();
        assert_eq!(cfg.data.per_class_cap, Some(4));
        cfg.set("data.per_class_cap", "").unwrap();
        assert_eq!(cfg.data.per_class_cap, None);
        assert!(cfg.set("out_dir", "").is_err(), "out_dir is required");
    }

    #[test]
    fn config_path_resolution_prefers_explicit_over_env() {
        let cli = Some(PathBuf::from("a.cfg"));
        let env = OsStr::new("b.cfg");
        assert_eq!(resolve_config_path(cli.clone(), Some(env)), cli);
        assert_eq!(
            resolve_config_path(None, Some(env)),
            Some(PathBuf::from("b.cfg"))
        );
        assert_eq!(resolve_config_path(None, Some(OsStr::new(""))), None);
        assert_eq!(resolve_config_path(None, None), None);
    }

    #[test]
    fn loading_a_missing_file_reports_io() {
        assert!(matches!(
            RunConfig::load("/nonexistent/rgptkit.cfg"),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn zero_caps_rejected_at_validation() {
        let mut cfg = RunConfig::default();
        cfg.set("data.per_class_cap", "0").unwrap();
        assert!(cfg.validate().is_err());
    }
}
