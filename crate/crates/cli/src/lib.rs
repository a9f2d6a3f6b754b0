//! Operator surface for the pipeline: data generation, both training stages,
//! evaluation and mask inspection, over a key=value config file with CLI
//! overrides. Precedence: CLI flag > MQF_SEED > config file > defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use mqformer::codec::Vocabulary;
use mqformer::eval::{fingerprint, match_accuracy, rec_accuracy, EvalReport};
use mqformer::genstage::{
    expand_template_with, finetune_step, greedy_generate, init_stage2_params, lm_corpus, pretrain_lm,
    record_seed, InstructionRecord, LmPretrainConfig, LoraConfig, TinyLMConfig,
};
use mqformer::model::{build_mask, init_params, render_mask, Layout, MQFormerConfig, Objective};
use mqformer::objectives::{encode_scene, ObjectiveConfig};
use mqformer::rng::{hash_str, mix, rng_for};
use mqformer::scene::{
    detection_seed, generate_scene, read_scenes, write_scenes, AblationFlags, Encoder, Scene, SceneConfig,
};
use mqformer::templates::{templates_for, Task};
use mqformer::trainer::{
    cosine_lr, load_checkpoint, save_checkpoint, AdamState, Checkpoint, TrainConfig, TrainState, Trainer,
};

pub mod commands;

/// CLI-level failures mapped to documented exit codes: usage 1,
/// validation 2, threshold 3.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("accuracy {accuracy} below required minimum {min}")]
    Threshold { accuracy: f64, min: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Threshold { .. } => 3,
        }
    }
}

pub fn validation<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}

/// Stage-2 hyperparameters beyond the shared optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub records_per_task: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { steps: 300, batch_size: 8, peak_lr: 3e-4, records_per_task: 512 }
    }
}

/// Merged view of every stage's configuration; one instance fully determines
/// a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: MQFormerConfig,
    pub objectives: ObjectiveConfig,
    pub train: TrainConfig,
    pub lm: TinyLMConfig,
    pub lm_pretrain: LmPretrainConfig,
    pub lora: LoraConfig,
    pub ft: FinetuneConfig,
    pub flags: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: SceneConfig::default(),
            model: MQFormerConfig::default(),
            objectives: ObjectiveConfig::default(),
            train: TrainConfig::default(),
            lm: TinyLMConfig::default(),
            lm_pretrain: LmPretrainConfig::default(),
            lora: LoraConfig::default(),
            ft: FinetuneConfig::default(),
            flags: AblationFlags::NONE,
        }
    }
}

macro_rules! kv {
    ($out:expr, $key:literal, $val:expr) => {
        writeln!($out, "{} = {}", $key, $val).unwrap()
    };
}

impl RunConfig {
    /// Parses a key=value file ('#' starts a comment) over the defaults.
    pub fn from_file(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = RunConfig::default();
        config.apply_text(&text)?;
        Ok(config)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("config line {}: expected key = value", i + 1)))?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies one override. The `ablate.no_vr` pseudo-key sets both refiner
    /// flags, keeping the composition invariant.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let bad = |what: &str| CliError::Validation(format!("config key {key}: invalid {what} {value:?}"));
        macro_rules! num {
            ($t:ty) => {
                value.parse::<$t>().map_err(|_| bad(stringify!($t)))?
            };
        }
        match key {
            "scene.tags" => self.scene.tags = value.split(',').map(|s| s.trim().to_string()).collect(),
            "scene.tag_weights" => {
                self.scene.tag_weights = value
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad("weight list"))?
            }
            "scene.colors" => self.scene.colors = value.split(',').map(|s| s.trim().to_string()).collect(),
            "scene.min_objects" => self.scene.min_objects = num!(usize),
            "scene.max_objects" => self.scene.max_objects = num!(usize),
            "scene.distractor_rate" => self.scene.distractor_rate = num!(f64),
            "scene.jitter_sigma" => self.scene.jitter_sigma = num!(f64),
            "scene.duplicate_rate" => self.scene.duplicate_rate = num!(f64),
            "scene.detect_threshold" => self.scene.detect_threshold = num!(f64),
            "scene.s_g" => self.scene.s_g = num!(usize),
            "scene.d_enc" => self.scene.d_enc = num!(usize),
            "scene.d_q" => self.scene.d_q = num!(usize),
            "scene.encoder_seed" => self.scene.encoder_seed = num!(u64),
            "model.n_visual_queries" => self.model.n_visual_queries = num!(usize),
            "model.n_grounding_queries" => self.model.n_grounding_queries = num!(usize),
            "model.d_model" => self.model.d_model = num!(usize),
            "model.n_layers" => self.model.n_layers = num!(usize),
            "model.n_heads" => self.model.n_heads = num!(usize),
            "model.max_text_len" => self.model.max_text_len = num!(usize),
            "obj.msp_mask_prob" => self.objectives.msp_mask_prob = num!(f64),
            "train.peak_lr" => self.train.peak_lr = num!(f64),
            "train.warmup_ratio" => self.train.warmup_ratio = num!(f64),
            "train.total_steps" => self.train.total_steps = num!(usize),
            "train.batch_size" => self.train.batch_size = num!(usize),
            "train.weight_decay" => self.train.weight_decay = num!(f64),
            "train.beta1" => self.train.beta1 = num!(f64),
            "train.beta2" => self.train.beta2 = num!(f64),
            "train.eps" => self.train.eps = num!(f64),
            "train.seed" => self.train.seed = num!(u64),
            "train.grad_clip" => self.train.grad_clip = num!(f64),
            "train.checkpoint_every" => self.train.checkpoint_every = num!(usize),
            "lm.n_layers" => self.lm.n_layers = num!(usize),
            "lm.d_lm" => self.lm.d_lm = num!(usize),
            "lm.n_heads" => self.lm.n_heads = num!(usize),
            "lm.max_seq" => self.lm.max_seq = num!(usize),
            "lm.steps" => self.lm_pretrain.steps = num!(usize),
            "lm.batch_lines" => self.lm_pretrain.batch_lines = num!(usize),
            "lm.peak_lr" => self.lm_pretrain.peak_lr = num!(f64),
            "lora.rank" => self.lora.rank = num!(usize),
            "lora.alpha" => self.lora.alpha = num!(f64),
            "ft.steps" => self.ft.steps = num!(usize),
            "ft.batch_size" => self.ft.batch_size = num!(usize),
            "ft.peak_lr" => self.ft.peak_lr = num!(f64),
            "ft.records_per_task" => self.ft.records_per_task = num!(usize),
            "ablate.no_vit" => self.flags.no_vit = num!(bool),
            "ablate.no_odm" => self.flags.no_odm = num!(bool),
            "ablate.no_ssm" => self.flags.no_ssm = num!(bool),
            "ablate.no_vr" => {
                let on = num!(bool);
                if on {
                    self.flags.no_odm = true;
                    self.flags.no_ssm = true;
                }
            }
            _ => return Err(CliError::Validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a CLI ablation name: no-vit, no-odm, no-ssm or no-vr.
    pub fn apply_ablation(&mut self, name: &str) -> Result<(), CliError> {
        match name {
            "no-vit" => self.flags.no_vit = true,
            "no-odm" => self.flags.no_odm = true,
            "no-ssm" => self.flags.no_ssm = true,
            "no-vr" => {
                self.flags.no_odm = true;
                self.flags.no_ssm = true;
            }
            _ => return Err(CliError::Usage(format!("unknown ablation {name:?}"))),
        }
        Ok(())
    }

    /// Full resolved listing; also the checkpoint's embedded snapshot, so any
    /// result is reproducible from this text alone.
    pub fn render(&self) -> String {
        let mut s = String::new();
        kv!(s, "scene.tags", self.scene.tags.join(","));
        kv!(
            s,
            "scene.tag_weights",
            self.scene.tag_weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
        );
        kv!(s, "scene.colors", self.scene.colors.join(","));
        kv!(s, "scene.min_objects", self.scene.min_objects);
        kv!(s, "scene.max_objects", self.scene.max_objects);
        kv!(s, "scene.distractor_rate", self.scene.distractor_rate);
        kv!(s, "scene.jitter_sigma", self.scene.jitter_sigma);
        kv!(s, "scene.duplicate_rate", self.scene.duplicate_rate);
        kv!(s, "scene.detect_threshold", self.scene.detect_threshold);
        kv!(s, "scene.s_g", self.scene.s_g);
        kv!(s, "scene.d_enc", self.scene.d_enc);
        kv!(s, "scene.d_q", self.scene.d_q);
        kv!(s, "scene.encoder_seed", self.scene.encoder_seed);
        kv!(s, "model.n_visual_queries", self.model.n_visual_queries);
        kv!(s, "model.n_grounding_queries", self.model.n_grounding_queries);
        kv!(s, "model.d_model", self.model.d_model);
        kv!(s, "model.n_layers", self.model.n_layers);
        kv!(s, "model.n_heads", self.model.n_heads);
        kv!(s, "model.max_text_len", self.model.max_text_len);
        kv!(s, "obj.msp_mask_prob", self.objectives.msp_mask_prob);
        kv!(s, "train.peak_lr", self.train.peak_lr);
        kv!(s, "train.warmup_ratio", self.train.warmup_ratio);
        kv!(s, "train.total_steps", self.train.total_steps);
        kv!(s, "train.batch_size", self.train.batch_size);
        kv!(s, "train.weight_decay", self.train.weight_decay);
        kv!(s, "train.beta1", self.train.beta1);
        kv!(s, "train.beta2", self.train.beta2);
        kv!(s, "train.eps", self.train.eps);
        kv!(s, "train.seed", self.train.seed);
        kv!(s, "train.grad_clip", self.train.grad_clip);
        kv!(s, "train.checkpoint_every", self.train.checkpoint_every);
        kv!(s, "lm.n_layers", self.lm.n_layers);
        kv!(s, "lm.d_lm", self.lm.d_lm);
        kv!(s, "lm.n_heads", self.lm.n_heads);
        kv!(s, "lm.max_seq", self.lm.max_seq);
        kv!(s, "lm.steps", self.lm_pretrain.steps);
        kv!(s, "lm.batch_lines", self.lm_pretrain.batch_lines);
        kv!(s, "lm.peak_lr", self.lm_pretrain.peak_lr);
        kv!(s, "lora.rank", self.lora.rank);
        kv!(s, "lora.alpha", self.lora.alpha);
        kv!(s, "ft.steps", self.ft.steps);
        kv!(s, "ft.batch_size", self.ft.batch_size);
        kv!(s, "ft.peak_lr", self.ft.peak_lr);
        kv!(s, "ft.records_per_task", self.ft.records_per_task);
        kv!(s, "ablate.no_vit", self.flags.no_vit);
        kv!(s, "ablate.no_odm", self.flags.no_odm);
        kv!(s, "ablate.no_ssm", self.flags.no_ssm);
        s
    }

    /// Fails before any file is written.
    pub fn validate(&self) -> Result<(), CliError> {
        self.scene.validate().map_err(validation)?;
        self.train.validate().map_err(validation)?;
        if self.model.d_model % self.model.n_heads != 0 {
            return Err(CliError::Validation(format!(
                "model.d_model {} not divisible by model.n_heads {}",
                self.model.d_model, self.model.n_heads
            )));
        }
        if self.lm.d_lm % self.lm.n_heads != 0 {
            return Err(CliError::Validation(format!(
                "lm.d_lm {} not divisible by lm.n_heads {}",
                self.lm.d_lm, self.lm.n_heads
            )));
        }
        if self.model.d_enc != self.scene.d_enc || self.model.d_q != self.scene.d_q {
            return Err(CliError::Validation(
                "model feature widths are derived from the scene config and must match".into(),
            ));
        }
        if self.lora.rank == 0 || self.lora.rank >= self.lm.d_lm {
            return Err(CliError::Validation(format!(
                "lora.rank {} must be in 1..{}",
                self.lora.rank, self.lm.d_lm
            )));
        }
        Ok(())
    }

    /// Builds the vocabulary and completes the derived fields
    /// (vocab sizes, feature widths).
    pub fn finalize(&mut self) -> Vocabulary {
        let vocab = Vocabulary::build(&self.scene);
        self.model.d_enc = self.scene.d_enc;
        self.model.d_q = self.scene.d_q;
        self.model.vocab_size = vocab.len();
        self.lm.vocab_size = vocab.len();
        self.lm_pretrain.seed = mix(&[self.train.seed, 0x1337]);
        vocab
    }
}

/// Everything rebuilt from a checkpoint snapshot.
pub struct LoadedRun {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub encoder: Encoder,
    pub checkpoint: Checkpoint,
}

pub fn load_run(ckpt_path: &Path) -> Result<LoadedRun, CliError> {
    let checkpoint = load_checkpoint(ckpt_path).map_err(validation)?;
    let mut config = RunConfig::default();
    config.apply_text(&checkpoint.config_text)?;
    let vocab = config.finalize();
    let encoder = Encoder::new(&config.scene);
    Ok(LoadedRun { config, vocab, encoder, checkpoint })
}

/// Deterministic instruction dataset: `records_per_task` records per task,
/// scenes cycled in order, template and fillers drawn per record seed.
pub fn build_instruction_dataset(
    config: &RunConfig,
    scenes: &[Scene],
    tasks: &[Task],
) -> Result<Vec<InstructionRecord>, CliError> {
    let mut records = Vec::new();
    for task in tasks {
        for i in 0..config.ft.records_per_task {
            let scene = &scenes[i % scenes.len()];
            let mut rng = rng_for(&[record_seed(config.train.seed, &scene.id, i as u64), hash_str(task.name())]);
            let index = rand::Rng::gen_range(&mut rng, 0..templates_for(*task).len());
            let record =
                expand_template_with(*task, index, scene, &config.scene, &mut rng).map_err(validation)?;
            records.push(record);
        }
    }
    Ok(records)
}

pub fn instruction_dataset_lines(records: &[InstructionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        writeln!(
            out,
            "{{\"template_id\":{},\"instruction\":{},\"response\":{},\"scene_id\":{}}}",
            serde_stringify(&r.template_id),
            serde_stringify(&r.instruction),
            serde_stringify(&r.response),
            serde_stringify(&r.scene_id)
        )
        .unwrap();
    }
    out
}

fn serde_stringify(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}
