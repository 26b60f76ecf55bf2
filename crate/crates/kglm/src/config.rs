//! Flat key=value configuration with presets, strict unknown-key rejection,
//! and a canonical echo format so every output can record the exact
//! configuration that produced it.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// How relation embeddings enter GAT messages.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RelationMode {
    /// Relation embeddings treated as zero (pre-training default).
    None,
    /// Relation rows come from the relation context memory (fine-tuning).
    Context,
}

impl RelationMode {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RelationMode::None),
            "context" => Ok(RelationMode::Context),
            other => Err(Error::Config(format!(
                "relation_mode must be none or context, got {other}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RelationMode::None => "none",
            RelationMode::Context => "context",
        }
    }
}

/// Synthetic-world generation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub entities: usize,
    pub relations: usize,
    pub categories: usize,
    pub vocab_size: usize,
    pub sequences: usize,
    pub max_seq_len: usize,
    pub mean_degree: f64,
    /// Probability mass a category phrase draws from its own token pool.
    pub phrase_concentration: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            entities: 500,
            relations: 8,
            categories: 10,
            vocab_size: 400,
            sequences: 5000,
            max_seq_len: 32,
            mean_degree: 6.0,
            phrase_concentration: 0.8,
            seed: 17,
        }
    }
}

/// Every tunable of the training system. Field-by-field documentation lives
/// with the consuming modules; this struct is the single source of defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    // model dimensions
    pub embed_dim: usize,
    pub lm_layers: usize,
    pub lm_split: usize,
    pub lm_heads: usize,
    pub max_seq_len: usize,
    pub gat_layers: usize,
    pub gat_heads: usize,
    // graph sampling
    pub fanout: usize,
    pub walk_length: usize,
    pub walk_roots: usize,
    // text batching and masking
    pub text_batch: usize,
    pub token_mask_rate: f64,
    pub mention_mask_rate: f64,
    /// Corpus tail reserved for held-out masked-entity evaluation.
    pub eval_sequences: usize,
    // entity memory schedule
    pub mem_init_interval: u64,
    pub mem_interval_ratio: u64,
    pub mem_interval_repeat: u64,
    pub mem_max_interval: u64,
    pub mem_momentum: f64,
    // losses
    pub loss_category: bool,
    pub loss_relation: bool,
    pub loss_token: bool,
    pub loss_entity: bool,
    /// Total candidate-set size for masked-entity prediction (gold included).
    pub entity_candidates: usize,
    /// Cap on relation-loss triplets per step.
    pub relation_triplets: usize,
    /// Combine both phases into one optimizer step, or alternate them.
    pub alternate_phases: bool,
    // optimization
    pub lm_peak_lr: f64,
    pub km_peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    // bookkeeping
    pub seed: u64,
    pub relation_mode: RelationMode,
    pub checkpoint_interval: u64,
    // fine-tuning
    pub finetune_steps: u64,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    // nested world generation config
    pub world: WorldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embed_dim: 64,
            lm_layers: 4,
            lm_split: 2,
            lm_heads: 4,
            max_seq_len: 64,
            gat_layers: 2,
            gat_heads: 4,
            fanout: 10,
            walk_length: 2,
            walk_roots: 8,
            text_batch: 8,
            token_mask_rate: 0.15,
            mention_mask_rate: 0.15,
            eval_sequences: 200,
            mem_init_interval: 10,
            mem_interval_ratio: 2,
            mem_interval_repeat: 3,
            mem_max_interval: 500,
            mem_momentum: 0.8,
            loss_category: true,
            loss_relation: true,
            loss_token: true,
            loss_entity: true,
            entity_candidates: 64,
            relation_triplets: 64,
            alternate_phases: false,
            lm_peak_lr: 1e-3,
            km_peak_lr: 3e-3,
            warmup_steps: 50,
            total_steps: 500,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 17,
            relation_mode: RelationMode::None,
            checkpoint_interval: 100,
            finetune_steps: 200,
            finetune_lr: 3e-3,
            finetune_batch: 16,
            world: WorldConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Paper-scale preset: published appendix constants at full dimensions.
    pub fn paper_preset() -> Self {
        TrainConfig {
            embed_dim: 768,
            lm_layers: 12,
            lm_split: 6,
            lm_heads: 12,
            max_seq_len: 64,
            gat_heads: 8,
            lm_peak_lr: 1e-5,
            km_peak_lr: 1e-4,
            warmup_steps: 3000,
            total_steps: 200_000,
            ..TrainConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(TrainConfig::default()),
            "paper" => Ok(TrainConfig::paper_preset()),
            other => Err(Error::Config(format!("unknown preset {other} (desk|paper)"))),
        }
    }

    /// Applies one key=value override; unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| Error::Config(format!("{key}={value}: {e}")))
        }
        match key {
            "embed_dim" => self.embed_dim = p(key, value)?,
            "lm_layers" => self.lm_layers = p(key, value)?,
            "lm_split" => self.lm_split = p(key, value)?,
            "lm_heads" => self.lm_heads = p(key, value)?,
            "max_seq_len" => self.max_seq_len = p(key, value)?,
            "gat_layers" => self.gat_layers = p(key, value)?,
            "gat_heads" => self.gat_heads = p(key, value)?,
            "fanout" => self.fanout = p(key, value)?,
            "walk_length" => self.walk_length = p(key, value)?,
            "walk_roots" => self.walk_roots = p(key, value)?,
            "text_batch" => self.text_batch = p(key, value)?,
            "token_mask_rate" => self.token_mask_rate = p(key, value)?,
            "mention_mask_rate" => self.mention_mask_rate = p(key, value)?,
            "eval_sequences" => self.eval_sequences = p(key, value)?,
            "mem_init_interval" => self.mem_init_interval = p(key, value)?,
            "mem_interval_ratio" => self.mem_interval_ratio = p(key, value)?,
            "mem_interval_repeat" => self.mem_interval_repeat = p(key, value)?,
            "mem_max_interval" => self.mem_max_interval = p(key, value)?,
            "mem_momentum" => self.mem_momentum = p(key, value)?,
            "loss_category" => self.loss_category = p(key, value)?,
            "loss_relation" => self.loss_relation = p(key, value)?,
            "loss_token" => self.loss_token = p(key, value)?,
            "loss_entity" => self.loss_entity = p(key, value)?,
            "entity_candidates" => self.entity_candidates = p(key, value)?,
            "relation_triplets" => self.relation_triplets = p(key, value)?,
            "alternate_phases" => self.alternate_phases = p(key, value)?,
            "lm_peak_lr" => self.lm_peak_lr = p(key, value)?,
            "km_peak_lr" => self.km_peak_lr = p(key, value)?,
            "warmup_steps" => self.warmup_steps = p(key, value)?,
            "total_steps" => self.total_steps = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "adam_eps" => self.adam_eps = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "relation_mode" => self.relation_mode = RelationMode::parse(value)?,
            "checkpoint_interval" => self.checkpoint_interval = p(key, value)?,
            "finetune_steps" => self.finetune_steps = p(key, value)?,
            "finetune_lr" => self.finetune_lr = p(key, value)?,
            "finetune_batch" => self.finetune_batch = p(key, value)?,
            "world_entities" => self.world.entities = p(key, value)?,
            "world_relations" => self.world.relations = p(key, value)?,
            "world_categories" => self.world.categories = p(key, value)?,
            "world_vocab_size" => self.world.vocab_size = p(key, value)?,
            "world_sequences" => self.world.sequences = p(key, value)?,
            "world_max_seq_len" => self.world.max_seq_len = p(key, value)?,
            "world_mean_degree" => self.world.mean_degree = p(key, value)?,
            "world_phrase_concentration" => self.world.phrase_concentration = p(key, value)?,
            "world_seed" => self.world.seed = p(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// Parses a flat key=value file ('#' starts a comment) over this config.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                file: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            self.apply(key.trim(), value.trim()).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Canonical echo: every key in apply() order, one per line. Parsing the
    /// echo reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("embed_dim", self.embed_dim.to_string());
        kv("lm_layers", self.lm_layers.to_string());
        kv("lm_split", self.lm_split.to_string());
        kv("lm_heads", self.lm_heads.to_string());
        kv("max_seq_len", self.max_seq_len.to_string());
        kv("gat_layers", self.gat_layers.to_string());
        kv("gat_heads", self.gat_heads.to_string());
        kv("fanout", self.fanout.to_string());
        kv("walk_length", self.walk_length.to_string());
        kv("walk_roots", self.walk_roots.to_string());
        kv("text_batch", self.text_batch.to_string());
        kv("token_mask_rate", format!("{:?}", self.token_mask_rate));
        kv("mention_mask_rate", format!("{:?}", self.mention_mask_rate));
        kv("eval_sequences", self.eval_sequences.to_string());
        kv("mem_init_interval", self.mem_init_interval.to_string());
        kv("mem_interval_ratio", self.mem_interval_ratio.to_string());
        kv("mem_interval_repeat", self.mem_interval_repeat.to_string());
        kv("mem_max_interval", self.mem_max_interval.to_string());
        kv("mem_momentum", format!("{:?}", self.mem_momentum));
        kv("loss_category", self.loss_category.to_string());
        kv("loss_relation", self.loss_relation.to_string());
        kv("loss_token", self.loss_token.to_string());
        kv("loss_entity", self.loss_entity.to_string());
        kv("entity_candidates", self.entity_candidates.to_string());
        kv("relation_triplets", self.relation_triplets.to_string());
        kv("alternate_phases", self.alternate_phases.to_string());
        kv("lm_peak_lr", format!("{:?}", self.lm_peak_lr));
        kv("km_peak_lr", format!("{:?}", self.km_peak_lr));
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("beta1", format!("{:?}", self.beta1));
        kv("beta2", format!("{:?}", self.beta2));
        kv("adam_eps", format!("{:?}", self.adam_eps));
        kv("seed", self.seed.to_string());
        kv("relation_mode", self.relation_mode.as_str().to_string());
        kv("checkpoint_interval", self.checkpoint_interval.to_string());
        kv("finetune_steps", self.finetune_steps.to_string());
        kv("finetune_lr", format!("{:?}", self.finetune_lr));
        kv("finetune_batch", self.finetune_batch.to_string());
        kv("world_entities", self.world.entities.to_string());
        kv("world_relations", self.world.relations.to_string());
        kv("world_categories", self.world.categories.to_string());
        kv("world_vocab_size", self.world.vocab_size.to_string());
        kv("world_sequences", self.world.sequences.to_string());
        kv("world_max_seq_len", self.world.max_seq_len.to_string());
        kv("world_mean_degree", format!("{:?}", self.world.mean_degree));
        kv("world_phrase_concentration", format!("{:?}", self.world.phrase_concentration));
        kv("world_seed", self.world.seed.to_string());
        s
    }

    /// Rebuilds a config from its echo text.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad echo line {line:?}")))?;
            cfg.apply(key, value)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.embed_dim == 0 || self.lm_layers == 0 || self.gat_layers == 0 {
            return err("dimensions and layer counts must be positive".into());
        }
        if self.lm_split == 0 || self.lm_split >= self.lm_layers {
            return err(format!(
                "lm_split {} must satisfy 0 < split < layers {}",
                self.lm_split, self.lm_layers
            ));
        }
        if self.lm_heads == 0 || self.embed_dim % self.lm_heads != 0 {
            return err(format!(
                "lm_heads {} must divide embed_dim {}",
                self.lm_heads, self.embed_dim
            ));
        }
        if self.gat_heads == 0 || self.embed_dim % self.gat_heads != 0 {
            return err(format!(
                "gat_heads {} must divide embed_dim {}",
                self.gat_heads, self.embed_dim
            ));
        }
        if self.max_seq_len < 4 {
            return err("max_seq_len must be at least 4".into());
        }
        if self.fanout == 0 || self.walk_roots == 0 || self.text_batch == 0 {
            return err("sampling sizes must be positive".into());
        }
        if !(self.token_mask_rate > 0.0 && self.token_mask_rate < 1.0) {
            return err(format!("token_mask_rate {} outside (0,1)", self.token_mask_rate));
        }
        if !(0.0..1.0).contains(&self.mention_mask_rate) {
            return err(format!("mention_mask_rate {} outside [0,1)", self.mention_mask_rate));
        }
        if !(0.0..1.0).contains(&self.mem_momentum) {
            return err(format!("mem_momentum {} outside [0,1)", self.mem_momentum));
        }
        if self.mem_init_interval == 0
            || self.mem_interval_ratio == 0
            || self.mem_interval_repeat == 0
            || self.mem_max_interval == 0
        {
            return err("memory schedule constants must be positive".into());
        }
        if self.entity_candidates < 1 {
            return err("entity_candidates must be at least 1".into());
        }
        if self.lm_peak_lr <= 0.0 || self.km_peak_lr <= 0.0 || self.finetune_lr <= 0.0 {
            return err("learning rates must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return err(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        let w = &self.world;
        if w.entities == 0 || w.relations == 0 || w.categories == 0 || w.sequences == 0 {
            return err("world counts must be positive".into());
        }
        if w.max_seq_len < 8 {
            return err("world_max_seq_len must be at least 8".into());
        }
        if !(0.0..=1.0).contains(&w.phrase_concentration) {
            return err(format!(
                "world_phrase_concentration {} outside [0,1]",
                w.phrase_concentration
            ));
        }
        Ok(())
    }
}
