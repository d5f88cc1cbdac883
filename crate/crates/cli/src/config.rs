//! Run configuration: a TOML file with one table per concern.

use std::fs;
use std::path::{Path, PathBuf};

use metarec_core::context::ContextOptions;
use metarec_core::model::hex_digest;
use metarec_core::{
    ApproxOptions, Decoding, EvalOptions, Field, FieldSet, GenerationConfig, ItePlacement, ModelConfig, SearchMode,
    SplitMode, TrainConfig, TransformerConfig,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub context: ContextOptions,
    pub metadata: MetadataSection,
    pub index: IndexSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
    pub cluster: ClusterSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            paths: Paths::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            context: ContextOptions::default(),
            metadata: MetadataSection::default(),
            index: IndexSection::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
            cluster: ClusterSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub metadata: PathBuf,
    pub corpus: PathBuf,
    /// Checkpoints, index, logs and reports all go under this directory.
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            metadata: "data/items.jsonl".into(),
            corpus: "data/dialogs.jsonl".into(),
            out_dir: "runs/default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub split: SplitMode,
    pub test_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            split: SplitMode::Dialog,
            test_frac: 0.2,
        }
    }
}

/// Flat view of the model dimensions; both stacks share `d_model` and
/// `n_heads`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub decoder_layers: usize,
    pub decoder_ff: usize,
    pub decoder_positions: usize,
    pub encoder_layers: usize,
    pub encoder_ff: usize,
    pub encoder_positions: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub tie_encoders: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d_model: m.decoder.d_model,
            n_heads: m.decoder.n_heads,
            decoder_layers: m.decoder.n_layers,
            decoder_ff: m.decoder.d_ff,
            decoder_positions: m.decoder.max_positions,
            encoder_layers: m.encoder.n_layers,
            encoder_ff: m.encoder.d_ff,
            encoder_positions: m.encoder.max_positions,
            dropout: m.decoder.dropout,
            init_std: m.init_std,
            tie_encoders: m.tie_encoders,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        let stack = |n_layers, d_ff, max_positions| TransformerConfig {
            n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff,
            max_positions,
            dropout: self.dropout,
        };
        ModelConfig {
            decoder: stack(self.decoder_layers, self.decoder_ff, self.decoder_positions),
            encoder: stack(self.encoder_layers, self.encoder_ff, self.encoder_positions),
            init_std: self.init_std,
            tie_encoders: self.tie_encoders,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetadataSection {
    /// Fields serialized into item token sequences.
    pub fields: FieldSet,
}

impl Default for MetadataSection {
    fn default() -> Self {
        MetadataSection {
            fields: FieldSet::all(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    pub mode: SearchMode,
    /// Recall the approximate index is tuned to reach against exact search.
    pub target_recall: f64,
}

impl Default for IndexSection {
    fn default() -> Self {
        IndexSection {
            mode: SearchMode::Exact,
            target_recall: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    /// Candidates retrieved per recommendation.
    pub k: usize,
    pub generate: bool,
    pub max_new_tokens: usize,
    pub decoding: Decoding,
    /// Splits to score: `train`, `test` or both.
    pub splits: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let g = GenerationConfig::default();
        EvalSection {
            ks: vec![1, 10, 50],
            k: g.k,
            generate: true,
            max_new_tokens: g.max_new_tokens,
            decoding: g.decoding,
            splits: vec!["test".into()],
        }
    }
}

/// Variant trained by `analyze ablation`; everything else is shared with
/// the base run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Metadata fields removed in the variant.
    pub drop_fields: Vec<Field>,
    pub strip_mentions: bool,
    pub placement: Option<ItePlacement>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            drop_fields: vec![Field::Genre, Field::Plot],
            strip_mentions: false,
            placement: None,
        }
    }
}

impl AblationSection {
    pub fn is_empty(&self) -> bool {
        self.drop_fields.is_empty() && !self.strip_mentions && self.placement.is_none()
    }

    /// Human-readable summary of the delta.
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if !self.drop_fields.is_empty() {
            let names: Vec<String> = self.drop_fields.iter().map(|f| f.name().to_string()).collect();
            parts.push(format!("drop fields [{}]", names.join(", ")));
        }
        if self.strip_mentions {
            parts.push("strip mentions".into());
        }
        if let Some(p) = self.placement {
            parts.push(format!("placement {p:?}").to_lowercase());
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("; ")
        }
    }

    /// The variant configuration derived from `base`.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut v = base.clone();
        v.metadata.fields = base.metadata.fields.without(&self.drop_fields);
        v.context.strip_mentions |= self.strip_mentions;
        if let Some(p) = self.placement {
            v.context.placement = p;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub ks: Vec<usize>,
    pub repeats: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection {
            ks: vec![3, 4, 5],
            repeats: 20,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let core = |e: metarec_core::Error| CliError::Config(e.to_string());
        self.model.to_model_config().validate().map_err(core)?;
        self.train.validate().map_err(core)?;
        self.generation().validate().map_err(core)?;
        if !(0.0..1.0).contains(&self.data.test_frac) {
            return Err(CliError::Config(format!(
                "data.test_frac {} outside [0, 1)",
                self.data.test_frac
            )));
        }
        if self.metadata.fields.fields().is_empty() {
            return Err(CliError::Config("metadata.fields must name at least one field".into()));
        }
        if self.context.max_len == 0 {
            return Err(CliError::Config("context.max_len must be positive".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(CliError::Config("eval.ks must be nonempty and positive".into()));
        }
        for s in &self.eval.splits {
            if s != "train" && s != "test" {
                return Err(CliError::Config(format!("unknown eval split `{s}`")));
            }
        }
        if !(self.index.target_recall > 0.0 && self.index.target_recall <= 1.0) {
            return Err(CliError::Config("index.target_recall must be in (0, 1]".into()));
        }
        if self.cluster.ks.is_empty() || self.cluster.ks.contains(&0) || self.cluster.repeats == 0 {
            return Err(CliError::Config(
                "cluster.ks and cluster.repeats must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens: self.eval.max_new_tokens,
            decoding: self.eval.decoding,
            seed: self.seed,
            k: self.eval.k,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            ks: self.eval.ks.clone(),
            k_candidates: self.eval.k,
            context: self.context,
            generation: self.generation(),
            generate: self.eval.generate,
        }
    }

    pub fn approx_options(&self) -> ApproxOptions {
        ApproxOptions {
            target_recall: self.index.target_recall,
            seed: self.seed,
            ..ApproxOptions::default()
        }
    }

    /// Digest of every setting that shapes results plus the bytes of both
    /// input files. Output locations do not take part.
    pub fn fingerprint(&self) -> Result<String, CliError> {
        let json = self.canonical().to_string();
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        for p in [&self.paths.metadata, &self.paths.corpus] {
            let bytes = fs::read(p).map_err(|e| CliError::Data(format!("cannot read {}: {e}", p.display())))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(hex_digest(h))
    }

    /// Every setting except file locations, as JSON.
    pub fn canonical(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes to JSON");
        if let Some(m) = v.as_object_mut() {
            m.remove("paths");
        }
        v
    }

    /// Digest that stays fixed when only the epoch count changes, so a run
    /// can be extended with `--resume`.
    pub fn resume_key(&self) -> String {
        let mut v = self.canonical();
        if let Some(t) = v.get_mut("train").and_then(|t| t.as_object_mut()) {
            t.remove("epochs");
        }
        let mut h = Sha256::new();
        h.update(v.to_string().as_bytes());
        hex_digest(h)
    }

    pub fn out(&self, rel: &str) -> PathBuf {
        self.paths.out_dir.join(rel)
    }
}
