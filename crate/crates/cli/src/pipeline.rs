//! Data loading, training, indexing and evaluation shared by the commands
//! and the acceptance suite.

use std::fs;
use std::path::Path;

use metarec_core::corpus::{load_dialog_corpus, load_metadata_db, split_corpus};
use metarec_core::evaluator::{cluster_purity, evaluate};
use metarec_core::item_encoder::serialize_metadata;
use metarec_core::responder::build_samples;
use metarec_core::{
    AblationReport, Catalog, ClusterReport, Dialog, EncoderInstance, EvalReport, FieldSet, ItemId, ItemMetadata, Model,
    NNIndex, Split, SplitMode, StepLog, Trainer, Vocab,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

/// Loaded corpus with its split and the vocabulary built from it.
#[derive(Debug, Clone)]
pub struct Data {
    pub db: Vec<ItemMetadata>,
    pub dialogs: Vec<Dialog>,
    pub split: Split,
    pub vocab: Vocab,
}

impl Data {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let db = load_metadata_db(&cfg.paths.metadata)?;
        let dialogs = load_dialog_corpus(&cfg.paths.corpus, &db)?;
        Data::from_parts(cfg, db, dialogs)
    }

    pub fn from_parts(cfg: &RunConfig, db: Vec<ItemMetadata>, dialogs: Vec<Dialog>) -> Result<Self, CliError> {
        let split = split_corpus(&dialogs, cfg.data.test_frac, cfg.data.split, cfg.seed)?;
        let vocab = build_vocab(&db, &split.train)?;
        Ok(Data {
            db,
            dialogs,
            split,
            vocab,
        })
    }

    pub fn catalog(&self, cfg: &RunConfig, vocab: &Vocab) -> Result<Catalog, CliError> {
        Ok(Catalog::new(self.db.clone(), vocab, cfg.metadata.fields.clone())?)
    }

    pub fn dialogs_for(&self, split: &str) -> &[Dialog] {
        match split {
            "train" => &self.split.train,
            _ => &self.split.test,
        }
    }
}

/// Vocabulary over every metadata field and the training dialogs, so that
/// field ablations share one embedding table with the base run.
pub fn build_vocab(db: &[ItemMetadata], train: &[Dialog]) -> Result<Vocab, CliError> {
    let mut words = Vec::new();
    for m in db {
        words.extend(serialize_metadata(m, &FieldSet::all())?);
    }
    for t in train.iter().flat_map(|d| &d.turns) {
        words.extend(t.text.iter().cloned());
    }
    Ok(Vocab::build(words))
}

/// Items negatives may be drawn from: everything, or for an item split only
/// the items seen in training.
pub fn negative_pool(cfg: &RunConfig, data: &Data) -> Option<Vec<ItemId>> {
    match cfg.data.split {
        SplitMode::Dialog => None,
        SplitMode::Item => Some(
            data.db
                .iter()
                .map(|m| m.id)
                .filter(|id| !data.split.heldout_items.contains(id))
                .collect(),
        ),
    }
}

pub fn run_tag(cfg: &RunConfig, fingerprint: &str) -> serde_json::Value {
    serde_json::json!({ "fingerprint": fingerprint, "seed": cfg.seed, "resume_key": cfg.resume_key() })
}

pub fn new_trainer(cfg: &RunConfig, fingerprint: &str, data: &Data) -> Result<Trainer, CliError> {
    let model = Model::new(cfg.model.to_model_config(), data.vocab.clone(), cfg.seed)?;
    let mut t = Trainer::new(model, cfg.train.clone(), cfg.seed)?;
    t.negative_pool = negative_pool(cfg, data);
    t.run = run_tag(cfg, fingerprint);
    Ok(t)
}

/// Runs the remaining epochs of `trainer`, calling `on_epoch` after each.
pub fn train_epochs<F>(cfg: &RunConfig, data: &Data, trainer: &mut Trainer, mut on_epoch: F) -> Result<(), CliError>
where
    F: FnMut(&Trainer, &[StepLog]) -> Result<(), CliError>,
{
    let catalog = data.catalog(cfg, &trainer.model.vocab)?;
    let samples = build_samples(&data.split.train, &trainer.model, &cfg.context)?;
    if samples.is_empty() {
        return Err(CliError::Data("training split has no recommender turns".into()));
    }
    while trainer.epoch < cfg.train.epochs {
        let logs = trainer.run_epoch(&samples, &catalog)?;
        on_epoch(trainer, &logs)?;
    }
    Ok(())
}

/// Fresh model trained for the configured epochs, without writing files.
pub fn train_in_memory(cfg: &RunConfig, fingerprint: &str, data: &Data) -> Result<Model, CliError> {
    let mut t = new_trainer(cfg, fingerprint, data)?;
    train_epochs(cfg, data, &mut t, |_, _| Ok(()))?;
    Ok(t.model)
}

pub fn build_index(cfg: &RunConfig, model: &Model, data: &Data) -> Result<NNIndex, CliError> {
    let catalog = data.catalog(cfg, &model.vocab)?;
    Ok(NNIndex::build(model, &catalog, cfg.index.mode, &cfg.approx_options())?)
}

pub fn evaluate_split(
    cfg: &RunConfig,
    fingerprint: &str,
    model: &Model,
    index: &NNIndex,
    data: &Data,
    split: &str,
) -> Result<EvalReport, CliError> {
    let catalog = data.catalog(cfg, &model.vocab)?;
    let cache = model.cache_items(&catalog)?;
    let dialogs = data.dialogs_for(split);
    if dialogs.is_empty() {
        return Err(CliError::Data(format!("{split} split is empty")));
    }
    Ok(evaluate(
        model,
        &catalog,
        &cache,
        index,
        dialogs,
        &cfg.eval_options(),
        fingerprint,
        cfg.seed,
    )?)
}

/// Purity of the trained candidate encoder next to the same architecture at
/// its initialization.
pub fn cluster_reports(cfg: &RunConfig, model: &Model, data: &Data) -> Result<Vec<ClusterReport>, CliError> {
    let catalog = data.catalog(cfg, &model.vocab)?;
    let (ks, repeats) = (&cfg.cluster.ks, cfg.cluster.repeats);
    let trained = cluster_purity(
        model,
        &catalog,
        EncoderInstance::Candidate,
        ks,
        repeats,
        cfg.seed,
        "trained",
    )?;
    let init = Model::new(model.cfg, model.vocab.clone(), cfg.seed)?;
    let random = cluster_purity(
        &init,
        &catalog,
        EncoderInstance::Candidate,
        ks,
        repeats,
        cfg.seed,
        "random",
    )?;
    Ok(vec![trained, random])
}

/// Trains the base configuration and its ablation variant with identical
/// seeds and scores both on the held-out split.
pub fn run_ablation(cfg: &RunConfig, data: &Data) -> Result<AblationReport, CliError> {
    let variant = cfg.ablation.apply(cfg);
    variant.validate()?;
    let fp_base = cfg.fingerprint()?;
    let fp_variant = variant.fingerprint()?;
    let arm = |c: &RunConfig, fp: &str| -> Result<EvalReport, CliError> {
        let model = train_in_memory(c, fp, data)?;
        let index = build_index(c, &model, data)?;
        evaluate_split(c, fp, &model, &index, data, "test")
    };
    let (base, var) = std::thread::scope(|s| {
        let b = s.spawn(|| arm(cfg, &fp_base));
        let v = arm(&variant, &fp_variant);
        (b.join().expect("base arm panicked"), v)
    });
    Ok(AblationReport::new(&cfg.ablation.describe(), base?, var?))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
