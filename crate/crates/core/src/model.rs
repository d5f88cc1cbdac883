//! All trainable parameters of the recommender plus the glue that turns
//! mixed sequences into decoder inputs.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::{Entry, MixedSequence};
use crate::error::{Error, Result};
use crate::item_encoder::{
    check_unique_ids, serialize_metadata, EncoderInstance, FieldSet, ItemEmbedding, ItemEncoder, ItemId, ItemMetadata,
};
use crate::recommender::RankingHead;
use crate::tensor::{
    read_checkpoint, write_checkpoint, CheckpointData, Dtype, Graph, ParamId, ParamStore, Tensor, Var,
};
use crate::text::Vocab;
use crate::transformer::{AttentionMask, Dropout, TransformerConfig, TransformerStack};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub decoder: TransformerConfig,
    pub encoder: TransformerConfig,
    pub init_std: f64,
    /// Shares one parameter set between the context and candidate encoders.
    pub tie_encoders: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            decoder: TransformerConfig::desk_decoder(),
            encoder: TransformerConfig::desk_encoder(),
            init_std: 0.2,
            tie_encoders: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.encoder.validate()?;
        if self.encoder.d_model != self.decoder.d_model {
            return Err(Error::Config(format!(
                "encoder width {} must equal decoder width {}",
                self.encoder.d_model, self.decoder.d_model
            )));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init_std {} must be positive", self.init_std)));
        }
        Ok(())
    }
}

/// Metadata database with each item's serialized token ids.
#[derive(Debug, Clone)]
pub struct Catalog {
    items: Vec<ItemMetadata>,
    tokens: Vec<Vec<usize>>,
    index: HashMap<ItemId, usize>,
    fields: FieldSet,
}

impl Catalog {
    pub fn new(items: Vec<ItemMetadata>, vocab: &Vocab, fields: FieldSet) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Data("empty item database".into()));
        }
        check_unique_ids(&items)?;
        let tokens = items
            .iter()
            .map(|m| serialize_metadata(m, &fields).map(|t| vocab.ids(&t)))
            .collect::<Result<Vec<_>>>()?;
        let index = items.iter().enumerate().map(|(i, m)| (m.id, i)).collect();
        Ok(Catalog {
            items,
            tokens,
            index,
            fields,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[ItemMetadata] {
        &self.items
    }

    pub fn ids(&self) -> Vec<ItemId> {
        self.items.iter().map(|m| m.id).collect()
    }

    pub fn fields(&self) -> &FieldSet {
        &self.fields
    }

    pub fn position(&self, id: ItemId) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown item id {id}")))
    }

    pub fn get(&self, id: ItemId) -> Result<&ItemMetadata> {
        Ok(&self.items[self.position(id)?])
    }

    pub fn tokens(&self, id: ItemId) -> Result<&[usize]> {
        Ok(&self.tokens[self.position(id)?])
    }
}

/// Frozen per-item embeddings from both encoder instances, row-aligned with
/// the catalog order.
#[derive(Debug, Clone)]
pub struct ItemCache {
    pub ids: Vec<ItemId>,
    pub context: Tensor,
    pub candidate: Tensor,
    index: HashMap<ItemId, usize>,
}

impl ItemCache {
    pub fn row(&self, id: ItemId) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Data(format!("item {id} is not cached")))
    }

    pub fn embedding(&self, id: ItemId, instance: EncoderInstance) -> Result<ItemEmbedding> {
        let r = self.row(id)?;
        let t = match instance {
            EncoderInstance::Context => &self.context,
            EncoderInstance::Candidate => &self.candidate,
        };
        Ok(ItemEmbedding {
            item_id: id,
            vector: t.row(r).to_vec(),
            provenance: instance,
        })
    }
}

/// Source of item rows when realizing a sequence inside a graph.
pub struct ItemRows<'a> {
    pub ids: &'a [ItemId],
    /// `ids.len()×d` rows; absent when `ids` is empty.
    pub matrix: Option<Var>,
}

const ENCODE_CHUNK: usize = 64;

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub wte: ParamId,
    pub decoder: TransformerStack,
    pub ctx_enc: ItemEncoder,
    pub cand_enc: ItemEncoder,
    pub head: RankingHead,
}

impl Model {
    pub fn new(cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.decoder.d_model;
        let wte = store.add_normal("wte", &[vocab.len(), d], cfg.init_std, &mut rng)?;
        let decoder = TransformerStack::new(&mut store, "dec", cfg.decoder, cfg.init_std, &mut rng)?;
        let ctx_enc = ItemEncoder::new(
            &mut store,
            EncoderInstance::Context,
            cfg.encoder,
            cfg.init_std,
            &mut rng,
        )?;
        let cand_enc = if cfg.tie_encoders {
            ctx_enc.clone().with_instance(EncoderInstance::Candidate)
        } else {
            ItemEncoder::new(
                &mut store,
                EncoderInstance::Candidate,
                cfg.encoder,
                cfg.init_std,
                &mut rng,
            )?
        };
        let head = RankingHead::new(&mut store, d, cfg.init_std, &mut rng)?;
        Ok(Model {
            cfg,
            vocab,
            store,
            wte,
            decoder,
            ctx_enc,
            cand_enc,
            head,
        })
    }

    /// Rebinds to an existing parameter store with the standard names.
    pub fn from_store(cfg: ModelConfig, vocab: Vocab, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let wte = store
            .id("wte")
            .ok_or_else(|| Error::Format("missing parameter wte".into()))?;
        let want = [vocab.len(), cfg.decoder.d_model];
        if store.get(wte).shape() != want {
            return Err(Error::shape("wte", &want, store.get(wte).shape()));
        }
        let ctx_enc = ItemEncoder::bind(&store, EncoderInstance::Context, EncoderInstance::Context, cfg.encoder)?;
        let cand_enc = if cfg.tie_encoders {
            ctx_enc.clone().with_instance(EncoderInstance::Candidate)
        } else {
            ItemEncoder::bind(
                &store,
                EncoderInstance::Candidate,
                EncoderInstance::Candidate,
                cfg.encoder,
            )?
        };
        Ok(Model {
            decoder: TransformerStack::bind(&store, "dec", cfg.decoder)?,
            head: RankingHead::bind(&store)?,
            cfg,
            vocab,
            wte,
            ctx_enc,
            cand_enc,
            store,
        })
    }

    pub fn encoder(&self, instance: EncoderInstance) -> &ItemEncoder {
        match instance {
            EncoderInstance::Context => &self.ctx_enc,
            EncoderInstance::Candidate => &self.cand_enc,
        }
    }

    pub fn d_model(&self) -> usize {
        self.cfg.decoder.d_model
    }

    /// Encodes `ids` with one encoder instance; rows follow `ids`.
    pub fn encode_items(
        &self,
        g: &mut Graph,
        instance: EncoderInstance,
        ids: &[ItemId],
        catalog: &Catalog,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let tokens = ids
            .iter()
            .map(|&id| catalog.tokens(id).map(<[usize]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        let wte = g.param(self.wte);
        let enc = self.encoder(instance);
        let dropout = rng.map(|r| Dropout {
            rate: enc.config().dropout,
            rng: r,
        });
        enc.forward(g, wte, &tokens, dropout)
    }

    pub fn encode_item(
        &self,
        meta: &ItemMetadata,
        instance: EncoderInstance,
        fields: &FieldSet,
    ) -> Result<ItemEmbedding> {
        let tokens = self.vocab.ids(&serialize_metadata(meta, fields)?);
        let mut g = Graph::new(&self.store);
        let wte = g.param(self.wte);
        let v = self
            .encoder(instance)
            .forward::<ChaCha8Rng>(&mut g, wte, &[tokens], None)?;
        Ok(ItemEmbedding {
            item_id: meta.id,
            vector: g.value(v).data().to_vec(),
            provenance: instance,
        })
    }

    /// Embeds every catalog item, row `i` for `catalog.items()[i]`.
    pub fn encode_database(&self, catalog: &Catalog, instance: EncoderInstance) -> Result<Tensor> {
        let ids = catalog.ids();
        let d = self.d_model();
        let mut data = Vec::with_capacity(ids.len() * d);
        for chunk in ids.chunks(ENCODE_CHUNK) {
            let mut g = Graph::new(&self.store);
            let v = self.encode_items(&mut g, instance, chunk, catalog, None)?;
            data.extend_from_slice(g.value(v).data());
        }
        Tensor::new(vec![ids.len(), d], data)
    }

    pub fn cache_items(&self, catalog: &Catalog) -> Result<ItemCache> {
        let ids = catalog.ids();
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(ItemCache {
            context: self.encode_database(catalog, EncoderInstance::Context)?,
            candidate: self.encode_database(catalog, EncoderInstance::Candidate)?,
            ids,
            index,
        })
    }

    /// Embedding rows for a sequence: words from `wte`, items from `items`.
    pub fn embed_entries(&self, g: &mut Graph, entries: &[Entry], items: &ItemRows<'_>) -> Result<Var> {
        let v = self.vocab.len();
        let pos: HashMap<ItemId, usize> = items.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut idx = Vec::with_capacity(entries.len());
        for e in entries {
            idx.push(match *e {
                Entry::Word(w) => w,
                Entry::Item(id) => {
                    v + *pos
                        .get(&id)
                        .ok_or_else(|| Error::Data(format!("no embedding supplied for item {id}")))?
                }
            });
        }
        let wte = g.param(self.wte);
        let table = match items.matrix {
            Some(m) => g.concat_rows(&[wte, m])?,
            None => wte,
        };
        g.gather_rows(table, &idx)
    }

    /// Runs the decoder over prepared input rows.
    pub fn decode(
        &self,
        g: &mut Graph,
        x: Var,
        positions: &[usize],
        mask: &AttentionMask,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let dropout = rng.map(|r| Dropout {
            rate: self.cfg.decoder.dropout,
            rng: r,
        });
        self.decoder.forward(g, x, positions, mask, dropout)
    }

    /// Tied output layer: `h · wteᵀ`.
    pub fn lm_logits(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let wte = g.param(self.wte);
        g.matmul_t(h, wte)
    }

    /// Causal decoder states of a sequence whose item entries come from the
    /// frozen context-encoder cache.
    pub fn hidden_states(&self, seq: &MixedSequence, cache: &ItemCache) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let h = self.hidden_in_graph(&mut g, seq, cache)?;
        Ok(g.value(h).clone())
    }

    pub(crate) fn hidden_in_graph(&self, g: &mut Graph, seq: &MixedSequence, cache: &ItemCache) -> Result<Var> {
        let (ids, mat) = cached_rows(seq.items(), cache, EncoderInstance::Context)?;
        let m = mat.map(|t| g.constant(t));
        let x = self.embed_entries(g, &seq.entries, &ItemRows { ids: &ids, matrix: m })?;
        let n = seq.len();
        let positions: Vec<usize> = (0..n).collect();
        self.decode(g, x, &positions, &AttentionMask::causal(n), None)
    }

    /// Digest of everything that determines candidate-encoder outputs.
    pub fn candidate_checksum(&self) -> String {
        let mut ids = self.cand_enc.param_ids();
        ids.push(self.wte);
        ids.sort();
        let mut h = Sha256::new();
        for id in ids {
            h.update(self.store.name(id).as_bytes());
            for v in self.store.get(id).data() {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(h)
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<CheckpointData> {
        let meta = serde_json::json!({
            "model": self.cfg,
            "vocab": self.vocab,
            "extra": extra,
        });
        Ok(CheckpointData {
            tensors: self
                .store
                .iter()
                .map(|(_, n, t)| (n.to_string(), Dtype::F32, t.clone()))
                .collect(),
            meta,
        })
    }

    pub fn from_checkpoint(data: &CheckpointData) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(data.meta["model"].clone())
            .map_err(|e| Error::Format(format!("checkpoint model config: {e}")))?;
        let vocab: Vocab = serde_json::from_value(data.meta["vocab"].clone())
            .map_err(|e| Error::Format(format!("checkpoint vocabulary: {e}")))?;
        let mut store = ParamStore::new();
        for (name, _, t) in &data.tensors {
            if !name.starts_with("opt.") {
                store.add(name.clone(), t.clone())?;
            }
        }
        Model::from_store(cfg, vocab, store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint(serde_json::Value::Null)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_checkpoint(&read_checkpoint(path)?)
    }
}

/// Lowercase hex of a finished SHA-256 digest.
pub fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Unique item ids of `ids` (first-seen order) with their cached rows.
pub fn cached_rows(
    ids: impl Iterator<Item = ItemId>,
    cache: &ItemCache,
    instance: EncoderInstance,
) -> Result<(Vec<ItemId>, Option<Tensor>)> {
    let mut uniq: Vec<ItemId> = Vec::new();
    for id in ids {
        if !uniq.contains(&id) {
            uniq.push(id);
        }
    }
    let src = match instance {
        EncoderInstance::Context => &cache.context,
        EncoderInstance::Candidate => &cache.candidate,
    };
    let d = src.cols();
    let mut data = Vec::with_capacity(uniq.len() * d);
    for &id in &uniq {
        data.extend_from_slice(src.row(cache.row(id)?));
    }
    if uniq.is_empty() {
        return Ok((uniq, None));
    }
    let t = Tensor::new(vec![uniq.len(), d], data)?;
    Ok((uniq, Some(t)))
}
