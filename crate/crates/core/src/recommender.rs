//! Candidate selection against a nearest-neighbor index, candidate ranking
//! through the decoder, and the combined two-phase path.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::kmeans;
use crate::context::{Entry, MixedSequence};
use crate::error::{Error, Result};
use crate::item_encoder::{EncoderInstance, ItemId};
use crate::model::{cached_rows, Catalog, ItemCache, ItemRows, Model};
use crate::tensor::kernels::softmax_in_place;
use crate::tensor::{
    read_checkpoint, write_checkpoint, CheckpointData, Dtype, Graph, ParamId, ParamStore, Tensor, Var,
};
use crate::transformer::{build_mask, shared_candidate_positions, MaskRegime};

/// Most item queries used to tune the approximate index's probe count.
pub const TUNING_QUERIES: usize = 256;

/// Ground truth plus `M` sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub items: Vec<ItemId>,
    pub ground_truth_index: usize,
}

impl CandidateSet {
    pub fn ground_truth(&self) -> ItemId {
        self.items[self.ground_truth_index]
    }
}

/// Draws `m` distinct negatives uniformly from `db` and places the ground
/// truth at a uniformly random slot.
pub fn sample_negatives<R: Rng>(db: &[ItemId], ground_truth: ItemId, m: usize, rng: &mut R) -> Result<CandidateSet> {
    let pool: Vec<ItemId> = db.iter().copied().filter(|&id| id != ground_truth).collect();
    if pool.len() == db.len() {
        return Err(Error::Data(format!("ground truth {ground_truth} not in the database")));
    }
    if pool.len() < m {
        return Err(Error::Data(format!(
            "cannot sample {m} negatives from a database of {}",
            db.len()
        )));
    }
    let mut items: Vec<ItemId> = sample(rng, pool.len(), m).into_iter().map(|i| pool[i]).collect();
    let slot = rng.random_range(0..=m);
    items.insert(slot, ground_truth);
    Ok(CandidateSet {
        items,
        ground_truth_index: slot,
    })
}

/// `P(i) = softmax(c_i · d_r)` over the rows of `cand`.
pub fn selection_scores(d_r: &[f64], cand: &Tensor) -> Result<Vec<f64>> {
    if cand.cols() != d_r.len() {
        return Err(Error::shape("selection_scores", &[d_r.len()], cand.shape()));
    }
    let mut s: Vec<f64> = (0..cand.rows())
        .map(|i| cand.row(i).iter().zip(d_r).map(|(a, b)| a * b).sum())
        .collect();
    softmax_in_place(&mut s);
    Ok(s)
}

/// Selection cross-entropy for a `1×d` state against `n×d` candidates.
pub fn selection_loss_var(g: &mut Graph, d_r: Var, cand: Var, ground_truth_index: usize) -> Result<Var> {
    let logits = g.matmul_t(d_r, cand)?;
    g.cross_entropy(logits, &[ground_truth_index])
}

/// Affine map from a candidate-slot state to one logit.
#[derive(Debug, Clone)]
pub struct RankingHead {
    w: ParamId,
    b: ParamId,
}

impl RankingHead {
    pub fn new<R: Rng>(store: &mut ParamStore, d: usize, init_std: f64, rng: &mut R) -> Result<Self> {
        Ok(RankingHead {
            w: store.add_normal("rank.w", &[d, 1], init_std, rng)?,
            b: store.add_constant("rank.b", &[1, 1], 0.0)?,
        })
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| Error::Format(format!("missing parameter {n}")))
        };
        Ok(RankingHead {
            w: get("rank.w")?,
            b: get("rank.b")?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    /// `n×d` states to a `1×n` row of logits `q`.
    pub fn forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let q = g.matmul(h, w)?;
        let q = g.add_row(q, b)?;
        g.transpose(q)
    }
}

fn check_rec_context(ctx: &MixedSequence, model: &Model) -> Result<()> {
    match ctx.entries.last() {
        Some(Entry::Word(w)) if *w == model.vocab.specials().rec => Ok(()),
        _ => Err(Error::Invalid("context must end with [REC]".into())),
    }
}

/// Ranking logits for `items` appended to `ctx` as one bidirectional block.
///
/// Every candidate shares position `len(ctx)`; embeddings come from the
/// context encoder through `cache`.
fn ranking_logits(model: &Model, ctx: &MixedSequence, items: &[ItemId], cache: &ItemCache) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::Invalid("ranking needs at least one candidate".into()));
    }
    let mut g = Graph::new(&model.store);
    let all = ctx.items().chain(items.iter().copied());
    let (ids, mat) = cached_rows(all, cache, EncoderInstance::Context)?;
    let m = mat.map(|t| g.constant(t));
    let mut entries = ctx.entries.clone();
    entries.extend(items.iter().map(|&id| Entry::Item(id)));
    let x = model.embed_entries(&mut g, &entries, &ItemRows { ids: &ids, matrix: m })?;
    let positions = shared_candidate_positions(ctx.len(), items.len());
    let mask = build_mask(MaskRegime::Ranking, ctx.len(), items.len());
    let h = model.decode(&mut g, x, &positions, &mask, None)?;
    let hc = g.slice_rows(h, ctx.len(), entries.len())?;
    let q = model.head.forward(&mut g, hc)?;
    Ok(g.value(q).data().to_vec())
}

/// `R(i) = softmax(q)_i` for candidates ranked after a `[REC]`-terminated
/// context.
pub fn ranking_scores(model: &Model, ctx: &MixedSequence, items: &[ItemId], cache: &ItemCache) -> Result<Vec<f64>> {
    check_rec_context(ctx, model)?;
    let mut q = ranking_logits(model, ctx, items, cache)?;
    softmax_in_place(&mut q);
    Ok(q)
}

/// Decoder state at the final position of a `[REC]`-terminated context.
pub fn rec_state(model: &Model, ctx: &MixedSequence, cache: &ItemCache) -> Result<Vec<f64>> {
    check_rec_context(ctx, model)?;
    let h = model.hidden_states(ctx, cache)?;
    Ok(h.row(h.rows() - 1).to_vec())
}

/// Builds `−log P(gt)` with live encoders, for training and checks.
pub fn selection_loss_graph(
    model: &Model,
    g: &mut Graph,
    ctx: &MixedSequence,
    cands: &CandidateSet,
    catalog: &Catalog,
) -> Result<Var> {
    check_rec_context(ctx, model)?;
    let (ids, rows) = live_rows(model, g, ctx.items(), catalog)?;
    let x = model.embed_entries(
        g,
        &ctx.entries,
        &ItemRows {
            ids: &ids,
            matrix: rows,
        },
    )?;
    let n = ctx.len();
    let pos: Vec<usize> = (0..n).collect();
    let h = model.decode(g, x, &pos, &build_mask(MaskRegime::Causal, n, 0), None)?;
    let d_r = g.slice_rows(h, n - 1, n)?;
    let c = model.encode_items(g, EncoderInstance::Candidate, &cands.items, catalog, None)?;
    selection_loss_var(g, d_r, c, cands.ground_truth_index)
}

/// Builds `−log R(gt)` with live encoders.
pub fn ranking_loss_graph(
    model: &Model,
    g: &mut Graph,
    ctx: &MixedSequence,
    cands: &CandidateSet,
    catalog: &Catalog,
) -> Result<Var> {
    check_rec_context(ctx, model)?;
    let all = ctx.items().chain(cands.items.iter().copied());
    let (ids, rows) = live_rows(model, g, all, catalog)?;
    let mut entries = ctx.entries.clone();
    entries.extend(cands.items.iter().map(|&id| Entry::Item(id)));
    let x = model.embed_entries(
        g,
        &entries,
        &ItemRows {
            ids: &ids,
            matrix: rows,
        },
    )?;
    let positions = shared_candidate_positions(ctx.len(), cands.items.len());
    let mask = build_mask(MaskRegime::Ranking, ctx.len(), cands.items.len());
    let h = model.decode(g, x, &positions, &mask, None)?;
    let hc = g.slice_rows(h, ctx.len(), entries.len())?;
    let q = model.head.forward(g, hc)?;
    g.cross_entropy(q, &[cands.ground_truth_index])
}

fn live_rows(
    model: &Model,
    g: &mut Graph,
    ids: impl Iterator<Item = ItemId>,
    catalog: &Catalog,
) -> Result<(Vec<ItemId>, Option<Var>)> {
    let mut uniq: Vec<ItemId> = Vec::new();
    for id in ids {
        if !uniq.contains(&id) {
            uniq.push(id);
        }
    }
    if uniq.is_empty() {
        return Ok((uniq, None));
    }
    let v = model.encode_items(g, EncoderInstance::Context, &uniq, catalog, None)?;
    Ok((uniq, Some(v)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    #[default]
    Exact,
    Approximate,
}

#[derive(Debug, Clone, PartialEq)]
struct Buckets {
    centroids: Tensor,
    lists: Vec<Vec<usize>>,
    nprobe: usize,
}

/// Candidate-encoder embeddings of the whole database with top-K
/// inner-product search.
#[derive(Debug, Clone, PartialEq)]
pub struct NNIndex {
    ids: Vec<ItemId>,
    emb: Tensor,
    mode: SearchMode,
    checksum: String,
    buckets: Option<Buckets>,
    measured_recall: Option<f64>,
}

/// Settings for the approximate mode's recall tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxOptions {
    pub target_recall: f64,
    /// Recall is required at every one of these K values (clamped to n).
    pub ks: Vec<usize>,
    pub seed: u64,
}

impl Default for ApproxOptions {
    fn default() -> Self {
        ApproxOptions {
            target_recall: 0.95,
            ks: vec![1, 10, 100],
            seed: 0,
        }
    }
}

fn by_score_then_id(a: &(f64, ItemId), b: &(f64, ItemId)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

impl NNIndex {
    pub fn exact(ids: Vec<ItemId>, emb: Tensor, checksum: String) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Data("cannot index an empty database".into()));
        }
        if emb.rows() != ids.len() {
            return Err(Error::shape("NNIndex", &[ids.len()], emb.shape()));
        }
        Ok(NNIndex {
            ids,
            emb,
            mode: SearchMode::Exact,
            checksum,
            buckets: None,
            measured_recall: None,
        })
    }

    /// Exact index plus k-means buckets; the probe count grows until the
    /// recall against exact search reaches the target at each requested K.
    /// Recall is measured with item embeddings as queries, on a seeded sample
    /// of at most `TUNING_QUERIES` items.
    pub fn approximate(ids: Vec<ItemId>, emb: Tensor, checksum: String, opts: &ApproxOptions) -> Result<Self> {
        let mut index = NNIndex::exact(ids, emb, checksum)?;
        let n = index.len();
        let n_lists = ((n as f64).sqrt().ceil() as usize).clamp(1, n);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let km = kmeans(&index.emb, n_lists, 50, &mut rng)?;
        let mut lists = vec![Vec::new(); n_lists];
        for (i, &a) in km.assignments.iter().enumerate() {
            lists[a].push(i);
        }
        let ks: Vec<usize> = opts.ks.iter().map(|&k| k.clamp(1, n)).collect();
        let probes: Vec<usize> = if n <= TUNING_QUERIES {
            (0..n).collect()
        } else {
            let mut picked = sample(&mut rng, n, TUNING_QUERIES).into_vec();
            picked.sort_unstable();
            picked
        };
        let exact: Vec<Vec<Vec<ItemId>>> = probes
            .iter()
            .map(|&i| ks.iter().map(|&k| index.exact_top(index.emb.row(i), k)).collect())
            .collect();
        index.mode = SearchMode::Approximate;
        for nprobe in 1..=n_lists {
            index.buckets = Some(Buckets {
                centroids: km.centroids.clone(),
                lists: lists.clone(),
                nprobe,
            });
            let mut worst: f64 = 1.0;
            for (j, &k) in ks.iter().enumerate() {
                let mut hit = 0;
                for (&i, truth) in probes.iter().zip(&exact) {
                    let got = index.query(index.emb.row(i), k)?;
                    hit += got.iter().filter(|id| truth[j].contains(id)).count();
                }
                worst = worst.min(hit as f64 / (probes.len() * k) as f64);
            }
            index.measured_recall = Some(worst);
            if worst >= opts.target_recall {
                break;
            }
        }
        Ok(index)
    }

    pub fn build(model: &Model, catalog: &Catalog, mode: SearchMode, approx: &ApproxOptions) -> Result<Self> {
        let emb = model.encode_database(catalog, EncoderInstance::Candidate)?;
        let ids = catalog.ids();
        let checksum = model.candidate_checksum();
        match mode {
            SearchMode::Exact => NNIndex::exact(ids, emb, checksum),
            SearchMode::Approximate => NNIndex::approximate(ids, emb, checksum, approx),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.emb
    }

    pub fn mode(&self) -> SearchMode {
        self.mode
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Recall against exact search measured while building approximate mode.
    pub fn measured_recall(&self) -> Option<f64> {
        self.measured_recall
    }

    pub fn nprobe(&self) -> Option<usize> {
        self.buckets.as_ref().map(|b| b.nprobe)
    }

    fn score(&self, row: usize, q: &[f64]) -> f64 {
        self.emb.row(row).iter().zip(q).map(|(a, b)| a * b).sum()
    }

    fn top_of(&self, rows: impl Iterator<Item = usize>, q: &[f64], k: usize) -> Vec<ItemId> {
        let mut scored: Vec<(f64, ItemId)> = rows.map(|r| (self.score(r, q), self.ids[r])).collect();
        scored.sort_by(by_score_then_id);
        scored.truncate(k);
        scored.into_iter().map(|(_, id)| id).collect()
    }

    fn exact_top(&self, q: &[f64], k: usize) -> Vec<ItemId> {
        self.top_of(0..self.len(), q, k)
    }

    /// Top `k` item ids by descending inner product, ties by ascending id.
    pub fn query(&self, q: &[f64], k: usize) -> Result<Vec<ItemId>> {
        if k > self.len() {
            return Err(Error::Invalid(format!("K={k} exceeds index size {}", self.len())));
        }
        if q.len() != self.emb.cols() {
            return Err(Error::shape("query_index", &[self.emb.cols()], &[q.len()]));
        }
        match (&self.mode, &self.buckets) {
            (SearchMode::Approximate, Some(b)) => {
                let mut order: Vec<(f64, ItemId)> = (0..b.centroids.rows())
                    .map(|c| {
                        let s = b.centroids.row(c).iter().zip(q).map(|(a, x)| a * x).sum();
                        (s, c as ItemId)
                    })
                    .collect();
                order.sort_by(by_score_then_id);
                let mut rows: Vec<usize> = Vec::new();
                for (probed, (_, c)) in order.iter().enumerate() {
                    if probed >= b.nprobe && rows.len() >= k {
                        break;
                    }
                    rows.extend(&b.lists[*c as usize]);
                }
                Ok(self.top_of(rows.into_iter(), q, k))
            }
            _ => Ok(self.exact_top(q, k)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, serde_json::Value::Null)
    }

    /// Like [`NNIndex::save`], with caller metadata stored under `run`.
    pub fn save_with(&self, path: &Path, run: serde_json::Value) -> Result<()> {
        let ids = Tensor::new(vec![self.len()], self.ids.iter().map(|&i| i as f64).collect())?;
        let mut tensors = vec![
            ("embeddings".to_string(), Dtype::F64, self.emb.clone()),
            ("item_ids".to_string(), Dtype::U64, ids),
        ];
        let mut nprobe = None;
        if let Some(b) = &self.buckets {
            let mut assign = vec![0.0; self.len()];
            for (c, l) in b.lists.iter().enumerate() {
                for &r in l {
                    assign[r] = c as f64;
                }
            }
            tensors.push(("centroids".into(), Dtype::F64, b.centroids.clone()));
            tensors.push(("assignments".into(), Dtype::U64, Tensor::new(vec![self.len()], assign)?));
            nprobe = Some(b.nprobe);
        }
        let meta = serde_json::json!({
            "n": self.len(),
            "d_model": self.emb.cols(),
            "mode": self.mode,
            "encoder_checksum": self.checksum,
            "nprobe": nprobe,
            "measured_recall": self.measured_recall,
            "run": run,
        });
        write_checkpoint(path, &CheckpointData { tensors, meta })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = read_checkpoint(path)?;
        let need = |n: &str| {
            data.get(n)
                .cloned()
                .ok_or_else(|| Error::Format(format!("index file lacks {n}")))
        };
        let emb = need("embeddings")?;
        let ids: Vec<ItemId> = need("item_ids")?.data().iter().map(|&v| v as ItemId).collect();
        let mode: SearchMode =
            serde_json::from_value(data.meta["mode"].clone()).map_err(|e| Error::Format(format!("index mode: {e}")))?;
        let checksum = data.meta["encoder_checksum"].as_str().unwrap_or_default().to_string();
        let mut index = NNIndex::exact(ids, emb, checksum)?;
        index.mode = mode;
        index.measured_recall = data.meta["measured_recall"].as_f64();
        if mode == SearchMode::Approximate {
            let centroids = need("centroids")?;
            let mut lists = vec![Vec::new(); centroids.rows()];
            for (r, &c) in need("assignments")?.data().iter().enumerate() {
                lists[c as usize].push(r);
            }
            let nprobe = data.meta["nprobe"].as_u64().unwrap_or(lists.len() as u64) as usize;
            index.buckets = Some(Buckets {
                centroids,
                lists,
                nprobe,
            });
        }
        Ok(index)
    }
}

/// Output of the two-phase path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    /// Selection-phase candidates in index order.
    pub candidates: Vec<ItemId>,
    /// Selection probabilities aligned with `candidates`.
    pub selection: Vec<f64>,
    /// `(item, R)` sorted by R descending, ties by ascending id.
    pub ranked: Vec<(ItemId, f64)>,
}

impl Recommendation {
    pub fn top(&self) -> ItemId {
        self.ranked[0].0
    }

    pub fn ranked_ids(&self) -> Vec<ItemId> {
        self.ranked.iter().map(|r| r.0).collect()
    }
}

/// Ranks `candidates` after `ctx`; input order does not matter because the
/// candidates are put in id order before the ranking pass.
pub fn rank_candidates(
    model: &Model,
    ctx: &MixedSequence,
    candidates: &[ItemId],
    cache: &ItemCache,
) -> Result<Vec<(ItemId, f64)>> {
    let mut canon = candidates.to_vec();
    canon.sort_unstable();
    let r = ranking_scores(model, ctx, &canon, cache)?;
    let mut ranked: Vec<(ItemId, f64)> = canon.into_iter().zip(r).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// Retrieves `k` candidates for `D_R` and reranks them through the decoder.
pub fn two_phase_recommend(
    model: &Model,
    ctx: &MixedSequence,
    index: &NNIndex,
    cache: &ItemCache,
    k: usize,
) -> Result<Recommendation> {
    let d_r = rec_state(model, ctx, cache)?;
    let candidates = index.query(&d_r, k.min(index.len()))?;
    let (_, rows) = cached_rows(candidates.iter().copied(), cache, EncoderInstance::Candidate)?;
    let rows = rows.ok_or_else(|| Error::Invalid("no candidates retrieved".into()))?;
    let selection = selection_scores(&d_r, &rows)?;
    let ranked = rank_candidates(model, ctx, &candidates, cache)?;
    Ok(Recommendation {
        candidates,
        selection,
        ranked,
    })
}
