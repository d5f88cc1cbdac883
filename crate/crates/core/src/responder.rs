//! Response modeling: training samples, the joint objective, perplexity and
//! the generation loop that recommends on `[REC]` and fills placeholders.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{
    build_context, substitute_placeholders, ContextOptions, Dialog, Entry, MixedSequence, Speaker, Turn,
};
use crate::error::{Error, Result};
use crate::item_encoder::{EncoderInstance, ItemId};
use crate::model::{Catalog, ItemCache, ItemRows, Model};
use crate::recommender::{sample_negatives, selection_loss_var, two_phase_recommend, CandidateSet, NNIndex};
use crate::tensor::kernels::{dot, log_sum_exp};
use crate::tensor::{Graph, Var};
use crate::text::{detokenize, tokenize, EOS, PAD, PH, RECOMMENDER, SEEKER, SEP, UNK};
use crate::transformer::AttentionMask;

/// Weights `a`, `b`, `c` of the selection, ranking and language terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointLossWeights {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for JointLossWeights {
    fn default() -> Self {
        JointLossWeights { a: 0.3, b: 1.0, c: 0.5 }
    }
}

impl JointLossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.a, self.b, self.c];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(Error::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

/// One target recommender turn with the context before it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Context followed by the target turn.
    pub entries: Vec<Entry>,
    /// Next-token target for each row of `entries`.
    pub targets: Vec<Option<usize>>,
    /// Row of the `[REC]` token and the items recommended there.
    pub rec: Option<(usize, Vec<ItemId>)>,
}

impl Sample {
    pub fn n_targets(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

/// Encoding of a recommender turn as a generation target: speaker token,
/// `[REC]` plus the recommended items' embeddings when it recommends, then
/// the placeholder-substituted words.
pub fn target_entries(turn: &Turn, model: &Model) -> Result<Vec<Entry>> {
    if turn.speaker != Speaker::Recommender {
        return Err(Error::Invalid("only recommender turns are generation targets".into()));
    }
    let sp = model.vocab.specials();
    let (words, _) = substitute_placeholders(turn)?;
    let mut out = vec![Entry::Word(sp.recommender)];
    if turn.is_rec_turn() {
        out.push(Entry::Word(sp.rec));
        out.extend(turn.rec_ids.iter().map(|&id| Entry::Item(id)));
    }
    out.extend(words.iter().map(|w| Entry::Word(model.vocab.id(w))));
    Ok(out)
}

/// Builds the training sample whose target is `dialog.turns[turn]`.
pub fn build_sample(dialog: &Dialog, turn: usize, model: &Model, opts: &ContextOptions) -> Result<Sample> {
    let t = dialog
        .turns
        .get(turn)
        .ok_or_else(|| Error::Invalid(format!("dialog {} has no turn {turn}", dialog.dialog_id)))?;
    let target = target_entries(t, model)?;
    let limit = model.cfg.decoder.max_positions;
    if target.len() >= limit {
        return Err(Error::SequenceTooLong {
            len: target.len(),
            limit,
        });
    }
    let ctx_opts = ContextOptions {
        max_len: opts.max_len.min(limit - target.len()),
        ..*opts
    };
    let ctx = build_context(&dialog.turns[..turn], &model.vocab, &ctx_opts)?;
    let start = ctx.len();
    let mut entries = ctx.entries;
    entries.extend(target);
    let eos = model.vocab.specials().eos;
    let mut targets = vec![None; entries.len()];
    for (i, slot) in targets.iter_mut().enumerate().skip(start) {
        *slot = match entries.get(i + 1) {
            None => Some(eos),
            Some(Entry::Word(w)) => Some(*w),
            Some(Entry::Item(_)) => None,
        };
    }
    let rec = t.is_rec_turn().then(|| (start + 1, t.rec_ids.clone()));
    Ok(Sample { entries, targets, rec })
}

/// Samples for every recommender turn of every dialog.
pub fn build_samples(dialogs: &[Dialog], model: &Model, opts: &ContextOptions) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for d in dialogs {
        for (i, t) in d.turns.iter().enumerate() {
            if t.speaker == Speaker::Recommender {
                out.push(build_sample(d, i, model, opts)?);
            }
        }
    }
    Ok(out)
}

/// Candidate sets for the recommendation of a sample, one per recommended
/// item.
pub fn draw_candidates<R: rand::Rng>(
    sample: &Sample,
    catalog_ids: &[ItemId],
    m: usize,
    rng: &mut R,
) -> Result<Vec<CandidateSet>> {
    match &sample.rec {
        None => Ok(Vec::new()),
        Some((_, gts)) => gts
            .iter()
            .map(|&gt| sample_negatives(catalog_ids, gt, m, rng))
            .collect(),
    }
}

/// Loss terms of one sample, each a scalar on the graph.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub select: Option<Var>,
    pub rank: Option<Var>,
    pub lm: Var,
}

/// Builds every loss term of a sample in one decoder pass.
///
/// The candidate blocks of `cands` are appended after the sequence; they
/// see the context through `[REC]` and their own block, and share the
/// position after `[REC]`.
pub fn sample_terms(
    model: &Model,
    g: &mut Graph,
    sample: &Sample,
    cands: &[CandidateSet],
    catalog: &Catalog,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<LossTerms> {
    if sample.n_targets() == 0 {
        return Err(Error::Invalid("sample has no language-model targets".into()));
    }
    if !cands.is_empty() && sample.rec.is_none() {
        return Err(Error::Invalid(
            "candidates supplied for a turn without a recommendation".into(),
        ));
    }
    let mut uniq: Vec<ItemId> = Vec::new();
    let block_items = cands.iter().flat_map(|c| c.items.iter().copied());
    for id in sample
        .entries
        .iter()
        .filter_map(|e| match e {
            Entry::Item(id) => Some(*id),
            Entry::Word(_) => None,
        })
        .chain(block_items)
    {
        if !uniq.contains(&id) {
            uniq.push(id);
        }
    }
    let rows = if uniq.is_empty() {
        None
    } else {
        Some(model.encode_items(g, EncoderInstance::Context, &uniq, catalog, rng.as_deref_mut())?)
    };
    let n = sample.entries.len();
    let mut entries = sample.entries.clone();
    let blocks: Vec<usize> = cands.iter().map(|c| c.items.len()).collect();
    for c in cands {
        entries.extend(c.items.iter().map(|&id| Entry::Item(id)));
    }
    let x = model.embed_entries(
        g,
        &entries,
        &ItemRows {
            ids: &uniq,
            matrix: rows,
        },
    )?;
    let mut positions: Vec<usize> = (0..n).collect();
    let (mask, rec_row) = match &sample.rec {
        Some((r, _)) if !cands.is_empty() => {
            positions.extend(std::iter::repeat_n(r + 1, entries.len() - n));
            (AttentionMask::with_candidate_blocks(n, r + 1, &blocks), Some(*r))
        }
        _ => (AttentionMask::causal(n), None),
    };
    let h = model.decode(g, x, &positions, &mask, rng.as_deref_mut())?;

    let (rows_idx, tgt): (Vec<usize>, Vec<usize>) = sample
        .targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| (i, t)))
        .unzip();
    let ht = g.gather_rows(h, &rows_idx)?;
    let logits = model.lm_logits(g, ht)?;
    let lm = g.cross_entropy(logits, &tgt)?;

    let (mut select, mut rank) = (None, None);
    if let Some(r) = rec_row {
        let d_r = g.slice_rows(h, r, r + 1)?;
        let mut sel = Vec::with_capacity(cands.len());
        let mut rnk = Vec::with_capacity(cands.len());
        let mut start = n;
        for c in cands {
            let ce = model.encode_items(g, EncoderInstance::Candidate, &c.items, catalog, rng.as_deref_mut())?;
            sel.push(selection_loss_var(g, d_r, ce, c.ground_truth_index)?);
            let hc = g.slice_rows(h, start, start + c.items.len())?;
            let q = model.head.forward(g, hc)?;
            rnk.push(g.cross_entropy(q, &[c.ground_truth_index])?);
            start += c.items.len();
        }
        select = Some(mean_of(g, &sel)?);
        rank = Some(mean_of(g, &rnk)?);
    }
    Ok(LossTerms { select, rank, lm })
}

fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(g.scale(acc, 1.0 / xs.len() as f64))
}

/// Scalar values of a sample's terms next to the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub select: Option<f64>,
    pub rank: Option<f64>,
    pub lm: f64,
    pub total: f64,
}

/// `a·select + b·rank + c·lm`; turns without a recommendation contribute the
/// language term only.
pub fn joint_loss(
    model: &Model,
    g: &mut Graph,
    sample: &Sample,
    cands: &[CandidateSet],
    catalog: &Catalog,
    w: &JointLossWeights,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, LossValues)> {
    let terms = sample_terms(model, g, sample, cands, catalog, rng)?;
    let mut total = g.scale(terms.lm, w.c);
    for (t, wt) in [(terms.select, w.a), (terms.rank, w.b)] {
        if let Some(t) = t {
            let s = g.scale(t, wt);
            total = g.add(total, s)?;
        }
    }
    let values = LossValues {
        select: terms.select.map(|v| g.value(v).item()),
        rank: terms.rank.map(|v| g.value(v).item()),
        lm: g.value(terms.lm).item(),
        total: g.value(total).item(),
    };
    Ok((total, values))
}

/// Mean next-token NLL of `target` after `ctx`, under teacher forcing.
///
/// Item entries of `ctx` come from the frozen context-encoder cache; the
/// last target token predicts end-of-sentence.
pub fn lm_loss(model: &Model, ctx: &MixedSequence, target: &[usize], cache: &ItemCache) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::Invalid("empty target utterance".into()));
    }
    let mut seq = ctx.clone();
    for &w in target {
        seq.push_word(w);
    }
    let h = model.hidden_states(&seq, cache)?;
    let eos = model.vocab.specials().eos;
    let start = ctx
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::Invalid("empty context".into()))?;
    let mut nll = 0.0;
    for (k, i) in (start..seq.len()).enumerate() {
        let next = target.get(k).copied().unwrap_or(eos);
        nll += token_nll(model, h.row(i), next);
    }
    Ok(nll / (target.len() + 1) as f64)
}

fn vocab_logits(model: &Model, h: &[f64]) -> Vec<f64> {
    let wte = model.store.get(model.wte);
    (0..wte.rows()).map(|r| dot(h, wte.row(r))).collect()
}

fn token_nll(model: &Model, h: &[f64], target: usize) -> f64 {
    let logits = vocab_logits(model, h);
    log_sum_exp(&logits) - logits[target]
}

/// `exp` of the mean per-token NLL over every recommender turn of
/// `dialogs`, with the same targets as training.
pub fn perplexity(model: &Model, dialogs: &[Dialog], catalog: &Catalog, opts: &ContextOptions) -> Result<f64> {
    let samples = build_samples(dialogs, model, opts)?;
    let mut nll = 0.0;
    let mut count = 0usize;
    for s in &samples {
        let mut g = Graph::new(&model.store);
        let terms = sample_terms(model, &mut g, s, &[], catalog, None)?;
        let k = s.n_targets();
        nll += g.value(terms.lm).item() * k as f64;
        count += k;
    }
    if count == 0 {
        return Err(Error::Data("no recommender utterances to score".into()));
    }
    let ppl = (nll / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::Numerical("perplexity overflowed".into()));
    }
    Ok(ppl)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decoding {
    #[default]
    Greedy,
    Temperature {
        temperature: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub decoding: Decoding,
    pub seed: u64,
    /// Candidates retrieved per recommendation.
    pub k: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_new_tokens: 32,
            decoding: Decoding::Greedy,
            seed: 0,
            k: 20,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if let Decoding::Temperature { temperature } = self.decoding {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config(format!("temperature {temperature} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub item_id: ItemId,
    pub selection: f64,
    pub ranking: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecEvent {
    /// Index of the `[REC]` token among the emitted tokens.
    pub position: usize,
    pub candidates: Vec<ScoredCandidate>,
    pub chosen: ItemId,
    /// Encoder that produced the embedding appended after `[REC]`.
    pub appended_from: EncoderInstance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    /// Index of the `[PH]` token among the emitted tokens.
    pub position: usize,
    pub item_id: Option<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub emitted: Vec<String>,
    pub rec_positions: Vec<usize>,
    pub events: Vec<RecEvent>,
    pub substitutions: Vec<Substitution>,
    /// Positions of placeholders left without an item.
    pub unfilled: Vec<usize>,
    pub stopped_at_eos: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub text: String,
    pub tokens: Vec<String>,
    pub recommended: Vec<ItemId>,
    pub trace: GenerationTrace,
}

/// Written in place of a placeholder that has no recommendation to fill it.
pub const UNFILLED_MARKER: &str = "<no-item>";

/// Generates the recommender's next turn after `prefix`.
pub fn generate_response(
    model: &Model,
    catalog: &Catalog,
    cache: &ItemCache,
    index: &NNIndex,
    prefix: &[Turn],
    opts: &ContextOptions,
    cfg: &GenerationConfig,
) -> Result<Response> {
    cfg.validate()?;
    let vocab = &model.vocab;
    let sp = vocab.specials();
    let limit = model.cfg.decoder.max_positions;
    let reserve = cfg.max_new_tokens.min(limit / 4);
    let budget = limit.saturating_sub(reserve + 2).max(1);
    let ctx_opts = ContextOptions {
        max_len: opts.max_len.min(budget),
        ..*opts
    };
    let mut ctx = build_context(prefix, vocab, &ctx_opts)?;
    ctx.push_word(sp.recommender);
    let banned: Vec<usize> = [PAD, UNK, SEP, SEEKER, RECOMMENDER]
        .iter()
        .map(|t| vocab.id(t))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = GenerationTrace {
        emitted: Vec::new(),
        rec_positions: Vec::new(),
        events: Vec::new(),
        substitutions: Vec::new(),
        unfilled: Vec::new(),
        stopped_at_eos: false,
    };
    let mut recommended = Vec::new();
    while trace.emitted.len() < cfg.max_new_tokens && ctx.len() + 1 < limit {
        let h = model.hidden_states(&ctx, cache)?;
        let mut logits = vocab_logits(model, h.row(h.rows() - 1));
        if !logits.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical("non-finite logits during generation".into()));
        }
        for &b in &banned {
            logits[b] = f64::NEG_INFINITY;
        }
        let tok = pick(&logits, cfg.decoding, &mut rng)?;
        if tok == sp.eos {
            trace.stopped_at_eos = true;
            break;
        }
        ctx.push_word(tok);
        trace.emitted.push(vocab.token(tok).to_string());
        if tok == sp.rec {
            let rec = two_phase_recommend(model, &ctx, index, cache, cfg.k)?;
            let chosen = rec.top();
            let ranking: std::collections::HashMap<ItemId, f64> = rec.ranked.iter().copied().collect();
            trace.rec_positions.push(trace.emitted.len() - 1);
            trace.events.push(RecEvent {
                position: trace.emitted.len() - 1,
                candidates: rec
                    .candidates
                    .iter()
                    .zip(&rec.selection)
                    .map(|(&id, &p)| ScoredCandidate {
                        item_id: id,
                        selection: p,
                        ranking: ranking[&id],
                    })
                    .collect(),
                chosen,
                appended_from: EncoderInstance::Context,
            });
            recommended.push(chosen);
            ctx.push_item(chosen);
        }
    }
    let mut pending = recommended.iter();
    let mut tokens = Vec::new();
    for (i, t) in trace.emitted.iter().enumerate() {
        match t.as_str() {
            x if x == crate::text::REC => {}
            x if x == PH => {
                let id = pending.next().copied();
                trace.substitutions.push(Substitution {
                    position: i,
                    item_id: id,
                });
                match id {
                    Some(id) => tokens.extend(tokenize(&catalog.get(id)?.title)),
                    None => {
                        trace.unfilled.push(i);
                        tokens.push(UNFILLED_MARKER.to_string());
                    }
                }
            }
            x => tokens.push(x.to_string()),
        }
    }
    if !trace.unfilled.is_empty() {
        log::warn!(
            "{} placeholder(s) emitted without a recommendation",
            trace.unfilled.len()
        );
    }
    debug_assert!(tokens.iter().all(|t| t != EOS));
    Ok(Response {
        text: detokenize(&tokens),
        tokens,
        recommended,
        trace,
    })
}

fn pick(logits: &[f64], mode: Decoding, rng: &mut ChaCha8Rng) -> Result<usize> {
    match mode {
        Decoding::Greedy => {
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        Decoding::Temperature { temperature } => {
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            let lse = log_sum_exp(&scaled);
            let p: Vec<f64> = scaled.iter().map(|s| (s - lse).exp()).collect();
            let dist = WeightedIndex::new(&p).map_err(|e| Error::Numerical(e.to_string()))?;
            Ok(dist.sample(rng))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::append_rec_token;
    use crate::recommender::tests::toy;
    use crate::recommender::SearchMode;
    use crate::tensor::gradcheck::{check_gradients, GradCheckOptions};
    use crate::tensor::{AdamW, AdamWConfig, LrSchedule, Tensor};

    fn dialog(catalog: &Catalog) -> Dialog {
        let t = catalog.get(102).unwrap().title.clone();
        let n = tokenize(&t).len();
        let mut text = tokenize("i want a film with");
        text.push("key0".into());
        let mut rec_text = tokenize("please");
        let start = rec_text.len();
        rec_text.extend(tokenize(&t));
        let mut rec = Turn::new(Speaker::Recommender, rec_text);
        rec.mentions.push(crate::context::Mention {
            start,
            end: start + n,
            item_id: 102,
        });
        rec.rec_ids = vec![102];
        Dialog {
            dialog_id: "d".into(),
            turns: vec![
                Turn::new(Speaker::Seeker, text),
                rec,
                Turn::new(Speaker::Seeker, tokenize("i want")),
                Turn::new(Speaker::Recommender, tokenize("a film please")),
            ],
        }
    }

    #[test]
    fn target_layout_of_recommendation_turn() {
        let (model, catalog) = toy();
        let d = dialog(&catalog);
        let s = build_sample(&d, 1, &model, &ContextOptions::default()).unwrap();
        let sp = model.vocab.specials();
        let v = &model.vocab;
        let (r, gts) = s.rec.clone().unwrap();
        assert_eq!(gts, [102]);
        assert_eq!(s.entries[r], Entry::Word(sp.rec));
        assert_eq!(s.entries[r - 1], Entry::Word(sp.recommender));
        assert_eq!(s.entries[r + 1], Entry::Item(102));
        // <rec> → [REC]; [REC] has no target; ITE → "please"; "please" → [PH]; [PH] → EOS
        assert_eq!(
            &s.targets[r - 1..],
            &[Some(sp.rec), None, Some(v.id("please")), Some(sp.ph), Some(sp.eos)]
        );
        assert!(s.targets[..r - 1].iter().all(Option::is_none));
        let s2 = build_sample(&d, 3, &model, &ContextOptions::default()).unwrap();
        assert!(s2.rec.is_none());
        assert_eq!(s2.n_targets(), 4);
        assert!(build_sample(&d, 0, &model, &ContextOptions::default()).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(JointLossWeights::default().validate().is_ok());
        assert!(JointLossWeights { a: 0.0, b: 0.0, c: 0.0 }.validate().is_err());
        assert!(JointLossWeights {
            a: -1.0,
            b: 0.0,
            c: 1.0
        }
        .validate()
        .is_err());
        assert!(GenerationConfig {
            max_new_tokens: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let t = GenerationConfig {
            decoding: Decoding::Temperature { temperature: 0.0 },
            ..Default::default()
        };
        assert!(t.validate().is_err());
    }

    fn cands() -> Vec<CandidateSet> {
        vec![CandidateSet {
            items: vec![104, 102, 100],
            ground_truth_index: 1,
        }]
    }

    fn loss_and_grads(
        model: &Model,
        catalog: &Catalog,
        s: &Sample,
        w: JointLossWeights,
    ) -> (f64, crate::tensor::Gradients) {
        let mut g = Graph::new(&model.store);
        let (l, v) = joint_loss(model, &mut g, s, &cands(), catalog, &w, None).unwrap();
        (v.total, g.backward(l).unwrap())
    }

    #[test]
    fn joint_loss_is_linear_in_weights() {
        let (model, catalog) = toy();
        let s = build_sample(&dialog(&catalog), 1, &model, &ContextOptions::default()).unwrap();
        let w = JointLossWeights::default();
        let (total, g_all) = loss_and_grads(&model, &catalog, &s, w);
        let basis = [
            JointLossWeights { a: 1.0, b: 0.0, c: 0.0 },
            JointLossWeights { a: 0.0, b: 1.0, c: 0.0 },
            JointLossWeights { a: 0.0, b: 0.0, c: 1.0 },
        ];
        let parts: Vec<_> = basis.iter().map(|b| loss_and_grads(&model, &catalog, &s, *b)).collect();
        let combined = w.a * parts[0].0 + w.b * parts[1].0 + w.c * parts[2].0;
        assert!((total - combined).abs() < 1e-9);
        for id in model.store.ids() {
            let got = g_all.get(id).data();
            for (j, x) in got.iter().enumerate() {
                let want = w.a * parts[0].1.get(id).data()[j]
                    + w.b * parts[1].1.get(id).data()[j]
                    + w.c * parts[2].1.get(id).data()[j];
                assert!((x - want).abs() < 1e-9, "{}", model.store.name(id));
            }
        }
    }

    #[test]
    fn fused_terms_match_standalone_losses() {
        let (model, catalog) = toy();
        let d = dialog(&catalog);
        let s = build_sample(&d, 1, &model, &ContextOptions::default()).unwrap();
        let mut g = Graph::new(&model.store);
        let t = sample_terms(&model, &mut g, &s, &cands(), &catalog, None).unwrap();
        let (sel, rank) = (g.value(t.select.unwrap()).item(), g.value(t.rank.unwrap()).item());
        let r = s.rec.as_ref().unwrap().0;
        let ctx = MixedSequence {
            entries: s.entries[..=r].to_vec(),
        };
        let mut g2 = Graph::new(&model.store);
        let want_sel = crate::recommender::selection_loss_graph(&model, &mut g2, &ctx, &cands()[0], &catalog).unwrap();
        let want_rank = crate::recommender::ranking_loss_graph(&model, &mut g2, &ctx, &cands()[0], &catalog).unwrap();
        assert!((sel - g2.value(want_sel).item()).abs() < 1e-12);
        assert!((rank - g2.value(want_rank).item()).abs() < 1e-12);
    }

    #[test]
    fn pure_language_weights_touch_no_ranking_head() {
        let (model, catalog) = toy();
        let s = build_sample(&dialog(&catalog), 1, &model, &ContextOptions::default()).unwrap();
        let (_, g) = loss_and_grads(&model, &catalog, &s, JointLossWeights { a: 0.0, b: 0.0, c: 1.0 });
        for id in model.head.param_ids().into_iter().chain(model.cand_enc.param_ids()) {
            assert!(g.get(id).data().iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn joint_loss_gradients_match_finite_differences() {
        let (model, catalog) = toy();
        let s = build_sample(&dialog(&catalog), 1, &model, &ContextOptions::default()).unwrap();
        let w = JointLossWeights::default();
        let (_, grads) = loss_and_grads(&model, &catalog, &s, w);
        let report = check_gradients(
            &model.store,
            &grads,
            |store| {
                let m = Model::from_store(model.cfg, model.vocab.clone(), store.clone())?;
                let mut g = Graph::new(&m.store);
                Ok(joint_loss(&m, &mut g, &s, &cands(), &catalog, &w, None)?.1.total)
            },
            GradCheckOptions {
                max_entries: Some(6),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            report.worst() < 1e-4,
            "{:?}",
            report.params.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        );
    }

    #[test]
    fn seeker_turns_carry_no_gradient_signal() {
        let (model, catalog) = toy();
        let d = dialog(&catalog);
        let s = build_sample(&d, 3, &model, &ContextOptions::default()).unwrap();
        let seeker_rows = s.entries.len() - 4;
        assert!(s.targets[..seeker_rows].iter().all(Option::is_none));
        let samples = build_samples(&[d], &model, &ContextOptions::default()).unwrap();
        assert_eq!(samples.len(), 2);
    }

    #[test]
    fn lm_loss_of_uniform_model_is_log_vocab() {
        let (mut model, _) = toy();
        let shape = model.store.get(model.wte).shape().to_vec();
        model.store.set(model.wte, Tensor::zeros(&shape)).unwrap();
        let (_, catalog) = toy();
        let cache = model.cache_items(&catalog).unwrap();
        let ctx = build_context(
            &[Turn::new(Speaker::Seeker, tokenize("i want"))],
            &model.vocab,
            &ContextOptions::default(),
        )
        .unwrap();
        let l = lm_loss(&model, &ctx, &model.vocab.ids(&tokenize("a film")), &cache).unwrap();
        assert!((l - (model.vocab.len() as f64).ln()).abs() < 1e-12);
        assert!(lm_loss(&model, &ctx, &[], &cache).is_err());
    }

    #[test]
    fn uniform_perplexity_equals_vocab_size() {
        let (mut model, catalog) = toy();
        let shape = model.store.get(model.wte).shape().to_vec();
        model.store.set(model.wte, Tensor::zeros(&shape)).unwrap();
        let ppl = perplexity(&model, &[dialog(&catalog)], &catalog, &ContextOptions::default()).unwrap();
        let v = model.vocab.len() as f64;
        assert!((ppl - v).abs() <= 1e-9 * v, "{ppl} vs {v}");
        let no_rec = Dialog {
            dialog_id: "s".into(),
            turns: vec![Turn::new(Speaker::Seeker, tokenize("hi"))],
        };
        assert!(perplexity(&model, &[no_rec], &catalog, &ContextOptions::default()).is_err());
    }

    fn overfit(model: &mut Model, catalog: &Catalog, samples: &[Sample], steps: usize) {
        let mut opt = AdamW::new(
            &model.store,
            AdamWConfig {
                lr: 1e-2,
                ..Default::default()
            },
            LrSchedule::Constant,
        );
        for _ in 0..steps {
            for s in samples {
                let c = if s.rec.is_some() { cands() } else { vec![] };
                let grads = {
                    let mut g = Graph::new(&model.store);
                    let (l, _) = joint_loss(model, &mut g, s, &c, catalog, &JointLossWeights::default(), None).unwrap();
                    g.backward(l).unwrap()
                };
                opt.step(&mut model.store, &grads).unwrap();
            }
        }
    }

    #[test]
    fn memorized_dialog_generates_and_fills_title() {
        let (mut model, catalog) = toy();
        let d = dialog(&catalog);
        let samples = build_samples(std::slice::from_ref(&d), &model, &ContextOptions::default()).unwrap();
        overfit(&mut model, &catalog, &samples, 150);
        let ppl = perplexity(&model, std::slice::from_ref(&d), &catalog, &ContextOptions::default()).unwrap();
        assert!(ppl < 1.2, "{ppl}");

        let cache = model.cache_items(&catalog).unwrap();
        let ctx = build_context(&d.turns[..1], &model.vocab, &ContextOptions::default()).unwrap();
        let tgt = model.vocab.ids(&tokenize("[REC]"));
        assert!(lm_loss(&model, &ctx, &tgt, &cache).is_ok());

        let index = NNIndex::build(&model, &catalog, SearchMode::Exact, &Default::default()).unwrap();
        let cfg = GenerationConfig {
            k: 3,
            ..Default::default()
        };
        let r = generate_response(
            &model,
            &catalog,
            &cache,
            &index,
            &d.turns[..1],
            &ContextOptions::default(),
            &cfg,
        )
        .unwrap();
        assert_eq!(r.trace.rec_positions.len(), 1, "{:?}", r.trace.emitted);
        let ev = &r.trace.events[0];
        assert_eq!(ev.appended_from, EncoderInstance::Context);
        let mut rc = build_context(&d.turns[..1], &model.vocab, &ContextOptions::default()).unwrap();
        rc.push_word(model.vocab.specials().recommender);
        let rc = append_rec_token(rc, &model.vocab);
        let direct = two_phase_recommend(&model, &rc, &index, &cache, 3).unwrap();
        assert_eq!(ev.chosen, direct.top());
        assert!(!r.tokens.iter().any(|t| t == PH));
        if ev.chosen == 102 {
            assert!(
                r.text.contains(&catalog.get(102).unwrap().title.to_lowercase()),
                "{:?} {}",
                r.trace.emitted,
                r.text
            );
        }
        let again = generate_response(
            &model,
            &catalog,
            &cache,
            &index,
            &d.turns[..1],
            &ContextOptions::default(),
            &cfg,
        )
        .unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn surplus_placeholders_are_flagged() {
        let (mut model, catalog) = toy();
        // make [PH] dominate every step, so no [REC] is ever produced
        let ph = model.vocab.specials().ph;
        let d = model.d_model();
        let mut wte = model.store.get(model.wte).clone();
        for v in wte.data_mut().iter_mut() {
            *v = 0.0;
        }
        let ln_b = model.store.id("dec.ln_f.b").unwrap();
        let mut b = model.store.get(ln_b).clone();
        for (j, v) in b.data_mut().iter_mut().enumerate() {
            *v = if j == 0 { 1.0 } else { 0.0 };
        }
        let ln_g = model.store.id("dec.ln_f.g").unwrap();
        model.store.set(ln_g, Tensor::zeros(&[1, d])).unwrap();
        model.store.set(ln_b, b).unwrap();
        wte.data_mut()[ph * d] = 1.0;
        model.store.set(model.wte, wte).unwrap();
        let cache = model.cache_items(&catalog).unwrap();
        let index = NNIndex::build(&model, &catalog, SearchMode::Exact, &Default::default()).unwrap();
        let cfg = GenerationConfig {
            max_new_tokens: 3,
            k: 2,
            ..Default::default()
        };
        let prefix = [Turn::new(Speaker::Seeker, tokenize("hi"))];
        let r = generate_response(
            &model,
            &catalog,
            &cache,
            &index,
            &prefix,
            &ContextOptions::default(),
            &cfg,
        )
        .unwrap();
        assert_eq!(r.trace.emitted, [PH, PH, PH]);
        assert_eq!(r.trace.unfilled, [0, 1, 2]);
        assert!(r.recommended.is_empty());
        assert!(r.tokens.iter().all(|t| t == UNFILLED_MARKER));
    }

    #[test]
    fn temperature_sampling_is_seeded() {
        let (model, catalog) = toy();
        let cache = model.cache_items(&catalog).unwrap();
        let index = NNIndex::build(&model, &catalog, SearchMode::Exact, &Default::default()).unwrap();
        let prefix = [Turn::new(Speaker::Seeker, tokenize("i want a film"))];
        let cfg = GenerationConfig {
            decoding: Decoding::Temperature { temperature: 1.0 },
            seed: 5,
            k: 3,
            max_new_tokens: 8,
        };
        let a = generate_response(
            &model,
            &catalog,
            &cache,
            &index,
            &prefix,
            &ContextOptions::default(),
            &cfg,
        )
        .unwrap();
        let b = generate_response(
            &model,
            &catalog,
            &cache,
            &index,
            &prefix,
            &ContextOptions::default(),
            &cfg,
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(a.trace.emitted.len() <= 8);
    }
}
