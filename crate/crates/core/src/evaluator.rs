//! Recommendation and language metrics, the evaluation driver, the
//! clustering study and report tables.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans, majority_purity};
use crate::context::{append_rec_token, build_context, ContextOptions, Dialog, Speaker};
use crate::error::{Error, Result};
use crate::item_encoder::{EncoderInstance, ItemId};
use crate::model::{Catalog, ItemCache, Model};
use crate::recommender::{two_phase_recommend, NNIndex};
use crate::responder::{generate_response, perplexity, GenerationConfig};
use crate::tensor::Tensor;
use crate::text::{tokenize, PH};

/// Share of turns whose ground truth is among the first `k` ranked items.
pub fn recall_at_k(ranked: &[Vec<ItemId>], ground_truth: &[ItemId], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("recall@k needs k >= 1".into()));
    }
    if ranked.is_empty() || ranked.len() != ground_truth.len() {
        return Err(Error::Invalid(format!(
            "recall over {} ranked lists and {} ground truths",
            ranked.len(),
            ground_truth.len()
        )));
    }
    let hits = ranked
        .iter()
        .zip(ground_truth)
        .filter(|(r, gt)| r.iter().take(k).any(|x| x == *gt))
        .count();
    Ok(hits as f64 / ranked.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub recall_acc: f64,
    /// Among turns whose ground truth was retrieved, share ranked in the
    /// top k.
    pub ranking_acc: f64,
    pub final_acc: f64,
}

/// Splits top-k accuracy into retrieval and ranking parts.
pub fn decompose_accuracy(
    candidates: &[Vec<ItemId>],
    ranked: &[Vec<ItemId>],
    ground_truth: &[ItemId],
    k: usize,
) -> Result<Decomposition> {
    if k == 0 {
        return Err(Error::Invalid("ranking accuracy needs k >= 1".into()));
    }
    if candidates.is_empty() || candidates.len() != ranked.len() || ranked.len() != ground_truth.len() {
        return Err(Error::Invalid(
            "decomposition inputs must be nonempty and aligned".into(),
        ));
    }
    let mut recalled = 0usize;
    let mut top = 0usize;
    for (i, ((c, r), gt)) in candidates.iter().zip(ranked).zip(ground_truth).enumerate() {
        let mut a = c.clone();
        let mut b = r.clone();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(Error::Invalid(format!(
                "ranked list {i} is not a permutation of its candidates"
            )));
        }
        if c.contains(gt) {
            recalled += 1;
            if r.iter().take(k).any(|x| x == gt) {
                top += 1;
            }
        }
    }
    let recall_acc = recalled as f64 / candidates.len() as f64;
    let ranking_acc = if recalled == 0 {
        0.0
    } else {
        top as f64 / recalled as f64
    };
    Ok(Decomposition {
        recall_acc,
        ranking_acc,
        final_acc: recall_acc * ranking_acc,
    })
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Share of responses whose tokens contain the ground-truth title tokens.
pub fn response_recall(responses: &[String], titles: &[String]) -> f64 {
    if responses.is_empty() {
        return 0.0;
    }
    let hits = responses
        .iter()
        .zip(titles)
        .filter(|(r, t)| contains_run(&tokenize(r), &tokenize(t)))
        .count();
    hits as f64 / responses.len() as f64
}

fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    tokens.windows(n)
}

/// Distinct n-grams over token count per response, averaged.
pub fn distinct_n_per_response(responses: &[Vec<String>], n: usize) -> Result<f64> {
    if n == 0 || responses.is_empty() {
        return Err(Error::Invalid(
            "distinct-n needs n >= 1 and at least one response".into(),
        ));
    }
    let total: f64 = responses
        .iter()
        .map(|r| {
            if r.len() < n {
                return 0.0;
            }
            let uniq: HashSet<&[String]> = ngrams(r, n).collect();
            uniq.len() as f64 / r.len() as f64
        })
        .sum();
    Ok(total / responses.len() as f64)
}

/// Distinct n-grams of the whole response set over its token count.
pub fn distinct_n_corpus(responses: &[Vec<String>], n: usize) -> Result<f64> {
    if n == 0 || responses.is_empty() {
        return Err(Error::Invalid(
            "distinct-n needs n >= 1 and at least one response".into(),
        ));
    }
    let tokens: usize = responses.iter().map(Vec::len).sum();
    if tokens == 0 {
        return Ok(0.0);
    }
    let uniq: HashSet<&[String]> = responses.iter().flat_map(|r| ngrams(r, n)).collect();
    Ok(uniq.len() as f64 / tokens as f64)
}

/// Corpus BLEU with uniform weights up to order `n` and a brevity penalty.
///
/// A higher-order precision with no matches becomes `1 / (total + 1)`.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::Invalid(
            "BLEU needs aligned, nonempty candidate and reference lists".into(),
        ));
    }
    if n == 0 {
        return Err(Error::Invalid("BLEU order must be at least 1".into()));
    }
    let mut log_p = 0.0;
    for order in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let mut refc: HashMap<&[String], usize> = HashMap::new();
            for g in ngrams(r, order) {
                *refc.entry(g).or_default() += 1;
            }
            let mut candc: HashMap<&[String], usize> = HashMap::new();
            for g in ngrams(c, order) {
                *candc.entry(g).or_default() += 1;
            }
            matched += candc
                .iter()
                .map(|(g, &k)| k.min(refc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            total += c.len().saturating_sub(order - 1);
        }
        let p = if order == 1 {
            if total == 0 {
                0.0
            } else {
                matched as f64 / total as f64
            }
        } else if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_p += p.ln() / n as f64;
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_p.exp())
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Candidates retrieved per recommendation.
    pub k_candidates: usize,
    pub context: ContextOptions,
    pub generation: GenerationConfig,
    /// Generate responses for language metrics and response recall.
    pub generate: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: vec![1, 10, 50],
            k_candidates: 20,
            context: ContextOptions::default(),
            generation: GenerationConfig::default(),
            generate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub recall: f64,
    pub ranking_acc: f64,
    pub final_acc: f64,
}

/// Per-turn record kept next to the report for audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub dialog_id: String,
    pub turn: usize,
    pub ground_truth: ItemId,
    pub candidates: Vec<ItemId>,
    pub ranked: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub seed: u64,
    pub rec_turns: usize,
    pub recall_acc: f64,
    pub at_k: Vec<AtK>,
    /// Recommendation turns whose generated text holds the ground-truth title.
    pub rer: Option<f64>,
    /// Recommendation turns where a recommendation was produced and its
    /// title reached the text.
    pub title_integration: Option<f64>,
    /// Generations with a recommendation that contain no placeholder.
    pub placeholder_free: Option<f64>,
    pub distinct: Vec<(usize, f64)>,
    pub distinct_corpus: Vec<(usize, f64)>,
    pub bleu: Vec<(usize, f64)>,
    pub perplexity: f64,
    pub turns: Vec<TurnRecord>,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&AtK> {
        self.at_k.iter().find(|a| a.k == k)
    }

    /// Exact product identity between the accuracy columns.
    pub fn check_decomposition(&self) -> bool {
        self.at_k.iter().all(|a| a.final_acc == self.recall_acc * a.ranking_acc)
    }
}

/// Scores recommendation and response quality on `dialogs`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    catalog: &Catalog,
    cache: &ItemCache,
    index: &NNIndex,
    dialogs: &[Dialog],
    opts: &EvalOptions,
    fingerprint: &str,
    seed: u64,
) -> Result<EvalReport> {
    let sp = model.vocab.specials();
    let mut turns = Vec::new();
    for d in dialogs {
        for (ti, t) in d.turns.iter().enumerate() {
            if !t.is_rec_turn() {
                continue;
            }
            let mut ctx = build_context(&d.turns[..ti], &model.vocab, &opts.context)?;
            ctx.push_word(sp.recommender);
            let ctx = append_rec_token(ctx, &model.vocab);
            let rec = two_phase_recommend(model, &ctx, index, cache, opts.k_candidates)?;
            let ranked = rec.ranked_ids();
            for &gt in &t.rec_ids {
                turns.push(TurnRecord {
                    dialog_id: d.dialog_id.clone(),
                    turn: ti,
                    ground_truth: gt,
                    candidates: rec.candidates.clone(),
                    ranked: ranked.clone(),
                });
            }
        }
    }
    if turns.is_empty() {
        return Err(Error::Data("evaluation set has no recommendation turns".into()));
    }
    let cands: Vec<Vec<ItemId>> = turns.iter().map(|t| t.candidates.clone()).collect();
    let ranked: Vec<Vec<ItemId>> = turns.iter().map(|t| t.ranked.clone()).collect();
    let gts: Vec<ItemId> = turns.iter().map(|t| t.ground_truth).collect();
    let mut at_k = Vec::new();
    let mut recall_acc = 0.0;
    for &k in &opts.ks {
        let dec = decompose_accuracy(&cands, &ranked, &gts, k)?;
        recall_acc = dec.recall_acc;
        at_k.push(AtK {
            k,
            recall: recall_at_k(&ranked, &gts, k)?,
            ranking_acc: dec.ranking_acc,
            final_acc: dec.final_acc,
        });
    }

    let mut report = EvalReport {
        fingerprint: fingerprint.to_string(),
        seed,
        rec_turns: turns.len(),
        recall_acc,
        at_k,
        rer: None,
        title_integration: None,
        placeholder_free: None,
        distinct: Vec::new(),
        distinct_corpus: Vec::new(),
        bleu: Vec::new(),
        perplexity: perplexity(model, dialogs, catalog, &opts.context)?,
        turns,
    };
    if !opts.generate {
        return Ok(report);
    }

    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    let (mut rec_texts, mut rec_titles) = (Vec::new(), Vec::new());
    let mut integrated = 0usize;
    let (mut produced, mut clean) = (0usize, 0usize);
    for d in dialogs {
        for (ti, t) in d.turns.iter().enumerate() {
            if t.speaker != Speaker::Recommender {
                continue;
            }
            let r = generate_response(
                model,
                catalog,
                cache,
                index,
                &d.turns[..ti],
                &opts.context,
                &opts.generation,
            )?;
            if t.is_rec_turn() {
                rec_texts.push(r.text.clone());
                rec_titles.push(catalog.get(t.rec_ids[0])?.title.clone());
                if let Some(&first) = r.recommended.first() {
                    if contains_run(&r.tokens, &tokenize(&catalog.get(first)?.title)) {
                        integrated += 1;
                    }
                }
            }
            if !r.recommended.is_empty() {
                produced += 1;
                if !r.tokens.iter().any(|x| x == PH) {
                    clean += 1;
                }
            }
            hyps.push(r.tokens);
            refs.push(t.text.clone());
        }
    }
    report.rer = Some(response_recall(&rec_texts, &rec_titles));
    report.title_integration = Some(integrated as f64 / rec_texts.len().max(1) as f64);
    report.placeholder_free = Some(if produced == 0 {
        1.0
    } else {
        clean as f64 / produced as f64
    });
    for n in [2, 3, 4] {
        report.distinct.push((n, distinct_n_per_response(&hyps, n)?));
        report.distinct_corpus.push((n, distinct_n_corpus(&hyps, n)?));
    }
    for n in [2, 4] {
        report.bleu.push((n, bleu(&hyps, &refs, n)?));
    }
    Ok(report)
}

/// Mean majority-genre purity per K for one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub encoder: String,
    pub items: usize,
    pub genres: usize,
    pub repeats: usize,
    pub purity: Vec<(usize, f64)>,
}

/// Embeds the single-genre items of `catalog` and clusters them `repeats`
/// times per K with fresh random initializations.
pub fn cluster_purity(
    model: &Model,
    catalog: &Catalog,
    instance: EncoderInstance,
    ks: &[usize],
    repeats: usize,
    seed: u64,
    label: &str,
) -> Result<ClusterReport> {
    let items: Vec<_> = catalog.items().iter().filter(|m| m.genre.len() == 1).collect();
    let max_k = ks.iter().copied().max().unwrap_or(0);
    if items.len() < max_k.max(1) || repeats == 0 {
        return Err(Error::Data(format!(
            "{} single-genre items cannot support K={max_k} with {repeats} repeats",
            items.len()
        )));
    }
    let mut genre_ids: HashMap<&str, usize> = HashMap::new();
    let labels: Vec<usize> = items
        .iter()
        .map(|m| {
            let next = genre_ids.len();
            *genre_ids.entry(m.genre[0].as_str()).or_insert(next)
        })
        .collect();
    let mut rows = Vec::with_capacity(items.len());
    for m in &items {
        rows.push(model.encode_item(m, instance, catalog.fields())?.vector);
    }
    let points = Tensor::from_rows(&rows)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut purity = Vec::new();
    for &k in ks {
        let mut total = 0.0;
        for _ in 0..repeats {
            let km = kmeans(&points, k, 100, &mut rng)?;
            total += majority_purity(&km.assignments, &labels);
        }
        purity.push((k, total / repeats as f64));
    }
    Ok(ClusterReport {
        encoder: label.to_string(),
        items: items.len(),
        genres: genre_ids.len(),
        repeats,
        purity,
    })
}

/// Paired reports of a base run and one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub delta: String,
    pub base: EvalReport,
    pub variant: EvalReport,
    /// `(metric, (variant − base) / base)`; metrics with a zero base are
    /// omitted.
    pub relative: Vec<(String, f64)>,
}

impl AblationReport {
    pub fn new(delta: &str, base: EvalReport, variant: EvalReport) -> Self {
        let mut relative = Vec::new();
        let pairs = base.at_k.iter().zip(&variant.at_k);
        for (b, v) in pairs {
            if b.recall != 0.0 {
                relative.push((format!("recall@{}", b.k), (v.recall - b.recall) / b.recall));
            }
        }
        if base.recall_acc != 0.0 {
            relative.push((
                "recall_acc".into(),
                (variant.recall_acc - base.recall_acc) / base.recall_acc,
            ));
        }
        AblationReport {
            delta: delta.to_string(),
            base,
            variant,
            relative,
        }
    }

    pub fn relative(&self, metric: &str) -> Option<f64> {
        self.relative.iter().find(|(m, _)| m == metric).map(|r| r.1)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Plain-text tables of a report.
pub fn render_report(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config {}  seed {}  turns {}", r.fingerprint, r.seed, r.rec_turns);
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<6} {:>10} {:>10} {:>10} {:>10}",
        "k", "recall", "retrieved", "ranking", "final"
    );
    for a in &r.at_k {
        let _ = writeln!(
            s,
            "{:<6} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            a.k, a.recall, r.recall_acc, a.ranking_acc, a.final_acc
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<22} {:>10}", "metric", "value");
    let mut row = |name: String, v: String| {
        let _ = writeln!(s, "{name:<22} {v:>10}");
    };
    row("response recall".into(), opt(r.rer));
    row("title integration".into(), opt(r.title_integration));
    row("placeholder free".into(), opt(r.placeholder_free));
    for (n, v) in &r.distinct {
        row(format!("distinct-{n}"), format!("{v:.4}"));
    }
    for (n, v) in &r.distinct_corpus {
        row(format!("distinct-{n} (corpus)"), format!("{v:.4}"));
    }
    for (n, v) in &r.bleu {
        row(format!("bleu-{n}"), format!("{v:.4}"));
    }
    row("perplexity".into(), format!("{:.4}", r.perplexity));
    s
}

pub fn render_clusters(reports: &[ClusterReport]) -> String {
    let mut s = String::new();
    let ks: Vec<usize> = reports
        .first()
        .map(|r| r.purity.iter().map(|p| p.0).collect())
        .unwrap_or_default();
    let _ = write!(s, "{:<12}", "encoder");
    for k in &ks {
        let _ = write!(s, " {:>8}", format!("K={k}"));
    }
    let _ = writeln!(s);
    for r in reports {
        let _ = write!(s, "{:<12}", r.encoder);
        for (_, p) in &r.purity {
            let _ = write!(s, " {p:>8.4}");
        }
        let _ = writeln!(s);
    }
    s
}

pub fn render_ablation(a: &AblationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "delta: {}", a.delta);
    let _ = writeln!(
        s,
        "{:<12} {:>10} {:>10} {:>10}",
        "metric", "base", "variant", "relative"
    );
    for (b, v) in a.base.at_k.iter().zip(&a.variant.at_k) {
        let rel = a.relative(&format!("recall@{}", b.k));
        let _ = writeln!(
            s,
            "{:<12} {:>10.4} {:>10.4} {:>10}",
            format!("recall@{}", b.k),
            b.recall,
            v.recall,
            opt(rel)
        );
    }
    s
}
