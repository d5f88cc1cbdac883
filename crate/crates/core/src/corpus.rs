//! Metadata and dialog files, ReDial-style import, the synthetic corpus
//! generator, corpus statistics and train/held-out splits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{Dialog, Mention, Speaker, Turn};
use crate::error::{Error, Result};
use crate::evaluator::distinct_n_per_response;
use crate::item_encoder::{check_unique_ids, ItemId, ItemMetadata};
use crate::text::tokenize;

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        let s = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{s}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one JSON item record per line.
pub fn load_metadata_db(path: &Path) -> Result<Vec<ItemMetadata>> {
    let mut items = Vec::new();
    for (line, text) in read_lines(path)? {
        let m: ItemMetadata = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        if m.title.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("item {} has an empty title", m.id),
            });
        }
        items.push(m);
    }
    if items.is_empty() {
        return Err(Error::Data(format!("{}: no item records", path.display())));
    }
    check_unique_ids(&items)?;
    Ok(items)
}

pub fn write_metadata_db(path: &Path, items: &[ItemMetadata]) -> Result<()> {
    write_lines(path, items)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawMention {
    start: usize,
    end: usize,
    item_id: ItemId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawTurn {
    speaker: Speaker,
    text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    mentions: Vec<RawMention>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    rec_ids: Vec<ItemId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawDialog {
    dialog_id: String,
    turns: Vec<RawTurn>,
}

/// Splits raw text on `@<digits>` markup.
fn markup_segments(text: &str) -> Vec<std::result::Result<&str, ItemId>> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut last = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'@' {
            let mut j = i + 1;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j > i + 1 {
                if let Ok(id) = text[i + 1..j].parse::<ItemId>() {
                    out.push(Ok(&text[last..i]));
                    out.push(Err(id));
                    last = j;
                    i = j;
                    continue;
                }
            }
        }
        i += 1;
    }
    out.push(Ok(&text[last..]));
    out
}

/// Tokenizes text carrying `@<id>` markup; each mention becomes the item's
/// title tokens plus a span.
pub fn resolve_markup<F>(text: &str, mut title: F) -> Result<(Vec<String>, Vec<Mention>)>
where
    F: FnMut(ItemId) -> Option<String>,
{
    let mut tokens = Vec::new();
    let mut mentions = Vec::new();
    for seg in markup_segments(text) {
        match seg {
            Ok(plain) => tokens.extend(tokenize(plain)),
            Err(id) => {
                let t = title(id).ok_or_else(|| Error::Data(format!("unknown item id {id}")))?;
                let start = tokens.len();
                tokens.extend(tokenize(&t));
                mentions.push(Mention {
                    start,
                    end: tokens.len(),
                    item_id: id,
                });
            }
        }
    }
    Ok((tokens, mentions))
}

/// Loads dialogs and resolves their mentions against `db`.
pub fn load_dialog_corpus(path: &Path, db: &[ItemMetadata]) -> Result<Vec<Dialog>> {
    let titles: HashMap<ItemId, &str> = db.iter().map(|m| (m.id, m.title.as_str())).collect();
    let mut out = Vec::new();
    for (line, text) in read_lines(path)? {
        let raw: RawDialog = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        let mut turns = Vec::with_capacity(raw.turns.len());
        for (ti, rt) in raw.turns.into_iter().enumerate() {
            let ctx = |msg: String| Error::Data(format!("dialog {} turn {ti}: {msg}", raw.dialog_id));
            let (tokens, mut mentions) = resolve_markup(&rt.text, |id| titles.get(&id).map(|s| s.to_string()))
                .map_err(|e| ctx(e.to_string()))?;
            for m in rt.mentions {
                if !titles.contains_key(&m.item_id) {
                    return Err(ctx(format!("unknown item id {}", m.item_id)));
                }
                mentions.push(Mention {
                    start: m.start,
                    end: m.end,
                    item_id: m.item_id,
                });
            }
            if let Some(bad) = rt.rec_ids.iter().find(|id| !titles.contains_key(id)) {
                return Err(ctx(format!("unknown recommended item id {bad}")));
            }
            let turn = Turn {
                speaker: rt.speaker,
                text: tokens,
                mentions,
                rec_ids: rt.rec_ids,
            };
            turn.validate().map_err(|e| ctx(e.to_string()))?;
            turns.push(turn);
        }
        out.push(Dialog {
            dialog_id: raw.dialog_id,
            turns,
        });
    }
    Ok(out)
}

/// Surface text with mention spans written back as `@<id>` markup.
pub fn turn_markup(turn: &Turn) -> String {
    let mut spans = turn.mentions.clone();
    spans.sort_by_key(|m| m.start);
    let mut parts: Vec<String> = Vec::new();
    let mut i = 0;
    let mut it = spans.iter().peekable();
    while i < turn.text.len() {
        match it.peek() {
            Some(m) if m.start == i => {
                parts.push(format!("@{}", m.item_id));
                i = m.end;
                it.next();
            }
            _ => {
                parts.push(turn.text[i].clone());
                i += 1;
            }
        }
    }
    parts.join(" ")
}

pub fn write_dialog_corpus(path: &Path, dialogs: &[Dialog]) -> Result<()> {
    let raw: Vec<RawDialog> = dialogs
        .iter()
        .map(|d| RawDialog {
            dialog_id: d.dialog_id.clone(),
            turns: d
                .turns
                .iter()
                .map(|t| RawTurn {
                    speaker: t.speaker,
                    text: turn_markup(t),
                    mentions: Vec::new(),
                    rec_ids: t.rec_ids.clone(),
                })
                .collect(),
        })
        .collect();
    write_lines(path, &raw)
}

#[derive(Debug, Deserialize)]
struct RedialMessage {
    text: String,
    #[serde(rename = "senderWorkerId")]
    sender: i64,
}

#[derive(Debug, Deserialize)]
struct RedialQuestion {
    #[serde(default)]
    suggested: i64,
}

#[derive(Debug, Deserialize)]
struct RedialDialog {
    #[serde(rename = "conversationId")]
    id: serde_json::Value,
    #[serde(rename = "initiatorWorkerId")]
    initiator: i64,
    messages: Vec<RedialMessage>,
    #[serde(rename = "movieMentions", default)]
    movie_mentions: serde_json::Value,
    #[serde(rename = "respondentQuestions", default)]
    respondent_questions: serde_json::Value,
}

/// Imports a ReDial-format JSONL file.
///
/// Items get title-only metadata from the movie-mention table. A
/// recommender message becomes a recommendation turn when it mentions a
/// movie the respondent marked as suggested.
pub fn import_redial(path: &Path) -> Result<(Vec<ItemMetadata>, Vec<Dialog>)> {
    let mut titles: BTreeMap<ItemId, String> = BTreeMap::new();
    let mut parsed = Vec::new();
    for (line, text) in read_lines(path)? {
        let d: RedialDialog = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        if let Some(map) = d.movie_mentions.as_object() {
            for (k, v) in map {
                if let (Ok(id), Some(name)) = (k.parse::<ItemId>(), v.as_str()) {
                    titles.entry(id).or_insert_with(|| name.trim().to_string());
                }
            }
        }
        parsed.push(d);
    }
    let mut dialogs = Vec::with_capacity(parsed.len());
    for d in parsed {
        let suggested: HashSet<ItemId> = d
            .respondent_questions
            .as_object()
            .map(|m| {
                m.iter()
                    .filter_map(|(k, v)| {
                        let q: RedialQuestion = serde_json::from_value(v.clone()).ok()?;
                        (q.suggested == 1).then(|| k.parse().ok()).flatten()
                    })
                    .collect()
            })
            .unwrap_or_default();
        let mut turns = Vec::with_capacity(d.messages.len());
        for m in &d.messages {
            let speaker = if m.sender == d.initiator {
                Speaker::Seeker
            } else {
                Speaker::Recommender
            };
            let (tokens, mentions) = resolve_markup(&m.text, |id| {
                Some(titles.get(&id).cloned().unwrap_or_else(|| format!("movie {id}")))
            })?;
            for mm in &mentions {
                titles
                    .entry(mm.item_id)
                    .or_insert_with(|| format!("movie {}", mm.item_id));
            }
            let rec_ids = if speaker == Speaker::Recommender {
                mentions
                    .iter()
                    .map(|x| x.item_id)
                    .filter(|id| suggested.contains(id))
                    .collect()
            } else {
                Vec::new()
            };
            turns.push(Turn {
                speaker,
                text: tokens,
                mentions,
                rec_ids,
            });
        }
        let id = match &d.id {
            serde_json::Value::String(s) => s.clone(),
            v => v.to_string(),
        };
        dialogs.push(Dialog { dialog_id: id, turns });
    }
    let db = titles
        .into_iter()
        .map(|(id, title)| ItemMetadata {
            id,
            title,
            genre: vec![],
            actors: vec![],
            directors: vec![],
            plot: String::new(),
        })
        .collect();
    Ok((db, dialogs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogs: usize,
    pub utterances: usize,
    /// Utterances per dialog.
    pub avg_turns: f64,
    /// Word tokens outside mention spans per item mention.
    pub tokens_per_mention: f64,
    pub mentions: usize,
    pub distinct_1: f64,
    pub distinct_3: f64,
}

pub fn corpus_stats(dialogs: &[Dialog]) -> Result<CorpusStats> {
    if dialogs.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let utterances: usize = dialogs.iter().map(|d| d.turns.len()).sum();
    let mut words = 0usize;
    let mut mentions = 0usize;
    let mut sentences: Vec<Vec<String>> = Vec::with_capacity(utterances);
    for t in dialogs.iter().flat_map(|d| &d.turns) {
        let covered: usize = t.mentions.iter().map(|m| m.end - m.start).sum();
        words += t.text.len() - covered;
        mentions += t.mentions.len();
        sentences.push(t.text.clone());
    }
    Ok(CorpusStats {
        dialogs: dialogs.len(),
        utterances,
        avg_turns: utterances as f64 / dialogs.len() as f64,
        tokens_per_mention: if mentions == 0 {
            0.0
        } else {
            words as f64 / mentions as f64
        },
        mentions,
        distinct_1: distinct_n_per_response(&sentences, 1)?,
        distinct_3: distinct_n_per_response(&sentences, 3)?,
    })
}

pub const GENRES: [&str; 10] = [
    "action", "comedy", "horror", "romance", "scifi", "drama", "western", "mystery", "fantasy", "thriller",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_items: usize,
    pub n_genres: usize,
    pub n_dialogs: usize,
    pub min_seeker_turns: usize,
    pub max_seeker_turns: usize,
    /// Chance that a middle seeker turn is small talk rather than a
    /// restated preference.
    pub chitchat_prob: f64,
    pub plot_words_per_genre: usize,
    pub name_pool: usize,
    /// Chance that the genre is conveyed by mentioning another item of the
    /// same genre instead of naming it.
    pub distractor_prob: f64,
    pub closing_prob: f64,
    pub syllables_per_word: usize,
    /// Recommendations per dialog; each later round opens with a follow-up
    /// request carrying a fresh keyword.
    pub rec_rounds: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            n_items: 30,
            n_genres: 3,
            n_dialogs: 200,
            min_seeker_turns: 1,
            max_seeker_turns: 1,
            chitchat_prob: 0.3,
            plot_words_per_genre: 6,
            name_pool: 12,
            distractor_prob: 0.0,
            closing_prob: 0.5,
            syllables_per_word: 2,
            rec_rounds: 3,
        }
    }
}

const CONSONANTS: &str = "bdfgklmnprstvz";
const VOWELS: &str = "aeiou";

/// Generator of distinct pronounceable words.
struct WordMint {
    syllables: Vec<String>,
    per_word: usize,
    used: HashSet<String>,
    reserved: HashSet<String>,
}

impl WordMint {
    fn new(per_word: usize, reserved: &[&str]) -> Self {
        let syllables = CONSONANTS
            .chars()
            .flat_map(|c| VOWELS.chars().map(move |v| format!("{c}{v}")))
            .collect();
        WordMint {
            syllables,
            per_word,
            used: HashSet::new(),
            reserved: reserved.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn capacity(&self) -> f64 {
        (self.syllables.len() as f64).powi(self.per_word as i32)
    }

    fn fresh<R: Rng>(&mut self, rng: &mut R) -> String {
        loop {
            let w: String = (0..self.per_word)
                .map(|_| self.syllables.choose(rng).expect("syllables").as_str())
                .collect();
            if !self.reserved.contains(&w) && self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

const TEMPLATE_WORDS: &[&str] = &["i", "a", "me", "it", "is", "to", "the", "do", "so", "no"];

/// Builds a metadata database and dialogs in which the recommended item is
/// determined by a keyword the seeker mentions.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<ItemMetadata>, Vec<Dialog>)> {
    if spec.n_genres == 0 || spec.n_genres > GENRES.len() {
        return Err(Error::Config(format!("n_genres must be in 1..={}", GENRES.len())));
    }
    if spec.n_items < spec.n_genres {
        return Err(Error::Config("n_items must be at least n_genres".into()));
    }
    if spec.min_seeker_turns == 0 || spec.min_seeker_turns > spec.max_seeker_turns {
        return Err(Error::Config("seeker turn range must satisfy 1 <= min <= max".into()));
    }
    if spec.syllables_per_word == 0 || spec.name_pool < 3 {
        return Err(Error::Config(
            "need at least one syllable per word and three names".into(),
        ));
    }
    if spec.rec_rounds == 0 || spec.rec_rounds > spec.n_items {
        return Err(Error::Config("rec_rounds must be in 1..=n_items".into()));
    }
    let mut mint = WordMint::new(spec.syllables_per_word, TEMPLATE_WORDS);
    let needed = 3 * spec.n_items + spec.n_genres * spec.plot_words_per_genre + spec.name_pool;
    if needed as f64 > 0.5 * mint.capacity() {
        return Err(Error::Config(format!(
            "spec needs {needed} distinct words but {}-syllable words allow only {}",
            spec.syllables_per_word,
            mint.capacity()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let genres = &GENRES[..spec.n_genres];
    let names: Vec<String> = (0..spec.name_pool).map(|_| mint.fresh(&mut rng)).collect();
    let plot_words: Vec<Vec<String>> = genres
        .iter()
        .map(|_| (0..spec.plot_words_per_genre).map(|_| mint.fresh(&mut rng)).collect())
        .collect();
    let mut db = Vec::with_capacity(spec.n_items);
    let mut keywords = Vec::with_capacity(spec.n_items);
    for i in 0..spec.n_items {
        let g = i % spec.n_genres;
        let title = format!("{} {}", mint.fresh(&mut rng), mint.fresh(&mut rng));
        let keyword = mint.fresh(&mut rng);
        let mut plot: Vec<String> = plot_words[g]
            .choose_multiple(&mut rng, 3.min(spec.plot_words_per_genre))
            .cloned()
            .collect();
        plot.push(keyword.clone());
        let cast: Vec<String> = names.choose_multiple(&mut rng, 3).cloned().collect();
        db.push(ItemMetadata {
            id: i as ItemId + 1,
            title,
            genre: vec![genres[g].to_string()],
            actors: cast[..2].to_vec(),
            directors: vec![cast[2].clone()],
            plot: plot.join(" "),
        });
        keywords.push(keyword);
    }
    let by_genre: Vec<Vec<usize>> = (0..spec.n_genres)
        .map(|g| (0..spec.n_items).filter(|i| i % spec.n_genres == g).collect())
        .collect();
    let title_of: HashMap<ItemId, String> = db.iter().map(|m| (m.id, m.title.clone())).collect();
    let turn = |speaker: Speaker, text: String| -> Turn {
        let (tokens, mentions) = resolve_markup(&text, |id| title_of.get(&id).cloned()).expect("generated ids exist");
        Turn {
            speaker,
            text: tokens,
            mentions,
            rec_ids: Vec::new(),
        }
    };

    const GENRE_LINES: [&str; 3] = [
        "i am in the mood for a {g} movie",
        "can you suggest a good {g} film ?",
        "i really enjoy {g} movies",
    ];
    const DISTRACTOR_LINES: [&str; 2] = ["i recently watched {x} and liked it", "have you seen {x} ? i loved it"];
    const KEYWORD_LINES: [&str; 3] = [
        "something with {k} would be great",
        "ideally it has {k} in it",
        "i want a story about {k}",
    ];
    const SMALL_TALK: [&str; 3] = [
        "i usually watch movies on weekends",
        "my friends say i am picky",
        "it has been a long week",
    ];
    const QUESTIONS: [&str; 3] = [
        "what else do you like ?",
        "tell me more about what you want .",
        "any particular details you care about ?",
    ];
    const REC_LINES: [&str; 3] = [
        "you should watch {t} .",
        "how about {t} ? it is great .",
        "i recommend {t} !",
    ];

    const FOLLOW_UPS: [&str; 3] = [
        "thanks ! now i want a {g} movie",
        "great , what about a {g} film ?",
        "i have seen that one , any {g} movie ?",
    ];

    let mut dialogs = Vec::with_capacity(spec.n_dialogs);
    for di in 0..spec.n_dialogs {
        let mut turns = Vec::new();
        let mut picked: Vec<usize> = Vec::with_capacity(spec.rec_rounds);
        for round in 0..spec.rec_rounds {
            let target = loop {
                let t = rng.random_range(0..spec.n_items);
                if !picked.contains(&t) {
                    break t;
                }
            };
            picked.push(target);
            let g = target % spec.n_genres;
            let kw = KEYWORD_LINES
                .choose(&mut rng)
                .unwrap()
                .replace("{k}", &keywords[target]);
            let mut seeker_lines = Vec::new();
            if round == 0 {
                let n_seeker = rng.random_range(spec.min_seeker_turns..=spec.max_seeker_turns);
                let others: Vec<usize> = by_genre[g].iter().copied().filter(|&i| i != target).collect();
                let use_distractor = !others.is_empty() && rng.random_bool(spec.distractor_prob);
                let genre_line = if use_distractor {
                    let x = others.choose(&mut rng).unwrap();
                    DISTRACTOR_LINES
                        .choose(&mut rng)
                        .unwrap()
                        .replace("{x}", &format!("@{}", db[*x].id))
                } else {
                    GENRE_LINES.choose(&mut rng).unwrap().replace("{g}", genres[g])
                };
                if n_seeker == 1 {
                    seeker_lines.push(format!("{genre_line} , {kw}"));
                } else {
                    seeker_lines.push(genre_line);
                    for _ in 1..n_seeker - 1 {
                        let line = if rng.random_bool(spec.chitchat_prob) {
                            SMALL_TALK.choose(&mut rng).unwrap().to_string()
                        } else {
                            GENRE_LINES.choose(&mut rng).unwrap().replace("{g}", genres[g])
                        };
                        seeker_lines.push(line);
                    }
                    seeker_lines.push(kw);
                }
            } else {
                let follow = FOLLOW_UPS.choose(&mut rng).unwrap().replace("{g}", genres[g]);
                seeker_lines.push(format!("{follow} , {kw}"));
            }
            for (i, line) in seeker_lines.iter().enumerate() {
                turns.push(turn(Speaker::Seeker, line.clone()));
                if i + 1 < seeker_lines.len() {
                    turns.push(turn(
                        Speaker::Recommender,
                        QUESTIONS.choose(&mut rng).unwrap().to_string(),
                    ));
                }
            }
            let rec_line = REC_LINES
                .choose(&mut rng)
                .unwrap()
                .replace("{t}", &format!("@{}", db[target].id));
            let mut rec = turn(Speaker::Recommender, rec_line);
            rec.rec_ids = vec![db[target].id];
            turns.push(rec);
        }
        if rng.random_bool(spec.closing_prob) {
            turns.push(turn(Speaker::Seeker, "thanks , i will check it out".into()));
            turns.push(turn(Speaker::Recommender, "enjoy the movie !".into()));
        }
        dialogs.push(Dialog {
            dialog_id: format!("syn-{di:05}"),
            turns,
        });
    }
    Ok((db, dialogs))
}

/// Items and dialogs of a train/held-out partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Dialog>,
    pub test: Vec<Dialog>,
    /// Items whose recommendation dialogs were all held out; empty for a
    /// dialog-level split.
    pub heldout_items: Vec<ItemId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Held-out dialogs recommend items never recommended or mentioned in
    /// training.
    #[default]
    Item,
    /// Dialogs are partitioned at random.
    Dialog,
}

fn dialog_items(d: &Dialog) -> impl Iterator<Item = ItemId> + '_ {
    d.turns
        .iter()
        .flat_map(|t| t.rec_ids.iter().copied().chain(t.mentions.iter().map(|m| m.item_id)))
}

/// Partitions a corpus with roughly `frac` of it held out.
///
/// In item mode a `frac` share of the recommended items is drawn; dialogs
/// recommending one of them are held out, and dialogs that merely mention
/// one are dropped from training.
pub fn split_corpus(dialogs: &[Dialog], frac: f64, mode: SplitMode, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&frac) {
        return Err(Error::Config(format!("held-out fraction {frac} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        SplitMode::Dialog => {
            let mut order: Vec<usize> = (0..dialogs.len()).collect();
            order.shuffle(&mut rng);
            let n_test = (dialogs.len() as f64 * frac).round() as usize;
            let test_set: BTreeSet<usize> = order[..n_test].iter().copied().collect();
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (i, d) in dialogs.iter().enumerate() {
                if test_set.contains(&i) {
                    test.push(d.clone());
                } else {
                    train.push(d.clone());
                }
            }
            Ok(Split {
                train,
                test,
                heldout_items: Vec::new(),
            })
        }
        SplitMode::Item => {
            let recommended: BTreeSet<ItemId> = dialogs
                .iter()
                .flat_map(|d| d.turns.iter().flat_map(|t| t.rec_ids.iter().copied()))
                .collect();
            let mut pool: Vec<ItemId> = recommended.into_iter().collect();
            pool.shuffle(&mut rng);
            let n_hold = (pool.len() as f64 * frac).round() as usize;
            let mut held: Vec<ItemId> = pool[..n_hold].to_vec();
            held.sort_unstable();
            let held_set: HashSet<ItemId> = held.iter().copied().collect();
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for d in dialogs {
                let recs_held = d.turns.iter().flat_map(|t| &t.rec_ids).any(|id| held_set.contains(id));
                if recs_held {
                    test.push(d.clone());
                } else if !dialog_items(d).any(|id| held_set.contains(&id)) {
                    train.push(d.clone());
                }
            }
            Ok(Split {
                train,
                test,
                heldout_items: held,
            })
        }
    }
}

/// Table-lookup baseline: picks the item owning the most distinctive plot
/// words (used by no other item) in the latest seeker turn that has any.
pub fn keyword_lookup(db: &[ItemMetadata], prefix: &[Turn]) -> Option<ItemId> {
    let mut owners: HashMap<String, Vec<ItemId>> = HashMap::new();
    for m in db {
        let words: BTreeSet<String> = tokenize(&m.plot).into_iter().collect();
        for w in words {
            owners.entry(w).or_default().push(m.id);
        }
    }
    for t in prefix.iter().rev().filter(|t| t.speaker == Speaker::Seeker) {
        let mut score: BTreeMap<ItemId, usize> = BTreeMap::new();
        for w in &t.text {
            if let Some(o) = owners.get(w) {
                if o.len() == 1 {
                    *score.entry(o[0]).or_default() += 1;
                }
            }
        }
        if let Some((id, _)) = score.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))) {
            return Some(id);
        }
    }
    None
}

/// Recommendation samples: `(dialog index, turn index)` of every turn with
/// ground-truth items.
pub fn rec_turns(dialogs: &[Dialog]) -> Vec<(usize, usize)> {
    dialogs
        .iter()
        .enumerate()
        .flat_map(|(di, d)| {
            d.turns
                .iter()
                .enumerate()
                .filter(|(_, t)| t.is_rec_turn())
                .map(move |(ti, _)| (di, ti))
        })
        .collect()
}
