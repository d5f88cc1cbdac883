//! Dialog turns and their conversion into mixed word/item sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::item_encoder::ItemId;
use crate::text::{Vocab, PH, REC, RECOMMENDER, SEEKER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Seeker,
    Recommender,
}

impl Speaker {
    pub fn token(self) -> &'static str {
        match self {
            Speaker::Seeker => SEEKER,
            Speaker::Recommender => RECOMMENDER,
        }
    }
}

/// Item mention over the token span `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub item_id: ItemId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: Vec<String>,
    #[serde(default)]
    pub mentions: Vec<Mention>,
    /// Ground-truth recommendations; nonempty marks a recommendation turn.
    #[serde(default)]
    pub rec_ids: Vec<ItemId>,
}

impl Turn {
    pub fn new(speaker: Speaker, text: Vec<String>) -> Self {
        Turn {
            speaker,
            text,
            mentions: Vec::new(),
            rec_ids: Vec::new(),
        }
    }

    pub fn is_rec_turn(&self) -> bool {
        !self.rec_ids.is_empty()
    }

    /// Checks span bounds and disjointness.
    pub fn validate(&self) -> Result<()> {
        let mut spans: Vec<&Mention> = self.mentions.iter().collect();
        spans.sort_by_key(|m| m.start);
        let mut prev_end = 0;
        for m in spans {
            if m.start >= m.end || m.end > self.text.len() {
                return Err(Error::Invalid(format!(
                    "mention span {}..{} out of bounds for {} tokens",
                    m.start,
                    m.end,
                    self.text.len()
                )));
            }
            if m.start < prev_end {
                return Err(Error::Invalid(format!(
                    "overlapping mention spans ending at {prev_end} and starting at {}",
                    m.start
                )));
            }
            prev_end = m.end;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub dialog_id: String,
    pub turns: Vec<Turn>,
}

/// Collapses every mention span to one `[PH]`; ids come out in text order.
pub fn substitute_placeholders(turn: &Turn) -> Result<(Vec<String>, Vec<ItemId>)> {
    turn.validate()?;
    let mut spans = turn.mentions.clone();
    spans.sort_by_key(|m| m.start);
    let mut out = Vec::with_capacity(turn.text.len());
    let mut ids = Vec::with_capacity(spans.len());
    let mut i = 0;
    let mut next = spans.iter().peekable();
    while i < turn.text.len() {
        match next.peek() {
            Some(m) if m.start == i => {
                out.push(PH.to_string());
                ids.push(m.item_id);
                i = m.end;
                next.next();
            }
            _ => {
                out.push(turn.text[i].clone());
                i += 1;
            }
        }
    }
    Ok((out, ids))
}

/// Inverse of [`substitute_placeholders`] given each item's title tokens.
pub fn fill_placeholders<F>(tokens: &[String], ids: &[ItemId], mut title: F) -> Vec<String>
where
    F: FnMut(ItemId) -> Vec<String>,
{
    let mut ids = ids.iter();
    let mut out = Vec::with_capacity(tokens.len());
    for t in tokens {
        match (t.as_str() == PH).then(|| ids.next()).flatten() {
            Some(&id) => out.extend(title(id)),
            None => out.push(t.clone()),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Entry {
    Word(usize),
    Item(ItemId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MixedSequence {
    pub entries: Vec<Entry>,
}

impl MixedSequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push_word(&mut self, id: usize) {
        self.entries.push(Entry::Word(id));
    }

    pub fn push_item(&mut self, id: ItemId) {
        self.entries.push(Entry::Item(id));
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.entries.iter().filter_map(|e| match e {
            Entry::Item(id) => Some(*id),
            Entry::Word(_) => None,
        })
    }

    pub fn count_word(&self, id: usize) -> usize {
        self.entries.iter().filter(|e| **e == Entry::Word(id)).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItePlacement {
    /// Each item entry follows its `[PH]` directly.
    Inline,
    /// A turn's item entries follow all of its words.
    Tail,
}

/// Default context budget in entries; short windows keep the latest request
/// in focus for the desk-scale decoder.
pub const DEFAULT_CONTEXT_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextOptions {
    pub max_len: usize,
    pub placement: ItePlacement,
    /// Drops mention spans entirely: neither `[PH]` nor item entries remain.
    pub strip_mentions: bool,
}

impl Default for ContextOptions {
    fn default() -> Self {
        ContextOptions {
            max_len: DEFAULT_CONTEXT_LEN,
            placement: ItePlacement::Inline,
            strip_mentions: false,
        }
    }
}

/// Entries of one turn: speaker token, words, item entries.
pub fn turn_entries(turn: &Turn, vocab: &Vocab, opts: &ContextOptions) -> Result<Vec<Entry>> {
    let (words, ids) = substitute_placeholders(turn)?;
    let ph = vocab.specials().ph;
    let mut out = Vec::with_capacity(words.len() + ids.len() + 1);
    out.push(Entry::Word(vocab.id(turn.speaker.token())));
    let mut ids = ids.into_iter();
    let mut tail = Vec::new();
    for w in &words {
        let id = vocab.id(w);
        if id == ph {
            let item = ids.next().expect("one id per placeholder");
            if opts.strip_mentions {
                continue;
            }
            out.push(Entry::Word(ph));
            match opts.placement {
                ItePlacement::Inline => out.push(Entry::Item(item)),
                ItePlacement::Tail => tail.push(Entry::Item(item)),
            }
        } else {
            out.push(Entry::Word(id));
        }
    }
    out.extend(tail);
    Ok(out)
}

/// Builds the mixed sequence of a dialog prefix, oldest turns dropped first
/// when it exceeds `opts.max_len`.
pub fn build_context(prefix: &[Turn], vocab: &Vocab, opts: &ContextOptions) -> Result<MixedSequence> {
    let mut per_turn = prefix
        .iter()
        .map(|t| turn_entries(t, vocab, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut total: usize = per_turn.iter().map(Vec::len).sum();
    let mut dropped = 0;
    while total > opts.max_len && per_turn.len() > 1 {
        total -= per_turn.remove(0).len();
        dropped += 1;
    }
    if dropped > 0 {
        log::debug!("context truncated: dropped {dropped} oldest turn(s)");
    }
    let mut entries: Vec<Entry> = per_turn.into_iter().flatten().collect();
    if entries.len() > opts.max_len {
        log::debug!("context truncated inside newest turn to {} entries", opts.max_len);
        entries.drain(..entries.len() - opts.max_len);
    }
    Ok(MixedSequence { entries })
}

/// Appends one `[REC]` word; the decoder state at this position is `D_R`.
pub fn append_rec_token(mut ctx: MixedSequence, vocab: &Vocab) -> MixedSequence {
    ctx.push_word(vocab.id(REC));
    ctx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn vocab() -> Vocab {
        Vocab::build([
            "i", "loved", "ant", "man", "and", "liked", "up", "more", "?", "what", "else",
        ])
    }

    fn loved_antman() -> Turn {
        Turn {
            speaker: Speaker::Seeker,
            text: tokenize("i loved ant man"),
            mentions: vec![Mention {
                start: 2,
                end: 4,
                item_id: 7,
            }],
            rec_ids: vec![],
        }
    }

    #[test]
    fn substitution_collapses_spans() {
        let (w, ids) = substitute_placeholders(&loved_antman()).unwrap();
        assert_eq!(w, ["i", "loved", PH]);
        assert_eq!(ids, [7]);

        let plain = Turn::new(Speaker::Seeker, tokenize("what else ?"));
        let (w, ids) = substitute_placeholders(&plain).unwrap();
        assert_eq!(w, plain.text);
        assert!(ids.is_empty());

        let mut two = Turn::new(Speaker::Seeker, tokenize("ant man and up"));
        two.mentions = vec![
            Mention {
                start: 3,
                end: 4,
                item_id: 2,
            },
            Mention {
                start: 0,
                end: 2,
                item_id: 7,
            },
        ];
        let (w, ids) = substitute_placeholders(&two).unwrap();
        assert_eq!(w, [PH, "and", PH]);
        assert_eq!(ids, [7, 2]);
    }

    #[test]
    fn overlapping_spans_rejected() {
        let mut t = loved_antman();
        t.mentions.push(Mention {
            start: 3,
            end: 4,
            item_id: 8,
        });
        assert!(substitute_placeholders(&t).is_err());
    }

    #[test]
    fn fill_round_trips_surface_text() {
        let t = loved_antman();
        let (w, ids) = substitute_placeholders(&t).unwrap();
        let back = fill_placeholders(&w, &ids, |_| tokenize("ant man"));
        assert_eq!(back, t.text);
    }

    #[test]
    fn item_entry_follows_placeholder() {
        let v = vocab();
        let ctx = build_context(&[loved_antman()], &v, &ContextOptions::default()).unwrap();
        let ph = v.specials().ph;
        assert_eq!(
            ctx.entries,
            [
                Entry::Word(v.specials().seeker),
                Entry::Word(v.id("i")),
                Entry::Word(v.id("loved")),
                Entry::Word(ph),
                Entry::Item(7),
            ]
        );
        assert_eq!(ctx.count_word(ph), ctx.items().count());
    }

    #[test]
    fn tail_placement_and_stripping() {
        let v = vocab();
        let mut t = Turn::new(Speaker::Seeker, tokenize("ant man and up more"));
        t.mentions = vec![
            Mention {
                start: 0,
                end: 2,
                item_id: 7,
            },
            Mention {
                start: 3,
                end: 4,
                item_id: 2,
            },
        ];
        let opts = ContextOptions {
            placement: ItePlacement::Tail,
            ..Default::default()
        };
        let ctx = build_context(std::slice::from_ref(&t), &v, &opts).unwrap();
        let n = ctx.len();
        assert_eq!(&ctx.entries[n - 2..], &[Entry::Item(7), Entry::Item(2)]);
        assert_eq!(ctx.entries[n - 3], Entry::Word(v.id("more")));

        let opts = ContextOptions {
            strip_mentions: true,
            ..Default::default()
        };
        let ctx = build_context(&[t], &v, &opts).unwrap();
        assert_eq!(ctx.items().count(), 0);
        assert_eq!(ctx.count_word(v.specials().ph), 0);
        assert_eq!(ctx.len(), 3);
    }

    #[test]
    fn overflow_drops_oldest_turn() {
        let v = vocab();
        let turns = vec![
            Turn::new(Speaker::Seeker, tokenize("i liked up")),
            Turn::new(Speaker::Recommender, tokenize("what else ?")),
            loved_antman(),
        ];
        // 4 + 4 + 5 entries; a budget of 10 keeps the two newest turns
        let opts = ContextOptions {
            max_len: 10,
            ..Default::default()
        };
        let ctx = build_context(&turns, &v, &opts).unwrap();
        let full_tail = build_context(&turns[1..], &v, &ContextOptions::default()).unwrap();
        assert_eq!(ctx, full_tail);
        let newest = build_context(&turns[2..], &v, &ContextOptions::default()).unwrap();
        assert_eq!(&ctx.entries[ctx.len() - newest.len()..], &newest.entries[..]);
    }

    #[test]
    fn rec_token_appended_once_per_call() {
        let v = vocab();
        let ctx = build_context(&[loved_antman()], &v, &ContextOptions::default()).unwrap();
        let n = ctx.len();
        let once = append_rec_token(ctx, &v);
        assert_eq!(once.len(), n + 1);
        assert_eq!(once.entries[n], Entry::Word(v.specials().rec));
        let twice = append_rec_token(once, &v);
        assert_eq!(twice.count_word(v.specials().rec), 2);
    }
}
