//! Item metadata records and the encoder that condenses them into one
//! embedding of decoder width.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::text::{tokenize, SEP};
use crate::transformer::{AttentionMask, Dropout, TransformerConfig, TransformerStack};

pub type ItemId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ItemMetadata {
    pub id: ItemId,
    pub title: String,
    #[serde(default)]
    pub genre: Vec<String>,
    #[serde(default)]
    pub actors: Vec<String>,
    #[serde(default)]
    pub directors: Vec<String>,
    #[serde(default)]
    pub plot: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Title,
    Genre,
    Actors,
    Directors,
    Plot,
}

impl Field {
    pub const ALL: [Field; 5] = [Field::Title, Field::Genre, Field::Actors, Field::Directors, Field::Plot];

    pub fn name(self) -> &'static str {
        match self {
            Field::Title => "title",
            Field::Genre => "genre",
            Field::Actors => "actors",
            Field::Directors => "directors",
            Field::Plot => "plot",
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Field {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Field::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metadata field {s:?}")))
    }
}

/// Set of metadata fields that take part in serialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct FieldSet(Vec<Field>);

impl FieldSet {
    pub fn all() -> Self {
        FieldSet(Field::ALL.to_vec())
    }

    pub fn new(fields: impl IntoIterator<Item = Field>) -> Self {
        let mut v: Vec<Field> = fields.into_iter().collect();
        v.sort();
        v.dedup();
        FieldSet(v)
    }

    pub fn without(&self, drop: &[Field]) -> Self {
        FieldSet(self.0.iter().copied().filter(|f| !drop.contains(f)).collect())
    }

    pub fn contains(&self, f: Field) -> bool {
        self.0.contains(&f)
    }

    pub fn fields(&self) -> &[Field] {
        &self.0
    }
}

impl Default for FieldSet {
    fn default() -> Self {
        Self::all()
    }
}

impl TryFrom<Vec<String>> for FieldSet {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        let fields = v.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?;
        Ok(FieldSet::new(fields))
    }
}

impl From<FieldSet> for Vec<String> {
    fn from(f: FieldSet) -> Self {
        f.0.iter().map(|x| x.name().to_string()).collect()
    }
}

/// Tokens of the included fields in fixed order, joined by `[SEP]`.
///
/// List-valued fields join their elements with spaces inside one segment.
pub fn serialize_metadata(meta: &ItemMetadata, filter: &FieldSet) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut first = true;
    for f in Field::ALL.into_iter().filter(|f| filter.contains(*f)) {
        if !first {
            out.push(SEP.to_string());
        }
        first = false;
        let text = match f {
            Field::Title => meta.title.clone(),
            Field::Genre => meta.genre.join(" "),
            Field::Actors => meta.actors.join(" "),
            Field::Directors => meta.directors.join(" "),
            Field::Plot => meta.plot.clone(),
        };
        out.extend(tokenize(&text));
    }
    if out.iter().all(|t| t == SEP) {
        return Err(Error::Invalid(format!(
            "item {} serializes to no content under fields {:?}",
            meta.id,
            filter.fields()
        )));
    }
    Ok(out)
}

/// Which of the two encoder instances produced an embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInstance {
    Context,
    Candidate,
}

impl EncoderInstance {
    pub fn prefix(self) -> &'static str {
        match self {
            EncoderInstance::Context => "ctx_enc",
            EncoderInstance::Candidate => "cand_enc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbedding {
    pub item_id: ItemId,
    pub vector: Vec<f64>,
    pub provenance: EncoderInstance,
}

/// Bidirectional stack, mean pooling and one affine output layer.
#[derive(Debug, Clone)]
pub struct ItemEncoder {
    pub instance: EncoderInstance,
    stack: TransformerStack,
    ff_w: ParamId,
    ff_b: ParamId,
}

impl ItemEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        instance: EncoderInstance,
        cfg: TransformerConfig,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let p = instance.prefix();
        let stack = TransformerStack::new(store, p, cfg, init_std, rng)?;
        let d = cfg.d_model;
        let ff_w = store.add_normal(format!("{p}.ff.w"), &[d, d], init_std, rng)?;
        let ff_b = store.add_constant(format!("{p}.ff.b"), &[1, d], 0.0)?;
        Ok(ItemEncoder {
            instance,
            stack,
            ff_w,
            ff_b,
        })
    }

    /// Rebinds to stored parameters; `params_of` names the instance whose
    /// parameters are used, which differs from `instance` for tied encoders.
    pub fn bind(
        store: &ParamStore,
        instance: EncoderInstance,
        params_of: EncoderInstance,
        cfg: TransformerConfig,
    ) -> Result<Self> {
        let p = params_of.prefix();
        let get = |n: String| {
            store
                .id(&n)
                .ok_or_else(|| Error::Format(format!("missing parameter {n}")))
        };
        Ok(ItemEncoder {
            instance,
            stack: TransformerStack::bind(store, p, cfg)?,
            ff_w: get(format!("{p}.ff.w"))?,
            ff_b: get(format!("{p}.ff.b"))?,
        })
    }

    pub fn with_instance(mut self, instance: EncoderInstance) -> Self {
        self.instance = instance;
        self
    }

    pub fn config(&self) -> &TransformerConfig {
        self.stack.config()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.stack.param_ids();
        ids.extend([self.ff_w, self.ff_b]);
        ids
    }

    /// Encodes a batch of serialized items into an `n×d` matrix.
    ///
    /// All items run through one packed pass: a block-diagonal mask keeps
    /// them independent and positions restart at zero for each item.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        wte: Var,
        items: &[Vec<usize>],
        dropout: Option<Dropout<'_, R>>,
    ) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::Invalid("no items to encode".into()));
        }
        let lens: Vec<usize> = items.iter().map(Vec::len).collect();
        if lens.contains(&0) {
            return Err(Error::Invalid("empty item token sequence".into()));
        }
        let total: usize = lens.iter().sum();
        let ids: Vec<usize> = items.iter().flatten().copied().collect();
        let positions: Vec<usize> = lens.iter().flat_map(|&l| 0..l).collect();
        let tokens = g.gather_rows(wte, &ids)?;
        let mask = AttentionMask::block_diagonal(&lens);
        let h = self.stack.forward(g, tokens, &positions, &mask, dropout)?;
        let mut pool = vec![0.0; items.len() * total];
        let mut start = 0;
        for (i, &l) in lens.iter().enumerate() {
            pool[i * total + start..i * total + start + l].fill(1.0 / l as f64);
            start += l;
        }
        let pool = g.constant(Tensor::new(vec![items.len(), total], pool)?);
        let pooled = g.matmul(pool, h)?;
        let (w, b) = (g.param(self.ff_w), g.param(self.ff_b));
        let out = g.matmul(pooled, w)?;
        g.add_row(out, b)
    }
}

/// Rejects databases with repeated item ids.
pub fn check_unique_ids(db: &[ItemMetadata]) -> Result<()> {
    let mut seen = HashSet::with_capacity(db.len());
    for m in db {
        if !seen.insert(m.id) {
            return Err(Error::Data(format!("duplicate item id {}", m.id)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    type NoDrop<'a> = Option<Dropout<'a, ChaCha8Rng>>;

    fn antman() -> ItemMetadata {
        ItemMetadata {
            id: 1,
            title: "antman".into(),
            genre: vec!["action".into()],
            actors: vec![],
            directors: vec![],
            plot: String::new(),
        }
    }

    #[test]
    fn serialization_keeps_empty_segments() {
        let t = serialize_metadata(&antman(), &FieldSet::all()).unwrap();
        assert_eq!(t, ["antman", SEP, "action", SEP, SEP, SEP]);
        assert_eq!(t, serialize_metadata(&antman(), &FieldSet::all()).unwrap());
    }

    #[test]
    fn filtered_fields_leave_no_tokens() {
        let mut m = antman();
        m.plot = "a tiny hero saves the day".into();
        let f = FieldSet::all().without(&[Field::Genre, Field::Plot]);
        let t = serialize_metadata(&m, &f).unwrap();
        assert!(!t.iter().any(|x| x == "action" || x == "hero"));
        assert_eq!(t, ["antman", SEP, SEP]);
    }

    #[test]
    fn empty_serialization_is_an_error() {
        let f = FieldSet::new([Field::Actors]);
        assert!(serialize_metadata(&antman(), &f).is_err());
    }

    #[test]
    fn field_set_serde() {
        let f: FieldSet = serde_json::from_str(r#"["plot","title"]"#).unwrap();
        assert_eq!(f.fields(), &[Field::Title, Field::Plot]);
        assert!(serde_json::from_str::<FieldSet>(r#"["budget"]"#).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(check_unique_ids(&[antman(), antman()]).is_err());
    }

    fn encoder() -> (ParamStore, ParamId, ItemEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let wte = store.add_normal("wte", &[20, 8], 0.5, &mut rng).unwrap();
        let cfg = TransformerConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_positions: 16,
            dropout: 0.0,
        };
        let enc = ItemEncoder::new(&mut store, EncoderInstance::Context, cfg, 0.3, &mut rng).unwrap();
        (store, wte, enc)
    }

    fn encode(store: &ParamStore, wte: ParamId, enc: &ItemEncoder, items: &[Vec<usize>]) -> Tensor {
        let mut g = Graph::new(store);
        let w = g.param(wte);
        let v = enc.forward(&mut g, w, items, NoDrop::None).unwrap();
        g.value(v).clone()
    }

    #[test]
    fn packed_batch_equals_per_item_loop() {
        let (store, wte, enc) = encoder();
        let items = vec![vec![3, 4, 5], vec![7], vec![9, 10, 11, 12]];
        let batch = encode(&store, wte, &enc, &items);
        assert_eq!(batch.shape(), &[3, 8]);
        for (i, it) in items.iter().enumerate() {
            let one = encode(&store, wte, &enc, std::slice::from_ref(it));
            for (a, b) in batch.row(i).iter().zip(one.row(0)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let again = encode(&store, wte, &enc, &[items[0].clone(), items[0].clone()]);
        assert_eq!(again.row(0), again.row(1));
    }

    #[test]
    fn pooling_is_the_mean_of_stack_outputs() {
        let (store, wte, enc) = encoder();
        let items = vec![vec![2, 6, 6, 1]];
        let got = encode(&store, wte, &enc, &items);
        let mut g = Graph::new(&store);
        let w = g.param(wte);
        let x = g.gather_rows(w, &items[0]).unwrap();
        let h = enc
            .stack
            .forward(&mut g, x, &[0, 1, 2, 3], &AttentionMask::full(4), NoDrop::None)
            .unwrap();
        let h = g.value(h).clone();
        let mean: Vec<f64> = (0..8).map(|c| (0..4).map(|r| h.row(r)[c]).sum::<f64>() / 4.0).collect();
        let fw = store.get(enc.ff_w);
        let fb = store.get(enc.ff_b);
        for j in 0..8 {
            let want = fb.data()[j] + (0..8).map(|k| mean[k] * fw.data()[k * 8 + j]).sum::<f64>();
            assert!((got.data()[j] - want).abs() < 1e-12);
        }
    }
}
