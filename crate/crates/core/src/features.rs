//! Term occurrence features for the neural ranker.
//!
//! Every occurrence in a message (subject tokens followed by body tokens)
//! gets a fixed-order vector of part-of-speech flags, message features and
//! collection statistics, min-max scaled per message, plus its vocabulary id
//! for the learned representation.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Message};
use crate::error::{Error, Result};
use crate::util::sha256_hex;

pub const FEATURE_COUNT: usize = 17;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "is_noun",
    "is_verb",
    "is_other",
    "is_subject",
    "is_body",
    "abs_tf",
    "rel_tf",
    "rel_pos",
    "is_oov_repr",
    "idf",
    "tf_idf",
    "abs_cf",
    "rel_cf",
    "rel_entropy",
    "scq",
    "ictf",
    "pointwise_scs",
];

/// Binary columns; these are not rescaled.
pub const FLAG_COLUMNS: [usize; 6] = [0, 1, 2, 3, 4, 8];

pub const DEFAULT_VOCAB_SIZE: usize = 60_000;
pub const PAD_ID: u32 = 0;
pub const OOV_ID: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionStats {
    pub n: usize,
    pub total_tokens: u64,
    df: BTreeMap<String, u32>,
    cf: BTreeMap<String, u64>,
}

impl CollectionStats {
    pub fn build(corpus: &Corpus) -> Result<Self> {
        Self::from_messages(corpus.messages().iter())
    }

    pub fn from_messages<'a, I: IntoIterator<Item = &'a Message>>(messages: I) -> Result<Self> {
        let mut df: BTreeMap<String, u32> = BTreeMap::new();
        let mut cf: BTreeMap<String, u64> = BTreeMap::new();
        let mut n = 0;
        let mut total = 0u64;
        for m in messages {
            n += 1;
            let mut seen = std::collections::BTreeSet::new();
            for t in m.tokens() {
                total += 1;
                *cf.entry(t.clone()).or_insert(0) += 1;
                if seen.insert(t.as_str()) {
                    *df.entry(t.clone()).or_insert(0) += 1;
                }
            }
        }
        if n == 0 || total == 0 {
            return Err(Error::EmptyCollection("no tokens to compute collection statistics".into()));
        }
        Ok(CollectionStats { n, total_tokens: total, df, cf })
    }

    pub fn df(&self, t: &str) -> u32 {
        self.df.get(t).copied().unwrap_or(0)
    }

    pub fn cf(&self, t: &str) -> u64 {
        self.cf.get(t).copied().unwrap_or(0)
    }

    pub fn p_collection(&self, t: &str) -> f64 {
        self.cf(t) as f64 / self.total_tokens as f64
    }

    pub fn idf(&self, t: &str) -> f64 {
        (self.n as f64 / f64::from(self.df(t))).ln()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&String, u64)> {
        self.cf.iter().map(|(t, &c)| (t, c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosTag {
    Noun,
    Verb,
    Other,
}

pub trait PosTagger: Send + Sync {
    /// Name and version, recorded in every artifact built with the tagger.
    fn id(&self) -> &str;
    fn tag(&self, tokens: &[String]) -> Vec<PosTag>;
}

/// Dictionary tagger over embedded noun and verb lexicons. Words listed in
/// both lexicons are tagged as nouns; unknown words as other.
#[derive(Debug, Default, Clone, Copy)]
pub struct LexiconTagger;

fn lexicon(src: &'static str) -> std::collections::HashSet<&'static str> {
    src.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).collect()
}

impl PosTagger for LexiconTagger {
    fn id(&self) -> &str {
        "lexicon-v1"
    }

    fn tag(&self, tokens: &[String]) -> Vec<PosTag> {
        static NOUNS: OnceLock<std::collections::HashSet<&'static str>> = OnceLock::new();
        static VERBS: OnceLock<std::collections::HashSet<&'static str>> = OnceLock::new();
        let nouns = NOUNS.get_or_init(|| lexicon(include_str!("../data/nouns_en.txt")));
        let verbs = VERBS.get_or_init(|| lexicon(include_str!("../data/verbs_en.txt")));
        tokens
            .iter()
            .map(|t| {
                if nouns.contains(t.as_str()) {
                    PosTag::Noun
                } else if verbs.contains(t.as_str()) {
                    PosTag::Verb
                } else {
                    PosTag::Other
                }
            })
            .collect()
    }
}

/// Tags everything as other.
#[derive(Debug, Default, Clone, Copy)]
pub struct ConstantTagger;

impl PosTagger for ConstantTagger {
    fn id(&self) -> &str {
        "constant-v1"
    }

    fn tag(&self, tokens: &[String]) -> Vec<PosTag> {
        vec![PosTag::Other; tokens.len()]
    }
}

pub fn tagger_by_id(id: &str) -> Result<Box<dyn PosTagger>> {
    match id {
        "lexicon-v1" => Ok(Box::new(LexiconTagger)),
        "constant-v1" => Ok(Box::new(ConstantTagger)),
        other => Err(Error::InvalidConfig(format!("unknown tagger `{other}`"))),
    }
}

/// Most frequent corpus terms (by collection frequency, ties lexicographic).
/// Id 0 is the padding token, id 1 the shared unknown token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    terms: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build(stats: &CollectionStats, max_size: usize) -> Self {
        let mut terms: Vec<(&String, u64)> = stats.terms().collect();
        terms.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        terms.truncate(max_size);
        Self::from_terms(terms.into_iter().map(|(t, _)| t.clone()).collect())
    }

    pub fn from_terms(terms: Vec<String>) -> Self {
        let mut v = Vocabulary { terms, lookup: HashMap::new() };
        v.rebuild();
        v
    }

    pub fn rebuild(&mut self) {
        self.lookup = self.terms.iter().enumerate().map(|(i, t)| (t.clone(), i as u32 + 2)).collect();
    }

    /// Number of embedding rows, including padding and unknown.
    pub fn size(&self) -> usize {
        self.terms.len() + 2
    }

    pub fn id(&self, term: &str) -> u32 {
        self.lookup.get(term).copied().unwrap_or(OOV_ID)
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.terms.join("\n").as_bytes())
    }
}

/// Unscaled features of the occurrence at `position` of `tokens`
/// (the first `subject_len` tokens are the subject).
pub fn compute_term_features(
    tokens: &[String],
    subject_len: usize,
    position: usize,
    tag: PosTag,
    stats: &CollectionStats,
    vocab: &Vocabulary,
) -> Result<[f64; FEATURE_COUNT]> {
    let term = &tokens[position];
    let (df, cf) = (stats.df(term), stats.cf(term));
    if df == 0 || cf == 0 {
        return Err(Error::InconsistentStats(term.clone()));
    }
    let n = tokens.len();
    let abs_tf = tokens.iter().filter(|t| *t == term).count() as f64;
    let rel_tf = abs_tf / n as f64;
    let rel_pos = if n == 1 { 0.0 } else { position as f64 / (n - 1) as f64 };
    let idf = (stats.n as f64 / f64::from(df)).ln();
    let p_c = cf as f64 / stats.total_tokens as f64;
    let p_smooth = 0.5 * rel_tf + 0.5 * p_c;
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let in_subject = position < subject_len;
    Ok([
        flag(tag == PosTag::Noun),
        flag(tag == PosTag::Verb),
        flag(tag == PosTag::Other),
        flag(in_subject),
        flag(!in_subject),
        abs_tf,
        rel_tf,
        rel_pos,
        flag(vocab.id(term) == OOV_ID),
        idf,
        abs_tf * idf,
        cf as f64,
        p_c,
        p_smooth * (p_smooth / p_c).ln(),
        (1.0 + (cf as f64).ln()) * idf,
        (stats.total_tokens as f64 / cf as f64).ln(),
        rel_tf * (rel_tf / p_c).log2(),
    ])
}

/// Min-max scale every non-flag column to `[0, 1]`; constant columns become 0.
pub fn scale_features_message_level(rows: &mut [[f64; FEATURE_COUNT]]) {
    if rows.is_empty() {
        return;
    }
    for col in 0..FEATURE_COUNT {
        if FLAG_COLUMNS.contains(&col) {
            continue;
        }
        let (lo, hi) = rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[col]), hi.max(r[col])));
        let span = hi - lo;
        for r in rows.iter_mut() {
            r[col] = if span > 0.0 { (r[col] - lo) / span } else { 0.0 };
        }
    }
}

/// Model inputs for one message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageFeatures {
    pub tokens: Vec<String>,
    pub vocab_ids: Vec<u32>,
    /// Scaled auxiliary features, one row per occurrence.
    pub aux: Vec<[f64; FEATURE_COUNT]>,
}

impl MessageFeatures {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn message_features(
    message: &Message,
    stats: &CollectionStats,
    vocab: &Vocabulary,
    tagger: &dyn PosTagger,
) -> Result<MessageFeatures> {
    let tokens: Vec<String> = message.tokens().cloned().collect();
    let tags = tagger.tag(&tokens);
    let subject_len = message.subject_tokens.len();
    let mut aux = tokens
        .iter()
        .enumerate()
        .map(|(k, _)| compute_term_features(&tokens, subject_len, k, tags[k], stats, vocab))
        .collect::<Result<Vec<_>>>()?;
    scale_features_message_level(&mut aux);
    let vocab_ids = tokens.iter().map(|t| vocab.id(t)).collect();
    Ok(MessageFeatures { tokens, vocab_ids, aux })
}

/// Feature groups that can be left out in an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureCategory {
    Message,
    Collection,
    PartOfSpeech,
    Term,
    Context,
    TermContext,
}

impl FeatureCategory {
    pub const ALL: [FeatureCategory; 6] = [
        FeatureCategory::Message,
        FeatureCategory::Collection,
        FeatureCategory::PartOfSpeech,
        FeatureCategory::Term,
        FeatureCategory::Context,
        FeatureCategory::TermContext,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FeatureCategory::Message => "M",
            FeatureCategory::Collection => "C",
            FeatureCategory::PartOfSpeech => "PoS",
            FeatureCategory::Term => "t",
            FeatureCategory::Context => "c",
            FeatureCategory::TermContext => "t+c",
        }
    }

    /// Auxiliary columns belonging to the category.
    pub fn aux_columns(self) -> &'static [usize] {
        match self {
            FeatureCategory::PartOfSpeech => &[0, 1, 2],
            FeatureCategory::Message => &[3, 4, 5, 6, 7, 8],
            FeatureCategory::Collection => &[9, 10, 11, 12, 13, 14, 15, 16],
            _ => &[],
        }
    }
}

const FEATURE_MAGIC: &[u8; 8] = b"ATRFEATS";
pub const FEATURE_FORMAT_VERSION: u32 = 1;

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(e.to_string()))
}

/// Dense little-endian feature matrix with a column-name header:
/// magic, version, tagger id, column names, row count, then per row the
/// token, its vocabulary id and the feature values.
pub fn write_feature_matrix<W: Write>(mut w: W, tagger_id: &str, f: &MessageFeatures) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_FORMAT_VERSION.to_le_bytes())?;
    write_str(&mut w, tagger_id)?;
    w.write_all(&(FEATURE_COUNT as u32).to_le_bytes())?;
    for name in FEATURE_NAMES {
        write_str(&mut w, name)?;
    }
    w.write_all(&(f.len() as u32).to_le_bytes())?;
    for ((tok, id), row) in f.tokens.iter().zip(&f.vocab_ids).zip(&f.aux) {
        write_str(&mut w, tok)?;
        w.write_all(&id.to_le_bytes())?;
        for x in row {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_feature_matrix<R: Read>(mut r: R) -> Result<(String, MessageFeatures)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format("not a feature matrix".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FEATURE_FORMAT_VERSION {
        return Err(Error::Format(format!("feature matrix version {version} unsupported")));
    }
    let tagger = read_str(&mut r)?;
    let cols = read_u32(&mut r)? as usize;
    let names = (0..cols).map(|_| read_str(&mut r)).collect::<Result<Vec<_>>>()?;
    if names != FEATURE_NAMES {
        return Err(Error::Format("feature columns differ from this build".into()));
    }
    let rows = read_u32(&mut r)? as usize;
    let mut f = MessageFeatures { tokens: Vec::with_capacity(rows), vocab_ids: Vec::with_capacity(rows), aux: Vec::with_capacity(rows) };
    for _ in 0..rows {
        f.tokens.push(read_str(&mut r)?);
        f.vocab_ids.push(read_u32(&mut r)?);
        let mut row = [0.0; FEATURE_COUNT];
        for x in row.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *x = f64::from_le_bytes(b);
        }
        f.aux.push(row);
    }
    Ok((tagger, f))
}
