//! Per-mailbox query-likelihood retrieval and attachable-item ranking.
//!
//! Messages are scored with a Dirichlet-smoothed query-likelihood model.
//! Items are ranked as a normalized mixture over the retrieved messages whose
//! conversation context (same thread, before the recommendation time) holds
//! the item.
//!
//! Searching at a recommendation time `t'` only sees messages with a
//! timestamp strictly before `t'`, including for the collection statistics
//! (`cf`, token total, `mu`). For `t' = i64::MAX` the view is the full index.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::container;
use crate::corpus::{Corpus, Message};
use crate::error::{Error, Result};

pub const DEFAULT_MESSAGE_LIMIT: usize = 1000;
pub const DEFAULT_ITEM_LIMIT: usize = 100;

/// Recommendation time that sees the whole index.
pub const T_INFINITY: i64 = i64::MAX;

const INDEX_MAGIC: &[u8; 8] = b"ATRINDEX";
pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedMessage {
    pub message_id: String,
    pub thread_id: String,
    pub timestamp: i64,
    pub length: u32,
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEntry {
    pub cf: u64,
    pub df: u32,
    /// `(doc, tf)` sorted by doc; docs are numbered in message_id order.
    pub postings: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Index {
    owner: String,
    docs: Vec<IndexedMessage>,
    terms: BTreeMap<String, TermEntry>,
    total_tokens: u64,
    mu: f64,
    #[serde(skip)]
    doc_by_id: HashMap<String, u32>,
    #[serde(skip)]
    threads: HashMap<String, Vec<u32>>,
}

/// Collection statistics restricted to messages before a recommendation time.
#[derive(Debug, Clone, Copy, PartialEq)]
struct View {
    t_prime: i64,
    docs: usize,
    total_tokens: u64,
    mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRanking {
    pub items: Vec<(String, f64)>,
    pub limit: usize,
}

impl ItemRanking {
    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|(id, _)| id.as_str()).collect()
    }

    /// 1-based rank of an item.
    pub fn rank_of(&self, item: &str) -> Option<usize> {
        self.items.iter().position(|(id, _)| id == item).map(|p| p + 1)
    }

    pub fn empty(limit: usize) -> Self {
        ItemRanking { items: Vec::new(), limit }
    }
}

impl Index {
    /// Index one user's mailbox.
    pub fn build(corpus: &Corpus, user: &str) -> Result<Self> {
        Self::build_filtered(corpus, user, |_| true)
    }

    /// Index the messages of a mailbox accepted by `keep`.
    pub fn build_filtered<F: Fn(&Message) -> bool>(corpus: &Corpus, user: &str, keep: F) -> Result<Self> {
        let docs: Vec<(&Message, Vec<String>)> = corpus
            .mailbox_messages(user)
            .into_iter()
            .filter(|m| keep(m))
            .map(|m| (m, corpus.items_of(m.id()).iter().map(|i| i.item_id.clone()).collect()))
            .collect();
        Self::from_messages(user, docs)
    }

    pub fn from_messages(owner: &str, messages: Vec<(&Message, Vec<String>)>) -> Result<Self> {
        if messages.is_empty() {
            return Err(Error::EmptyCollection(format!("mailbox `{owner}` has no messages")));
        }
        let mut messages = messages;
        messages.sort_by(|a, b| a.0.id().cmp(b.0.id()));

        let mut terms: BTreeMap<String, TermEntry> = BTreeMap::new();
        let mut docs = Vec::with_capacity(messages.len());
        let mut total: u64 = 0;
        for (doc, (m, items)) in messages.into_iter().enumerate() {
            let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
            for t in m.tokens() {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
            for (t, tf) in counts {
                let e = terms
                    .entry(t.to_string())
                    .or_insert(TermEntry { cf: 0, df: 0, postings: Vec::new() });
                e.cf += u64::from(tf);
                e.df += 1;
                e.postings.push((doc as u32, tf));
            }
            let length = m.token_count() as u32;
            total += u64::from(length);
            docs.push(IndexedMessage {
                message_id: m.id().to_string(),
                thread_id: m.thread_id().to_string(),
                timestamp: m.timestamp(),
                length,
                items,
            });
        }
        if total == 0 {
            return Err(Error::EmptyCollection(format!("mailbox `{owner}` contains no tokens")));
        }
        let mu = total as f64 / docs.len() as f64;
        let mut index = Index {
            owner: owner.to_string(),
            docs,
            terms,
            total_tokens: total,
            mu,
            doc_by_id: HashMap::new(),
            threads: HashMap::new(),
        };
        index.rebuild_lookup();
        Ok(index)
    }

    fn rebuild_lookup(&mut self) {
        self.doc_by_id = self.docs.iter().enumerate().map(|(i, d)| (d.message_id.clone(), i as u32)).collect();
        let mut threads: HashMap<String, Vec<u32>> = HashMap::new();
        for (i, d) in self.docs.iter().enumerate() {
            threads.entry(d.thread_id.clone()).or_default().push(i as u32);
        }
        self.threads = threads;
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn docs(&self) -> &[IndexedMessage] {
        &self.docs
    }

    pub fn doc(&self, message_id: &str) -> Option<&IndexedMessage> {
        self.doc_by_id.get(message_id).map(|&d| &self.docs[d as usize])
    }

    pub fn term(&self, term: &str) -> Option<&TermEntry> {
        self.terms.get(term)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&String, &TermEntry)> {
        self.terms.iter()
    }

    pub fn cf(&self, term: &str) -> u64 {
        self.terms.get(term).map_or(0, |e| e.cf)
    }

    pub fn df(&self, term: &str) -> u32 {
        self.terms.get(term).map_or(0, |e| e.df)
    }

    /// Number of messages before `t_prime`.
    pub fn visible_count(&self, t_prime: i64) -> usize {
        self.docs.iter().filter(|d| d.timestamp < t_prime).count()
    }

    /// Document frequency over messages before `t_prime`.
    pub fn df_before(&self, term: &str, t_prime: i64) -> u32 {
        self.terms.get(term).map_or(0, |e| {
            e.postings.iter().filter(|(d, _)| self.docs[*d as usize].timestamp < t_prime).count() as u32
        })
    }

    fn cf_before(&self, term: &str, t_prime: i64) -> u64 {
        self.terms.get(term).map_or(0, |e| {
            e.postings
                .iter()
                .filter(|(d, _)| self.docs[*d as usize].timestamp < t_prime)
                .map(|&(_, tf)| u64::from(tf))
                .sum()
        })
    }

    fn view(&self, t_prime: i64) -> View {
        if t_prime == T_INFINITY {
            return View { t_prime, docs: self.docs.len(), total_tokens: self.total_tokens, mu: self.mu };
        }
        let (docs, total) = self
            .docs
            .iter()
            .filter(|d| d.timestamp < t_prime)
            .fold((0usize, 0u64), |(n, t), d| (n + 1, t + u64::from(d.length)));
        let mu = if docs == 0 { 0.0 } else { total as f64 / docs as f64 };
        View { t_prime, docs, total_tokens: total, mu }
    }

    /// Query terms that survive the cf filter, with their collection probability.
    fn answerable_terms<'q>(&self, query: &'q [String], view: &View) -> Result<Vec<(&'q str, f64)>> {
        let mut probs: HashMap<&str, f64> = HashMap::new();
        let mut out = Vec::new();
        for t in query {
            let p = *probs.entry(t.as_str()).or_insert_with(|| {
                let cf = if view.t_prime == T_INFINITY { self.cf(t) } else { self.cf_before(t, view.t_prime) };
                cf as f64 / view.total_tokens as f64
            });
            if p > 0.0 {
                out.push((t.as_str(), p));
            }
        }
        if out.is_empty() {
            return Err(Error::QueryUnanswerable);
        }
        Ok(out)
    }

    fn tf(&self, term: &str, doc: u32) -> u32 {
        self.terms.get(term).map_or(0, |e| {
            e.postings.binary_search_by_key(&doc, |&(d, _)| d).map_or(0, |i| e.postings[i].1)
        })
    }

    fn log_score_doc(&self, terms: &[(&str, f64)], doc: u32, mu: f64) -> f64 {
        let len = f64::from(self.docs[doc as usize].length);
        terms
            .iter()
            .map(|&(t, p)| ((f64::from(self.tf(t, doc)) + mu * p) / (len + mu)).ln())
            .sum()
    }

    /// Dirichlet-smoothed log query likelihood of one message under full-index statistics.
    ///
    /// Terms with zero collection frequency are dropped; repeated query terms
    /// count once per occurrence.
    pub fn qlm_log_score(&self, query: &[String], message_id: &str) -> Result<f64> {
        let doc = *self
            .doc_by_id
            .get(message_id)
            .ok_or_else(|| Error::UnknownMessage(message_id.to_string()))?;
        let view = self.view(T_INFINITY);
        let terms = self.answerable_terms(query, &view)?;
        Ok(self.log_score_doc(&terms, doc, view.mu))
    }

    /// Messages before `t_prime` ranked by log query likelihood.
    ///
    /// Returns `(message_id, weight)` where `weight = exp(score - max score)`;
    /// ties are broken by message id.
    pub fn search(&self, query: &[String], t_prime: i64, limit: usize) -> Result<Vec<(String, f64)>> {
        Ok(self
            .search_docs(query, t_prime, limit)?
            .into_iter()
            .map(|(d, p)| (self.docs[d as usize].message_id.clone(), p))
            .collect())
    }

    /// Raw log scores for every visible message, unsorted.
    pub fn log_scores(&self, query: &[String], t_prime: i64) -> Result<Vec<(String, f64)>> {
        let view = self.view(t_prime);
        if view.docs == 0 {
            return Ok(Vec::new());
        }
        let terms = self.answerable_terms(query, &view)?;
        Ok((0..self.docs.len() as u32)
            .filter(|&d| self.docs[d as usize].timestamp < t_prime)
            .map(|d| (self.docs[d as usize].message_id.clone(), self.log_score_doc(&terms, d, view.mu)))
            .collect())
    }

    fn search_docs(&self, query: &[String], t_prime: i64, limit: usize) -> Result<Vec<(u32, f64)>> {
        let view = self.view(t_prime);
        if view.docs == 0 || limit == 0 {
            return Ok(Vec::new());
        }
        let terms = self.answerable_terms(query, &view)?;
        let mut scored: Vec<(u32, f64)> = (0..self.docs.len() as u32)
            .filter(|&d| self.docs[d as usize].timestamp < t_prime)
            .map(|d| (d, self.log_score_doc(&terms, d, view.mu)))
            .collect();
        // docs are numbered in message_id order, so the doc number breaks ties
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(limit);
        let max = scored[0].1;
        Ok(scored.into_iter().map(|(d, s)| (d, (s - max).exp())).collect())
    }

    /// Items in the conversation context of each visible thread, and the
    /// number of visible messages per thread.
    fn thread_contexts(&self, t_prime: i64) -> HashMap<&str, (BTreeSet<&str>, usize)> {
        let mut out: HashMap<&str, (BTreeSet<&str>, usize)> = HashMap::new();
        for (thread, members) in &self.threads {
            let visible: Vec<&IndexedMessage> =
                members.iter().map(|&d| &self.docs[d as usize]).filter(|d| d.timestamp < t_prime).collect();
            if visible.is_empty() {
                continue;
            }
            let items = visible.iter().flat_map(|d| d.items.iter().map(String::as_str)).collect();
            out.insert(thread.as_str(), (items, visible.len()));
        }
        out
    }

    /// Rank attachable items for a query issued at `t_prime` in this mailbox.
    ///
    /// `score(e) = sum_m w(m) * [e in context(m)] / Z(e)` over the retrieved
    /// messages, where `Z(e)` counts every visible message whose context
    /// holds `e`. Numerators accumulate in retrieval order.
    pub fn rank_items(&self, query: &[String], t_prime: i64, msg_limit: usize, item_limit: usize) -> Result<ItemRanking> {
        let retrieved = self.search_docs(query, t_prime, msg_limit)?;
        Ok(self.rank_items_from(&retrieved, t_prime, item_limit))
    }

    fn rank_items_from(&self, retrieved: &[(u32, f64)], t_prime: i64, item_limit: usize) -> ItemRanking {
        let contexts = self.thread_contexts(t_prime);
        let mut numer: BTreeMap<&str, f64> = BTreeMap::new();
        for &(d, w) in retrieved {
            let thread = self.docs[d as usize].thread_id.as_str();
            if let Some((items, _)) = contexts.get(thread) {
                for &e in items {
                    *numer.entry(e).or_insert(0.0) += w;
                }
            }
        }
        let mut z: HashMap<&str, usize> = HashMap::new();
        for (items, count) in contexts.values() {
            for &e in items {
                *z.entry(e).or_insert(0) += count;
            }
        }
        let mut items: Vec<(String, f64)> = numer
            .into_iter()
            .filter_map(|(e, n)| {
                let zc = z.get(e).copied().unwrap_or(0);
                (zc > 0 && n > 0.0).then(|| (e.to_string(), n / zc as f64))
            })
            .collect();
        items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        items.truncate(item_limit);
        ItemRanking { items, limit: item_limit }
    }

    /// Every item id that appears in a message before `t_prime`.
    pub fn items_before(&self, t_prime: i64) -> BTreeSet<&str> {
        self.docs
            .iter()
            .filter(|d| d.timestamp < t_prime)
            .flat_map(|d| d.items.iter().map(String::as_str))
            .collect()
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        container::write(w, INDEX_MAGIC, INDEX_FORMAT_VERSION, self)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::to_bytes(INDEX_MAGIC, INDEX_FORMAT_VERSION, self)
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut index: Index = container::read(r, INDEX_MAGIC, INDEX_FORMAT_VERSION)?;
        index.rebuild_lookup();
        Ok(index)
    }
}

/// One index per mailbox. Mailboxes without any token are skipped.
pub fn build_mailbox_indexes(corpus: &Corpus) -> Result<BTreeMap<String, Index>> {
    build_mailbox_indexes_filtered(corpus, |_| true)
}

pub fn build_mailbox_indexes_filtered<F: Fn(&Message) -> bool>(
    corpus: &Corpus,
    keep: F,
) -> Result<BTreeMap<String, Index>> {
    let mut out = BTreeMap::new();
    for user in corpus.mailboxes().keys() {
        match Index::build_filtered(corpus, user, &keep) {
            Ok(idx) => {
                out.insert(user.clone(), idx);
            }
            Err(Error::EmptyCollection(reason)) => log::warn!("skipping mailbox: {reason}"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Retrieval settings shared by silver synthesis and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub message_limit: usize,
    pub item_limit: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { message_limit: DEFAULT_MESSAGE_LIMIT, item_limit: DEFAULT_ITEM_LIMIT }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AttachmentDescriptor, MessageRecord};

    fn msg(id: &str, thread: &str, ts: i64, body: &str, items: &[&str]) -> MessageRecord {
        MessageRecord {
            message_id: id.into(),
            thread_id: thread.into(),
            timestamp: ts,
            from: "u".into(),
            to: vec![],
            from_name: String::new(),
            to_names: vec![],
            subject: String::new(),
            body: body.into(),
            attachments: items
                .iter()
                .map(|i| AttachmentDescriptor { item_id: i.to_string(), filename: String::new() })
                .collect(),
        }
    }

    fn q(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn two_doc() -> Index {
        let c = Corpus::from_records(vec![msg("m1", "t1", 1, "a a b", &[]), msg("m2", "t2", 2, "b c", &[])]).unwrap();
        Index::build(&c, "u").unwrap()
    }

    #[test]
    fn mu_is_mean_length() {
        let c = Corpus::from_records(vec![msg("m1", "t", 1, "a b c d", &[]), msg("m2", "t", 2, "a b c d e f", &[])])
            .unwrap();
        assert_eq!(Index::build(&c, "u").unwrap().mu(), 5.0);
    }

    #[test]
    fn cf_and_df() {
        let c = Corpus::from_records(vec![msg("m1", "t", 1, "x x y", &[]), msg("m2", "t", 2, "x z", &[])]).unwrap();
        let idx = Index::build(&c, "u").unwrap();
        assert_eq!((idx.cf("x"), idx.df("x")), (3, 2));
        assert_eq!((idx.cf("nope"), idx.df("nope")), (0, 0));
        let total: u64 = idx.terms().map(|(_, e)| e.postings.iter().map(|p| u64::from(p.1)).sum::<u64>()).sum();
        assert_eq!(total, idx.total_tokens());
    }

    #[test]
    fn rebuild_is_byte_identical() {
        assert_eq!(two_doc().to_bytes().unwrap(), two_doc().to_bytes().unwrap());
    }

    #[test]
    fn empty_mailbox_is_error() {
        let c = Corpus::from_records(vec![msg("m1", "t", 1, "a", &[])]).unwrap();
        assert!(matches!(Index::build(&c, "nobody"), Err(Error::EmptyCollection(_))));
    }

    #[test]
    fn dirichlet_hand_values() {
        let idx = two_doc();
        assert_eq!(idx.mu(), 2.5);
        let s1 = idx.qlm_log_score(&q("a"), "m1").unwrap();
        let s2 = idx.qlm_log_score(&q("a"), "m2").unwrap();
        assert!((s1 - -0.6061358035703156).abs() < 1e-12);
        assert!((s2 - -1.5040773967762742).abs() < 1e-12);
        assert!(matches!(idx.qlm_log_score(&q("zzz"), "m1"), Err(Error::QueryUnanswerable)));
        // unknown terms are dropped rather than zeroing the score
        assert_eq!(idx.qlm_log_score(&q("a zzz"), "m1").unwrap(), s1);
    }

    #[test]
    fn search_weights_and_truncation() {
        let idx = two_doc();
        let r = idx.search(&q("a"), T_INFINITY, 1000).unwrap();
        assert_eq!(r[0], ("m1".to_string(), 1.0));
        assert_eq!(r[1].0, "m2");
        assert!((r[1].1 - 0.4074074074074074).abs() < 1e-12);
        assert_eq!(idx.search(&q("a"), T_INFINITY, 1).unwrap().len(), 1);
        assert!(idx.search(&q("a"), 0, 1000).unwrap().is_empty());
    }

    #[test]
    fn single_message_single_item() {
        let c = Corpus::from_records(vec![msg("m1", "t", 1, "alpha beta", &["e"])]).unwrap();
        let idx = Index::build(&c, "u").unwrap();
        let r = idx.rank_items(&q("alpha"), 10, 1000, 100).unwrap();
        assert_eq!(r.items, vec![("e".to_string(), 1.0)]);
    }

    #[test]
    fn future_items_excluded() {
        let c = Corpus::from_records(vec![
            msg("m1", "t1", 1, "alpha", &["old"]),
            msg("m2", "t2", 5, "alpha", &["new"]),
        ])
        .unwrap();
        let idx = Index::build(&c, "u").unwrap();
        let r = idx.rank_items(&q("alpha"), 5, 1000, 100).unwrap();
        assert_eq!(r.ids(), vec!["old"]);
    }

    #[test]
    fn normalization_penalizes_widespread_items() {
        // "card" sits in three threads, "spec" in one; both retrieved by every message
        let c = Corpus::from_records(vec![
            msg("m1", "t1", 1, "spec review", &["spec", "card"]),
            msg("m2", "t2", 2, "lunch", &["card"]),
            msg("m3", "t3", 3, "party", &["card"]),
        ])
        .unwrap();
        let idx = Index::build(&c, "u").unwrap();
        let r = idx.rank_items(&q("spec"), 10, 1000, 100).unwrap();
        assert_eq!(r.ids()[0], "spec");
    }

    #[test]
    fn persisted_index_round_trips() {
        let idx = two_doc();
        let bytes = idx.to_bytes().unwrap();
        let back = Index::read(bytes.as_slice()).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.search(&q("b"), T_INFINITY, 10).unwrap(), idx.search(&q("b"), T_INFINITY, 10).unwrap());
    }
}
