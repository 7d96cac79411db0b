//! Silver-standard query synthesis.
//!
//! For a request message and a target item, a small budget of candidate
//! terms is drawn from two sources (request subject terms and recallable
//! terms), every non-empty subset is scored by the reciprocal rank it gives
//! the item, and the scored subsets are pruned towards specific queries that
//! carry no superfluous terms.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Instance, Message};
use crate::error::{Error, Result};
use crate::retrieval::{Index, RetrievalConfig};
use crate::text::{is_stopword, unique_in_order};
use crate::util::{derive_seed, rng};

/// Hard ceiling on the term budget; the powerset doubles with every term.
pub const MAX_TERM_BUDGET: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SilverConfig {
    /// Term budget `k`.
    pub k: usize,
    /// Minimum fraction of the item's messages a recallable term must occur in.
    pub min_item_fraction: f64,
    /// Recallable terms must occur in less than this fraction of the mailbox.
    pub max_df_ratio: f64,
    /// Taken from the run's retrieval settings.
    #[serde(skip)]
    pub retrieval: RetrievalConfig,
}

impl Default for SilverConfig {
    fn default() -> Self {
        SilverConfig { k: 10, min_item_fraction: 0.30, max_df_ratio: 0.01, retrieval: RetrievalConfig::default() }
    }
}

impl SilverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > MAX_TERM_BUDGET {
            return Err(Error::InvalidConfig(format!("silver term budget k must be in 1..={MAX_TERM_BUDGET}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilverQuery {
    pub terms: Vec<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilverQuerySet {
    pub instance_id: String,
    pub item_id: String,
    pub seed: u64,
    pub candidate_terms: Vec<String>,
    /// Number of subsets scored before pruning (`2^|T| - 1`).
    pub scored_candidates: usize,
    pub queries: Vec<SilverQuery>,
}

impl SilverQuerySet {
    pub fn best_score(&self) -> f64 {
        self.queries.iter().map(|q| q.score).fold(0.0, f64::max)
    }
}

/// Request tokens that occur in at least `min_item_fraction` of the mailbox
/// messages carrying `item` before `t_prime`, and in less than
/// `max_df_ratio` of all mailbox messages before `t_prime`.
pub fn recallable_terms(
    item: &str,
    index: &Index,
    t_prime: i64,
    request: &Message,
    cfg: &SilverConfig,
) -> BTreeSet<String> {
    let recallable: Vec<&str> = index
        .docs()
        .iter()
        .filter(|d| d.timestamp < t_prime && d.items.iter().any(|i| i == item))
        .map(|d| d.message_id.as_str())
        .collect();
    if recallable.is_empty() {
        return BTreeSet::new();
    }
    let visible = index.visible_count(t_prime) as f64;
    let recallable_set: BTreeSet<&str> = recallable.iter().copied().collect();

    unique_in_order(request.tokens())
        .into_iter()
        .filter(|t| {
            let Some(entry) = index.term(t) else { return false };
            let in_item_msgs = entry
                .postings
                .iter()
                .filter(|(d, _)| recallable_set.contains(index.docs()[*d as usize].message_id.as_str()))
                .count();
            let frac = in_item_msgs as f64 / recallable.len() as f64;
            let df_ratio = f64::from(index.df_before(t, t_prime)) / visible;
            frac >= cfg.min_item_fraction && df_ratio < cfg.max_df_ratio
        })
        .collect()
}

/// Stopwords, tokens with a digit or punctuation, and names of the request's
/// sender or recipients.
pub fn is_unwanted(token: &str, request: &Message) -> bool {
    is_unwanted_with_names(token, &request.name_tokens())
}

fn is_unwanted_with_names(token: &str, names: &BTreeSet<String>) -> bool {
    is_stopword(token)
        || token.chars().any(|c| c.is_numeric())
        || token.chars().any(|c| !c.is_alphanumeric())
        || names.contains(&token.to_lowercase())
}

/// Pick up to `k` candidate terms by repeatedly choosing a source at random
/// and taking its lowest-df term (ties lexicographic), skipping unwanted terms.
pub fn select_candidate_terms(
    request: &Message,
    item: &str,
    index: &Index,
    t_prime: i64,
    k: usize,
    seed: u64,
    cfg: &SilverConfig,
) -> Vec<String> {
    let df_order = |terms: BTreeSet<String>| -> Vec<String> {
        let mut v: Vec<(u32, String)> = terms.into_iter().map(|t| (index.df_before(&t, t_prime), t)).collect();
        v.sort();
        // reversed so that pop() yields the minimum
        v.into_iter().rev().map(|(_, t)| t).collect()
    };
    let subject: BTreeSet<String> = request.subject_tokens.iter().cloned().collect();
    let mut sources = [df_order(subject), df_order(recallable_terms(item, index, t_prime, request, cfg))];
    let names = request.name_tokens();
    let mut rng = rng(seed);
    let mut chosen: Vec<String> = Vec::new();

    while sources.iter().any(|s| !s.is_empty()) && chosen.len() < k {
        let pick = usize::from(rng.gen_bool(0.5));
        let Some(term) = sources[pick].pop() else { continue };
        sources[1 - pick].retain(|t| t != &term);
        if !is_unwanted_with_names(&term, &names) {
            chosen.push(term);
        }
    }
    chosen
}

/// Reciprocal rank of `item` for `query` in the replier's mailbox at the
/// instance's recommendation time; 0 when the item is not ranked or the
/// query matches nothing.
pub fn score_query(query: &[String], instance: &Instance, item: &str, index: &Index, cfg: &RetrievalConfig) -> f64 {
    match index.rank_items(query, instance.t_prime, cfg.message_limit, cfg.item_limit) {
        Ok(ranking) => ranking.rank_of(item).map_or(0.0, |r| 1.0 / r as f64),
        Err(_) => 0.0,
    }
}

/// Per-pair seed derived from the run seed.
pub fn pair_seed(seed: u64, instance_id: &str, item_id: &str) -> u64 {
    derive_seed(seed, &format!("silver\u{0}{instance_id}\u{0}{item_id}"))
}

pub fn synthesize_silver(
    instance: &Instance,
    item: &str,
    request: &Message,
    index: &Index,
    cfg: &SilverConfig,
    seed: u64,
) -> SilverQuerySet {
    let terms = select_candidate_terms(request, item, index, instance.t_prime, cfg.k, seed, cfg);
    let n = terms.len();
    let mut scored = Vec::with_capacity((1usize << n).saturating_sub(1));
    for mask in 1u32..(1u32 << n) {
        let q = subset_terms(&terms, mask);
        scored.push((mask, score_query(&q, instance, item, index, &cfg.retrieval)));
    }
    let queries = prune(&scored)
        .into_iter()
        .map(|(mask, score)| SilverQuery { terms: subset_terms(&terms, mask), score })
        .collect();
    SilverQuerySet {
        instance_id: instance.instance_id.clone(),
        item_id: item.to_string(),
        seed,
        candidate_terms: terms,
        scored_candidates: scored.len(),
        queries,
    }
}

pub fn subset_terms(terms: &[String], mask: u32) -> Vec<String> {
    terms.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, t)| t.clone()).collect()
}

fn is_strict_subset(a: u32, b: u32) -> bool {
    a != b && a & !b == 0
}

/// Prune scored subsets (bitmasks over the candidate terms).
///
/// Zero scores are dropped. Within a group of equal scores, when the strict
/// subsets of some member `U` that share its score jointly cover `U`, those
/// subsets are dropped in favour of `U`. Afterwards every query that is a
/// strict superset of a surviving query with an equal or higher score is
/// dropped. Output is sorted by descending score, then mask.
pub fn prune(scored: &[(u32, f64)]) -> Vec<(u32, f64)> {
    let positive: Vec<(u32, f64)> = scored.iter().copied().filter(|&(_, s)| s > 0.0).collect();

    let mut groups: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
    for &(mask, s) in &positive {
        groups.entry(s.to_bits()).or_default().push(mask);
    }
    let mut covered: BTreeSet<u32> = BTreeSet::new();
    for members in groups.values() {
        for &u in members {
            let subs: Vec<u32> = members.iter().copied().filter(|&q| is_strict_subset(q, u)).collect();
            if !subs.is_empty() && subs.iter().fold(0, |acc, q| acc | q) == u {
                covered.extend(subs);
            }
        }
    }
    let survivors: Vec<(u32, f64)> = positive.into_iter().filter(|(m, _)| !covered.contains(m)).collect();

    let mut kept: Vec<(u32, f64)> = survivors
        .iter()
        .copied()
        .filter(|&(q, s)| !survivors.iter().any(|&(p, ps)| is_strict_subset(p, q) && ps >= s))
        .collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    kept
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SilverStats {
    pub pairs: usize,
    pub empty_candidates: usize,
    pub no_positive_query: usize,
    pub scored_candidates: usize,
}

/// Synthesize one query set per `(instance, relevant item)` pair, in instance order.
pub fn synthesize_all(
    corpus: &Corpus,
    instances: &[Instance],
    indexes: &BTreeMap<String, Index>,
    cfg: &SilverConfig,
    seed: u64,
) -> Result<(Vec<SilverQuerySet>, SilverStats)> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut stats = SilverStats::default();
    for inst in instances {
        let request = corpus.get(&inst.request)?;
        let index = indexes
            .get(&inst.replier)
            .ok_or_else(|| Error::InvalidInput(format!("no index for mailbox `{}`", inst.replier)))?;
        for item in &inst.relevant_items {
            let set = synthesize_silver(inst, item, request, index, cfg, pair_seed(seed, &inst.instance_id, item));
            stats.pairs += 1;
            stats.scored_candidates += set.scored_candidates;
            if set.candidate_terms.is_empty() {
                stats.empty_candidates += 1;
            } else if set.queries.is_empty() {
                stats.no_positive_query += 1;
            }
            out.push(set);
        }
    }
    Ok((out, stats))
}

/// Mean over pairs of the best retained query score.
pub fn mean_best_score(sets: &[SilverQuerySet]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    sets.iter().map(SilverQuerySet::best_score).sum::<f64>() / sets.len() as f64
}

pub fn write_silver<W: Write>(sets: &[SilverQuerySet], mut w: W) -> Result<()> {
    for s in sets {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_silver<R: BufRead>(r: R) -> Result<Vec<SilverQuerySet>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Queries grouped by instance id, for training.
pub fn by_instance(sets: &[SilverQuerySet]) -> HashMap<&str, Vec<&SilverQuerySet>> {
    let mut out: HashMap<&str, Vec<&SilverQuerySet>> = HashMap::new();
    for s in sets {
        out.entry(s.instance_id.as_str()).or_default().push(s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AttachmentDescriptor, MessageRecord};

    fn record(id: &str, thread: &str, ts: i64, subject: &str, body: &str, items: &[&str]) -> MessageRecord {
        MessageRecord {
            message_id: id.into(),
            thread_id: thread.into(),
            timestamp: ts,
            from: "anand".into(),
            to: vec!["u".into()],
            from_name: "Anand Rao".into(),
            to_names: vec!["Uma".into()],
            subject: subject.into(),
            body: body.into(),
            attachments: items
                .iter()
                .map(|i| AttachmentDescriptor { item_id: i.to_string(), filename: String::new() })
                .collect(),
        }
    }

    fn request(subject: &str, body: &str) -> Message {
        Message::from_record(record("req", "t", 100, subject, body, &[]))
    }

    #[test]
    fn unwanted_predicate() {
        let req = request("hello", "");
        assert!(is_unwanted("the", &req));
        assert!(is_unwanted("q3", &req));
        assert!(is_unwanted("anand", &req));
        assert!(is_unwanted("v1.2", &req));
        assert!(!is_unwanted("transition", &req));
    }

    fn masks(words: &[&str], all: &[&str]) -> u32 {
        words.iter().map(|w| 1u32 << all.iter().position(|a| a == w).unwrap()).fold(0, |a, b| a | b)
    }

    #[test]
    fn union_of_equal_subsets_is_kept() {
        let all = ["barack", "obama", "family"];
        let scored = vec![
            (masks(&["barack", "obama"], &all), 0.5),
            (masks(&["obama", "family"], &all), 0.5),
            (masks(&["barack", "obama", "family"], &all), 0.5),
        ];
        assert_eq!(prune(&scored), vec![(masks(&all, &all), 0.5)]);
    }

    #[test]
    fn superfluous_superset_is_dropped() {
        let all = ["barack", "obama", "president"];
        let scored = vec![(masks(&["barack", "obama"], &all), 1.0), (masks(&all, &all), 1.0)];
        assert_eq!(prune(&scored), vec![(masks(&["barack", "obama"], &all), 1.0)]);
    }

    #[test]
    fn worse_superset_dropped_better_superset_kept() {
        let scored = vec![(0b01, 0.5), (0b11, 0.25), (0b10, 0.2), (0b110, 1.0)];
        let kept = prune(&scored);
        assert!(kept.contains(&(0b110, 1.0)));
        assert!(kept.contains(&(0b01, 0.5)));
        assert!(!kept.iter().any(|&(m, _)| m == 0b11));
    }

    #[test]
    fn zero_scores_dropped() {
        assert!(prune(&[(1, 0.0), (2, 0.0)]).is_empty());
    }

    /// Corpus where the replier `u` received item `e` in a thread about "initech".
    fn fixture() -> (Corpus, Instance) {
        let mut recs = vec![
            record("o1", "origin", 10, "initech transition", "initech transition plan attached", &["e"]),
            record("o2", "other", 20, "lunch", "lunch menu attached", &["menu"]),
        ];
        for i in 0..8 {
            recs.push(record(&format!("n{i}"), &format!("noise{i}"), 30 + i, "status", "weekly status update", &[]));
        }
        recs.push(record("req", "t", 100, "the initech doc", "can you send the initech transition doc", &[]));
        let mut reply = record("rep", "t", 110, "re: the initech doc", "here", &["e"]);
        reply.from = "u".into();
        reply.to = vec!["anand".into()];
        recs.push(reply);
        let corpus = Corpus::from_records(recs).unwrap();
        let inst = Instance {
            instance_id: "rep".into(),
            thread_id: "t".into(),
            request: "req".into(),
            reply: "rep".into(),
            replier: "u".into(),
            t_prime: 110,
            relevant_items: ["e".to_string()].into(),
        };
        (corpus, inst)
    }

    #[test]
    fn recallable_thresholds() {
        let (corpus, inst) = fixture();
        let index = Index::build(&corpus, "u").unwrap();
        let req = corpus.get("req").unwrap();
        let loose = SilverConfig { max_df_ratio: 0.5, ..SilverConfig::default() };
        let terms = recallable_terms("e", &index, inst.t_prime, req, &loose);
        assert!(terms.contains("initech"));
        assert!(terms.contains("transition"));
        // "plan" is in the item message but not in the request
        assert!(!terms.contains("plan"));
        // 11 visible messages: df ratio 2/11 fails the default 1% bound
        assert!(recallable_terms("e", &index, inst.t_prime, req, &SilverConfig::default()).is_empty());
    }

    #[test]
    fn single_source_and_unwanted_filtering() {
        let (corpus, inst) = fixture();
        let index = Index::build(&corpus, "u").unwrap();
        let req = corpus.get("req").unwrap();
        let cfg = SilverConfig::default();
        // subject "the initech doc": "the" is a stopword, recallable source is empty
        let t = select_candidate_terms(req, "e", &index, inst.t_prime, 10, 7, &cfg);
        let mut sorted = t.clone();
        sorted.sort();
        assert_eq!(sorted, vec!["doc", "initech"]);
        // lowest df first: "doc" occurs only in the request, "initech" in two messages
        assert_eq!(t, vec!["doc", "initech"]);
        assert_eq!(select_candidate_terms(req, "e", &index, inst.t_prime, 1, 7, &cfg).len(), 1);
    }

    #[test]
    fn term_in_both_sources_selected_once() {
        let (corpus, inst) = fixture();
        let index = Index::build(&corpus, "u").unwrap();
        let mut rec = corpus.get("req").unwrap().record.clone();
        rec.subject = "initech".into();
        let req = Message::from_record(rec);
        let loose = SilverConfig { max_df_ratio: 0.5, ..SilverConfig::default() };
        for seed in 0..20 {
            let t = select_candidate_terms(&req, "e", &index, inst.t_prime, 10, seed, &loose);
            assert_eq!(t.iter().filter(|x| *x == "initech").count(), 1);
        }
    }

    #[test]
    fn scoring_and_self_certification() {
        let (corpus, inst) = fixture();
        let index = Index::build(&corpus, "u").unwrap();
        let req = corpus.get("req").unwrap();
        let cfg = SilverConfig::default();
        let set = synthesize_silver(&inst, "e", req, &index, &cfg, 3);
        assert_eq!(set.scored_candidates, (1 << set.candidate_terms.len()) - 1);
        assert!(!set.queries.is_empty());
        for q in &set.queries {
            assert_eq!(score_query(&q.terms, &inst, "e", &index, &cfg.retrieval), q.score);
        }
        assert_eq!(score_query(&["initech".into()], &inst, "e", &index, &cfg.retrieval), 1.0);
        assert_eq!(score_query(&["zzz".into()], &inst, "e", &index, &cfg.retrieval), 0.0);
        assert_eq!(set, synthesize_silver(&inst, "e", req, &index, &cfg, 3));
    }

    #[test]
    fn singleton_candidate_set() {
        let scored = vec![(1u32, 0.5)];
        assert_eq!(prune(&scored), vec![(1, 0.5)]);
    }

    proptest::proptest! {
        #[test]
        fn pruned_sets_have_no_dominated_supersets(
            scores in proptest::collection::vec(0usize..5, 15)
        ) {
            // 4 candidate terms, masks 1..=15, scores from a small set of reciprocal ranks
            let scored: Vec<(u32, f64)> = scores.iter().enumerate()
                .map(|(i, &r)| ((i + 1) as u32, if r == 0 { 0.0 } else { 1.0 / r as f64 }))
                .collect();
            let kept = prune(&scored);
            for &(q, s) in &kept {
                proptest::prop_assert!(s > 0.0);
                for &(p, ps) in &kept {
                    proptest::prop_assert!(!(is_strict_subset(p, q) && ps >= s));
                }
            }
        }
    }
}
