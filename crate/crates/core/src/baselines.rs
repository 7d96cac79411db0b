//! Classical query formulation: whole field, single-feature term ranking
//! and random term selection.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Message;
use crate::error::{Error, Result};
use crate::features::CollectionStats;
use crate::text::unique_in_order;
use crate::util::{derive_seed, rng};

/// A formulated query: unique terms in selection order.
pub type Query = Vec<String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Subject,
    Body,
    Both,
}

impl Field {
    pub const ALL: [Field; 3] = [Field::Subject, Field::Body, Field::Both];

    pub fn tokens(self, m: &Message) -> Vec<String> {
        match self {
            Field::Subject => m.subject_tokens.clone(),
            Field::Body => m.body_tokens.clone(),
            Field::Both => m.tokens().cloned().collect(),
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Field::Subject => "subject",
            Field::Body => "body",
            Field::Both => "subject+body",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermScorer {
    Tf,
    Tfidf,
    Logtfidf,
    Re,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum FormulationConfig {
    Full { field: Field },
    Tf { field: Field, k: usize },
    Tfidf { field: Field, k: usize },
    Logtfidf { field: Field, k: usize },
    Re { field: Field, k: usize, lambda: f64 },
    RandomK { field: Field, k: usize, seed: u64 },
    /// `p` is a percentage of the field's unique terms.
    RandomPct { field: Field, p: u32, seed: u64 },
}

pub const K_RANGE: std::ops::RangeInclusive<usize> = 1..=15;
pub const P_GRID: [u32; 5] = [10, 20, 30, 40, 50];
pub const LAMBDA_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

impl FormulationConfig {
    pub fn field(&self) -> Field {
        match *self {
            FormulationConfig::Full { field }
            | FormulationConfig::Tf { field, .. }
            | FormulationConfig::Tfidf { field, .. }
            | FormulationConfig::Logtfidf { field, .. }
            | FormulationConfig::Re { field, .. }
            | FormulationConfig::RandomK { field, .. }
            | FormulationConfig::RandomPct { field, .. } => field,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match *self {
            FormulationConfig::Tf { k, .. }
            | FormulationConfig::Tfidf { k, .. }
            | FormulationConfig::Logtfidf { k, .. }
            | FormulationConfig::RandomK { k, .. }
                if !K_RANGE.contains(&k) =>
            {
                bad(format!("k = {k} outside 1..=15"))
            }
            FormulationConfig::Re { k, lambda, .. } => {
                if !K_RANGE.contains(&k) {
                    bad(format!("k = {k} outside 1..=15"))
                } else if !(0.1..=0.9).contains(&lambda) {
                    bad(format!("lambda = {lambda} outside 0.1..=0.9"))
                } else {
                    Ok(())
                }
            }
            FormulationConfig::RandomPct { p, .. } if !(10..=50).contains(&p) => {
                bad(format!("p = {p}% outside 10..=50"))
            }
            _ => Ok(()),
        }
    }

    /// Short label used in reports, e.g. `tfidf(body,k=3)`.
    pub fn label(&self) -> String {
        match self {
            FormulationConfig::Full { field } => format!("full({field})"),
            FormulationConfig::Tf { field, k } => format!("tf({field},k={k})"),
            FormulationConfig::Tfidf { field, k } => format!("tfidf({field},k={k})"),
            FormulationConfig::Logtfidf { field, k } => format!("logtfidf({field},k={k})"),
            FormulationConfig::Re { field, k, lambda } => format!("re({field},k={k},lambda={lambda})"),
            FormulationConfig::RandomK { field, k, .. } => format!("random_k({field},k={k})"),
            FormulationConfig::RandomPct { field, p, .. } => format!("random_pct({field},p={p}%)"),
        }
    }
}

/// Every configuration on the hyperparameter grids, for all fields.
pub fn enumerate_grid(seed: u64) -> Vec<FormulationConfig> {
    let mut out = Vec::new();
    for field in Field::ALL {
        out.push(FormulationConfig::Full { field });
        for k in K_RANGE {
            out.push(FormulationConfig::Tf { field, k });
            out.push(FormulationConfig::Tfidf { field, k });
            out.push(FormulationConfig::Logtfidf { field, k });
            for lambda in LAMBDA_GRID {
                out.push(FormulationConfig::Re { field, k, lambda });
            }
            out.push(FormulationConfig::RandomK { field, k, seed });
        }
        for p in P_GRID {
            out.push(FormulationConfig::RandomPct { field, p, seed });
        }
    }
    out
}

/// Unique field terms scored by `scorer`, highest first, ties by term.
pub fn score_terms(
    message: &Message,
    scorer: TermScorer,
    field: Field,
    stats: &CollectionStats,
    lambda: f64,
) -> Result<Vec<(String, f64)>> {
    let tokens = field.tokens(message);
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &tokens {
        *tf.entry(t).or_insert(0) += 1;
    }
    let len = tokens.len() as f64;
    let mut scored = Vec::with_capacity(tf.len());
    for (t, c) in tf {
        let c = c as f64;
        let score = match scorer {
            TermScorer::Tf => c,
            _ => {
                if stats.df(t) == 0 {
                    return Err(Error::InconsistentStats(t.to_string()));
                }
                match scorer {
                    TermScorer::Tfidf => c * stats.idf(t),
                    TermScorer::Logtfidf => (1.0 + c).ln() * stats.idf(t),
                    _ => {
                        let p_c = stats.p_collection(t);
                        let p = lambda * (c / len) + (1.0 - lambda) * p_c;
                        p * (p / p_c).ln()
                    }
                }
            }
        };
        scored.push((t.to_string(), score));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scored)
}

fn top_k(scored: Vec<(String, f64)>, k: usize) -> Query {
    scored.into_iter().take(k).map(|(t, _)| t).collect()
}

/// Query for `message` under `config`. Random methods draw with a seed
/// derived from the configured seed and the message id.
pub fn formulate_baseline_query(message: &Message, config: &FormulationConfig, stats: &CollectionStats) -> Result<Query> {
    config.validate()?;
    let unique = unique_in_order(&config.field().tokens(message));
    let scored = |s: TermScorer, lambda: f64| score_terms(message, s, config.field(), stats, lambda);
    Ok(match *config {
        FormulationConfig::Full { .. } => unique,
        FormulationConfig::Tf { k, .. } => top_k(scored(TermScorer::Tf, 0.0)?, k),
        FormulationConfig::Tfidf { k, .. } => top_k(scored(TermScorer::Tfidf, 0.0)?, k),
        FormulationConfig::Logtfidf { k, .. } => top_k(scored(TermScorer::Logtfidf, 0.0)?, k),
        FormulationConfig::Re { k, lambda, .. } => top_k(scored(TermScorer::Re, lambda)?, k),
        FormulationConfig::RandomK { k, seed, .. } => sample(unique, k, seed, message.id()),
        FormulationConfig::RandomPct { p, seed, .. } => {
            let k = (unique.len() as u64 * u64::from(p)).div_ceil(100) as usize;
            sample(unique, k, seed, message.id())
        }
    })
}

fn sample(unique: Vec<String>, k: usize, seed: u64, message_id: &str) -> Query {
    let mut r = rng(derive_seed(seed, message_id));
    unique.choose_multiple(&mut r, k.min(unique.len())).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::MessageRecord;

    fn message(id: &str, subject: &str, body: &str) -> Message {
        Message::from_record(MessageRecord {
            message_id: id.into(),
            thread_id: "t".into(),
            timestamp: 0,
            from: "u".into(),
            to: vec![],
            from_name: String::new(),
            to_names: vec![],
            subject: subject.into(),
            body: body.into(),
            attachments: vec![],
        })
    }

    /// N = 10 with df(a) = 5, df(b) = 1.
    fn fixture() -> (Message, CollectionStats) {
        let mut msgs: Vec<Message> = (0..5).map(|i| message(&format!("a{i}"), "", "a")).collect();
        msgs.push(message("b", "", "b"));
        msgs.extend((0..4).map(|i| message(&format!("o{i}"), "", "other")));
        let stats = CollectionStats::from_messages(msgs.iter()).unwrap();
        (message("q", "", "a a b"), stats)
    }

    #[test]
    fn tf_counts() {
        let (_, stats) = fixture();
        let m = message("q", "", "a b a");
        let s = score_terms(&m, TermScorer::Tf, Field::Body, &stats, 0.0).unwrap();
        assert_eq!(s, vec![("a".to_string(), 2.0), ("b".to_string(), 1.0)]);
    }

    #[test]
    fn tfidf_hand_values() {
        let (m, stats) = fixture();
        let s = score_terms(&m, TermScorer::Tfidf, Field::Body, &stats, 0.0).unwrap();
        assert_eq!(s[0].0, "b");
        assert!((s[0].1 - std::f64::consts::LN_10).abs() < 1e-12);
        assert!((s[1].1 - 1.3862943611198906).abs() < 1e-12);
        let l = score_terms(&m, TermScorer::Logtfidf, Field::Body, &stats, 0.0).unwrap();
        assert!((l.iter().find(|x| x.0 == "a").unwrap().1 - 3f64.ln() * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn relative_entropy_uses_lambda() {
        let (m, stats) = fixture();
        let s = score_terms(&m, TermScorer::Re, Field::Body, &stats, 0.3).unwrap();
        let p_c: f64 = 5.0 / 10.0;
        let p = 0.3 * (2.0 / 3.0) + 0.7 * p_c;
        assert!((s.iter().find(|x| x.0 == "a").unwrap().1 - p * (p / p_c).ln()).abs() < 1e-15);
    }

    #[test]
    fn one_term_field_and_empty_field() {
        let (_, stats) = fixture();
        let m = message("q", "b", "");
        for sc in [TermScorer::Tf, TermScorer::Tfidf, TermScorer::Logtfidf, TermScorer::Re] {
            assert_eq!(score_terms(&m, sc, Field::Subject, &stats, 0.5).unwrap()[0].0, "b");
            assert!(score_terms(&m, sc, Field::Body, &stats, 0.5).unwrap().is_empty());
        }
        let q = formulate_baseline_query(&m, &FormulationConfig::Full { field: Field::Body }, &stats).unwrap();
        assert!(q.is_empty());
    }

    #[test]
    fn full_subject_keeps_stopwords_and_order() {
        let m = message("q", "Re: the initech transition document", "");
        let stats = CollectionStats::from_messages([&m]).unwrap();
        let q = formulate_baseline_query(&m, &FormulationConfig::Full { field: Field::Subject }, &stats).unwrap();
        assert_eq!(q, vec!["re", "the", "initech", "transition", "document"]);
    }

    #[test]
    fn random_variants() {
        let m = message("q", "", "a b c d a");
        let stats = CollectionStats::from_messages([&m]).unwrap();
        let big = FormulationConfig::RandomK { field: Field::Body, k: 15, seed: 3 };
        let mut all = formulate_baseline_query(&m, &big, &stats).unwrap();
        all.sort();
        assert_eq!(all, vec!["a", "b", "c", "d"]);
        let two = FormulationConfig::RandomK { field: Field::Body, k: 2, seed: 3 };
        let first = formulate_baseline_query(&m, &two, &stats).unwrap();
        assert_eq!(first, formulate_baseline_query(&m, &two, &stats).unwrap());
        assert_eq!(first.len(), 2);
        let pct = FormulationConfig::RandomPct { field: Field::Body, p: 30, seed: 1 };
        // ceil(0.3 * 4) = 2
        assert_eq!(formulate_baseline_query(&m, &pct, &stats).unwrap().len(), 2);
    }

    #[test]
    fn validation_and_grid() {
        assert!(FormulationConfig::Tf { field: Field::Body, k: 0 }.validate().is_err());
        assert!(FormulationConfig::Re { field: Field::Body, k: 3, lambda: 0.95 }.validate().is_err());
        assert!(FormulationConfig::RandomPct { field: Field::Body, p: 60, seed: 0 }.validate().is_err());
        let grid = enumerate_grid(0);
        assert_eq!(grid.len(), 3 * (1 + 15 * (4 + 9) + 5));
        assert!(grid.iter().all(|c| c.validate().is_ok()));
        let json = serde_json::to_string(&grid[5]).unwrap();
        let back: FormulationConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, grid[5]);
        assert!(serde_json::from_str::<FormulationConfig>(r#"{"method":"full","field":"body","k":3}"#).is_err());
    }

    #[test]
    fn scored_queries_are_top_k_prefix() {
        let m = message("q", "x y", "a b c a b a z");
        let stats = CollectionStats::from_messages([&m, &message("r", "", "a q")]).unwrap();
        for k in 1..=6 {
            let cfg = FormulationConfig::Tfidf { field: Field::Both, k };
            let q = formulate_baseline_query(&m, &cfg, &stats).unwrap();
            let s = score_terms(&m, TermScorer::Tfidf, Field::Both, &stats, 0.0).unwrap();
            let expect: Vec<String> = s.into_iter().take(k).map(|x| x.0).collect();
            assert_eq!(q, expect);
        }
    }
}
