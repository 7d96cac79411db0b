//! Synthetic mail corpora with planted retrieval signal.
//!
//! Every item is first shared in an origin message whose subject holds the
//! item's signature terms. Later the requester asks the owner for it in a
//! new thread: the request subject repeats the signature terms, the body is
//! full of project topic words. The owner replies with the item. Topic-heavy
//! distractor messages carrying unrelated items make whole-message queries
//! drift, while the signature terms alone retrieve the origin thread.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AttachmentDescriptor, Corpus, MessageRecord};
use crate::error::{Error, Result};
use crate::text::is_stopword;
use crate::util::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    pub vocabulary_size: usize,
    pub signature_terms: usize,
    pub projects: usize,
    pub topic_terms_per_project: usize,
    pub filler_terms: usize,
    pub distractors: usize,
    /// Topic words in each request and distractor body.
    pub body_topic_words: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            users: 8,
            items: 40,
            vocabulary_size: 500,
            signature_terms: 2,
            projects: 5,
            topic_terms_per_project: 20,
            filler_terms: 30,
            distractors: 80,
            body_topic_words: 10,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let needed = self.items * self.signature_terms + self.projects * self.topic_terms_per_project + self.filler_terms;
        if needed > self.vocabulary_size {
            return Err(Error::InvalidConfig(format!(
                "vocabulary of {} terms cannot hold {needed} signature, topic and filler terms",
                self.vocabulary_size
            )));
        }
        if self.users < 2 {
            return Err(Error::InvalidConfig("need at least two users".into()));
        }
        if self.projects == 0 || self.topic_terms_per_project == 0 || self.filler_terms == 0 {
            return Err(Error::InvalidConfig("projects, topic and filler terms must be non-empty".into()));
        }
        if self.signature_terms == 0 && self.items > 0 {
            return Err(Error::InvalidConfig("items need at least one signature term".into()));
        }
        Ok(())
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const NAMES: [&str; 12] =
    ["Alice", "Bruno", "Chiara", "Dmitri", "Elena", "Farid", "Greta", "Hiro", "Ines", "Jonas", "Kemal", "Lucia"];

fn pseudo_words(r: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w: String = (0..3)
            .flat_map(|_| [*CONSONANTS.choose(r).unwrap() as char, *VOWELS.choose(r).unwrap() as char])
            .collect();
        if !is_stopword(&w) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Lexicon {
    signatures: Vec<Vec<String>>,
    topics: Vec<Vec<String>>,
    fillers: Vec<String>,
    rare: Vec<String>,
}

fn user(i: usize) -> String {
    format!("user{i:02}@example.org")
}

fn user_name(i: usize) -> String {
    format!("{} {}", NAMES[i % NAMES.len()], NAMES[(i / NAMES.len() + 5) % NAMES.len()])
}

struct Builder {
    records: Vec<MessageRecord>,
}

impl Builder {
    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, thread: &str, ts: i64, from: usize, to: usize, subject: String, body: String, item: Option<String>) {
        let id = format!("msg-{:04}", self.records.len());
        self.records.push(MessageRecord {
            message_id: id,
            thread_id: thread.to_string(),
            timestamp: ts,
            from: user(from),
            to: vec![user(to)],
            from_name: user_name(from),
            to_names: vec![user_name(to)],
            subject,
            body,
            attachments: item
                .map(|i| vec![AttachmentDescriptor { filename: format!("{i}.pdf"), item_id: i }])
                .unwrap_or_default(),
        });
    }
}

fn pick<'a>(r: &mut ChaCha8Rng, words: &'a [String], n: usize) -> Vec<&'a str> {
    (0..n).map(|_| words.choose(r).unwrap().as_str()).collect()
}

fn topic_body(r: &mut ChaCha8Rng, lex: &Lexicon, project: usize, topic_words: usize) -> String {
    let mut words = pick(r, &lex.topics[project], topic_words);
    words.extend(pick(r, &lex.fillers, 4));
    words.extend(pick(r, &lex.rare, 1));
    words.shuffle(r);
    words.join(" ")
}

/// Message records of a synthetic corpus, deterministic per seed.
pub fn generate_records(spec: &SynthSpec, seed: u64) -> Result<Vec<MessageRecord>> {
    spec.validate()?;
    let mut r = rng(seed);
    let mut words = pseudo_words(&mut r, spec.vocabulary_size).into_iter();
    let mut take = |n: usize| -> Vec<String> { words.by_ref().take(n).collect() };
    let signatures = (0..spec.items).map(|_| take(spec.signature_terms)).collect();
    let topics = (0..spec.projects).map(|_| take(spec.topic_terms_per_project)).collect();
    let fillers = take(spec.filler_terms);
    let mut rare = take(usize::MAX);
    if rare.is_empty() {
        rare = fillers.clone();
    }
    let lex = Lexicon { signatures, topics, fillers, rare };

    let mut b = Builder { records: Vec::new() };
    let request_start = 100_000i64;
    let horizon = request_start + 1_000 * spec.items as i64;
    for i in 0..spec.items {
        let owner = i % spec.users;
        let requester = (owner + 1 + (i / spec.users) % (spec.users - 1)) % spec.users;
        let colleague = (owner + spec.users - 1) % spec.users;
        let project = i % spec.projects;
        let item = format!("item-{i:03}");
        let sig = lex.signatures[i].join(" ");

        let filler = pick(&mut r, &lex.fillers, 1)[0].to_string();
        let origin_body = pick(&mut r, &lex.fillers, 3).join(" ") + " attached";
        b.push(
            &format!("origin-{i:03}"),
            1_000 + 10 * i as i64,
            owner,
            colleague,
            format!("{sig} {filler}"),
            origin_body,
            Some(item.clone()),
        );

        let t = request_start + 1_000 * i as i64;
        let subject = format!("{sig} {}", pick(&mut r, &lex.fillers, 1)[0]);
        let body = format!("could you send me the {}", topic_body(&mut r, &lex, project, spec.body_topic_words));
        let thread = format!("request-{i:03}");
        b.push(&thread, t, requester, owner, subject.clone(), body, None);
        let reply_body = format!("here it is {}", pick(&mut r, &lex.fillers, 3).join(" "));
        b.push(&thread, t + 100, owner, requester, format!("Re: {subject}"), reply_body, Some(item));
    }
    for d in 0..spec.distractors {
        let project = r.gen_range(0..spec.projects);
        let from = r.gen_range(0..spec.users);
        let to = (from + r.gen_range(1..spec.users)) % spec.users;
        let subject = pick(&mut r, &lex.topics[project], 2).join(" ") + " " + pick(&mut r, &lex.fillers, 1)[0];
        let body = topic_body(&mut r, &lex, project, spec.body_topic_words + 2);
        let ts = r.gen_range(0..horizon);
        b.push(&format!("note-{d:03}"), ts, from, to, subject, body, Some(format!("note-item-{:03}", d / 2)));
    }
    Ok(b.records)
}

pub fn generate_synthetic_corpus(spec: &SynthSpec, seed: u64) -> Result<Corpus> {
    Corpus::from_records(generate_records(spec, seed)?)
}

/// Signature terms planted for `item_index`.
pub fn signature_terms(spec: &SynthSpec, seed: u64, item_index: usize) -> Result<Vec<String>> {
    spec.validate()?;
    let mut r = rng(seed);
    let words = pseudo_words(&mut r, spec.vocabulary_size);
    let start = item_index * spec.signature_terms;
    words
        .get(start..start + spec.signature_terms)
        .map(<[String]>::to_vec)
        .ok_or_else(|| Error::InvalidInput(format!("no item {item_index}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{mine_instances, trim_item_outliers};

    #[test]
    fn deterministic_bytes() {
        let spec = SynthSpec { items: 6, distractors: 10, ..SynthSpec::default() };
        let bytes = |seed| {
            let mut buf = Vec::new();
            generate_synthetic_corpus(&spec, seed).unwrap().write_jsonl(&mut buf).unwrap();
            buf
        };
        assert_eq!(bytes(3), bytes(3));
        assert_ne!(bytes(3), bytes(4));
    }

    #[test]
    fn zero_items_mine_nothing() {
        let spec = SynthSpec { items: 0, distractors: 10, ..SynthSpec::default() };
        let c = generate_synthetic_corpus(&spec, 1).unwrap();
        assert!(mine_instances(&c, &trim_item_outliers(&c)).instances.is_empty());
    }

    #[test]
    fn vocabulary_budget_enforced() {
        let spec = SynthSpec { items: 300, ..SynthSpec::default() };
        assert!(matches!(generate_synthetic_corpus(&spec, 1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn every_item_yields_an_instance() {
        let spec = SynthSpec::default();
        let c = generate_synthetic_corpus(&spec, 7).unwrap();
        assert_eq!(c.len(), 3 * spec.items + spec.distractors);
        let report = mine_instances(&c, &trim_item_outliers(&c));
        assert_eq!(report.instances.len(), spec.items);
        let sig = signature_terms(&spec, 7, 0).unwrap();
        let origin = c.messages().iter().find(|m| m.thread_id() == "origin-000").unwrap();
        assert_eq!(origin.subject_tokens[..2], sig[..]);
    }
}
