//! Email corpus parsing, attachable-item extraction and request/reply mining.
//!
//! A corpus is a line-delimited JSON file, one message record per line.
//! Threads are assembled by `thread_id`, ordered by `(timestamp, message_id)`,
//! and every message is delivered to the mailboxes of its sender and all
//! recipients at its own timestamp.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

/// Fraction trimmed from each end of the item frequency distribution.
pub const OUTLIER_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachmentDescriptor {
    pub item_id: String,
    #[serde(default)]
    pub filename: String,
}

/// Wire form of a message: exactly the fields of the corpus file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub message_id: String,
    pub thread_id: String,
    pub timestamp: i64,
    pub from: String,
    #[serde(default)]
    pub to: Vec<String>,
    #[serde(default)]
    pub from_name: String,
    #[serde(default)]
    pub to_names: Vec<String>,
    #[serde(default)]
    pub subject: String,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub attachments: Vec<AttachmentDescriptor>,
}

/// Lenient shape used while parsing so that missing fields can be reported by name.
#[derive(Deserialize)]
struct RawRecord {
    message_id: Option<String>,
    thread_id: Option<String>,
    timestamp: Option<i64>,
    #[serde(default)]
    from: String,
    #[serde(default)]
    to: Vec<String>,
    #[serde(default)]
    from_name: String,
    #[serde(default)]
    to_names: Vec<String>,
    #[serde(default)]
    subject: String,
    #[serde(default)]
    body: String,
    #[serde(default)]
    attachments: Vec<AttachmentDescriptor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub record: MessageRecord,
    /// Raw URLs found in the body, in order of appearance.
    pub body_urls: Vec<String>,
    pub subject_tokens: Vec<String>,
    pub body_tokens: Vec<String>,
}

impl Message {
    pub fn from_record(record: MessageRecord) -> Self {
        let body_urls = extract_urls(&record.body);
        let subject_tokens = tokenize(&record.subject);
        let body_tokens = tokenize(&record.body);
        Message { record, body_urls, subject_tokens, body_tokens }
    }

    pub fn id(&self) -> &str {
        &self.record.message_id
    }

    pub fn timestamp(&self) -> i64 {
        self.record.timestamp
    }

    pub fn thread_id(&self) -> &str {
        &self.record.thread_id
    }

    pub fn sender(&self) -> &str {
        &self.record.from
    }

    /// Subject tokens followed by body tokens.
    pub fn tokens(&self) -> impl Iterator<Item = &String> {
        self.subject_tokens.iter().chain(self.body_tokens.iter())
    }

    pub fn token_count(&self) -> usize {
        self.subject_tokens.len() + self.body_tokens.len()
    }

    /// Sender plus recipients, deduplicated, sender first.
    pub fn participants(&self) -> Vec<&str> {
        let mut out: Vec<&str> = vec![self.record.from.as_str()];
        for r in &self.record.to {
            if !out.contains(&r.as_str()) {
                out.push(r);
            }
        }
        out
    }

    /// Lowercased tokens of the sender and recipient display names.
    pub fn name_tokens(&self) -> BTreeSet<String> {
        std::iter::once(&self.record.from_name)
            .chain(self.record.to_names.iter())
            .flat_map(|n| tokenize(n))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Attachment,
    Url,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemRef {
    pub item_id: String,
    pub kind: ItemKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttachableItem {
    pub item_id: String,
    pub kind: ItemKind,
    /// `(message_id, mailbox user)` for every mailbox the item reached.
    pub associations: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MailboxEntry {
    pub message_id: String,
    pub arrival_time: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mailbox {
    pub user: String,
    pub entries: Vec<MailboxEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Instance {
    pub instance_id: String,
    pub thread_id: String,
    pub request: String,
    pub reply: String,
    pub replier: String,
    pub t_prime: i64,
    pub relevant_items: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub item_bearing_messages: usize,
    pub no_thread_history: usize,
    pub all_items_filtered: usize,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub instances: Vec<Instance>,
    pub drops: DropCounts,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    messages: Vec<Message>,
    by_id: HashMap<String, usize>,
    threads: BTreeMap<String, Vec<usize>>,
    thread_pos: Vec<usize>,
    mailboxes: BTreeMap<String, Mailbox>,
    items: Vec<Vec<ItemRef>>,
}

impl Corpus {
    /// Assemble a corpus from already-parsed records (input order is kept).
    pub fn from_records(records: Vec<MessageRecord>) -> Result<Self> {
        let mut corpus = Corpus::default();
        for record in records {
            if corpus.by_id.contains_key(&record.message_id) {
                return Err(Error::DuplicateMessage(record.message_id));
            }
            corpus.by_id.insert(record.message_id.clone(), corpus.messages.len());
            corpus.messages.push(Message::from_record(record));
        }
        corpus.finish();
        Ok(corpus)
    }

    fn finish(&mut self) {
        let msgs = &self.messages;
        let order_key = |&i: &usize| (msgs[i].timestamp(), msgs[i].id().to_string());

        let mut threads: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, m) in msgs.iter().enumerate() {
            threads.entry(m.thread_id().to_string()).or_default().push(i);
        }
        let mut thread_pos = vec![0; msgs.len()];
        for members in threads.values_mut() {
            members.sort_by_key(order_key);
            for (pos, &i) in members.iter().enumerate() {
                thread_pos[i] = pos;
            }
        }

        let mut boxes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, m) in msgs.iter().enumerate() {
            for user in m.participants() {
                if user.is_empty() {
                    continue;
                }
                boxes.entry(user.to_string()).or_default().push(i);
            }
        }
        let mailboxes = boxes
            .into_iter()
            .map(|(user, mut idx)| {
                idx.sort_by_key(order_key);
                let entries = idx
                    .into_iter()
                    .map(|i| MailboxEntry {
                        message_id: msgs[i].id().to_string(),
                        arrival_time: msgs[i].timestamp(),
                    })
                    .collect();
                (user.clone(), Mailbox { user, entries })
            })
            .collect();

        self.items = msgs.iter().map(extract_items).collect();
        self.threads = threads;
        self.thread_pos = thread_pos;
        self.mailboxes = mailboxes;
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn message(&self, id: &str) -> Option<&Message> {
        self.by_id.get(id).map(|&i| &self.messages[i])
    }

    pub fn get(&self, id: &str) -> Result<&Message> {
        self.message(id).ok_or_else(|| Error::UnknownMessage(id.to_string()))
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn thread_count(&self) -> usize {
        self.threads.len()
    }

    /// Message indices of a thread in `(timestamp, message_id)` order.
    pub fn thread(&self, thread_id: &str) -> &[usize] {
        self.threads.get(thread_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn threads(&self) -> impl Iterator<Item = (&String, &Vec<usize>)> {
        self.threads.iter()
    }

    pub fn mailboxes(&self) -> &BTreeMap<String, Mailbox> {
        &self.mailboxes
    }

    pub fn mailbox(&self, user: &str) -> Option<&Mailbox> {
        self.mailboxes.get(user)
    }

    /// Messages of one user's mailbox, in arrival order.
    pub fn mailbox_messages(&self, user: &str) -> Vec<&Message> {
        self.mailboxes
            .get(user)
            .map(|mb| mb.entries.iter().map(|e| &self.messages[self.by_id[&e.message_id]]).collect())
            .unwrap_or_default()
    }

    /// Attachable items of the message at `index`.
    pub fn items_at(&self, index: usize) -> &[ItemRef] {
        &self.items[index]
    }

    pub fn items_of(&self, id: &str) -> &[ItemRef] {
        self.by_id.get(id).map(|&i| self.items[i].as_slice()).unwrap_or(&[])
    }

    /// Every attachable item in the corpus with its mailbox associations.
    pub fn attachable_items(&self) -> BTreeMap<String, AttachableItem> {
        let mut out: BTreeMap<String, AttachableItem> = BTreeMap::new();
        for (i, m) in self.messages.iter().enumerate() {
            for item in &self.items[i] {
                let entry = out.entry(item.item_id.clone()).or_insert_with(|| AttachableItem {
                    item_id: item.item_id.clone(),
                    kind: item.kind,
                    associations: Vec::new(),
                });
                for user in m.participants() {
                    entry.associations.push((m.id().to_string(), user.to_string()));
                }
            }
        }
        out
    }

    /// Number of distinct messages containing each item.
    pub fn item_frequencies(&self) -> BTreeMap<String, usize> {
        let mut freq = BTreeMap::new();
        for items in &self.items {
            for item in items {
                *freq.entry(item.item_id.clone()).or_insert(0) += 1;
            }
        }
        freq
    }

    /// Messages of the same thread with timestamp strictly before `t_prime`,
    /// in thread order. Includes the message itself when it qualifies.
    pub fn context(&self, message_id: &str, t_prime: i64) -> Result<Vec<String>> {
        let m = self.get(message_id)?;
        Ok(self
            .thread(m.thread_id())
            .iter()
            .map(|&i| &self.messages[i])
            .filter(|c| c.timestamp() < t_prime)
            .map(|c| c.id().to_string())
            .collect())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for m in &self.messages {
            serde_json::to_writer(&mut w, &m.record)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Parse a line-delimited corpus. Blank lines are skipped; line numbers are 1-based.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: line_no, reason: e.to_string() })?;
        let missing = |field: &str| Error::Parse { line: line_no, reason: format!("missing field `{field}`") };
        let message_id = raw.message_id.filter(|s| !s.is_empty()).ok_or_else(|| missing("message_id"))?;
        let thread_id = raw.thread_id.filter(|s| !s.is_empty()).ok_or_else(|| missing("thread_id"))?;
        let timestamp = raw.timestamp.ok_or_else(|| missing("timestamp"))?;
        if let Some(first) = seen.insert(message_id.clone(), line_no) {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("duplicate message_id `{message_id}` (first seen on line {first})"),
            });
        }
        records.push(MessageRecord {
            message_id,
            thread_id,
            timestamp,
            from: raw.from,
            to: raw.to,
            from_name: raw.from_name,
            to_names: raw.to_names,
            subject: raw.subject,
            body: raw.body,
            attachments: raw.attachments,
        });
    }
    Corpus::from_records(records)
}

fn url_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"(?i)\b[a-z][a-z0-9+.\-]*://[^\s<>"'(){}\[\]]+"#).unwrap())
}

/// Raw URLs in a text body, trailing sentence punctuation removed.
pub fn extract_urls(body: &str) -> Vec<String> {
    url_pattern()
        .find_iter(body)
        .map(|m| m.as_str().trim_end_matches(['.', ',', ';', ':', '!', '?']).to_string())
        .collect()
}

/// Canonical item id for a URL, or `None` if it does not parse.
///
/// Scheme and host are lowercased, the fragment and `utm_*` parameters are
/// dropped, trailing slashes on the path are removed. Everything else is kept
/// byte for byte.
pub fn normalize_url(raw: &str) -> Option<String> {
    let parsed = url::Url::parse(raw).ok()?;
    parsed.host_str()?;

    let (scheme, rest) = raw.split_once("://")?;
    let rest = rest.split('#').next().unwrap_or_default();
    let auth_end = rest.find(['/', '?']).unwrap_or(rest.len());
    let (authority, tail) = rest.split_at(auth_end);
    let authority = match authority.rsplit_once('@') {
        Some((userinfo, host)) => format!("{userinfo}@{}", host.to_lowercase()),
        None => authority.to_lowercase(),
    };
    let (path, query) = match tail.split_once('?') {
        Some((p, q)) => (p, Some(q)),
        None => (tail, None),
    };
    let path = path.trim_end_matches('/');
    let query: Vec<&str> = query
        .map(|q| {
            q.split('&')
                .filter(|kv| !kv.is_empty())
                .filter(|kv| {
                    let key = kv.split('=').next().unwrap_or_default();
                    !key.to_ascii_lowercase().starts_with("utm_")
                })
                .collect()
        })
        .unwrap_or_default();

    let mut out = format!("{}://{}{}", scheme.to_ascii_lowercase(), authority, path);
    if !query.is_empty() {
        out.push('?');
        out.push_str(&query.join("&"));
    }
    Some(out)
}

/// One reference per distinct attachment id plus one per distinct normalized body URL.
pub fn extract_items(message: &Message) -> Vec<ItemRef> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for a in &message.record.attachments {
        if a.item_id.is_empty() {
            continue;
        }
        if seen.insert(a.item_id.clone()) {
            out.push(ItemRef { item_id: a.item_id.clone(), kind: ItemKind::Attachment });
        }
    }
    for raw in &message.body_urls {
        match normalize_url(raw) {
            Some(id) => {
                if seen.insert(id.clone()) {
                    out.push(ItemRef { item_id: id, kind: ItemKind::Url });
                }
            }
            None => log::warn!("message {}: skipping unparsable url `{raw}`", message.id()),
        }
    }
    out
}

/// Items whose message frequency lies inside the trimmed range.
///
/// With `n` items and `cut = floor(fraction * n)`, the retained range is
/// `[sorted[cut], sorted[n - 1 - cut]]` over the ascending frequency list, so
/// items tied with a boundary value are kept.
pub fn trim_item_outliers(corpus: &Corpus) -> BTreeSet<String> {
    trim_frequencies(&corpus.item_frequencies(), OUTLIER_FRACTION)
}

pub fn trim_frequencies(freq: &BTreeMap<String, usize>, fraction: f64) -> BTreeSet<String> {
    if freq.is_empty() {
        return BTreeSet::new();
    }
    let mut sorted: Vec<usize> = freq.values().copied().collect();
    sorted.sort_unstable();
    let n = sorted.len();
    let cut = ((fraction * n as f64).floor() as usize).min((n - 1) / 2);
    let (lo, hi) = (sorted[cut], sorted[n - 1 - cut]);
    freq.iter()
        .filter(|(_, &f)| f >= lo && f <= hi)
        .map(|(id, _)| id.clone())
        .collect()
}

/// Mine request/reply instances.
///
/// Each message carrying at least one retained item and having a predecessor
/// in its thread yields an instance whose relevant set keeps the items that
/// did not appear earlier in the thread and that already reached the
/// replier's mailbox strictly before the request was sent.
pub fn mine_instances(corpus: &Corpus, retained: &BTreeSet<String>) -> MiningReport {
    // earliest arrival of each item per mailbox
    let mut first_seen: HashMap<(&str, &str), i64> = HashMap::new();
    for (user, mb) in corpus.mailboxes() {
        for e in &mb.entries {
            for item in corpus.items_of(&e.message_id) {
                first_seen
                    .entry((user.as_str(), item.item_id.as_str()))
                    .and_modify(|t| *t = (*t).min(e.arrival_time))
                    .or_insert(e.arrival_time);
            }
        }
    }

    let mut drops = DropCounts::default();
    let mut instances = Vec::new();
    for (thread_id, members) in corpus.threads() {
        let mut earlier_items: BTreeSet<&str> = BTreeSet::new();
        for (pos, &i) in members.iter().enumerate() {
            let reply = &corpus.messages[i];
            let carried: Vec<&ItemRef> =
                corpus.items_at(i).iter().filter(|it| retained.contains(&it.item_id)).collect();
            if !carried.is_empty() {
                drops.item_bearing_messages += 1;
                if pos == 0 {
                    drops.no_thread_history += 1;
                } else {
                    let request = &corpus.messages[members[pos - 1]];
                    let replier = reply.sender();
                    let relevant: BTreeSet<String> = carried
                        .iter()
                        .filter(|it| !earlier_items.contains(it.item_id.as_str()))
                        .filter(|it| {
                            first_seen
                                .get(&(replier, it.item_id.as_str()))
                                .is_some_and(|&t| t < request.timestamp())
                        })
                        .map(|it| it.item_id.clone())
                        .collect();
                    if relevant.is_empty() {
                        drops.all_items_filtered += 1;
                    } else {
                        instances.push(Instance {
                            instance_id: reply.id().to_string(),
                            thread_id: thread_id.clone(),
                            request: request.id().to_string(),
                            reply: reply.id().to_string(),
                            replier: replier.to_string(),
                            t_prime: reply.timestamp(),
                            relevant_items: relevant,
                        });
                    }
                }
            }
            earlier_items.extend(corpus.items_at(i).iter().map(|it| it.item_id.as_str()));
        }
    }
    drops.instances = instances.len();
    MiningReport { instances, drops }
}

/// Invariant violations of a mined instance; empty when it is well formed.
pub fn check_instance(corpus: &Corpus, inst: &Instance) -> Vec<String> {
    let mut v = Vec::new();
    let (Some(req_i), Some(rep_i)) = (corpus.index_of(&inst.request), corpus.index_of(&inst.reply)) else {
        v.push("request or reply missing from corpus".into());
        return v;
    };
    let (req, rep) = (&corpus.messages[req_i], &corpus.messages[rep_i]);
    if req.thread_id() != rep.thread_id() {
        v.push("request and reply in different threads".into());
    }
    if corpus.thread_pos[req_i] >= corpus.thread_pos[rep_i] {
        v.push("request does not precede reply".into());
    }
    if inst.t_prime != rep.timestamp() {
        v.push("t_prime differs from reply timestamp".into());
    }
    if inst.relevant_items.is_empty() {
        v.push("empty relevant set".into());
    }
    let mailbox = corpus.mailbox_messages(&inst.replier);
    for item in &inst.relevant_items {
        let present = mailbox.iter().any(|m| {
            m.timestamp() < inst.t_prime && corpus.items_of(m.id()).iter().any(|it| &it.item_id == item)
        });
        if !present {
            v.push(format!("item {item} not in replier mailbox before t'"));
        }
        let in_thread_before = corpus
            .thread(rep.thread_id())
            .iter()
            .take(corpus.thread_pos[rep_i])
            .any(|&i| corpus.items_at(i).iter().any(|it| &it.item_id == item));
        if in_thread_before {
            v.push(format!("item {item} occurred earlier in the thread"));
        }
    }
    v
}

pub fn write_instances<W: Write>(report: &MiningReport, mut w: W) -> Result<()> {
    serde_json::to_writer(&mut w, &serde_json::json!({ "drops": report.drops }))?;
    w.write_all(b"\n")?;
    for inst in &report.instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_instances<R: BufRead>(reader: R) -> Result<MiningReport> {
    #[derive(Deserialize)]
    struct Header {
        drops: DropCounts,
    }
    let mut lines = reader.lines();
    let header: Header = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Err(Error::Format("empty instance file".into())),
    };
    let mut instances = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            instances.push(serde_json::from_str(&line)?);
        }
    }
    Ok(MiningReport { instances, drops: header.drops })
}
