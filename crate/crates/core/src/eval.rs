//! Ranking metrics, significance testing, run reports and feature ablation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::baselines::{formulate_baseline_query, FormulationConfig, Query};
use crate::corpus::{Corpus, Instance, Message};
use crate::error::{Error, Result};
use crate::features::{message_features, CollectionStats, FeatureCategory, PosTagger, Vocabulary};
use crate::neural::{formulate_query_cnn, formulate_query_pointwise, TermRankingModel};
use crate::retrieval::{Index, RetrievalConfig};
use crate::silver::SilverQuerySet;

fn require_relevant(relevant: &BTreeSet<String>) -> Result<()> {
    if relevant.is_empty() {
        return Err(Error::InvalidInput("instance without relevant items".into()));
    }
    Ok(())
}

pub fn reciprocal_rank<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>) -> Result<f64> {
    require_relevant(relevant)?;
    Ok(ranking
        .iter()
        .position(|e| relevant.contains(e.as_ref()))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64))
}

/// Binary-gain NDCG over the whole ranking; the ideal ranking holds
/// `min(|relevant|, limit)` relevant items.
pub fn ndcg<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>, limit: usize) -> Result<f64> {
    require_relevant(relevant)?;
    let dcg: f64 = ranking
        .iter()
        .enumerate()
        .filter(|(_, e)| relevant.contains(e.as_ref()))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..relevant.len().min(limit)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    Ok(if ideal > 0.0 { dcg / ideal } else { 0.0 })
}

pub fn precision_at_5<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>) -> Result<f64> {
    require_relevant(relevant)?;
    Ok(ranking.iter().take(5).filter(|e| relevant.contains(e.as_ref())).count() as f64 / 5.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: Option<f64>,
    pub p: f64,
    pub n: usize,
}

/// Paired two-sided Student t-test on `a - b`. With zero variance in the
/// differences the statistic is undefined and p is 1 for a zero mean, 0
/// otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidInput("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(TTest { t: None, p: if mean == 0.0 { 1.0 } else { 0.0 }, n });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t: Some(t), p, n })
}

/// Turns a request message into a query.
pub trait QueryFormulator {
    fn name(&self) -> String;
    fn formulate(&self, instance: &Instance, request: &Message) -> Result<Query>;
}

pub struct BaselineFormulator<'a> {
    pub config: FormulationConfig,
    pub stats: &'a CollectionStats,
}

impl QueryFormulator for BaselineFormulator<'_> {
    fn name(&self) -> String {
        self.config.label()
    }

    fn formulate(&self, _: &Instance, request: &Message) -> Result<Query> {
        formulate_baseline_query(request, &self.config, self.stats)
    }
}

pub struct CnnFormulator<'a> {
    pub name: String,
    pub model: &'a TermRankingModel,
    /// Decision threshold; `Some` selects the pointwise model's rule.
    pub threshold: Option<f64>,
    pub stats: &'a CollectionStats,
    pub vocabulary: &'a Vocabulary,
    pub tagger: &'a dyn PosTagger,
}

impl QueryFormulator for CnnFormulator<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn formulate(&self, _: &Instance, request: &Message) -> Result<Query> {
        let f = message_features(request, self.stats, self.vocabulary, self.tagger)?;
        if f.is_empty() {
            return Ok(Vec::new());
        }
        match self.threshold {
            Some(t) => formulate_query_pointwise(self.model, &f, t),
            None => formulate_query_cnn(self.model, &f),
        }
    }
}

/// The best silver query of each instance (highest score over its items).
pub struct SilverFormulator<'a> {
    pub sets: BTreeMap<&'a str, Vec<&'a SilverQuerySet>>,
}

impl<'a> SilverFormulator<'a> {
    pub fn new(sets: &'a [SilverQuerySet]) -> Self {
        let mut by: BTreeMap<&str, Vec<&SilverQuerySet>> = BTreeMap::new();
        for s in sets {
            by.entry(s.instance_id.as_str()).or_default().push(s);
        }
        SilverFormulator { sets: by }
    }
}

impl QueryFormulator for SilverFormulator<'_> {
    fn name(&self) -> String {
        "silver".into()
    }

    fn formulate(&self, instance: &Instance, _: &Message) -> Result<Query> {
        let best = self
            .sets
            .get(instance.instance_id.as_str())
            .into_iter()
            .flatten()
            .flat_map(|s| s.queries.iter())
            .fold(None::<&crate::silver::SilverQuery>, |acc, q| match acc {
                Some(b) if b.score >= q.score => Some(b),
                _ => Some(q),
            });
        Ok(best.map(|q| q.terms.clone()).unwrap_or_default())
    }
}

/// A closure-backed formulator.
pub struct FnFormulator<F> {
    pub name: String,
    pub f: F,
}

impl<F: Fn(&Instance, &Message) -> Result<Query>> QueryFormulator for FnFormulator<F> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn formulate(&self, instance: &Instance, request: &Message) -> Result<Query> {
        (self.f)(instance, request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub instance_id: String,
    pub method: String,
    pub query: Query,
    pub query_length: usize,
    pub rr: f64,
    pub ndcg: f64,
    pub p5: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub ranking: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub method: String,
    pub rows: Vec<RunRow>,
}

impl MethodRun {
    pub fn mrr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.rr))
    }

    pub fn rr(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.rr).collect()
    }
}

fn mean<I: Iterator<Item = f64>>(it: I) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Formulate, retrieve and score every instance. Instances are processed
/// in id order; failures become zero-metric rows with an error note.
pub fn evaluate_run(
    instances: &[Instance],
    corpus: &Corpus,
    indexes: &BTreeMap<String, Index>,
    formulator: &dyn QueryFormulator,
    config: &RetrievalConfig,
) -> MethodRun {
    let method = formulator.name();
    let mut sorted: Vec<&Instance> = instances.iter().collect();
    sorted.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    let rows = sorted
        .into_iter()
        .map(|inst| {
            let mut row = RunRow {
                instance_id: inst.instance_id.clone(),
                method: method.clone(),
                query: Vec::new(),
                query_length: 0,
                rr: 0.0,
                ndcg: 0.0,
                p5: 0.0,
                error: None,
                ranking: Vec::new(),
            };
            if let Err(e) = evaluate_instance(inst, corpus, indexes, formulator, config, &mut row) {
                row.error = Some(e.to_string());
                row.rr = 0.0;
                row.ndcg = 0.0;
                row.p5 = 0.0;
            }
            row
        })
        .collect();
    MethodRun { method, rows }
}

fn evaluate_instance(
    inst: &Instance,
    corpus: &Corpus,
    indexes: &BTreeMap<String, Index>,
    formulator: &dyn QueryFormulator,
    config: &RetrievalConfig,
    row: &mut RunRow,
) -> Result<()> {
    let request = corpus.get(&inst.request)?;
    row.query = formulator.formulate(inst, request)?;
    row.query_length = row.query.len();
    if row.query.is_empty() {
        return Ok(());
    }
    let index = indexes
        .get(&inst.replier)
        .ok_or_else(|| Error::InvalidInput(format!("no index for mailbox `{}`", inst.replier)))?;
    let ranking = index.rank_items(&row.query, inst.t_prime, config.message_limit, config.item_limit)?;
    let ids = ranking.ids();
    row.rr = reciprocal_rank(&ids, &inst.relevant_items)?;
    row.ndcg = ndcg(&ids, &inst.relevant_items, config.item_limit)?;
    row.p5 = precision_at_5(&ids, &inst.relevant_items)?;
    row.ranking = ranking.items;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub instances: usize,
    pub errors: usize,
    pub mrr: f64,
    pub mean_ndcg: f64,
    pub mean_p5: f64,
    /// Test of this method's RR against the reference method.
    pub t_test: Option<TTest>,
    /// Per-instance RR minus the reference RR, in instance order.
    pub rr_delta: Vec<f64>,
    /// Query length to number of instances.
    pub length_distribution: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub reference: String,
    pub instance_ids: Vec<String>,
    pub methods: Vec<MethodSummary>,
    pub rows: Vec<RunRow>,
}

impl RunReport {
    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn rows_of<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a RunRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// One JSON object per row followed by one summary object.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for row in &self.rows {
            serde_json::to_writer(&mut w, &serde_json::json!({ "row": row }))?;
            w.write_all(b"\n")?;
        }
        let summary = serde_json::json!({
            "summary": { "reference": self.reference, "methods": self.methods }
        });
        serde_json::to_writer(&mut w, &summary)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    /// Tab-separated per-instance RR deltas, one column per method.
    pub fn write_rr_deltas<W: Write>(&self, mut w: W) -> Result<()> {
        let names: Vec<&str> = self.methods.iter().map(|m| m.method.as_str()).collect();
        writeln!(w, "instance_id\t{}", names.join("\t"))?;
        for (i, id) in self.instance_ids.iter().enumerate() {
            let cols: Vec<String> = self.methods.iter().map(|m| format!("{}", m.rr_delta[i])).collect();
            writeln!(w, "{id}\t{}", cols.join("\t"))?;
        }
        Ok(())
    }

    /// Tab-separated query length histogram, one column per method.
    pub fn write_length_distribution<W: Write>(&self, mut w: W) -> Result<()> {
        let max = self.methods.iter().flat_map(|m| m.length_distribution.keys()).max().copied().unwrap_or(0);
        let names: Vec<&str> = self.methods.iter().map(|m| m.method.as_str()).collect();
        writeln!(w, "length\t{}", names.join("\t"))?;
        for len in 0..=max {
            let cols: Vec<String> =
                self.methods.iter().map(|m| m.length_distribution.get(&len).unwrap_or(&0).to_string()).collect();
            writeln!(w, "{len}\t{}", cols.join("\t"))?;
        }
        Ok(())
    }
}

/// Assemble the report. Every run must cover the same instances.
pub fn build_report(runs: Vec<MethodRun>, reference: &str) -> Result<RunReport> {
    let reference_run = runs
        .iter()
        .find(|r| r.method == reference)
        .ok_or_else(|| Error::InvalidConfig(format!("reference method `{reference}` was not evaluated")))?;
    let instance_ids: Vec<String> = reference_run.rows.iter().map(|r| r.instance_id.clone()).collect();
    let reference_rr = reference_run.rr();
    let mut methods = Vec::new();
    let mut seen = BTreeSet::new();
    for run in &runs {
        if !seen.insert(run.method.as_str()) {
            return Err(Error::InvalidConfig(format!("method `{}` evaluated twice", run.method)));
        }
        let ids: Vec<&str> = run.rows.iter().map(|r| r.instance_id.as_str()).collect();
        if ids != instance_ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::InvalidInput(format!("method `{}` covers different instances", run.method)));
        }
        let rr = run.rr();
        let t_test = if run.method == reference || rr.len() < 2 { None } else { Some(paired_t_test(&rr, &reference_rr)?) };
        let mut length_distribution = BTreeMap::new();
        for r in &run.rows {
            *length_distribution.entry(r.query_length).or_insert(0) += 1;
        }
        methods.push(MethodSummary {
            method: run.method.clone(),
            instances: run.rows.len(),
            errors: run.rows.iter().filter(|r| r.error.is_some()).count(),
            mrr: run.mrr(),
            mean_ndcg: mean(run.rows.iter().map(|r| r.ndcg)),
            mean_p5: mean(run.rows.iter().map(|r| r.p5)),
            t_test,
            rr_delta: rr.iter().zip(&reference_rr).map(|(a, b)| a - b).collect(),
            length_distribution,
        });
    }
    let rows = runs.into_iter().flat_map(|r| r.rows).collect();
    Ok(RunReport { reference: reference.to_string(), instance_ids, methods, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub category: FeatureCategory,
    pub label: String,
    pub mrr: f64,
    /// `(ablated - full) / full`; absent when the full model scores 0.
    pub relative_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub full_mrr: f64,
    pub entries: Vec<AblationEntry>,
}

/// Retrain and evaluate once with all features and once per left-out
/// category. `run` returns the test MRR for the given excluded category.
pub fn ablation_run<F>(categories: &[FeatureCategory], mut run: F) -> Result<AblationReport>
where
    F: FnMut(Option<FeatureCategory>) -> Result<f64>,
{
    let full_mrr = run(None)?;
    let mut entries = Vec::new();
    for &c in categories {
        let mrr = run(Some(c))?;
        entries.push(AblationEntry {
            category: c,
            label: c.label().to_string(),
            mrr,
            relative_delta: relative_delta(mrr, full_mrr),
        });
    }
    Ok(AblationReport { full_mrr, entries })
}

pub fn relative_delta(value: f64, base: f64) -> Option<f64> {
    (base != 0.0).then(|| (value - base) / base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hand_computed_fixtures() {
        let r = rel(&["x"]);
        let rankings: [&[&str]; 3] = [&["x", "a", "b"], &["a", "x", "b"], &["a", "b"]];
        let rr = [1.0, 0.5, 0.0];
        let nd = [1.0, 0.6309297535714575, 0.0];
        let p5 = [0.2, 0.2, 0.0];
        for i in 0..3 {
            assert!((reciprocal_rank(rankings[i], &r).unwrap() - rr[i]).abs() < 1e-12);
            assert!((ndcg(rankings[i], &r, 100).unwrap() - nd[i]).abs() < 1e-12);
            assert!((precision_at_5(rankings[i], &r).unwrap() - p5[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_edge_cases() {
        assert_eq!(reciprocal_rank(&["a", "b", "c", "x"], &rel(&["x"])).unwrap(), 0.25);
        assert_eq!(precision_at_5(&["x", "y", "a"], &rel(&["x", "y"])).unwrap(), 0.4);
        assert!(reciprocal_rank(&["a"], &BTreeSet::new()).is_err());
        assert!(ndcg(&["a"], &BTreeSet::new(), 100).is_err());
        assert!(precision_at_5(&["a"], &BTreeSet::new()).is_err());
        // ideal DCG capped by the ranking limit
        let two = rel(&["x", "y"]);
        assert_eq!(ndcg(&["x"], &two, 1).unwrap(), 1.0);
        assert!(ndcg(&["x"], &two, 100).unwrap() < 1.0);
    }

    #[test]
    fn t_test_reference_values() {
        let t = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((t.t.unwrap() - 3.464101615137755).abs() < 1e-12);
        assert!((t.p - 0.07417990022744853).abs() < 1e-9);
        let swapped = paired_t_test(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(swapped.t.unwrap(), -t.t.unwrap());
        assert!((swapped.p - t.p).abs() < 1e-15);
        let same = paired_t_test(&[0.3, 0.5], &[0.3, 0.5]).unwrap();
        assert_eq!((same.t, same.p), (None, 1.0));
        assert_eq!(paired_t_test(&[1.0, 1.0], &[0.0, 0.0]).unwrap().p, 0.0);
        assert!(paired_t_test(&[1.0], &[1.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }

    fn run(method: &str, rr: &[f64], lengths: &[usize]) -> MethodRun {
        MethodRun {
            method: method.into(),
            rows: rr
                .iter()
                .zip(lengths)
                .enumerate()
                .map(|(i, (&rr, &len))| RunRow {
                    instance_id: format!("i{i}"),
                    method: method.into(),
                    query: vec!["t".into(); len],
                    query_length: len,
                    rr,
                    ndcg: rr,
                    p5: 0.0,
                    error: None,
                    ranking: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn report_aggregates() {
        let report = build_report(
            vec![run("full", &[0.5, 0.0, 1.0], &[3, 4, 3]), run("cnn", &[1.0, 0.5, 1.0], &[1, 0, 2])],
            "full",
        )
        .unwrap();
        let cnn = report.summary("cnn").unwrap();
        assert!((cnn.mrr - 2.5 / 3.0).abs() < 1e-15);
        assert_eq!(cnn.rr_delta, vec![0.5, 0.5, 0.0]);
        assert_eq!(cnn.length_distribution, BTreeMap::from([(0, 1), (1, 1), (2, 1)]));
        assert!(cnn.t_test.is_some());
        assert!(report.summary("full").unwrap().t_test.is_none());
        let mut buf = Vec::new();
        report.write_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);
        assert!(build_report(vec![run("a", &[1.0], &[1])], "b").is_err());
        assert!(build_report(vec![run("a", &[1.0], &[1]), run("b", &[1.0, 0.0], &[1, 1])], "a").is_err());
    }

    #[test]
    fn ablation_self_delta_is_zero() {
        let report = ablation_run(&FeatureCategory::ALL, |c| Ok(if c == Some(FeatureCategory::Term) { 0.2 } else { 0.4 })).unwrap();
        assert_eq!(report.full_mrr, 0.4);
        assert_eq!(report.entries.len(), 6);
        let term = report.entries.iter().find(|e| e.category == FeatureCategory::Term).unwrap();
        assert_eq!(term.relative_delta, Some(-0.5));
        assert!(report.entries.iter().filter(|e| e.category != FeatureCategory::Term).all(|e| e.relative_delta == Some(0.0)));
        assert_eq!(relative_delta(0.3, 0.0), None);
    }
}
