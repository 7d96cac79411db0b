//! End-to-end orchestration: in-memory experiment helpers and the staged
//! runner that persists artifacts and a manifest under an output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{Field, FormulationConfig};
use crate::container;
use crate::corpus::{mine_instances, parse_corpus, read_instances, trim_item_outliers, write_instances, Corpus, Instance, MiningReport};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_run, build_report, evaluate_run, AblationReport, BaselineFormulator, CnnFormulator, MethodRun, QueryFormulator,
    RunReport, SilverFormulator,
};
use crate::features::{message_features, tagger_by_id, CollectionStats, FeatureCategory, PosTagger, Vocabulary, DEFAULT_VOCAB_SIZE};
use crate::neural::{train, Checkpoint, InputMask, ModelConfig, ModelKind, TrainingConfig, TrainingSet};
use crate::retrieval::{build_mailbox_indexes, Index, RetrievalConfig};
use crate::silver::{read_silver, synthesize_all, write_silver, SilverConfig, SilverQuerySet, SilverStats};
use crate::synth::{generate_synthetic_corpus, SynthSpec};
use crate::util::{derive_seed, sha256_hex};

pub const CONFIG_FORMAT_VERSION: u32 = 1;
pub const REFERENCE_METHOD: &str = "full(subject+body)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
    /// Evaluate on this corpus instead of a temporal hold-out of the training corpus.
    pub test_corpus: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { corpus: None, out: PathBuf::from("out"), test_corpus: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSettings {
    pub vocab_size: usize,
    pub tagger: String,
}

impl Default for FeatureSettings {
    fn default() -> Self {
        FeatureSettings { vocab_size: DEFAULT_VOCAB_SIZE, tagger: "lexicon-v1".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub context_width: usize,
    pub embedding_dim: usize,
    pub hidden_dims: [usize; 2],
    pub dropout: f64,
    /// Also train the pointwise variant.
    pub pointwise: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::new(2);
        ModelSettings {
            context_width: m.context_width,
            embedding_dim: m.embedding_dim,
            hidden_dims: m.hidden_dims,
            dropout: m.dropout,
            pointwise: false,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, kind: ModelKind, vocab_size: usize, input: InputMask) -> ModelConfig {
        ModelConfig {
            kind,
            context_width: self.context_width,
            embedding_dim: self.embedding_dim,
            hidden_dims: self.hidden_dims,
            dropout: self.dropout,
            input,
            ..ModelConfig::new(vocab_size)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Latest fraction of instances (by recommendation time) held out for testing.
    pub test_fraction: f64,
    /// Latest fraction of the remaining instances used for validation.
    pub validation_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { test_fraction: 0.3, validation_fraction: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSettings {
    pub baselines: Vec<FormulationConfig>,
    /// Label of the method the others are tested against.
    pub reference: String,
    /// Also report the best silver query per instance.
    pub silver: bool,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        EvaluateSettings {
            baselines: Field::ALL.iter().map(|&field| FormulationConfig::Full { field }).collect(),
            reference: REFERENCE_METHOD.into(),
            silver: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub categories: Vec<FeatureCategory>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings { categories: FeatureCategory::ALL.to_vec() }
    }
}

/// The single run configuration; one section per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub retrieval: RetrievalConfig,
    pub silver: SilverConfig,
    pub features: FeatureSettings,
    pub model: ModelSettings,
    pub training: TrainingConfig,
    pub split: SplitConfig,
    pub evaluate: EvaluateSettings,
    pub ablation: AblationSettings,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: CONFIG_FORMAT_VERSION,
            seed: 0,
            paths: Paths::default(),
            retrieval: RetrievalConfig::default(),
            silver: SilverConfig::default(),
            features: FeatureSettings::default(),
            model: ModelSettings::default(),
            training: TrainingConfig::default(),
            split: SplitConfig::default(),
            evaluate: EvaluateSettings::default(),
            ablation: AblationSettings::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config format version {} unsupported (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.silver.validate()?;
        self.training.validate()?;
        self.model.model_config(ModelKind::Listwise, 2, InputMask::full()).validate()?;
        tagger_by_id(&self.features.tagger)?;
        for b in &self.evaluate.baselines {
            b.validate()?;
        }
        let s = &self.split;
        if !(0.0..1.0).contains(&s.test_fraction) || !(0.0..1.0).contains(&s.validation_fraction) {
            return Err(Error::InvalidConfig("split fractions must lie in [0, 1)".into()));
        }
        if self.features.vocab_size == 0 {
            return Err(Error::InvalidConfig("vocabulary size must be positive".into()));
        }
        Ok(())
    }

    /// Hash of every setting except paths.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    fn silver_config(&self) -> SilverConfig {
        SilverConfig { retrieval: self.retrieval, ..self.silver }
    }

    fn training_config(&self, label: &str) -> TrainingConfig {
        TrainingConfig { seed: derive_seed(self.seed, label), ..self.training.clone() }
    }
}

/// A corpus with its mined instances, mailbox indexes and collection statistics.
pub struct Workspace {
    pub corpus: Corpus,
    pub mining: MiningReport,
    pub indexes: BTreeMap<String, Index>,
    pub stats: CollectionStats,
}

impl Workspace {
    pub fn new(corpus: Corpus) -> Result<Self> {
        let mining = mine_instances(&corpus, &trim_item_outliers(&corpus));
        let indexes = build_mailbox_indexes(&corpus)?;
        let stats = CollectionStats::build(&corpus)?;
        Ok(Workspace { corpus, mining, indexes, stats })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.mining.instances
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn select(ids: &[String], instances: &[Instance]) -> Vec<Instance> {
        let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        instances.iter().filter(|i| wanted.contains(i.instance_id.as_str())).cloned().collect()
    }
}

/// Temporal split: instances ordered by recommendation time; the latest
/// `test_fraction` is the test set and the latest `validation_fraction` of
/// the rest validates. Non-empty training and validation sets are guaranteed
/// when at least two instances remain.
pub fn temporal_split(instances: &[Instance], cfg: &SplitConfig) -> Result<Split> {
    let mut sorted: Vec<&Instance> = instances.iter().collect();
    sorted.sort_by(|a, b| a.t_prime.cmp(&b.t_prime).then_with(|| a.instance_id.cmp(&b.instance_id)));
    let n = sorted.len();
    let n_test = (n as f64 * cfg.test_fraction).round() as usize;
    let rest = n - n_test.min(n);
    if rest < 2 {
        return Err(Error::InvalidInput(format!("{n} instances leave too few for training and validation")));
    }
    let n_val = ((rest as f64 * cfg.validation_fraction).ceil() as usize).clamp(1, rest - 1);
    let ids = |s: &[&Instance]| s.iter().map(|i| i.instance_id.clone()).collect();
    Ok(Split {
        train: ids(&sorted[..rest - n_val]),
        validation: ids(&sorted[rest - n_val..rest]),
        test: ids(&sorted[rest..]),
    })
}

/// One pair per retained silver query of the given instances.
pub fn build_training_set(
    corpus: &Corpus,
    instances: &[Instance],
    silver: &[SilverQuerySet],
    stats: &CollectionStats,
    vocabulary: &Vocabulary,
    tagger: &dyn PosTagger,
    alpha: f64,
) -> Result<TrainingSet> {
    let wanted: BTreeMap<&str, &Instance> = instances.iter().map(|i| (i.instance_id.as_str(), i)).collect();
    let mut message_slot: BTreeMap<&str, usize> = BTreeMap::new();
    let mut set = TrainingSet::new(Vec::new());
    for s in silver {
        let Some(inst) = wanted.get(s.instance_id.as_str()) else { continue };
        if s.queries.is_empty() {
            continue;
        }
        let slot = match message_slot.get(inst.request.as_str()) {
            Some(&i) => i,
            None => {
                let f = message_features(corpus.get(&inst.request)?, stats, vocabulary, tagger)?;
                if f.is_empty() {
                    continue;
                }
                set.messages.push(f);
                message_slot.insert(inst.request.as_str(), set.messages.len() - 1);
                set.messages.len() - 1
            }
        };
        for (k, q) in s.queries.iter().enumerate() {
            let id = format!("{}|{}|{k}", s.instance_id, s.item_id);
            set.push(id, slot, q.terms.clone(), q.score, alpha)?;
        }
    }
    Ok(set)
}

pub struct TrainedModels {
    pub cnn: Checkpoint,
    pub pointwise: Option<Checkpoint>,
}

/// Train the listwise model (and optionally the pointwise one) on the
/// training instances, selecting on the validation instances.
#[allow(clippy::too_many_arguments)]
pub fn train_models(
    ws: &Workspace,
    train_instances: &[Instance],
    validation_instances: &[Instance],
    silver: &[SilverQuerySet],
    cfg: &RunConfig,
    input: InputMask,
    tagger: &dyn PosTagger,
    pointwise: bool,
) -> Result<TrainedModels> {
    let vocabulary = Vocabulary::build(&ws.stats, cfg.features.vocab_size);
    let alpha = cfg.training.alpha_eor;
    let train_set = build_training_set(&ws.corpus, train_instances, silver, &ws.stats, &vocabulary, tagger, alpha)?;
    let val_set = build_training_set(&ws.corpus, validation_instances, silver, &ws.stats, &vocabulary, tagger, alpha)?;
    let fit = |kind: ModelKind, label: &str| -> Result<Checkpoint> {
        let mc = cfg.model.model_config(kind, vocabulary.size(), input.clone());
        let (model, meta) = train(&train_set, &val_set, &mc, &cfg.training_config(label))?;
        Ok(Checkpoint::new(model, vocabulary.clone(), tagger.id(), meta))
    };
    let cnn = fit(ModelKind::Listwise, "cnn")?;
    let pointwise = if pointwise { Some(fit(ModelKind::Pointwise, "cnn-p")?) } else { None };
    Ok(TrainedModels { cnn, pointwise })
}

fn cnn_formulator<'a>(name: &str, ck: &'a Checkpoint, stats: &'a CollectionStats, tagger: &'a dyn PosTagger) -> CnnFormulator<'a> {
    CnnFormulator {
        name: name.into(),
        model: &ck.model,
        threshold: ck.metadata.threshold,
        stats,
        vocabulary: &ck.vocabulary,
        tagger,
    }
}

/// Evaluate the baselines, the trained models and optionally the silver
/// oracle on `test` instances of `ws`.
pub fn evaluate_methods(
    ws: &Workspace,
    test: &[Instance],
    models: &TrainedModels,
    silver: Option<&[SilverQuerySet]>,
    cfg: &RunConfig,
) -> Result<RunReport> {
    let tagger = tagger_by_id(&models.cnn.tagger)?;
    let mut formulators: Vec<Box<dyn QueryFormulator + '_>> = Vec::new();
    for b in &cfg.evaluate.baselines {
        formulators.push(Box::new(BaselineFormulator { config: b.clone(), stats: &ws.stats }));
    }
    formulators.push(Box::new(cnn_formulator("cnn", &models.cnn, &ws.stats, tagger.as_ref())));
    if let Some(p) = &models.pointwise {
        formulators.push(Box::new(cnn_formulator("cnn-p", p, &ws.stats, tagger.as_ref())));
    }
    if let Some(s) = silver {
        formulators.push(Box::new(SilverFormulator::new(s)));
    }
    let runs: Vec<MethodRun> =
        formulators.iter().map(|f| evaluate_run(test, &ws.corpus, &ws.indexes, f.as_ref(), &cfg.retrieval)).collect();
    build_report(runs, &cfg.evaluate.reference)
}

/// Everything an experiment on one corpus produces.
pub struct Experiment {
    pub silver: Vec<SilverQuerySet>,
    pub silver_stats: SilverStats,
    pub split: Split,
    pub models: TrainedModels,
    pub report: RunReport,
}

/// Silver synthesis, temporal split, training and evaluation in memory.
pub fn run_experiment(ws: &Workspace, cfg: &RunConfig) -> Result<Experiment> {
    cfg.validate()?;
    let (silver, silver_stats) = synthesize_all(&ws.corpus, ws.instances(), &ws.indexes, &cfg.silver_config(), cfg.seed)?;
    let split = temporal_split(ws.instances(), &cfg.split)?;
    let tagger = tagger_by_id(&cfg.features.tagger)?;
    let models = train_models(
        ws,
        &Split::select(&split.train, ws.instances()),
        &Split::select(&split.validation, ws.instances()),
        &silver,
        cfg,
        InputMask::full(),
        tagger.as_ref(),
        cfg.model.pointwise,
    )?;
    let test = Split::select(&split.test, ws.instances());
    let silver_for_eval = cfg.evaluate.silver.then_some(silver.as_slice());
    let report = evaluate_methods(ws, &test, &models, silver_for_eval, cfg)?;
    Ok(Experiment { silver, silver_stats, split, models, report })
}

/// Retrain without each category and report relative test MRR changes of the listwise model.
pub fn run_ablation(ws: &Workspace, silver: &[SilverQuerySet], split: &Split, cfg: &RunConfig) -> Result<AblationReport> {
    let tagger = tagger_by_id(&cfg.features.tagger)?;
    let train_i = Split::select(&split.train, ws.instances());
    let val_i = Split::select(&split.validation, ws.instances());
    let test_i = Split::select(&split.test, ws.instances());
    ablation_run(&cfg.ablation.categories, |category| {
        let mask = category.map_or_else(InputMask::full, InputMask::without);
        let models = train_models(ws, &train_i, &val_i, silver, cfg, mask, tagger.as_ref(), false)?;
        let f = cnn_formulator("cnn", &models.cnn, &ws.stats, tagger.as_ref());
        Ok(evaluate_run(&test_i, &ws.corpus, &ws.indexes, &f, &cfg.retrieval).mrr())
    })
}

// Staged runner.

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Index,
    Mine,
    Silver,
    Train,
    Formulate,
    Evaluate,
    Ablate,
    Synth,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Index => "index",
            Stage::Mine => "mine",
            Stage::Silver => "silver",
            Stage::Train => "train",
            Stage::Formulate => "formulate",
            Stage::Evaluate => "evaluate",
            Stage::Ablate => "ablate",
            Stage::Synth => "synth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Stage::Ingest,
            Stage::Index,
            Stage::Mine,
            Stage::Silver,
            Stage::Train,
            Stage::Formulate,
            Stage::Evaluate,
            Stage::Ablate,
            Stage::Synth,
        ]
        .into_iter()
        .find(|st| st.name() == s)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown stage `{s}`")))
    }
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const INDEXES_FILE: &str = "indexes.bin";
pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const SILVER_FILE: &str = "silver.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const POINTWISE_FILE: &str = "model_pointwise.ckpt";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const REPORT_FILE: &str = "report.jsonl";
pub const RR_DELTA_FILE: &str = "rr_deltas.tsv";
pub const LENGTHS_FILE: &str = "query_lengths.tsv";
pub const QRELS_FILE: &str = "qrels.txt";
pub const ABLATION_FILE: &str = "ablation.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SYNTH_FILE: &str = "synthetic.jsonl";

const INDEXES_MAGIC: &[u8; 8] = b"ATRIDXST";
const INDEXES_VERSION: u32 = 1;

/// Artifacts each stage needs, with the stage producing them.
fn requirements(stage: Stage) -> &'static [(&'static str, Stage)] {
    const CORPUS: (&str, Stage) = (CORPUS_FILE, Stage::Ingest);
    const INDEXES: (&str, Stage) = (INDEXES_FILE, Stage::Index);
    const INSTANCES: (&str, Stage) = (INSTANCES_FILE, Stage::Mine);
    const SILVER: (&str, Stage) = (SILVER_FILE, Stage::Silver);
    const MODEL: (&str, Stage) = (MODEL_FILE, Stage::Train);
    match stage {
        Stage::Ingest | Stage::Synth => &[],
        Stage::Index | Stage::Mine => &[CORPUS],
        Stage::Silver => &[CORPUS, INDEXES, INSTANCES],
        Stage::Train => &[CORPUS, INDEXES, INSTANCES, SILVER],
        Stage::Formulate => &[CORPUS, INSTANCES, MODEL],
        Stage::Evaluate => &[CORPUS, INDEXES, INSTANCES, SILVER, MODEL],
        Stage::Ablate => &[CORPUS, INDEXES, INSTANCES, SILVER, MODEL],
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub format_version: u32,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub notes: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(out: &Path) -> Result<Self> {
        let p = out.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(Manifest::default());
        }
        Ok(serde_json::from_reader(BufReader::new(File::open(p)?))?)
    }

    fn save(&self, out: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(out.join(MANIFEST_FILE))?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

struct StageRun<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
    record: StageRecord,
}

impl<'a> StageRun<'a> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        self.record.inputs.insert(name.to_string(), file_hash(&p)?);
        Ok(p)
    }

    fn external_input(&mut self, label: &str, p: &Path) -> Result<()> {
        if !p.exists() {
            return Err(Error::InvalidConfig(format!("{label} `{}` does not exist", p.display())));
        }
        self.record.inputs.insert(label.to_string(), file_hash(p)?);
        Ok(())
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(BufWriter::new(File::create(p)?))
    }

    fn output(&mut self, name: &str) -> Result<()> {
        let h = file_hash(&self.path(name))?;
        self.record.outputs.insert(name.to_string(), h);
        Ok(())
    }

    fn corpus(&mut self) -> Result<Corpus> {
        let p = self.input(CORPUS_FILE)?;
        parse_corpus(BufReader::new(File::open(p)?))
    }

    fn instances(&mut self) -> Result<MiningReport> {
        let p = self.input(INSTANCES_FILE)?;
        read_instances(BufReader::new(File::open(p)?))
    }

    fn silver(&mut self) -> Result<Vec<SilverQuerySet>> {
        let p = self.input(SILVER_FILE)?;
        read_silver(BufReader::new(File::open(p)?))
    }

    fn indexes(&mut self) -> Result<BTreeMap<String, Index>> {
        let p = self.input(INDEXES_FILE)?;
        let blobs: Vec<Vec<u8>> = container::read(BufReader::new(File::open(p)?), INDEXES_MAGIC, INDEXES_VERSION)?;
        blobs
            .iter()
            .map(|b| Index::read(b.as_slice()).map(|i| (i.owner().to_string(), i)))
            .collect()
    }

    fn checkpoint(&mut self, name: &str) -> Result<Checkpoint> {
        let p = self.input(name)?;
        Checkpoint::read(BufReader::new(File::open(p)?))
    }

    fn split(&mut self) -> Result<Split> {
        let p = self.input(SPLIT_FILE)?;
        Ok(serde_json::from_reader(BufReader::new(File::open(p)?))?)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        drop(w);
        self.output(name)
    }

    /// The training workspace rebuilt from stage artifacts.
    fn workspace(&mut self) -> Result<Workspace> {
        let corpus = self.corpus()?;
        let mining = self.instances()?;
        let indexes = self.indexes()?;
        let stats = CollectionStats::build(&corpus)?;
        Ok(Workspace { corpus, mining, indexes, stats })
    }

    /// Evaluation target: a hold-out of the training workspace or a separate corpus.
    fn test_target(&mut self, ws: Workspace) -> Result<(Workspace, Vec<Instance>)> {
        match self.cfg.paths.test_corpus.clone() {
            Some(p) => {
                self.external_input("test_corpus", &p)?;
                let test_ws = Workspace::new(parse_corpus(BufReader::new(File::open(p)?))?)?;
                let test = test_ws.instances().to_vec();
                Ok((test_ws, test))
            }
            None => {
                let split = self.split()?;
                let test = Split::select(&split.test, ws.instances());
                Ok((ws, test))
            }
        }
    }

    fn models(&mut self) -> Result<TrainedModels> {
        let cnn = self.checkpoint(MODEL_FILE)?;
        let pointwise = if self.path(POINTWISE_FILE).exists() { Some(self.checkpoint(POINTWISE_FILE)?) } else { None };
        Ok(TrainedModels { cnn, pointwise })
    }
}

/// Run one stage, writing its artifacts under `cfg.paths.out` and recording
/// it in the manifest.
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<StageRecord> {
    cfg.validate()?;
    let out = cfg.paths.out.clone();
    for (artifact, producer) in requirements(stage) {
        if !out.join(artifact).exists() {
            return Err(Error::MissingArtifact { artifact: artifact.to_string(), stage: producer.name().to_string() });
        }
    }
    fs::create_dir_all(&out)?;
    let mut run = StageRun {
        cfg,
        out: out.clone(),
        record: StageRecord {
            config_hash: cfg.hash(),
            format_version: CONFIG_FORMAT_VERSION,
            seed: cfg.seed,
            ..StageRecord::default()
        },
    };
    match stage {
        Stage::Synth => {
            let corpus = generate_synthetic_corpus(&cfg.synth, cfg.seed)?;
            let mut w = run.create(SYNTH_FILE)?;
            corpus.write_jsonl(&mut w)?;
            w.flush()?;
            drop(w);
            run.output(SYNTH_FILE)?;
        }
        Stage::Ingest => {
            let src = cfg
                .paths
                .corpus
                .clone()
                .ok_or_else(|| Error::InvalidConfig("no corpus path configured".into()))?;
            run.external_input("corpus", &src)?;
            let corpus = parse_corpus(BufReader::new(File::open(&src)?))?;
            let mut w = run.create(CORPUS_FILE)?;
            corpus.write_jsonl(&mut w)?;
            w.flush()?;
            drop(w);
            run.output(CORPUS_FILE)?;
            run.record.notes = serde_json::json!({
                "messages": corpus.len(),
                "threads": corpus.thread_count(),
                "mailboxes": corpus.mailboxes().len(),
            });
        }
        Stage::Index => {
            let corpus = run.corpus()?;
            let indexes = build_mailbox_indexes(&corpus)?;
            let blobs = indexes.values().map(Index::to_bytes).collect::<Result<Vec<_>>>()?;
            let mut w = run.create(INDEXES_FILE)?;
            container::write(&mut w, INDEXES_MAGIC, INDEXES_VERSION, &blobs)?;
            w.flush()?;
            drop(w);
            run.output(INDEXES_FILE)?;
            run.record.notes = serde_json::json!({ "mailboxes": indexes.len() });
        }
        Stage::Mine => {
            let corpus = run.corpus()?;
            let report = mine_instances(&corpus, &trim_item_outliers(&corpus));
            let mut w = run.create(INSTANCES_FILE)?;
            write_instances(&report, &mut w)?;
            w.flush()?;
            drop(w);
            run.output(INSTANCES_FILE)?;
            run.record.notes = serde_json::to_value(report.drops)?;
        }
        Stage::Silver => {
            let corpus = run.corpus()?;
            let mining = run.instances()?;
            let indexes = run.indexes()?;
            let (sets, stats) = synthesize_all(&corpus, &mining.instances, &indexes, &cfg.silver_config(), cfg.seed)?;
            let mut w = run.create(SILVER_FILE)?;
            write_silver(&sets, &mut w)?;
            w.flush()?;
            drop(w);
            run.output(SILVER_FILE)?;
            let per_pair: Vec<usize> = sets.iter().map(|s| s.scored_candidates).collect();
            run.record.notes = serde_json::json!({ "stats": stats, "scored_candidates_per_pair": per_pair });
        }
        Stage::Train => {
            let ws = run.workspace()?;
            let silver = run.silver()?;
            let split_cfg = if cfg.paths.test_corpus.is_some() {
                SplitConfig { test_fraction: 0.0, ..cfg.split.clone() }
            } else {
                cfg.split.clone()
            };
            let split = temporal_split(ws.instances(), &split_cfg)?;
            let tagger = tagger_by_id(&cfg.features.tagger)?;
            let models = train_models(
                &ws,
                &Split::select(&split.train, ws.instances()),
                &Split::select(&split.validation, ws.instances()),
                &silver,
                cfg,
                InputMask::full(),
                tagger.as_ref(),
                cfg.model.pointwise,
            )?;
            run.write_json(SPLIT_FILE, &split)?;
            for (name, ck) in [(MODEL_FILE, Some(&models.cnn)), (POINTWISE_FILE, models.pointwise.as_ref())] {
                if let Some(ck) = ck {
                    let mut w = run.create(name)?;
                    ck.write(&mut w)?;
                    w.flush()?;
                    drop(w);
                    run.output(name)?;
                } else if run.path(name).exists() {
                    fs::remove_file(run.path(name))?;
                }
            }
            run.record.notes = serde_json::json!({
                "cnn": models.cnn.metadata,
                "cnn_p": models.pointwise.as_ref().map(|p| &p.metadata),
            });
        }
        Stage::Formulate => {
            let ws = run.workspace_without_indexes()?;
            let models = run.models()?;
            let (ws, test) = run.test_target(ws)?;
            let tagger = tagger_by_id(&models.cnn.tagger)?;
            let mut w = run.create(QUERIES_FILE)?;
            let mut formulators: Vec<Box<dyn QueryFormulator + '_>> = cfg
                .evaluate
                .baselines
                .iter()
                .map(|b| Box::new(BaselineFormulator { config: b.clone(), stats: &ws.stats }) as Box<dyn QueryFormulator>)
                .collect();
            formulators.push(Box::new(cnn_formulator("cnn", &models.cnn, &ws.stats, tagger.as_ref())));
            if let Some(p) = &models.pointwise {
                formulators.push(Box::new(cnn_formulator("cnn-p", p, &ws.stats, tagger.as_ref())));
            }
            let mut sorted: Vec<&Instance> = test.iter().collect();
            sorted.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
            for f in &formulators {
                for inst in &sorted {
                    let query = f.formulate(inst, ws.corpus.get(&inst.request)?)?;
                    let line = serde_json::json!({ "instance_id": inst.instance_id, "method": f.name(), "query": query });
                    serde_json::to_writer(&mut w, &line)?;
                    w.write_all(b"\n")?;
                }
            }
            w.flush()?;
            drop(w);
            run.output(QUERIES_FILE)?;
        }
        Stage::Evaluate => {
            let ws = run.workspace()?;
            let silver = run.silver()?;
            let models = run.models()?;
            let cross = cfg.paths.test_corpus.is_some();
            let (ws, test) = run.test_target(ws)?;
            let silver_for_eval = (cfg.evaluate.silver && !cross).then_some(silver.as_slice());
            let report = evaluate_methods(&ws, &test, &models, silver_for_eval, cfg)?;
            write_report_artifacts(&mut run, &report, &test)?;
            let summary: BTreeMap<&str, f64> = report.methods.iter().map(|m| (m.method.as_str(), m.mrr)).collect();
            run.record.notes = serde_json::json!({ "mrr": summary, "instances": test.len() });
        }
        Stage::Ablate => {
            let ws = run.workspace()?;
            let silver = run.silver()?;
            let split = run.split()?;
            let report = run_ablation(&ws, &silver, &split, cfg)?;
            run.write_json(ABLATION_FILE, &report)?;
        }
    }
    let mut manifest = Manifest::load(&out)?;
    manifest.stages.insert(stage.name().to_string(), run.record.clone());
    manifest.save(&out)?;
    Ok(run.record)
}

impl StageRun<'_> {
    fn workspace_without_indexes(&mut self) -> Result<Workspace> {
        let corpus = self.corpus()?;
        let mining = self.instances()?;
        let stats = CollectionStats::build(&corpus)?;
        Ok(Workspace { corpus, mining, indexes: BTreeMap::new(), stats })
    }
}

fn write_report_artifacts(run: &mut StageRun, report: &RunReport, test: &[Instance]) -> Result<()> {
    let mut w = run.create(REPORT_FILE)?;
    report.write_jsonl(&mut w)?;
    w.flush()?;
    drop(w);
    run.output(REPORT_FILE)?;

    let mut w = run.create(RR_DELTA_FILE)?;
    report.write_rr_deltas(&mut w)?;
    w.flush()?;
    drop(w);
    run.output(RR_DELTA_FILE)?;

    let mut w = run.create(LENGTHS_FILE)?;
    report.write_length_distribution(&mut w)?;
    w.flush()?;
    drop(w);
    run.output(LENGTHS_FILE)?;

    let mut w = run.create(QRELS_FILE)?;
    crate::trec::write_qrels(test, &mut w)?;
    w.flush()?;
    drop(w);
    run.output(QRELS_FILE)?;

    for m in &report.methods {
        let name = format!("runs/{}.txt", run_file_stem(&m.method));
        let mut w = run.create(&name)?;
        crate::trec::write_run(report.rows_of(&m.method), &m.method, &mut w)?;
        w.flush()?;
        drop(w);
        run.output(&name)?;
    }
    Ok(())
}

/// File-system-safe name for a method label.
pub fn run_file_stem(method: &str) -> String {
    method.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
