//! Windowed neural term ranker.
//!
//! Every term occurrence is represented by the embeddings of the `2L+1`
//! tokens around it (padding beyond the message) concatenated with its
//! auxiliary features. A two-layer softplus network scores every
//! occurrence; a second network with its own parameters scores the
//! end-of-ranking (EoR) token from the mean of the occurrence inputs. A
//! softmax over all scores gives the term distribution.

use std::collections::{BTreeSet, HashSet};
use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::Query;
use crate::container;
use crate::error::{Error, Result};
use crate::features::{FeatureCategory, MessageFeatures, Vocabulary, FEATURE_COUNT, PAD_ID};
use crate::util::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Softmax over occurrences and EoR, trained on the listwise objective.
    Listwise,
    /// Independent logistic outputs per occurrence, no EoR scorer.
    Pointwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
}

/// Which parts of the occurrence input are fed to the network. Disabled
/// parts are zeroed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputMask {
    pub term: bool,
    pub context: bool,
    pub aux: Vec<bool>,
}

impl InputMask {
    pub fn full() -> Self {
        InputMask { term: true, context: true, aux: vec![true; FEATURE_COUNT] }
    }

    pub fn without(category: FeatureCategory) -> Self {
        let mut m = Self::full();
        match category {
            FeatureCategory::Term => m.term = false,
            FeatureCategory::Context => m.context = false,
            FeatureCategory::TermContext => {
                m.term = false;
                m.context = false;
            }
            c => {
                for &col in c.aux_columns() {
                    m.aux[col] = false;
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Half-width L of the context window.
    pub context_width: usize,
    pub embedding_dim: usize,
    pub hidden_dims: [usize; 2],
    pub dropout: f64,
    /// Embedding rows, including padding and unknown.
    pub vocab_size: usize,
    pub aux_feature_count: usize,
    pub activation: Activation,
    pub input: InputMask,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            kind: ModelKind::Listwise,
            context_width: 3,
            embedding_dim: 128,
            hidden_dims: [512, 512],
            dropout: 0.5,
            vocab_size,
            aux_feature_count: FEATURE_COUNT,
            activation: Activation::Softplus,
            input: InputMask::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(3..=15).contains(&self.context_width) || self.context_width.is_multiple_of(2) {
            return bad(format!("context width {} not in 3, 5, ..., 15", self.context_width));
        }
        if self.embedding_dim == 0 || self.hidden_dims.contains(&0) {
            return bad("layer dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size < 2 {
            return bad("vocabulary needs padding and unknown rows".into());
        }
        if self.aux_feature_count != FEATURE_COUNT || self.input.aux.len() != FEATURE_COUNT {
            return bad(format!("expected {FEATURE_COUNT} auxiliary features"));
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        2 * self.context_width + 1
    }

    pub fn input_dim(&self) -> usize {
        self.window() * self.embedding_dim + self.aux_feature_count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub reg_lambda: f64,
    /// Overrides the regularization coefficient `1 / (2 * reg_lambda)`.
    pub reg_coefficient: Option<f64>,
    pub alpha_eor: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 30,
            batch_size: 128,
            reg_lambda: 0.1,
            reg_coefficient: None,
            alpha_eor: 0.95,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn reg_coefficient(&self) -> f64 {
        self.reg_coefficient.unwrap_or(1.0 / (2.0 * self.reg_lambda))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.epsilon, self.reg_lambda];
        if positive.iter().any(|x| x.is_nan() || *x <= 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("training hyperparameters must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.alpha_eor > 0.0 && self.alpha_eor <= 1.0) {
            return Err(Error::InvalidConfig(format!("alpha_eor {} outside (0, 1]", self.alpha_eor)));
        }
        if self.reg_coefficient.is_some_and(|c| c < 0.0) {
            return Err(Error::InvalidConfig("negative regularization coefficient".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Self {
        Params {
            tensors: other
                .tensors
                .iter()
                .map(|t| Tensor { name: t.name.clone(), shape: t.shape.clone(), data: vec![0.0; t.data.len()] })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const EMB: usize = 0;
const G: usize = 1;
const H: usize = 7;
const LAYER_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

fn is_regularized(index: usize) -> bool {
    index == EMB || (index >= G && ((index - G) % 6).is_multiple_of(2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermRankingModel {
    pub config: ModelConfig,
    pub params: Params,
}

/// Probabilities over the `n` occurrences followed by EoR, with raw scores.
#[derive(Debug, Clone, PartialEq)]
pub struct TermDistribution {
    pub term_scores: Vec<f64>,
    pub eor_score: f64,
    pub probabilities: Vec<f64>,
}

impl TermDistribution {
    pub fn eor_probability(&self) -> f64 {
        *self.probabilities.last().unwrap()
    }
}

pub enum Mode<'a> {
    Infer,
    Train(&'a mut ChaCha8Rng),
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

fn glorot(r: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    (0..fan_in * fan_out).map(|_| dist.sample(r)).collect()
}

pub fn init_model(config: &ModelConfig, seed: u64) -> Result<TermRankingModel> {
    config.validate()?;
    let mut r = rng(seed);
    let (v, d) = (config.vocab_size, config.embedding_dim);
    let [h1, h2] = config.hidden_dims;
    let input = config.input_dim();
    let mut tensors = vec![Tensor { name: "embedding".into(), shape: vec![v, d], data: glorot(&mut r, v, d) }];
    let scorers: &[&str] = match config.kind {
        ModelKind::Listwise => &["term", "eor"],
        ModelKind::Pointwise => &["term"],
    };
    for scorer in scorers {
        let shapes = [vec![input, h1], vec![h1], vec![h1, h2], vec![h2], vec![h2, 1], vec![1]];
        for (name, shape) in LAYER_NAMES.iter().zip(shapes) {
            let data = if shape.len() == 2 { glorot(&mut r, shape[0], shape[1]) } else { vec![0.0; shape[0]] };
            tensors.push(Tensor { name: format!("{scorer}.{name}"), shape, data });
        }
    }
    Ok(TermRankingModel { config: config.clone(), params: Params { tensors } })
}

struct MlpCache {
    x: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    m1: Option<Array2<f64>>,
    z2: Array2<f64>,
    a2: Array2<f64>,
    m2: Option<Array2<f64>>,
    out: Array1<f64>,
}

struct Forward {
    g: MlpCache,
    h: Option<MlpCache>,
}

fn add_into<'a, I: IntoIterator<Item = &'a f64>>(dst: &mut [f64], src: I) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl TermRankingModel {
    fn mat(&self, i: usize) -> ArrayView2<'_, f64> {
        let t = &self.params.tensors[i];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("tensor shape")
    }

    fn vec(&self, i: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params.tensors[i].data)
    }

    fn check_features(&self, f: &MessageFeatures) -> Result<()> {
        if f.is_empty() {
            return Err(Error::InvalidInput("cannot score an empty message".into()));
        }
        if f.vocab_ids.len() != f.len() || f.aux.len() != f.len() {
            return Err(Error::InvalidInput("feature rows do not match tokens".into()));
        }
        if let Some(id) = f.vocab_ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!("vocabulary id {id} beyond the embedding table")));
        }
        Ok(())
    }

    /// Vocabulary id at window slot `j` of occurrence `k`, or `None` when the slot is masked.
    fn slot_id(&self, f: &MessageFeatures, k: usize, j: usize) -> Option<u32> {
        let l = self.config.context_width;
        let enabled = if j == l { self.config.input.term } else { self.config.input.context };
        if !enabled {
            return None;
        }
        let pos = k as isize + j as isize - l as isize;
        Some(if pos < 0 || pos as usize >= f.len() { PAD_ID } else { f.vocab_ids[pos as usize] })
    }

    fn build_input(&self, f: &MessageFeatures) -> Array2<f64> {
        let d = self.config.embedding_dim;
        let w = self.config.window();
        let emb = self.mat(EMB);
        let mut x = Array2::zeros((f.len(), self.config.input_dim()));
        for k in 0..f.len() {
            let mut row = x.row_mut(k);
            for j in 0..w {
                if let Some(id) = self.slot_id(f, k, j) {
                    row.slice_mut(s![j * d..(j + 1) * d]).assign(&emb.row(id as usize));
                }
            }
            for (c, &on) in self.config.input.aux.iter().enumerate() {
                if on {
                    row[w * d + c] = f.aux[k][c];
                }
            }
        }
        x
    }

    fn dropout_mask(&self, rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
        let keep = 1.0 - self.config.dropout;
        Array2::from_shape_simple_fn((rows, cols), || if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
    }

    fn mlp_forward(&self, base: usize, x: Array2<f64>, mode: &mut Mode) -> MlpCache {
        let [h1, h2] = self.config.hidden_dims;
        let n = x.nrows();
        let (m1, m2) = match mode {
            Mode::Train(r) if self.config.dropout > 0.0 => {
                (Some(self.dropout_mask(n, h1, r)), Some(self.dropout_mask(n, h2, r)))
            }
            _ => (None, None),
        };
        let z1 = x.dot(&self.mat(base)) + self.vec(base + 1);
        let mut a1 = z1.mapv(softplus);
        if let Some(m) = &m1 {
            a1 *= m;
        }
        let z2 = a1.dot(&self.mat(base + 2)) + self.vec(base + 3);
        let mut a2 = z2.mapv(softplus);
        if let Some(m) = &m2 {
            a2 *= m;
        }
        let out = a2.dot(&self.vec(base + 4)) + self.params.tensors[base + 5].data[0];
        MlpCache { x, z1, a1, m1, z2, a2, m2, out }
    }

    fn mlp_backward(&self, base: usize, c: &MlpCache, dout: &Array1<f64>, grads: &mut Params) -> Array2<f64> {
        let w3 = self.vec(base + 4);
        add_into(&mut grads.tensors[base + 4].data, &c.a2.t().dot(dout));
        grads.tensors[base + 5].data[0] += dout.sum();
        let mut da2 = dout.view().insert_axis(Axis(1)).dot(&w3.insert_axis(Axis(0)));
        if let Some(m) = &c.m2 {
            da2 *= m;
        }
        let dz2 = da2 * c.z2.mapv(sigmoid);
        add_into(&mut grads.tensors[base + 2].data, &c.a1.t().dot(&dz2));
        add_into(&mut grads.tensors[base + 3].data, &dz2.sum_axis(Axis(0)));
        let mut da1 = dz2.dot(&self.mat(base + 2).t());
        if let Some(m) = &c.m1 {
            da1 *= m;
        }
        let dz1 = da1 * c.z1.mapv(sigmoid);
        add_into(&mut grads.tensors[base].data, &c.x.t().dot(&dz1));
        add_into(&mut grads.tensors[base + 1].data, &dz1.sum_axis(Axis(0)));
        dz1.dot(&self.mat(base).t())
    }

    fn run(&self, f: &MessageFeatures, mode: &mut Mode) -> Result<Forward> {
        self.check_features(f)?;
        let x = self.build_input(f);
        let h = match self.config.kind {
            ModelKind::Listwise => {
                let mean = x.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
                Some(mean)
            }
            ModelKind::Pointwise => None,
        };
        let g = self.mlp_forward(G, x, mode);
        let h = h.map(|mean| self.mlp_forward(H, mean, mode));
        Ok(Forward { g, h })
    }

    /// Backpropagate score gradients into `grads`.
    fn backward(&self, f: &MessageFeatures, fw: &Forward, dg: &Array1<f64>, dh: f64, grads: &mut Params) {
        let mut dx = self.mlp_backward(G, &fw.g, dg, grads);
        if let Some(hc) = &fw.h {
            let dmean = self.mlp_backward(H, hc, &Array1::from_elem(1, dh), grads);
            let share = dmean.row(0).mapv(|v| v / f.len() as f64);
            for mut row in dx.rows_mut() {
                row += &share;
            }
        }
        let d = self.config.embedding_dim;
        let emb = &mut grads.tensors[EMB].data;
        for k in 0..f.len() {
            for j in 0..self.config.window() {
                if let Some(id) = self.slot_id(f, k, j) {
                    let start = id as usize * d;
                    add_into(&mut emb[start..start + d], dx.slice(s![k, j * d..(j + 1) * d]));
                }
            }
        }
    }

    /// Raw occurrence scores and, for the listwise model, the EoR score.
    pub fn raw_scores(&self, f: &MessageFeatures) -> Result<(Vec<f64>, Option<f64>)> {
        let fw = self.run(f, &mut Mode::Infer)?;
        Ok((fw.g.out.to_vec(), fw.h.map(|h| h.out[0])))
    }

    pub fn regularizer(&self) -> f64 {
        self.params
            .tensors
            .iter()
            .enumerate()
            .filter(|(i, _)| is_regularized(*i))
            .map(|(_, t)| t.data.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }
}

pub fn forward(model: &TermRankingModel, f: &MessageFeatures, mut mode: Mode) -> Result<TermDistribution> {
    if model.config.kind != ModelKind::Listwise {
        return Err(Error::InvalidInput("the pointwise model has no term distribution".into()));
    }
    let fw = model.run(f, &mut mode)?;
    let term_scores = fw.g.out.to_vec();
    let eor_score = fw.h.as_ref().expect("listwise").out[0];
    let mut all = term_scores.clone();
    all.push(eor_score);
    let probabilities = log_softmax(&all).into_iter().map(f64::exp).collect();
    Ok(TermDistribution { term_scores, eor_score, probabilities })
}

/// Target mass per occurrence followed by EoR: every silver term shares
/// `alpha` equally, split evenly across its occurrences.
pub fn target_distribution(tokens: &[String], query: &[String], alpha: f64) -> Result<Vec<f64>> {
    let q: BTreeSet<&str> = query.iter().map(String::as_str).collect();
    if q.is_empty() {
        return Err(Error::InvalidInput("empty silver query".into()));
    }
    let mut out = Vec::with_capacity(tokens.len() + 1);
    for t in tokens {
        out.push(if q.contains(t.as_str()) {
            let count = tokens.iter().filter(|u| *u == t).count();
            alpha / (count as f64 * q.len() as f64)
        } else {
            0.0
        });
    }
    if let Some(missing) = q.iter().find(|t| !tokens.iter().any(|u| u == *t)) {
        return Err(Error::InvalidInput(format!("silver term `{missing}` does not occur in the message")));
    }
    out.push(1.0 - alpha);
    Ok(out)
}

/// One (message, silver query, score) training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub pair_id: String,
    pub message: usize,
    pub query: Vec<String>,
    pub score: f64,
    target: Vec<f64>,
    silver_positions: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub messages: Vec<MessageFeatures>,
    pub pairs: Vec<TrainingPair>,
}

impl TrainingSet {
    pub fn new(messages: Vec<MessageFeatures>) -> Self {
        TrainingSet { messages, pairs: Vec::new() }
    }

    pub fn push(&mut self, pair_id: String, message: usize, query: Vec<String>, score: f64, alpha: f64) -> Result<()> {
        let corrupt = |reason: String| Error::CorruptPair { pair: pair_id.clone(), reason };
        let f = self.messages.get(message).ok_or_else(|| corrupt("unknown message".into()))?;
        if !(score.is_finite() && score > 0.0) {
            return Err(corrupt(format!("silver score {score} not positive")));
        }
        let target = target_distribution(&f.tokens, &query, alpha).map_err(|e| corrupt(e.to_string()))?;
        let q: HashSet<&str> = query.iter().map(String::as_str).collect();
        let silver_positions = (0..f.len()).filter(|&k| q.contains(f.tokens[k].as_str())).collect();
        self.pairs.push(TrainingPair { pair_id, message, query, score, target, silver_positions });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Data loss of one pair and the gradient of `weight * loss` w.r.t. the scores.
fn pair_objective(model: &TermRankingModel, pair: &TrainingPair, fw: &Forward, weight: f64) -> (f64, Array1<f64>, f64) {
    let g = &fw.g.out;
    let n = g.len();
    match model.config.kind {
        ModelKind::Listwise => {
            let h = fw.h.as_ref().expect("listwise").out[0];
            let mut all = g.to_vec();
            all.push(h);
            let logp = log_softmax(&all);
            let q = &pair.target;
            let q_sum: f64 = q.iter().sum();
            let xent: f64 = -q.iter().zip(&logp).filter(|(qi, _)| **qi > 0.0).map(|(qi, lp)| qi * lp).sum::<f64>();
            let kmin = *pair
                .silver_positions
                .iter()
                .min_by(|&&a, &&b| g[a].total_cmp(&g[b]).then(a.cmp(&b)))
                .expect("silver term present");
            let gap = g[kmin] - h;
            let loss = pair.score * (xent + gap * gap);
            let c = weight * pair.score;
            let mut dg = Array1::from_iter((0..n).map(|i| c * (logp[i].exp() * q_sum - q[i])));
            let mut dh = c * (logp[n].exp() * q_sum - q[n]);
            dg[kmin] += c * 2.0 * gap;
            dh -= c * 2.0 * gap;
            (loss, dg, dh)
        }
        ModelKind::Pointwise => {
            let positive: HashSet<usize> = pair.silver_positions.iter().copied().collect();
            let mut bce = 0.0;
            let c = weight * pair.score / n as f64;
            let mut dg = Array1::zeros(n);
            for k in 0..n {
                let y = if positive.contains(&k) { 1.0 } else { 0.0 };
                bce += softplus(g[k]) - y * g[k];
                dg[k] = c * (sigmoid(g[k]) - y);
            }
            (pair.score * bce / n as f64, dg, 0.0)
        }
    }
}

/// Batch objective: mean score-weighted data loss plus the weight penalty.
/// Returns the total loss, the data part, and the gradients.
pub fn compute_loss(
    model: &TermRankingModel,
    set: &TrainingSet,
    batch: &[usize],
    config: &TrainingConfig,
    mut mode: Mode,
) -> Result<(f64, f64, Params)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut grads = Params::zeros_like(&model.params);
    let weight = 1.0 / batch.len() as f64;
    let mut data = 0.0;
    for &p in batch {
        let pair = &set.pairs[p];
        let f = &set.messages[pair.message];
        let fw = model.run(f, &mut mode)?;
        let (loss, dg, dh) = pair_objective(model, pair, &fw, weight);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(pair.pair_id.clone()));
        }
        data += weight * loss;
        model.backward(f, &fw, &dg, dh, &mut grads);
    }
    let coef = config.reg_coefficient();
    for (i, (g, t)) in grads.tensors.iter_mut().zip(&model.params.tensors).enumerate() {
        if is_regularized(i) {
            for (gw, w) in g.data.iter_mut().zip(&t.data) {
                *gw += 2.0 * coef * w;
            }
        }
    }
    Ok((data + coef * model.regularizer(), data, grads))
}

/// Mean score-weighted data loss without dropout or penalty.
pub fn data_loss(model: &TermRankingModel, set: &TrainingSet) -> Result<f64> {
    let mut total = 0.0;
    for pair in &set.pairs {
        let fw = model.run(&set.messages[pair.message], &mut Mode::Infer)?;
        let (loss, _, _) = pair_objective(model, pair, &fw, 0.0);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(pair.pair_id.clone()));
        }
        total += loss;
    }
    Ok(total / set.len() as f64)
}

pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Adam { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, c: &TrainingConfig) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
            for (j, (w, gw)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = c.beta1 * *m + (1.0 - c.beta1) * gw;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gw * gw;
                *w -= c.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + c.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    /// Epoch of the returned parameters; 0 is the initial model.
    pub chosen_epoch: usize,
    /// Validation data loss after every epoch, starting with the initial model.
    pub validation_losses: Vec<f64>,
    /// Training data loss (no dropout) after every epoch, starting with the initial model.
    pub training_losses: Vec<f64>,
    /// Decision threshold of the pointwise model.
    pub threshold: Option<f64>,
}

/// Train with Adam over shuffled batches and keep the parameters with the
/// lowest validation data loss.
pub fn train(
    train_set: &TrainingSet,
    validation: &TrainingSet,
    model_config: &ModelConfig,
    config: &TrainingConfig,
) -> Result<(TermRankingModel, TrainingMetadata)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if validation.is_empty() {
        return Err(Error::InvalidInput("empty validation set".into()));
    }
    let mut model = init_model(model_config, config.seed)?;
    let mut r = rng(crate::util::derive_seed(config.seed, "batches"));
    let mut adam = Adam::new(&model.params);
    let mut best = model.clone();
    let mut meta = TrainingMetadata {
        seed: config.seed,
        epochs: config.epochs,
        steps: 0,
        chosen_epoch: 0,
        validation_losses: vec![data_loss(&model, validation)?],
        training_losses: vec![data_loss(&model, train_set)?],
        threshold: None,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut r);
        for batch in order.chunks(config.batch_size) {
            let (_, _, grads) = compute_loss(&model, train_set, batch, config, Mode::Train(&mut r))?;
            adam.step(&mut model.params, &grads, config);
            meta.steps += 1;
        }
        let val = data_loss(&model, validation)?;
        meta.training_losses.push(data_loss(&model, train_set)?);
        log::debug!("epoch {epoch}: validation data loss {val:.6}");
        if val < meta.validation_losses[meta.chosen_epoch] {
            meta.chosen_epoch = epoch;
            best = model.clone();
        }
        meta.validation_losses.push(val);
    }
    if model_config.kind == ModelKind::Pointwise {
        meta.threshold = Some(select_threshold(&pointwise_examples(&best, validation)?).0);
    }
    Ok((best, meta))
}

/// Occurrences ranked above EoR, deduplicated in rank order.
pub fn formulate_query_cnn(model: &TermRankingModel, f: &MessageFeatures) -> Result<Query> {
    let (g, h) = model.raw_scores(f)?;
    let h = h.ok_or_else(|| Error::InvalidInput("model has no EoR scorer".into()))?;
    Ok(query_from_scores(&f.tokens, &g, h))
}

pub fn query_from_scores(tokens: &[String], term_scores: &[f64], eor_score: f64) -> Query {
    let n = tokens.len();
    let mut order: Vec<usize> = (0..=n).collect();
    let score = |i: usize| if i == n { eor_score } else { term_scores[i] };
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for i in order {
        if i == n {
            break;
        }
        if seen.insert(tokens[i].as_str()) {
            out.push(tokens[i].clone());
        }
    }
    out
}

/// Maximum occurrence probability per unique term, in first-occurrence order.
pub fn pointwise_term_scores(model: &TermRankingModel, f: &MessageFeatures) -> Result<Vec<(String, f64)>> {
    let (g, _) = model.raw_scores(f)?;
    let mut out: Vec<(String, f64)> = Vec::new();
    for (t, s) in f.tokens.iter().zip(g) {
        let p = sigmoid(s);
        match out.iter_mut().find(|(u, _)| u == t) {
            Some(e) => e.1 = e.1.max(p),
            None => out.push((t.clone(), p)),
        }
    }
    Ok(out)
}

pub fn formulate_query_pointwise(model: &TermRankingModel, f: &MessageFeatures, threshold: f64) -> Result<Query> {
    Ok(select_above(&pointwise_term_scores(model, f)?, threshold))
}

pub fn select_above(scores: &[(String, f64)], threshold: f64) -> Query {
    scores.iter().filter(|(_, s)| *s > threshold).map(|(t, _)| t.clone()).collect()
}

/// (score, in silver query) for every unique term of every validation pair.
fn pointwise_examples(model: &TermRankingModel, set: &TrainingSet) -> Result<Vec<(f64, bool)>> {
    let mut out = Vec::new();
    for pair in &set.pairs {
        let q: HashSet<&str> = pair.query.iter().map(String::as_str).collect();
        for (t, s) in pointwise_term_scores(model, &set.messages[pair.message])? {
            out.push((s, q.contains(t.as_str())));
        }
    }
    Ok(out)
}

/// Threshold maximizing F1 of `score > threshold` over labelled examples.
/// Candidates are 0 and every observed score; ties go to the lower threshold.
pub fn select_threshold(examples: &[(f64, bool)]) -> (f64, f64) {
    let mut candidates: Vec<f64> = examples.iter().map(|e| e.0).collect();
    candidates.push(0.0);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let positives = examples.iter().filter(|e| e.1).count();
    let mut best = (0.0, -1.0);
    for &t in &candidates {
        let predicted = examples.iter().filter(|e| e.0 > t).count();
        let tp = examples.iter().filter(|e| e.0 > t && e.1).count();
        let f1 = if predicted + positives == 0 { 0.0 } else { 2.0 * tp as f64 / (predicted + positives) as f64 };
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    best
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ATRMODEL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: TermRankingModel,
    pub vocabulary: Vocabulary,
    pub vocabulary_hash: String,
    pub tagger: String,
    pub metadata: TrainingMetadata,
}

impl Checkpoint {
    pub fn new(model: TermRankingModel, vocabulary: Vocabulary, tagger: &str, metadata: TrainingMetadata) -> Self {
        let vocabulary_hash = vocabulary.hash();
        Checkpoint { model, vocabulary, vocabulary_hash, tagger: tagger.to_string(), metadata }
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        container::write(w, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::to_bytes(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self)
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut c: Checkpoint = container::read(r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        c.vocabulary.rebuild();
        if c.vocabulary.hash() != c.vocabulary_hash {
            return Err(Error::Format("vocabulary hash mismatch".into()));
        }
        c.model.config.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(kind: ModelKind, vocab: usize) -> ModelConfig {
        ModelConfig {
            kind,
            context_width: 3,
            embedding_dim: 3,
            hidden_dims: [5, 4],
            dropout: 0.5,
            vocab_size: vocab,
            aux_feature_count: FEATURE_COUNT,
            activation: Activation::Softplus,
            input: InputMask::full(),
        }
    }

    fn features(tokens: &[&str], ids: &[u32]) -> MessageFeatures {
        let aux = (0..tokens.len())
            .map(|k| {
                let mut row = [0.0; FEATURE_COUNT];
                for (c, x) in row.iter_mut().enumerate() {
                    *x = ((k * 7 + c * 3) % 11) as f64 / 10.0;
                }
                row
            })
            .collect();
        MessageFeatures { tokens: tokens.iter().map(|s| s.to_string()).collect(), vocab_ids: ids.to_vec(), aux }
    }

    fn q(terms: &[&str]) -> Vec<String> {
        terms.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn target_hand_values() {
        let t = target_distribution(&q(&["a", "b", "a", "c"]), &q(&["a", "b"]), 0.95).unwrap();
        let expect = [0.2375, 0.475, 0.2375, 0.0, 0.05];
        for (x, e) in t.iter().zip(expect) {
            assert!((x - e).abs() < 1e-15);
        }
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let all = target_distribution(&q(&["a", "b", "a"]), &q(&["a", "b"]), 1.0).unwrap();
        assert_eq!(*all.last().unwrap(), 0.0);
        assert!(target_distribution(&q(&["a"]), &q(&["z"]), 0.95).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = tiny_config(ModelKind::Listwise, 6);
        let a = init_model(&cfg, 1).unwrap();
        assert_eq!(a, init_model(&cfg, 1).unwrap());
        assert_ne!(a, init_model(&cfg, 2).unwrap());
        for t in &a.params.tensors {
            if t.shape.len() == 2 {
                let bound = (6.0 / (t.shape[0] + t.shape[1]) as f64).sqrt();
                assert!(t.data.iter().all(|w| w.abs() <= bound));
            } else {
                assert!(t.data.iter().all(|&b| b == 0.0));
            }
        }
        assert_eq!(a.params.tensors.len(), 13);
        assert_eq!(init_model(&tiny_config(ModelKind::Pointwise, 6), 1).unwrap().params.tensors.len(), 7);
    }

    #[test]
    fn forward_normalizes() {
        let cfg = tiny_config(ModelKind::Listwise, 6);
        let m = init_model(&cfg, 3).unwrap();
        let f = features(&["a", "b", "c", "a"], &[2, 3, 1, 2]);
        let d = forward(&m, &f, Mode::Infer).unwrap();
        assert_eq!(d.probabilities.len(), 5);
        assert!((d.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mut r = rng(0);
        let dt = forward(&m, &f, Mode::Train(&mut r)).unwrap();
        assert!((dt.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(forward(&m, &features(&[], &[]), Mode::Infer).is_err());
    }

    #[test]
    fn zero_parameters_give_uniform_distribution() {
        let cfg = tiny_config(ModelKind::Listwise, 6);
        let mut m = init_model(&cfg, 3).unwrap();
        for t in &mut m.params.tensors {
            t.data.iter_mut().for_each(|w| *w = 0.0);
        }
        let d = forward(&m, &features(&["a", "b", "c"], &[2, 3, 4]), Mode::Infer).unwrap();
        assert!(d.probabilities.iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn identical_windows_score_equally() {
        let cfg = tiny_config(ModelKind::Listwise, 6);
        let m = init_model(&cfg, 5).unwrap();
        // long run of one token: the two middle occurrences see identical windows
        let mut f = features(&["a"; 9], &[2; 9]);
        f.aux[4] = f.aux[3];
        let d = forward(&m, &f, Mode::Infer).unwrap();
        assert_eq!(d.term_scores[3].to_bits(), d.term_scores[4].to_bits());
    }

    #[test]
    fn query_cut_at_eor() {
        let toks = q(&["initech", "initech", "transition", "david"]);
        let out = query_from_scores(&toks, &[0.20, 0.18, 0.15, 0.07], 0.10);
        assert_eq!(out, q(&["initech", "transition"]));
        assert!(query_from_scores(&toks, &[0.2, 0.1, 0.0, 0.0], 0.5).is_empty());
        assert_eq!(query_from_scores(&q(&["x", "y"]), &[0.3, 0.9], -1.0), q(&["y", "x"]));
        let shifted = query_from_scores(&toks, &[5.20, 5.18, 5.15, 5.07], 5.10);
        assert_eq!(shifted, out);
    }

    #[test]
    fn threshold_sweep() {
        let ex = [(0.9, true), (0.7, true), (0.4, false), (0.2, false)];
        let (t, f1) = select_threshold(&ex);
        assert_eq!(f1, 1.0);
        assert!(ex.iter().all(|e| (e.0 > t) == e.1));
        let scores = vec![("a".to_string(), 0.9), ("b".to_string(), 0.4)];
        assert_eq!(select_above(&scores, 0.5), q(&["a"]));
        assert!(select_above(&scores, 1.0).is_empty());
    }

    fn small_set(kind: ModelKind) -> (ModelConfig, TrainingSet) {
        let cfg = tiny_config(kind, 7);
        let mut set = TrainingSet::new(vec![
            features(&["a", "b", "a", "c"], &[2, 3, 2, 4]),
            features(&["d", "e", "b"], &[5, 6, 3]),
        ]);
        set.push("p0".into(), 0, q(&["a", "b"]), 1.0, 0.95).unwrap();
        set.push("p1".into(), 1, q(&["e"]), 0.5, 0.95).unwrap();
        set.push("p2".into(), 0, q(&["c"]), 0.25, 0.95).unwrap();
        (cfg, set)
    }

    fn check_gradients(kind: ModelKind, coef: f64) {
        let (cfg, set) = small_set(kind);
        let mut model = init_model(&cfg, 11).unwrap();
        let tc = TrainingConfig { reg_coefficient: Some(coef), ..TrainingConfig::default() };
        let batch = [0, 1, 2];
        let (_, _, grads) = compute_loss(&model, &set, &batch, &tc, Mode::Infer).unwrap();
        let step = 1e-5;
        for ti in 0..model.params.tensors.len() {
            for j in 0..model.params.tensors[ti].data.len() {
                let orig = model.params.tensors[ti].data[j];
                model.params.tensors[ti].data[j] = orig + step;
                let plus = compute_loss(&model, &set, &batch, &tc, Mode::Infer).unwrap().0;
                model.params.tensors[ti].data[j] = orig - step;
                let minus = compute_loss(&model, &set, &batch, &tc, Mode::Infer).unwrap().0;
                model.params.tensors[ti].data[j] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let analytic = grads.tensors[ti].data[j];
                let scale = analytic.abs().max(numeric.abs());
                let err = if scale < 1e-8 { 0.0 } else { (analytic - numeric).abs() / scale };
                assert!(err < 1e-4, "{}[{j}]: analytic {analytic} numeric {numeric}", model.params.tensors[ti].name);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(ModelKind::Listwise, 5.0);
        check_gradients(ModelKind::Listwise, 0.0);
        check_gradients(ModelKind::Pointwise, 0.0);
    }

    #[test]
    fn doubling_score_doubles_contribution() {
        let (cfg, mut set) = small_set(ModelKind::Listwise);
        let model = init_model(&cfg, 2).unwrap();
        let tc = TrainingConfig { reg_coefficient: Some(0.0), ..TrainingConfig::default() };
        let one = compute_loss(&model, &set, &[0], &tc, Mode::Infer).unwrap().1;
        set.pairs[0].score *= 2.0;
        let two = compute_loss(&model, &set, &[0], &tc, Mode::Infer).unwrap().1;
        assert!((two - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_selects_best() {
        let (cfg, set) = small_set(ModelKind::Listwise);
        let tc = TrainingConfig { epochs: 5, batch_size: 2, learning_rate: 1e-3, seed: 4, ..TrainingConfig::default() };
        let (a, ma) = train(&set, &set, &cfg, &tc).unwrap();
        let (b, mb) = train(&set, &set, &cfg, &tc).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(ma.validation_losses.len(), 6);
        let best = ma.validation_losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(ma.validation_losses[ma.chosen_epoch], best);
        assert!(best <= ma.validation_losses[0]);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (cfg, set) = small_set(ModelKind::Listwise);
        let model = init_model(&cfg, 9).unwrap();
        let vocab = Vocabulary::from_terms(q(&["a", "b", "c", "d", "e"]));
        let meta = TrainingMetadata {
            seed: 9,
            epochs: 0,
            steps: 0,
            chosen_epoch: 0,
            validation_losses: vec![],
            training_losses: vec![],
            threshold: None,
        };
        let ck = Checkpoint::new(model, vocab, "lexicon-v1", meta);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::read(bytes.as_slice()).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let f = &set.messages[0];
        let p1 = forward(&ck.model, f, Mode::Infer).unwrap().probabilities;
        let p2 = forward(&back.model, f, Mode::Infer).unwrap().probabilities;
        assert_eq!(p1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), p2.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn ablation_masks_zero_inputs() {
        let m = InputMask::without(FeatureCategory::PartOfSpeech);
        assert_eq!(m.aux.iter().filter(|x| !**x).count(), 3);
        let mut cfg = tiny_config(ModelKind::Listwise, 6);
        cfg.input = InputMask::without(FeatureCategory::TermContext);
        let model = init_model(&cfg, 1).unwrap();
        let a = forward(&model, &features(&["a", "b"], &[2, 3]), Mode::Infer).unwrap();
        let b = forward(&model, &features(&["x", "y"], &[4, 5]), Mode::Infer).unwrap();
        assert_eq!(a.probabilities, b.probabilities);
    }
}
