//! The concrete [`Trainer`] used by every experiment: PK batch sampling,
//! SGD with momentum, optional classifier heads and the re-id or
//! classification evaluation protocol.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{ClassificationDataset, ImageSet, ReidDataset};
use crate::criteria::ProbeBatch;
use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, NodeId};
use crate::reid::{
    cosine_softmax, cross_entropy, eval_cmc_map, metric_loss, traced_loss, EmbeddingSet, EvalReport,
    GalleryProbeSplit, LossKind, LossParams,
};
use crate::strategies::{TrainHooks, Trainer};
use crate::tensor::{Sgd, SgdConfig, Tensor, Trace, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Identities per batch.
    pub batch_p: usize,
    /// Samples per identity in a batch.
    pub batch_k: usize,
    pub loss: LossKind,
    pub loss_params: LossParams,
    /// Images per probe batch handed to data-driven criteria.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_p: 8,
            batch_k: 4,
            loss: LossKind::BatchHard,
            loss_params: LossParams::default(),
            probe_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd().validate()?;
        if self.batch_p == 0 || self.batch_k == 0 || self.probe_size == 0 {
            return Err(Error::Config("batch_p, batch_k and probe_size must be positive".into()));
        }
        if !self.loss.needs_classifier() && self.batch_p < 2 {
            return Err(Error::Config("metric losses need at least two identities per batch".into()));
        }
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug)]
enum Task {
    Classification {
        train: ImageSet,
        test: ImageSet,
    },
    Reid {
        train: ImageSet,
        val: (ImageSet, ImageSet),
        test: (ImageSet, ImageSet),
    },
}

const EVAL_CHUNK: usize = 256;
const MAX_RANK: usize = 20;

#[derive(Clone)]
pub struct TaskTrainer {
    task: Task,
    classes: usize,
    config: TrainConfig,
    sgd: Sgd,
    /// Classifier weights (one per part for the part loss); empty for metric losses.
    heads: Vec<Tensor>,
    rng: ChaCha8Rng,
    /// Members of every class in the training split.
    by_class: Vec<Vec<usize>>,
}

fn group_by_class(set: &ImageSet, classes: usize) -> Vec<Vec<usize>> {
    let mut by = vec![Vec::new(); classes];
    for (i, &id) in set.ids.iter().enumerate() {
        by[id].push(i);
    }
    by
}

impl TaskTrainer {
    fn new(task: Task, classes: usize, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let train = match &task {
            Task::Classification { train, .. } | Task::Reid { train, .. } => train,
        };
        let by_class = group_by_class(train, classes);
        Ok(TaskTrainer {
            sgd: Sgd::new(config.sgd())?,
            task,
            classes,
            config,
            heads: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            by_class,
        })
    }

    pub fn classification(data: &ClassificationDataset, config: TrainConfig, seed: u64) -> Result<Self> {
        let task = Task::Classification {
            train: data.train.clone(),
            test: data.test.clone(),
        };
        TaskTrainer::new(task, data.classes, config, seed)
    }

    pub fn reid(data: &ReidDataset, config: TrainConfig, seed: u64) -> Result<Self> {
        let task = Task::Reid {
            train: data.train.clone(),
            val: (data.val_gallery.clone(), data.val_query.clone()),
            test: (data.gallery.clone(), data.query.clone()),
        };
        TaskTrainer::new(task, data.train_ids, config, seed)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn train_set(&self) -> &ImageSet {
        match &self.task {
            Task::Classification { train, .. } | Task::Reid { train, .. } => train,
        }
    }

    /// Number of training images.
    pub fn train_len(&self) -> usize {
        self.train_set().len()
    }

    /// Mean number of training images per identity (class).
    pub fn samples_per_class(&self) -> f64 {
        self.train_len() as f64 / self.classes as f64
    }

    fn ensure_heads(&mut self, dim: usize) -> Result<()> {
        if !self.config.loss.needs_classifier() || !self.heads.is_empty() {
            return Ok(());
        }
        let (count, width) = match self.config.loss {
            LossKind::PartCe => {
                let p = self.config.loss_params.parts;
                if p == 0 || dim % p != 0 {
                    return Err(Error::Config(format!("embedding width {dim} is not divisible into {p} parts")));
                }
                (p, dim / p)
            }
            _ => (1, dim),
        };
        let std = (1.0 / width as f32).sqrt();
        self.heads = (0..count).map(|_| Tensor::randn(&[self.classes, width], std, &mut self.rng)).collect();
        Ok(())
    }

    /// Task loss on `output`; `heads` are the trace leaves of the classifier weights.
    fn loss_on(&self, trace: &mut Trace, output: Var, heads: &[Var], labels: &[usize]) -> Result<Var> {
        let p = self.config.loss_params;
        let kind = self.config.loss;
        let (var, _) = match kind {
            LossKind::CrossEntropy => {
                let logits = trace.dense(output, heads[0], None)?;
                traced_loss(trace, &[logits], |t, m| cross_entropy(t, &m[0], labels))?
            }
            LossKind::CosineSoftmax => {
                traced_loss(trace, &[output, heads[0]], |t, m| cosine_softmax(t, &m[0], &m[1], labels, p.kappa))?
            }
            LossKind::PartCe => {
                let width = trace.value(output).dim(1) / heads.len();
                let mut inputs = vec![output];
                inputs.extend_from_slice(heads);
                traced_loss(trace, &inputs, |t, m| {
                    let parts: Vec<Vec<Vec<_>>> = (0..heads.len())
                        .map(|k| {
                            m[0].iter()
                                .map(|row| {
                                    let f = &row[k * width..(k + 1) * width];
                                    m[k + 1].iter().map(|w| t.dot(w, f)).collect()
                                })
                                .collect()
                        })
                        .collect();
                    crate::reid::part_ce(t, &parts, labels)
                })?
            }
            _ => traced_loss(trace, &[output], |t, m| metric_loss(t, kind, &m[0], labels, &p))?,
        };
        Ok(var)
    }

    /// `P` classes times `K` samples each (with replacement when a class is small).
    fn pk_batch(&mut self, classes: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let k = self.config.batch_k;
        let mut idx = Vec::with_capacity(classes.len() * k);
        let mut labels = Vec::with_capacity(classes.len() * k);
        for &c in classes {
            let members = &self.by_class[c];
            if members.len() >= k {
                let mut pick = members.clone();
                pick.shuffle(&mut self.rng);
                idx.extend_from_slice(&pick[..k]);
            } else {
                for _ in 0..k {
                    idx.push(members[self.rng.random_range(0..members.len())]);
                }
            }
            labels.extend(std::iter::repeat_n(c, k));
        }
        (idx, labels)
    }

    fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        let mut classes: Vec<usize> = (0..self.classes).filter(|&c| !self.by_class[c].is_empty()).collect();
        let p = self.config.batch_p.min(classes.len());
        let per_batch = p * self.config.batch_k;
        let batches = self.train_len().div_ceil(per_batch).max(1);
        let mut out = Vec::with_capacity(batches);
        let mut pool: Vec<usize> = Vec::new();
        for _ in 0..batches {
            if pool.len() < p {
                classes.shuffle(&mut self.rng);
                pool.extend_from_slice(&classes);
            }
            out.push(pool.drain(..p).collect());
        }
        out
    }

    fn embed(graph: &NetworkGraph, set: &ImageSet) -> Result<EmbeddingSet> {
        let mut features = Vec::with_capacity(set.len());
        let idx: Vec<usize> = (0..set.len()).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let out = graph.predict(&set.gather(chunk))?;
            if out.rank() != 2 {
                return Err(Error::invalid("network output is not a feature matrix"));
            }
            features.extend(out.data().chunks(out.dim(1)).map(<[f32]>::to_vec));
        }
        EmbeddingSet::new(features, set.ids.clone(), set.cams.clone())
    }

    fn eval_reid(graph: &NetworkGraph, gallery: &ImageSet, query: &ImageSet) -> Result<EvalReport> {
        let split = GalleryProbeSplit {
            gallery: Self::embed(graph, gallery)?,
            query: Self::embed(graph, query)?,
        };
        eval_cmc_map(&split, MAX_RANK)
    }

    /// Top-1 accuracy, by classifier head when there is one and by nearest
    /// class mean of the training embeddings otherwise. Reported as both
    /// rank-1 and mAP.
    fn eval_classification(&self, graph: &NetworkGraph, test: &ImageSet) -> Result<EvalReport> {
        let emb = Self::embed(graph, test)?;
        let prototypes: Vec<Vec<f32>> = if self.heads.len() == 1 && self.config.loss == LossKind::CrossEntropy {
            Vec::new()
        } else {
            let train = Self::embed(graph, self.train_set())?;
            let d = train.features.first().map_or(0, Vec::len);
            let mut sums = vec![vec![0.0f32; d]; self.classes];
            let mut counts = vec![0usize; self.classes];
            for (f, &id) in train.features.iter().zip(&train.ids) {
                sums[id].iter_mut().zip(f).for_each(|(s, v)| *s += v);
                counts[id] += 1;
            }
            sums.iter_mut().zip(&counts).for_each(|(s, &c)| s.iter_mut().for_each(|v| *v /= c.max(1) as f32));
            sums
        };
        let mut correct = 0usize;
        for (f, &id) in emb.features.iter().zip(&emb.ids) {
            let pred = if prototypes.is_empty() {
                let w = &self.heads[0];
                let d = w.dim(1);
                argmax(w.data().chunks(d).map(|row| row.iter().zip(f).map(|(a, b)| a * b).sum::<f32>()))
            } else {
                argmax(prototypes.iter().map(|p| -p.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f32>()))
            };
            correct += usize::from(pred == id);
        }
        let acc = correct as f64 / emb.len().max(1) as f64;
        Ok(EvalReport {
            cmc: vec![acc],
            map: acc,
            ap: Vec::new(),
            skipped: 0,
        })
    }

    /// Metrics on the held-out test identities (classes for a source task).
    pub fn evaluate_test(&self, graph: &NetworkGraph) -> Result<EvalReport> {
        match &self.task {
            Task::Classification { test, .. } => self.eval_classification(graph, test),
            Task::Reid { test, .. } => Self::eval_reid(graph, &test.0, &test.1),
        }
    }

    /// Training-split accuracy for classification tasks.
    pub fn train_accuracy(&self, graph: &NetworkGraph) -> Result<f64> {
        self.eval_classification(graph, self.train_set()).map(|r| r.map)
    }

    /// Embeddings of the training images (for domain statistics).
    pub fn train_embeddings(&self, graph: &NetworkGraph) -> Result<Vec<Vec<f32>>> {
        Ok(Self::embed(graph, self.train_set())?.features)
    }
}

fn argmax(values: impl Iterator<Item = f32>) -> usize {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

impl Trainer for TaskTrainer {
    fn input_shape(&self) -> [usize; 4] {
        let [c, h, w] = self.train_set().image_shape();
        [1, c, h, w]
    }

    fn train_step(&mut self, graph: &mut NetworkGraph, batch: &ProbeBatch, hooks: &mut TrainHooks<'_>) -> Result<f64> {
        let allowed = |n: NodeId, t: Option<&BTreeSet<NodeId>>| t.is_none_or(|s| s.contains(&n));
        if let Some(t) = hooks.trainable {
            if !graph.nodes().iter().any(|n| !n.params.is_empty() && t.contains(&n.id)) {
                return Err(Error::invalid("no trainable parameters"));
            }
        }
        let mut trace = Trace::new();
        let params = graph.bind(&mut trace);
        let x = trace.leaf(batch.inputs.clone());
        let outs = graph.forward(&mut trace, x, &params)?;
        let output = outs[graph.output().0];
        self.ensure_heads(trace.value(output).dim(1))?;
        let heads: Vec<Var> = self.heads.iter().map(|h| trace.leaf(h.clone())).collect();
        let mut loss = self.loss_on(&mut trace, output, &heads, &batch.labels)?;
        if let Some(reg) = hooks.regularizer.as_deref_mut() {
            if let Some(pen) = reg.penalty(graph, &mut trace, &params)? {
                loss = trace.add(loss, pen)?;
            }
        }
        let value = f64::from(trace.value(loss).item());
        trace.backward(loss)?;
        graph.store_grads(&trace, &params);
        for (id, i, p) in graph.params_mut() {
            if allowed(id, hooks.trainable) {
                self.sgd.update((id.0, i), p)?;
            }
            p.clear_grad();
        }
        for (h, (w, v)) in self.heads.iter_mut().zip(&heads).enumerate() {
            let g = trace.grad(*v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; w.numel()]);
            w.set_grad(g)?;
            self.sgd.update((usize::MAX - h, 0), w)?;
            w.clear_grad();
        }
        Ok(value)
    }

    fn train_epoch(&mut self, graph: &mut NetworkGraph, hooks: &mut TrainHooks<'_>) -> Result<f64> {
        let batches = self.epoch_batches();
        let mut total = 0.0;
        for classes in &batches {
            let (idx, labels) = self.pk_batch(classes);
            let batch = ProbeBatch::new(self.train_set().gather(&idx), labels)?;
            total += self.train_step(graph, &batch, hooks)?;
        }
        let mean = total / batches.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite { op: "train_epoch" });
        }
        Ok(mean)
    }

    /// Validation metrics (re-id) or held-out accuracy (classification).
    fn evaluate(&mut self, graph: &NetworkGraph) -> Result<EvalReport> {
        match &self.task {
            Task::Classification { test, .. } => self.eval_classification(graph, test),
            Task::Reid { val, .. } => Self::eval_reid(graph, &val.0, &val.1),
        }
    }

    fn probe(&mut self) -> Result<ProbeBatch> {
        let n = self.config.probe_size;
        let p = self.config.batch_p.max(1);
        let k = n.div_ceil(p);
        let mut classes: Vec<usize> = (0..self.classes).filter(|&c| !self.by_class[c].is_empty()).collect();
        classes.shuffle(&mut self.rng);
        classes.truncate(p);
        let saved = self.config.batch_k;
        self.config.batch_k = k;
        let (mut idx, mut labels) = self.pk_batch(&classes);
        self.config.batch_k = saved;
        idx.truncate(n);
        labels.truncate(n);
        ProbeBatch::new(self.train_set().gather(&idx), labels)
    }

    fn loss(&self, trace: &mut Trace, output: Var, labels: &[usize]) -> Result<Var> {
        let heads: Vec<Var> = self.heads.iter().map(|h| trace.leaf(h.clone())).collect();
        if self.config.loss.needs_classifier() && heads.is_empty() {
            return Err(Error::invalid("classifier head is created on the first training step"));
        }
        self.loss_on(trace, output, &heads, labels)
    }

    fn graph_changed(&mut self) {
        self.sgd.reset();
    }
}
