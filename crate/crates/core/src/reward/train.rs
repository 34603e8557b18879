use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{derive_task1_labels, task, MtlModel, Task1Label, TaskMode};
use crate::data::{MtlExample, GENDER, ORIENTATION, RACE, RELIGION, SUBTYPES};
use crate::error::{bail, Result};
use crate::rng::Rng;
use crate::tensor::{Adam, AdamConfig, Float, Graph, NodeId};

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Class index per example.
    Class(Vec<usize>),
    /// Row-major `[examples, labels]` 0/1 targets.
    Multi(Vec<f64>),
}

/// Tokenized inputs and targets for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task: u8,
    pub inputs: Vec<Vec<usize>>,
    pub targets: Targets,
    pub n_labels: usize,
}

fn attribute_labels(task_id: u8) -> &'static [&'static str] {
    match task_id {
        2 => &SUBTYPES,
        3 => &GENDER,
        4 => &RELIGION,
        5 => &RACE,
        _ => &ORIENTATION,
    }
}

impl TaskData {
    /// Selects the examples labeled for `task_id`. With `strict`, an
    /// unlabeled example is a data error instead of being skipped.
    pub fn build<F: Float>(examples: &[MtlExample], model: &MtlModel<F>, task_id: u8, strict: bool) -> Result<Self> {
        let spec = task(task_id)?;
        let mut inputs = Vec::new();
        let mut classes = Vec::new();
        let mut multi = Vec::new();
        for (i, e) in examples.iter().enumerate() {
            e.validate()?;
            match spec.mode {
                TaskMode::Categorical => match derive_task1_labels(e) {
                    Task1Label::Toxic => classes.push(0),
                    Task1Label::Nontoxic => classes.push(1),
                    Task1Label::Excluded => {
                        if strict {
                            bail!(Data, "example {i} (toxicity {}) has no toxicity-task label", e.toxicity);
                        }
                        continue;
                    }
                },
                TaskMode::Multilabel => {
                    let source = if task_id == 2 { Some(&e.subtypes) } else { e.identities.as_ref() };
                    let Some(fields) = source else {
                        if strict {
                            bail!(Data, "example {i} carries no identity annotations for task {task_id}");
                        }
                        continue;
                    };
                    for l in attribute_labels(task_id) {
                        multi.push(if fields[*l] >= 0.5 { 1.0 } else { 0.0 });
                    }
                }
            }
            inputs.push(model.tokenize(&e.text));
        }
        Ok(TaskData {
            task: task_id,
            inputs,
            targets: match spec.mode {
                TaskMode::Categorical => Targets::Class(classes),
                TaskMode::Multilabel => Targets::Multi(multi),
            },
            n_labels: spec.labels.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDatasets {
    pub tasks: BTreeMap<u8, TaskData>,
}

impl TaskDatasets {
    /// Splits labeled examples into the six task datasets.
    pub fn from_examples<F: Float>(examples: &[MtlExample], model: &MtlModel<F>) -> Result<Self> {
        let mut tasks = BTreeMap::new();
        for id in 1..=6 {
            tasks.insert(id, TaskData::build(examples, model, id, false)?);
        }
        Ok(TaskDatasets { tasks })
    }
}

/// Mean loss of `data[idx]` for its task.
pub(crate) fn loss_node<F: Float>(
    model: &MtlModel<F>,
    g: &mut Graph<F>,
    data: &TaskData,
    idx: &[usize],
    dropout_rng: Option<&mut Rng>,
) -> Result<NodeId> {
    let batch: Vec<Vec<usize>> = idx.iter().map(|&i| data.inputs[i].clone()).collect();
    let c = model.encode(g, &batch, dropout_rng)?;
    let logits = model.head_logits(g, c, data.task)?;
    match &data.targets {
        Targets::Class(cls) => {
            let t: Vec<Option<usize>> = idx.iter().map(|&i| Some(cls[i])).collect();
            g.cross_entropy(logits, &t)
        }
        Targets::Multi(flat) => {
            let n = data.n_labels;
            let t: Vec<F> = idx
                .iter()
                .flat_map(|&i| flat[i * n..(i + 1) * n].iter().map(|&v| F::of(v)))
                .collect();
            let w = vec![F::of(1.0 / (idx.len() * n) as f64); t.len()];
            g.bce_with_logits(logits, &t, &w)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtlTrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub single_task_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
}

impl Default for MtlTrainConfig {
    fn default() -> Self {
        MtlTrainConfig {
            phase1_epochs: 2,
            phase2_epochs: 3,
            single_task_epochs: 5,
            batch_size: 32,
            adam: AdamConfig {
                lr: 5e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-6,
                weight_decay: 0.01,
            },
            clip_norm: 1.0,
        }
    }
}

/// One optimizer step of the schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub step: usize,
    pub epoch: usize,
    pub phase: u8,
    pub task: u8,
    pub batch: usize,
    pub loss: f64,
}

fn step<F: Float>(
    model: &mut MtlModel<F>,
    opt: &mut Adam<F>,
    data: &TaskData,
    idx: &[usize],
    clip_norm: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = loss_node(model, &mut g, data, idx, Some(rng))?;
    let value = g.value(loss).data()[0].f64();
    let grads = g.backward(loss);
    model.params.zero_grads();
    g.accumulate(&grads, &mut model.params);
    if clip_norm > 0.0 {
        model.params.clip_grad_norm(clip_norm);
    }
    opt.step(&mut model.params)?;
    Ok(value)
}

/// Every mini-batch of every listed task for one epoch, in shuffled order.
/// Task frequencies are therefore proportional to dataset sizes.
fn joint_batches(data: &TaskDatasets, tasks: &[u8], batch_size: usize, rng: &mut Rng) -> Vec<(u8, Vec<usize>)> {
    let mut batches = Vec::new();
    for &t in tasks {
        let mut idx: Vec<usize> = (0..data.tasks[&t].len()).collect();
        idx.shuffle(rng);
        batches.extend(idx.chunks(batch_size).map(|c| (t, c.to_vec())));
    }
    batches.shuffle(rng);
    batches
}

/// Tasks 2-6 for `phase1_epochs`, then all six jointly for
/// `phase2_epochs`. Returns the per-step schedule.
pub fn train_anti_curriculum<F: Float>(
    model: &mut MtlModel<F>,
    data: &TaskDatasets,
    config: &MtlTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<ScheduleEntry>> {
    for id in 1..=6u8 {
        match data.tasks.get(&id) {
            Some(d) if !d.is_empty() => {}
            _ if id >= 3 => bail!(Config, "no identity-labeled examples for task {id}"),
            _ => bail!(Config, "no examples for task {id}"),
        }
        if !model.heads.contains_key(&id) {
            bail!(Config, "model has no head for task {id}");
        }
    }
    if config.batch_size == 0 {
        bail!(Config, "batch_size must be positive");
    }
    let mut opt = Adam::new(config.adam, &model.params);
    let mut log = Vec::new();
    let phases = [
        (1u8, config.phase1_epochs, vec![2, 3, 4, 5, 6]),
        (2, config.phase2_epochs, vec![1, 2, 3, 4, 5, 6]),
    ];
    let mut epoch = 0;
    for (phase, epochs, tasks) in phases {
        for _ in 0..epochs {
            epoch += 1;
            for (t, idx) in joint_batches(data, &tasks, config.batch_size, rng) {
                let loss = step(model, &mut opt, &data.tasks[&t], &idx, config.clip_norm, rng)?;
                log.push(ScheduleEntry {
                    step: log.len(),
                    epoch,
                    phase,
                    task: t,
                    batch: idx.len(),
                    loss,
                });
            }
        }
    }
    Ok(log)
}

/// Plain fine-tuning on the toxicity task only.
pub fn train_single_task_ablation<F: Float>(
    model: &mut MtlModel<F>,
    task1: &TaskData,
    config: &MtlTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<ScheduleEntry>> {
    if task1.task != 1 || task1.is_empty() {
        bail!(Config, "the single-task ablation needs a nonempty toxicity dataset");
    }
    let mut opt = Adam::new(config.adam, &model.params);
    let mut log = Vec::new();
    for epoch in 1..=config.single_task_epochs {
        let mut idx: Vec<usize> = (0..task1.len()).collect();
        idx.shuffle(rng);
        for chunk in idx.chunks(config.batch_size.max(1)) {
            let loss = step(model, &mut opt, task1, chunk, config.clip_norm, rng)?;
            log.push(ScheduleEntry {
                step: log.len(),
                epoch,
                phase: 1,
                task: 1,
                batch: chunk.len(),
                loss,
            });
        }
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub support: usize,
}

/// Toxic-class precision, recall and F1 at threshold 0.5 on the examples
/// that carry a toxicity-task label.
pub fn evaluate_binary<F: Float>(model: &MtlModel<F>, examples: &[MtlExample]) -> Result<BinaryMetrics> {
    let labeled: Vec<(&MtlExample, bool)> = examples
        .iter()
        .filter_map(|e| match derive_task1_labels(e) {
            Task1Label::Toxic => Some((e, true)),
            Task1Label::Nontoxic => Some((e, false)),
            Task1Label::Excluded => None,
        })
        .collect();
    if labeled.is_empty() {
        bail!(Data, "no toxicity-labeled examples to evaluate");
    }
    let texts: Vec<&str> = labeled.iter().map(|(e, _)| e.text.as_str()).collect();
    let scores = model.toxicity_scores(&texts)?;
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for ((_, truth), p) in labeled.iter().zip(&scores) {
        let pred = *p >= 0.5;
        match (pred, *truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
        correct += usize::from(pred == *truth);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(BinaryMetrics {
        precision,
        recall,
        f1,
        accuracy: ratio(correct, labeled.len()),
        support: labeled.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::tests::{example, tiny_config, tiny_vocab};
    use crate::rng::stream;

    fn corpus() -> Vec<MtlExample> {
        let texts = [
            ("the cat saw a dog", 0.0),
            ("the scum saw a cat", 0.9),
            ("a quiet dog saw the woman", 0.0),
            ("the idiot saw a muslim dog", 0.8),
            ("a loud cat saw the dog", 0.0),
            ("the woman saw the scum", 0.7),
            ("a dog saw a quiet cat", 0.0),
            ("the muslim cat saw a idiot", 1.0),
            ("the loud dog", 0.0),
            ("a scum", 0.6),
        ];
        texts
            .iter()
            .enumerate()
            .map(|(i, (t, x))| example(t, *x, i % 2 == 0 || t.contains("woman") || t.contains("muslim")))
            .collect()
    }

    #[test]
    fn overfits_ten_examples() {
        let v = tiny_vocab();
        let mut cfg = tiny_config(&v);
        cfg.dropout = 0.0;
        let mut m = MtlModel::<f32>::new(cfg, v, &mut stream(0, "init")).unwrap();
        let data = TaskDatasets::from_examples(&corpus(), &m).unwrap();
        let tc = MtlTrainConfig {
            phase1_epochs: 20,
            phase2_epochs: 60,
            batch_size: 10,
            adam: AdamConfig {
                lr: 3e-3,
                ..MtlTrainConfig::default().adam
            },
            ..Default::default()
        };
        train_anti_curriculum(&mut m, &data, &tc, &mut stream(0, "train")).unwrap();
        let metrics = evaluate_binary(&m, &corpus()).unwrap();
        assert_eq!(metrics.accuracy, 1.0, "{metrics:?}");
    }

    #[test]
    fn phase_one_never_touches_task_one() {
        let v = tiny_vocab();
        let mut m = MtlModel::<f32>::new(tiny_config(&v), v, &mut stream(1, "init")).unwrap();
        let data = TaskDatasets::from_examples(&corpus(), &m).unwrap();
        let log = train_anti_curriculum(&mut m, &data, &MtlTrainConfig::default(), &mut stream(1, "train")).unwrap();
        assert!(log.iter().filter(|e| e.epoch <= 2).all(|e| e.task != 1 && e.phase == 1));
        assert!(log.iter().any(|e| e.epoch == 3 && e.task == 1));
        assert_eq!(log.iter().map(|e| e.epoch).max(), Some(5));
    }

    #[test]
    fn missing_identity_subset_is_a_config_error() {
        let v = tiny_vocab();
        let mut m = MtlModel::<f32>::new(tiny_config(&v), v, &mut stream(2, "init")).unwrap();
        let plain: Vec<MtlExample> = corpus()
            .into_iter()
            .map(|mut e| {
                e.identities = None;
                e
            })
            .collect();
        let data = TaskDatasets::from_examples(&plain, &m).unwrap();
        let err = train_anti_curriculum(&mut m, &data, &MtlTrainConfig::default(), &mut stream(2, "t")).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)), "{err}");
    }

    #[test]
    fn joint_batches_follow_dataset_sizes() {
        // Oracle: every example of every listed task appears exactly once per
        // epoch, so batch counts are ceil(n / batch) per task.
        let v = tiny_vocab();
        let m = MtlModel::<f32>::new(tiny_config(&v), v, &mut stream(3, "init")).unwrap();
        let many: Vec<MtlExample> = (0..7).flat_map(|_| corpus()).collect();
        let data = TaskDatasets::from_examples(&many, &m).unwrap();
        let batches = joint_batches(&data, &[1, 2, 3, 4, 5, 6], 8, &mut stream(3, "b"));
        for t in 1..=6u8 {
            let n = data.tasks[&t].len();
            let mine: Vec<&Vec<usize>> = batches.iter().filter(|b| b.0 == t).map(|b| &b.1).collect();
            assert_eq!(mine.len(), n.div_ceil(8), "task {t}");
            let mut seen: Vec<usize> = mine.into_iter().flatten().copied().collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
        assert_eq!(data.tasks[&1].len(), 70);
        assert_eq!(data.tasks[&2].len(), 70);
        // Identity annotations sit on 8 of the 10 base examples.
        assert_eq!(data.tasks[&3].len(), 56);
    }

    #[test]
    fn multilabel_loss_matches_hand_bce() {
        let v = tiny_vocab();
        let m = MtlModel::<f64>::new(tiny_config(&v), v, &mut stream(4, "init")).unwrap();
        let batch = [example("the woman saw the scum", 0.7, true), example("a quiet cat", 0.0, true)];
        let data = TaskData::build(&batch, &m, 3, true).unwrap();
        let mut g = Graph::new();
        let c = m.encode(&mut g, &data.inputs, None).unwrap();
        let logits = m.head_logits(&mut g, c, 3).unwrap();
        let z = g.value(logits).data().to_vec();
        let Targets::Multi(y) = &data.targets else { panic!() };
        let expected: f64 = z
            .iter()
            .zip(y)
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / z.len() as f64;
        assert_eq!(y[..4], [1.0, 0.0, 0.0, 0.0]);
        assert!((m.mtl_loss(&batch, 3).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn every_task_moves_the_shared_encoder() {
        let v = tiny_vocab();
        let mut m = MtlModel::<f64>::new(tiny_config(&v), v, &mut stream(5, "init")).unwrap();
        let data = TaskDatasets::from_examples(&corpus(), &m).unwrap();
        let shared = m.params.id("enc0.attn.qkv.w").unwrap();
        let tok = m.params.id("tok_emb").unwrap();
        for t in 1..=6u8 {
            let d = &data.tasks[&t];
            let idx: Vec<usize> = (0..d.len()).collect();
            let mut g = Graph::new();
            let loss = loss_node(&m, &mut g, d, &idx, None).unwrap();
            let grads = g.backward(loss);
            m.params.zero_grads();
            g.accumulate(&grads, &mut m.params);
            for p in [shared, tok] {
                let norm: f64 = m.params.get(p).grad().unwrap().iter().map(|x| x * x).sum();
                assert!(norm > 0.0, "task {t} leaves {} untouched", m.params.name(p));
            }
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let run = |seed| {
            let v = tiny_vocab();
            let mut m = MtlModel::<f32>::new(tiny_config(&v), v, &mut stream(seed, "init")).unwrap();
            let data = TaskDatasets::from_examples(&corpus(), &m).unwrap();
            let cfg = MtlTrainConfig {
                batch_size: 3,
                ..Default::default()
            };
            let log = train_anti_curriculum(&mut m, &data, &cfg, &mut stream(seed, "train")).unwrap();
            (log, m.toxicity_score("the scum saw a cat").unwrap())
        };
        assert_eq!(run(6), run(6));
        assert_ne!(run(6).1, run(7).1);
    }

    #[test]
    fn single_task_ablation_only_sees_task_one() {
        let v = tiny_vocab();
        let mut cfg = tiny_config(&v);
        cfg.tasks = vec![1];
        let mut m = MtlModel::<f32>::new(cfg, v, &mut stream(8, "init")).unwrap();
        let d = TaskData::build(&corpus(), &m, 1, false).unwrap();
        let log = train_single_task_ablation(&mut m, &d, &MtlTrainConfig::default(), &mut stream(8, "t")).unwrap();
        assert!(log.iter().all(|e| e.task == 1));
        assert_eq!(log.len(), 5 * d.len().div_ceil(32));
        let d2 = TaskData::build(&corpus(), &m, 2, false).unwrap();
        assert!(train_single_task_ablation(&mut m, &d2, &MtlTrainConfig::default(), &mut stream(8, "t")).is_err());
    }
}
