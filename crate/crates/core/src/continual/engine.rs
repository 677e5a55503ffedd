//! The class-incremental training engine.
//!
//! Per task: expand the prompt pool, train on mini-batches drawn from the
//! union of current-task data and the replay buffer, then add herded
//! exemplars of the new classes. The backbone stays constant in every
//! training graph, so freezing holds by construction; only the current
//! task's pool chunks (plus all textual prompts in VT mode) are staged as
//! parameters.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{sgd_step, Graph, OptimizerState, Tensor, Value};
use crate::config::{ExperimentConfig, Mode};
use crate::continual::buffer::{select_exemplars, ReplayBuffer};
use crate::continual::stream::{split_tasks, TaskStream};
use crate::encoders::{zero_shot_accuracy, DualEncoder, TokenInput};
use crate::error::{Error, Result};
use crate::evaluation::{
    pairwise_diversity, representation_drift, ClassMeansSnapshot, LossSample, MetricsLog,
};
use crate::objectives::{composite_loss, LossBreakdown, Objective};
use crate::prompt_pool::{PromptPool, TextualPromptSet, VisualPromptPool};
use crate::seeding;
use crate::synthdata::SynthDataset;

/// Largest evaluation graph, in examples.
const EVAL_CHUNK: usize = 64;

/// Stateful driver of one continual-learning run.
pub struct Trainer<'a> {
    dataset: &'a SynthDataset,
    stream: &'a TaskStream,
    encoder: &'a DualEncoder,
    mode: Mode,
    cfg: &'a ExperimentConfig,
    pool: PromptPool,
    buffer: ReplayBuffer,
    tasks_done: usize,
    seed: u64,
    train_queries: Vec<Vec<f64>>,
    test_queries: Vec<Vec<f64>>,
    static_protos: Option<Tensor>,
    loss_curve: Vec<LossSample>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        dataset: &'a SynthDataset,
        stream: &'a TaskStream,
        encoder: &'a DualEncoder,
        cfg: &'a ExperimentConfig,
        seed: u64,
    ) -> Result<Self> {
        if !encoder.is_frozen() {
            return Err(Error::Contract(
                "continual training requires a frozen encoder".into(),
            ));
        }
        if encoder.tau() != cfg.hp.tau {
            return Err(Error::Config(format!(
                "hp.tau: {} differs from the encoder checkpoint temperature {}",
                cfg.hp.tau,
                encoder.tau()
            )));
        }
        if !cfg.mode.trains() {
            return Err(Error::Contract(
                "zero-shot mode has no training loop".into(),
            ));
        }
        let dim = encoder.cfg.model_dim;
        let visual_depth = cfg.effective_visual_depth();
        let textual_depth = cfg.effective_textual_depth();

        let visual = VisualPromptPool::new(visual_depth, cfg.hp.visual_prompt_len, dim)?;
        let textual = if cfg.mode.uses_textual_prompts() {
            Some(TextualPromptSet::new(
                textual_depth,
                cfg.hp.textual_prompt_len,
                dim,
            )?)
        } else {
            None
        };

        // The frozen query feature of every example is reused across all
        // tasks, batches and evaluation stages.
        let train_queries = dataset
            .train
            .iter()
            .map(|e| Ok(encoder.query_feature(&e.image_tokens)?.data().to_vec()))
            .collect::<Result<_>>()?;
        let test_queries = dataset
            .test
            .iter()
            .map(|e| Ok(encoder.query_feature(&e.image_tokens)?.data().to_vec()))
            .collect::<Result<_>>()?;

        Ok(Self {
            dataset,
            stream,
            encoder,
            mode: cfg.mode,
            cfg,
            pool: PromptPool::new(visual, textual),
            buffer: ReplayBuffer::new(cfg.hp.exemplars_per_class)?,
            tasks_done: 0,
            seed,
            train_queries,
            test_queries,
            static_protos: None,
            loss_curve: Vec::new(),
        })
    }

    pub fn tasks_done(&self) -> usize {
        self.tasks_done
    }

    pub fn pool(&self) -> &PromptPool {
        &self.pool
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn loss_curve(&self) -> &[LossSample] {
        &self.loss_curve
    }

    pub fn into_pool(self) -> PromptPool {
        self.pool
    }

    pub fn seen_classes(&self) -> Vec<usize> {
        if self.tasks_done == 0 {
            Vec::new()
        } else {
            self.stream.seen_classes(self.tasks_done - 1)
        }
    }

    /// Frozen-text-encoder prototypes for the given classes, one unit row
    /// per class.
    fn template_prototypes(&self, classes: &[usize]) -> Result<Tensor> {
        let dim = self.encoder.cfg.model_dim;
        let mut data = Vec::with_capacity(classes.len() * dim);
        for &c in classes {
            let toks = self.dataset.cfg.template_tokens(c);
            let w = self.encoder.encode_text(&toks, None)?;
            data.extend_from_slice(w.data());
        }
        Tensor::new(data, &[classes.len(), dim])
    }

    /// Prompted prototypes from the current textual prompts (no gradients).
    fn prompted_prototypes(&self, classes: &[usize]) -> Result<Tensor> {
        let texts = self
            .pool
            .textual
            .as_ref()
            .ok_or_else(|| Error::Contract("textual prompts not configured".into()))?;
        let dim = self.encoder.cfg.model_dim;
        let mut g = Graph::new();
        let tower = self.encoder.text_tower().stage(&mut g, "text", false)?;
        let prompt_map = texts.stage(&mut g, false)?;
        let mut data = Vec::with_capacity(classes.len() * dim);
        for &c in classes {
            let ps = prompt_map.get(&c).ok_or_else(|| {
                Error::Contract(format!("class {c} has no textual prompt"))
            })?;
            let toks = self.dataset.cfg.template_tokens(c);
            let w = tower.encode(&mut g, TokenInput::Ids(&toks), Some(ps))?;
            data.extend_from_slice(g.value(w).data());
        }
        Tensor::new(data, &[classes.len(), dim])
    }

    /// Trains the next task end to end and folds its exemplars into the
    /// replay buffer.
    pub fn train_next_task(&mut self) -> Result<()> {
        let t = self.tasks_done;
        let task = self
            .stream
            .tasks
            .get(t)
            .ok_or_else(|| Error::Contract(format!("no task {t} in the stream")))?;
        let hp = &self.cfg.hp;

        self.pool.expand_for_task(
            t,
            &task.classes,
            hp.prompts_per_task,
            seeding::mix(self.seed, "pool"),
        )?;

        let seen = self.stream.seen_classes(t);
        if !self.mode.uses_textual_prompts() {
            // Static prototypes are fixed for the whole task.
            self.static_protos = Some(self.template_prototypes(&seen)?);
        }
        let class_row: BTreeMap<usize, usize> =
            seen.iter().enumerate().map(|(r, &c)| (c, r)).collect();

        let mut union: Vec<usize> = task.train_indices.clone();
        union.extend(self.buffer.all_indices());
        let steps_per_epoch = union.len().div_ceil(hp.batch_size);
        let total_steps = hp.epochs * steps_per_epoch;
        let mut opt = OptimizerState::new(hp.momentum, hp.lr, total_steps);

        let mut step = 0usize;
        for epoch in 0..hp.epochs {
            let mut order = union.clone();
            let mut rng = ChaCha20Rng::seed_from_u64(seeding::mix(
                self.seed,
                &format!("shuffle-t{t}-e{epoch}"),
            ));
            order.shuffle(&mut rng);
            for chunk in order.chunks(hp.batch_size) {
                let breakdown = self.train_batch(chunk, &class_row, t, &mut opt)?;
                if !breakdown.total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at task {t} epoch {epoch} step {step}: \
                         ce={} tpcl={} div={}",
                        breakdown.ce, breakdown.tpcl, breakdown.div
                    )));
                }
                self.loss_curve.push(LossSample {
                    task: t,
                    step,
                    total: breakdown.total,
                    ce: breakdown.ce,
                    tpcl: breakdown.tpcl,
                    div: breakdown.div,
                });
                step += 1;
            }
        }

        // Herded exemplars of the new classes, selected in the frozen query
        // space over each class's full training set.
        for &c in &task.classes {
            let members: Vec<usize> = task
                .train_indices
                .iter()
                .copied()
                .filter(|&i| self.dataset.train[i].label == c)
                .collect();
            if members.is_empty() {
                return Err(Error::Contract(format!(
                    "task {t} has no training examples for class {c}"
                )));
            }
            let feats: Vec<Vec<f64>> = members
                .iter()
                .map(|&i| self.train_queries[i].clone())
                .collect();
            let picked = select_exemplars(&feats, hp.exemplars_per_class)?;
            let indices = picked.into_iter().map(|p| members[p]).collect();
            self.buffer.add_class(c, indices)?;
        }

        self.tasks_done += 1;
        Ok(())
    }

    fn train_batch(
        &mut self,
        batch: &[usize],
        class_row: &BTreeMap<usize, usize>,
        task_id: usize,
        opt: &mut OptimizerState,
    ) -> Result<LossBreakdown> {
        let hp = &self.cfg.hp;
        let dim = self.encoder.cfg.model_dim;
        let mut g = Graph::new();
        let img = self.encoder.image_tower().stage(&mut g, "image", false)?;
        let staged_pool = self.pool.visual.stage(&mut g, Some(task_id))?;

        let mut qdata = Vec::with_capacity(batch.len() * dim);
        for &i in batch {
            qdata.extend_from_slice(&self.train_queries[i]);
        }
        let queries = g.constant(Tensor::new(qdata, &[batch.len(), dim])?);
        let affinities = staged_pool.affinities(&mut g, queries)?;

        let mut z_rows = Vec::with_capacity(batch.len());
        for (row, &i) in batch.iter().enumerate() {
            let prompts = staged_pool.prompts_for_row(&mut g, &affinities, row)?;
            let e = &self.dataset.train[i];
            z_rows.push(img.encode(
                &mut g,
                TokenInput::Continuous(&e.image_tokens),
                Some(&prompts),
            )?);
        }
        let z = g.concat(&z_rows, 0)?;

        let seen = self.stream.seen_classes(task_id);
        let protos: Value = if self.mode.uses_textual_prompts() {
            let tower = self.encoder.text_tower().stage(&mut g, "text", false)?;
            let texts = self
                .pool
                .textual
                .as_ref()
                .ok_or_else(|| Error::Contract("textual prompts not configured".into()))?;
            let prompt_map = texts.stage(&mut g, true)?;
            let mut rows = Vec::with_capacity(seen.len());
            for &c in &seen {
                let ps = prompt_map.get(&c).ok_or_else(|| {
                    Error::Contract(format!("class {c} has no textual prompt"))
                })?;
                let toks = self.dataset.cfg.template_tokens(c);
                rows.push(tower.encode(&mut g, TokenInput::Ids(&toks), Some(ps))?);
            }
            g.concat(&rows, 0)?
        } else {
            let protos = self
                .static_protos
                .clone()
                .ok_or_else(|| Error::Contract("static prototypes not prepared".into()))?;
            g.constant(protos)
        };

        let labels: Vec<usize> = batch
            .iter()
            .map(|&i| class_row[&self.dataset.train[i].label])
            .collect();

        let objective = match self.mode {
            Mode::CeOnly => Objective::CeOnly,
            Mode::TpptV | Mode::Joint => Objective::TpptV,
            Mode::TpptVt => Objective::TpptVt { alpha: hp.alpha },
            Mode::ZeroShot => unreachable!("zero-shot never trains"),
        };
        let (loss, breakdown) = composite_loss(&mut g, objective, z, protos, &labels, hp.tau)?;
        g.set_loss(loss)?;

        let grads = g.backward()?;
        let grad_map = g.param_grads(&grads);
        drop(g);

        let PromptPool { visual, textual } = &mut self.pool;
        let mut params = visual.trainable_params_mut(task_id)?;
        if self.mode.uses_textual_prompts() {
            if let Some(texts) = textual {
                params.extend(texts.params_mut());
            }
        }
        let refs: Vec<(&str, &mut Tensor)> = params
            .iter_mut()
            .map(|(n, t)| (n.as_str(), &mut **t))
            .collect();
        sgd_step(refs, &grad_map, opt)?;
        Ok(breakdown)
    }

    /// Prompted embeddings for test examples, in chunked read-only graphs.
    fn embed_test_examples(&self, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        let dim = self.encoder.cfg.model_dim;
        let mut out = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let img = self.encoder.image_tower().stage(&mut g, "image", false)?;
            let staged_pool = self.pool.visual.stage(&mut g, None)?;
            let mut qdata = Vec::with_capacity(chunk.len() * dim);
            for &i in chunk {
                qdata.extend_from_slice(&self.test_queries[i]);
            }
            let queries = g.constant(Tensor::new(qdata, &[chunk.len(), dim])?);
            let affinities = staged_pool.affinities(&mut g, queries)?;
            for (row, &i) in chunk.iter().enumerate() {
                let prompts = staged_pool.prompts_for_row(&mut g, &affinities, row)?;
                let e = &self.dataset.test[i];
                let z = img.encode(
                    &mut g,
                    TokenInput::Continuous(&e.image_tokens),
                    Some(&prompts),
                )?;
                out.push(g.value(z).data().to_vec());
            }
        }
        Ok(out)
    }

    /// Accuracy row over the seen tasks plus the class-means snapshot.
    pub fn evaluate_stage(&self) -> Result<(Vec<f64>, ClassMeansSnapshot)> {
        if self.tasks_done == 0 {
            return Err(Error::Contract("no task trained yet".into()));
        }
        let stage = self.tasks_done - 1;
        let seen = self.stream.seen_classes(stage);
        let protos = if self.mode.uses_textual_prompts() {
            self.prompted_prototypes(&seen)?
        } else {
            self.template_prototypes(&seen)?
        };

        let mut row = Vec::with_capacity(stage + 1);
        let mut class_embeddings: Vec<(usize, Vec<f64>)> = Vec::new();
        for task in &self.stream.tasks[..=stage] {
            let embeddings = self.embed_test_examples(&task.test_indices)?;
            let mut correct = 0usize;
            for (&i, z) in task.test_indices.iter().zip(&embeddings) {
                let label = self.dataset.test[i].label;
                let pred = argmax_class(z, &protos, &seen);
                if pred == label {
                    correct += 1;
                }
                class_embeddings.push((label, z.clone()));
            }
            row.push(correct as f64 / task.test_indices.len() as f64);
        }
        let snapshot = ClassMeansSnapshot::from_embeddings(stage + 1, &class_embeddings)?;
        Ok((row, snapshot))
    }
}

/// Nearest-prototype prediction; with shared temperature softmax this is
/// exactly the probability-rule argmax.
fn argmax_class(z: &[f64], protos: &Tensor, classes: &[usize]) -> usize {
    let dim = z.len();
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for (k, &class) in classes.iter().enumerate() {
        let cos: f64 = (0..dim).map(|j| z[j] * protos.at(k, j)).sum();
        if cos > best.0 {
            best = (cos, class);
        }
    }
    best.1
}

/// Everything one run produces.
pub struct RunArtifacts {
    pub log: MetricsLog,
    pub pool: Option<PromptPool>,
}

/// Runs the full class-incremental protocol for one seed and assembles the
/// metrics log. Requires a frozen, pretrained encoder.
pub fn run_stream(
    dataset: &SynthDataset,
    encoder: &DualEncoder,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let stream = split_tasks(dataset, cfg.hp.tasks, seed)?;
    let all_classes: Vec<usize> = (0..dataset.cfg.n_classes).collect();
    let zero_shot = zero_shot_accuracy(encoder, dataset, &dataset.test, &all_classes)?;

    let test_sizes: Vec<usize> = stream.tasks.iter().map(|t| t.test_indices.len()).collect();
    let mut matrix = crate::evaluation::AccuracyMatrix::new(test_sizes)?;
    let mut drifts: Vec<Option<f64>> = Vec::new();
    let mut diversities: Vec<Option<f64>> = Vec::new();
    let mut prev_snapshot: Option<ClassMeansSnapshot> = None;

    let echo = cfg.echo()?;
    let mode_name = cfg.mode.as_str().to_string();

    if cfg.mode.trains() {
        let mut trainer = Trainer::new(dataset, &stream, encoder, cfg, seed)?;
        for _ in 0..stream.len() {
            trainer.train_next_task()?;
            let (row, snapshot) = trainer.evaluate_stage()?;
            matrix.push_row(row)?;
            drifts.push(match &prev_snapshot {
                Some(prev) => Some(representation_drift(&snapshot, prev)?),
                None => None,
            });
            diversities.push(if snapshot.len() >= 2 {
                Some(pairwise_diversity(&snapshot)?)
            } else {
                None
            });
            prev_snapshot = Some(snapshot);
        }
        let loss_curve = trainer.loss_curve().to_vec();
        let pool = trainer.into_pool();
        let log = MetricsLog::assemble(
            echo,
            seed,
            mode_name,
            matrix,
            drifts,
            diversities,
            zero_shot,
            loss_curve,
        )?;
        Ok(RunArtifacts {
            log,
            pool: Some(pool),
        })
    } else {
        // Zero-shot: template prototypes over seen classes, no prompts.
        let test_queries: Vec<Vec<f64>> = dataset
            .test
            .iter()
            .map(|e| Ok(encoder.query_feature(&e.image_tokens)?.data().to_vec()))
            .collect::<Result<_>>()?;
        for stage in 0..stream.len() {
            let seen = stream.seen_classes(stage);
            let dim = encoder.cfg.model_dim;
            let mut data = Vec::with_capacity(seen.len() * dim);
            for &c in &seen {
                let toks = dataset.cfg.template_tokens(c);
                data.extend_from_slice(encoder.encode_text(&toks, None)?.data());
            }
            let protos = Tensor::new(data, &[seen.len(), dim])?;

            let mut row = Vec::with_capacity(stage + 1);
            let mut class_embeddings: Vec<(usize, Vec<f64>)> = Vec::new();
            for task in &stream.tasks[..=stage] {
                let mut correct = 0usize;
                for &i in &task.test_indices {
                    let z = &test_queries[i];
                    let label = dataset.test[i].label;
                    if argmax_class(z, &protos, &seen) == label {
                        correct += 1;
                    }
                    class_embeddings.push((label, z.clone()));
                }
                row.push(correct as f64 / task.test_indices.len() as f64);
            }
            matrix.push_row(row)?;
            let snapshot = ClassMeansSnapshot::from_embeddings(stage + 1, &class_embeddings)?;
            drifts.push(match &prev_snapshot {
                Some(prev) => Some(representation_drift(&snapshot, prev)?),
                None => None,
            });
            diversities.push(if snapshot.len() >= 2 {
                Some(pairwise_diversity(&snapshot)?)
            } else {
                None
            });
            prev_snapshot = Some(snapshot);
        }
        let log = MetricsLog::assemble(
            echo,
            seed,
            mode_name,
            matrix,
            drifts,
            diversities,
            zero_shot,
            vec![],
        )?;
        Ok(RunArtifacts { log, pool: None })
    }
}
