//! Incremental, instance-conditioned visual prompt components plus per-class
//! textual prompts.
//!
//! Components and affinity-head columns are stored in per-task chunks: the
//! chunks of finished tasks enter training graphs as constants, so nothing
//! the optimizer sees can modify them and the freezing contract holds by
//! construction. Aggregation follows the weighted mechanism: per layer,
//! affinities come from a trainable affine head applied to the frozen query
//! feature, and the instance prompt is the affinity-weighted sum of that
//! layer's components.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Graph, Tensor, Value};
use crate::error::{Error, Result};
use crate::io::Container;
use crate::seeding;

const INIT_SCALE: f64 = 0.02;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct TaskEntry {
    pub task_id: usize,
    pub prompts: usize,
}

/// Per-layer prompt components `[M, L_v·D]` and affinity heads, chunked by
/// task.
#[derive(Debug, Clone)]
pub struct VisualPromptPool {
    depth: usize,
    prompt_len: usize,
    dim: usize,
    /// `[layer][task]` component chunk, rows are components, `[n, L·D]`.
    comp_chunks: Vec<Vec<Tensor>>,
    /// `[layer][task]` affinity weight columns `[D, n]`.
    aff_w_chunks: Vec<Vec<Tensor>>,
    /// `[layer][task]` affinity bias columns `[1, n]`.
    aff_b_chunks: Vec<Vec<Tensor>>,
    tasks: Vec<TaskEntry>,
}

impl VisualPromptPool {
    pub fn new(depth: usize, prompt_len: usize, dim: usize) -> Result<Self> {
        if depth == 0 || prompt_len == 0 || dim == 0 {
            return Err(Error::Contract(
                "prompt pool dimensions must all be positive".into(),
            ));
        }
        Ok(Self {
            depth,
            prompt_len,
            dim,
            comp_chunks: vec![Vec::new(); depth],
            aff_w_chunks: vec![Vec::new(); depth],
            aff_b_chunks: vec![Vec::new(); depth],
            tasks: Vec::new(),
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Total number of components per layer (identical across layers).
    pub fn total_components(&self) -> usize {
        self.tasks.iter().map(|t| t.prompts).sum()
    }

    pub fn tasks(&self) -> &[TaskEntry] {
        &self.tasks
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Appends `prompts_per_task` freshly initialized components per layer
    /// and widens every affinity head by as many trainable columns.
    pub fn expand_for_task(
        &mut self,
        task_id: usize,
        prompts_per_task: usize,
        seed: u64,
    ) -> Result<()> {
        if prompts_per_task == 0 {
            return Err(Error::Contract("prompts_per_task must be >= 1".into()));
        }
        if self.tasks.iter().any(|t| t.task_id == task_id) {
            return Err(Error::Contract(format!(
                "task {task_id} already expanded in the prompt pool"
            )));
        }
        let mut rng =
            ChaCha20Rng::seed_from_u64(seeding::mix(seed, &format!("pool-expand-{task_id}")));
        for layer in 0..self.depth {
            self.comp_chunks[layer].push(Tensor::randn(
                &[prompts_per_task, self.prompt_len * self.dim],
                INIT_SCALE,
                &mut rng,
            ));
            self.aff_w_chunks[layer].push(Tensor::randn(
                &[self.dim, prompts_per_task],
                INIT_SCALE,
                &mut rng,
            ));
            self.aff_b_chunks[layer].push(Tensor::randn(
                &[1, prompts_per_task],
                INIT_SCALE,
                &mut rng,
            ));
        }
        self.tasks.push(TaskEntry {
            task_id,
            prompts: prompts_per_task,
        });
        Ok(())
    }

    /// Component `m` of `layer` as an `[L_v, D]` tensor.
    pub fn component(&self, layer: usize, m: usize) -> Result<Tensor> {
        let (chunk, row) = self.locate(m)?;
        let t = &self.comp_chunks[layer][chunk];
        let cols = self.prompt_len * self.dim;
        let data = t.data()[row * cols..(row + 1) * cols].to_vec();
        Tensor::new(data, &[self.prompt_len, self.dim])
    }

    /// Direct mutable access for tests and targeted perturbations.
    pub fn component_chunk_mut(&mut self, layer: usize, task_pos: usize) -> &mut Tensor {
        &mut self.comp_chunks[layer][task_pos]
    }

    /// Affinity weight and bias chunk of one task, `([D, n], [1, n])`.
    pub fn affinity_chunk(&self, layer: usize, task_pos: usize) -> (&Tensor, &Tensor) {
        (
            &self.aff_w_chunks[layer][task_pos],
            &self.aff_b_chunks[layer][task_pos],
        )
    }

    pub fn affinity_chunk_mut(&mut self, layer: usize, task_pos: usize) -> (&mut Tensor, &mut Tensor) {
        (
            &mut self.aff_w_chunks[layer][task_pos],
            &mut self.aff_b_chunks[layer][task_pos],
        )
    }

    fn locate(&self, m: usize) -> Result<(usize, usize)> {
        let mut off = 0;
        for (i, t) in self.tasks.iter().enumerate() {
            if m < off + t.prompts {
                return Ok((i, m - off));
            }
            off += t.prompts;
        }
        Err(Error::Contract(format!(
            "component index {m} out of {}",
            self.total_components()
        )))
    }

    /// Plants the pool into a graph. Chunks belonging to `trainable_task`
    /// become parameters; everything else enters as constants.
    pub fn stage(&self, g: &mut Graph, trainable_task: Option<usize>) -> Result<StagedPool> {
        if self.is_empty() {
            return Err(Error::Contract("prompt pool has no components yet".into()));
        }
        let mut layers = Vec::with_capacity(self.depth);
        for layer in 0..self.depth {
            let mut comp_parts = Vec::new();
            let mut w_parts = Vec::new();
            let mut b_parts = Vec::new();
            for (ti, task) in self.tasks.iter().enumerate() {
                let trainable = trainable_task == Some(task.task_id);
                let name = |kind: &str| format!("pool.l{layer}.t{}.{kind}", task.task_id);
                let comp = &self.comp_chunks[layer][ti];
                let w = &self.aff_w_chunks[layer][ti];
                let b = &self.aff_b_chunks[layer][ti];
                if trainable {
                    comp_parts.push(g.parameter(&name("comp"), comp.clone().with_grad())?);
                    w_parts.push(g.parameter(&name("aff_w"), w.clone().with_grad())?);
                    b_parts.push(g.parameter(&name("aff_b"), b.clone().with_grad())?);
                } else {
                    comp_parts.push(g.constant(comp.clone()));
                    w_parts.push(g.constant(w.clone()));
                    b_parts.push(g.constant(b.clone()));
                }
            }
            let components = g.concat(&comp_parts, 0)?; // [M, L·D]
            let aff_w = g.concat(&w_parts, 1)?; // [D, M]
            let aff_b = g.concat(&b_parts, 1)?; // [1, M]
            layers.push(StagedPoolLayer {
                components,
                aff_w,
                aff_b,
            });
        }
        Ok(StagedPool {
            layers,
            prompt_len: self.prompt_len,
            dim: self.dim,
        })
    }

    /// Spec-level aggregation for a single query: per-layer `[L_v, D]`
    /// instance prompts plus the raw affinity vectors.
    ///
    /// Runs through the same graph path the trainer uses.
    pub fn instance_prompts(&self, query: &Tensor) -> Result<(Vec<Tensor>, Vec<Vec<f64>>)> {
        if query.numel() != self.dim {
            return Err(Error::Shape(format!(
                "query of {} elements against pool dim {}",
                query.numel(),
                self.dim
            )));
        }
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(query.data().to_vec(), &[1, self.dim])?);
        let staged = self.stage(&mut g, None)?;
        let affinities = staged.affinities(&mut g, q)?;
        let prompts = staged.prompts_for_row(&mut g, &affinities, 0)?;
        let out_prompts = prompts.iter().map(|&p| g.value(p)).collect();
        let out_affs = affinities
            .iter()
            .map(|&a| g.value(a).data().to_vec())
            .collect();
        Ok((out_prompts, out_affs))
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for layer in 0..self.depth {
            for (ti, task) in self.tasks.iter().enumerate() {
                let base = format!("pool.l{layer}.t{}", task.task_id);
                out.push((format!("{base}.comp"), self.comp_chunks[layer][ti].clone()));
                out.push((format!("{base}.aff_w"), self.aff_w_chunks[layer][ti].clone()));
                out.push((format!("{base}.aff_b"), self.aff_b_chunks[layer][ti].clone()));
            }
        }
        out
    }

    /// Mutable handles to exactly the chunks of one task, named the way
    /// `stage` names its parameters; the optimizer walks this list.
    pub fn trainable_params_mut(&mut self, task_id: usize) -> Result<Vec<(String, &mut Tensor)>> {
        let ti = self
            .tasks
            .iter()
            .position(|t| t.task_id == task_id)
            .ok_or_else(|| Error::Contract(format!("task {task_id} not in the pool")))?;
        let mut out = Vec::new();
        for (layer, ((comps, ws), bs)) in self
            .comp_chunks
            .iter_mut()
            .zip(self.aff_w_chunks.iter_mut())
            .zip(self.aff_b_chunks.iter_mut())
            .enumerate()
        {
            let base = format!("pool.l{layer}.t{task_id}");
            out.push((format!("{base}.comp"), &mut comps[ti]));
            out.push((format!("{base}.aff_w"), &mut ws[ti]));
            out.push((format!("{base}.aff_b"), &mut bs[ti]));
        }
        Ok(out)
    }

    /// Writes back updated chunk tensors by staged-parameter name.
    pub fn apply_updates(&mut self, updated: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in updated {
            let Some(rest) = name.strip_prefix("pool.l") else {
                continue;
            };
            let (layer_s, rest) = rest
                .split_once(".t")
                .ok_or_else(|| Error::Contract(format!("bad pool parameter name '{name}'")))?;
            let (task_s, kind) = rest
                .split_once('.')
                .ok_or_else(|| Error::Contract(format!("bad pool parameter name '{name}'")))?;
            let layer: usize = layer_s
                .parse()
                .map_err(|_| Error::Contract(format!("bad pool layer in '{name}'")))?;
            let task_id: usize = task_s
                .parse()
                .map_err(|_| Error::Contract(format!("bad pool task in '{name}'")))?;
            let ti = self
                .tasks
                .iter()
                .position(|t| t.task_id == task_id)
                .ok_or_else(|| Error::Contract(format!("unknown pool task in '{name}'")))?;
            let slot = match kind {
                "comp" => &mut self.comp_chunks[layer][ti],
                "aff_w" => &mut self.aff_w_chunks[layer][ti],
                "aff_b" => &mut self.aff_b_chunks[layer][ti],
                other => {
                    return Err(Error::Contract(format!(
                        "unknown pool tensor kind '{other}'"
                    )))
                }
            };
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "pool update '{name}': shape {:?} vs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

pub struct StagedPoolLayer {
    /// `[M, L·D]` all components stacked.
    pub components: Value,
    /// `[D, M]` affinity weights.
    pub aff_w: Value,
    /// `[1, M]` affinity bias.
    pub aff_b: Value,
}

/// Graph-resident pool shared across a batch graph.
pub struct StagedPool {
    layers: Vec<StagedPoolLayer>,
    prompt_len: usize,
    dim: usize,
}

impl StagedPool {
    /// Raw affine affinities per layer for a `[B, D]` query batch: `[B, M]`.
    pub fn affinities(&self, g: &mut Graph, queries: Value) -> Result<Vec<Value>> {
        let qshape = g.shape_of(queries).to_vec();
        if qshape.len() != 2 || qshape[1] != self.dim {
            return Err(Error::Shape(format!(
                "queries of shape {qshape:?}, expected [*, {}]",
                self.dim
            )));
        }
        self.layers
            .iter()
            .map(|l| {
                let raw = g.matmul(queries, l.aff_w)?;
                g.add_bias(raw, l.aff_b)
            })
            .collect()
    }

    /// Aggregated `[L_v, D]` prompts for batch row `row`, one per layer.
    pub fn prompts_for_row(
        &self,
        g: &mut Graph,
        affinities: &[Value],
        row: usize,
    ) -> Result<Vec<Value>> {
        affinities
            .iter()
            .zip(&self.layers)
            .map(|(&a, l)| {
                let alpha = g.slice_rows(a, row, row + 1)?; // [1, M]
                let flat = g.matmul(alpha, l.components)?; // [1, L·D]
                g.reshape(flat, &[self.prompt_len, self.dim])
            })
            .collect()
    }
}

/// Per-class textual prompts, one `[L_t, D]` tensor per seen class, applied
/// at every prompted text layer.
#[derive(Debug, Clone)]
pub struct TextualPromptSet {
    depth: usize,
    prompt_len: usize,
    dim: usize,
    prompts: BTreeMap<usize, Tensor>,
}

impl TextualPromptSet {
    pub fn new(depth: usize, prompt_len: usize, dim: usize) -> Result<Self> {
        if depth == 0 || prompt_len == 0 || dim == 0 {
            return Err(Error::Contract(
                "textual prompt dimensions must all be positive".into(),
            ));
        }
        Ok(Self {
            depth,
            prompt_len,
            dim,
            prompts: BTreeMap::new(),
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.prompts.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn get(&self, class_id: usize) -> Option<&Tensor> {
        self.prompts.get(&class_id)
    }

    pub fn add_classes(&mut self, new_classes: &[usize], seed: u64) -> Result<()> {
        for &c in new_classes {
            if self.prompts.contains_key(&c) {
                return Err(Error::Contract(format!(
                    "class {c} already has a textual prompt"
                )));
            }
            let mut rng =
                ChaCha20Rng::seed_from_u64(seeding::mix(seed, &format!("text-prompt-{c}")));
            self.prompts.insert(
                c,
                Tensor::randn(&[self.prompt_len, self.dim], INIT_SCALE, &mut rng),
            );
        }
        Ok(())
    }

    /// Stages every class prompt; all of them stay trainable during VT
    /// training because the diversity loss and replayed batches keep
    /// touching old prototypes.
    pub fn stage(&self, g: &mut Graph, trainable: bool) -> Result<BTreeMap<usize, Vec<Value>>> {
        let mut out = BTreeMap::new();
        for (&c, t) in &self.prompts {
            let v = if trainable {
                g.parameter(&format!("text_prompt.c{c}"), t.clone().with_grad())?
            } else {
                g.constant(t.clone())
            };
            // The same class tensor is injected at every prompted layer.
            out.insert(c, vec![v; self.depth]);
        }
        Ok(out)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.prompts
            .iter()
            .map(|(&c, t)| (format!("text_prompt.c{c}"), t.clone()))
            .collect()
    }

    /// Every class prompt stays trainable across tasks.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.prompts
            .iter_mut()
            .map(|(&c, t)| (format!("text_prompt.c{c}"), t))
            .collect()
    }

    pub fn apply_updates(&mut self, updated: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in updated {
            let Some(rest) = name.strip_prefix("text_prompt.c") else {
                continue;
            };
            let class: usize = rest
                .parse()
                .map_err(|_| Error::Contract(format!("bad textual prompt name '{name}'")))?;
            let slot = self.prompts.get_mut(&class).ok_or_else(|| {
                Error::Contract(format!("textual prompt update for unseen class {class}"))
            })?;
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "textual prompt update '{name}': shape {:?} vs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

/// Visual components plus (in VT mode) the per-class textual prompts, with
/// shared trainability bookkeeping.
#[derive(Debug, Clone)]
pub struct PromptPool {
    pub visual: VisualPromptPool,
    pub textual: Option<TextualPromptSet>,
}

impl PromptPool {
    pub fn new(visual: VisualPromptPool, textual: Option<TextualPromptSet>) -> Self {
        Self { visual, textual }
    }

    /// Grows the pool for the next task: new visual components and affinity
    /// columns per layer, one textual prompt per new class in VT mode, and
    /// everything from earlier tasks implicitly frozen.
    pub fn expand_for_task(
        &mut self,
        task_id: usize,
        new_classes: &[usize],
        prompts_per_task: usize,
        seed: u64,
    ) -> Result<()> {
        self.visual.expand_for_task(task_id, prompts_per_task, seed)?;
        if let Some(texts) = &mut self.textual {
            texts.add_classes(new_classes, seed)?;
        }
        Ok(())
    }

    // ── persistence ────────────────────────────────────────────────────

    pub fn write_sections(&self, c: &mut Container) -> Result<()> {
        c.put_json(
            "pool_meta",
            &serde_json::json!({
                "depth": self.visual.depth,
                "prompt_len": self.visual.prompt_len,
                "dim": self.visual.dim,
                "tasks": self.visual.tasks,
                "textual": self.textual.as_ref().map(|t| {
                    serde_json::json!({
                        "depth": t.depth,
                        "prompt_len": t.prompt_len,
                        "dim": t.dim,
                        "classes": t.classes().collect::<Vec<_>>(),
                    })
                }),
            }),
        )?;
        c.put_tensors("pool_tensors", &self.visual.named_tensors())?;
        if let Some(texts) = &self.textual {
            c.put_tensors("text_prompts", &texts.named_tensors())?;
        }
        Ok(())
    }

    pub fn read_sections(c: &Container) -> Result<Self> {
        let meta: serde_json::Value = c.json("pool_meta")?;
        let depth = meta["depth"].as_u64().unwrap_or(0) as usize;
        let prompt_len = meta["prompt_len"].as_u64().unwrap_or(0) as usize;
        let dim = meta["dim"].as_u64().unwrap_or(0) as usize;
        let tasks: Vec<TaskEntry> = serde_json::from_value(meta["tasks"].clone())?;

        let mut visual = VisualPromptPool::new(depth, prompt_len, dim)?;
        for t in &tasks {
            visual.expand_for_task(t.task_id, t.prompts, 0)?;
        }
        let tensors: BTreeMap<String, Tensor> = c
            .tensors("pool_tensors")?
            .into_iter()
            .collect();
        visual.apply_updates(&tensors)?;

        let textual = if meta["textual"].is_object() {
            let tm = &meta["textual"];
            let mut texts = TextualPromptSet::new(
                tm["depth"].as_u64().unwrap_or(0) as usize,
                tm["prompt_len"].as_u64().unwrap_or(0) as usize,
                tm["dim"].as_u64().unwrap_or(0) as usize,
            )?;
            let classes: Vec<usize> = serde_json::from_value(tm["classes"].clone())?;
            texts.add_classes(&classes, 0)?;
            let tp: BTreeMap<String, Tensor> =
                c.tensors("text_prompts")?.into_iter().collect();
            texts.apply_updates(&tp)?;
            Some(texts)
        } else {
            None
        };

        Ok(Self { visual, textual })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn zero_affinity_forced(pool: &mut VisualPromptPool, layer: usize, bias: &[f64]) {
        let (w, b) = pool.affinity_chunk_mut(layer, 0);
        for v in w.data_mut() {
            *v = 0.0;
        }
        b.data_mut().copy_from_slice(bias);
    }

    /// Scalar-loop reference for affinity + aggregation.
    fn oracle(pool: &VisualPromptPool, query: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let m_total = pool.total_components();
        let (l, d) = (pool.prompt_len(), pool.dim());
        let mut prompts = Vec::new();
        let mut affs = Vec::new();
        for layer in 0..pool.depth() {
            let mut alpha = vec![0.0; m_total];
            let mut off = 0;
            for ti in 0..pool.tasks().len() {
                let (w, b) = pool.affinity_chunk(layer, ti);
                let n = b.numel();
                for m in 0..n {
                    let mut s = b.data()[m];
                    for dd in 0..d {
                        s += query[dd] * w.data()[dd * n + m];
                    }
                    alpha[off + m] = s;
                }
                off += n;
            }
            let mut p = vec![0.0; l * d];
            for (m, &a) in alpha.iter().enumerate() {
                let comp = pool.component(layer, m).unwrap();
                for (pi, &ci) in p.iter_mut().zip(comp.data()) {
                    *pi += a * ci;
                }
            }
            prompts.push(p);
            affs.push(alpha);
        }
        (prompts, affs)
    }

    #[test]
    fn growth_arithmetic_and_duplicate_rejection() {
        let mut pool = VisualPromptPool::new(3, 4, 8).unwrap();
        pool.expand_for_task(0, 10, 42).unwrap();
        assert_eq!(pool.total_components(), 10);
        for t in 1..10 {
            pool.expand_for_task(t, 10, 42).unwrap();
        }
        assert_eq!(pool.total_components(), 100);
        // Affinity width tracks M on every layer.
        let mut g = Graph::new();
        let staged = pool.stage(&mut g, None).unwrap();
        let q = g.constant(Tensor::zeros(&[1, 8]));
        let affs = staged.affinities(&mut g, q).unwrap();
        for a in affs {
            assert_eq!(g.shape_of(a), &[1, 100]);
        }
        assert!(matches!(
            pool.expand_for_task(3, 10, 42),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn expansion_is_deterministic_per_seed() {
        let build = || {
            let mut pool = VisualPromptPool::new(2, 3, 4).unwrap();
            pool.expand_for_task(0, 5, 7).unwrap();
            pool.expand_for_task(1, 5, 7).unwrap();
            pool
        };
        let a = build();
        let b = build();
        for ((na, ta), (nb, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert_eq!(na, nb);
            assert!(ta.bits_eq(tb));
        }
    }

    #[test]
    fn single_component_with_unit_bias_passes_through() {
        let mut pool = VisualPromptPool::new(1, 2, 3).unwrap();
        pool.expand_for_task(0, 1, 0).unwrap();
        zero_affinity_forced(&mut pool, 0, &[1.0]);
        let q = Tensor::new(vec![0.3, -0.8, 0.5], &[3]).unwrap();
        let (prompts, affs) = pool.instance_prompts(&q).unwrap();
        assert_eq!(affs[0], vec![1.0]);
        let comp = pool.component(0, 0).unwrap();
        assert!(prompts[0].bits_eq(&comp));
    }

    #[test]
    fn convex_weights_over_identical_components_reproduce_the_component() {
        let mut pool = VisualPromptPool::new(1, 2, 3).unwrap();
        pool.expand_for_task(0, 2, 9).unwrap();
        // Make both components identical.
        let chunk = pool.component_chunk_mut(0, 0);
        let cols = chunk.shape()[1];
        let first: Vec<f64> = chunk.data()[..cols].to_vec();
        chunk.data_mut()[cols..].copy_from_slice(&first);
        zero_affinity_forced(&mut pool, 0, &[0.3, 0.7]);

        let q = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let (prompts, affs) = pool.instance_prompts(&q).unwrap();
        assert_eq!(affs[0], vec![0.3, 0.7]);
        let comp = pool.component(0, 0).unwrap();
        for (a, b) in prompts[0].data().iter().zip(comp.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_matches_scalar_oracle_on_random_pools() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(123);
        for case in 0..100 {
            let depth = rng.gen_range(1..=3);
            let l = rng.gen_range(1..=3);
            let d = rng.gen_range(2..=6);
            let mut pool = VisualPromptPool::new(depth, l, d).unwrap();
            let tasks = rng.gen_range(1..=3);
            for t in 0..tasks {
                pool.expand_for_task(t, rng.gen_range(1..=4), case * 31 + t as u64).unwrap();
            }
            let query: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let qt = Tensor::new(query.clone(), &[d]).unwrap();
            let (prompts, affs) = pool.instance_prompts(&qt).unwrap();
            let (oracle_prompts, oracle_affs) = oracle(&pool, &query);
            for layer in 0..depth {
                for (a, b) in affs[layer].iter().zip(&oracle_affs[layer]) {
                    assert!((a - b).abs() < 1e-12, "affinity mismatch case {case}");
                }
                for (a, b) in prompts[layer].data().iter().zip(&oracle_prompts[layer]) {
                    assert!((a - b).abs() < 1e-12, "prompt mismatch case {case}");
                }
            }
        }
    }

    #[test]
    fn aggregation_is_linear_in_components() {
        let mut pool = VisualPromptPool::new(2, 2, 4).unwrap();
        pool.expand_for_task(0, 3, 5).unwrap();
        let q = Tensor::new(vec![0.2, -0.4, 0.9, 0.1], &[4]).unwrap();
        let (base, _) = pool.instance_prompts(&q).unwrap();
        for layer in 0..2 {
            for v in pool.component_chunk_mut(layer, 0).data_mut() {
                *v *= 2.0;
            }
        }
        let (doubled, _) = pool.instance_prompts(&q).unwrap();
        for (b, d) in base.iter().zip(&doubled) {
            for (x, y) in b.data().iter().zip(d.data()) {
                assert!((2.0 * x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn query_dimension_mismatch_rejected() {
        let mut pool = VisualPromptPool::new(1, 2, 4).unwrap();
        pool.expand_for_task(0, 2, 0).unwrap();
        let q = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(pool.instance_prompts(&q), Err(Error::Shape(_))));
    }

    #[test]
    fn textual_prompts_track_seen_classes_exactly() {
        let mut texts = TextualPromptSet::new(2, 3, 4).unwrap();
        texts.add_classes(&[0, 1], 11).unwrap();
        texts.add_classes(&[4, 5], 11).unwrap();
        assert_eq!(texts.classes().collect::<Vec<_>>(), vec![0, 1, 4, 5]);
        assert!(matches!(
            texts.add_classes(&[1], 11),
            Err(Error::Contract(_))
        ));
        assert!(texts.get(4).is_some());
        assert!(texts.get(2).is_none());
    }

    #[test]
    fn pool_checkpoint_round_trip_is_bit_exact() {
        let mut visual = VisualPromptPool::new(2, 3, 4).unwrap();
        visual.expand_for_task(0, 4, 3).unwrap();
        visual.expand_for_task(1, 4, 3).unwrap();
        let mut texts = TextualPromptSet::new(2, 2, 4).unwrap();
        texts.add_classes(&[0, 1, 2, 3], 3).unwrap();
        let pool = PromptPool::new(visual, Some(texts));

        let mut c = Container::new();
        pool.write_sections(&mut c).unwrap();
        let back = PromptPool::read_sections(&c).unwrap();
        for ((na, ta), (nb, tb)) in pool
            .visual
            .named_tensors()
            .iter()
            .zip(back.visual.named_tensors().iter())
        {
            assert_eq!(na, nb);
            assert!(ta.bits_eq(tb));
        }
        let ta = pool.textual.as_ref().unwrap().named_tensors();
        let tb = back.textual.as_ref().unwrap().named_tensors();
        for ((na, a), (nb, b)) in ta.iter().zip(tb.iter()) {
            assert_eq!(na, nb);
            assert!(a.bits_eq(b));
        }
    }
}
