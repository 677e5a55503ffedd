//! Miniature pre-LN transformer tower with deep prompt-injection slots.
//!
//! One tower type serves both modalities: the image side projects continuous
//! token vectors into the model dimension, the text side looks token ids up
//! in an embedding table. Prompted layers REPLACE the prompt positions with
//! that layer's prompt tensor before the layer runs, so outputs at prompt
//! positions from the previous layer are discarded (deep prompting).

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Value};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum InputSpec {
    /// Continuous token vectors of the given per-token dimensionality.
    Continuous { token_dim: usize },
    /// Discrete token ids into an embedding table.
    Vocab { size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerShape {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub max_tokens: usize,
    pub input: InputSpec,
}

impl TowerShape {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ff_dim(&self) -> usize {
        2 * self.dim
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("encoder.depth: must be >= 1".into()));
        }
        if self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder.model_dim: {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.max_tokens < 2 {
            return Err(Error::Config("encoder.max_tokens: must be >= 2".into()));
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-5;

/// Transformer weights stored under canonical names so staging, freezing
/// checks and serialization all walk the same list.
#[derive(Debug, Clone)]
pub struct Tower {
    pub shape: TowerShape,
    weights: BTreeMap<String, Tensor>,
}

impl Tower {
    pub fn init<R: Rng>(shape: TowerShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let d = shape.dim;
        let ff = shape.ff_dim();
        // Width-scaled init on every signal-carrying matrix keeps the
        // content contribution to the read-out stream strong at step 0;
        // cls/pos stay small so constant offsets do not drown it. A weak
        // content signal sends the contrastive pretraining straight into
        // the collapsed uniform-loss basin.
        let xavier = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut w: BTreeMap<String, Tensor> = BTreeMap::new();

        match shape.input {
            InputSpec::Continuous { token_dim } => {
                w.insert(
                    "in_w".into(),
                    Tensor::randn(&[token_dim, d], xavier(token_dim), rng),
                );
                w.insert("in_b".into(), Tensor::zeros(&[d]));
            }
            InputSpec::Vocab { size } => {
                w.insert("embed".into(), Tensor::randn(&[size, d], 0.5, rng));
            }
        }
        w.insert("cls".into(), Tensor::randn(&[1, d], 0.02, rng));
        w.insert("pos".into(), Tensor::randn(&[shape.max_tokens, d], 0.02, rng));
        for l in 0..shape.depth {
            let p = |s: &str| format!("l{l}.{s}");
            w.insert(p("ln1_g"), ones(d));
            w.insert(p("ln1_b"), Tensor::zeros(&[d]));
            for name in ["wq", "wk", "wv", "wo"] {
                w.insert(p(name), Tensor::randn(&[d, d], xavier(d), rng));
            }
            for name in ["bq", "bk", "bv", "bo"] {
                w.insert(p(name), Tensor::zeros(&[d]));
            }
            w.insert(p("ln2_g"), ones(d));
            w.insert(p("ln2_b"), Tensor::zeros(&[d]));
            w.insert(p("w1"), Tensor::randn(&[d, ff], xavier(d), rng));
            w.insert(p("b1"), Tensor::zeros(&[ff]));
            w.insert(p("w2"), Tensor::randn(&[ff, d], xavier(ff), rng));
            w.insert(p("b2"), Tensor::zeros(&[d]));
        }
        w.insert("ln_f_g".into(), ones(d));
        w.insert("ln_f_b".into(), Tensor::zeros(&[d]));
        w.insert("proj".into(), Tensor::randn(&[d, d], xavier(d), rng));

        Ok(Self { shape, weights: w })
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.weights.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn named_tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.weights.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.weights[name]
    }

    pub fn set_tensors(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        for (name, t) in tensors {
            let slot = self.weights.get_mut(&name).ok_or_else(|| {
                Error::Format(format!("unknown tower tensor '{name}' in checkpoint"))
            })?;
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tower tensor '{name}': shape {:?} vs expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    /// Plants every weight into `g`, as parameters when `trainable`,
    /// otherwise as constants that receive no gradients.
    pub fn stage<'a>(&self, g: &mut Graph, prefix: &str, trainable: bool) -> Result<StagedTower> {
        let mut values = BTreeMap::new();
        for (name, t) in &self.weights {
            let v = if trainable {
                g.parameter(&format!("{prefix}.{name}"), t.clone().with_grad())?
            } else {
                g.constant(t.clone())
            };
            values.insert(name.clone(), v);
        }
        Ok(StagedTower {
            shape: self.shape.clone(),
            values,
        })
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![1.0; n], &[n]).expect("static shape")
}

/// Tower input for one example.
pub enum TokenInput<'a> {
    Continuous(&'a Tensor),
    Ids(&'a [usize]),
}

/// Graph-resident tower, reusable across the examples of one batch graph.
pub struct StagedTower {
    shape: TowerShape,
    values: BTreeMap<String, Value>,
}

impl StagedTower {
    fn v(&self, name: &str) -> Value {
        self.values[name]
    }

    fn l(&self, layer: usize, name: &str) -> Value {
        self.values[&format!("l{layer}.{name}")]
    }

    /// Encodes one token sequence into a unit-norm `[1, D]` embedding.
    ///
    /// `prompts`, when given, holds one `[L, D]` value per prompted layer
    /// (layers 1..=d where d = prompts.len() <= depth); each prompted layer
    /// overwrites the prompt positions before running.
    pub fn encode(
        &self,
        g: &mut Graph,
        input: TokenInput<'_>,
        prompts: Option<&[Value]>,
    ) -> Result<Value> {
        let d = self.shape.dim;
        let content = match input {
            TokenInput::Continuous(t) => {
                match self.shape.input {
                    InputSpec::Continuous { token_dim } => {
                        if t.shape().len() != 2 || t.shape()[1] != token_dim {
                            return Err(Error::Shape(format!(
                                "image tokens of shape {:?}, expected [*, {token_dim}]",
                                t.shape()
                            )));
                        }
                    }
                    InputSpec::Vocab { .. } => {
                        return Err(Error::Contract(
                            "continuous tokens fed to a vocabulary tower".into(),
                        ))
                    }
                }
                let toks = g.constant(t.clone());
                let projected = g.matmul(toks, self.v("in_w"))?;
                g.add_bias(projected, self.v("in_b"))?
            }
            TokenInput::Ids(ids) => {
                match self.shape.input {
                    InputSpec::Vocab { size } => {
                        if let Some(&bad) = ids.iter().find(|&&i| i >= size) {
                            return Err(Error::Contract(format!(
                                "token id {bad} outside vocabulary of {size}"
                            )));
                        }
                    }
                    InputSpec::Continuous { .. } => {
                        return Err(Error::Contract(
                            "token ids fed to a continuous-input tower".into(),
                        ))
                    }
                }
                g.gather_rows(self.v("embed"), ids)?
            }
        };

        let prompt_len = match prompts {
            Some(ps) => {
                if ps.is_empty() || ps.len() > self.shape.depth {
                    return Err(Error::Contract(format!(
                        "{} prompted layers on a depth-{} tower",
                        ps.len(),
                        self.shape.depth
                    )));
                }
                let expect_l = g.shape_of(ps[0]).first().copied().unwrap_or(0);
                for &p in ps {
                    let s = g.shape_of(p);
                    if s.len() != 2 || s[1] != d || s[0] != expect_l {
                        return Err(Error::Shape(format!(
                            "prompt of shape {s:?}, expected [{expect_l}, {d}]"
                        )));
                    }
                }
                expect_l
            }
            None => 0,
        };

        let content_len = g.shape_of(content)[0];
        let seq_len = 1 + prompt_len + content_len;
        if seq_len > self.shape.max_tokens {
            return Err(Error::Shape(format!(
                "sequence of {seq_len} tokens exceeds max_tokens {}",
                self.shape.max_tokens
            )));
        }

        let mut h = match prompts {
            Some(ps) => g.concat(&[self.v("cls"), ps[0], content], 0)?,
            None => g.concat(&[self.v("cls"), content], 0)?,
        };
        let pos = g.slice_rows(self.v("pos"), 0, seq_len)?;
        h = g.add(h, pos)?;

        for layer in 0..self.shape.depth {
            if let Some(ps) = prompts {
                if layer >= 1 && layer < ps.len() {
                    let head = g.row(h, 0)?;
                    let tail = g.slice_rows(h, 1 + prompt_len, seq_len)?;
                    h = g.concat(&[head, ps[layer], tail], 0)?;
                }
            }
            h = self.layer_forward(g, h, layer)?;
        }

        let hn = g.layer_norm(h, self.v("ln_f_g"), self.v("ln_f_b"), LN_EPS)?;
        let first = g.row(hn, 0)?;
        let out = g.matmul(first, self.v("proj"))?;
        g.l2_normalize_rows(out)
    }

    fn layer_forward(&self, g: &mut Graph, h: Value, layer: usize) -> Result<Value> {
        let heads = self.shape.heads;
        let hd = self.shape.head_dim();

        let x = g.layer_norm(h, self.l(layer, "ln1_g"), self.l(layer, "ln1_b"), LN_EPS)?;
        let q = self.linear(g, x, layer, "wq", "bq")?;
        let k = self.linear(g, x, layer, "wk", "bk")?;
        let v = self.linear(g, x, layer, "wv", "bv")?;

        let mut head_outs = Vec::with_capacity(heads);
        let scale = 1.0 / (hd as f64).sqrt();
        for i in 0..heads {
            let (lo, hi) = (i * hd, (i + 1) * hd);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let scores = g.matmul_tb(qh, kh)?;
            let scaled = g.scale(scores, scale)?;
            let attn = g.softmax(scaled, 1)?;
            head_outs.push(g.matmul(attn, vh)?);
        }
        let merged = g.concat(&head_outs, 1)?;
        let o = {
            let t = g.matmul(merged, self.l(layer, "wo"))?;
            g.add_bias(t, self.l(layer, "bo"))?
        };
        let h = g.add(h, o)?;

        let y = g.layer_norm(h, self.l(layer, "ln2_g"), self.l(layer, "ln2_b"), LN_EPS)?;
        let m = self.linear_named(g, y, layer, "w1", "b1")?;
        let a = g.tanh(m)?;
        let m2 = self.linear_named(g, a, layer, "w2", "b2")?;
        g.add(h, m2)
    }

    fn linear(&self, g: &mut Graph, x: Value, layer: usize, w: &str, b: &str) -> Result<Value> {
        self.linear_named(g, x, layer, w, b)
    }

    fn linear_named(
        &self,
        g: &mut Graph,
        x: Value,
        layer: usize,
        w: &str,
        b: &str,
    ) -> Result<Value> {
        let t = g.matmul(x, self.l(layer, w))?;
        g.add_bias(t, self.l(layer, b))
    }
}
