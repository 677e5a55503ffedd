//! Deterministic synthetic paired image/text data with controllable class
//! structure.
//!
//! "Images" are sequences of continuous token vectors: per-class centroid
//! tokens plus Gaussian noise, so the encoders consume token sequences
//! directly without a patching stage. Text is a shared template prefix
//! followed by one class-specific token id.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::Container;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Tokens per image sequence.
    pub image_tokens: usize,
    /// Dimensionality of each continuous image token.
    pub image_token_dim: usize,
    /// Shared text template prefix length (token ids 0..template_len).
    pub template_len: usize,
    /// Scale of the isotropic Gaussian the class centroids are drawn from.
    pub sigma_between: f64,
    /// Per-example noise scale around the centroid.
    pub sigma_within: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        // Keeping the centroid gap close to the within-class spread in a
        // low-dimensional token space makes the classes overlap: raw
        // nearest-mean classification lands strictly between chance and
        // perfect, so the encoders have real work to do.
        Self {
            n_classes: 20,
            train_per_class: 50,
            test_per_class: 20,
            image_tokens: 4,
            image_token_dim: 4,
            template_len: 4,
            sigma_between: 0.45,
            sigma_within: 0.4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "synth.n_classes: must be >= 2, got {}",
                self.n_classes
            )));
        }
        if !(self.sigma_within > 0.0) {
            return Err(Error::Config(
                "synth.sigma_within: must be > 0".to_string(),
            ));
        }
        if !(self.sigma_between > self.sigma_within) {
            return Err(Error::Config(format!(
                "synth.sigma_between: must exceed sigma_within ({} <= {})",
                self.sigma_between, self.sigma_within
            )));
        }
        for (name, v) in [
            ("synth.train_per_class", self.train_per_class),
            ("synth.test_per_class", self.test_per_class),
            ("synth.image_tokens", self.image_tokens),
            ("synth.image_token_dim", self.image_token_dim),
            ("synth.template_len", self.template_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name}: must be >= 1")));
            }
        }
        Ok(())
    }

    /// Text vocabulary: template ids then one id per class.
    pub fn vocab_size(&self) -> usize {
        self.template_len + self.n_classes
    }

    /// Hand-template token sequence for a class: shared prefix + class token.
    pub fn template_tokens(&self, class_id: usize) -> Vec<usize> {
        let mut t: Vec<usize> = (0..self.template_len).collect();
        t.push(self.template_len + class_id);
        t
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    /// `[image_tokens, image_token_dim]` continuous token matrix.
    pub image_tokens: Tensor,
    pub text_tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub cfg: SynthConfig,
    pub centroids: Vec<Tensor>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// Draws class centroids once, then perturbs them per example. Fully
/// determined by `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let shape = [cfg.image_tokens, cfg.image_token_dim];

    let centroids: Vec<Tensor> = (0..cfg.n_classes)
        .map(|_| Tensor::randn(&shape, cfg.sigma_between, &mut rng))
        .collect();

    let sample = |class: usize, rng: &mut ChaCha20Rng| -> Example {
        let noise = Tensor::randn(&shape, cfg.sigma_within, rng);
        let data: Vec<f64> = centroids[class]
            .data()
            .iter()
            .zip(noise.data())
            .map(|(c, n)| c + n)
            .collect();
        Example {
            image_tokens: Tensor::new(data, &shape).expect("shape fixed"),
            text_tokens: cfg.template_tokens(class),
            label: class,
        }
    };

    let mut train = Vec::with_capacity(cfg.n_classes * cfg.train_per_class);
    let mut test = Vec::with_capacity(cfg.n_classes * cfg.test_per_class);
    for class in 0..cfg.n_classes {
        for _ in 0..cfg.train_per_class {
            train.push(sample(class, &mut rng));
        }
        for _ in 0..cfg.test_per_class {
            test.push(sample(class, &mut rng));
        }
    }

    Ok(SynthDataset {
        cfg: cfg.clone(),
        centroids,
        train,
        test,
    })
}

impl SynthDataset {
    /// Dumps the dataset to a self-describing binary file for audits.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        c.put_json("config", &self.cfg)?;
        let centroids: Vec<(String, Tensor)> = self
            .centroids
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("c{i:04}"), t.clone()))
            .collect();
        c.put_tensors("centroids", &centroids)?;
        for (split, examples) in [("train", &self.train), ("test", &self.test)] {
            let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
            c.put_json(&format!("{split}_labels"), &labels)?;
            let images: Vec<(String, Tensor)> = examples
                .iter()
                .enumerate()
                .map(|(i, e)| (format!("x{i:06}"), e.image_tokens.clone()))
                .collect();
            c.put_tensors(&format!("{split}_images"), &images)?;
        }
        c.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read_from(path)?;
        let cfg: SynthConfig = c.json("config")?;
        let centroids = c
            .tensors("centroids")?
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        let mut splits = Vec::new();
        for split in ["train", "test"] {
            let labels: Vec<usize> = c.json(&format!("{split}_labels"))?;
            let images = c.tensors(&format!("{split}_images"))?;
            if labels.len() != images.len() {
                return Err(Error::Format(format!(
                    "{split}: {} labels vs {} images",
                    labels.len(),
                    images.len()
                )));
            }
            let examples = labels
                .into_iter()
                .zip(images)
                .map(|(label, (_, image_tokens))| Example {
                    text_tokens: cfg.template_tokens(label),
                    image_tokens,
                    label,
                })
                .collect();
            splits.push(examples);
        }
        let test = splits.pop().expect("two splits");
        let train = splits.pop().expect("two splits");
        Ok(Self {
            cfg,
            centroids,
            train,
            test,
        })
    }
}
