//! Exemplar replay buffer with herding selection.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Up to `capacity_per_class` stored training-example indices per seen
/// class.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    capacity_per_class: usize,
    exemplars: BTreeMap<usize, Vec<usize>>,
}

impl ReplayBuffer {
    pub fn new(capacity_per_class: usize) -> Result<Self> {
        if capacity_per_class == 0 {
            return Err(Error::Contract(
                "exemplars per class must be >= 1".into(),
            ));
        }
        Ok(Self {
            capacity_per_class,
            exemplars: BTreeMap::new(),
        })
    }

    pub fn capacity_per_class(&self) -> usize {
        self.capacity_per_class
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.exemplars.keys().copied()
    }

    pub fn exemplars_for(&self, class: usize) -> Option<&[usize]> {
        self.exemplars.get(&class).map(|v| v.as_slice())
    }

    /// All stored example indices in deterministic (class, rank) order.
    pub fn all_indices(&self) -> Vec<usize> {
        self.exemplars.values().flatten().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn add_class(&mut self, class: usize, indices: Vec<usize>) -> Result<()> {
        if self.exemplars.contains_key(&class) {
            return Err(Error::Contract(format!(
                "class {class} already has exemplars"
            )));
        }
        if indices.len() > self.capacity_per_class {
            return Err(Error::Contract(format!(
                "{} exemplars exceed the per-class capacity {}",
                indices.len(),
                self.capacity_per_class
            )));
        }
        self.exemplars.insert(class, indices);
        Ok(())
    }
}

/// Greedy herding: iteratively picks the candidate whose inclusion keeps
/// the running mean closest to the class feature mean; ties break toward
/// the lowest index. Returns positions into `features`.
pub fn select_exemplars(features: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    if features.is_empty() {
        return Err(Error::Contract("herding over an empty class".into()));
    }
    if k == 0 {
        return Err(Error::Contract("herding needs k >= 1".into()));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("inconsistent feature dimensions".into()));
    }

    let n = features.len();
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let take = k.min(n);
    let mut chosen: Vec<usize> = Vec::with_capacity(take);
    let mut used = vec![false; n];
    let mut running_sum = vec![0.0; dim];
    for round in 0..take {
        let mut best: Option<(f64, usize)> = None;
        for (j, f) in features.iter().enumerate() {
            if used[j] {
                continue;
            }
            let denom = (round + 1) as f64;
            let dist2: f64 = mean
                .iter()
                .zip(running_sum.iter().zip(f))
                .map(|(m, (s, x))| {
                    let candidate_mean = (s + x) / denom;
                    (m - candidate_mean) * (m - candidate_mean)
                })
                .sum();
            let better = match best {
                None => true,
                Some((d, _)) => dist2 < d,
            };
            if better {
                best = Some((dist2, j));
            }
        }
        let (_, j) = best.expect("at least one unused candidate");
        used[j] = true;
        for (s, x) in running_sum.iter_mut().zip(&features[j]) {
            *s += x;
        }
        chosen.push(j);
    }
    Ok(chosen)
}
