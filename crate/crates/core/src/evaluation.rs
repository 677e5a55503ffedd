//! Reported metrics: average/final accuracy, forgetting, representation
//! drift and pairwise diversity of class means, plus the serialized run log.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular accuracy record: `rows[t][τ]` (τ ≤ t) is accuracy on
/// task τ's test set after training task t. Test-set sizes let every
/// aggregate be recomputed from the matrix alone.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
    test_sizes: Vec<usize>,
}

impl AccuracyMatrix {
    pub fn new(test_sizes: Vec<usize>) -> Result<Self> {
        if test_sizes.is_empty() || test_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Contract(
                "accuracy matrix needs a positive test size per task".into(),
            ));
        }
        Ok(Self {
            rows: Vec::new(),
            test_sizes,
        })
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if t >= self.test_sizes.len() {
            return Err(Error::Contract("accuracy matrix already complete".into()));
        }
        if row.len() != t + 1 {
            return Err(Error::Contract(format!(
                "stage {} row must have {} entries, got {}",
                t + 1,
                t + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Contract("accuracies must lie in [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn test_sizes(&self) -> &[usize] {
        &self.test_sizes
    }

    pub fn at(&self, stage: usize, task: usize) -> f64 {
        self.rows[stage][task]
    }

    /// Overall accuracy at a stage: per-task accuracies weighted by
    /// test-set sizes of all tasks seen so far.
    pub fn stage_overall(&self, stage: usize) -> Result<f64> {
        let row = self
            .rows
            .get(stage)
            .ok_or_else(|| Error::Contract(format!("no stage {stage} in matrix")))?;
        let total: usize = self.test_sizes[..row.len()].iter().sum();
        let correct: f64 = row
            .iter()
            .zip(&self.test_sizes)
            .map(|(a, &n)| a * n as f64)
            .sum();
        Ok(correct / total as f64)
    }
}

/// Average accuracy over stages and final overall accuracy.
pub fn summarize(matrix: &AccuracyMatrix) -> Result<(f64, f64)> {
    if matrix.stages() == 0 {
        return Err(Error::Contract("empty accuracy matrix".into()));
    }
    let per_stage: Vec<f64> = (0..matrix.stages())
        .map(|t| matrix.stage_overall(t))
        .collect::<Result<_>>()?;
    let avg = per_stage.iter().sum::<f64>() / per_stage.len() as f64;
    Ok((avg, *per_stage.last().expect("nonempty")))
}

/// Per-task forgetting `F_t = (1/(t−1)) Σ_{τ<t} max_{τ'<t} (A[τ'][τ] −
/// A[t][τ])` and its average over tasks, with `F_1 = 0`.
pub fn forgetting(matrix: &AccuracyMatrix) -> Result<(Vec<f64>, f64)> {
    let t_total = matrix.stages();
    if t_total == 0 {
        return Err(Error::Contract("empty accuracy matrix".into()));
    }
    for (t, row) in matrix.rows().iter().enumerate() {
        if row.len() != t + 1 {
            return Err(Error::Contract("malformed accuracy matrix".into()));
        }
    }
    let mut per_task = vec![0.0];
    for t in 1..t_total {
        let mut sum = 0.0;
        for tau in 0..t {
            let best_before = (tau..t)
                .map(|tp| matrix.at(tp, tau))
                .fold(f64::NEG_INFINITY, f64::max);
            sum += best_before - matrix.at(t, tau);
        }
        per_task.push(sum / t as f64);
    }
    let avg = per_task.iter().sum::<f64>() / t_total as f64;
    Ok((per_task, avg))
}

/// Unit-normalized per-class means of visual embeddings at one stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMeansSnapshot {
    pub stage: usize,
    means: BTreeMap<usize, Vec<f64>>,
}

impl ClassMeansSnapshot {
    /// Means of L2-normalized embeddings per class, re-normalized to unit
    /// norm.
    pub fn from_embeddings(
        stage: usize,
        embeddings: &[(usize, Vec<f64>)],
    ) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::Contract("no embeddings for class means".into()));
        }
        let dim = embeddings[0].1.len();
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (class, e) in embeddings {
            if e.len() != dim {
                return Err(Error::Shape("inconsistent embedding dims".into()));
            }
            let entry = sums.entry(*class).or_insert_with(|| (vec![0.0; dim], 0));
            entry.1 += 1;
            for (s, x) in entry.0.iter_mut().zip(e) {
                *s += x;
            }
        }
        let mut means = BTreeMap::new();
        for (class, (sum, n)) in sums {
            let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
            let norm: f64 = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Numerical(format!(
                    "class {class} mean embedding collapsed to zero"
                )));
            }
            means.insert(class, mean.iter().map(|x| x / norm).collect());
        }
        Ok(Self { stage, means })
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.means.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn mean(&self, class: usize) -> Option<&[f64]> {
        self.means.get(&class).map(|v| v.as_slice())
    }
}

/// Mean movement of class means from the previous stage: averaged Euclidean
/// distance over the classes present at stage t−1.
pub fn representation_drift(
    current: &ClassMeansSnapshot,
    previous: &ClassMeansSnapshot,
) -> Result<f64> {
    if previous.is_empty() {
        return Err(Error::Contract("previous snapshot has no classes".into()));
    }
    let mut total = 0.0;
    for class in previous.classes() {
        let prev = previous.mean(class).expect("iterating own keys");
        let cur = current.mean(class).ok_or_else(|| {
            Error::Contract(format!(
                "class {class} present at stage {} but missing at stage {}",
                previous.stage, current.stage
            ))
        })?;
        let d2: f64 = prev
            .iter()
            .zip(cur)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += d2.sqrt();
    }
    Ok(total / previous.len() as f64)
}

/// Mean Euclidean distance over unordered pairs of class means.
pub fn pairwise_diversity(snapshot: &ClassMeansSnapshot) -> Result<f64> {
    let classes: Vec<usize> = snapshot.classes().collect();
    if classes.len() < 2 {
        return Err(Error::Contract(format!(
            "pairwise diversity needs >= 2 classes, got {}",
            classes.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &m) in classes.iter().enumerate() {
        for &n in &classes[i + 1..] {
            let a = snapshot.mean(m).expect("own keys");
            let b = snapshot.mean(n).expect("own keys");
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            total += d2.sqrt();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// One sampled loss evaluation during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossSample {
    pub task: usize,
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub tpcl: f64,
    pub div: f64,
}

/// Complete record of one continual-learning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsLog {
    pub config_echo: serde_json::Value,
    pub seed: u64,
    pub mode: String,
    pub matrix: AccuracyMatrix,
    pub stage_overall: Vec<f64>,
    pub avg_acc_so_far: Vec<f64>,
    pub avg_accuracy: f64,
    pub final_accuracy: f64,
    pub forgetting_per_task: Vec<f64>,
    pub avg_forgetting: f64,
    /// Drift needs a previous stage; stage 1 has none.
    pub drift_per_stage: Vec<Option<f64>>,
    /// Diversity needs at least two seen classes.
    pub diversity_per_stage: Vec<Option<f64>>,
    pub zero_shot_pretrain_accuracy: f64,
    pub loss_curve: Vec<LossSample>,
}

impl MetricsLog {
    /// Derives every aggregate field from a finished matrix.
    pub fn assemble(
        config_echo: serde_json::Value,
        seed: u64,
        mode: String,
        matrix: AccuracyMatrix,
        drift_per_stage: Vec<Option<f64>>,
        diversity_per_stage: Vec<Option<f64>>,
        zero_shot_pretrain_accuracy: f64,
        loss_curve: Vec<LossSample>,
    ) -> Result<Self> {
        let stages = matrix.stages();
        if drift_per_stage.len() != stages || diversity_per_stage.len() != stages {
            return Err(Error::Contract(
                "per-stage metric lengths must match the matrix".into(),
            ));
        }
        let stage_overall: Vec<f64> = (0..stages)
            .map(|t| matrix.stage_overall(t))
            .collect::<Result<_>>()?;
        let avg_acc_so_far: Vec<f64> = (0..stages)
            .map(|t| stage_overall[..=t].iter().sum::<f64>() / (t + 1) as f64)
            .collect();
        let (avg_accuracy, final_accuracy) = summarize(&matrix)?;
        let (forgetting_per_task, avg_forgetting) = forgetting(&matrix)?;
        Ok(Self {
            config_echo,
            seed,
            mode,
            matrix,
            stage_overall,
            avg_acc_so_far,
            avg_accuracy,
            final_accuracy,
            forgetting_per_task,
            avg_forgetting,
            drift_per_stage,
            diversity_per_stage,
            zero_shot_pretrain_accuracy,
            loss_curve,
        })
    }

    pub fn final_drift(&self) -> Option<f64> {
        self.drift_per_stage.last().copied().flatten()
    }

    pub fn final_diversity(&self) -> Option<f64> {
        self.diversity_per_stage.last().copied().flatten()
    }

    /// Mean drift over the stages that have one (stage 2 onward).
    pub fn mean_drift(&self) -> Option<f64> {
        let xs: Vec<f64> = self.drift_per_stage.iter().filter_map(|d| *d).collect();
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn accuracy_matrix_csv(&self) -> String {
        let t = self.matrix.test_sizes().len();
        let mut out = String::from("stage");
        for tau in 0..t {
            out.push_str(&format!(",task{tau}"));
        }
        out.push('\n');
        for (stage, row) in self.matrix.rows().iter().enumerate() {
            out.push_str(&format!("{}", stage + 1));
            for tau in 0..t {
                match row.get(tau) {
                    Some(a) => out.push_str(&format!(",{a}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn stage_metrics_csv(&self) -> String {
        let mut out =
            String::from("stage,overall_accuracy,avg_accuracy_so_far,drift,diversity\n");
        for t in 0..self.matrix.stages() {
            let drift = self.drift_per_stage[t]
                .map(|d| d.to_string())
                .unwrap_or_default();
            let div = self.diversity_per_stage[t]
                .map(|d| d.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                t + 1,
                self.stage_overall[t],
                self.avg_acc_so_far[t],
                drift,
                div
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "avg_accuracy,final_accuracy,avg_forgetting\n{},{},{}\n",
            self.avg_accuracy, self.final_accuracy, self.avg_forgetting
        )
    }

    /// Writes metrics.json plus the three CSV views into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.json"), self.to_json()?)?;
        std::fs::write(dir.join("accuracy_matrix.csv"), self.accuracy_matrix_csv())?;
        std::fs::write(dir.join("stage_metrics.csv"), self.stage_metrics_csv())?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        Ok(())
    }
}
