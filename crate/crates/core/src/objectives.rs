//! Loss functions and the classification rule.
//!
//! All of them are graph builders: gradients reach whatever was staged as a
//! parameter upstream (visual prompts and affinity heads always; textual
//! prompts only when the prototype matrix was built from them).

use crate::autodiff::{Graph, Tensor, Value};
use crate::error::{Error, Result};

/// Which composite objective to assemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Cross-entropy only (the prompt-tuning ablation baseline).
    CeOnly,
    /// CE + textual prototypical contrastive loss.
    TpptV,
    /// CE + TPCL + alpha * prototype diversity.
    TpptVt { alpha: f64 },
}

/// Forward values of one composite evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub tpcl: f64,
    pub div: f64,
    pub alpha: f64,
}

/// Temperature-softmax class probabilities from cosine similarities:
/// `p(c|i) = exp(z_i·w_c/τ) / Σ_c' exp(z_i·w_c'/τ)`, rows of `z` and
/// `protos` assumed unit-norm.
pub fn class_probabilities(g: &mut Graph, z: Value, protos: Value, tau: f64) -> Result<Value> {
    check_embedding_pair(g, z, protos)?;
    let sims = g.matmul_tb(z, protos)?;
    let logits = g.scale(sims, 1.0 / tau)?;
    g.softmax(logits, 1)
}

/// Mean negative log-probability of the true labels.
pub fn ce_loss(g: &mut Graph, probs: Value, labels: &[usize]) -> Result<Value> {
    let shape = g.shape_of(probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "probabilities of shape {shape:?} against {} labels",
            labels.len()
        )));
    }
    check_labels(labels, shape[1])?;
    let picked = g.take_per_row(probs, labels)?;
    let logs = g.log(picked)?;
    let mean = g.mean(logs)?;
    g.neg(mean)
}

/// Numerically stable CE directly from embeddings (log-softmax form); same
/// value as `ce_loss(class_probabilities(..))`.
pub fn ce_loss_from_embeddings(
    g: &mut Graph,
    z: Value,
    protos: Value,
    labels: &[usize],
    tau: f64,
) -> Result<Value> {
    check_embedding_pair(g, z, protos)?;
    let c = g.shape_of(protos)[0];
    check_labels(labels, c)?;
    let sims = g.matmul_tb(z, protos)?;
    let logits = g.scale(sims, 1.0 / tau)?;
    let lsm = g.log_softmax(logits, 1)?;
    let picked = g.take_per_row(lsm, labels)?;
    let mean = g.mean(picked)?;
    g.neg(mean)
}

/// Textual prototypical contrastive loss.
///
/// Per prototype `c`, a softmax over the batch scores the pull of each
/// sample toward that prototype; only samples labelled `c` contribute
/// terms, and the sum is normalized by the number of seen classes, so
/// classes absent from the batch contribute zero.
pub fn tpcl_loss(
    g: &mut Graph,
    z: Value,
    protos: Value,
    labels: &[usize],
    tau: f64,
) -> Result<Value> {
    check_embedding_pair(g, z, protos)?;
    let c = g.shape_of(protos)[0];
    let n = g.shape_of(z)[0];
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    check_labels(labels, c)?;

    let sims = g.matmul_tb(protos, z)?; // [C, N]
    let logits = g.scale(sims, 1.0 / tau)?;
    let lsm = g.log_softmax(logits, 1)?;
    let mut mask = vec![0.0; c * n];
    for (i, &y) in labels.iter().enumerate() {
        mask[y * n + i] = 1.0;
    }
    let mask = g.constant(Tensor::new(mask, &[c, n])?);
    let selected = g.mul(lsm, mask)?;
    let total = g.sum(selected)?;
    g.scale(total, -1.0 / c as f64)
}

/// Prototype diversity loss: `log Σ_{m≠n} exp(−‖w_m − w_n‖²)` over ordered
/// pairs of seen classes.
pub fn div_loss(g: &mut Graph, protos: Value) -> Result<Value> {
    let shape = g.shape_of(protos).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "prototypes of shape {shape:?}, expected [C, D]"
        )));
    }
    let c = shape[0];
    if c < 2 {
        return Err(Error::Contract(format!(
            "diversity loss needs at least 2 prototypes, got {c}"
        )));
    }
    let gram = g.matmul_tb(protos, protos)?; // [C, C]
    let diag_idx: Vec<usize> = (0..c).collect();
    let diag = g.take_per_row(gram, &diag_idx)?; // [C, 1]
    let diag_flat = g.reshape(diag, &[c])?;
    // d²[m,n] = ‖w_m‖² + ‖w_n‖² − 2·w_m·w_n
    let neg2 = g.scale(gram, -2.0)?;
    let plus_cols = g.add_bias(neg2, diag_flat)?;
    let d2 = g.add_col(plus_cols, diag_flat)?;
    let neg_d2 = g.neg(d2)?;
    let e = g.exp(neg_d2)?;
    let mut off_diag = vec![1.0; c * c];
    for i in 0..c {
        off_diag[i * c + i] = 0.0;
    }
    let mask = g.constant(Tensor::new(off_diag, &[c, c])?);
    let masked = g.mul(e, mask)?;
    let s = g.sum(masked)?;
    g.log(s)
}

/// Assembles the selected composite and reports its parts.
///
/// The total is built in-graph (so `LossBreakdown::total` is the exact node
/// the backward pass starts from) and always satisfies
/// `total = ce + tpcl + alpha·div` over the reported parts.
pub fn composite_loss(
    g: &mut Graph,
    objective: Objective,
    z: Value,
    protos: Value,
    labels: &[usize],
    tau: f64,
) -> Result<(Value, LossBreakdown)> {
    let ce = ce_loss_from_embeddings(g, z, protos, labels, tau)?;
    let (total, ce_v, tpcl_v, div_v, alpha) = match objective {
        Objective::CeOnly => (ce, g.value(ce).data()[0], 0.0, 0.0, 0.0),
        Objective::TpptV => {
            let tpcl = tpcl_loss(g, z, protos, labels, tau)?;
            let total = g.add(ce, tpcl)?;
            (
                total,
                g.value(ce).data()[0],
                g.value(tpcl).data()[0],
                0.0,
                0.0,
            )
        }
        Objective::TpptVt { alpha } => {
            if alpha < 0.0 {
                return Err(Error::Contract(format!(
                    "diversity weight must be >= 0, got {alpha}"
                )));
            }
            let tpcl = tpcl_loss(g, z, protos, labels, tau)?;
            let div = div_loss(g, protos)?;
            let part = g.add(ce, tpcl)?;
            let weighted = g.scale(div, alpha)?;
            let total = g.add(part, weighted)?;
            (
                total,
                g.value(ce).data()[0],
                g.value(tpcl).data()[0],
                g.value(div).data()[0],
                alpha,
            )
        }
    };
    Ok((
        total,
        LossBreakdown {
            total: g.value(total).data()[0],
            ce: ce_v,
            tpcl: tpcl_v,
            div: div_v,
            alpha,
        },
    ))
}

fn check_embedding_pair(g: &Graph, z: Value, protos: Value) -> Result<()> {
    let zs = g.shape_of(z);
    let ps = g.shape_of(protos);
    if zs.len() != 2 || ps.len() != 2 {
        return Err(Error::Shape(
            "embeddings and prototypes must be rank-2".into(),
        ));
    }
    if zs[1] != ps[1] {
        return Err(Error::Shape(format!(
            "embedding dim {} vs prototype dim {}",
            zs[1], ps[1]
        )));
    }
    if ps[0] == 0 {
        return Err(Error::Contract("empty prototype set".into()));
    }
    Ok(())
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Contract(format!(
            "label {bad} outside the {n_classes}-class prototype set"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, sgd_step, OptimizerState};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::collections::BTreeMap;

    fn unit_rows(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let mut row: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            row.iter_mut().for_each(|x| *x /= norm);
            data.extend(row);
        }
        Tensor::new(data, &[rows, cols]).unwrap()
    }

    fn scalar_probs(z: &Tensor, w: &Tensor, tau: f64) -> Vec<Vec<f64>> {
        let (n, d) = (z.shape()[0], z.shape()[1]);
        let c = w.shape()[0];
        (0..n)
            .map(|i| {
                let logits: Vec<f64> = (0..c)
                    .map(|k| {
                        (0..d).map(|j| z.at(i, j) * w.at(k, j)).sum::<f64>() / tau
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                logits.iter().map(|l| (l - m).exp() / denom).collect()
            })
            .collect()
    }

    fn scalar_tpcl(cos: &[Vec<f64>], labels: &[usize], c: usize, tau: f64) -> f64 {
        // cos[i][k] = similarity of sample i to prototype k.
        let n = labels.len();
        let mut total = 0.0;
        for k in 0..c {
            for i in 0..n {
                if labels[i] != k {
                    continue;
                }
                let denom: f64 = (0..n).map(|j| (cos[j][k] / tau).exp()).sum();
                total += -((cos[i][k] / tau).exp() / denom).ln();
            }
        }
        total / c as f64
    }

    fn scalar_div(w: &Tensor) -> f64 {
        let (c, d) = (w.shape()[0], w.shape()[1]);
        let mut s = 0.0;
        for m in 0..c {
            for n in 0..c {
                if m == n {
                    continue;
                }
                let d2: f64 = (0..d).map(|j| (w.at(m, j) - w.at(n, j)).powi(2)).sum();
                s += (-d2).exp();
            }
        }
        s.ln()
    }

    #[test]
    fn single_prototype_gives_certainty() {
        let mut g = Graph::new();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let z = g.constant(unit_rows(&mut rng, 4, 6));
        let w = g.constant(unit_rows(&mut rng, 1, 6));
        let p = class_probabilities(&mut g, z, w, 0.07).unwrap();
        for &v in g.value(p).data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn equidistant_prototypes_give_uniform_probabilities() {
        let mut g = Graph::new();
        // z = e0; three prototypes with identical cosine to z.
        let z = g.constant(Tensor::new(vec![1.0, 0.0, 0.0], &[1, 3]).unwrap());
        let c = 0.5f64;
        let s = (1.0 - c * c).sqrt();
        let w = g.constant(
            Tensor::new(
                vec![c, s, 0.0, c, -s, 0.0, c, 0.0, s],
                &[3, 3],
            )
            .unwrap(),
        );
        let p = class_probabilities(&mut g, z, w, 0.07).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_match_scalar_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..100 {
            let (n, c, d) = (
                rng.gen_range(1..=5),
                rng.gen_range(1..=6),
                rng.gen_range(2..=8),
            );
            let zt = unit_rows(&mut rng, n, d);
            let wt = unit_rows(&mut rng, c, d);
            let mut g = Graph::new();
            let z = g.constant(zt.clone());
            let w = g.constant(wt.clone());
            let p = class_probabilities(&mut g, z, w, 0.07).unwrap();
            let got = g.value(p);
            let want = scalar_probs(&zt, &wt, 0.07);
            for i in 0..n {
                for k in 0..c {
                    assert!((got.at(i, k) - want[i][k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ce_closed_forms() {
        // Perfect one-hot rows.
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap());
        let l = ce_loss(&mut g, p, &[0, 1]).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);

        // Uniform rows over C classes.
        let c = 5;
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(vec![1.0 / c as f64; 2 * c], &[2, c]).unwrap());
        let l = ce_loss(&mut g, p, &[3, 0]).unwrap();
        assert!((g.value(l).data()[0] - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_matches_scalar_oracle_and_stable_form() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (n, c, d) = (
                rng.gen_range(1..=4),
                rng.gen_range(2..=5),
                rng.gen_range(2..=6),
            );
            let zt = unit_rows(&mut rng, n, d);
            let wt = unit_rows(&mut rng, c, d);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();

            let probs = scalar_probs(&zt, &wt, 0.07);
            let want = labels
                .iter()
                .enumerate()
                .map(|(i, &y)| -probs[i][y].ln())
                .sum::<f64>()
                / n as f64;

            let mut g = Graph::new();
            let z = g.constant(zt.clone());
            let w = g.constant(wt.clone());
            let p = class_probabilities(&mut g, z, w, 0.07).unwrap();
            let via_probs = ce_loss(&mut g, p, &labels).unwrap();
            let stable = ce_loss_from_embeddings(&mut g, z, w, &labels, 0.07).unwrap();
            assert!((g.value(via_probs).data()[0] - want).abs() < 1e-12);
            assert!((g.value(stable).data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn label_outside_prototype_set_rejected() {
        let mut g = Graph::new();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let z = g.constant(unit_rows(&mut rng, 2, 4));
        let w = g.constant(unit_rows(&mut rng, 3, 4));
        let p = class_probabilities(&mut g, z, w, 0.07).unwrap();
        assert!(matches!(
            ce_loss(&mut g, p, &[0, 3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn tpcl_single_sample_single_class_is_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let z = g.constant(unit_rows(&mut rng, 1, 5));
        let w = g.constant(unit_rows(&mut rng, 1, 5));
        let l = tpcl_loss(&mut g, z, w, &[0], 0.07).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);
    }

    #[test]
    fn tpcl_equal_cosines_single_class_is_n_log_n() {
        // All samples identical ⇒ equal cosine to the single prototype.
        let n = 4;
        let d = 3;
        let mut g = Graph::new();
        let row = vec![1.0, 0.0, 0.0];
        let z = g.constant(Tensor::new(row.repeat(n), &[n, d]).unwrap());
        let w = g.constant(Tensor::new(vec![0.0, 1.0, 0.0], &[1, d]).unwrap());
        let l = tpcl_loss(&mut g, z, w, &vec![0; n], 0.07).unwrap();
        let want = n as f64 * (n as f64).ln();
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn tpcl_matches_the_spec_worked_example() {
        // Cosine matrix rows are samples, columns classes; identity
        // prototypes turn raw coordinates into those dot products.
        let cos = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.7, 0.3]];
        let labels = [0usize, 1, 0];
        let mut g = Graph::new();
        let z = g.constant(
            Tensor::new(vec![0.9, 0.1, 0.2, 0.8, 0.7, 0.3], &[3, 2]).unwrap(),
        );
        let w = g.constant(Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap());
        let l = tpcl_loss(&mut g, z, w, &labels, 1.0).unwrap();
        let want = scalar_tpcl(&cos, &labels, 2, 1.0);
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn tpcl_matches_scalar_oracle_and_is_nonnegative() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        for _ in 0..100 {
            let (n, c, d) = (
                rng.gen_range(1..=6),
                rng.gen_range(1..=5),
                rng.gen_range(2..=6),
            );
            let zt = unit_rows(&mut rng, n, d);
            let wt = unit_rows(&mut rng, c, d);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let cos: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    (0..c)
                        .map(|k| (0..d).map(|j| zt.at(i, j) * wt.at(k, j)).sum())
                        .collect()
                })
                .collect();
            let want = scalar_tpcl(&cos, &labels, c, 0.07);

            let mut g = Graph::new();
            let z = g.constant(zt);
            let w = g.constant(wt);
            let l = tpcl_loss(&mut g, z, w, &labels, 0.07).unwrap();
            let got = g.value(l).data()[0];
            assert!((got - want).abs() < 1e-12);
            assert!(got >= -1e-15);
        }
    }

    #[test]
    fn div_closed_forms() {
        let mut g = Graph::new();
        let same = g.constant(Tensor::new(vec![1.0, 0.0, 1.0, 0.0], &[2, 2]).unwrap());
        let l = div_loss(&mut g, same).unwrap();
        assert!((g.value(l).data()[0] - 2.0f64.ln()).abs() < 1e-12);

        let mut g = Graph::new();
        let ortho = g.constant(Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap());
        let l = div_loss(&mut g, ortho).unwrap();
        assert!((g.value(l).data()[0] - (2.0f64.ln() - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn div_matches_pair_enumeration_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for _ in 0..100 {
            let c = rng.gen_range(2..=6);
            let d = rng.gen_range(2..=6);
            let wt = unit_rows(&mut rng, c, d);
            let mut g = Graph::new();
            let w = g.constant(wt.clone());
            let l = div_loss(&mut g, w).unwrap();
            assert!((g.value(l).data()[0] - scalar_div(&wt)).abs() < 1e-12);
        }
    }

    #[test]
    fn div_requires_two_prototypes() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::new(vec![1.0, 0.0], &[1, 2]).unwrap());
        assert!(matches!(div_loss(&mut g, w), Err(Error::Contract(_))));
    }

    #[test]
    fn div_decreases_as_the_pair_separates() {
        let mut last = f64::INFINITY;
        for t in [0.0f64, 0.5, 1.0, std::f64::consts::FRAC_PI_2] {
            let mut g = Graph::new();
            let w = g.constant(
                Tensor::new(vec![1.0, 0.0, t.cos(), t.sin()], &[2, 2]).unwrap(),
            );
            let l = div_loss(&mut g, w).unwrap();
            let v = g.value(l).data()[0];
            if t > 0.0 {
                assert!(v < last, "loss did not strictly decrease at angle {t}");
            }
            last = v;
        }
    }

    #[test]
    fn composite_alpha_zero_equals_tppt_v() {
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        let zt = unit_rows(&mut rng, 5, 6);
        let wt = unit_rows(&mut rng, 3, 6);
        let labels = [0usize, 1, 2, 0, 1];

        let mut g1 = Graph::new();
        let z = g1.constant(zt.clone());
        let w = g1.constant(wt.clone());
        let (_, v) = composite_loss(&mut g1, Objective::TpptV, z, w, &labels, 0.07).unwrap();

        let mut g2 = Graph::new();
        let z = g2.constant(zt);
        let w = g2.constant(wt);
        let (_, vt) = composite_loss(
            &mut g2,
            Objective::TpptVt { alpha: 0.0 },
            z,
            w,
            &labels,
            0.07,
        )
        .unwrap();
        assert_eq!(v.total, vt.total);
    }

    #[test]
    fn composite_recomposition_is_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..50 {
            let (n, c, d) = (
                rng.gen_range(2..=5),
                rng.gen_range(2..=4),
                rng.gen_range(2..=6),
            );
            let zt = unit_rows(&mut rng, n, d);
            let wt = unit_rows(&mut rng, c, d);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let alpha = rng.gen_range(0.0..2.0);
            let mut g = Graph::new();
            let z = g.constant(zt);
            let w = g.constant(wt);
            let (_, b) =
                composite_loss(&mut g, Objective::TpptVt { alpha }, z, w, &labels, 0.07)
                    .unwrap();
            assert!((b.total - (b.ce + b.tpcl + b.alpha * b.div)).abs() < 1e-12);
        }
        // alpha = 1 sums the raw parts.
        let mut g = Graph::new();
        let z = g.constant(unit_rows(&mut rng, 3, 4));
        let w = g.constant(unit_rows(&mut rng, 2, 4));
        let (_, b) = composite_loss(
            &mut g,
            Objective::TpptVt { alpha: 1.0 },
            z,
            w,
            &[0, 1, 0],
            0.07,
        )
        .unwrap();
        assert!((b.total - (b.ce + b.tpcl + b.div)).abs() < 1e-12);
    }

    #[test]
    fn every_loss_passes_grad_check() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        for case in 0..10 {
            let (n, c, d) = (3, 3, 4);
            let zt = unit_rows(&mut rng, n, d);
            let wt = unit_rows(&mut rng, c, d);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();

            for which in ["ce", "tpcl", "div", "v", "vt"] {
                let mut g = Graph::new();
                let zr = g.parameter("z_raw", zt.clone().with_grad()).unwrap();
                let wr = g.parameter("w_raw", wt.clone().with_grad()).unwrap();
                let z = g.l2_normalize_rows(zr).unwrap();
                let w = g.l2_normalize_rows(wr).unwrap();
                let loss = match which {
                    "ce" => ce_loss_from_embeddings(&mut g, z, w, &labels, 0.07).unwrap(),
                    "tpcl" => tpcl_loss(&mut g, z, w, &labels, 0.07).unwrap(),
                    "div" => div_loss(&mut g, w).unwrap(),
                    "v" => {
                        composite_loss(&mut g, Objective::TpptV, z, w, &labels, 0.07)
                            .unwrap()
                            .0
                    }
                    _ => {
                        composite_loss(
                            &mut g,
                            Objective::TpptVt { alpha: 1.0 },
                            z,
                            w,
                            &labels,
                            0.07,
                        )
                        .unwrap()
                        .0
                    }
                };
                g.set_loss(loss).unwrap();
                let report = grad_check(&mut g, 1e-4, 1e-4).unwrap();
                assert!(
                    report.passed(),
                    "{which} case {case}: max err {:.2e}",
                    report.max_rel_error()
                );
            }
        }
    }

    #[test]
    fn minimizing_div_spreads_prototypes_apart() {
        let (c, d) = (8, 6);
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let mut protos = unit_rows(&mut rng, c, d).with_grad();

        let mean_pairwise = |t: &Tensor| -> f64 {
            let mut s = 0.0;
            let mut cnt = 0;
            for m in 0..c {
                for n in m + 1..c {
                    let d2: f64 = (0..d).map(|j| (t.at(m, j) - t.at(n, j)).powi(2)).sum();
                    s += d2.sqrt();
                    cnt += 1;
                }
            }
            s / cnt as f64
        };

        let before = mean_pairwise(&protos);
        let steps = 200;
        let mut opt = OptimizerState::new(0.0, 0.5, steps);
        for _ in 0..steps {
            let mut g = Graph::new();
            let p = g.parameter("protos", protos.clone()).unwrap();
            let pn = g.l2_normalize_rows(p).unwrap();
            let loss = div_loss(&mut g, pn).unwrap();
            g.set_loss(loss).unwrap();
            let grads = g.backward().unwrap();
            let gm = g.param_grads(&grads);
            let mut refs: Vec<(&str, &mut Tensor)> = vec![("protos", &mut protos)];
            sgd_step(refs.drain(..).collect(), &gm, &mut opt).unwrap();
            // Re-project to the unit sphere after each step.
            let cols = d;
            for m in 0..c {
                let norm: f64 = (0..cols)
                    .map(|j| protos.at(m, j).powi(2))
                    .sum::<f64>()
                    .sqrt();
                for j in 0..cols {
                    protos.data_mut()[m * cols + j] /= norm;
                }
            }
        }
        let after = mean_pairwise(&protos);
        assert!(
            after > before,
            "mean pairwise distance did not increase: {before:.4} -> {after:.4}"
        );
    }

    #[test]
    fn evaluate_with_gradients_flows_into_prototypes_only_when_staged() {
        // In V mode prototypes are constants: no gradient entries for them.
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        let mut g = Graph::new();
        let zr = g
            .parameter("z_raw", unit_rows(&mut rng, 3, 4).with_grad())
            .unwrap();
        let z = g.l2_normalize_rows(zr).unwrap();
        let w = g.constant(unit_rows(&mut rng, 2, 4));
        let (loss, _) =
            composite_loss(&mut g, Objective::TpptV, z, w, &[0, 1, 1], 0.07).unwrap();
        g.set_loss(loss).unwrap();
        let grads = g.backward().unwrap();
        let gm = g.param_grads(&grads);
        assert!(gm.contains_key("z_raw"));
        assert_eq!(gm.len(), 1);
        assert!(gm["z_raw"].data().iter().any(|&x| x != 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn probability_rows_sum_to_one(seed in 0u64..10_000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let (n, c, d) = (
                rng.gen_range(1..=6),
                rng.gen_range(1..=8),
                rng.gen_range(2..=8),
            );
            let mut g = Graph::new();
            let z = g.constant(unit_rows(&mut rng, n, d));
            let w = g.constant(unit_rows(&mut rng, c, d));
            let p = class_probabilities(&mut g, z, w, 0.07).unwrap();
            let probs = g.value(p);
            for i in 0..n {
                let row_sum: f64 = (0..c).map(|k| probs.at(i, k)).sum();
                prop_assert!((row_sum - 1.0).abs() < 1e-9);
                for k in 0..c {
                    prop_assert!(probs.at(i, k) >= 0.0);
                }
            }
        }

        #[test]
        fn argmax_invariant_under_prototype_permutation(seed in 0u64..10_000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let (n, c, d) = (
                rng.gen_range(1..=5),
                rng.gen_range(2..=6),
                rng.gen_range(2..=6),
            );
            let zt = unit_rows(&mut rng, n, d);
            let wt = unit_rows(&mut rng, c, d);

            let argmaxes = |z: &Tensor, w: &Tensor| -> Vec<usize> {
                let mut g = Graph::new();
                let zv = g.constant(z.clone());
                let wv = g.constant(w.clone());
                let p = class_probabilities(&mut g, zv, wv, 0.07).unwrap();
                let probs = g.value(p);
                (0..z.shape()[0])
                    .map(|i| {
                        (0..w.shape()[0])
                            .max_by(|&a, &b| probs.at(i, a).total_cmp(&probs.at(i, b)))
                            .unwrap()
                    })
                    .collect()
            };

            // Reverse the prototype order and map predictions back.
            let base = argmaxes(&zt, &wt);
            let mut rev_data = Vec::new();
            for k in (0..c).rev() {
                rev_data.extend_from_slice(&wt.data()[k * d..(k + 1) * d]);
            }
            let wrev = Tensor::new(rev_data, &[c, d]).unwrap();
            let rev = argmaxes(&zt, &wrev);
            for (a, b) in base.iter().zip(rev.iter()) {
                prop_assert_eq!(*a, c - 1 - *b);
            }
        }

        #[test]
        fn div_is_permutation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let (c, d) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
            let wt = unit_rows(&mut rng, c, d);
            let mut perm: Vec<usize> = (0..c).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let mut shuffled = Vec::new();
            for &k in &perm {
                shuffled.extend_from_slice(&wt.data()[k * d..(k + 1) * d]);
            }
            let ws = Tensor::new(shuffled, &[c, d]).unwrap();

            let eval = |t: &Tensor| {
                let mut g = Graph::new();
                let w = g.constant(t.clone());
                let l = div_loss(&mut g, w).unwrap();
                g.value(l).data()[0]
            };
            prop_assert!((eval(&wt) - eval(&ws)).abs() < 1e-12);
        }
    }
}
