//! Dense-tensor computation graph with reverse-mode differentiation, the
//! numerical substrate for every other module.

mod graph;
mod optimizer;
mod tensor;

pub use graph::{evaluate_with_gradients, grad_check, GradCheckReport, Gradients, Graph, Value};
pub use optimizer::{cosine_lr, sgd_step, OptimizerState};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::error::Error;

    #[test]
    fn sum_of_parameter_has_unit_gradients() {
        let mut g = Graph::new();
        let p = g
            .parameter("p", Tensor::new(vec![1.0, -2.0, 3.0], &[3]).unwrap())
            .unwrap();
        let loss = g.sum(p).unwrap();
        g.set_loss(loss).unwrap();
        let grads = g.backward().unwrap();
        assert_eq!(grads.wrt(p).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut g = Graph::new();
        let p = g
            .parameter("p", Tensor::new(vec![3.0, 4.0], &[2]).unwrap())
            .unwrap();
        let sq = g.mul(p, p).unwrap();
        let half = g.scale(sq, 0.5).unwrap();
        let loss = g.sum(half).unwrap();
        g.set_loss(loss).unwrap();
        assert_eq!(g.loss_value().unwrap(), 12.5);
        let grads = g.backward().unwrap();
        assert_eq!(grads.wrt(p).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_is_a_construction_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        let c = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.matmul(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.parameter("p", Tensor::zeros(&[2]).with_grad()).unwrap();
        assert!(matches!(g.set_loss(p), Err(Error::Contract(_))));
    }

    #[test]
    fn evaluate_with_gradients_rebinds_inputs() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::new(vec![1.0, 1.0], &[2]).unwrap()).unwrap();
        let p = g
            .parameter("p", Tensor::new(vec![2.0, 5.0], &[2]).unwrap())
            .unwrap();
        let prod = g.mul(x, p).unwrap();
        let loss = g.sum(prod).unwrap();
        g.set_loss(loss).unwrap();
        g.mark_output("loss", loss).unwrap();

        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), Tensor::new(vec![3.0, -1.0], &[2]).unwrap());
        let (outputs, grads) = evaluate_with_gradients(&mut g, &inputs).unwrap();
        assert_eq!(outputs["loss"].data(), &[1.0]);
        assert_eq!(grads["p"].data(), &[3.0, -1.0]);
    }

    #[test]
    fn evaluate_is_bit_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g
                .input("x", Tensor::new(vec![0.3, -0.7, 0.2, 0.9], &[2, 2]).unwrap())
                .unwrap();
            let p = g
                .parameter("p", Tensor::new(vec![0.1, 0.4, -0.2, 0.8], &[2, 2]).unwrap())
                .unwrap();
            let h = g.matmul(x, p).unwrap();
            let s = g.softmax(h, 1).unwrap();
            let l = g.log(s).unwrap();
            let loss = g.mean(l).unwrap();
            g.set_loss(loss).unwrap();
            g.mark_output("probs", s).unwrap();
            let inputs = BTreeMap::from([(
                "x".to_string(),
                Tensor::new(vec![0.3, -0.7, 0.2, 0.9], &[2, 2]).unwrap(),
            )]);
            evaluate_with_gradients(&mut g, &inputs).unwrap()
        };
        let (o1, g1) = run();
        let (o2, g2) = run();
        assert!(o1["probs"].bits_eq(&o2["probs"]));
        assert!(g1["p"].bits_eq(&g2["p"]));
    }

    #[test]
    fn quadratic_grad_check_is_tight() {
        let mut g = Graph::new();
        let p = g.parameter("p", Tensor::new(vec![2.0], &[1]).unwrap()).unwrap();
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum(sq).unwrap();
        g.set_loss(loss).unwrap();
        let report = grad_check(&mut g, 1e-4, 1e-6).unwrap();
        assert!(report.max_rel_error() < 1e-6, "err={}", report.max_rel_error());
    }

    #[test]
    fn division_by_zero_parameter_is_a_numerical_error() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::new(vec![1.0], &[1]).unwrap());
        let p = g.parameter("p", Tensor::new(vec![0.0], &[1]).unwrap()).unwrap();
        let q = g.div(one, p).unwrap();
        let loss = g.sum(q).unwrap();
        g.set_loss(loss).unwrap();
        let err = grad_check(&mut g, 1e-4, 1e-4);
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn l2_normalize_zero_vector_is_contract_error() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.l2_normalize_rows(z), Err(Error::Contract(_))));
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap());
        let b = g.constant(Tensor::new(vec![5.0, 6.0], &[1, 2]).unwrap());
        let cat = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.shape_of(cat), &[3, 2]);
        let back = g.slice_rows(cat, 2, 3).unwrap();
        assert_eq!(g.value(back).data(), &[5.0, 6.0]);

        let side = g.concat(&[a, a], 1).unwrap();
        assert_eq!(g.shape_of(side), &[2, 4]);
        let col = g.slice_cols(side, 2, 4).unwrap();
        assert_eq!(g.value(col).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gather_rows_accumulates_duplicate_gradients() {
        let mut g = Graph::new();
        let table = g
            .parameter("t", Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap())
            .unwrap();
        let picked = g.gather_rows(table, &[0, 0, 1]).unwrap();
        let loss = g.sum(picked).unwrap();
        g.set_loss(loss).unwrap();
        let grads = g.backward().unwrap();
        assert_eq!(grads.wrt(table).unwrap(), &[2.0, 2.0, 1.0, 1.0]);
    }
}
