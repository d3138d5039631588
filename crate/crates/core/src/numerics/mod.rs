//! Dense arrays, a reverse-mode tape, the GCN layer and RMSProp.

mod gcn;
mod optim;
mod tape;
mod tensor;

pub use gcn::{gcn_layer, normalize_adjacency};
pub use optim::{clip_global_norm, RmsProp, DEFAULT_DECAY, DEFAULT_EPSILON, DEFAULT_LEARNING_RATE};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use alloc::vec::Vec;

/// Floor added inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor data length {found} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, found: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("adjacency not symmetric at ({0},{1})")]
    AsymmetricAdjacency(usize, usize),
}

pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        libm::expm1(x)
    }
}

/// Max-shifted softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| libm::exp(v - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-sum_k q_k ln(p_k + LOG_EPS)`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter()
        .zip(q)
        .map(|(&pk, &qk)| if qk == 0.0 { 0.0 } else { qk * libm::log(pk + LOG_EPS) })
        .sum::<f64>()
}

pub fn entropy(p: &[f64]) -> f64 {
    cross_entropy(p, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_primitives() {
        assert!((elu(-1.0) - (libm::exp(-1.0) - 1.0)).abs() < 1e-15);
        assert!((elu(-1.0) + 0.6321).abs() < 1e-4);
        assert_eq!(elu(2.5), 2.5);
        assert_eq!(softmax(&[0.0, 0.0]), alloc::vec![0.5, 0.5]);
        assert!((cross_entropy(&[0.5, 0.5], &[1.0, 0.0]) - core::f64::consts::LN_2).abs() < 1e-11);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, -2.0, 0.5]);
        let b = softmax(&[1001.0, 998.0, 1000.5]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
