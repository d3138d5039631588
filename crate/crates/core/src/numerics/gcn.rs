use alloc::vec;

use super::{NumericsError, Tape, Tensor, Var};

/// `D^-1/2 (A + I) D^-1/2` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(adjacency: &Tensor) -> Result<Tensor, NumericsError> {
    let n = adjacency.rows();
    if adjacency.cols() != n {
        return Err(NumericsError::ShapeMismatch {
            op: "normalize_adjacency",
            left: adjacency.shape().to_vec(),
            right: vec![n, n],
        });
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if adjacency.get(i, j) != adjacency.get(j, i) {
                return Err(NumericsError::AsymmetricAdjacency(i, j));
            }
        }
    }
    let hat = |i: usize, j: usize| if i == j { 1.0 } else { adjacency.get(i, j) };
    let inv_sqrt_deg: alloc::vec::Vec<f64> = (0..n)
        .map(|i| 1.0 / libm::sqrt((0..n).map(|j| hat(i, j)).sum::<f64>()))
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = hat(i, j) * inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    Tensor::new(&[n, n], out)
}

/// `ELU(A_norm · F · W)`.
pub fn gcn_layer(tape: &mut Tape, features: Var, adjacency_norm: Var, weight: Var) -> Result<Var, NumericsError> {
    let mixed = tape.matmul(adjacency_norm, features)?;
    let pre = tape.matmul(mixed, weight)?;
    tape.elu(pre)
}
