//! Plain (untaped) tensor operations. The incremental decode paths use
//! these; they share kernels with the tape ops in [`super::Graph`], so both
//! routes produce the same arithmetic.

use super::{kernels, Mask, Tensor, TensorError};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(TensorError::DimMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = kernels::matmul(a.data(), a.rows(), a.cols(), b.data(), b.cols());
    Tensor::new(vec![a.rows(), b.cols()], data)
}

/// Softmax output plus the indices of rows that had no allowed entries
/// (those rows are all zeros).
pub struct SoftmaxRows {
    pub probs: Tensor,
    pub empty_rows: Vec<usize>,
}

pub fn softmax_rows(x: &Tensor, mask: Option<&Mask>) -> Result<SoftmaxRows, TensorError> {
    if x.shape().len() != 2 {
        return Err(TensorError::NotAMatrix {
            op: "softmax_rows",
            shape: x.shape().to_vec(),
        });
    }
    if let Some(mk) = mask {
        if mk.rows() != x.rows() || mk.cols() != x.cols() {
            return Err(TensorError::DimMismatch {
                op: "softmax_rows",
                lhs: vec![x.rows(), x.cols()],
                rhs: vec![mk.rows(), mk.cols()],
            });
        }
    }
    let (data, empty) = kernels::softmax_rows(x.data(), x.rows(), x.cols(), mask);
    Ok(SoftmaxRows {
        probs: Tensor::new(vec![x.rows(), x.cols()], data)?,
        empty_rows: empty
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.then_some(i))
            .collect(),
    })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| kernels::sigmoid_scalar(*v)).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor, TensorError> {
    if x.shape().len() != 2 {
        return Err(TensorError::NotAMatrix {
            op: "log_softmax_rows",
            shape: x.shape().to_vec(),
        });
    }
    let data = kernels::log_softmax_rows(x.data(), x.rows(), x.cols());
    Tensor::new(vec![x.rows(), x.cols()], data)
}

/// Exclusive running product along each row; entry 0 of every row is 1.
/// Inputs are expected in [0, 1].
pub fn exclusive_cumprod_rows(x: &Tensor) -> Result<Tensor, TensorError> {
    if x.shape().len() != 2 {
        return Err(TensorError::NotAMatrix {
            op: "exclusive_cumprod_rows",
            shape: x.shape().to_vec(),
        });
    }
    let data = kernels::exclusive_cumprod_rows(x.data(), x.rows(), x.cols());
    Tensor::new(vec![x.rows(), x.cols()], data)
}

pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<Tensor, TensorError> {
    if x.shape().len() != 2 || gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(TensorError::DimMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let (data, _, _) =
        kernels::layer_norm_rows(x.data(), x.rows(), x.cols(), gain.data(), bias.data(), eps);
    Tensor::new(vec![x.rows(), x.cols()], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_example() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let out = softmax_rows(&x, None).unwrap();
        assert_eq!(out.probs.data(), &[0.5, 0.5]);
        assert!(out.empty_rows.is_empty());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect()).unwrap();
        let out = softmax_rows(&x, None).unwrap();
        for i in 0..3 {
            let s: f64 = out.probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let x = Tensor::matrix(1, 4, vec![5.0; 4]).unwrap();
        let gain = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let bias = Tensor::new(vec![4], vec![0.25; 4]).unwrap();
        let out = layer_norm(&x, &gain, &bias, 1e-12).unwrap();
        // Zero variance: the normalized row collapses to zeros, leaving bias.
        for v in out.data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let x = Tensor::matrix(1, 5, vec![1.0, 2.0, 3.0, 4.0, 10.0]).unwrap();
        let gain = Tensor::new(vec![5], vec![1.0; 5]).unwrap();
        let bias = Tensor::new(vec![5], vec![0.0; 5]).unwrap();
        let out = layer_norm(&x, &gain, &bias, 1e-12).unwrap();
        let mean: f64 = out.data().iter().sum::<f64>() / 5.0;
        let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }
}
