//! Cross-attention cost between a student and a teacher token sequence.
//!
//! Similarity is a scaled dot product `S = X (Y P)^T / sqrt(d)`, normalized
//! row-wise over teacher tokens, and the cost is its complement
//! `C = 1 - softmax(S)`. `P` maps teacher vectors of width `D` into the
//! student width `d`; when `d == D` it may be left out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{row_softmax, Matrix};

/// Linear map from teacher width `D` to student width `d`, stored `D x d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub weights: Matrix,
    pub seed: Option<u64>,
}

impl Projection {
    pub fn from_matrix(weights: Matrix) -> Result<Self> {
        if weights.is_empty() {
            return dim_err("projection with a zero dimension");
        }
        Ok(Self { weights, seed: None })
    }

    /// Teacher width `D`.
    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    /// Student width `d`.
    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    /// Half-width of the uniform initialization range, `sqrt(6 / (D + d))`.
    pub fn init_bound(teacher_dim: usize, student_dim: usize) -> f64 {
        (6.0 / (teacher_dim + student_dim) as f64).sqrt()
    }
}

/// Seeded uniform (Glorot) initialization of a `D x d` projection.
pub fn init_projection(teacher_dim: usize, student_dim: usize, seed: u64) -> Result<Projection> {
    if teacher_dim == 0 || student_dim == 0 {
        return dim_err(format!("projection of shape {teacher_dim}x{student_dim}"));
    }
    let bound = Projection::init_bound(teacher_dim, student_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Matrix::from_fn(teacher_dim, student_dim, |_, _| rng.gen_range(-bound..=bound));
    Ok(Projection { weights, seed: Some(seed) })
}

/// Teacher rows expressed in the student width: `Y P`, or `Y` itself.
pub(crate) fn teacher_keys(y: &Matrix, student_dim: usize, p: Option<&Projection>) -> Result<Matrix> {
    match p {
        Some(p) => {
            if p.input_dim() != y.cols() || p.output_dim() != student_dim {
                return dim_err(format!(
                    "projection is {}x{} but teacher width is {} and student width is {}",
                    p.input_dim(),
                    p.output_dim(),
                    y.cols(),
                    student_dim
                ));
            }
            y.matmul(&p.weights)
        }
        None if y.cols() == student_dim => Ok(y.clone()),
        None => Err(Error::Dimension(format!(
            "student width {student_dim} differs from teacher width {}; a projection is required",
            y.cols()
        ))),
    }
}

/// `S = X (Y P)^T / sqrt(d)`, shape `N x M`.
pub fn similarity(x: &Matrix, y: &Matrix, p: Option<&Projection>) -> Result<Matrix> {
    if x.is_empty() || y.is_empty() {
        return dim_err("similarity of an empty sequence");
    }
    let keys = teacher_keys(y, x.cols(), p)?;
    Ok(x.matmul_t(&keys)?.scale(1.0 / (x.cols() as f64).sqrt()))
}

/// `C = 1 - softmax_rows(S)`; entries lie in `[0, 1)` and each row sums to `M - 1`.
pub fn attention_cost(s: &Matrix) -> Result<Matrix> {
    Ok(row_softmax(s)?.map(|a| 1.0 - a))
}

pub fn cost_matrix(x: &Matrix, y: &Matrix, p: Option<&Projection>) -> Result<Matrix> {
    attention_cost(&similarity(x, y, p)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn projection_bounds_and_determinism() {
        for (t, s) in [(3, 3), (4, 2), (16, 5)] {
            let p = init_projection(t, s, 11).unwrap();
            assert_eq!(p.weights.shape(), (t, s));
            let bound = Projection::init_bound(t, s);
            assert!(p.weights.as_slice().iter().all(|v| v.abs() <= bound));
            assert_eq!(p, init_projection(t, s, 11).unwrap());
        }
        assert_ne!(init_projection(4, 2, 1).unwrap(), init_projection(4, 2, 2).unwrap());
        assert!(matches!(init_projection(0, 2, 1), Err(Error::Dimension(_))));
        assert!(matches!(init_projection(2, 0, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn projection_mean_is_centred_over_seeds() {
        let bound = Projection::init_bound(4, 2);
        for seed in 0..1000u64 {
            let p = init_projection(4, 2, seed).unwrap();
            let mean = p.weights.as_slice().iter().sum::<f64>() / 8.0;
            assert!(mean.abs() <= 0.9 * bound, "seed {seed}: mean {mean}");
        }
        let grand: f64 = (0..1000u64)
            .map(|seed| init_projection(4, 2, seed).unwrap().weights.as_slice().iter().sum::<f64>())
            .sum::<f64>()
            / 8000.0;
        // Standard error of the grand mean is bound / sqrt(3 * 8000), about 0.0055 * bound.
        assert!(grand.abs() < 0.03 * bound, "grand mean {grand}");
    }

    #[test]
    fn similarity_examples() {
        let s = similarity(&m(&[vec![1.0]]), &m(&[vec![1.0]]), None).unwrap();
        assert_eq!(s.as_slice(), &[1.0]);

        let s = similarity(&Matrix::identity(2), &Matrix::identity(2), None).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((s[(0, 0)] - r).abs() < 1e-12 && (s[(1, 1)] - r).abs() < 1e-12);
        assert_eq!(s[(0, 1)], 0.0);
        assert!((s[(0, 0)] - FRAC_1_SQRT_2).abs() < 1e-5);

        let x = m(&[vec![1.0, 0.0]]);
        let y = m(&[vec![2.0, 2.0]]);
        let plain = similarity(&x, &y, None).unwrap();
        let p = Projection::from_matrix(Matrix::identity(2)).unwrap();
        let projected = similarity(&x, &y, Some(&p)).unwrap();
        assert_eq!(plain, projected);
        assert!((plain[(0, 0)] - std::f64::consts::SQRT_2).abs() < 1e-5);
    }

    #[test]
    fn similarity_requires_projection_for_mismatched_widths() {
        let x = Matrix::zeros(2, 3);
        let y = Matrix::zeros(4, 5);
        let err = similarity(&x, &y, None).unwrap_err();
        assert!(err.to_string().contains("projection is required"));
        let p = init_projection(5, 3, 0).unwrap();
        assert_eq!(similarity(&x, &y, Some(&p)).unwrap().shape(), (2, 4));
        let wrong = init_projection(3, 5, 0).unwrap();
        assert!(similarity(&x, &y, Some(&wrong)).is_err());
    }

    #[test]
    fn attention_cost_examples() {
        let c = attention_cost(&m(&[vec![0.0, 0.0]])).unwrap();
        assert_eq!(c.as_slice(), &[0.5, 0.5]);

        let c = attention_cost(&m(&[vec![FRAC_1_SQRT_2, 0.0], vec![0.0, FRAC_1_SQRT_2]])).unwrap();
        let expected = [0.3302, 0.6698, 0.6698, 0.3302];
        for (v, e) in c.as_slice().iter().zip(expected) {
            assert!((v - e).abs() < 1e-4);
        }

        for v in [-3.0, 0.0, 1e6] {
            assert_eq!(attention_cost(&m(&[vec![v]])).unwrap().as_slice(), &[0.0]);
        }
    }

    #[test]
    fn cost_matrix_examples() {
        assert_eq!(cost_matrix(&m(&[vec![1.0]]), &m(&[vec![1.0]]), None).unwrap().as_slice(), &[0.0]);

        let y = m(&[vec![0.3, -1.0], vec![0.3, -1.0]]);
        let c = cost_matrix(&m(&[vec![2.0, 0.5]]), &y, None).unwrap();
        assert_eq!(c.as_slice(), &[0.5, 0.5]);

        let c = cost_matrix(&Matrix::identity(2), &Matrix::identity(2), None).unwrap();
        let expected = [0.3302, 0.6698, 0.6698, 0.3302];
        for (v, e) in c.as_slice().iter().zip(expected) {
            assert!((v - e).abs() < 1e-4);
        }
    }
}
