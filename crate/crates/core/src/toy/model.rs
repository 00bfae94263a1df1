//! A tiny causal language model with a hand-written backward pass.
//!
//! Each position sees the running mean of the embeddings up to and including
//! itself: `m_t = mean(E[0..=t])`, `h_t = tanh(m_t w1 + b1)`,
//! `z_t = h_t w2 + b2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyLM {
    pub embed: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// `T x d`
    pub embeddings: Matrix,
    /// Causal running means, `T x d`.
    pub means: Matrix,
    /// `T x h`
    pub hiddens: Matrix,
    /// `T x V`
    pub logits: Matrix,
}

/// Gradients of a scalar loss with respect to the outputs of [`ToyLM::forward`].
/// Missing entries are treated as zero.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    pub embeddings: Option<Matrix>,
    pub hiddens: Option<Matrix>,
    pub logits: Option<Matrix>,
}

impl ToyLM {
    pub fn zeros(vocab: usize, dim: usize, hidden: usize) -> Self {
        Self {
            embed: Matrix::zeros(vocab, dim),
            w1: Matrix::zeros(dim, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, vocab),
            b2: vec![0.0; vocab],
        }
    }

    /// Uniform embeddings in `[-1, 1]`, Glorot-uniform weights, zero biases.
    pub fn init(vocab: usize, dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || dim == 0 || hidden == 0 {
            return dim_err(format!("model sizes must be positive, got V={vocab} d={dim} h={hidden}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, bound: f64| {
            Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
        };
        let embed = uniform(vocab, dim, 1.0);
        let w1 = uniform(dim, hidden, (6.0 / (dim + hidden) as f64).sqrt());
        let w2 = uniform(hidden, vocab, (6.0 / (hidden + vocab) as f64).sqrt());
        Ok(Self { embed, w1, b1: vec![0.0; hidden], w2, b2: vec![0.0; vocab] })
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    pub fn dim(&self) -> usize {
        self.embed.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn forward(&self, ids: &[usize]) -> Result<Forward> {
        if ids.is_empty() {
            return dim_err("forward pass over an empty sequence");
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab_size()) {
            return Err(Error::Index(format!("token id {id} outside vocabulary of size {}", self.vocab_size())));
        }
        let d = self.dim();
        let embeddings = Matrix::from_fn_unchecked(ids.len(), d, |t, j| self.embed[(ids[t], j)]);
        let mut means = Matrix::zeros(ids.len(), d);
        let mut running = vec![0.0; d];
        for t in 0..ids.len() {
            for (r, e) in running.iter_mut().zip(embeddings.row(t)) {
                *r += e;
            }
            let inv = 1.0 / (t + 1) as f64;
            for (m, r) in means.row_mut(t).iter_mut().zip(&running) {
                *m = r * inv;
            }
        }
        let mut hiddens = means.matmul(&self.w1)?;
        for t in 0..ids.len() {
            for (v, b) in hiddens.row_mut(t).iter_mut().zip(&self.b1) {
                *v = (*v + b).tanh();
            }
        }
        let mut logits = hiddens.matmul(&self.w2)?;
        for t in 0..ids.len() {
            for (v, b) in logits.row_mut(t).iter_mut().zip(&self.b2) {
                *v += b;
            }
        }
        Ok(Forward { embeddings, means, hiddens, logits })
    }

    /// Parameter gradients of a loss whose gradients with respect to the
    /// forward outputs are `up`.
    pub fn backward(&self, ids: &[usize], up: &Upstream) -> Result<ToyLM> {
        let fwd = self.forward(ids)?;
        self.backward_from(ids, &fwd, up)
    }

    /// As [`ToyLM::backward`], reusing the activations of an earlier forward pass.
    pub fn backward_from(&self, ids: &[usize], fwd: &Forward, up: &Upstream) -> Result<ToyLM> {
        let t_len = ids.len();
        let expect = |m: &Option<Matrix>, cols: usize, what: &str| -> Result<()> {
            match m {
                Some(m) if m.shape() != (t_len, cols) => dim_err(format!(
                    "upstream {what} gradient is {:?}, expected ({t_len}, {cols})",
                    m.shape()
                )),
                _ => Ok(()),
            }
        };
        expect(&up.embeddings, self.dim(), "embedding")?;
        expect(&up.hiddens, self.hidden_dim(), "hidden")?;
        expect(&up.logits, self.vocab_size(), "logit")?;
        if fwd.logits.rows() != t_len {
            return dim_err("forward activations do not match the sequence");
        }

        let mut grads = ToyLM::zeros(self.vocab_size(), self.dim(), self.hidden_dim());
        let mut g_hidden = up.hiddens.clone().unwrap_or_else(|| Matrix::zeros(t_len, self.hidden_dim()));
        if let Some(gz) = &up.logits {
            grads.b2 = gz.col_sums();
            grads.w2 = fwd.hiddens.t_matmul(gz)?;
            g_hidden.add_scaled(&gz.matmul_t(&self.w2)?, 1.0)?;
        }
        let g_pre = Matrix::from_fn_unchecked(t_len, self.hidden_dim(), |t, k| {
            let h = fwd.hiddens[(t, k)];
            g_hidden[(t, k)] * (1.0 - h * h)
        });
        grads.b1 = g_pre.col_sums();
        grads.w1 = fwd.means.t_matmul(&g_pre)?;
        let g_means = g_pre.matmul_t(&self.w1)?;

        // m_t averages rows 0..=t, so row s receives sum_{t >= s} g_m[t] / (t + 1).
        let mut g_embed = up.embeddings.clone().unwrap_or_else(|| Matrix::zeros(t_len, self.dim()));
        let mut acc = vec![0.0; self.dim()];
        for t in (0..t_len).rev() {
            let inv = 1.0 / (t + 1) as f64;
            for ((a, g), e) in acc.iter_mut().zip(g_means.row(t)).zip(g_embed.row_mut(t)) {
                *a += g * inv;
                *e += *a;
            }
        }
        for (t, &id) in ids.iter().enumerate() {
            for (p, g) in grads.embed.row_mut(id).iter_mut().zip(g_embed.row(t)) {
                *p += g;
            }
        }
        Ok(grads)
    }

    /// Parameter blocks in a fixed order: embed, w1, b1, w2, b2.
    pub fn params(&self) -> [&[f64]; 5] {
        [self.embed.as_slice(), self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 5] {
        [self.embed.as_mut_slice(), self.w1.as_mut_slice(), &mut self.b1, self.w2.as_mut_slice(), &mut self.b2]
    }

    /// `self += scale * other`, blockwise.
    pub fn add_scaled(&mut self, other: &ToyLM, scale: f64) -> Result<()> {
        if (self.vocab_size(), self.dim(), self.hidden_dim()) != (other.vocab_size(), other.dim(), other.hidden_dim()) {
            return dim_err("models of different sizes");
        }
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::gradient_error;
    use crate::numerics::frobenius_dot;
    use crate::objective::{ce_grad, ce_loss};

    #[test]
    fn shapes_and_single_token() {
        let m = ToyLM::init(7, 3, 5, 1).unwrap();
        let f = m.forward(&[2, 0, 6, 6]).unwrap();
        assert_eq!(f.embeddings.shape(), (4, 3));
        assert_eq!(f.hiddens.shape(), (4, 5));
        assert_eq!(f.logits.shape(), (4, 7));

        let one = m.forward(&[4]).unwrap();
        for k in 0..5 {
            let pre: f64 = (0..3).map(|j| m.embed[(4, j)] * m.w1[(j, k)]).sum::<f64>() + m.b1[k];
            assert!((one.hiddens[(0, k)] - pre.tanh()).abs() < 1e-15);
        }
        assert!(matches!(m.forward(&[7]), Err(Error::Index(_))));
        assert!(m.forward(&[]).is_err());
    }

    #[test]
    fn zero_model_outputs_zero() {
        let f = ToyLM::zeros(4, 2, 3).forward(&[0, 3, 1]).unwrap();
        assert!(f.logits.as_slice().iter().all(|&v| v == 0.0));
        assert!(f.hiddens.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prefix_causality() {
        let m = ToyLM::init(9, 4, 6, 3).unwrap();
        let ids = [1, 8, 3, 3, 0, 5, 2];
        let full = m.forward(&ids).unwrap();
        for k in 1..=ids.len() {
            let p = m.forward(&ids[..k]).unwrap();
            assert_eq!(p.hiddens, full.hiddens.slice_rows(0, k));
            assert_eq!(p.logits, full.logits.slice_rows(0, k));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = ToyLM::init(5, 2, 3, 0).unwrap();
        let g = m.backward(&[1, 2, 4], &Upstream::default()).unwrap();
        assert_eq!(g, ToyLM::zeros(5, 2, 3));
    }

    #[test]
    fn upstream_shape_is_checked() {
        let m = ToyLM::init(5, 2, 3, 0).unwrap();
        let up = Upstream { logits: Some(Matrix::zeros(2, 5)), ..Default::default() };
        assert!(matches!(m.backward(&[1, 2, 4], &up), Err(Error::Dimension(_))));
    }

    fn check_against_differences(m: &ToyLM, loss: impl Fn(&ToyLM) -> f64, analytic: &ToyLM) {
        let h = 1e-5;
        let mut probe = m.clone();
        for block in 0..5 {
            for k in 0..m.params()[block].len() {
                let orig = probe.params()[block][k];
                probe.params_mut()[block][k] = orig + h;
                let up = loss(&probe);
                probe.params_mut()[block][k] = orig - h;
                let down = loss(&probe);
                probe.params_mut()[block][k] = orig;
                let (err, ok) = gradient_error(analytic.params()[block][k], (up - down) / (2.0 * h));
                assert!(ok, "block {block} entry {k}: err {err}");
            }
        }
    }

    #[test]
    fn ce_gradients_match_differences() {
        let m = ToyLM::init(6, 3, 4, 11).unwrap();
        let ids = [0, 5, 2, 2, 1];
        let targets = [5, 2, 2, 1, 3];
        let f = m.forward(&ids).unwrap();
        let (_, gz) = ce_grad(&f.logits, &targets).unwrap();
        let g = m.backward(&ids, &Upstream { logits: Some(gz), ..Default::default() }).unwrap();
        check_against_differences(&m, |p| ce_loss(&p.forward(&ids).unwrap().logits, &targets).unwrap(), &g);
    }

    #[test]
    fn representation_gradients_match_differences() {
        // Linear functionals of the embeddings and hiddens exercise the
        // running-mean and scatter paths.
        let m = ToyLM::init(6, 3, 4, 12).unwrap();
        let ids = [3, 3, 0, 4];
        let ge = Matrix::from_fn(4, 3, |i, j| (i as f64 - 1.3) * (j as f64 + 0.5));
        let gh = Matrix::from_fn(4, 4, |i, j| ((i * 4 + j) as f64).sin());
        let up = Upstream { embeddings: Some(ge.clone()), hiddens: Some(gh.clone()), logits: None };
        let g = m.backward(&ids, &up).unwrap();
        check_against_differences(
            &m,
            |p| {
                let f = p.forward(&ids).unwrap();
                frobenius_dot(&f.embeddings, &ge).unwrap() + frobenius_dot(&f.hiddens, &gh).unwrap()
            },
            &g,
        );
    }

    #[test]
    fn add_scaled_is_blockwise() {
        let mut a = ToyLM::init(3, 2, 2, 0).unwrap();
        let before = a.clone();
        let b = ToyLM::init(3, 2, 2, 1).unwrap();
        a.add_scaled(&b, -0.5).unwrap();
        assert_eq!(a.b1, before.b1);
        assert_eq!(a.embed[(1, 1)], before.embed[(1, 1)] - 0.5 * b.embed[(1, 1)]);
        assert!(a.add_scaled(&ToyLM::zeros(4, 2, 2), 1.0).is_err());
    }
}
