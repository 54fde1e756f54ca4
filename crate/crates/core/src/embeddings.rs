//! Interaction and question-enhanced representations.
//!
//! y_t = z_t + r_t, where z_t is the KC embedding column and r_t the
//! response embedding column. x_t = (m_q ⊙ v_c) + z_t adds a per-question
//! discrimination term on top of the shared KC embedding, so questions on
//! the same KC get distinct representations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables<T> {
    /// [d x n], column per KC (z_t lookups)
    pub kc_table: Matrix<T>,
    /// [d x 2], column per response value (r_t lookups)
    pub resp_table: Matrix<T>,
    /// [Q x d], per-question discrimination vectors (zero-initialized so
    /// training starts at the plain interaction representation)
    pub q_discrim: Matrix<T>,
    /// [n x d], per-KC variation vectors
    pub kc_var: Matrix<T>,
}

pub(crate) fn sample_normal<T: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    std: f64,
) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

impl<T: Scalar> EmbeddingTables<T> {
    pub fn init(d: usize, n_kcs: usize, n_questions: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            kc_table: sample_normal(rng, d, n_kcs, INIT_STD),
            resp_table: sample_normal(rng, d, 2, INIT_STD),
            q_discrim: Matrix::zeros(n_questions, d),
            kc_var: sample_normal(rng, n_kcs, d, INIT_STD),
        }
    }

    pub fn dim(&self) -> usize {
        self.kc_table.rows()
    }

    pub fn n_kcs(&self) -> usize {
        self.kc_table.cols()
    }

    pub fn n_questions(&self) -> usize {
        self.q_discrim.rows()
    }

    /// y_t for one interaction: KC column plus response column.
    pub fn embed_interaction(&self, kc_id: usize, response: u8) -> Result<Vec<T>> {
        if kc_id >= self.n_kcs() {
            return Err(Error::Data(format!("kc id {kc_id} out of range")));
        }
        if response > 1 {
            return Err(Error::Data(format!("response {response} outside {{0,1}}")));
        }
        let d = self.dim();
        let mut y = Vec::with_capacity(d);
        for r in 0..d {
            y.push(self.kc_table.get(r, kc_id) + self.resp_table.get(r, response as usize));
        }
        Ok(y)
    }

    /// x_t for one question: discrimination ⊙ KC-variation plus KC column.
    pub fn enhance_question(&self, question_id: usize, kc_id: usize) -> Result<Vec<T>> {
        if question_id >= self.n_questions() {
            return Err(Error::Data(format!("question id {question_id} out of range")));
        }
        if kc_id >= self.n_kcs() {
            return Err(Error::Data(format!("kc id {kc_id} out of range")));
        }
        let d = self.dim();
        let mq = self.q_discrim.row(question_id);
        let vc = self.kc_var.row(kc_id);
        let mut x = Vec::with_capacity(d);
        for r in 0..d {
            x.push(mq[r] * vc[r] + self.kc_table.get(r, kc_id));
        }
        Ok(x)
    }
}
