//! Scaled dot-product multi-head attention on the tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::matrix::{Matrix, Scalar};
use super::tape::{Graph, Var};
use crate::error::{Error, Result};

/// Projections of one attention block. `sink`, when present, is a learned
/// key/value row appended after the projected keys and values, giving each
/// query somewhere to put attention mass other than the supplied keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Matrix<T>,
    pub bq: Matrix<T>,
    pub wk: Matrix<T>,
    pub bk: Matrix<T>,
    pub wv: Matrix<T>,
    pub bv: Matrix<T>,
    pub wo: Matrix<T>,
    pub bo: Matrix<T>,
    pub sink: Option<(Matrix<T>, Matrix<T>)>,
}

/// The same projections bound into a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub sink: Option<(Var, Var)>,
}

impl<T: Scalar> AttentionParams<T> {
    /// Xavier-uniform weights, zero biases, zero sink.
    pub fn init(width: usize, with_sink: bool, rng: &mut impl Rng) -> Self {
        let mut draw = || xavier(width, width).sample_matrix(rng);
        let (wq, wk, wv, wo) = (draw(), draw(), draw(), draw());
        let z = || Matrix::zeros(1, width);
        Self {
            wq,
            bq: z(),
            wk,
            bk: z(),
            wv,
            bv: z(),
            wo,
            bo: z(),
            sink: with_sink.then(|| (z(), z())),
        }
    }

    /// Projections start at `I + N(0, noise²/width)`: queries and keys begin
    /// comparing inputs by their dot product and values pass through.
    pub fn init_near_identity(width: usize, with_sink: bool, noise: f64, rng: &mut impl Rng) -> Self {
        let sigma = noise / (width as f64).sqrt();
        let mut draw = || {
            let mut m = gaussian::<T>(width, width, sigma, rng);
            for i in 0..width {
                m.data_mut()[i * width + i] = m.data()[i * width + i] + T::one();
            }
            m
        };
        let (wq, wk, wv, wo) = (draw(), draw(), draw(), draw());
        let z = || Matrix::zeros(1, width);
        Self {
            wq,
            bq: z(),
            wk,
            bk: z(),
            wv,
            bv: z(),
            wo,
            bo: z(),
            sink: with_sink.then(|| (z(), z())),
        }
    }

    pub fn width(&self) -> usize {
        self.wq.rows()
    }

    pub fn named(&self) -> Vec<(&'static str, &Matrix<T>)> {
        let mut v = vec![
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ];
        if let Some((k, s)) = &self.sink {
            v.push(("sink_k", k));
            v.push(("sink_v", s));
        }
        v
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Matrix<T>)> {
        let mut v = vec![
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
        ];
        if let Some((k, s)) = &mut self.sink {
            v.push(("sink_k", k));
            v.push(("sink_v", s));
        }
        v
    }

    /// Registers every tensor as a trainable leaf, pushing the handles onto
    /// `order` in [`Self::named`] order.
    pub fn bind(&self, g: &mut Graph<T>, order: &mut Vec<Var>) -> Result<AttentionVars> {
        let mut p = |m: &Matrix<T>| -> Result<Var> {
            let v = g.param(m.clone())?;
            order.push(v);
            Ok(v)
        };
        Ok(AttentionVars {
            wq: p(&self.wq)?,
            bq: p(&self.bq)?,
            wk: p(&self.wk)?,
            bk: p(&self.bk)?,
            wv: p(&self.wv)?,
            bv: p(&self.bv)?,
            wo: p(&self.wo)?,
            bo: p(&self.bo)?,
            sink: match &self.sink {
                Some((k, s)) => Some((p(k)?, p(s)?)),
                None => None,
            },
        })
    }

    pub fn cast<U: Scalar>(&self) -> AttentionParams<U> {
        AttentionParams {
            wq: self.wq.cast(),
            bq: self.bq.cast(),
            wk: self.wk.cast(),
            bk: self.bk.cast(),
            wv: self.wv.cast(),
            bv: self.bv.cast(),
            wo: self.wo.cast(),
            bo: self.bo.cast(),
            sink: self.sink.as_ref().map(|(k, s)| (k.cast(), s.cast())),
        }
    }
}

/// `queries: n×D`, `keys_values: m×D` → `n×D`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    queries: Var,
    keys_values: Var,
    p: &AttentionVars,
    n_heads: usize,
) -> Result<Var> {
    let width = g.value(p.wq).cols();
    if n_heads == 0 || width % n_heads != 0 {
        return Err(Error::Shape(format!(
            "width {width} not divisible by {n_heads} heads"
        )));
    }
    let head = width / n_heads;
    let q = g.affine(queries, p.wq, p.bq)?;
    let mut k = g.affine(keys_values, p.wk, p.bk)?;
    let mut v = g.affine(keys_values, p.wv, p.bv)?;
    if let Some((sk, sv)) = p.sink {
        k = g.concat_rows(&[k, sk])?;
        v = g.concat_rows(&[v, sv])?;
    }
    let scale = T::of(1.0 / (head as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * head, (h + 1) * head);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax_rows(scores)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let joined = g.concat_cols(&heads)?;
    g.affine(joined, p.wo, p.bo)
}

pub(crate) struct XavierSpec {
    fan_in: usize,
    fan_out: usize,
}

pub(crate) fn xavier(fan_in: usize, fan_out: usize) -> XavierSpec {
    XavierSpec { fan_in, fan_out }
}

impl XavierSpec {
    pub(crate) fn sample_matrix<T: Scalar>(&self, rng: &mut impl Rng) -> Matrix<T> {
        let bound = (6.0 / (self.fan_in + self.fan_out) as f64).sqrt();
        let data = (0..self.fan_in * self.fan_out)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        Matrix::from_vec(self.fan_in, self.fan_out, data).expect("sized")
    }
}

/// `rows×cols` matrix of i.i.d. `N(0, sigma²)` values.
pub(crate) fn gaussian<T: Scalar>(rows: usize, cols: usize, sigma: f64, rng: &mut impl Rng) -> Matrix<T> {
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let data = (0..rows * cols)
        .map(|_| T::of(normal.sample(rng)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(
        p: &AttentionParams<f64>,
        q: &Matrix<f64>,
        kv: &Matrix<f64>,
        heads: usize,
    ) -> Result<Matrix<f64>> {
        let mut g = Graph::new();
        let mut order = Vec::new();
        let vars = p.bind(&mut g, &mut order)?;
        let qv = g.input(q.clone())?;
        let kvv = g.input(kv.clone())?;
        let out = multi_head_attention(&mut g, qv, kvv, &vars, heads)?;
        Ok(g.value(out).clone())
    }

    #[test]
    fn single_key_gives_projected_value_for_every_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionParams::<f64>::init(8, false, &mut rng);
        let q = gaussian(3, 8, 1.0, &mut rng);
        let kv = gaussian(1, 8, 1.0, &mut rng);
        let out = run(&p, &q, &kv, 4).unwrap();
        let expected = kv
            .matmul(&p.wv)
            .unwrap()
            .matmul(&p.wo)
            .unwrap();
        for r in 0..3 {
            for c in 0..8 {
                assert!((out[(r, c)] - expected[(0, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_make_output_query_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::<f64>::init(8, false, &mut rng);
        let row = gaussian::<f64>(1, 8, 1.0, &mut rng);
        let kv = Matrix::from_rows(&[row.data().to_vec(), row.data().to_vec(), row.data().to_vec()]).unwrap();
        let out = run(&p, &gaussian(2, 8, 1.0, &mut rng), &kv, 4).unwrap();
        assert!(out.row(0).iter().zip(out.row(1)).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AttentionParams::<f64>::init(6, false, &mut rng);
        let q = gaussian(1, 6, 1.0, &mut rng);
        assert!(matches!(run(&p, &q, &q, 4), Err(Error::Shape(_))));
    }
}
