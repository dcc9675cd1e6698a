//! Dense kernels. All of them are deterministic: the same inputs always give
//! bitwise identical outputs, independent of how rows are split across
//! worker threads.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DenseTensor;
use crate::error::{Error, Result};

/// Rows handled by one parallel task in [`dense_matmul`].
const ROWS_PER_TASK: usize = 64;
/// Below this many multiply-adds a product runs on the calling thread.
const PARALLEL_MIN_WORK: usize = 1 << 22;

/// Standard matrix product with 64-bit accumulation.
///
/// Every output element is accumulated in ascending inner index order
/// starting from zero, exactly like the textbook triple loop; the loop nest is
/// only reordered so that four output rows share one pass over `b`.
pub fn dense_matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let (m, k) = a.expect_rank2("dense_matmul lhs")?;
    let (k2, n) = b.expect_rank2("dense_matmul rhs")?;
    if k != k2 {
        return Err(Error::invalid(format!(
            "matmul shape mismatch: {m}x{k} times {k2}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, k, n);
    DenseTensor::matrix(m, n, out)
}

/// `out += a * b` for row-major `a` (rows x k), `b` (k x n) and zeroed `out`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize) {
    let rows = if k == 0 { 0 } else { a.len() / k };
    if rows * k * n >= PARALLEL_MIN_WORK && rows > ROWS_PER_TASK {
        out.par_chunks_mut(ROWS_PER_TASK * n)
            .zip(a.par_chunks(ROWS_PER_TASK * k))
            .for_each(|(o, a)| matmul_rows(a, b, o, k, n));
    } else {
        matmul_rows(a, b, out, k, n);
    }
}

fn matmul_rows(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize) {
    let mut a_quads = a.chunks_exact(4 * k);
    let mut o_quads = out.chunks_exact_mut(4 * n);
    for (a4, o4) in (&mut a_quads).zip(&mut o_quads) {
        let (o0, rest) = o4.split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for (p, b_row) in b.chunks_exact(n).enumerate() {
            let (x0, x1, x2, x3) = (a4[p], a4[k + p], a4[2 * k + p], a4[3 * k + p]);
            for ((((c0, c1), c2), c3), &bv) in o0
                .iter_mut()
                .zip(o1.iter_mut())
                .zip(o2.iter_mut())
                .zip(o3.iter_mut())
                .zip(b_row)
            {
                *c0 += x0 * bv;
                *c1 += x1 * bv;
                *c2 += x2 * bv;
                *c3 += x3 * bv;
            }
        }
    }
    for (a1, o1) in a_quads
        .remainder()
        .chunks_exact(k)
        .zip(o_quads.into_remainder().chunks_exact_mut(n))
    {
        for (&x, b_row) in a1.iter().zip(b.chunks_exact(n)) {
            for (c, &bv) in o1.iter_mut().zip(b_row) {
                *c += x * bv;
            }
        }
    }
}

pub fn transpose(t: &DenseTensor) -> Result<DenseTensor> {
    let (r, c) = t.expect_rank2("transpose")?;
    let src = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    DenseTensor::matrix(c, r, out)
}

/// Elementwise sum. `b` may also be a row vector (`[n]` or `[1, n]`) that is
/// added to every row of a rank-2 `a`.
pub fn dense_add(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        return DenseTensor::new(a.shape().to_vec(), data);
    }
    let is_row_vector = match b.shape() {
        [n] => *n == a.cols(),
        [1, n] => *n == a.cols(),
        _ => false,
    };
    if a.rank() == 2 && is_row_vector {
        let bias = b.data();
        let mut data = a.data().to_vec();
        for row in data.chunks_exact_mut(bias.len()) {
            for (x, y) in row.iter_mut().zip(bias) {
                *x += y;
            }
        }
        return DenseTensor::new(a.shape().to_vec(), data);
    }
    Err(Error::invalid(format!(
        "cannot add shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Softmax,
    Identity,
}

impl ActivationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Softmax => "softmax",
            ActivationKind::Identity => "identity",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(ActivationKind::Relu),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "softmax" => Ok(ActivationKind::Softmax),
            "identity" | "linear" | "none" => Ok(ActivationKind::Identity),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

pub fn apply_activation(t: &DenseTensor, kind: ActivationKind) -> Result<DenseTensor> {
    let mut data = t.data().to_vec();
    match kind {
        ActivationKind::Identity => {}
        ActivationKind::Relu => data.iter_mut().for_each(|x| *x = relu(*x)),
        ActivationKind::Sigmoid => data.iter_mut().for_each(|x| *x = sigmoid(*x)),
        ActivationKind::Softmax => {
            let (_, cols) = t.expect_rank2("softmax")?;
            data.chunks_exact_mut(cols).for_each(softmax_row);
        }
    }
    DenseTensor::new(t.shape().to_vec(), data)
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &DenseTensor, b: &DenseTensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseTensor {
        DenseTensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn two_by_two_product() {
        let a = DenseTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = DenseTensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        assert_eq!(dense_matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn identity_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 6, 4);
        let i = DenseTensor::identity(4).unwrap();
        assert_eq!(dense_matmul(&a, &i).unwrap(), a);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 7, 5);
        let b = random(&mut rng, 5, 3);
        let got = dense_matmul(&a, &b).unwrap();
        let want = naive(&a, &b);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }

    #[test]
    fn product_is_bitwise_equal_to_ascending_loop() {
        // the reordered loop nest must not change accumulation order
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 130, 70);
        let b = random(&mut rng, 70, 33);
        let got = dense_matmul(&a, &b).unwrap();
        let want = naive(&a, &b);
        assert!(got.data().iter().zip(&want).all(|(g, w)| g.to_bits() == w.to_bits()));
    }

    #[test]
    fn parallel_split_is_bitwise_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 300, 128);
        let b = random(&mut rng, 128, 120);
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let quad = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let x = single.install(|| dense_matmul(&a, &b).unwrap());
        let y = quad.install(|| dense_matmul(&a, &b).unwrap());
        assert_eq!(x, y);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = DenseTensor::zeros(vec![2, 3]).unwrap();
        assert!(matches!(dense_matmul(&a, &a), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn add_with_bias_broadcast() {
        let a = DenseTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let bias = DenseTensor::new(vec![2], vec![10.0, 20.0]).unwrap();
        assert_eq!(dense_add(&a, &bias).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        let zero = DenseTensor::zeros(vec![2, 2]).unwrap();
        assert_eq!(dense_add(&a, &zero).unwrap(), a);
        let bad = DenseTensor::zeros(vec![3]).unwrap();
        assert!(dense_add(&a, &bad).is_err());
    }

    #[test]
    fn add_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 9, 4);
        let b = random(&mut rng, 9, 4);
        let got = dense_add(&a, &b).unwrap();
        for i in 0..9 {
            for j in 0..4 {
                assert_eq!(got.get2(i, j), a.get2(i, j) + b.get2(i, j));
            }
        }
    }

    #[test]
    fn activations() {
        let v = DenseTensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(apply_activation(&v, ActivationKind::Relu).unwrap().data(), &[0.0, 0.0, 2.0]);
        let z = DenseTensor::new(vec![1], vec![0.0]).unwrap();
        assert_eq!(apply_activation(&z, ActivationKind::Sigmoid).unwrap().data(), &[0.5]);
        let ones = DenseTensor::matrix(1, 4, vec![1.0; 4]).unwrap();
        assert_eq!(apply_activation(&ones, ActivationKind::Softmax).unwrap().data(), &[0.25; 4]);
        assert_eq!(apply_activation(&v, ActivationKind::Identity).unwrap(), v);
        assert!(apply_activation(&v, ActivationKind::Softmax).is_err());
        assert!("gelu".parse::<ActivationKind>().is_err());
    }

    proptest! {
        #[test]
        fn activation_ranges(vals in proptest::collection::vec(-30.0f64..30.0, 1..64), cols in 1usize..8) {
            let n = vals.len() / cols * cols;
            prop_assume!(n > 0);
            let t = DenseTensor::matrix(n / cols, cols, vals[..n].to_vec()).unwrap();
            let r = apply_activation(&t, ActivationKind::Relu).unwrap();
            prop_assert!(r.data().iter().all(|&x| x >= 0.0));
            let s = apply_activation(&t, ActivationKind::Sigmoid).unwrap();
            prop_assert!(s.data().iter().all(|&x| x > 0.0 && x < 1.0));
            let sm = apply_activation(&t, ActivationKind::Softmax).unwrap();
            for row in sm.data().chunks(cols) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
