//! Reference implementations the benchmarks compare against. They share no
//! code with the engine's kernels.

use crate::tensor::ActivationKind;

/// Row-major `m x k` times `k x n`, one dot product per output cell.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Sliding-window convolution of a channel-last `h x w x c` image with
/// `out_c x kh x kw x c` kernels; stride 1, no padding, output channel-last.
pub fn direct_conv(
    image: &[f64],
    (h, w, c): (usize, usize, usize),
    kernels: &[f64],
    (out_c, kh, kw): (usize, usize, usize),
    bias: &[f64],
) -> Vec<f64> {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; oh * ow * out_c];
    for y in 0..oh {
        for x in 0..ow {
            for o in 0..out_c {
                let mut s = bias[o];
                for dy in 0..kh {
                    for dx in 0..kw {
                        for ch in 0..c {
                            let px = image[((y + dy) * w + (x + dx)) * c + ch];
                            let wt = kernels[((o * kh + dy) * kw + dx) * c + ch];
                            s += px * wt;
                        }
                    }
                }
                out[(y * ow + x) * out_c + o] = s;
            }
        }
    }
    out
}

/// A dense layer as raw parameters: `weights` is `units x in_dim`.
#[derive(Debug, Clone)]
pub struct RawDense {
    pub in_dim: usize,
    pub units: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: ActivationKind,
}

pub fn activate(y: &mut [f64], kind: ActivationKind) {
    match kind {
        ActivationKind::Identity => {}
        ActivationKind::Relu => y.iter_mut().for_each(|v| *v = v.max(0.0)),
        ActivationKind::Sigmoid => y.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
        ActivationKind::Softmax => {
            let m = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = y.iter().map(|v| (v - m).exp()).sum();
            y.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
        }
    }
}

/// Forward pass of one row through a dense chain.
pub fn dense_forward(layers: &[RawDense], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in layers {
        assert_eq!(h.len(), l.in_dim);
        let mut y: Vec<f64> = (0..l.units)
            .map(|u| {
                let row = &l.weights[u * l.in_dim..(u + 1) * l.in_dim];
                row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + l.bias[u]
            })
            .collect();
        activate(&mut y, l.activation);
        h = y;
    }
    h
}

/// Argmax with the lowest index on ties, or `>= 0.5` for one output.
pub fn label(outputs: &[f64]) -> i64 {
    if outputs.len() == 1 {
        return i64::from(outputs[0] >= 0.5);
    }
    let mut best = 0;
    for i in 1..outputs.len() {
        if outputs[i] > outputs[best] {
            best = i;
        }
    }
    best as i64
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless value in `[-1, 1)` for cell `(r, c)` of matrix `tag`, so large
/// operands can be regenerated anywhere without storing them.
pub fn hashed_unit(seed: u64, tag: u64, r: usize, c: usize) -> f64 {
    let h = splitmix(splitmix(splitmix(seed ^ tag.rotate_left(32)) ^ r as u64) ^ c as u64);
    (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

/// `A x B` for square `n x n` operands where `A` is produced one strip of
/// `strip` rows at a time by `a_rows(first_row, rows)`. `B` is held dense.
/// Tiled over the inner and output dimensions to stay cache friendly.
pub fn streamed_matmul(n: usize, strip: usize, mut a_rows: impl FnMut(usize, usize) -> Vec<f64>, b: &[f64]) -> Vec<f64> {
    const TK: usize = 64;
    const TJ: usize = 512;
    assert_eq!(b.len(), n * n);
    let mut out = vec![0.0; n * n];
    for r0 in (0..n).step_by(strip) {
        let rows = strip.min(n - r0);
        let a = a_rows(r0, rows);
        for k0 in (0..n).step_by(TK) {
            let k1 = (k0 + TK).min(n);
            for j0 in (0..n).step_by(TJ) {
                let j1 = (j0 + TJ).min(n);
                for i in 0..rows {
                    let c = &mut out[(r0 + i) * n + j0..(r0 + i) * n + j1];
                    for k in k0..k1 {
                        let av = a[i * n + k];
                        let brow = &b[k * n + j0..k * n + j1];
                        for (cv, bv) in c.iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_matmul_small() {
        // [1 2; 3 4] x [5 6; 7 8]
        assert_eq!(naive_matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2), [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn streamed_matches_naive() {
        let n = 70;
        let a: Vec<f64> = (0..n * n).map(|i| hashed_unit(1, 0, i / n, i % n)).collect();
        let b: Vec<f64> = (0..n * n).map(|i| hashed_unit(1, 1, i / n, i % n)).collect();
        let s = streamed_matmul(n, 16, |r0, rows| a[r0 * n..(r0 + rows) * n].to_vec(), &b);
        let want = naive_matmul(&a, &b, n, n, n);
        for (x, y) in s.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn hashed_values_are_in_range_and_vary() {
        let v: Vec<f64> = (0..1000).map(|i| hashed_unit(7, 3, i, i * 3)).collect();
        assert!(v.iter().all(|x| (-1.0..1.0).contains(x)));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.1);
        assert_ne!(hashed_unit(7, 3, 1, 2), hashed_unit(7, 3, 2, 1));
    }

    #[test]
    fn direct_conv_single_pixel() {
        // 2x2 single-channel image, 2x2 kernel, one output pixel.
        let out = direct_conv(&[1.0, 2.0, 3.0, 4.0], (2, 2, 1), &[1.0, 0.0, 0.0, 1.0], (1, 2, 2), &[0.5]);
        assert_eq!(out, [5.5]);
    }

    #[test]
    fn softmax_and_label() {
        let mut y = vec![1.0, 3.0];
        activate(&mut y, ActivationKind::Softmax);
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(label(&y), 1);
        assert_eq!(label(&[0.5]), 1);
        assert_eq!(label(&[0.2, 0.2]), 0);
    }
}
