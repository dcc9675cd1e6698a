//! Spatial rewrite (im2col) lowering of a stride-1, unpadded convolution to a
//! single matrix product `F x K^T`.
//!
//! Receptive-field columns are ordered `(dy, dx, channel)` and followed by a
//! constant 1.0 column; [`kernel_flatten`] uses the same order with the bias
//! in the trailing column, so the bias is folded into the product. Output
//! rows are ordered y-major, then x.

use super::DenseTensor;
use crate::error::{Error, Result};

/// Shape of `F` for an `h x w x c` image and a `kh x kw` kernel.
pub fn spatial_rewrite_shape(
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
) -> Result<(usize, usize)> {
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(Error::invalid(format!(
            "kernel {kh}x{kw} does not fit image {h}x{w}"
        )));
    }
    Ok(((h - kh + 1) * (w - kw + 1), kh * kw * c + 1))
}

fn image_dims(image: &DenseTensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w, c] => Ok((h, w, c)),
        [h, w] => Ok((h, w, 1)),
        _ => Err(Error::invalid(format!(
            "image must be H x W x C, got {:?}",
            image.shape()
        ))),
    }
}

pub fn spatial_rewrite(image: &DenseTensor, kernel_h: usize, kernel_w: usize) -> Result<DenseTensor> {
    let (h, w, c) = image_dims(image)?;
    let (rows, cols) = spatial_rewrite_shape(h, w, c, kernel_h, kernel_w)?;
    let px = image.data();
    let (out_h, out_w) = (h - kernel_h + 1, w - kernel_w + 1);
    let mut data = Vec::with_capacity(rows * cols);
    for y in 0..out_h {
        for x in 0..out_w {
            for dy in 0..kernel_h {
                let start = ((y + dy) * w + x) * c;
                // (dx, channel) is contiguous in a channel-last image
                data.extend_from_slice(&px[start..start + kernel_w * c]);
            }
            data.push(1.0);
        }
    }
    DenseTensor::matrix(rows, cols, data)
}

/// Flattens `out_c x kh x kw x c` kernels and their bias into `K`.
pub fn kernel_flatten(kernels: &DenseTensor, bias: &DenseTensor) -> Result<DenseTensor> {
    let (out_c, per_kernel) = match *kernels.shape() {
        [o, kh, kw, c] => (o, kh * kw * c),
        _ => {
            return Err(Error::invalid(format!(
                "kernels must be outC x kh x kw x C, got {:?}",
                kernels.shape()
            )))
        }
    };
    if bias.len() != out_c {
        return Err(Error::invalid(format!(
            "bias has {} entries for {out_c} kernels",
            bias.len()
        )));
    }
    let mut data = Vec::with_capacity(out_c * (per_kernel + 1));
    for (kernel, &b) in kernels.data().chunks_exact(per_kernel).zip(bias.data()) {
        data.extend_from_slice(kernel);
        data.push(b);
    }
    DenseTensor::matrix(out_c, per_kernel + 1, data)
}

/// Reshapes the `(out_h*out_w) x out_c` product into a channel-last feature map.
pub fn conv_output_from_matmul(product: DenseTensor, out_h: usize, out_w: usize) -> Result<DenseTensor> {
    let out_c = product.cols();
    if product.rows() != out_h * out_w {
        return Err(Error::invalid("conv product row count does not match output map"));
    }
    product.reshape(vec![out_h, out_w, out_c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{dense_matmul, transpose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> DenseTensor {
        let n = shape.iter().product();
        DenseTensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct sliding-window convolution.
    fn direct_conv(img: &DenseTensor, k: &DenseTensor, bias: &DenseTensor) -> Vec<f64> {
        let [h, w, c] = img.shape().try_into().unwrap();
        let [o, kh, kw, _] = k.shape().try_into().unwrap();
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut out = vec![0.0; oh * ow * o];
        for y in 0..oh {
            for x in 0..ow {
                for oc in 0..o {
                    let mut s = 0.0;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            for ch in 0..c {
                                s += img.data()[((y + dy) * w + x + dx) * c + ch]
                                    * k.data()[((oc * kh + dy) * kw + dx) * c + ch];
                            }
                        }
                    }
                    out[(y * ow + x) * o + oc] = s + bias.data()[oc];
                }
            }
        }
        out
    }

    #[test]
    fn landcover_shapes() {
        assert_eq!(spatial_rewrite_shape(2500, 2500, 3, 1, 1).unwrap(), (6_250_000, 4));
        let k = DenseTensor::zeros(vec![2048, 1, 1, 3]).unwrap();
        let b = DenseTensor::zeros(vec![2048]).unwrap();
        assert_eq!(kernel_flatten(&k, &b).unwrap().shape(), &[2048, 4]);
    }

    #[test]
    fn scalar_image() {
        let img = DenseTensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        let f = spatial_rewrite(&img, 1, 1).unwrap();
        assert_eq!(f.data(), &[3.0, 1.0]);
        let k = DenseTensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let b = DenseTensor::new(vec![1], vec![0.5]).unwrap();
        let kf = kernel_flatten(&k, &b).unwrap();
        let y = dense_matmul(&f, &transpose(&kf).unwrap()).unwrap();
        assert_eq!(y.data(), &[2.0 * 3.0 + 0.5]);
    }

    #[test]
    fn four_by_four_two_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random(&mut rng, vec![4, 4, 2]);
        let f = spatial_rewrite(&img, 2, 2).unwrap();
        assert_eq!(f.shape(), &[9, 9]);
        for y in 0..3 {
            for x in 0..3 {
                let row = f.row(y * 3 + x);
                let mut col = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        for ch in 0..2 {
                            assert_eq!(row[col], img.data()[((y + dy) * 4 + x + dx) * 2 + ch]);
                            col += 1;
                        }
                    }
                }
                assert_eq!(row[8], 1.0);
            }
        }
    }

    #[test]
    fn rewrite_product_equals_direct_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random(&mut rng, vec![5, 6, 2]);
        let k = random(&mut rng, vec![3, 2, 2, 2]);
        let b = random(&mut rng, vec![3]);
        let f = spatial_rewrite(&img, 2, 2).unwrap();
        let kf = kernel_flatten(&k, &b).unwrap();
        let y = conv_output_from_matmul(dense_matmul(&f, &transpose(&kf).unwrap()).unwrap(), 4, 5).unwrap();
        assert_eq!(y.shape(), &[4, 5, 3]);
        for (g, w) in y.data().iter().zip(direct_conv(&img, &k, &b)) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }

    #[test]
    fn oversized_kernel_rejected() {
        let img = DenseTensor::zeros(vec![2, 2, 1]).unwrap();
        assert!(matches!(spatial_rewrite(&img, 3, 1), Err(Error::InvalidArgument(_))));
        let k = DenseTensor::zeros(vec![2, 1, 1, 1]).unwrap();
        let b = DenseTensor::zeros(vec![3]).unwrap();
        assert!(kernel_flatten(&k, &b).is_err());
    }
}
