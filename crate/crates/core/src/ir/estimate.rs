//! Closed-form memory estimates: `(input elements + output elements) * 8`.

pub const ELEMENT_BYTES: u64 = 8;

fn bytes(elements: u64) -> u64 {
    elements.saturating_mul(ELEMENT_BYTES)
}

/// `batch x k` times `k x n`.
pub fn matmul(batch: u64, k: u64, n: u64) -> u64 {
    bytes(batch * k + k * n + batch * n)
}

pub fn add_bias(batch: u64, n: u64) -> u64 {
    bytes(2 * batch * n + n)
}

/// Elementwise or reshaping operators.
pub fn unary(batch: u64, n: u64) -> u64 {
    bytes(2 * batch * n)
}

pub fn conv2d(batch: u64, (h, w, c): (usize, usize, usize), (out_c, kh, kw): (usize, usize, usize)) -> u64 {
    let (oh, ow) = ((h - kh + 1) as u64, (w - kw + 1) as u64);
    let image = batch * (h * w * c) as u64;
    let params = (out_c * kh * kw * c + out_c) as u64;
    bytes(image + params + batch * oh * ow * out_c as u64)
}

pub fn embedding(batch: u64, dict: u64, dim: u64, ids: u64, out: u64) -> u64 {
    bytes(dict * dim + batch * ids + batch * out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(matmul(1000, 597_540, 1024), 9_683_559_680);
        assert_eq!(matmul(1, 1, 1), 24);
        assert_eq!(matmul(1000, 28, 256), 2_329_344);
        assert_eq!(add_bias(2, 3), (12 + 3) * 8);
        assert_eq!(unary(4, 5), 320);
        assert_eq!(conv2d(1, (2500, 2500, 3), (2048, 1, 1)), (18_750_000 + 8192 + 6_250_000 * 2048) * 8);
        assert_eq!(embedding(10, 50, 8, 4, 8), (400 + 40 + 80) * 8);
    }
}
