//! Dense and convolutional layers with explicit forward/backward passes.
//!
//! Parameters are plain f64 ndarrays. Convolutions run as im2col + GEMM;
//! backward passes return parameter gradients in the same canonical order the
//! owning module flattens its parameters, so optimizers, Fisher estimates,
//! and gradient projection all operate on one flat vector.

use ndarray::{Array1, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Fully connected layer; `weight` is `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// He-normal weight init, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std is finite");
        let weight = Array2::from_shape_fn((out_dim, in_dim), |_| normal.sample(rng));
        Self {
            weight,
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Returns `(d_weight, d_bias, d_input)`.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        d_out: &Array2<f64>,
    ) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
        let d_weight = d_out.t().dot(x);
        let d_bias = d_out.sum_axis(Axis(0));
        let d_input = d_out.dot(&self.weight);
        (d_weight, d_bias, d_input)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn push_params(&self, out: &mut Vec<f64>) {
        out.extend(self.weight.iter());
        out.extend(self.bias.iter());
    }

    pub fn load_params<'a>(&mut self, src: &mut impl Iterator<Item = &'a f64>) {
        for w in self.weight.iter_mut() {
            *w = *src.next().expect("parameter vector too short");
        }
        for b in self.bias.iter_mut() {
            *b = *src.next().expect("parameter vector too short");
        }
    }
}

/// 2-D convolution; `weight` is `(c_out, c_in, kh, kw)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("std is finite");
        let weight = Array4::from_shape_fn((c_out, c_in, kernel, kernel), |_| normal.sample(rng));
        Self {
            weight,
            bias: Array1::zeros(c_out),
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let kh = self.weight.shape()[2];
        let kw = self.weight.shape()[3];
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (b, _c_in, h, w) = dims4(x);
        let (c_out, _, kh, kw) = dims4(&self.weight);
        let (ho, wo) = self.out_hw(h, w);
        let col = im2col(x, kh, kw, self.stride, self.pad, ho, wo);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((c_out, self.weight.len() / c_out))
            .expect("contiguous weight");
        // (b*ho*wo, c_out)
        let mut out2 = col.dot(&w_mat.t());
        out2 += &self.bias;
        out2.into_shape_with_order((b, ho, wo, c_out))
            .expect("row count matches")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned()
    }

    /// Returns `(d_weight, d_bias, d_input)`.
    pub fn backward(
        &self,
        x: &Array4<f64>,
        d_out: &Array4<f64>,
    ) -> (Array4<f64>, Array1<f64>, Array4<f64>) {
        let (b, c_in, h, w) = dims4(x);
        let (c_out, _, kh, kw) = dims4(&self.weight);
        let (_, _, ho, wo) = dims4(d_out);

        let col = im2col(x, kh, kw, self.stride, self.pad, ho, wo);
        let d_out2 = d_out
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((b * ho * wo, c_out))
            .expect("contiguous");

        let d_w_mat = d_out2.t().dot(&col);
        let d_weight = d_w_mat
            .into_shape_with_order((c_out, c_in, kh, kw))
            .expect("weight shape");
        let d_bias = d_out2.sum_axis(Axis(0));

        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((c_out, self.weight.len() / c_out))
            .expect("contiguous weight");
        let d_col = d_out2.dot(&w_mat);
        let d_input = col2im(&d_col, b, c_in, h, w, kh, kw, self.stride, self.pad, ho, wo);
        (d_weight, d_bias, d_input)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn push_params(&self, out: &mut Vec<f64>) {
        out.extend(self.weight.iter());
        out.extend(self.bias.iter());
    }

    pub fn load_params<'a>(&mut self, src: &mut impl Iterator<Item = &'a f64>) {
        for w in self.weight.iter_mut() {
            *w = *src.next().expect("parameter vector too short");
        }
        for b in self.bias.iter_mut() {
            *b = *src.next().expect("parameter vector too short");
        }
    }
}

pub fn dims4<T>(a: &Array4<T>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

fn im2col(
    x: &Array4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (b, c_in, h, w) = dims4(x);
    let mut col = Array2::zeros((b * ho * wo, c_in * kh * kw));
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (bi * ho + oy) * wo + ox;
                let mut c = 0;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                col[[row, c]] = x[[bi, ci, iy as usize, ix as usize]];
                            }
                            c += 1;
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    d_col: &Array2<f64>,
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f64> {
    let mut dx = Array4::zeros((b, c_in, h, w));
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (bi * ho + oy) * wo + ox;
                let mut c = 0;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                dx[[bi, ci, iy as usize, ix as usize]] += d_col[[row, c]];
                            }
                            c += 1;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn relu4(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// ReLU backward using the post-activation output as the mask.
pub fn relu4_backward(y: &Array4<f64>, d_out: &Array4<f64>) -> Array4<f64> {
    let mut dx = d_out.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Global average pooling `(b, c, h, w) -> (b, c)`.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = dims4(x);
    let mut out = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x[[bi, ci, y, xx]];
                }
            }
            out[[bi, ci]] = s / (h * w) as f64;
        }
    }
    out
}

pub fn global_avg_pool_backward(d_out: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (b, c) = (d_out.nrows(), d_out.ncols());
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| d_out[[bi, ci]] * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn naive_conv(x: &Array4<f64>, conv: &Conv2d) -> Array4<f64> {
        let (b, c_in, h, w) = dims4(x);
        let (c_out, _, kh, kw) = dims4(&conv.weight);
        let (ho, wo) = conv.out_hw(h, w);
        let mut out = Array4::zeros((b, c_out, ho, wo));
        for bi in 0..b {
            for co in 0..c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias[co];
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += conv.weight[[co, ci, ky, kx]]
                                            * x[[bi, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        out[[bi, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_input(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut r = rng::stream(seed, "nn-test-input");
        let normal = Normal::new(0.0, 1.0).unwrap();
        Array4::from_shape_fn(shape, |_| normal.sample(&mut r))
    }

    #[test]
    fn im2col_conv_matches_naive_conv() {
        let mut r = rng::stream(3, "conv");
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut r);
        let x = random_input((2, 2, 7, 9), 11);
        let fast = conv.forward(&x);
        let slow = naive_conv(&x, &conv);
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    // Finite-difference check of every gradient path through a conv layer.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut r = rng::stream(5, "conv-fd");
        let mut conv = Conv2d::new(1, 2, 3, 2, 1, &mut r);
        let x = random_input((2, 1, 6, 5), 13);
        let (ho, wo) = conv.out_hw(6, 5);
        // Scalar objective: weighted sum of outputs.
        let weights = random_input((2, 2, ho, wo), 17);
        let objective =
            |c: &Conv2d, xin: &Array4<f64>| -> f64 { (c.forward(xin) * &weights).sum() };

        let (dw, db, dx) = conv.backward(&x, &weights);
        let eps = 1e-6;

        for idx in [[0, 0, 0, 0], [1, 0, 2, 1], [0, 0, 1, 2]] {
            let orig = conv.weight[idx];
            conv.weight[idx] = orig + eps;
            let up = objective(&conv, &x);
            conv.weight[idx] = orig - eps;
            let down = objective(&conv, &x);
            conv.weight[idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - dw[idx]).abs() < 1e-5, "dW mismatch at {idx:?}");
        }

        for co in 0..2 {
            let orig = conv.bias[co];
            conv.bias[co] = orig + eps;
            let up = objective(&conv, &x);
            conv.bias[co] = orig - eps;
            let down = objective(&conv, &x);
            conv.bias[co] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - db[co]).abs() < 1e-5, "db mismatch at {co}");
        }

        let mut x_pert = x.clone();
        for idx in [[0, 0, 0, 0], [1, 0, 3, 4], [0, 0, 5, 2]] {
            let orig = x_pert[idx];
            x_pert[idx] = orig + eps;
            let up = objective(&conv, &x_pert);
            x_pert[idx] = orig - eps;
            let down = objective(&conv, &x_pert);
            x_pert[idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-5, "dX mismatch at {idx:?}");
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut r = rng::stream(7, "lin-fd");
        let mut lin = Linear::new(4, 3, &mut r);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6);
        let w_obj = Array2::from_shape_fn((5, 3), |(i, j)| ((i + 2 * j) % 4) as f64 * 0.25 - 0.3);
        let objective = |l: &Linear, xin: &Array2<f64>| (l.forward(xin) * &w_obj).sum();

        let (dw, db, dx) = lin.backward(&x, &w_obj);
        let eps = 1e-6;
        for idx in [[0, 0], [2, 3], [1, 1]] {
            let orig = lin.weight[idx];
            lin.weight[idx] = orig + eps;
            let up = objective(&lin, &x);
            lin.weight[idx] = orig - eps;
            let down = objective(&lin, &x);
            lin.weight[idx] = orig;
            assert!(((up - down) / (2.0 * eps) - dw[idx]).abs() < 1e-6);
        }
        for i in 0..3 {
            let orig = lin.bias[i];
            lin.bias[i] = orig + eps;
            let up = objective(&lin, &x);
            lin.bias[i] = orig - eps;
            let down = objective(&lin, &x);
            lin.bias[i] = orig;
            assert!(((up - down) / (2.0 * eps) - db[i]).abs() < 1e-6);
        }
        let mut xp = x.clone();
        for idx in [[0, 0], [4, 3], [2, 2]] {
            let orig = xp[idx];
            xp[idx] = orig + eps;
            let up = objective(&lin, &xp);
            xp[idx] = orig - eps;
            let down = objective(&lin, &xp);
            xp[idx] = orig;
            assert!(((up - down) / (2.0 * eps) - dx[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_backward_distributes_evenly() {
        let x = random_input((1, 2, 3, 4), 23);
        let pooled = global_avg_pool(&x);
        assert!(
            (pooled[[0, 0]]
                - x.index_axis(Axis(0), 0)
                    .index_axis(Axis(0), 0)
                    .mean()
                    .unwrap())
            .abs()
                < 1e-12
        );
        let d = Array2::from_elem((1, 2), 12.0);
        let dx = global_avg_pool_backward(&d, 3, 4);
        assert!(dx.iter().all(|v| (*v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn relu_masks_gradient() {
        let x = Array4::from_shape_vec((1, 1, 1, 4), vec![-1.0, 2.0, 0.0, 3.0]).unwrap();
        let y = relu4(&x);
        let d = Array4::from_elem((1, 1, 1, 4), 1.0);
        let dx = relu4_backward(&y, &d);
        assert_eq!(dx.into_raw_vec_and_offset().0, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let mut r1 = rng::stream(42, "init");
        let mut r2 = rng::stream(42, "init");
        let a = Conv2d::new(2, 4, 3, 1, 1, &mut r1);
        let b = Conv2d::new(2, 4, 3, 1, 1, &mut r2);
        assert_eq!(a.weight, b.weight);
    }

    #[test]
    fn params_round_trip_through_flat_vector() {
        let mut r = rng::stream(9, "flat");
        let mut lin = Linear::new(3, 2, &mut r);
        let mut flat = Vec::new();
        lin.push_params(&mut flat);
        assert_eq!(flat.len(), lin.param_count());
        let doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
        lin.load_params(&mut doubled.iter());
        let mut flat2 = Vec::new();
        lin.push_params(&mut flat2);
        for (a, b) in flat.iter().zip(flat2.iter()) {
            assert!((a * 2.0 - b).abs() < 1e-15);
        }
    }
}
