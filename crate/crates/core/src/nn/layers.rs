//! Individual layers with hand-derived forward and backward passes.
//!
//! Convolutions run as im2col + GEMM. Train-mode forwards cache what the
//! backward pass needs; calling `backward` without a cached forward is an
//! error. All tensors are `(batch, channels, height, width)`.

use std::marker::PhantomData;

use ndarray::{Array1, Array2, Array4, Axis, Ix1, Ix4};
use rand::Rng;

use super::{fl, Mode, Param, Scalar};
use crate::error::{Error, Result};

/// 2D convolution, stride 1, square kernel, symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    pub weight: Param<F, Ix4>, // (out_c, in_c, k, k)
    pub bias: Param<F, Ix1>,   // (out_c)
    pub padding: usize,
    cache: Option<ConvCache<F>>,
}

#[derive(Debug, Clone)]
struct ConvCache<F> {
    col: Array2<F>,
    in_shape: (usize, usize, usize, usize),
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(out_channels: usize, in_channels: usize, kernel: usize, padding: usize) -> Self {
        Conv2d {
            weight: Param::zeros((out_channels, in_channels, kernel, kernel)),
            bias: Param::zeros(out_channels),
            padding,
            cache: None,
        }
    }

    /// Kaiming-uniform weights for a leaky-ReLU network; biases zero.
    pub fn init_kaiming(&mut self, rng: &mut impl Rng, leaky_slope: f64) {
        let (_, in_c, kh, kw) = self.weight.value.dim();
        let fan_in = (in_c * kh * kw) as f64;
        let gain = (2.0 / (1.0 + leaky_slope * leaky_slope)).sqrt();
        let bound = gain * (3.0 / fan_in).sqrt();
        for w in self.weight.value.iter_mut() {
            *w = fl(rng.random_range(-bound..bound));
        }
        self.bias.value.fill(F::zero());
    }

    fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.value.dim().2;
        (h + 2 * self.padding - k + 1, w + 2 * self.padding - k + 1)
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let (b, in_c, h, w) = x.dim();
        let (out_c, w_in_c, kh, kw) = self.weight.value.dim();
        assert_eq!(in_c, w_in_c, "conv input channels");
        let (oh, ow) = self.out_spatial(h, w);

        let col = im2col(x, kh, kw, self.padding);
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((out_c, in_c * kh * kw))
            .expect("weight reshape");
        let mut out2 = col.dot(&w2.t());
        out2 += &self.bias.value.view().insert_axis(Axis(0));

        if mode == Mode::Train {
            self.cache = Some(ConvCache {
                col,
                in_shape: (b, in_c, h, w),
            });
        }
        to_standard(out2)
            .into_shape_with_order((b, oh, ow, out_c))
            .expect("conv reshape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned()
    }

    pub fn backward(&mut self, grad_out: &Array4<F>) -> Result<Array4<F>> {
        let ConvCache { col, in_shape } = self.cache.take().ok_or(Error::NoCachedForward)?;
        let (b, in_c, h, w) = in_shape;
        let (out_c, _, kh, kw) = self.weight.value.dim();
        let (gb, gc, oh, ow) = grad_out.dim();
        let expect = self.out_spatial(h, w);
        if (gb, gc, oh, ow) != (b, out_c, expect.0, expect.1) {
            return Err(Error::ShapeMismatch {
                expected: format!("grad {b}x{out_c}x{}x{}", expect.0, expect.1),
                got: format!("{gb}x{gc}x{oh}x{ow}"),
            });
        }

        let g2 = grad_out
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((b * oh * ow, out_c))
            .expect("grad reshape");

        let dw2 = to_standard(g2.t().dot(&col)); // (out_c, in_c*kh*kw)
        self.weight.grad += &dw2
            .into_shape_with_order(self.weight.value.raw_dim())
            .expect("dw reshape");
        self.bias.grad += &g2.sum_axis(Axis(0));

        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((out_c, in_c * kh * kw))
            .expect("weight reshape");
        let dcol = to_standard(g2.dot(&w2));
        Ok(col2im(&dcol, in_shape, kh, kw, self.padding))
    }
}

/// Unfold `(b, c, h, w)` into `(b*oh*ow, c*kh*kw)` patch rows (stride 1).
/// `dot` can hand back an F-order result (it does for rank-1 products);
/// flat-slice consumers need C order.
fn to_standard<F: Scalar, D: ndarray::Dimension>(a: ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn im2col<F: Scalar>(x: &Array4<F>, kh: usize, kw: usize, pad: usize) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
    let xs = x.as_slice().expect("standard layout");
    let row_len = c * kh * kw;
    let mut col = Array2::zeros((b * oh * ow, row_len));
    let cs = col.as_slice_mut().expect("standard layout");

    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row_base = ((bi * oh + oy) * ow + ox) * row_len;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy + ky).wrapping_sub(pad);
                        if iy >= h {
                            continue; // padding row
                        }
                        let src = ((bi * c + ci) * h + iy) * w;
                        let dst = row_base + (ci * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox + kx).wrapping_sub(pad);
                            if ix < w {
                                cs[dst + kx] = xs[src + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the transpose of `im2col`: fold patch-row gradients back onto
/// the input.
fn col2im<F: Scalar>(
    dcol: &Array2<F>,
    in_shape: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    pad: usize,
) -> Array4<F> {
    let (b, c, h, w) = in_shape;
    let (oh, ow) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
    let row_len = c * kh * kw;
    let ds = dcol.as_slice().expect("standard layout");
    let mut dx = Array4::zeros(in_shape);
    let xs = dx.as_slice_mut().expect("standard layout");

    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row_base = ((bi * oh + oy) * ow + ox) * row_len;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy + ky).wrapping_sub(pad);
                        if iy >= h {
                            continue;
                        }
                        let dst = ((bi * c + ci) * h + iy) * w;
                        let src = row_base + (ci * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox + kx).wrapping_sub(pad);
                            if ix < w {
                                xs[dst + ix] = xs[dst + ix] + ds[src + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Batch normalization over `(batch, height, width)` per channel.
///
/// Training normalizes with biased batch statistics and tracks running
/// stats (unbiased variance) by exponential moving average; eval normalizes
/// with the running stats only.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<F: Scalar> {
    pub gamma: Param<F, Ix1>,
    pub beta: Param<F, Ix1>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<F>>,
}

#[derive(Debug, Clone)]
struct BnCache<F> {
    x_hat: Array4<F>,
    inv_std: Array1<F>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param {
                value: Array1::from_elem(channels, F::one()),
                grad: Array1::zeros(channels),
            },
            beta: Param::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, F::one()),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.gamma.value.len(), "batch-norm channels");
        let mut out = Array4::zeros((b, c, h, w));

        match mode {
            Mode::Eval => {
                for ci in 0..c {
                    let inv_std = (self.running_var[ci] + fl(self.eps)).sqrt().recip();
                    let (mean, gamma, beta) =
                        (self.running_mean[ci], self.gamma.value[ci], self.beta.value[ci]);
                    let xc = x.index_axis(Axis(1), ci);
                    let mut oc = out.index_axis_mut(Axis(1), ci);
                    ndarray::Zip::from(&mut oc).and(&xc).for_each(|o, &v| {
                        *o = gamma * (v - mean) * inv_std + beta;
                    });
                }
            }
            Mode::Train => {
                let m = (b * h * w) as f64;
                let mut x_hat = Array4::zeros((b, c, h, w));
                let mut inv_stds = Array1::zeros(c);
                for ci in 0..c {
                    let xc = x.index_axis(Axis(1), ci);
                    let mean = xc.sum() / fl(m);
                    let var = xc.iter().map(|&v| (v - mean) * (v - mean)).fold(F::zero(), |a, b| a + b)
                        / fl(m);
                    let inv_std = (var + fl(self.eps)).sqrt().recip();
                    inv_stds[ci] = inv_std;

                    let (gamma, beta) = (self.gamma.value[ci], self.beta.value[ci]);
                    let mut xh = x_hat.index_axis_mut(Axis(1), ci);
                    let mut oc = out.index_axis_mut(Axis(1), ci);
                    ndarray::Zip::from(&mut oc).and(&mut xh).and(&xc).for_each(|o, xh, &v| {
                        *xh = (v - mean) * inv_std;
                        *o = gamma * *xh + beta;
                    });

                    let mom = fl::<F>(self.momentum);
                    self.running_mean[ci] =
                        (F::one() - mom) * self.running_mean[ci] + mom * mean;
                    let var_unbiased = if m > 1.0 { var * fl(m / (m - 1.0)) } else { var };
                    self.running_var[ci] =
                        (F::one() - mom) * self.running_var[ci] + mom * var_unbiased;
                }
                self.cache = Some(BnCache {
                    x_hat,
                    inv_std: inv_stds,
                });
            }
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<F>) -> Result<Array4<F>> {
        let BnCache { x_hat, inv_std } = self.cache.take().ok_or(Error::NoCachedForward)?;
        let (b, c, h, w) = x_hat.dim();
        if grad_out.dim() != (b, c, h, w) {
            return Err(Error::ShapeMismatch {
                expected: format!("grad {b}x{c}x{h}x{w}"),
                got: format!("{:?}", grad_out.dim()),
            });
        }
        let m = fl::<F>((b * h * w) as f64);
        let mut dx = Array4::zeros((b, c, h, w));
        for ci in 0..c {
            let gc = grad_out.index_axis(Axis(1), ci);
            let xh = x_hat.index_axis(Axis(1), ci);
            let sum_dy = gc.sum();
            let sum_dy_xhat =
                ndarray::Zip::from(&gc).and(&xh).fold(F::zero(), |acc, &g, &x| acc + g * x);

            self.gamma.grad[ci] = self.gamma.grad[ci] + sum_dy_xhat;
            self.beta.grad[ci] = self.beta.grad[ci] + sum_dy;

            let scale = self.gamma.value[ci] * inv_std[ci];
            let mut dc = dx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut dc).and(&gc).and(&xh).for_each(|d, &g, &x| {
                *d = scale * (g - sum_dy / m - x * sum_dy_xhat / m);
            });
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct LeakyRelu<F: Scalar> {
    pub slope: F,
    cache: Option<Array4<F>>,
}

impl<F: Scalar> LeakyRelu<F> {
    pub fn new(slope: f64) -> Self {
        LeakyRelu {
            slope: fl(slope),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let slope = self.slope;
        let out = x.mapv(|v| if v > F::zero() { v } else { slope * v });
        if mode == Mode::Train {
            self.cache = Some(x.mapv(|v| if v > F::zero() { F::one() } else { slope }));
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<F>) -> Result<Array4<F>> {
        let factors = self.cache.take().ok_or(Error::NoCachedForward)?;
        if factors.dim() != grad_out.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", factors.dim()),
                got: format!("{:?}", grad_out.dim()),
            });
        }
        Ok(grad_out * &factors)
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Debug, Clone)]
pub struct MaxPool2<F: Scalar> {
    cache: Option<PoolCache>,
    _marker: PhantomData<F>,
}

#[derive(Debug, Clone)]
struct PoolCache {
    in_shape: (usize, usize, usize, usize),
    /// flat index into the input for each output element, in output order
    argmax: Vec<usize>,
}

impl<F: Scalar> MaxPool2<F> {
    pub fn new() -> Self {
        MaxPool2 {
            cache: None,
            _marker: PhantomData,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let (b, c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array4::zeros((b, c, oh, ow));
        let os = out.as_slice_mut().expect("standard layout");
        let mut argmax = vec![0usize; b * c * oh * ow];

        let mut o = 0usize;
        for bi in 0..b {
            for ci in 0..c {
                let plane = (bi * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (iy, ix) = (oy * 2, ox * 2);
                        let mut best = plane + iy * w + ix;
                        let mut best_v = xs[best];
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = plane + (iy + dy) * w + ix + dx;
                            if xs[idx] > best_v {
                                best_v = xs[idx];
                                best = idx;
                            }
                        }
                        os[o] = best_v;
                        argmax[o] = best;
                        o += 1;
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.cache = Some(PoolCache {
                in_shape: (b, c, h, w),
                argmax,
            });
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<F>) -> Result<Array4<F>> {
        let PoolCache { in_shape, argmax } = self.cache.take().ok_or(Error::NoCachedForward)?;
        let (b, c, h, w) = in_shape;
        if grad_out.dim() != (b, c, h / 2, w / 2) {
            return Err(Error::ShapeMismatch {
                expected: format!("grad {b}x{c}x{}x{}", h / 2, w / 2),
                got: format!("{:?}", grad_out.dim()),
            });
        }
        let gs = grad_out.as_slice().expect("standard layout");
        let mut dx = Array4::zeros(in_shape);
        let ds = dx.as_slice_mut().expect("standard layout");
        for (o, &src) in argmax.iter().enumerate() {
            ds[src] = ds[src] + gs[o];
        }
        Ok(dx)
    }
}

impl<F: Scalar> Default for MaxPool2<F> {
    fn default() -> Self {
        MaxPool2::new()
    }
}
