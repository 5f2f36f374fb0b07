//! Convolution and affine layers with explicit backward passes.

use ndarray::{Array2, Array3};
use rand::Rng;

/// Stride-1 convolution with zero "same" padding and an odd square kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][ky][kx]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Rows and columns of the output that tap input offset `d` when the input
/// extent is `n`.
#[inline]
fn valid_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi.max(lo))
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel);
        let area = (kernel * kernel) as f64;
        let limit = (6.0 / (area * (in_channels + out_channels) as f64)).sqrt();
        for w in &mut conv.weight {
            *w = rng.gen_range(-limit..=limit);
        }
        conv
    }

    #[inline]
    fn w(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.in_channels + ci) * self.kernel + ky) * self.kernel + kx
    }

    /// Pre-activation output, `out_channels × H × W`.
    pub fn forward(&self, input: &Array3<f64>) -> Array3<f64> {
        let (cin, h, w) = input.dim();
        debug_assert_eq!(cin, self.in_channels);
        let src = input.as_slice().expect("standard layout");
        let plane = h * w;
        let pad = (self.kernel / 2) as isize;
        let mut out = vec![0.0; self.out_channels * plane];
        for co in 0..self.out_channels {
            let dst = &mut out[co * plane..(co + 1) * plane];
            dst.fill(self.bias[co]);
            for ci in 0..cin {
                let inp = &src[ci * plane..(ci + 1) * plane];
                for ky in 0..self.kernel {
                    let dy = ky as isize - pad;
                    let (y_lo, y_hi) = valid_range(dy, h);
                    for kx in 0..self.kernel {
                        let dx = kx as isize - pad;
                        let (x_lo, x_hi) = valid_range(dx, w);
                        let wv = self.weight[self.w(co, ci, ky, kx)];
                        for y in y_lo..y_hi {
                            let sy = (y as isize + dy) as usize;
                            let sx = (x_lo as isize + dx) as usize;
                            let s = &inp[sy * w + sx..sy * w + sx + (x_hi - x_lo)];
                            let d = &mut dst[y * w + x_lo..y * w + x_hi];
                            for (o, i) in d.iter_mut().zip(s) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((self.out_channels, h, w), out).expect("sized above")
    }

    /// Accumulates parameter gradients into `grad` and, when requested, the
    /// input gradient.
    pub fn backward(
        &self,
        input: &Array3<f64>,
        grad_out: &Array3<f64>,
        grad: &mut Conv2d,
        mut grad_input: Option<&mut Array3<f64>>,
    ) {
        let (cin, h, w) = input.dim();
        let plane = h * w;
        let pad = (self.kernel / 2) as isize;
        let src = input.as_slice().expect("standard layout");
        let g = grad_out.as_slice().expect("standard layout");
        let mut gin = grad_input
            .as_deref_mut()
            .map(|a| a.as_slice_mut().expect("standard layout"));
        for co in 0..self.out_channels {
            let gout = &g[co * plane..(co + 1) * plane];
            grad.bias[co] += gout.iter().sum::<f64>();
            for ci in 0..cin {
                let inp = &src[ci * plane..(ci + 1) * plane];
                for ky in 0..self.kernel {
                    let dy = ky as isize - pad;
                    let (y_lo, y_hi) = valid_range(dy, h);
                    for kx in 0..self.kernel {
                        let dx = kx as isize - pad;
                        let (x_lo, x_hi) = valid_range(dx, w);
                        let idx = self.w(co, ci, ky, kx);
                        let wv = self.weight[idx];
                        let mut acc = 0.0;
                        for y in y_lo..y_hi {
                            let sy = (y as isize + dy) as usize;
                            let sx = (x_lo as isize + dx) as usize;
                            let s = sy * w + sx..sy * w + sx + (x_hi - x_lo);
                            let go = &gout[y * w + x_lo..y * w + x_hi];
                            for (a, b) in go.iter().zip(&inp[s.clone()]) {
                                acc += a * b;
                            }
                            if let Some(gi) = gin.as_deref_mut() {
                                let gi = &mut gi[ci * plane..(ci + 1) * plane][s];
                                for (d, a) in gi.iter_mut().zip(go) {
                                    *d += wv * a;
                                }
                            }
                        }
                        grad.weight[idx] += acc;
                    }
                }
            }
        }
    }
}

/// Affine map `y = W x + b` with `W` stored `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.in_dim..(o + 1) * self.in_dim]
    }

    /// Inserts `rows` output rows before row `at`.
    pub(crate) fn insert_rows(&mut self, at: usize, weight: &[f64], bias: &[f64]) {
        let n = bias.len();
        debug_assert_eq!(weight.len(), n * self.in_dim);
        let split = at * self.in_dim;
        self.weight.splice(split..split, weight.iter().copied());
        self.bias.splice(at..at, bias.iter().copied());
        self.out_dim += n;
    }

    /// `x` is `M × in`; returns `M × out`.
    pub fn forward_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let (m, _) = x.dim();
        let mut out = Array2::zeros((m, self.out_dim));
        for (r, xr) in x.outer_iter().enumerate() {
            let xr = xr.as_slice().expect("standard layout");
            for o in 0..self.out_dim {
                out[[r, o]] = self.bias[o] + dot(self.row(o), xr);
            }
        }
        out
    }

    /// Per-pixel map over a `in × H × W` field; returns `out × H × W`.
    pub fn forward_field(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let plane = h * w;
        let src = x.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.out_dim * plane];
        for o in 0..self.out_dim {
            let dst = &mut out[o * plane..(o + 1) * plane];
            dst.fill(self.bias[o]);
            for ci in 0..c {
                let wv = self.weight[o * self.in_dim + ci];
                for (d, s) in dst.iter_mut().zip(&src[ci * plane..(ci + 1) * plane]) {
                    *d += wv * s;
                }
            }
        }
        Array3::from_shape_vec((self.out_dim, h, w), out).expect("sized above")
    }

    /// Backward of [`Linear::forward_rows`]; returns `dL/dx`.
    pub fn backward_rows(&self, x: &Array2<f64>, grad_out: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        let mut gx = Array2::zeros(x.dim());
        for (r, (xr, gr)) in x.outer_iter().zip(grad_out.outer_iter()).enumerate() {
            for o in 0..self.out_dim {
                let g = gr[o];
                if g == 0.0 {
                    continue;
                }
                grad.bias[o] += g;
                for i in 0..self.in_dim {
                    grad.weight[o * self.in_dim + i] += g * xr[i];
                    gx[[r, i]] += g * self.weight[o * self.in_dim + i];
                }
            }
        }
        gx
    }

    /// Backward of [`Linear::forward_field`]; returns `dL/dx` when asked.
    pub fn backward_field(
        &self,
        x: &Array3<f64>,
        grad_out: &Array3<f64>,
        grad: &mut Linear,
        want_input: bool,
    ) -> Option<Array3<f64>> {
        let (c, h, w) = x.dim();
        let plane = h * w;
        let src = x.as_slice().expect("standard layout");
        let g = grad_out.as_slice().expect("standard layout");
        let mut gx = want_input.then(|| vec![0.0; c * plane]);
        for o in 0..self.out_dim {
            let go = &g[o * plane..(o + 1) * plane];
            grad.bias[o] += go.iter().sum::<f64>();
            for ci in 0..c {
                let xs = &src[ci * plane..(ci + 1) * plane];
                grad.weight[o * self.in_dim + ci] += dot(go, xs);
                if let Some(gx) = gx.as_mut() {
                    let wv = self.weight[o * self.in_dim + ci];
                    for (d, a) in gx[ci * plane..(ci + 1) * plane].iter_mut().zip(go) {
                        *d += wv * a;
                    }
                }
            }
        }
        gx.map(|v| Array3::from_shape_vec((c, h, w), v).expect("sized above"))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
