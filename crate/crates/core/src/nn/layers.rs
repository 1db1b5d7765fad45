use ndarray::{linalg::general_mat_mul, Array1, Array2, Array3, ArrayView2, ArrayViewMut2};
use rand_distr::{Distribution, Normal};

use super::Real;
use crate::rng::Rng;

/// A flat parameter buffer with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
            shape: shape.to_vec(),
        }
    }

    /// He-normal initialisation with the given fan-in.
    pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let n = Normal::new(0.0, std).unwrap();
        let mut p = Self::zeros(shape);
        p.value
            .iter_mut()
            .for_each(|v| *v = T::from_f64_lossy(n.sample(rng)));
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    fn matrix(&self, rows: usize, cols: usize) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((rows, cols), &self.value).expect("param shape")
    }

    fn grad_matrix(&mut self, rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
        ArrayViewMut2::from_shape((rows, cols), &mut self.grad).expect("param shape")
    }
}

pub fn relu<T: Real>(x: &Array3<T>) -> Array3<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Zero `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace<T: Real>(out: &Array3<T>, grad: &mut Array3<T>) {
    grad.zip_mut_with(out, |g, &o| {
        if o <= T::zero() {
            *g = T::zero()
        }
    });
}

/// 2D convolution with square kernel, symmetric zero padding and stride.
/// Weights are stored `cout × (cin·k·k)` with row-major `(c, ki, kj)` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Conv2d {
            weight: Param::he_normal(&[cout, cin, kernel, kernel], fan_in, rng),
            bias: bias.then(|| Param::zeros(&[cout])),
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_dim(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.pad;
        let wp = w + 2 * self.pad;
        if hp < self.kernel || wp < self.kernel {
            return None;
        }
        Some((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }

    fn cols(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn im2col(&self, x: &Array3<T>, ho: usize, wo: usize) -> Array2<T> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let mut col = Array2::<T>::zeros((self.cols(), ho * wo));
        let xs = x.as_slice().expect("standard layout");
        let cs = col.as_slice_mut().expect("standard layout");
        let n = ho * wo;
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cs[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &Array2<T>, h: usize, w: usize, ho: usize, wo: usize) -> Array3<T> {
        let k = self.kernel;
        let mut x = Array3::<T>::zeros((self.cin, h, w));
        let xs = x.as_slice_mut().expect("standard layout");
        let cs = col.as_slice().expect("standard layout");
        let n = ho * wo;
        for ci in 0..self.cin {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cs[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                xs[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Array3<T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let (ho, wo) = self.output_dim(h, w).expect("input smaller than kernel");
        let col = self.im2col(x, ho, wo);
        let mut out = Array2::<T>::zeros((self.cout, ho * wo));
        if let Some(b) = &self.bias {
            for (mut row, &bv) in out.rows_mut().into_iter().zip(b.value.iter()) {
                row.fill(bv);
            }
            general_mat_mul(T::one(), &self.weight.matrix(self.cout, self.cols()), &col, T::one(), &mut out);
        } else {
            general_mat_mul(T::one(), &self.weight.matrix(self.cout, self.cols()), &col, T::zero(), &mut out);
        }
        out.into_shape_with_order((self.cout, ho, wo)).expect("reshape")
    }

    /// Gradient with respect to the input only.
    pub fn backward_input(&self, input_hw: (usize, usize), dy: &Array3<T>) -> Array3<T> {
        let (h, w) = input_hw;
        let (_, ho, wo) = dy.dim();
        let dy2 = dy
            .view()
            .into_shape_with_order((self.cout, ho * wo))
            .expect("standard layout");
        let mut dcol = Array2::<T>::zeros((self.cols(), ho * wo));
        general_mat_mul(
            T::one(),
            &self.weight.matrix(self.cout, self.cols()).t(),
            &dy2,
            T::zero(),
            &mut dcol,
        );
        self.col2im(&dcol, h, w, ho, wo)
    }

    /// Accumulate weight and bias gradients for one sample.
    pub fn accumulate_param_grads(&mut self, x: &Array3<T>, dy: &Array3<T>) {
        let (_, ho, wo) = dy.dim();
        let col = self.im2col(x, ho, wo);
        let dy2 = dy
            .view()
            .into_shape_with_order((self.cout, ho * wo))
            .expect("standard layout");
        let cols = self.cols();
        let cout = self.cout;
        general_mat_mul(T::one(), &dy2, &col.t(), T::one(), &mut self.weight.grad_matrix(cout, cols));
        if let Some(b) = &mut self.bias {
            for (g, row) in b.grad.iter_mut().zip(dy2.rows()) {
                *g += row.sum();
            }
        }
    }

    /// Parameter gradients plus, if `need_input`, the input gradient.
    pub fn backward(&mut self, x: &Array3<T>, dy: &Array3<T>, need_input: bool) -> Option<Array3<T>> {
        self.accumulate_param_grads(x, dy);
        need_input.then(|| {
            let (_, h, w) = x.dim();
            self.backward_input((h, w), dy)
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }
}

/// 2×2 max pooling with stride 2 (floor on odd sizes).
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxPool2;

impl MaxPool2 {
    pub fn output_dim(h: usize, w: usize) -> (usize, usize) {
        (h / 2, w / 2)
    }

    pub fn forward<T: Real>(x: &Array3<T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        let (ho, wo) = Self::output_dim(h, w);
        Array3::from_shape_fn((c, ho, wo), |(ci, i, j)| {
            let mut m = x[[ci, 2 * i, 2 * j]];
            for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                let v = x[[ci, 2 * i + di, 2 * j + dj]];
                if v > m {
                    m = v;
                }
            }
            m
        })
    }

    /// Routes each output gradient to the first maximal input of its window.
    pub fn backward<T: Real>(x: &Array3<T>, dy: &Array3<T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        let (_, ho, wo) = dy.dim();
        let mut dx = Array3::<T>::zeros((c, h, w));
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = (2 * i, 2 * j);
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let p = (2 * i + di, 2 * j + dj);
                        if x[[ci, p.0, p.1]] > x[[ci, best.0, best.1]] {
                            best = p;
                        }
                    }
                    dx[[ci, best.0, best.1]] += dy[[ci, i, j]];
                }
            }
        }
        dx
    }
}

/// Fully connected layer, weight `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub input: usize,
    pub output: usize,
}

impl<T: Real> Linear<T> {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: Param::he_normal(&[output, input], input, rng),
            bias: Param::zeros(&[output]),
            input,
            output,
        }
    }

    pub fn forward(&self, x: &Array1<T>) -> Array1<T> {
        let w = self.weight.matrix(self.output, self.input);
        let mut y = Array1::from(self.bias.value.clone());
        y += &w.dot(x);
        y
    }

    pub fn backward(&mut self, x: &Array1<T>, dy: &Array1<T>) -> Array1<T> {
        let (o, i) = (self.output, self.input);
        {
            let mut g = self.weight.grad_matrix(o, i);
            for (r, &d) in dy.iter().enumerate() {
                g.row_mut(r).scaled_add(d, x);
            }
        }
        for (g, &d) in self.bias.grad.iter_mut().zip(dy.iter()) {
            *g += d;
        }
        self.weight.matrix(o, i).t().dot(dy)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    /// Direct nested-loop convolution.
    fn conv_oracle(conv: &Conv2d<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (ho, wo) = conv.output_dim(h, w).unwrap();
        let k = conv.kernel;
        Array3::from_shape_fn((conv.cout, ho, wo), |(o, i, j)| {
            let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]);
            for ci in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (i * conv.stride + ki) as isize - conv.pad as isize;
                        let ix = (j * conv.stride + kj) as isize - conv.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.weight.value[((o * c + ci) * k + ki) * k + kj]
                                * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn random3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut r = rng(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Array3::from_shape_fn(shape, |_| n.sample(&mut r))
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut r = rng(1);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, stride, pad, true, &mut r);
            conv.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3, 0.0];
            let x = random3((3, 7, 6), stride as u64 + pad as u64 * 7 + k as u64);
            let a = conv.forward(&x);
            let b = conv_oracle(&conv, &x);
            assert_eq!(a.dim(), b.dim());
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng(2);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, true, &mut r);
        let x = random3((2, 5, 5), 3);
        let g = random3(conv.forward(&x).dim(), 4);
        let loss = |c: &Conv2d<f64>, x: &Array3<f64>| (c.forward(x) * &g).sum();
        let dx = conv.backward(&x, &g, true).unwrap();
        let eps = 1e-6;
        for idx in [0usize, 7, 20, 49] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            let flat = idx % x.len();
            xp.as_slice_mut().unwrap()[flat] += eps;
            xm.as_slice_mut().unwrap()[flat] -= eps;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            assert!((fd - dx.as_slice().unwrap()[flat]).abs() < 1e-6);
        }
        for idx in [0usize, 11, 53] {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.weight.value[idx] += eps;
            cm.weight.value[idx] -= eps;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            assert!((fd - conv.weight.grad[idx]).abs() < 1e-6);
        }
        let fd_b = {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.bias.as_mut().unwrap().value[1] += eps;
            cm.bias.as_mut().unwrap().value[1] -= eps;
            (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps)
        };
        assert!((fd_b - conv.bias.as_ref().unwrap().grad[1]).abs() < 1e-6);
    }

    #[test]
    fn maxpool_routes_gradient_to_max() {
        let x = Array3::from_shape_vec((1, 2, 4), vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 9.0, 0.0]).unwrap();
        let y = MaxPool2::forward(&x);
        assert_eq!(y.as_slice().unwrap(), &[5.0, 9.0]);
        let dx = MaxPool2::backward(&x, &Array3::from_elem((1, 1, 2), 1.0));
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng(5);
        let mut lin = Linear::<f64>::new(4, 3, &mut r);
        let x = Array1::from(vec![0.3, -1.0, 2.0, 0.5]);
        let g = Array1::from(vec![1.0, -2.0, 0.5]);
        let dx = lin.backward(&x, &g);
        let eps = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (lin.forward(&xp).dot(&g) - lin.forward(&xm).dot(&g)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-8);
        }
        assert!((lin.weight.grad[5] - g[1] * x[1]).abs() < 1e-12);
    }
}
