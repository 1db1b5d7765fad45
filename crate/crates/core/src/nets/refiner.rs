//! Fully convolutional refiner: 3×3 input conv, residual blocks of two 3×3
//! convs with identity skips, and a 1×1 output conv. ReLU, zero padding, no
//! normalisation; output size equals input size.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward_inplace, Conv2d, Param, Real};
use crate::rng::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    pub width: usize,
    pub blocks: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig { width: 64, blocks: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refiner<T> {
    pub config: RefinerConfig,
    conv_in: Conv2d<T>,
    blocks: Vec<(Conv2d<T>, Conv2d<T>)>,
    conv_out: Conv2d<T>,
}

/// Intermediate values kept for the backward pass.
pub struct RefinerTape<T> {
    input: Array3<T>,
    stem: Array3<T>,
    /// Per block: (block input, hidden after first ReLU, block output).
    blocks: Vec<(Array3<T>, Array3<T>, Array3<T>)>,
}

impl<T: Real> Refiner<T> {
    pub fn new(config: &RefinerConfig, seed: u64) -> Result<Self> {
        if config.width == 0 {
            return Err(Error::Config("refiner width must be positive".into()));
        }
        let mut r = rng(seed);
        let w = config.width;
        let conv_in = Conv2d::new(1, w, 3, 1, 1, true, &mut r);
        let blocks = (0..config.blocks)
            .map(|_| {
                (
                    Conv2d::new(w, w, 3, 1, 1, true, &mut r),
                    Conv2d::new(w, w, 3, 1, 1, true, &mut r),
                )
            })
            .collect();
        let conv_out = Conv2d::new(w, 1, 1, 1, 0, true, &mut r);
        Ok(Refiner {
            config: config.clone(),
            conv_in,
            blocks,
            conv_out,
        })
    }

    fn check(x: &Array2<T>) -> Result<()> {
        let (h, w) = x.dim();
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty refiner input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<Array2<T>> {
        Self::check(x)?;
        let input = x.clone().insert_axis(Axis(0));
        let mut h = relu(&self.conv_in.forward(&input));
        for (c1, c2) in &self.blocks {
            let t = relu(&c1.forward(&h));
            let z = c2.forward(&t) + &h;
            h = relu(&z);
        }
        Ok(self.conv_out.forward(&h).index_axis_move(Axis(0), 0))
    }

    pub fn forward_tape(&self, x: &Array2<T>) -> Result<(Array2<T>, RefinerTape<T>)> {
        Self::check(x)?;
        let input = x.clone().insert_axis(Axis(0));
        let stem = relu(&self.conv_in.forward(&input));
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut h = stem.clone();
        for (c1, c2) in &self.blocks {
            let t = relu(&c1.forward(&h));
            let out = relu(&(c2.forward(&t) + &h));
            blocks.push((h, t, out.clone()));
            h = out;
        }
        let y = self.conv_out.forward(&h).index_axis_move(Axis(0), 0);
        Ok((y, RefinerTape { input, stem, blocks }))
    }

    /// Accumulate parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, tape: &RefinerTape<T>, dy: &Array2<T>, need_input: bool) -> Option<Array2<T>> {
        let last = tape.blocks.last().map_or(&tape.stem, |b| &b.2);
        let dy3 = dy.clone().insert_axis(Axis(0));
        let mut g = self.conv_out.backward(last, &dy3, true).expect("input grad");
        for ((c1, c2), (h_in, t, out)) in self.blocks.iter_mut().zip(tape.blocks.iter()).rev() {
            relu_backward_inplace(out, &mut g);
            let mut dt = c2.backward(t, &g, true).expect("input grad");
            relu_backward_inplace(t, &mut dt);
            let dh = c1.backward(h_in, &dt, true).expect("input grad");
            g = g + dh;
        }
        relu_backward_inplace(&tape.stem, &mut g);
        self.conv_in
            .backward(&tape.input, &g, need_input)
            .map(|d| d.index_axis_move(Axis(0), 0))
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = Vec::new();
        push_conv(&mut v, "conv_in", &self.conv_in);
        for (i, (c1, c2)) in self.blocks.iter().enumerate() {
            push_conv(&mut v, &format!("block{i}.conv1"), c1);
            push_conv(&mut v, &format!("block{i}.conv2"), c2);
        }
        push_conv(&mut v, "conv_out", &self.conv_out);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv_in.params_mut();
        for (c1, c2) in &mut self.blocks {
            v.extend(c1.params_mut());
            v.extend(c2.params_mut());
        }
        v.extend(self.conv_out.params_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn push_conv<'a, T: Real>(v: &mut Vec<(String, &'a Param<T>)>, name: &str, c: &'a Conv2d<T>) {
    v.push((format!("{name}.weight"), &c.weight));
    if let Some(b) = &c.bias {
        v.push((format!("{name}.bias"), b));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_shape() {
        let cfg = RefinerConfig { width: 4, blocks: 2 };
        let r = Refiner::<f32>::new(&cfg, 1).unwrap();
        for n in [8usize, 12, 32] {
            let x = Array2::from_shape_fn((n, n), |(i, j)| (i as f32 - j as f32) * 0.1);
            assert_eq!(r.forward(&x).unwrap().dim(), (n, n));
        }
    }

    #[test]
    fn reference_parameter_count() {
        let r = Refiner::<f32>::new(&RefinerConfig::default(), 0).unwrap();
        // 1→64 3×3, 8 × 64→64 3×3, 64→1 1×1, each with bias
        let expected = (9 * 64 + 64) + 8 * (9 * 64 * 64 + 64) + (64 + 1);
        assert_eq!(r.param_count(), expected);
    }

    #[test]
    fn deterministic_for_seed() {
        let cfg = RefinerConfig { width: 4, blocks: 1 };
        let x = Array2::from_shape_fn((8, 8), |(i, j)| ((i * j) % 3) as f32);
        let a = Refiner::<f32>::new(&cfg, 3).unwrap().forward(&x).unwrap();
        let b = Refiner::<f32>::new(&cfg, 3).unwrap().forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let cfg = RefinerConfig { width: 3, blocks: 2 };
        let r = Refiner::<f64>::new(&cfg, 5).unwrap();
        let x = Array2::from_shape_fn((6, 6), |(i, j)| (i as f64 * 0.3 - j as f64 * 0.2).sin());
        let (y, _) = r.forward_tape(&x).unwrap();
        assert_eq!(y, r.forward(&x).unwrap());
    }
}
