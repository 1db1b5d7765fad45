//! Convolutional regressor: stride-2 conv blocks, then two fully connected
//! layers producing the eight encoded label values.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::codec::{decode_label, Decoded, ENCODED_LEN};
use super::refiner::push_conv;
use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward_inplace, Conv2d, Linear, Param, Real};
use crate::rng::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnrConfig {
    /// Output channels of each stride-2 3×3 conv block.
    pub conv_widths: Vec<usize>,
    pub hidden: usize,
    pub input_size: usize,
}

impl Default for CnrConfig {
    fn default() -> Self {
        CnrConfig {
            conv_widths: vec![32, 64, 128, 128],
            hidden: 256,
            input_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cnr<T> {
    pub config: CnrConfig,
    convs: Vec<Conv2d<T>>,
    fc1: Linear<T>,
    fc2: Linear<T>,
}

pub struct CnrTape<T> {
    /// Inputs to each conv plus the final conv output (post-ReLU).
    conv_io: Vec<Array3<T>>,
    flat: Array1<T>,
    hidden: Array1<T>,
}

impl<T: Real> Cnr<T> {
    pub fn new(config: &CnrConfig, seed: u64) -> Result<Self> {
        if config.conv_widths.is_empty() || config.hidden == 0 {
            return Err(Error::Config("regressor needs conv blocks and a hidden layer".into()));
        }
        let mut r = rng(seed);
        let mut convs = Vec::new();
        let mut cin = 1;
        let (mut h, mut w) = (config.input_size, config.input_size);
        for &c in &config.conv_widths {
            let conv = Conv2d::new(cin, c, 3, 2, 1, true, &mut r);
            (h, w) = conv
                .output_dim(h, w)
                .ok_or_else(|| Error::Config("regressor input too small".into()))?;
            convs.push(conv);
            cin = c;
        }
        let flat = cin * h * w;
        let fc1 = Linear::new(flat, config.hidden, &mut r);
        let fc2 = Linear::new(config.hidden, ENCODED_LEN, &mut r);
        Ok(Cnr {
            config: config.clone(),
            convs,
            fc1,
            fc2,
        })
    }

    fn check(&self, x: &Array2<T>) -> Result<()> {
        let n = self.config.input_size;
        if x.dim() != (n, n) {
            return Err(Error::Shape(format!(
                "regressor expects {n}x{n} input, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<Array1<T>> {
        self.forward_tape(x).map(|(y, _)| y)
    }

    pub fn forward_tape(&self, x: &Array2<T>) -> Result<(Array1<T>, CnrTape<T>)> {
        self.check(x)?;
        let mut conv_io = Vec::with_capacity(self.convs.len() + 1);
        let mut h = x.clone().insert_axis(Axis(0));
        for conv in &self.convs {
            let out = relu(&conv.forward(&h));
            conv_io.push(std::mem::replace(&mut h, out));
        }
        let flat = Array1::from_iter(h.iter().copied());
        conv_io.push(h);
        let hidden = self.fc1.forward(&flat).mapv(|v| v.max(T::zero()));
        let y = self.fc2.forward(&hidden);
        Ok((y, CnrTape { conv_io, flat, hidden }))
    }

    pub fn backward(&mut self, tape: &CnrTape<T>, dy: &Array1<T>) {
        let mut dh = self.fc2.backward(&tape.hidden, dy);
        dh.zip_mut_with(&tape.hidden, |g, &h| {
            if h <= T::zero() {
                *g = T::zero()
            }
        });
        let dflat = self.fc1.backward(&tape.flat, &dh);
        let last = tape.conv_io.last().expect("conv output");
        let mut g = dflat.into_shape_with_order(last.dim()).expect("flatten shape");
        let n = self.convs.len();
        for (i, conv) in self.convs.iter_mut().enumerate().rev() {
            relu_backward_inplace(&tape.conv_io[i + 1], &mut g);
            match conv.backward(&tape.conv_io[i], &g, i > 0) {
                Some(d) => g = d,
                None => debug_assert_eq!(i, 0, "{n} convs"),
            }
        }
    }

    /// Forward pass decoded into a label (mm / radians).
    pub fn measure(&self, x: &Array2<T>) -> Result<Decoded> {
        let y = self.forward(x)?;
        let v: Vec<f64> = y.iter().map(|v| v.to_f64_lossy()).collect();
        decode_label(&v)
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            push_conv(&mut v, &format!("conv{i}"), c);
        }
        v.push(("fc1.weight".into(), &self.fc1.weight));
        v.push(("fc1.bias".into(), &self.fc1.bias));
        v.push(("fc2.weight".into(), &self.fc2.weight));
        v.push(("fc2.bias".into(), &self.fc2.bias));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for c in &mut self.convs {
            v.extend(c.params_mut());
        }
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_has_eight_finite_values() {
        let m = Cnr::<f32>::new(&CnrConfig::default(), 1).unwrap();
        let x = Array2::from_shape_fn((32, 32), |(i, j)| ((i + 2 * j) % 7) as f32 - 3.0);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.len(), 8);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_size_rejected() {
        let m = Cnr::<f32>::new(&CnrConfig::default(), 1).unwrap();
        assert!(matches!(m.forward(&Array2::zeros((16, 16))), Err(Error::Shape(_))));
    }
}
