//! Fixed feature extractors φ with named layers.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward_inplace, Conv2d, MaxPool2, Real};
use crate::rng::rng;

/// Canonical layer names, shallow to deep.
pub const CANONICAL_LAYERS: [&str; 4] = ["relu1_2", "relu2_2", "relu3_3", "relu4_3"];

/// Named activations of one forward pass, in extractor layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureActivations<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Array3<T>>,
}

impl<T> FeatureActivations<T> {
    pub fn get(&self, name: &str) -> Option<&Array3<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }
}

/// A forward pass with whatever the extractor needs to run backward.
#[derive(Debug, Clone)]
pub struct ExtractorPass<T> {
    /// Activations for layers `0..=deepest`.
    pub activations: Vec<Array3<T>>,
    /// Extractor-private intermediate values.
    pub tape: Vec<Array3<T>>,
    pub input_hw: (usize, usize),
}

pub trait FeatureExtractor<T: Real>: Send + Sync {
    fn layer_names(&self) -> Vec<String>;

    /// Required input size, if the extractor enforces one.
    fn input_size(&self) -> Option<(usize, usize)>;

    /// Run the network up to and including layer index `deepest`.
    fn forward(&self, x: &Array2<T>, deepest: usize) -> Result<ExtractorPass<T>>;

    /// Input gradient given per-layer output gradients (`None` = zero).
    fn backward(&self, pass: &ExtractorPass<T>, layer_grads: &[Option<Array3<T>>]) -> Array2<T>;

    fn layer_index(&self, name: &str) -> Result<usize> {
        self.layer_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("unknown feature layer `{name}`")))
    }
}

fn check_input<T: Real>(phi: &dyn FeatureExtractor<T>, x: &Array2<T>) -> Result<()> {
    if let Some(hw) = phi.input_size() {
        if x.dim() != hw {
            return Err(Error::Shape(format!(
                "extractor expects {}x{} input, got {}x{}",
                hw.0,
                hw.1,
                x.nrows(),
                x.ncols()
            )));
        }
    }
    Ok(())
}

/// All named activations for one patch.
pub fn extract_features<T: Real>(phi: &dyn FeatureExtractor<T>, x: &Array2<T>) -> Result<FeatureActivations<T>> {
    let names = phi.layer_names();
    let pass = phi.forward(x, names.len() - 1)?;
    Ok(FeatureActivations {
        names,
        tensors: pass.activations,
    })
}

/// Stub extractor: every named layer is the input itself (`1 × H × W`).
#[derive(Debug, Clone)]
pub struct IdentityExtractor {
    names: Vec<String>,
}

impl IdentityExtractor {
    pub fn new(names: &[&str]) -> Self {
        IdentityExtractor {
            names: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn canonical() -> Self {
        Self::new(&CANONICAL_LAYERS)
    }
}

impl<T: Real> FeatureExtractor<T> for IdentityExtractor {
    fn layer_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn input_size(&self) -> Option<(usize, usize)> {
        None
    }

    fn forward(&self, x: &Array2<T>, deepest: usize) -> Result<ExtractorPass<T>> {
        let a = x.clone().insert_axis(ndarray::Axis(0));
        Ok(ExtractorPass {
            activations: vec![a; deepest + 1],
            tape: Vec::new(),
            input_hw: x.dim(),
        })
    }

    fn backward(&self, pass: &ExtractorPass<T>, layer_grads: &[Option<Array3<T>>]) -> Array2<T> {
        let mut g = Array2::zeros(pass.input_hw);
        for lg in layer_grads.iter().flatten() {
            g += &lg.index_axis(ndarray::Axis(0), 0);
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Conv(usize),
    Relu,
    Pool,
    Tap(usize),
}

/// VGG-style extractor: stages of 3×3 convolutions separated by 2×2 max
/// pooling, tapped after the last ReLU of each stage. With widths
/// `[64, 128, 256, 512]` and `[2, 2, 3, 3]` convolutions per stage this is the
/// VGG-16 feature trunk up to `relu4_3`.
#[derive(Debug, Clone)]
pub struct VggExtractor<T> {
    convs: Vec<Conv2d<T>>,
    ops: Vec<Op>,
    /// Per-channel `x * scale + shift` applied after channel replication.
    channel_affine: Vec<(T, T)>,
    input_hw: Option<(usize, usize)>,
}

pub const VGG16_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const VGG_CONVS_PER_STAGE: [usize; 4] = [2, 2, 3, 3];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl<T: Real> VggExtractor<T> {
    /// Randomly initialised (He-normal, zero bias) extractor.
    pub fn random(
        widths: [usize; 4],
        in_channels: usize,
        bias: bool,
        input_hw: Option<(usize, usize)>,
        seed: u64,
    ) -> Self {
        let mut r = rng(seed);
        let mut convs = Vec::new();
        let mut ops = Vec::new();
        let mut cin = in_channels;
        for (stage, (&width, &n)) in widths.iter().zip(VGG_CONVS_PER_STAGE.iter()).enumerate() {
            if stage > 0 {
                ops.push(Op::Pool);
            }
            for _ in 0..n {
                ops.push(Op::Conv(convs.len()));
                convs.push(Conv2d::new(cin, width, 3, 1, 1, bias, &mut r));
                ops.push(Op::Relu);
                cin = width;
            }
            ops.push(Op::Tap(stage));
        }
        VggExtractor {
            convs,
            ops,
            channel_affine: vec![(T::one(), T::zero()); in_channels],
            input_hw,
        }
    }

    /// Small fixed-seed extractor for tests and hermetic runs.
    pub fn hermetic(widths: [usize; 4], seed: u64) -> Self {
        Self::random(widths, 3, true, Some((32, 32)), seed)
    }

    /// VGG-16 with weights read from a container holding `convS_I.weight`
    /// (`cout × cin × 3 × 3`) and `convS_I.bias` tensors.
    pub fn vgg16_from_file(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let mut net = Self::random(VGG16_WIDTHS, 3, true, Some((32, 32)), 0);
        let mut idx = 0;
        for (stage, &n) in VGG_CONVS_PER_STAGE.iter().enumerate() {
            for i in 0..n {
                let name = format!("conv{}_{}", stage + 1, i + 1);
                let conv = &mut net.convs[idx];
                let (_, w) = c.tensor(&format!("{name}.weight"))?;
                let (_, b) = c.tensor(&format!("{name}.bias"))?;
                if w.len() != conv.weight.len() || b.len() != conv.cout {
                    return Err(Error::Data(format!(
                        "{}: `{name}` has {} weights, expected {}",
                        path.display(),
                        w.len(),
                        conv.weight.len()
                    )));
                }
                conv.weight.value = w.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
                conv.bias.as_mut().expect("vgg has bias").value =
                    b.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
                idx += 1;
            }
        }
        net.channel_affine = IMAGENET_MEAN
            .iter()
            .zip(IMAGENET_STD.iter())
            .map(|(&m, &s)| (T::from_f64_lossy(1.0 / s), T::from_f64_lossy(-m / s)))
            .collect();
        Ok(net)
    }

    pub fn with_input_size(mut self, hw: Option<(usize, usize)>) -> Self {
        self.input_hw = hw;
        self
    }

    pub fn in_channels(&self) -> usize {
        self.channel_affine.len()
    }

    /// `(C, H, W)` of every tapped layer for an input of `hw`, or `None` once
    /// the spatial size collapses to zero.
    pub fn layer_shapes(&self, hw: (usize, usize)) -> Vec<Option<(usize, usize, usize)>> {
        let (mut h, mut w) = hw;
        let mut c = self.in_channels();
        let mut shapes = Vec::new();
        for op in &self.ops {
            match *op {
                Op::Conv(i) => c = self.convs[i].cout,
                Op::Pool => (h, w) = MaxPool2::output_dim(h, w),
                Op::Relu => {}
                Op::Tap(_) => shapes.push((h > 0 && w > 0).then_some((c, h, w))),
            }
        }
        shapes
    }
}

impl<T: Real> FeatureExtractor<T> for VggExtractor<T> {
    fn layer_names(&self) -> Vec<String> {
        CANONICAL_LAYERS.iter().map(|s| s.to_string()).collect()
    }

    fn input_size(&self) -> Option<(usize, usize)> {
        self.input_hw
    }

    fn forward(&self, x: &Array2<T>, deepest: usize) -> Result<ExtractorPass<T>> {
        check_input(self, x)?;
        if let Some(None) = self.layer_shapes(x.dim()).get(deepest) {
            return Err(Error::Shape(format!(
                "{}x{} input too small for layer {}",
                x.nrows(),
                x.ncols(),
                CANONICAL_LAYERS[deepest]
            )));
        }
        let (h, w) = x.dim();
        let mut act = Array3::from_shape_fn((self.in_channels(), h, w), |(c, i, j)| {
            let (s, b) = self.channel_affine[c];
            x[[i, j]] * s + b
        });
        let mut tape = Vec::new();
        let mut activations = Vec::new();
        for op in &self.ops {
            match *op {
                Op::Conv(i) => {
                    let out = self.convs[i].forward(&act);
                    tape.push(std::mem::replace(&mut act, out));
                }
                Op::Relu => {
                    act = relu(&act);
                    tape.push(act.clone());
                }
                Op::Pool => {
                    let out = MaxPool2::forward(&act);
                    tape.push(std::mem::replace(&mut act, out));
                }
                Op::Tap(t) => {
                    activations.push(act.clone());
                    if t == deepest {
                        break;
                    }
                }
            }
        }
        Ok(ExtractorPass {
            activations,
            tape,
            input_hw: (h, w),
        })
    }

    fn backward(&self, pass: &ExtractorPass<T>, layer_grads: &[Option<Array3<T>>]) -> Array2<T> {
        let deepest = pass.activations.len() - 1;
        let end = self
            .ops
            .iter()
            .position(|op| *op == Op::Tap(deepest))
            .expect("tap exists");
        let mut grad: Option<Array3<T>> = None;
        let mut tape_idx = pass.tape.len();
        for op in self.ops[..=end].iter().rev() {
            match *op {
                Op::Tap(t) => {
                    if let Some(Some(g)) = layer_grads.get(t) {
                        grad = Some(match grad {
                            Some(acc) => acc + g,
                            None => g.clone(),
                        });
                    }
                }
                Op::Relu => {
                    tape_idx -= 1;
                    if let Some(g) = grad.as_mut() {
                        relu_backward_inplace(&pass.tape[tape_idx], g);
                    }
                }
                Op::Conv(i) => {
                    tape_idx -= 1;
                    if let Some(g) = grad.as_ref() {
                        let input = &pass.tape[tape_idx];
                        grad = Some(self.convs[i].backward_input((input.dim().1, input.dim().2), g));
                    }
                }
                Op::Pool => {
                    tape_idx -= 1;
                    if let Some(g) = grad.as_ref() {
                        grad = Some(MaxPool2::backward(&pass.tape[tape_idx], g));
                    }
                }
            }
        }
        let mut dx = Array2::<T>::zeros(pass.input_hw);
        if let Some(g) = grad {
            for (c, &(s, _)) in self.channel_affine.iter().enumerate() {
                dx.scaled_add(s, &g.index_axis(ndarray::Axis(0), c));
            }
        }
        dx
    }
}

/// Which extractor the loss uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorVariant {
    /// Fixed-seed random-weight VGG-style network; needs no external files.
    Hermetic,
    /// Pretrained VGG-16 loaded from `weights_path`.
    Vgg16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub variant: ExtractorVariant,
    pub weights_path: Option<std::path::PathBuf>,
    pub hermetic_widths: [usize; 4],
    pub hermetic_seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            variant: ExtractorVariant::Hermetic,
            weights_path: None,
            hermetic_widths: [8, 16, 32, 64],
            hermetic_seed: 0x5EED,
        }
    }
}

pub fn build_extractor(cfg: &ExtractorConfig) -> Result<VggExtractor<f32>> {
    match cfg.variant {
        ExtractorVariant::Hermetic => Ok(VggExtractor::hermetic(cfg.hermetic_widths, cfg.hermetic_seed)),
        ExtractorVariant::Vgg16 => {
            let path = cfg
                .weights_path
                .as_ref()
                .ok_or_else(|| Error::Config("vgg16 extractor needs weights_path".into()))?;
            VggExtractor::vgg16_from_file(path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg16_layer_shapes_for_32px() {
        let net = VggExtractor::<f32>::random(VGG16_WIDTHS, 3, true, Some((32, 32)), 1);
        let shapes: Vec<_> = net.layer_shapes((32, 32)).into_iter().map(Option::unwrap).collect();
        // each stage after the first halves the spatial size
        assert_eq!(
            shapes,
            vec![(64, 32, 32), (128, 16, 16), (256, 8, 8), (512, 4, 4)]
        );
    }

    #[test]
    fn hermetic_activation_dims() {
        let net = VggExtractor::<f32>::hermetic([8, 16, 32, 64], 3);
        let x = Array2::from_shape_fn((32, 32), |(i, j)| ((i * 7 + j * 3) % 5) as f32 - 2.0);
        let acts = extract_features(&net, &x).unwrap();
        let dims: Vec<_> = acts.tensors.iter().map(|a| a.dim()).collect();
        assert_eq!(dims, vec![(8, 32, 32), (16, 16, 16), (32, 8, 8), (64, 4, 4)]);
    }

    #[test]
    fn wrong_input_size_is_shape_error() {
        let net = VggExtractor::<f32>::hermetic([4, 4, 4, 4], 3);
        let x = Array2::zeros((16, 16));
        assert!(matches!(extract_features(&net, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn deterministic_and_zero_preserving() {
        let net = VggExtractor::<f64>::random([4, 4, 4, 4], 3, false, None, 9);
        let x = Array2::from_shape_fn((8, 8), |(i, j)| (i as f64 - j as f64) * 0.1);
        assert_eq!(extract_features(&net, &x).unwrap(), extract_features(&net, &x).unwrap());
        let z = extract_features(&net, &Array2::zeros((8, 8))).unwrap();
        assert!(z.tensors.iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn missing_weights_file_is_error() {
        let cfg = ExtractorConfig {
            variant: ExtractorVariant::Vgg16,
            weights_path: Some("/nonexistent/vgg16.atnc".into()),
            ..Default::default()
        };
        assert!(build_extractor(&cfg).is_err());
    }

    #[test]
    fn vgg16_weights_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.atnc");
        let mut c = Container::new();
        let mut cin = 3;
        for (stage, (&w, &n)) in VGG16_WIDTHS.iter().zip(VGG_CONVS_PER_STAGE.iter()).enumerate() {
            for i in 0..n {
                let name = format!("conv{}_{}", stage + 1, i + 1);
                c.push_tensor(&format!("{name}.weight"), &[w, cin, 3, 3], vec![0.001; w * cin * 9]);
                c.push_tensor(&format!("{name}.bias"), &[w], vec![0.5; w]);
                cin = w;
            }
        }
        c.write(&path).unwrap();
        let net = VggExtractor::<f32>::vgg16_from_file(&path).unwrap();
        assert_eq!(net.convs[0].bias.as_ref().unwrap().value[0], 0.5);
        assert!((net.channel_affine[0].0 - 1.0 / 0.229).abs() < 1e-5);
    }
}
