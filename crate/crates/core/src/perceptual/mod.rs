//! Perceptual losses: feature reconstruction, style reconstruction through
//! Gram matrices, and per-pixel identity regularisation, combined into the
//! refiner objective.

mod extractor;

pub use extractor::{
    build_extractor, extract_features, ExtractorConfig, ExtractorPass, ExtractorVariant,
    FeatureActivations, FeatureExtractor, IdentityExtractor, VggExtractor, CANONICAL_LAYERS,
    VGG16_WIDTHS,
};

use ndarray::{linalg::general_mat_mul, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

/// Distance used inside the feature and style terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Σ|d|
    L1,
    /// Σd²
    SquaredL2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtnLossConfig {
    pub feature_layers: Vec<String>,
    pub style_layers: Vec<String>,
    /// Expand the style layers to every layer up to the deepest one listed.
    pub style_cumulative: bool,
    pub reg_lambda: f64,
    pub feature_weight: f64,
    pub style_weight: f64,
    pub norm: LossNorm,
}

impl Default for AtnLossConfig {
    fn default() -> Self {
        AtnLossConfig {
            feature_layers: vec!["relu3_3".into()],
            style_layers: vec!["relu1_2".into(), "relu2_2".into()],
            style_cumulative: false,
            reg_lambda: 0.01,
            feature_weight: 1.0,
            style_weight: 1.0,
            norm: LossNorm::L1,
        }
    }
}

impl AtnLossConfig {
    /// Cumulative style configuration ending at `top` (used by the layer ablation).
    pub fn cumulative_up_to(top: &str) -> Self {
        AtnLossConfig {
            style_layers: vec![top.to_string()],
            style_cumulative: true,
            ..Default::default()
        }
    }

    pub fn validate<T: Real>(&self, phi: &dyn FeatureExtractor<T>) -> Result<()> {
        if !(self.reg_lambda >= 0.0) {
            return Err(Error::Config(format!("reg_lambda = {} must be >= 0", self.reg_lambda)));
        }
        if !(self.feature_weight >= 0.0 && self.style_weight >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        self.feature_indices(phi)?;
        self.style_indices(phi)?;
        Ok(())
    }

    pub fn feature_indices<T: Real>(&self, phi: &dyn FeatureExtractor<T>) -> Result<Vec<usize>> {
        resolve(phi, &self.feature_layers)
    }

    pub fn style_indices<T: Real>(&self, phi: &dyn FeatureExtractor<T>) -> Result<Vec<usize>> {
        let idx = resolve(phi, &self.style_layers)?;
        if self.style_cumulative {
            Ok(idx.iter().max().map_or(Vec::new(), |&top| (0..=top).collect()))
        } else {
            Ok(idx)
        }
    }
}

fn resolve<T: Real>(phi: &dyn FeatureExtractor<T>, names: &[String]) -> Result<Vec<usize>> {
    names.iter().map(|n| phi.layer_index(n)).collect()
}

fn layer_size<T>(a: &Array3<T>) -> usize {
    a.len()
}

fn distance<T: Real>(a: &Array3<T>, b: &Array3<T>, norm: LossNorm) -> T {
    a.iter()
        .zip(b.iter())
        .map(|(&u, &v)| match norm {
            LossNorm::L1 => (u - v).abs(),
            LossNorm::SquaredL2 => (u - v) * (u - v),
        })
        .sum()
}

fn d_distance<T: Real>(d: T, norm: LossNorm) -> T {
    match norm {
        LossNorm::L1 => {
            if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        LossNorm::SquaredL2 => d + d,
    }
}

fn as_matrix<T: Real>(a: &Array3<T>) -> ArrayView2<'_, T> {
    let (c, h, w) = a.dim();
    a.view().into_shape_with_order((c, h * w)).expect("standard layout")
}

/// Gram matrix `G[c, c'] = Σ_hw φ[c,h,w] φ[c',h,w] / (C·H·W)`.
pub fn gram<T: Real>(activations: &Array3<T>) -> Array2<T> {
    let f = as_matrix(activations);
    let c = f.nrows();
    let mut g = Array2::<T>::zeros((c, c));
    let norm = T::from_usize(layer_size(activations)).unwrap();
    general_mat_mul(T::one() / norm, &f, &f.t(), T::zero(), &mut g);
    // exact symmetry regardless of summation order
    for i in 0..c {
        for j in 0..i {
            g[[i, j]] = g[[j, i]];
        }
    }
    g
}

fn deepest(indices: &[&[usize]]) -> Option<usize> {
    indices.iter().flat_map(|s| s.iter().copied()).max()
}

fn forward_to<T: Real>(phi: &dyn FeatureExtractor<T>, x: &Array2<T>, deepest: usize) -> Result<ExtractorPass<T>> {
    phi.forward(x, deepest)
}

fn feature_term<T: Real>(a: &[Array3<T>], b: &[Array3<T>], layers: &[usize], norm: LossNorm) -> T {
    layers
        .iter()
        .map(|&j| distance(&a[j], &b[j], norm) / T::from_usize(layer_size(&a[j])).unwrap())
        .sum()
}

fn style_term<T: Real>(a: &[Array3<T>], target_grams: &[(usize, Array2<T>)], norm: LossNorm) -> T {
    target_grams
        .iter()
        .map(|(j, gt)| {
            let g = gram(&a[*j]);
            let d: T = g
                .iter()
                .zip(gt.iter())
                .map(|(&u, &v)| match norm {
                    LossNorm::L1 => (u - v).abs(),
                    LossNorm::SquaredL2 => (u - v) * (u - v),
                })
                .sum();
            d / T::from_usize(layer_size(&a[*j])).unwrap()
        })
        .sum()
}

/// `Σ_j (1/(C_j H_j W_j)) ‖φ_j(ŷ) − φ_j(x)‖`.
pub fn feature_loss<T: Real>(
    phi: &dyn FeatureExtractor<T>,
    layers: &[String],
    y_hat: &Array2<T>,
    x: &Array2<T>,
    norm: LossNorm,
) -> Result<T> {
    let idx = resolve(phi, layers)?;
    let Some(top) = deepest(&[&idx]) else {
        return Ok(T::zero());
    };
    let a = forward_to(phi, y_hat, top)?;
    let b = forward_to(phi, x, top)?;
    Ok(feature_term(&a.activations, &b.activations, &idx, norm))
}

/// `Σ_j (1/(C_j H_j W_j)) ‖G_j(ŷ) − G_j(y_s)‖`.
pub fn style_loss<T: Real>(
    phi: &dyn FeatureExtractor<T>,
    layers: &[String],
    y_hat: &Array2<T>,
    y_s: &Array2<T>,
    norm: LossNorm,
) -> Result<T> {
    let idx = resolve(phi, layers)?;
    let Some(top) = deepest(&[&idx]) else {
        return Ok(T::zero());
    };
    let a = forward_to(phi, y_hat, top)?;
    let s = forward_to(phi, y_s, top)?;
    let grams: Vec<_> = idx.iter().map(|&j| (j, gram(&s.activations[j]))).collect();
    Ok(style_term(&a.activations, &grams, norm))
}

/// Per-term breakdown of the refiner objective. `total` is the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AtnLoss {
    pub total: f64,
    pub feature: f64,
    pub style: f64,
    pub reg: f64,
}

impl AtnLoss {
    pub fn add_scaled(&mut self, other: &AtnLoss, s: f64) {
        self.total += s * other.total;
        self.feature += s * other.feature;
        self.style += s * other.style;
        self.reg += s * other.reg;
    }
}

/// Precomputed targets for one training example: content activations of the
/// refiner input and Gram matrices of the style target.
#[derive(Debug, Clone)]
pub struct LossTargets<T> {
    x: Array2<T>,
    content: Vec<(usize, Array3<T>)>,
    style_grams: Vec<(usize, Array2<T>)>,
}

/// Evaluates the objective for a fixed extractor and configuration.
pub struct AtnObjective<'a, T: Real> {
    phi: &'a dyn FeatureExtractor<T>,
    config: AtnLossConfig,
    feature_idx: Vec<usize>,
    style_idx: Vec<usize>,
    top: Option<usize>,
}

impl<'a, T: Real> AtnObjective<'a, T> {
    pub fn new(phi: &'a dyn FeatureExtractor<T>, config: &AtnLossConfig) -> Result<Self> {
        config.validate(phi)?;
        let feature_idx = config.feature_indices(phi)?;
        let style_idx = config.style_indices(phi)?;
        let top = deepest(&[&feature_idx, &style_idx]);
        Ok(AtnObjective {
            phi,
            config: config.clone(),
            feature_idx,
            style_idx,
            top,
        })
    }

    pub fn config(&self) -> &AtnLossConfig {
        &self.config
    }

    pub fn targets(&self, x: &Array2<T>, y_s: &Array2<T>) -> Result<LossTargets<T>> {
        let mut content = Vec::new();
        let mut style_grams = Vec::new();
        if let Some(top) = deepest(&[&self.feature_idx]) {
            let pass = forward_to(self.phi, x, top)?;
            content = self
                .feature_idx
                .iter()
                .map(|&j| (j, pass.activations[j].clone()))
                .collect();
        }
        if let Some(top) = deepest(&[&self.style_idx]) {
            let pass = forward_to(self.phi, y_s, top)?;
            style_grams = self
                .style_idx
                .iter()
                .map(|&j| (j, gram(&pass.activations[j])))
                .collect();
        }
        Ok(LossTargets {
            x: x.clone(),
            content,
            style_grams,
        })
    }

    /// Loss terms and the gradient with respect to `ŷ`.
    pub fn loss_and_grad(&self, y_hat: &Array2<T>, targets: &LossTargets<T>) -> Result<(AtnLoss, Array2<T>)> {
        let norm = self.config.norm;
        let wf = T::from_f64_lossy(self.config.feature_weight);
        let ws = T::from_f64_lossy(self.config.style_weight);
        let lambda = T::from_f64_lossy(self.config.reg_lambda);

        let mut feature = T::zero();
        let mut style = T::zero();
        let mut grad = Array2::<T>::zeros(y_hat.dim());

        if let Some(top) = self.top {
            let pass = forward_to(self.phi, y_hat, top)?;
            let mut layer_grads: Vec<Option<Array3<T>>> = vec![None; top + 1];
            for (j, target) in &targets.content {
                let a = &pass.activations[*j];
                let n = T::from_usize(layer_size(a)).unwrap();
                feature += distance(a, target, norm) / n;
                let scale = wf / n;
                let g = ndarray::Zip::from(a)
                    .and(target)
                    .map_collect(|&u, &v| d_distance(u - v, norm) * scale);
                accumulate(&mut layer_grads[*j], g);
            }
            for (j, gt) in &targets.style_grams {
                let a = &pass.activations[*j];
                let (c, h, w) = a.dim();
                let n = T::from_usize(c * h * w).unwrap();
                let g = gram(a);
                let diff = &g - gt;
                style += diff
                    .iter()
                    .map(|&d| match norm {
                        LossNorm::L1 => d.abs(),
                        LossNorm::SquaredL2 => d * d,
                    })
                    .sum::<T>()
                    / n;
                // dL/dG = ws·d'(G − Gs)/n ; G = F Fᵀ/n ⇒ dL/dF = (S + Sᵀ) F / n
                let s = diff.mapv(|d| d_distance(d, norm) * ws / n);
                let sym = &s + &s.t();
                let f = as_matrix(a);
                let mut df = Array2::<T>::zeros((c, h * w));
                general_mat_mul(T::one() / n, &sym, &f, T::zero(), &mut df);
                let df = df.into_shape_with_order((c, h, w)).expect("reshape");
                accumulate(&mut layer_grads[*j], df);
            }
            grad += &self.phi.backward(&pass, &layer_grads);
        }

        let npx = T::from_usize(y_hat.len()).unwrap();
        let reg = y_hat
            .iter()
            .zip(targets.x.iter())
            .map(|(&u, &v)| (u - v).abs())
            .sum::<T>()
            / npx;
        let reg_scale = lambda / npx;
        ndarray::Zip::from(&mut grad)
            .and(y_hat)
            .and(&targets.x)
            .for_each(|g, &u, &v| *g += d_distance(u - v, LossNorm::L1) * reg_scale);

        let feature = feature.to_f64_lossy();
        let style = style.to_f64_lossy();
        let reg = reg.to_f64_lossy();
        let total = self.config.feature_weight * feature
            + self.config.style_weight * style
            + self.config.reg_lambda * reg;
        Ok((
            AtnLoss {
                total,
                feature,
                style,
                reg,
            },
            grad,
        ))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Array3<T>>, g: Array3<T>) {
    *slot = Some(match slot.take() {
        Some(acc) => acc + g,
        None => g,
    });
}

/// `w_f·feature(ŷ, x) + w_s·style(ŷ, y_s) + λ·mean|ŷ − x|`, with its terms.
pub fn atn_loss<T: Real>(
    phi: &dyn FeatureExtractor<T>,
    config: &AtnLossConfig,
    x: &Array2<T>,
    y_hat: &Array2<T>,
    y_s: &Array2<T>,
) -> Result<AtnLoss> {
    let obj = AtnObjective::new(phi, config)?;
    let targets = obj.targets(x, y_s)?;
    obj.loss_and_grad(y_hat, &targets).map(|(l, _)| l)
}
