//! Feature extractor and classifier.
//!
//! The extractor is a stack of affine blocks, each optionally followed by a
//! ghost batch-norm layer and then an activation. The classifier is a single
//! affine map from the feature vector to class logits. Gradients are computed
//! by hand; parameters are exposed as one flat vector for the optimizer.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UfalError};
use crate::ghost_bn::{BatchNormCache, GhostBatchNorm};
use crate::numeric::{argmax, softmax, stream_rng};

pub const DEFAULT_MC_PASSES: usize = 20;
pub const DEFAULT_MC_RATE: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of the extractor blocks; the last one is the feature dimension.
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    pub activation: Activation,
    pub batch_norm: bool,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_bn_momentum() -> f64 {
    crate::ghost_bn::DEFAULT_MOMENTUM
}

impl Architecture {
    pub fn mlp(input_dim: usize, hidden: &[usize], n_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            n_classes,
            activation: Activation::Relu,
            batch_norm: true,
            bn_momentum: default_bn_momentum(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_classes == 0 || self.hidden.contains(&0) {
            return Err(UfalError::InvalidArgument(format!(
                "degenerate architecture {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound)),
            bias: Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound)),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Same summation order as a one-row `forward`, so the two agree bit for bit.
    fn forward_one(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let row = x.insert_axis(ndarray::Axis(0));
        self.forward(row).row(0).to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub linear: Linear,
    pub norm: Option<GhostBatchNorm>,
}

/// Extractor `f`, classifier `cl` and their parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub architecture: Architecture,
    pub blocks: Vec<Block>,
    pub classifier: Linear,
}

/// Deterministic prediction for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p: Vec<f64>,
    pub p_hat: usize,
    pub feature: Vec<f64>,
}

/// Cached per-sample outputs: softmax `p`, MC-averaged `p_tilde`, pseudo-label and feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub p: Vec<f64>,
    pub p_tilde: Vec<f64>,
    pub p_hat: usize,
    pub feature: Vec<f64>,
}

impl UncertaintyRecord {
    pub fn from_prediction(prediction: Prediction, p_tilde: Vec<f64>) -> Self {
        Self {
            p: prediction.p,
            p_tilde,
            p_hat: prediction.p_hat,
            feature: prediction.feature,
        }
    }

    /// Softmax probability of the pseudo-label.
    pub fn confidence(&self) -> f64 {
        self.p[self.p_hat]
    }
}

struct BlockCache {
    input: Array2<f64>,
    pre_activation: Array2<f64>,
    output: Array2<f64>,
    norm: Option<BatchNormCache>,
}

/// Result of a training-mode forward pass.
pub struct ForwardPass {
    pub features: Array2<f64>,
    pub logits: Array2<f64>,
    blocks: Vec<BlockCache>,
}

impl ModelBundle {
    pub fn new(architecture: Architecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let mut rng = stream_rng(seed, 0x1417);
        let mut blocks = Vec::with_capacity(architecture.hidden.len());
        let mut fan_in = architecture.input_dim;
        for &width in &architecture.hidden {
            blocks.push(Block {
                linear: Linear::init(fan_in, width, &mut rng),
                norm: architecture
                    .batch_norm
                    .then(|| GhostBatchNorm::new(width).with_momentum(architecture.bn_momentum)),
            });
            fan_in = width;
        }
        let classifier = Linear::init(fan_in, architecture.n_classes, &mut rng);
        Ok(Self {
            architecture,
            blocks,
            classifier,
        })
    }

    /// Model whose extractor is the identity and whose classifier is given.
    pub fn identity_features(classifier: Linear) -> Self {
        let architecture = Architecture {
            input_dim: classifier.weight.ncols(),
            hidden: Vec::new(),
            n_classes: classifier.weight.nrows(),
            activation: Activation::Identity,
            batch_norm: false,
            bn_momentum: default_bn_momentum(),
        };
        Self {
            architecture,
            blocks: Vec::new(),
            classifier,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.architecture.feature_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.architecture.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.architecture.input_dim
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(UfalError::Shape {
                expected: self.input_dim(),
                got: cols,
            });
        }
        Ok(())
    }

    /// Features with batch-norm layers in evaluation mode.
    pub fn features_eval(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let act = self.architecture.activation;
        let mut h = x.to_owned();
        for block in &self.blocks {
            let mut z = block.linear.forward(h.view());
            if let Some(norm) = &block.norm {
                z = norm.forward_eval(z.view())?;
            }
            h = z.mapv(|v| act.apply(v));
        }
        Ok(h)
    }

    pub fn logits(&self, features: ArrayView2<f64>) -> Array2<f64> {
        self.classifier.forward(features)
    }

    /// Evaluation-mode forward pass: `(features, logits)`.
    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let features = self.features_eval(x)?;
        let logits = self.logits(features.view());
        Ok((features, logits))
    }

    /// Training-mode forward pass; batch-norm layers use per-replica statistics
    /// over `n_replicas` contiguous chunks and update their running statistics.
    pub fn forward_train(&mut self, x: ArrayView2<f64>, n_replicas: usize) -> Result<ForwardPass> {
        self.check_input(x.ncols())?;
        let act = self.architecture.activation;
        let mut h = x.to_owned();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let z = block.linear.forward(h.view());
            let (pre, norm_cache) = match &mut block.norm {
                Some(norm) => {
                    let (out, cache) = norm.forward_train(z.view(), n_replicas)?;
                    (out, Some(cache))
                }
                None => (z, None),
            };
            let out = pre.mapv(|v| act.apply(v));
            caches.push(BlockCache {
                input: h,
                pre_activation: pre,
                output: out.clone(),
                norm: norm_cache,
            });
            h = out;
        }
        let logits = self.logits(h.view());
        Ok(ForwardPass {
            features: h,
            logits,
            blocks: caches,
        })
    }

    /// Gradient of a scalar loss with respect to the flat parameter vector,
    /// given the loss gradients at the features and at the logits.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_features: ArrayView2<f64>,
        d_logits: ArrayView2<f64>,
    ) -> Vec<f64> {
        let act = self.architecture.activation;
        let d_cls_w = d_logits.t().dot(&pass.features);
        let d_cls_b = d_logits.sum_axis(Axis(0));
        let mut d_h = d_logits.dot(&self.classifier.weight) + d_features;

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, cache) in self.blocks.iter().zip(&pass.blocks).rev() {
            let mut d_pre = d_h;
            ndarray::Zip::from(&mut d_pre)
                .and(&cache.pre_activation)
                .and(&cache.output)
                .for_each(|d, &pre, &out| *d *= act.derivative(pre, out));
            let (d_z, norm_grads) = match (&block.norm, &cache.norm) {
                (Some(norm), Some(nc)) => {
                    let (dz, dg, db) = norm.backward(nc, d_pre.view());
                    (dz, Some((dg, db)))
                }
                _ => (d_pre, None),
            };
            let d_w = d_z.t().dot(&cache.input);
            let d_b = d_z.sum_axis(Axis(0));
            d_h = d_z.dot(&block.linear.weight);
            block_grads.push((d_w, d_b, norm_grads));
        }
        block_grads.reverse();

        let mut flat = Vec::with_capacity(self.num_params());
        for (d_w, d_b, norm) in block_grads {
            flat.extend(d_w.iter());
            flat.extend(d_b.iter());
            if let Some((dg, db)) = norm {
                flat.extend(dg.iter());
                flat.extend(db.iter());
            }
        }
        flat.extend(d_cls_w.iter());
        flat.extend(d_cls_b.iter());
        flat
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        for block in &self.blocks {
            n += block.linear.weight.len() + block.linear.bias.len();
            if let Some(norm) = &block.norm {
                n += norm.gamma.len() + norm.beta.len();
            }
        }
        n + self.classifier.weight.len() + self.classifier.bias.len()
    }

    /// Trainable parameters in a fixed order (blocks first, classifier last).
    pub fn params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for block in &self.blocks {
            flat.extend(block.linear.weight.iter());
            flat.extend(block.linear.bias.iter());
            if let Some(norm) = &block.norm {
                flat.extend(norm.gamma.iter());
                flat.extend(norm.beta.iter());
            }
        }
        flat.extend(self.classifier.weight.iter());
        flat.extend(self.classifier.bias.iter());
        flat
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(UfalError::Shape {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut values = flat.iter().copied();
        let mut fill = |target: &mut dyn Iterator<Item = &mut f64>| {
            for t in target {
                *t = values.next().expect("length checked above");
            }
        };
        for block in &mut self.blocks {
            fill(&mut block.linear.weight.iter_mut());
            fill(&mut block.linear.bias.iter_mut());
            if let Some(norm) = &mut block.norm {
                fill(&mut norm.gamma.iter_mut());
                fill(&mut norm.beta.iter_mut());
            }
        }
        fill(&mut self.classifier.weight.iter_mut());
        fill(&mut self.classifier.bias.iter_mut());
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let checkpoint = Checkpoint {
            manifest: Manifest::of(self),
            model: self.clone(),
        };
        let writer = BufWriter::new(File::create(path)?);
        serde_json::to_writer(writer, &checkpoint)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let checkpoint: Checkpoint = serde_json::from_reader(reader)?;
        let expected = Manifest::of(&checkpoint.model);
        if checkpoint.manifest != expected {
            return Err(UfalError::InvalidArgument(format!(
                "checkpoint manifest {:?} does not describe its parameters {:?}",
                checkpoint.manifest, expected
            )));
        }
        Ok(checkpoint.model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    feature_dim: usize,
    n_classes: usize,
    n_params: usize,
}

impl Manifest {
    fn of(model: &ModelBundle) -> Self {
        Self {
            format: "ufal-checkpoint".to_string(),
            version: 1,
            feature_dim: model.feature_dim(),
            n_classes: model.n_classes(),
            n_params: model.num_params(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    manifest: Manifest,
    model: ModelBundle,
}

/// Feature, softmax and arg-max pseudo-label of one sample, without dropout.
pub fn predict(model: &ModelBundle, x: &[f64]) -> Result<Prediction> {
    let input = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let (features, logits) = model.forward_eval(input)?;
    let p = softmax(logits.row(0).as_slice().expect("contiguous"));
    Ok(Prediction {
        p_hat: argmax(&p),
        p,
        feature: features.row(0).to_vec(),
    })
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(UfalError::DropoutRate(rate));
    }
    Ok(())
}

/// Bernoulli keep-mask for one MC pass; each element survives with probability `1 - rate`.
pub fn draw_mask(dim: usize, rate: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..dim).map(|_| rng.random::<f64>() >= rate).collect()
}

/// Average of the classifier softmax over the given masks applied to `feature`,
/// with kept elements scaled by `1 / (1 - rate)`.
pub fn mc_average_with_masks(
    classifier: &Linear,
    feature: &[f64],
    masks: &[Vec<bool>],
    rate: f64,
) -> Result<Vec<f64>> {
    check_rate(rate)?;
    if masks.is_empty() {
        return Err(UfalError::InvalidArgument("at least one MC pass is required".into()));
    }
    let scale = 1.0 / (1.0 - rate);
    let n_classes = classifier.bias.len();
    let mut avg = vec![0.0; n_classes];
    let mut masked = Array1::zeros(feature.len());
    for mask in masks {
        if mask.len() != feature.len() {
            return Err(UfalError::Shape {
                expected: feature.len(),
                got: mask.len(),
            });
        }
        for ((m, &f), &keep) in masked.iter_mut().zip(feature).zip(mask) {
            *m = if keep { f * scale } else { 0.0 };
        }
        let logits = classifier.forward_one(masked.view());
        for (a, p) in avg.iter_mut().zip(softmax(logits.as_slice().expect("contiguous"))) {
            *a += p;
        }
    }
    let n = masks.len() as f64;
    Ok(avg.into_iter().map(|a| a / n).collect())
}

/// MC-dropout probabilities for a precomputed feature vector.
pub fn mc_dropout_from_feature(
    classifier: &Linear,
    feature: &[f64],
    n_mc: usize,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    check_rate(rate)?;
    if n_mc == 0 {
        return Err(UfalError::InvalidArgument("n_mc must be at least 1".into()));
    }
    if rate == 0.0 {
        // every mask is all-ones, so each pass reproduces the plain softmax
        let logits = classifier.forward_one(ArrayView1::from(feature));
        return Ok(softmax(logits.as_slice().expect("contiguous")));
    }
    let masks: Vec<Vec<bool>> = (0..n_mc).map(|_| draw_mask(feature.len(), rate, rng)).collect();
    mc_average_with_masks(classifier, feature, &masks, rate)
}

/// `p_tilde`: softmax averaged over `n_mc` dropout masks on the feature vector.
pub fn mc_dropout_predict(
    model: &ModelBundle,
    x: &[f64],
    n_mc: usize,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    check_rate(rate)?;
    let prediction = predict(model, x)?;
    mc_dropout_from_feature(&model.classifier, &prediction.feature, n_mc, rate, rng)
}
