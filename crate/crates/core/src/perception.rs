//! Small convolutional classifier: multi-layer features for the perceptual
//! distance, and a class label read off an image as the distillation
//! condition.

use candle_core::{Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_params, silu, Adam, Forward, LayerShape, ParamTable, VarTable};
use crate::runlog::RunLog;
use crate::tensor::{tensor_to_vec, ImageTensor};

/// A class label or the null condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Null,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureNetConfig {
    pub width: usize,
    pub num_classes: usize,
    /// Indices into the four-conv stack whose activations are exposed.
    pub taps: Vec<usize>,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        Self {
            width: 16,
            num_classes: 8,
            taps: vec![1, 2, 3],
        }
    }
}

const CONV_STACK: usize = 4;

impl FeatureNetConfig {
    fn channels(&self) -> [usize; CONV_STACK] {
        let w = self.width;
        [w, 2 * w, 4 * w, 4 * w]
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let ch = self.channels();
        let mut out = Vec::new();
        let mut prev = 3;
        for (i, &c) in ch.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            out.push(LayerShape::conv(format!("conv{i}"), prev, c, 3, stride));
            prev = c;
        }
        out.push(LayerShape::linear("head", prev, self.num_classes));
        out
    }

    fn validate(&self) -> Result<()> {
        if self.taps.len() < 2 || self.taps.iter().any(|&t| t >= CONV_STACK) {
            return Err(Error::Config(format!("feature taps {:?}", self.taps)));
        }
        if self.num_classes < 2 {
            return Err(Error::SingleClass(self.num_classes));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FeatureNetWeights {
    config: FeatureNetConfig,
    params: ParamTable,
}

impl FeatureNetWeights {
    pub fn init(config: FeatureNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config.layers(), &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: FeatureNetConfig, params: ParamTable) -> Result<Self> {
        config.validate()?;
        for layer in config.layers() {
            let w = crate::nn::get(&params, &layer.weight_key())?;
            if w.dims() != layer.weight_dims().as_slice() {
                return Err(Error::Shape(layer.weight_key()));
            }
            crate::nn::get(&params, &layer.bias_key())?;
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &FeatureNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Activations of every conv layer plus the logits.
    fn run(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let f = Forward::plain(&self.params);
        let mut acts = Vec::with_capacity(CONV_STACK);
        let mut h = x.clone();
        for i in 0..CONV_STACK {
            let stride = if i == 0 { 1 } else { 2 };
            h = silu(&f.conv(&format!("conv{i}"), &h, stride)?)?;
            acts.push(h.clone());
        }
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        let logits = f.linear("head", &pooled)?;
        Ok((acts, logits))
    }

    /// One feature map per tap layer, `[batch, channels, h, w]` each.
    pub fn features(&self, x: &ImageTensor) -> Result<Vec<Tensor>> {
        let (acts, _) = self.run(x.tensor())?;
        Ok(self.config.taps.iter().map(|&i| acts[i].clone()).collect())
    }

    pub fn logits(&self, x: &ImageTensor) -> Result<Tensor> {
        Ok(self.run(x.tensor())?.1)
    }

    /// Class probabilities, `[batch, num_classes]`.
    pub fn probabilities(&self, x: &ImageTensor) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&self.logits(x)?, D::Minus1)?)
    }

    /// Argmax class per batch item, ties toward the lower index.
    pub fn predict_conditions(&self, x: &ImageTensor) -> Result<Vec<Condition>> {
        let probs = self.probabilities(&x.detach())?;
        let k = self.config.num_classes;
        let flat = tensor_to_vec(&probs)?;
        Ok(flat.chunks(k).map(|row| Condition::Class(argmax_low(row))).collect())
    }

    pub fn predict_condition(&self, x: &ImageTensor) -> Result<Condition> {
        Ok(self.predict_conditions(&x.item(0)?)?[0])
    }
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
            eval_every: 100,
        }
    }
}

pub fn accuracy(net: &FeatureNetWeights, images: &[ImageTensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0;
    for (chunk, lab) in images.chunks(32).zip(labels.chunks(32)) {
        let preds = net.predict_conditions(&ImageTensor::stack(chunk)?)?;
        correct += preds
            .iter()
            .zip(lab)
            .filter(|(p, l)| **p == Condition::Class(**l))
            .count();
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Cross-entropy training of the classifier. Held-out accuracy is logged
/// every `eval_every` steps and at the end.
pub fn train_classifier(
    config: FeatureNetConfig,
    train: (&[ImageTensor], &[usize]),
    val: (&[ImageTensor], &[usize]),
    cfg: &ClassifierTrainConfig,
    log: &mut RunLog,
) -> Result<FeatureNetWeights> {
    let (images, labels) = train;
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::EmptyDataset);
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::SingleClass(classes.len()));
    }
    if let Some(&max) = classes.last() {
        if max >= config.num_classes {
            return Err(Error::InvalidRange(format!("label {max} >= {}", config.num_classes)));
        }
    }
    let init = FeatureNetWeights::init(config.clone(), cfg.seed)?;
    let vt = VarTable::new(init.params())?;
    let mut opt = Adam::new(vt.vars(), cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let model = FeatureNetWeights {
        config: config.clone(),
        params: vt.table.clone(),
    };
    for step in 1..=cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(images.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch = ImageTensor::stack(&idx.iter().map(|&i| images[i].clone()).collect::<Vec<_>>())?;
        let targets: Vec<u32> = idx.iter().map(|&i| labels[i] as u32).collect();
        let targets = Tensor::from_vec(targets, idx.len(), crate::tensor::device())?;
        let loss = candle_nn::loss::cross_entropy(&model.logits(&batch)?, &targets)?;
        let lv = loss.to_scalar::<f64>()?;
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: "classifier loss".into(),
            });
        }
        opt.backward_step(&loss)?;
        if step % cfg.eval_every.max(1) == 0 || step == cfg.steps {
            let snapshot = FeatureNetWeights::from_params(config.clone(), vt.snapshot()?)?;
            let acc = if val.0.is_empty() {
                f64::NAN
            } else {
                accuracy(&snapshot, val.0, val.1)?
            };
            log.record(serde_json::json!({
                "stage": "classifier", "step": step, "loss": lv, "val_accuracy": acc,
            }))?;
        }
    }
    FeatureNetWeights::from_params(config, vt.snapshot()?)
}
