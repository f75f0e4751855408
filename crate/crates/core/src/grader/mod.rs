//! Per-rectangle slice grading: grade grouping schemes, the slice CNN, and
//! its training loop.

pub mod augment;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    self, BatchNorm2d, Conv2d, Dense, HasParams, MaxPool2, NamedTensor, Param, Real, Relu, Sgd,
    Tensor,
};
use crate::rng;

pub use augment::{
    augment_image, elastic_deform, elastic_field, AffineDraw, AugmentParams, ElasticParams,
};

pub const RECT_ROWS: usize = 100;
pub const RECT_COLS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingScheme {
    Two,
    Three,
    Five,
}

impl GroupingScheme {
    pub fn num_classes(self) -> usize {
        match self {
            GroupingScheme::Two => 2,
            GroupingScheme::Three => 3,
            GroupingScheme::Five => 5,
        }
    }

    pub fn from_classes(m: usize) -> Result<Self> {
        match m {
            2 => Ok(GroupingScheme::Two),
            3 => Ok(GroupingScheme::Three),
            5 => Ok(GroupingScheme::Five),
            _ => Err(Error::invalid(format!("number of slice classes must be 2, 3 or 5, got {m}"))),
        }
    }
}

pub fn map_grade(grade: u8, scheme: GroupingScheme) -> Result<usize> {
    if grade > 4 {
        return Err(Error::invalid(format!("slice grade {grade} outside 0..=4")));
    }
    Ok(match scheme {
        GroupingScheme::Two => usize::from(grade >= 2),
        GroupingScheme::Three => match grade {
            0 | 1 => 0,
            2 => 1,
            _ => 2,
        },
        GroupingScheme::Five => grade as usize,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub num_classes: usize,
    pub channels: [usize; 3],
    pub hidden: usize,
    pub input_rows: usize,
    pub input_cols: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            num_classes: 3,
            channels: [16, 32, 64],
            hidden: 128,
            input_rows: RECT_ROWS,
            input_cols: RECT_COLS,
            learning_rate: 0.01,
            momentum: 0.0,
            batch_size: 32,
            epochs: 10,
            seed: 0,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        GroupingScheme::from_classes(self.num_classes)?;
        if self.channels.contains(&0) || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::invalid("CNN channel counts, hidden width and batch size must be positive"));
        }
        if self.input_rows < 8 || self.input_cols < 8 {
            return Err(Error::invalid("CNN input must be at least 8×8"));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("learning rate must be ≥ 0 and momentum in [0, 1)"));
        }
        Ok(())
    }

    fn flat_features(&self) -> usize {
        (self.input_rows / 8) * (self.input_cols / 8) * self.channels[2]
    }
}

#[derive(Debug, Clone)]
struct Block<T> {
    conv: Conv2d<T>,
    relu: Relu,
    pool: MaxPool2,
    bn: BatchNorm2d<T>,
}

/// Three conv blocks followed by two fully connected layers.
#[derive(Debug, Clone)]
pub struct SliceNet<T> {
    pub config: CnnConfig,
    pub trained: bool,
    blocks: Vec<Block<T>>,
    fc1: Dense<T>,
    fc_relu: Relu,
    fc2: Dense<T>,
}

pub type SliceCnn = SliceNet<f32>;

pub fn build_slice_cnn(cfg: &CnnConfig) -> Result<SliceCnn> {
    SliceNet::new(cfg)
}

impl<T: Real> SliceNet<T> {
    pub fn new(cfg: &CnnConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, &[rng::key_of("slice-cnn-init")]);
        let mut in_c = 1;
        let blocks = cfg
            .channels
            .iter()
            .map(|&c| {
                let b = Block {
                    conv: Conv2d::new(in_c, c, 3, &mut r),
                    relu: Relu::default(),
                    pool: MaxPool2::default(),
                    bn: BatchNorm2d::new(c),
                };
                in_c = c;
                b
            })
            .collect();
        Ok(SliceNet {
            config: cfg.clone(),
            trained: false,
            blocks,
            fc1: Dense::new(cfg.flat_features(), cfg.hidden, &mut r),
            fc_relu: Relu::default(),
            fc2: Dense::new(cfg.hidden, cfg.num_classes, &mut r),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn flatten(x: Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        let len = x.sample_len();
        Tensor::from_vec([n, len, 1, 1], x.data)
    }

    /// Pre-softmax activations in inference mode.
    pub fn logits(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.bn.forward(&MaxPool2::forward(&Relu::forward(&b.conv.forward(&h))));
        }
        let h = Self::flatten(h);
        let h = Relu::forward(&self.fc1.forward(&h));
        self.fc2.forward(&h)
    }

    /// Pre-softmax activations in training mode (batch statistics, caches kept
    /// for [`SliceNet::backward`]).
    pub fn logits_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for b in &mut self.blocks {
            let c = b.conv.forward_train(&h);
            let a = b.relu.forward_train(&c);
            let p = b.pool.forward_train(&a);
            h = b.bn.forward_train(&p);
        }
        let h = Self::flatten(h);
        let h = self.fc1.forward_train(&h);
        let h = self.fc_relu.forward_train(&h);
        self.fc2.forward_train(&h)
    }

    pub fn backward(&mut self, dlogits: &Tensor<T>) {
        let g = self.fc2.backward(dlogits);
        let g = self.fc_relu.backward(&g);
        let g = self.fc1.backward(&g);
        let last = self.config.channels[2];
        let shape = [
            g.batch(),
            last,
            self.config.input_rows / 8,
            self.config.input_cols / 8,
        ];
        let mut g = Tensor::from_vec(shape, g.data);
        for b in self.blocks.iter_mut().rev() {
            let d = b.bn.backward(&g);
            let d = b.pool.backward(&d);
            let d = b.relu.backward(&d);
            g = b.conv.backward(&d);
        }
    }

    fn batch_tensor(&self, images: &[&Image]) -> Tensor<T> {
        let (rows, cols) = (self.config.input_rows, self.config.input_cols);
        let mut data = Vec::with_capacity(images.len() * rows * cols);
        for img in images {
            assert_eq!((img.rows, img.cols), (rows, cols), "grader input size");
            data.extend(img.data.iter().map(|&v| T::of(v as f64)));
        }
        Tensor::from_vec([images.len(), 1, rows, cols], data)
    }

    /// Final pre-softmax vector of length m for each image.
    pub fn embed_batch(&self, images: &[&Image]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.config.batch_size.max(1)) {
            let z = self.logits(&self.batch_tensor(chunk));
            out.extend(z.data.chunks(self.num_classes()).map(|r| r.iter().map(|v| v.f64()).collect()));
        }
        out
    }

    pub fn grade_batch(&self, images: &[&Image]) -> Vec<Vec<f64>> {
        self.embed_batch(images)
            .into_iter()
            .map(|z| nn::softmax(&z))
            .collect()
    }

    pub fn grade(&self, image: &Image) -> Vec<f64> {
        self.grade_batch(&[image]).remove(0)
    }

    pub fn embed(&self, image: &Image) -> Vec<f64> {
        self.embed_batch(&[image]).remove(0)
    }

    /// Argmax class per image (ties → lower index).
    pub fn classify_batch(&self, images: &[&Image]) -> Vec<usize> {
        self.embed_batch(images)
            .iter()
            .map(|z| crate::forest::argmax(z))
            .collect()
    }

    /// Loss and gradients for one batch. Gradients are accumulated into the
    /// parameters after zeroing.
    pub fn loss_and_grad(&mut self, x: &Tensor<T>, labels: &[usize]) -> f64 {
        self.zero_grad();
        let z = self.logits_train(x);
        let (loss, dz) = nn::softmax_cross_entropy(&z, labels);
        self.backward(&dz);
        loss
    }

    /// One pass over the samples with fresh augmentations. Sample order and
    /// augmentation draws come from streams keyed by (seed, epoch, index).
    pub fn train_epoch(
        &mut self,
        images: &[&Image],
        labels: &[usize],
        aug: &AugmentParams,
        opt: &mut Sgd<T>,
        epoch: usize,
    ) -> Result<f64> {
        check_training_set(labels, self.num_classes(), images.len())?;
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::key_of("slice-epoch"), epoch as u64]));
        let augmented: Vec<Image> = order
            .iter()
            .map(|&i| {
                if aug.is_identity() {
                    images[i].clone()
                } else {
                    let mut r = rng::stream(seed, &[rng::key_of("slice-aug"), epoch as u64, i as u64]);
                    augment_image(images[i], aug, &mut r)
                }
            })
            .collect();
        let mut total = 0.0;
        // A batch of one cannot be batch-normalized; fold a trailing
        // singleton into the previous batch.
        let bs = self.config.batch_size;
        let mut start = 0;
        while start < order.len() {
            let mut end = (start + bs).min(order.len());
            if order.len() - end == 1 {
                end = order.len();
            }
            let batch: Vec<&Image> = augmented[start..end].iter().collect();
            let y: Vec<usize> = order[start..end].iter().map(|&i| labels[i]).collect();
            let x = self.batch_tensor(&batch);
            let loss = self.loss_and_grad(&x, &y);
            opt.step(self);
            total += loss * (end - start) as f64;
            start = end;
        }
        self.trained = true;
        Ok(total / order.len() as f64)
    }

    pub fn to_tensors(&mut self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| {
            out.push(NamedTensor {
                name: name.to_string(),
                shape: p.shape.clone(),
                values: p.value.iter().map(|v| v.f64() as f32).collect(),
            })
        });
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, v) in [("running_mean", &b.bn.running_mean), ("running_var", &b.bn.running_var)] {
                out.push(NamedTensor {
                    name: format!("block{i}.bn.{suffix}"),
                    shape: vec![v.len()],
                    values: v.iter().map(|x| x.f64() as f32).collect(),
                });
            }
        }
        out
    }

    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let find = |name: &str, len: usize| -> Result<Vec<T>> {
            let t = tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::invalid(format!("weight tensor `{name}` missing")))?;
            if t.values.len() != len {
                return Err(Error::DimensionMismatch { expected: len, got: t.values.len() });
            }
            Ok(t.values.iter().map(|&v| T::of(v as f64)).collect())
        };
        let mut err = None;
        self.visit_params(&mut |name, p| match find(name, p.value.len()) {
            Ok(v) => p.value = v,
            Err(e) => err = err.take().or(Some(e)),
        });
        if let Some(e) = err {
            return Err(e);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.bn.running_mean = find(&format!("block{i}.bn.running_mean"), b.bn.channels)?;
            b.bn.running_var = find(&format!("block{i}.bn.running_var"), b.bn.channels)?;
        }
        Ok(())
    }
}

impl<T: Real> HasParams<T> for SliceNet<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit_params(&format!("block{i}.conv"), f);
            b.bn.visit_params(&format!("block{i}.bn"), f);
        }
        self.fc1.visit_params("fc1", f);
        self.fc2.visit_params("fc2", f);
    }
}

fn check_training_set(labels: &[usize], m: usize, n_images: usize) -> Result<()> {
    if labels.len() != n_images {
        return Err(Error::DimensionMismatch { expected: n_images, got: labels.len() });
    }
    if labels.len() < 2 {
        return Err(Error::invalid("slice grader needs at least two training samples"));
    }
    let mut seen = vec![false; m];
    for &l in labels {
        if l >= m {
            return Err(Error::invalid(format!("slice label {l} outside 0..{m}")));
        }
        seen[l] = true;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::invalid(format!("slice class {c} is absent from the training set")));
    }
    Ok(())
}

/// Trains for `cfg.epochs` epochs; returns the per-epoch mean loss.
pub fn train_slice_grader(
    g: &mut SliceCnn,
    images: &[&Image],
    labels: &[usize],
    aug: &AugmentParams,
) -> Result<Vec<f64>> {
    let mut opt = Sgd::new(g.config.learning_rate, g.config.momentum);
    (0..g.config.epochs)
        .map(|e| g.train_epoch(images, labels, aug, &mut opt, e))
        .collect()
}

const WEIGHT_KIND: &str = "slice-cnn";

pub fn save_slice_cnn(g: &mut SliceCnn, path: &Path) -> Result<()> {
    let cfg = serde_json::json!({ "config": g.config, "trained": g.trained });
    nn::write_weights(path, WEIGHT_KIND, cfg, &g.to_tensors())
}

pub fn load_slice_cnn(path: &Path) -> Result<SliceCnn> {
    let (manifest, tensors) = nn::read_weights(path)?;
    if manifest.kind != WEIGHT_KIND {
        return Err(Error::format(path, format!("expected {WEIGHT_KIND} weights, found {}", manifest.kind)));
    }
    let cfg: CnnConfig = serde_json::from_value(manifest.config["config"].clone())
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut g = SliceCnn::new(&cfg)?;
    g.load_tensors(&tensors)?;
    g.trained = manifest.config["trained"].as_bool().unwrap_or(false);
    Ok(g)
}
