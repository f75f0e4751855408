//! Reference voxel classifier: a three-level 2-D encoder–decoder with skip
//! connections over (previous, current, next) slice triplets.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grader::augment::{apply_affine, elastic_field, warp, AugmentParams};
use crate::image::Image;
use crate::nn::{
    self, sigmoid, Adam, Concat, Conv2d, HasParams, MaxPool2, NamedTensor, Param, Real, Relu,
    Tensor, Upsample2,
};
use crate::rng;

use super::{normalize_hu, SliceTriplet, VoxelClassifier};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub learning_rate: f64,
    /// Weight of positive pixels in the binary cross-entropy.
    pub pos_weight: f64,
    pub patch_size: usize,
    pub batch_size: usize,
    pub patches_per_epoch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 8,
            learning_rate: 2e-3,
            pos_weight: 3.0,
            patch_size: 96,
            batch_size: 8,
            patches_per_epoch: 256,
            epochs: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UNet<T> {
    pub config: UNetConfig,
    pub trained: bool,
    enc1: Conv2d<T>,
    enc1_relu: Relu,
    pool1: MaxPool2,
    enc2: Conv2d<T>,
    enc2_relu: Relu,
    pool2: MaxPool2,
    bottom: Conv2d<T>,
    bottom_relu: Relu,
    reduce2: Conv2d<T>,
    up2: Upsample2,
    dec2: Conv2d<T>,
    dec2_relu: Relu,
    reduce1: Conv2d<T>,
    up1: Upsample2,
    dec1: Conv2d<T>,
    dec1_relu: Relu,
    head: Conv2d<T>,
}

/// A training patch: three normalized input channels and a 0/1 target.
#[derive(Debug, Clone)]
pub struct UNetPatch {
    pub channels: [Image; 3],
    pub target: Image,
}

impl<T: Real> UNet<T> {
    pub fn new(cfg: &UNetConfig) -> Result<Self> {
        let b = cfg.base_channels;
        if b == 0 || cfg.patch_size < 8 || cfg.batch_size == 0 {
            return Err(Error::invalid("U-Net channels, patch size and batch size must be positive"));
        }
        let mut r = rng::stream(cfg.seed, &[rng::key_of("unet-init")]);
        Ok(UNet {
            config: cfg.clone(),
            trained: false,
            enc1: Conv2d::new(3, b, 3, &mut r),
            enc1_relu: Relu::default(),
            pool1: MaxPool2::default(),
            enc2: Conv2d::new(b, 2 * b, 3, &mut r),
            enc2_relu: Relu::default(),
            pool2: MaxPool2::default(),
            bottom: Conv2d::new(2 * b, 4 * b, 3, &mut r),
            bottom_relu: Relu::default(),
            reduce2: Conv2d::new(4 * b, 2 * b, 1, &mut r),
            up2: Upsample2::default(),
            dec2: Conv2d::new(4 * b, 2 * b, 3, &mut r),
            dec2_relu: Relu::default(),
            reduce1: Conv2d::new(2 * b, b, 1, &mut r),
            up1: Upsample2::default(),
            dec1: Conv2d::new(2 * b, b, 3, &mut r),
            dec1_relu: Relu::default(),
            head: Conv2d::new(b, 1, 1, &mut r),
        })
    }

    /// Per-pixel logits `[n, 1, h, w]` in inference mode.
    pub fn logits(&self, x: &Tensor<T>) -> Tensor<T> {
        let [_, _, h, w] = x.shape;
        let e1 = Relu::forward(&self.enc1.forward(x));
        let e2 = Relu::forward(&self.enc2.forward(&MaxPool2::forward(&e1)));
        let bt = Relu::forward(&self.bottom.forward(&MaxPool2::forward(&e2)));
        let u2 = Upsample2::forward(&self.reduce2.forward(&bt), h / 2, w / 2);
        let d2 = Relu::forward(&self.dec2.forward(&Concat::forward(&u2, &e2)));
        let u1 = Upsample2::forward(&self.reduce1.forward(&d2), h, w);
        let d1 = Relu::forward(&self.dec1.forward(&Concat::forward(&u1, &e1)));
        self.head.forward(&d1)
    }

    pub fn logits_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let [_, _, h, w] = x.shape;
        let e1 = self.enc1_relu.forward_train(&self.enc1.forward_train(x));
        let p1 = self.pool1.forward_train(&e1);
        let e2 = self.enc2_relu.forward_train(&self.enc2.forward_train(&p1));
        let p2 = self.pool2.forward_train(&e2);
        let bt = self.bottom_relu.forward_train(&self.bottom.forward_train(&p2));
        let r2 = self.reduce2.forward_train(&bt);
        let u2 = self.up2.forward_train(&r2, h / 2, w / 2);
        let d2 = self.dec2_relu.forward_train(&self.dec2.forward_train(&Concat::forward(&u2, &e2)));
        let r1 = self.reduce1.forward_train(&d2);
        let u1 = self.up1.forward_train(&r1, h, w);
        let d1 = self.dec1_relu.forward_train(&self.dec1.forward_train(&Concat::forward(&u1, &e1)));
        self.head.forward_train(&d1)
    }

    pub fn backward(&mut self, dlogits: &Tensor<T>) {
        let b = self.config.base_channels;
        let g = self.head.backward(dlogits);
        let g = self.dec1.backward(&self.dec1_relu.backward(&g));
        let (g_u1, mut g_e1) = Concat::backward(&g, b);
        let g = self.reduce1.backward(&self.up1.backward(&g_u1));
        let g = self.dec2.backward(&self.dec2_relu.backward(&g));
        let (g_u2, mut g_e2) = Concat::backward(&g, 2 * b);
        let g = self.reduce2.backward(&self.up2.backward(&g_u2));
        let g = self.bottom.backward(&self.bottom_relu.backward(&g));
        let g = self.pool2.backward(&g);
        add_into(&mut g_e2, &g);
        let g = self.enc2.backward(&self.enc2_relu.backward(&g_e2));
        let g = self.pool1.backward(&g);
        add_into(&mut g_e1, &g);
        self.enc1.backward(&self.enc1_relu.backward(&g_e1));
    }

    pub fn predict_image(&self, channels: [&Image; 3]) -> Vec<f32> {
        let (rows, cols) = (channels[1].rows, channels[1].cols);
        let mut data = Vec::with_capacity(3 * rows * cols);
        for c in channels {
            data.extend(c.data.iter().map(|&v| T::of(v as f64)));
        }
        let x = Tensor::from_vec([1, 3, rows, cols], data);
        self.logits(&x)
            .data
            .iter()
            .map(|&z| sigmoid(z).f64() as f32)
            .collect()
    }

    fn batch(patches: &[UNetPatch]) -> (Tensor<T>, Vec<T>) {
        let p = &patches[0].target;
        let (rows, cols) = (p.rows, p.cols);
        let mut x = Vec::with_capacity(patches.len() * 3 * rows * cols);
        let mut y = Vec::with_capacity(patches.len() * rows * cols);
        for patch in patches {
            for c in &patch.channels {
                x.extend(c.data.iter().map(|&v| T::of(v as f64)));
            }
            y.extend(patch.target.data.iter().map(|&v| T::of(v as f64)));
        }
        (Tensor::from_vec([patches.len(), 3, rows, cols], x), y)
    }

    pub fn loss_and_grad(&mut self, patches: &[UNetPatch]) -> f64 {
        self.zero_grad();
        let (x, y) = Self::batch(patches);
        let z = self.logits_train(&x);
        let (loss, dz) = nn::weighted_bce_with_logits(&z, &y, self.config.pos_weight);
        self.backward(&dz);
        loss
    }

    /// One epoch over `patches` with augmentation drawn per (seed, epoch, index).
    pub fn train_epoch(
        &mut self,
        patches: &[UNetPatch],
        aug: &AugmentParams,
        opt: &mut Adam<T>,
        epoch: usize,
    ) -> f64 {
        let seed = self.config.seed;
        let augmented: Vec<UNetPatch> = patches
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut r = rng::stream(seed, &[rng::key_of("unet-aug"), epoch as u64, i as u64]);
                augment_patch(p, aug, &mut r)
            })
            .collect();
        let mut total = 0.0;
        for chunk in augmented.chunks(self.config.batch_size) {
            total += self.loss_and_grad(chunk) * chunk.len() as f64;
            opt.step(self);
        }
        self.trained = true;
        total / augmented.len().max(1) as f64
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
        out
    }

    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let mut err = None;
        self.visit_params(&mut |name, p| {
            match tensors.iter().find(|t| t.name == name) {
                Some(t) if t.values.len() == p.value.len() => {
                    p.value = t.values.iter().map(|&v| T::of(v as f64)).collect();
                }
                Some(t) => {
                    err.get_or_insert(Error::DimensionMismatch { expected: p.value.len(), got: t.values.len() });
                }
                None => {
                    err.get_or_insert(Error::invalid(format!("weight tensor `{name}` missing")));
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

fn add_into<T: Real>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    for (a, &b) in acc.data.iter_mut().zip(&g.data) {
        *a = *a + b;
    }
}

/// Applies one shared geometric draw (and elastic field) to every channel and
/// the target; the target is re-binarized at 0.5.
pub fn augment_patch(p: &UNetPatch, aug: &AugmentParams, r: &mut impl Rng) -> UNetPatch {
    if aug.is_identity() {
        return p.clone();
    }
    let d = aug.draw(r);
    let field = aug
        .elastic
        .filter(|e| e.alpha != 0.0)
        .map(|e| elastic_field(p.target.rows, p.target.cols, &e, r));
    let tf = |img: &Image| {
        let out = apply_affine(img, &d, aug.fill);
        match &field {
            Some((dx, dy)) => warp(&out, dx, dy),
            None => out,
        }
    };
    let mut target = tf(&p.target);
    target.data.iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
    UNetPatch {
        channels: [tf(&p.channels[0]), tf(&p.channels[1]), tf(&p.channels[2])],
        target,
    }
}

impl<T: Real> HasParams<T> for UNet<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.enc1.visit_params("enc1", f);
        self.enc2.visit_params("enc2", f);
        self.bottom.visit_params("bottom", f);
        self.reduce2.visit_params("reduce2", f);
        self.dec2.visit_params("dec2", f);
        self.reduce1.visit_params("reduce1", f);
        self.dec1.visit_params("dec1", f);
        self.head.visit_params("head", f);
    }
}

pub type UNetClassifier = UNet<f32>;

impl VoxelClassifier for UNetClassifier {
    fn predict(&self, t: &SliceTriplet) -> Result<Vec<f32>> {
        if !self.trained {
            return Err(Error::Untrained("voxel classifier"));
        }
        let img = |s: &[i16]| Image::new(t.rows, t.cols, s.iter().map(|&v| normalize_hu(v)).collect());
        let (p, c, n) = (img(&t.prev), img(&t.cur), img(&t.next));
        Ok(self.predict_image([&p, &c, &n]))
    }
}

const WEIGHT_KIND: &str = "unet";

pub fn save_unet(net: &mut UNetClassifier, path: &Path) -> Result<()> {
    let cfg = serde_json::json!({ "config": net.config, "trained": net.trained });
    nn::write_weights(path, WEIGHT_KIND, cfg, &net.to_tensors())
}

pub fn load_unet(path: &Path) -> Result<UNetClassifier> {
    let (manifest, tensors) = nn::read_weights(path)?;
    if manifest.kind != WEIGHT_KIND {
        return Err(Error::format(path, format!("expected {WEIGHT_KIND} weights, found {}", manifest.kind)));
    }
    let cfg: UNetConfig = serde_json::from_value(manifest.config["config"].clone())
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut net = UNet::new(&cfg)?;
    net.load_tensors(&tensors)?;
    net.trained = manifest.config["trained"].as_bool().unwrap_or(false);
    Ok(net)
}
