//! Small strided-convolution autoencoder used as the SMOTE feature space.
//!
//! Images are resized to `work_size` (a multiple of 8) before encoding. The
//! encoder halves the resolution three times and projects to `latent_dim`;
//! the decoder mirrors it with nearest-neighbour upsampling. Decoded images
//! are resized back to the classifier input size.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ResampleError;
use crate::models::layers::{Builder, Conv, Linear, PROJ_STD};
use crate::preprocess::resize;
use crate::{seed, Image};
use remission_nn::optim::{clip_grad_norm, Adam, Optimizer};
use remission_nn::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub latent_dim: usize,
    pub work_size: usize,
    pub channels: [usize; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Training fails with `NonConvergence` unless the best epoch's MSE is
    /// at most this fraction of the MSE at initialization.
    pub max_mse_ratio: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self { latent_dim: 32, work_size: 32, channels: [16, 32, 32], epochs: 30, batch_size: 16, lr: 2e-3, max_mse_ratio: 0.95, seed: 0 }
    }
}

#[derive(Debug, Clone)]
struct Layers {
    enc: [Conv; 3],
    to_latent: Linear,
    from_latent: Linear,
    dec: [Conv; 3],
}

#[derive(Debug, Clone)]
pub struct AutoencoderModel {
    pub config: AutoencoderConfig,
    pub params: ParamStore<f32>,
    /// Edge length of decoded images.
    pub output_size: usize,
    /// Mean reconstruction MSE before training and after each epoch.
    pub initial_mse: f64,
    pub epoch_mse: Vec<f64>,
    pub best_epoch: Option<usize>,
    layers: Layers,
    trained: bool,
}

impl AutoencoderModel {
    pub fn new(config: AutoencoderConfig, output_size: usize) -> Result<Self, ResampleError> {
        let s = config.work_size;
        if s < 8 || s % 8 != 0 || config.latent_dim == 0 || config.channels.contains(&0) {
            return Err(ResampleError::Shape(format!("work_size {s} must be a positive multiple of 8 and widths positive")));
        }
        let mut params = ParamStore::new();
        let mut rng = seed::rng_for(config.seed, "autoencoder-init");
        let mut b = Builder { store: &mut params, rng: &mut rng };
        let [c1, c2, c3] = config.channels;
        let flat = (s / 8) * (s / 8) * c3;
        let layers = Layers {
            enc: [b.conv("enc0", 3, 3, c1, true), b.conv("enc1", 3, c1, c2, true), b.conv("enc2", 3, c2, c3, true)],
            to_latent: b.linear("to_latent", flat, config.latent_dim, Some(PROJ_STD)),
            from_latent: b.linear("from_latent", config.latent_dim, flat, None),
            dec: [b.conv("dec0", 3, c3, c2, true), b.conv("dec1", 3, c2, c1, true), b.conv("dec2", 3, c1, 3, true)],
        };
        Ok(Self { config, params, output_size, initial_mse: f64::NAN, epoch_mse: Vec::new(), best_epoch: None, layers, trained: false })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn encode_graph(&self, g: &mut Graph<f32>, x: Var) -> Var {
        let mut h = x;
        for c in &self.layers.enc {
            h = c.apply(g, h, 2, 1);
            h = g.relu(h);
        }
        let b = g.shape(h)[0];
        let flat = g.shape(h)[1..].iter().product::<usize>();
        let h = g.reshape(h, &[b, flat]);
        self.layers.to_latent.apply(g, h)
    }

    fn decode_graph(&self, g: &mut Graph<f32>, z: Var) -> Var {
        let s = self.config.work_size / 8;
        let b = g.shape(z)[0];
        let h = self.layers.from_latent.apply(g, z);
        let h = g.relu(h);
        let mut h = g.reshape(h, &[b, s, s, self.config.channels[2]]);
        for (i, c) in self.layers.dec.iter().enumerate() {
            h = g.upsample2(h);
            h = c.apply(g, h, 1, 1);
            if i < 2 {
                h = g.relu(h);
            }
        }
        h
    }

    /// Stack images at the working resolution.
    fn batch(&self, images: &[&Image]) -> Tensor<f32> {
        let s = self.config.work_size;
        let resized: Vec<Image> = images.iter().map(|i| resize(i, s)).collect();
        let refs: Vec<&Image> = resized.iter().collect();
        Tensor::stack(&refs).expect("uniform shapes after resize")
    }

    /// Features `[B, latent_dim]`.
    pub fn encode(&self, images: &[&Image]) -> Tensor<f32> {
        let mut g = Graph::new(&self.params);
        let x = g.input(self.batch(images));
        let z = self.encode_graph(&mut g, x);
        g.value(z).clone()
    }

    /// Decode `[B, latent_dim]` features to images of `output_size`.
    pub fn decode(&self, features: &Tensor<f32>) -> Vec<Image> {
        let mut g = Graph::new(&self.params);
        let z = g.input(features.clone());
        let y = self.decode_graph(&mut g, z);
        let out = g.value(y);
        let b = out.shape()[0];
        (0..b)
            .map(|i| {
                let s = out.slice_outer(i, i + 1);
                let ws = self.config.work_size;
                let img = s.reshape([ws, ws, 3]).expect("decoder output shape");
                resize(&img, self.output_size)
            })
            .collect()
    }

    /// Mean squared reconstruction error at working resolution.
    pub fn reconstruction_mse(&self, targets: &Tensor<f32>) -> f64 {
        let mut total = 0.0;
        let n = targets.shape()[0];
        let bs = self.config.batch_size.max(1);
        for start in (0..n).step_by(bs) {
            let end = (start + bs).min(n);
            let t = targets.slice_outer(start, end);
            let mut g = Graph::new(&self.params);
            let x = g.input(t.clone());
            let z = self.encode_graph(&mut g, x);
            let y = self.decode_graph(&mut g, z);
            let l = g.mse(y, &t);
            total += g.value(l).item() as f64 * (end - start) as f64;
        }
        total / n as f64
    }
}

/// Fit the autoencoder on `images`. The returned model holds the weights of
/// the epoch with the lowest reconstruction MSE.
pub fn train_autoencoder(images: &[&Image], config: AutoencoderConfig, output_size: usize) -> Result<AutoencoderModel, ResampleError> {
    if images.len() < 2 {
        return Err(ResampleError::TooFewImages(images.len()));
    }
    let mut model = AutoencoderModel::new(config, output_size)?;
    let cfg = model.config.clone();
    let data = model.batch(images);
    let n = images.len();
    model.initial_mse = model.reconstruction_mse(&data);
    let mut best = (model.initial_mse, model.params.clone());
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let per = data.numel() / n;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng_for(cfg.seed, &format!("autoencoder-epoch-{epoch}")));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut buf = Vec::with_capacity(chunk.len() * per);
            for &i in chunk {
                buf.extend_from_slice(&data.data()[i * per..(i + 1) * per]);
            }
            let mut shape = data.shape().to_vec();
            shape[0] = chunk.len();
            let t = Tensor::from_vec(shape, buf).expect("batch shape");
            let mut grads = {
                let mut g = Graph::new(&model.params);
                let x = g.input(t.clone());
                let z = model.encode_graph(&mut g, x);
                let y = model.decode_graph(&mut g, z);
                let l = g.mse(y, &t);
                g.backward(l).param_grads(&model.params)
            };
            clip_grad_norm(&mut grads, 10.0);
            opt.step(&mut model.params, &grads);
        }
        let mse = model.reconstruction_mse(&data);
        log::debug!("autoencoder epoch {epoch}: mse {mse:.6}");
        model.epoch_mse.push(mse);
        if mse < best.0 {
            best = (mse, model.params.clone());
            model.best_epoch = Some(epoch);
        }
    }
    let required = cfg.max_mse_ratio * model.initial_mse;
    if !(best.0 <= required) {
        return Err(ResampleError::NonConvergence { initial: model.initial_mse, best: best.0, required });
    }
    model.params = best.1;
    model.trained = true;
    Ok(model)
}

impl AutoencoderModel {
    /// MSE of the weights the model now holds.
    pub fn best_mse(&self) -> f64 {
        self.best_epoch.map_or(self.initial_mse, |e| self.epoch_mse[e])
    }
}
