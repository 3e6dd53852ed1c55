//! The three fader components: convolutional encoder, transposed-conv
//! decoder conditioned on the site one-hot, and the latent MLP discriminator.

use ndarray::{concatenate, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::nn::conv::{Conv3d, ConvCache, ConvSpec, ConvTCache, ConvTranspose3d};
use crate::nn::norm::{BatchNorm, BnCache, Dropout};
use crate::nn::{leaky_relu, leaky_relu_backward, linear::Linear, linear::LinearCache, Param};

use super::FaderArch;

pub(crate) const CONV_SPEC: ConvSpec = ConvSpec {
    kernel: 4,
    stride: 2,
    pad: 1,
};

/// One encoder stage: strided conv, batch norm (absent on the first stage),
/// leaky ReLU.
pub(crate) struct EncBlock {
    pub conv: Conv3d,
    pub bn: Option<BatchNorm>,
}

pub(crate) struct EncBlockCache {
    conv: ConvCache,
    bn: Option<BnCache>,
    pre_act: Array2<f64>,
}

pub(crate) struct Encoder {
    pub blocks: Vec<EncBlock>,
    pub side: usize,
    pub slope: f64,
}

pub(crate) struct EncCaches {
    blocks: Vec<EncBlockCache>,
}

impl Encoder {
    pub fn new(arch: &FaderArch, rng: &mut ChaCha8Rng) -> Self {
        let ladder = arch.channel_ladder();
        let mut blocks = Vec::with_capacity(arch.n_blocks);
        let mut in_ch = 1;
        for (i, &out_ch) in ladder.iter().enumerate() {
            let conv = Conv3d::new(&format!("enc.{i}.conv"), in_ch, out_ch, CONV_SPEC, rng);
            let bn = (i > 0).then(|| BatchNorm::new(&format!("enc.{i}.bn"), out_ch));
            blocks.push(EncBlock { conv, bn });
            in_ch = out_ch;
        }
        Encoder {
            blocks,
            side: arch.side,
            slope: arch.leaky_slope,
        }
    }

    /// `x`: `[n * side^3, 1]` -> latent `[n, latent_dim]`.
    pub fn forward_train(
        &mut self,
        x: &Array2<f64>,
        update_running: bool,
    ) -> (Array2<f64>, EncCaches) {
        let mut cur = x.clone();
        let mut side = self.side;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (conv_out, conv_cache) = block.conv.forward(&cur, side);
            side = CONV_SPEC.out_side(side);
            let (pre_act, bn_cache) = match &mut block.bn {
                Some(bn) => {
                    let (y, c) = bn.forward_train(&conv_out, update_running);
                    (y, Some(c))
                }
                None => (conv_out, None),
            };
            cur = leaky_relu(&pre_act, self.slope);
            caches.push(EncBlockCache {
                conv: conv_cache,
                bn: bn_cache,
                pre_act,
            });
        }
        (cur, EncCaches { blocks: caches })
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut cur = x.clone();
        let mut side = self.side;
        for block in &self.blocks {
            let (conv_out, _) = block.conv.forward(&cur, side);
            side = CONV_SPEC.out_side(side);
            let pre_act = match &block.bn {
                Some(bn) => bn.forward_eval(&conv_out),
                None => conv_out,
            };
            cur = leaky_relu(&pre_act, self.slope);
        }
        cur
    }

    /// Backward from the latent gradient; accumulates parameter gradients.
    pub fn backward(&mut self, dlatent: &Array2<f64>, caches: &EncCaches) {
        let mut d = dlatent.clone();
        for (block, cache) in self.blocks.iter_mut().zip(caches.blocks.iter()).rev() {
            d = leaky_relu_backward(&d, &cache.pre_act, self.slope);
            if let (Some(bn), Some(bn_cache)) = (&mut block.bn, &cache.bn) {
                d = bn.backward(&d, bn_cache);
            }
            d = block.conv.backward(&d, &cache.conv);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv.w);
            out.push(&mut b.conv.b);
            if let Some(bn) = &mut b.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.conv.w);
            out.push(&b.conv.b);
            if let Some(bn) = &b.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        self.blocks.iter_mut().filter_map(|b| b.bn.as_mut()).collect()
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        self.blocks.iter().filter_map(|b| b.bn.as_ref()).collect()
    }
}

/// One decoder stage: transposed conv, then batch norm + plain ReLU on all
/// but the last stage; the last stage is linear so raw intensities can be
/// reproduced.
pub(crate) struct DecBlock {
    pub convt: ConvTranspose3d,
    pub bn: Option<BatchNorm>,
}

pub(crate) struct DecBlockCache {
    convt: ConvTCache,
    bn: Option<BnCache>,
    pre_act: Option<Array2<f64>>,
}

pub(crate) struct Decoder {
    pub blocks: Vec<DecBlock>,
    pub latent_dim: usize,
    pub n_sites: usize,
}

pub(crate) struct DecCaches {
    blocks: Vec<DecBlockCache>,
}

impl Decoder {
    pub fn new(arch: &FaderArch, rng: &mut ChaCha8Rng) -> Self {
        let ladder = arch.channel_ladder();
        let n = arch.n_blocks;
        let mut blocks = Vec::with_capacity(n);
        let mut in_ch = arch.latent_dim() + arch.n_sites;
        for i in 0..n {
            let out_ch = if i == n - 1 { 1 } else { ladder[n - 2 - i] };
            let convt =
                ConvTranspose3d::new(&format!("dec.{i}.convt"), in_ch, out_ch, CONV_SPEC, rng);
            let bn = (i != n - 1).then(|| BatchNorm::new(&format!("dec.{i}.bn"), out_ch));
            blocks.push(DecBlock { convt, bn });
            in_ch = out_ch;
        }
        Decoder {
            blocks,
            latent_dim: arch.latent_dim(),
            n_sites: arch.n_sites,
        }
    }

    fn stack_input(&self, z: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
        concatenate(Axis(1), &[z.view(), y.view()]).expect("z/y concat")
    }

    /// `z`: `[n, latent]`, `y`: one-hot `[n, n_sites]` ->
    /// reconstruction `[n * side^3, 1]`.
    pub fn forward_train(
        &mut self,
        z: &Array2<f64>,
        y: &Array2<f64>,
        update_running: bool,
    ) -> (Array2<f64>, DecCaches) {
        let mut cur = self.stack_input(z, y);
        let mut side = 1usize;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let (convt_out, convt_cache) = block.convt.forward(&cur, side);
            side *= 2;
            if i == last {
                cur = convt_out;
                caches.push(DecBlockCache {
                    convt: convt_cache,
                    bn: None,
                    pre_act: None,
                });
            } else {
                let bn = block.bn.as_mut().expect("interior decoder bn");
                let (pre_act, bn_cache) = bn.forward_train(&convt_out, update_running);
                cur = pre_act.mapv(|v| v.max(0.0));
                caches.push(DecBlockCache {
                    convt: convt_cache,
                    bn: Some(bn_cache),
                    pre_act: Some(pre_act),
                });
            }
        }
        (cur, DecCaches { blocks: caches })
    }

    pub fn forward_eval(&self, z: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
        let mut cur = self.stack_input(z, y);
        let mut side = 1usize;
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            let (convt_out, _) = block.convt.forward(&cur, side);
            side *= 2;
            cur = if i == last {
                convt_out
            } else {
                let bn = block.bn.as_ref().expect("interior decoder bn");
                bn.forward_eval(&convt_out).mapv(|v| v.max(0.0))
            };
        }
        cur
    }

    /// Backward from the reconstruction gradient; returns the latent
    /// gradient (the one-hot part is discarded).
    pub fn backward(&mut self, dout: &Array2<f64>, caches: &DecCaches) -> Array2<f64> {
        let mut d = dout.clone();
        for (block, cache) in self.blocks.iter_mut().zip(caches.blocks.iter()).rev() {
            if let (Some(bn), Some(bn_cache), Some(pre_act)) =
                (&mut block.bn, &cache.bn, &cache.pre_act)
            {
                d.zip_mut_with(pre_act, |g, &p| {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                });
                d = bn.backward(&d, bn_cache);
            }
            d = block.convt.backward(&d, &cache.convt);
        }
        d.slice(ndarray::s![.., ..self.latent_dim]).to_owned()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.convt.w);
            out.push(&mut b.convt.b);
            if let Some(bn) = &mut b.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.convt.w);
            out.push(&b.convt.b);
            if let Some(bn) = &b.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        self.blocks.iter_mut().filter_map(|b| b.bn.as_mut()).collect()
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        self.blocks.iter().filter_map(|b| b.bn.as_ref()).collect()
    }
}

/// Latent site discriminator: fully connected stack with batch norm, ReLU,
/// and dropout after every hidden layer, then a linear head to site logits.
pub(crate) struct Discriminator {
    pub layers: Vec<DiscLayer>,
    pub head: Linear,
    pub dropout: Dropout,
}

pub(crate) struct DiscLayer {
    pub linear: Linear,
    pub bn: BatchNorm,
}

pub struct DiscMasks {
    pub per_layer: Vec<Vec<f64>>,
}

pub(crate) struct DiscCaches {
    layers: Vec<(LinearCache, BnCache, Array2<f64>)>,
    head: LinearCache,
    masks_used: bool,
}

impl Discriminator {
    pub fn new(arch: &FaderArch, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut in_dim = arch.latent_dim();
        for (i, &w) in arch.disc_widths.iter().enumerate() {
            layers.push(DiscLayer {
                linear: Linear::new(&format!("disc.{i}.fc"), in_dim, w, rng),
                bn: BatchNorm::new(&format!("disc.{i}.bn"), w),
            });
            in_dim = w;
        }
        Discriminator {
            layers,
            head: Linear::new("disc.head", in_dim, arch.n_sites, rng),
            dropout: Dropout::new(arch.disc_dropout),
        }
    }

    pub fn sample_masks(&self, rows: usize, rng: &mut ChaCha8Rng) -> DiscMasks {
        DiscMasks {
            per_layer: self
                .layers
                .iter()
                .map(|l| self.dropout.sample_mask(rows * l.linear.out_features, rng))
                .collect(),
        }
    }

    /// Identity masks: dropout disabled while everything else stays in
    /// training mode. Used by deterministic loss evaluation.
    pub fn identity_masks(&self, rows: usize) -> DiscMasks {
        DiscMasks {
            per_layer: self
                .layers
                .iter()
                .map(|l| vec![1.0; rows * l.linear.out_features])
                .collect(),
        }
    }

    pub fn forward_train(
        &mut self,
        z: &Array2<f64>,
        masks: &DiscMasks,
        update_running: bool,
    ) -> (Array2<f64>, DiscCaches) {
        let mut cur = z.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (layer, mask) in self.layers.iter_mut().zip(masks.per_layer.iter()) {
            let (lin_out, lin_cache) = layer.linear.forward(&cur);
            let (pre_act, bn_cache) = layer.bn.forward_train(&lin_out, update_running);
            let act = pre_act.mapv(|v| v.max(0.0));
            cur = self.dropout.apply(&act, mask);
            caches.push((lin_cache, bn_cache, pre_act));
        }
        let (logits, head_cache) = self.head.forward(&cur);
        (
            logits,
            DiscCaches {
                layers: caches,
                head: head_cache,
                masks_used: true,
            },
        )
    }

    pub fn forward_eval(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut cur = z.clone();
        for layer in &self.layers {
            let lin_out = layer.linear.forward_eval(&cur);
            cur = layer.bn.forward_eval(&lin_out).mapv(|v| v.max(0.0));
        }
        self.head.forward_eval(&cur)
    }

    /// Backward to the latent, accumulating discriminator parameter
    /// gradients (the discriminator's own training step).
    pub fn backward(
        &mut self,
        dlogits: &Array2<f64>,
        caches: &DiscCaches,
        masks: &DiscMasks,
    ) -> Array2<f64> {
        assert!(caches.masks_used);
        let mut d = self.head.backward(dlogits, &caches.head);
        for ((layer, cache), mask) in self
            .layers
            .iter_mut()
            .zip(caches.layers.iter())
            .rev()
            .zip(masks.per_layer.iter().rev())
        {
            let (lin_cache, bn_cache, pre_act) = cache;
            d = self.dropout.backward(&d, mask);
            d.zip_mut_with(pre_act, |g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            d = layer.bn.backward(&d, bn_cache);
            d = layer.linear.backward(&d, lin_cache);
        }
        d
    }

    /// Backward to the latent with the discriminator treated as a frozen
    /// function (the encoder's adversarial step); no parameter gradients.
    pub fn backward_frozen(
        &self,
        dlogits: &Array2<f64>,
        caches: &DiscCaches,
        masks: &DiscMasks,
    ) -> Array2<f64> {
        assert!(caches.masks_used);
        let mut d = self.head.backward_data(dlogits);
        for ((layer, cache), mask) in self
            .layers
            .iter()
            .zip(caches.layers.iter())
            .rev()
            .zip(masks.per_layer.iter().rev())
        {
            let (_, bn_cache, pre_act) = cache;
            d = self.dropout.backward(&d, mask);
            d.zip_mut_with(pre_act, |g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            d = layer.bn.backward_data(&d, bn_cache);
            d = layer.linear.backward_data(&d);
        }
        d
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.linear.w);
            out.push(&mut l.linear.b);
            out.push(&mut l.bn.gamma);
            out.push(&mut l.bn.beta);
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.linear.w);
            out.push(&l.linear.b);
            out.push(&l.bn.gamma);
            out.push(&l.bn.beta);
        }
        out.push(&self.head.w);
        out.push(&self.head.b);
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        self.layers.iter_mut().map(|l| &mut l.bn).collect()
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        self.layers.iter().map(|l| &l.bn).collect()
    }
}
