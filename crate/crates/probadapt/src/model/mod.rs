//! The probabilistic segmentation network: a UNet backbone fused with a
//! conditional variational autoencoder.
//!
//! A prior encoder (image only) and a posterior encoder (image plus label)
//! each predict a diagonal Gaussian over a low-dimensional latent space.
//! A latent sample is broadcast over the image, concatenated with the UNet
//! features and passed through 1x1 convolutions to produce per-class
//! probabilities. Training samples the posterior; inference samples the
//! prior, which yields diverse segmentation hypotheses.

pub mod nn;

use crate::error::{Error, Result};
use crate::image::{ImagePatch, SegmentationOutput};
use ndarray::{Array1, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use nn::{Conv2d, Linear};

/// Log-variances produced by the encoder heads are clamped into this range
/// before anything exponentiates them.
pub const LOG_VARIANCE_CLAMP: f64 = 20.0;

/// A diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mean: Array1<f64>,
    pub log_variance: Array1<f64>,
}

impl LatentGaussian {
    pub fn new(mean: Array1<f64>, log_variance: Array1<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::InvalidInput("latent dimension must be >= 1".into()));
        }
        if mean.len() != log_variance.len() {
            return Err(Error::shape_mismatch(
                "latent gaussian",
                mean.len(),
                log_variance.len(),
            ));
        }
        if mean.iter().chain(log_variance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent gaussian parameters".into()));
        }
        Ok(Self { mean, log_variance })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            log_variance: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Reparameterized sample `z = mean + exp(log_variance / 2) * eps`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Array1<f64> {
        self.sample_with_eps(rng).0
    }

    /// Sample plus the raw standard-normal draw, kept for the backward pass.
    pub fn sample_with_eps(&self, rng: &mut ChaCha8Rng) -> (Array1<f64>, Array1<f64>) {
        let eps = Array1::from_shape_fn(self.dim(), |_| rng.sample::<f64, _>(StandardNormal));
        let z = &self.mean + &(self.sigma() * &eps);
        (z, eps)
    }

    pub fn sigma(&self) -> Array1<f64> {
        self.log_variance.map(|&lv| (0.5 * lv).exp())
    }
}

/// Gradient with respect to a `LatentGaussian`'s parameters.
#[derive(Debug, Clone)]
pub struct GaussianGrad {
    pub mean: Array1<f64>,
    pub log_variance: Array1<f64>,
}

impl GaussianGrad {
    pub fn zeros(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            log_variance: Array1::zeros(dim),
        }
    }

    pub fn add(&mut self, other: &GaussianGrad) {
        self.mean += &other.mean;
        self.log_variance += &other.log_variance;
    }
}

/// Architecture description; checkpoints must agree on this exactly.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PUNetConfig {
    /// Encoder channel ladder; its length is the network depth.
    pub ladder: Vec<usize>,
    /// Latent space dimension.
    pub latent_dim: usize,
    /// Output classes (1 for binary foreground, 2 for foreground + boundary).
    pub classes: usize,
}

impl Default for PUNetConfig {
    fn default() -> Self {
        Self {
            ladder: vec![8, 16, 32],
            latent_dim: 6,
            classes: 1,
        }
    }
}

impl PUNetConfig {
    /// The paper-scale ladder; far too slow for CPU experiments but available.
    pub fn full_scale() -> Self {
        Self {
            ladder: vec![64, 128, 256, 512],
            latent_dim: 6,
            classes: 1,
        }
    }

    pub fn depth(&self) -> usize {
        self.ladder.len()
    }

    /// Spatial sizes must be divisible by this (one pooling per level).
    pub fn divisor(&self) -> usize {
        1 << (self.depth() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ladder.is_empty() || self.ladder.iter().any(|&c| c == 0) {
            return Err(Error::Config("channel ladder must be non-empty, non-zero".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if self.classes == 0 {
            return Err(Error::Config("classes must be >= 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// building blocks

/// Two 3x3 convolutions, each followed by ReLU.
#[derive(Debug, Clone)]
struct DoubleConv {
    c1: Conv2d,
    c2: Conv2d,
}

struct DoubleConvCache {
    x: Array3<f64>,
    z1: Array3<f64>,
    h1: Array3<f64>,
    z2: Array3<f64>,
}

impl DoubleConv {
    fn kaiming(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            c1: Conv2d::kaiming(out_c, in_c, 3, rng),
            c2: Conv2d::kaiming(out_c, out_c, 3, rng),
        }
    }

    fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let h1 = nn::relu(&self.c1.forward(x));
        nn::relu(&self.c2.forward(&h1))
    }

    fn forward_cached(&self, x: &Array3<f64>) -> (Array3<f64>, DoubleConvCache) {
        let z1 = self.c1.forward(x);
        let h1 = nn::relu(&z1);
        let z2 = self.c2.forward(&h1);
        let out = nn::relu(&z2);
        (
            out,
            DoubleConvCache {
                x: x.clone(),
                z1,
                h1,
                z2,
            },
        )
    }

    fn backward(&self, cache: &DoubleConvCache, gout: &Array3<f64>, grad: &mut DoubleConv) -> Array3<f64> {
        let g2 = nn::relu_backward(&cache.z2, gout);
        let gh1 = self.c2.backward(&cache.h1, &g2, &mut grad.c2);
        let g1 = nn::relu_backward(&cache.z1, &gh1);
        self.c1.backward(&cache.x, &g1, &mut grad.c1)
    }
}

#[derive(Debug, Clone)]
struct UNet {
    enc: Vec<DoubleConv>,
    dec: Vec<DoubleConv>,
}

struct UNetCache {
    enc: Vec<DoubleConvCache>,
    pool_idx: Vec<Array3<u8>>,
    skips: Vec<Array3<f64>>,
    bottom: DoubleConvCache,
    /// Decoder caches from coarsest to finest level.
    dec: Vec<DoubleConvCache>,
}

impl UNet {
    fn kaiming(in_c: usize, ladder: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let depth = ladder.len();
        let mut enc = Vec::with_capacity(depth);
        let mut prev = in_c;
        for &c in ladder {
            enc.push(DoubleConv::kaiming(prev, c, rng));
            prev = c;
        }
        // dec[i] consumes upsampled ladder[i+1] features concatenated with the
        // level-i skip and produces ladder[i] channels.
        let mut dec = Vec::with_capacity(depth.saturating_sub(1));
        for i in 0..depth.saturating_sub(1) {
            dec.push(DoubleConv::kaiming(ladder[i + 1] + ladder[i], ladder[i], rng));
        }
        Self { enc, dec }
    }

    fn forward_cached(&self, x: &Array3<f64>) -> (Array3<f64>, UNetCache) {
        let depth = self.enc.len();
        let mut enc_caches = Vec::with_capacity(depth - 1);
        let mut pool_idx = Vec::with_capacity(depth - 1);
        let mut skips = Vec::with_capacity(depth - 1);
        let mut h = x.clone();
        for block in &self.enc[..depth - 1] {
            let (out, cache) = block.forward_cached(&h);
            let (pooled, idx) = nn::max_pool2(&out);
            skips.push(out);
            enc_caches.push(cache);
            pool_idx.push(idx);
            h = pooled;
        }
        let (mut h, bottom) = self.enc[depth - 1].forward_cached(&h);
        let mut dec_caches = Vec::with_capacity(depth - 1);
        for i in (0..depth - 1).rev() {
            let up = nn::upsample2(&h);
            let cat = nn::concat_channels(&up, &skips[i]);
            let (out, cache) = self.dec[i].forward_cached(&cat);
            dec_caches.push(cache);
            h = out;
        }
        (
            h,
            UNetCache {
                enc: enc_caches,
                pool_idx,
                skips,
                bottom,
                dec: dec_caches,
            },
        )
    }

    fn backward(&self, cache: &UNetCache, gout: &Array3<f64>, grad: &mut UNet) {
        let depth = self.enc.len();
        let mut g = gout.clone();
        let mut skip_grads: Vec<Option<Array3<f64>>> = vec![None; depth - 1];
        // decoder caches were pushed coarsest-first, so level i lives at
        // cache.dec[depth - 2 - i]
        for level in 0..depth - 1 {
            let dc = &cache.dec[depth - 2 - level];
            let g_cat = self.dec[level].backward(dc, &g, &mut grad.dec[level]);
            let up_channels = g_cat.dim().0 - cache.skips[level].dim().0;
            let (g_up, g_skip) = nn::split_channels(&g_cat, up_channels);
            skip_grads[level] = Some(g_skip);
            g = nn::upsample2_backward(&g_up);
        }
        g = self.enc[depth - 1].backward(&cache.bottom, &g, &mut grad.enc[depth - 1]);
        for i in (0..depth - 1).rev() {
            let mut g_enc_out = nn::max_pool2_backward(&cache.pool_idx[i], &g);
            g_enc_out += skip_grads[i].as_ref().expect("set in decoder pass");
            g = self.enc[i].backward(&cache.enc[i], &g_enc_out, &mut grad.enc[i]);
        }
        // gradient with respect to the image itself is not needed
    }
}

/// Encoder ladder ending in a head that predicts latent mean and
/// log-variance. Prior and posterior share this architecture; the posterior
/// input has the label channels appended.
#[derive(Debug, Clone)]
struct GaussianEncoder {
    blocks: Vec<DoubleConv>,
    head: Linear,
}

struct GaussianEncoderCache {
    blocks: Vec<DoubleConvCache>,
    pool_idx: Vec<Array3<u8>>,
    bottom_shape: (usize, usize, usize),
    pooled_vec: Array1<f64>,
    /// Head output before the log-variance clamp.
    head_raw: Array1<f64>,
}

impl GaussianEncoder {
    fn kaiming(in_c: usize, ladder: &[usize], latent_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::with_capacity(ladder.len());
        let mut prev = in_c;
        for &c in ladder {
            blocks.push(DoubleConv::kaiming(prev, c, rng));
            prev = c;
        }
        Self {
            blocks,
            head: Linear::kaiming(2 * latent_dim, *ladder.last().unwrap(), rng),
        }
    }

    fn latent_dim(&self) -> usize {
        self.head.bias.len() / 2
    }

    fn forward(&self, x: &Array3<f64>) -> LatentGaussian {
        let depth = self.blocks.len();
        let mut h = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h);
            if i < depth - 1 {
                h = nn::max_pool2(&h).0;
            }
        }
        let v = nn::global_avg_pool(&h);
        self.split_head(&self.head.forward(&v))
    }

    fn forward_cached(&self, x: &Array3<f64>) -> (LatentGaussian, GaussianEncoderCache) {
        let depth = self.blocks.len();
        let mut caches = Vec::with_capacity(depth);
        let mut pool_idx = Vec::with_capacity(depth - 1);
        let mut h = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, cache) = block.forward_cached(&h);
            caches.push(cache);
            if i < depth - 1 {
                let (pooled, idx) = nn::max_pool2(&out);
                pool_idx.push(idx);
                h = pooled;
            } else {
                h = out;
            }
        }
        let bottom_shape = h.dim();
        let v = nn::global_avg_pool(&h);
        let head_raw = self.head.forward(&v);
        let gauss = self.split_head(&head_raw);
        (
            gauss,
            GaussianEncoderCache {
                blocks: caches,
                pool_idx,
                bottom_shape,
                pooled_vec: v,
                head_raw,
            },
        )
    }

    fn split_head(&self, out: &Array1<f64>) -> LatentGaussian {
        let d = self.latent_dim();
        let mean = out.slice(ndarray::s![..d]).to_owned();
        let log_variance = out
            .slice(ndarray::s![d..])
            .map(|&v| v.clamp(-LOG_VARIANCE_CLAMP, LOG_VARIANCE_CLAMP));
        LatentGaussian { mean, log_variance }
    }

    fn backward(&self, cache: &GaussianEncoderCache, g: &GaussianGrad, grad: &mut GaussianEncoder) {
        let d = self.latent_dim();
        let mut g_head = Array1::zeros(2 * d);
        for i in 0..d {
            g_head[i] = g.mean[i];
            // clamp passes the gradient through inside the open interval
            g_head[d + i] = if cache.head_raw[d + i].abs() < LOG_VARIANCE_CLAMP {
                g.log_variance[i]
            } else {
                0.0
            };
        }
        let g_vec = self.head.backward(&cache.pooled_vec, &g_head, &mut grad.head);
        let (_, h, w) = cache.bottom_shape;
        let mut gm = nn::global_avg_pool_backward(&g_vec, h, w);
        let depth = self.blocks.len();
        for i in (0..depth).rev() {
            if i < depth - 1 {
                gm = nn::max_pool2_backward(&cache.pool_idx[i], &gm);
            }
            gm = self.blocks[i].backward(&cache.blocks[i], &gm, &mut grad.blocks[i]);
        }
    }
}

/// Three 1x1 convolutions applied to [UNet features ⊕ broadcast latent],
/// ending in a sigmoid.
#[derive(Debug, Clone)]
struct CombHead {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

struct CombHeadCache {
    cat: Array3<f64>,
    z1: Array3<f64>,
    h1: Array3<f64>,
    z2: Array3<f64>,
    h2: Array3<f64>,
    y: Array3<f64>,
}

impl CombHead {
    fn kaiming(feature_c: usize, latent_dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut head = Self {
            c1: Conv2d::kaiming(feature_c, feature_c + latent_dim, 1, rng),
            c2: Conv2d::kaiming(feature_c, feature_c, 1, rng),
            c3: Conv2d::kaiming(classes, feature_c, 1, rng),
        };
        // Start the output layer biased toward background (sigmoid(-2) ~ 0.12)
        // instead of the sigmoid midpoint. A fresh net that answers "~0.5
        // everywhere" sits exactly on the response threshold used for
        // consensus filtering, so its own noise reads as unanimous foreground
        // and self-training can bootstrap a degenerate all-foreground
        // solution from it. A background-biased start abstains until the
        // features carry real evidence.
        head.c3.bias.fill(-2.0);
        head
    }

    fn forward(&self, features: &Array3<f64>, z: &Array1<f64>) -> Array3<f64> {
        let cat = concat_with_latent(features, z);
        let h1 = nn::relu(&self.c1.forward(&cat));
        let h2 = nn::relu(&self.c2.forward(&h1));
        nn::sigmoid(&self.c3.forward(&h2))
    }

    fn forward_cached(&self, features: &Array3<f64>, z: &Array1<f64>) -> (Array3<f64>, CombHeadCache) {
        let cat = concat_with_latent(features, z);
        let z1 = self.c1.forward(&cat);
        let h1 = nn::relu(&z1);
        let z2 = self.c2.forward(&h1);
        let h2 = nn::relu(&z2);
        let y = nn::sigmoid(&self.c3.forward(&h2));
        (
            y.clone(),
            CombHeadCache {
                cat,
                z1,
                h1,
                z2,
                h2,
                y,
            },
        )
    }

    /// Returns gradients with respect to the features and the latent sample.
    fn backward(
        &self,
        cache: &CombHeadCache,
        g_y: &Array3<f64>,
        feature_c: usize,
        grad: &mut CombHead,
    ) -> (Array3<f64>, Array1<f64>) {
        let g3 = nn::sigmoid_backward(&cache.y, g_y);
        let gh2 = self.c3.backward(&cache.h2, &g3, &mut grad.c3);
        let g2 = nn::relu_backward(&cache.z2, &gh2);
        let gh1 = self.c2.backward(&cache.h1, &g2, &mut grad.c2);
        let g1 = nn::relu_backward(&cache.z1, &gh1);
        let g_cat = self.c1.backward(&cache.cat, &g1, &mut grad.c1);
        let (g_f, g_tile) = nn::split_channels(&g_cat, feature_c);
        let g_z = g_tile.sum_axis(Axis(2)).sum_axis(Axis(1));
        (g_f, g_z)
    }
}

/// Broadcast the latent over every spatial location and append it to the
/// feature channels.
fn concat_with_latent(features: &Array3<f64>, z: &Array1<f64>) -> Array3<f64> {
    let (_, h, w) = features.dim();
    let mut tile = Array3::zeros((z.len(), h, w));
    for (d, &v) in z.iter().enumerate() {
        tile.index_axis_mut(Axis(0), d).fill(v);
    }
    nn::concat_channels(features, &tile)
}

// ---------------------------------------------------------------------------
// the full model

/// All parameters of the probabilistic UNet. Weights are immutable during
/// forward passes; updates take `&mut self` and must not overlap a forward.
#[derive(Debug, Clone)]
pub struct PUNet {
    config: PUNetConfig,
    unet: UNet,
    prior: GaussianEncoder,
    posterior: GaussianEncoder,
    comb: CombHead,
}

/// Cache of one differentiable forward pass.
pub struct ForwardCache {
    unet: UNetCache,
    comb: CombHeadCache,
    encoder: GaussianEncoderCache,
    /// Posterior cache; present only for the supervised path.
    posterior_extra: Option<GaussianEncoderCache>,
    eps: Array1<f64>,
    sampled: LatentGaussian,
}

impl PUNet {
    pub fn new(config: PUNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let unet = UNet::kaiming(1, &config.ladder, rng);
        let prior = GaussianEncoder::kaiming(1, &config.ladder, config.latent_dim, rng);
        let posterior =
            GaussianEncoder::kaiming(1 + config.classes, &config.ladder, config.latent_dim, rng);
        let comb = CombHead::kaiming(config.ladder[0], config.latent_dim, config.classes, rng);
        Ok(Self {
            config,
            unet,
            prior,
            posterior,
            comb,
        })
    }

    pub fn config(&self) -> &PUNetConfig {
        &self.config
    }

    /// Rejects inputs whose spatial size the pooling ladder cannot handle.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let factor = self.config.divisor();
        if height == 0 || height % factor != 0 {
            return Err(Error::NotDivisible {
                dim: "height",
                size: height,
                factor,
            });
        }
        if width == 0 || width % factor != 0 {
            return Err(Error::NotDivisible {
                dim: "width",
                size: width,
                factor,
            });
        }
        Ok(())
    }

    fn image_channels(x: &ImagePatch) -> Array3<f64> {
        let (h, w) = x.shape();
        x.pixels()
            .view()
            .into_shape_with_order((1, h, w))
            .expect("standard layout")
            .to_owned()
    }

    /// Deterministic UNet feature map, `ladder[0]` channels at input size.
    pub fn unet_features(&self, x: &ImagePatch) -> Result<Array3<f64>> {
        self.check_input(x.height(), x.width())?;
        Ok(self.unet.forward_cached(&Self::image_channels(x)).0)
    }

    /// Latent Gaussian from the image alone.
    pub fn prior_encode(&self, x: &ImagePatch) -> Result<LatentGaussian> {
        self.check_input(x.height(), x.width())?;
        let g = self.prior.forward(&Self::image_channels(x));
        if g.mean.iter().chain(g.log_variance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prior encoder output".into()));
        }
        Ok(g)
    }

    /// Latent Gaussian from the image concatenated with the target channels.
    pub fn posterior_encode(&self, x: &ImagePatch, target: &Array3<f64>) -> Result<LatentGaussian> {
        self.check_input(x.height(), x.width())?;
        let (k, th, tw) = target.dim();
        if (th, tw) != x.shape() || k != self.config.classes {
            return Err(Error::shape_mismatch(
                "posterior target",
                (self.config.classes, x.height(), x.width()),
                (k, th, tw),
            ));
        }
        let joint = nn::concat_channels(&Self::image_channels(x), target);
        let g = self.posterior.forward(&joint);
        if g.mean.iter().chain(g.log_variance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior encoder output".into()));
        }
        Ok(g)
    }

    /// Segmentation from a feature map and one latent sample.
    pub fn combine_predict(&self, features: &Array3<f64>, z: &Array1<f64>) -> Result<SegmentationOutput> {
        if z.len() != self.config.latent_dim {
            return Err(Error::shape_mismatch(
                "latent sample",
                self.config.latent_dim,
                z.len(),
            ));
        }
        if features.dim().0 != self.config.ladder[0] {
            return Err(Error::shape_mismatch(
                "feature channels",
                self.config.ladder[0],
                features.dim().0,
            ));
        }
        SegmentationOutput::new(self.comb.forward(features, z))
    }

    /// Training forward: segmentation from a posterior sample, plus both
    /// Gaussians for the variational loss.
    pub fn forward_train(
        &self,
        x: &ImagePatch,
        target: &Array3<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(SegmentationOutput, LatentGaussian, LatentGaussian)> {
        let fwd = self.forward_train_cached(x, target, rng)?;
        Ok((fwd.0, fwd.1, fwd.2))
    }

    /// As `forward_train` but retaining every activation needed by
    /// [`PUNet::backward_train`].
    pub fn forward_train_cached(
        &self,
        x: &ImagePatch,
        target: &Array3<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(SegmentationOutput, LatentGaussian, LatentGaussian, ForwardCache)> {
        self.check_input(x.height(), x.width())?;
        let (k, th, tw) = target.dim();
        if (th, tw) != x.shape() || k != self.config.classes {
            return Err(Error::shape_mismatch(
                "training target",
                (self.config.classes, x.height(), x.width()),
                (k, th, tw),
            ));
        }
        let img = Self::image_channels(x);
        let (features, unet_cache) = self.unet.forward_cached(&img);
        // the prior pass is cached too; the variational term sends gradient
        // into it
        let (prior, prior_cache) = self.prior.forward_cached(&img);
        let joint = nn::concat_channels(&img, target);
        let (posterior, post_cache) = self.posterior.forward_cached(&joint);
        let (z, eps) = posterior.sample_with_eps(rng);
        let (y, comb_cache) = self.comb.forward_cached(&features, &z);
        let seg = SegmentationOutput::new(y)?;
        Ok((
            seg,
            prior,
            posterior.clone(),
            ForwardCache {
                unet: unet_cache,
                comb: comb_cache,
                encoder: post_cache,
                posterior_extra: Some(prior_cache),
                eps,
                sampled: posterior,
            },
        ))
    }

    /// Unsupervised forward: segmentation from a prior sample.
    pub fn forward_prior_cached(
        &self,
        x: &ImagePatch,
        rng: &mut ChaCha8Rng,
    ) -> Result<(SegmentationOutput, LatentGaussian, ForwardCache)> {
        self.check_input(x.height(), x.width())?;
        let img = Self::image_channels(x);
        let (features, unet_cache) = self.unet.forward_cached(&img);
        let (prior, prior_cache) = self.prior.forward_cached(&img);
        let (z, eps) = prior.sample_with_eps(rng);
        let (y, comb_cache) = self.comb.forward_cached(&features, &z);
        let seg = SegmentationOutput::new(y)?;
        Ok((
            seg,
            prior.clone(),
            ForwardCache {
                unet: unet_cache,
                comb: comb_cache,
                encoder: prior_cache,
                posterior_extra: None,
                eps,
                sampled: prior,
            },
        ))
    }

    /// Backward through the supervised path. `g_seg` is the loss gradient on
    /// the output probabilities; `g_prior`/`g_posterior` are the variational
    /// term's gradients on the two Gaussians. The sampled latent routes extra
    /// gradient into the posterior via the reparameterization.
    pub fn backward_train(
        &self,
        cache: &ForwardCache,
        g_seg: &Array3<f64>,
        g_prior: &GaussianGrad,
        g_posterior: &GaussianGrad,
        grads: &mut PUNet,
    ) {
        let (g_features, g_z) =
            self.comb
                .backward(&cache.comb, g_seg, self.config.ladder[0], &mut grads.comb);
        self.unet.backward(&cache.unet, &g_features, &mut grads.unet);
        let mut g_post_total = g_posterior.clone();
        g_post_total.mean += &g_z;
        // dz/dlog_variance = eps * sigma / 2
        let sigma = cache.sampled.sigma();
        for d in 0..g_z.len() {
            g_post_total.log_variance[d] += g_z[d] * 0.5 * sigma[d] * cache.eps[d];
        }
        self.posterior
            .backward(&cache.encoder, &g_post_total, &mut grads.posterior);
        let prior_cache = cache
            .posterior_extra
            .as_ref()
            .expect("supervised cache holds the prior pass");
        self.prior.backward(prior_cache, g_prior, &mut grads.prior);
    }

    /// Backward through the unsupervised (prior-sampled) path.
    pub fn backward_prior(
        &self,
        cache: &ForwardCache,
        g_seg: &Array3<f64>,
        g_prior: &GaussianGrad,
        grads: &mut PUNet,
    ) {
        let (g_features, g_z) =
            self.comb
                .backward(&cache.comb, g_seg, self.config.ladder[0], &mut grads.comb);
        self.unet.backward(&cache.unet, &g_features, &mut grads.unet);
        let mut g_total = g_prior.clone();
        g_total.mean += &g_z;
        let sigma = cache.sampled.sigma();
        for d in 0..g_z.len() {
            g_total.log_variance[d] += g_z[d] * 0.5 * sigma[d] * cache.eps[d];
        }
        self.prior.backward(&cache.encoder, &g_total, &mut grads.prior);
    }

    /// `n` segmentations from independent prior samples. The UNet features
    /// and the prior Gaussian are computed once; each sample only reruns the
    /// combination head.
    pub fn predict_samples(
        &self,
        x: &ImagePatch,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SegmentationOutput>> {
        if n == 0 {
            return Err(Error::InvalidInput("sample count must be >= 1".into()));
        }
        self.check_input(x.height(), x.width())?;
        let img = Self::image_channels(x);
        let (features, _) = self.unet.forward_cached(&img);
        let prior = self.prior.forward(&img);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let z = prior.sample(rng);
            out.push(SegmentationOutput::new(self.comb.forward(&features, &z))?);
        }
        Ok(out)
    }

    // -- parameter plumbing -------------------------------------------------

    pub fn param_views(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        collect_unet(&self.unet, &mut out);
        collect_encoder("prior", &self.prior, &mut out);
        collect_encoder("posterior", &self.posterior, &mut out);
        collect_conv("comb.c1", &self.comb.c1, &mut out);
        collect_conv("comb.c2", &self.comb.c2, &mut out);
        collect_conv("comb.c3", &self.comb.c3, &mut out);
        out
    }

    pub fn param_views_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        collect_unet_mut(&mut self.unet, &mut out);
        collect_encoder_mut("prior", &mut self.prior, &mut out);
        collect_encoder_mut("posterior", &mut self.posterior, &mut out);
        collect_conv_mut("comb.c1", &mut self.comb.c1, &mut out);
        collect_conv_mut("comb.c2", &mut self.comb.c2, &mut out);
        collect_conv_mut("comb.c3", &mut self.comb.c3, &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.param_views().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn zero_params(&mut self) {
        for (_, mut v) in self.param_views_mut() {
            v.fill(0.0);
        }
    }

    /// Same architecture, all parameters zero; the gradient container.
    pub fn zeros_like(&self) -> PUNet {
        let mut g = self.clone();
        g.zero_params();
        g
    }

    /// `self += scale * other`, parameter by parameter.
    pub fn add_scaled(&mut self, other: &PUNet, scale: f64) {
        let theirs = other.param_views();
        for ((_, mut mine), (_, t)) in self.param_views_mut().into_iter().zip(theirs) {
            mine.zip_mut_with(&t, |m, &o| *m += scale * o);
        }
    }

    /// Exponential moving average: every parameter becomes
    /// `alpha * self + (1 - alpha) * student`.
    pub fn ema_from(&mut self, student: &PUNet, alpha: f64) -> Result<()> {
        if self.config != student.config {
            return Err(Error::shape_mismatch(
                "ema architectures",
                &self.config,
                &student.config,
            ));
        }
        let theirs = student.param_views();
        for ((_, mut mine), (_, t)) in self.param_views_mut().into_iter().zip(theirs) {
            mine.zip_mut_with(&t, |m, &s| *m = alpha * *m + (1.0 - alpha) * s);
        }
        Ok(())
    }

    pub fn max_abs_param_diff(&self, other: &PUNet) -> f64 {
        let mut max = 0.0f64;
        for ((_, a), (_, b)) in self.param_views().into_iter().zip(other.param_views()) {
            for (x, y) in a.iter().zip(b.iter()) {
                max = max.max((x - y).abs());
            }
        }
        max
    }
}

fn collect_conv<'a>(name: &str, c: &'a Conv2d, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
    out.push((format!("{name}.weight"), c.weight.view().into_dyn()));
    out.push((format!("{name}.bias"), c.bias.view().into_dyn()));
}

fn collect_conv_mut<'a>(name: &str, c: &'a mut Conv2d, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
    out.push((format!("{name}.weight"), c.weight.view_mut().into_dyn()));
    out.push((format!("{name}.bias"), c.bias.view_mut().into_dyn()));
}

fn collect_block<'a>(name: &str, b: &'a DoubleConv, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
    collect_conv(&format!("{name}.c1"), &b.c1, out);
    collect_conv(&format!("{name}.c2"), &b.c2, out);
}

fn collect_block_mut<'a>(
    name: &str,
    b: &'a mut DoubleConv,
    out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
) {
    collect_conv_mut(&format!("{name}.c1"), &mut b.c1, out);
    collect_conv_mut(&format!("{name}.c2"), &mut b.c2, out);
}

fn collect_unet<'a>(u: &'a UNet, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
    for (i, b) in u.enc.iter().enumerate() {
        collect_block(&format!("unet.enc{i}"), b, out);
    }
    for (i, b) in u.dec.iter().enumerate() {
        collect_block(&format!("unet.dec{i}"), b, out);
    }
}

fn collect_unet_mut<'a>(u: &'a mut UNet, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
    for (i, b) in u.enc.iter_mut().enumerate() {
        collect_block_mut(&format!("unet.enc{i}"), b, out);
    }
    for (i, b) in u.dec.iter_mut().enumerate() {
        collect_block_mut(&format!("unet.dec{i}"), b, out);
    }
}

fn collect_encoder<'a>(name: &str, e: &'a GaussianEncoder, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
    for (i, b) in e.blocks.iter().enumerate() {
        collect_block(&format!("{name}.b{i}"), b, out);
    }
    out.push((format!("{name}.head.weight"), e.head.weight.view().into_dyn()));
    out.push((format!("{name}.head.bias"), e.head.bias.view().into_dyn()));
}

fn collect_encoder_mut<'a>(
    name: &str,
    e: &'a mut GaussianEncoder,
    out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
) {
    for (i, b) in e.blocks.iter_mut().enumerate() {
        collect_block_mut(&format!("{name}.b{i}"), b, out);
    }
    out.push((format!("{name}.head.weight"), e.head.weight.view_mut().into_dyn()));
    out.push((format!("{name}.head.bias"), e.head.bias.view_mut().into_dyn()));
}

/// Copies the prior encoder's weights into the posterior, zeroing the
/// label-channel part of the first convolution. Afterwards the two encoders
/// compute identical functions of the image. Test support.
pub fn mirror_prior_into_posterior(model: &mut PUNet) {
    let prior_blocks: Vec<DoubleConv> = model.prior.blocks.clone();
    let head = model.prior.head.clone();
    for (i, b) in prior_blocks.into_iter().enumerate() {
        if i == 0 {
            // first conv widens: image slice copied, label slices zeroed
            let (o, _, k, _) = model.posterior.blocks[0].c1.weight.dim();
            let mut w = ndarray::Array4::zeros((o, 1 + model.config.classes, k, k));
            w.slice_mut(ndarray::s![.., ..1, .., ..])
                .assign(&b.c1.weight.slice(ndarray::s![.., ..1, .., ..]));
            model.posterior.blocks[0].c1.weight = w;
            model.posterior.blocks[0].c1.bias = b.c1.bias.clone();
            model.posterior.blocks[0].c2 = b.c2.clone();
        } else {
            model.posterior.blocks[i] = b;
        }
    }
    model.posterior.head = head;
}
