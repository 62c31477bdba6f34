//! Learned M-step: a per-iteration two-layer convolutional network with a
//! residual connection onto the previous variance parameters,
//!
//! `gamma_l = relu(gamma_{l-1} + conv2(relu(conv1(F_l))))`.
//!
//! `F_l` is a `G_A x G_D x 2` image built from the posterior mean and
//! variance. Both convolutions are 3x3 with zero "same" padding; conv1 maps
//! 2 -> 8 channels and conv2 maps 8 -> 1.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::binio::{check_config, Reader, Writer};
use crate::config::SystemConfig;
use crate::error::{Error, Result};

pub const IN_CHANNELS: usize = 2;
pub const HIDDEN_CHANNELS: usize = 8;
pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

const W1_LEN: usize = HIDDEN_CHANNELS * IN_CHANNELS * TAPS;
const B1_LEN: usize = HIDDEN_CHANNELS;
const W2_LEN: usize = HIDDEN_CHANNELS * TAPS;
const B2_LEN: usize = 1;

const W1: usize = 0;
const B1: usize = W1 + W1_LEN;
const W2: usize = B1 + B1_LEN;
const B2: usize = W2 + W2_LEN;

/// Trainable scalars per iteration (225).
pub const PARAMS_PER_LAYER: usize = B2 + B2_LEN;

/// How the complex posterior mean becomes the first input channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// `|mu|^2`, the quantity the classic M-step consumes.
    MagnitudeSquared,
    Magnitude,
}

impl FeatureMode {
    fn code(self) -> u8 {
        match self {
            FeatureMode::MagnitudeSquared => 0,
            FeatureMode::Magnitude => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(FeatureMode::MagnitudeSquared),
            1 => Ok(FeatureMode::Magnitude),
            _ => Err(Error::Format(format!("unknown feature mode {c}"))),
        }
    }
}

/// Image-like `G_A x G_D x 2` input. Storage is channel-major, and within a
/// channel pixel `(a, d)` sits at `a + G_A d`, the same order as the AD vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub grid_angular: usize,
    pub grid_delay: usize,
    pub data: Vec<f64>,
}

impl FeatureTensor {
    pub fn pixels(&self) -> usize {
        self.grid_angular * self.grid_delay
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let g = self.pixels();
        &self.data[c * g..(c + 1) * g]
    }

    pub fn get(&self, a: usize, d: usize, c: usize) -> f64 {
        self.data[c * self.pixels() + a + self.grid_angular * d]
    }
}

pub fn build_features(
    mu: &DVector<Complex64>,
    tau_x: &DVector<f64>,
    grid_angular: usize,
    grid_delay: usize,
    mode: FeatureMode,
) -> Result<FeatureTensor> {
    let g = grid_angular * grid_delay;
    if mu.len() != g || tau_x.len() != g {
        return Err(Error::Dimension(format!(
            "features need length {g}, got mu {} and tau {}",
            mu.len(),
            tau_x.len()
        )));
    }
    let mut data = Vec::with_capacity(2 * g);
    data.extend(mu.iter().map(|m| match mode {
        FeatureMode::MagnitudeSquared => m.norm_sqr(),
        FeatureMode::Magnitude => m.norm(),
    }));
    data.extend(tau_x.iter().copied());
    Ok(FeatureTensor {
        grid_angular,
        grid_delay,
        data,
    })
}

/// Chain rule from feature gradients back to `mu` and `tau_x`. `mu` gradients
/// use the `dL/dRe + i dL/dIm` convention.
pub fn features_backward(
    mu: &DVector<Complex64>,
    g_features: &[f64],
    mode: FeatureMode,
) -> (DVector<Complex64>, DVector<f64>) {
    let g = mu.len();
    let g_mu = DVector::from_fn(g, |j, _| match mode {
        FeatureMode::MagnitudeSquared => mu[j] * (2.0 * g_features[j]),
        FeatureMode::Magnitude => {
            let n = mu[j].norm();
            if n > 0.0 {
                mu[j] * (g_features[j] / n)
            } else {
                Complex64::new(0.0, 0.0)
            }
        }
    });
    let g_tau = DVector::from_column_slice(&g_features[g..2 * g]);
    (g_mu, g_tau)
}

/// Zero-padded "same" cross-correlation with 3x3 kernels. `weights` is laid out
/// `[out][in][ki][kj]`; `ki` shifts along the angular axis, `kj` along delay.
fn conv_same(
    input: &[f64],
    in_ch: usize,
    ga: usize,
    gd: usize,
    weights: &[f64],
    bias: &[f64],
    out_ch: usize,
) -> Vec<f64> {
    let g = ga * gd;
    let mut out = vec![0.0; out_ch * g];
    for o in 0..out_ch {
        let dst = &mut out[o * g..(o + 1) * g];
        dst.fill(bias[o]);
        for c in 0..in_ch {
            let src = &input[c * g..(c + 1) * g];
            for ki in 0..KERNEL {
                for kj in 0..KERNEL {
                    let w = weights[((o * in_ch + c) * KERNEL + ki) * KERNEL + kj];
                    if w == 0.0 {
                        continue;
                    }
                    let (a_lo, a_hi) = valid_range(ki, ga);
                    let (d_lo, d_hi) = valid_range(kj, gd);
                    for d in d_lo..d_hi {
                        let sd = d + kj - 1;
                        let drow = &mut dst[d * ga + a_lo..d * ga + a_hi];
                        let srow = &src[sd * ga + a_lo + ki - 1..sd * ga + a_hi + ki - 1];
                        for (y, x) in drow.iter_mut().zip(srow) {
                            *y += w * x;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output positions whose input `pos + k - 1` lies inside `0..len`.
fn valid_range(k: usize, len: usize) -> (usize, usize) {
    let lo = 1usize.saturating_sub(k);
    let hi = (len + 1).saturating_sub(k).min(len);
    (lo.min(hi), hi)
}

/// Gradients of [`conv_same`] with respect to input, weights and bias.
fn conv_same_backward(
    input: &[f64],
    in_ch: usize,
    ga: usize,
    gd: usize,
    weights: &[f64],
    out_ch: usize,
    g_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let g = ga * gd;
    let mut g_in = vec![0.0; in_ch * g];
    let mut g_w = vec![0.0; weights.len()];
    let mut g_b = vec![0.0; out_ch];
    for o in 0..out_ch {
        let go = &g_out[o * g..(o + 1) * g];
        g_b[o] = go.iter().sum();
        for c in 0..in_ch {
            let src = &input[c * g..(c + 1) * g];
            for ki in 0..KERNEL {
                for kj in 0..KERNEL {
                    let idx = ((o * in_ch + c) * KERNEL + ki) * KERNEL + kj;
                    let w = weights[idx];
                    let (a_lo, a_hi) = valid_range(ki, ga);
                    let (d_lo, d_hi) = valid_range(kj, gd);
                    let mut acc = 0.0;
                    for d in d_lo..d_hi {
                        let sd = d + kj - 1;
                        let start = sd * ga + ki + a_lo - 1;
                        let end = start + (a_hi - a_lo);
                        let grow = &go[d * ga + a_lo..d * ga + a_hi];
                        let srow = &src[start..end];
                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        let girow = &mut g_in[c * g + start..c * g + end];
                        for (gi, gv) in girow.iter_mut().zip(grow) {
                            *gi += w * gv;
                        }
                    }
                    g_w[idx] = acc;
                }
            }
        }
    }
    (g_in, g_w, g_b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[conv1 weights | conv1 bias | conv2 weights | conv2 bias]`.
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl Layer {
    pub fn zeros() -> Self {
        Self::from_params(vec![0.0; PARAMS_PER_LAYER])
    }

    pub fn from_params(params: Vec<f64>) -> Self {
        assert_eq!(params.len(), PARAMS_PER_LAYER);
        Self {
            params,
            adam_m: vec![0.0; PARAMS_PER_LAYER],
            adam_v: vec![0.0; PARAMS_PER_LAYER],
        }
    }

    /// He-normal conv weights, zero biases.
    pub fn he_init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut params = vec![0.0; PARAMS_PER_LAYER];
        let s1 = (2.0 / (IN_CHANNELS * TAPS) as f64).sqrt();
        let s2 = (2.0 / (HIDDEN_CHANNELS * TAPS) as f64).sqrt();
        for p in &mut params[W1..B1] {
            *p = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        for p in &mut params[W2..B2] {
            *p = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        Self::from_params(params)
    }

    pub fn conv1_weights(&self) -> &[f64] {
        &self.params[W1..B1]
    }

    pub fn conv1_bias(&self) -> &[f64] {
        &self.params[B1..W2]
    }

    pub fn conv2_weights(&self) -> &[f64] {
        &self.params[W2..B2]
    }

    pub fn conv2_bias(&self) -> &[f64] {
        &self.params[B2..]
    }

    pub fn reset_moments(&mut self) {
        self.adam_m.fill(0.0);
        self.adam_v.fill(0.0);
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub features: FeatureTensor,
    /// conv1 pre-activation, 8 channels.
    pub z1: Vec<f64>,
    /// relu(z1).
    pub h1: Vec<f64>,
    /// `gamma_prev + conv2(h1)` before the outer relu.
    pub pre: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MStepGrads {
    pub params: Vec<f64>,
    pub features: Vec<f64>,
    pub gamma_prev: Vec<f64>,
}

/// One M-step network: returns `gamma_l` and the cache for backprop.
pub fn layer_forward(layer: &Layer, features: &FeatureTensor, gamma_prev: &[f64]) -> (Vec<f64>, ForwardCache) {
    let (ga, gd) = (features.grid_angular, features.grid_delay);
    let z1 = conv_same(
        &features.data,
        IN_CHANNELS,
        ga,
        gd,
        layer.conv1_weights(),
        layer.conv1_bias(),
        HIDDEN_CHANNELS,
    );
    let h1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
    let z2 = conv_same(&h1, HIDDEN_CHANNELS, ga, gd, layer.conv2_weights(), layer.conv2_bias(), 1);
    let pre: Vec<f64> = z2.iter().zip(gamma_prev).map(|(a, b)| a + b).collect();
    let out = pre.iter().map(|v| v.max(0.0)).collect();
    (
        out,
        ForwardCache {
            features: features.clone(),
            z1,
            h1,
            pre,
        },
    )
}

/// Exact gradients of [`layer_forward`]; relu has subgradient 0 at 0.
pub fn layer_backward(layer: &Layer, cache: &ForwardCache, g_out: &[f64]) -> MStepGrads {
    let (ga, gd) = (cache.features.grid_angular, cache.features.grid_delay);
    let g_pre: Vec<f64> = cache
        .pre
        .iter()
        .zip(g_out)
        .map(|(p, g)| if *p > 0.0 { *g } else { 0.0 })
        .collect();
    let (g_h1, g_w2, g_b2) =
        conv_same_backward(&cache.h1, HIDDEN_CHANNELS, ga, gd, layer.conv2_weights(), 1, &g_pre);
    let g_z1: Vec<f64> = cache
        .z1
        .iter()
        .zip(&g_h1)
        .map(|(z, g)| if *z > 0.0 { *g } else { 0.0 })
        .collect();
    let (g_f, g_w1, g_b1) = conv_same_backward(
        &cache.features.data,
        IN_CHANNELS,
        ga,
        gd,
        layer.conv1_weights(),
        HIDDEN_CHANNELS,
        &g_z1,
    );
    let mut params = Vec::with_capacity(PARAMS_PER_LAYER);
    params.extend(g_w1);
    params.extend(g_b1);
    params.extend(g_w2);
    params.extend(g_b2);
    MStepGrads {
        params,
        features: g_f,
        gamma_prev: g_pre,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam step `t >= 1` on one layer.
pub fn adam_update(layer: &mut Layer, grads: &[f64], t: u64, lr: f64, cfg: &AdamConfig) {
    assert!(t >= 1, "Adam step counter starts at 1");
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..layer.params.len() {
        let g = grads[i];
        layer.adam_m[i] = cfg.beta1 * layer.adam_m[i] + (1.0 - cfg.beta1) * g;
        layer.adam_v[i] = cfg.beta2 * layer.adam_v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = layer.adam_m[i] / c1;
        let v_hat = layer.adam_v[i] / c2;
        layer.params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetMetadata {
    pub epochs: u64,
    pub final_val_loss: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStepNet {
    pub grid_angular: usize,
    pub grid_delay: usize,
    pub feature_mode: FeatureMode,
    /// Layer `l` (0-based) is the M-step of iteration `l + 1`.
    pub layers: Vec<Layer>,
    pub metadata: NetMetadata,
}

impl MStepNet {
    pub fn new(grid_angular: usize, grid_delay: usize, feature_mode: FeatureMode) -> Self {
        Self {
            grid_angular,
            grid_delay,
            feature_mode,
            layers: Vec::new(),
            metadata: NetMetadata::default(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Appends a copy of the last layer, or a He-initialised one if empty.
    pub fn push_layer<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let layer = match self.layers.last() {
            Some(last) => Layer::from_params(last.params.clone()),
            None => Layer::he_init(rng),
        };
        self.layers.push(layer);
    }

    pub fn features(&self, mu: &DVector<Complex64>, tau_x: &DVector<f64>) -> Result<FeatureTensor> {
        build_features(mu, tau_x, self.grid_angular, self.grid_delay, self.feature_mode)
    }

    /// The learned M-step of iteration `layer + 1`.
    pub fn forward(
        &self,
        layer: usize,
        mu: &DVector<Complex64>,
        tau_x: &DVector<f64>,
        gamma_prev: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let l = self.layers.get(layer).ok_or(Error::IndexOutOfRange {
            index: layer + 1,
            max: self.layers.len(),
        })?;
        let f = self.features(mu, tau_x)?;
        let (out, _) = layer_forward(l, &f, gamma_prev.as_slice());
        Ok(DVector::from_vec(out))
    }

    pub fn save(&self, cfg: &SystemConfig, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::new(BufWriter::new(File::create(path)?));
        w.bytes(NET_MAGIC)?;
        w.u32(NET_VERSION)?;
        w.config(cfg)?;
        w.string(&self.metadata.config_hash)?;
        w.u8(self.feature_mode.code())?;
        w.u32(self.grid_angular as u32)?;
        w.u32(self.grid_delay as u32)?;
        w.u64(self.metadata.epochs)?;
        w.f64(self.metadata.final_val_loss)?;
        w.u32(self.layers.len() as u32)?;
        w.u32(PARAMS_PER_LAYER as u32)?;
        for layer in &self.layers {
            for p in &layer.params {
                w.f64(*p)?;
            }
        }
        w.finish()?;
        Ok(())
    }

    /// Loads a checkpoint; a checkpoint trained under a different physical
    /// configuration is rejected.
    pub fn load(cfg: &SystemConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut r = Reader::new(BufReader::new(File::open(path)?));
        r.magic(NET_MAGIC)?;
        let version = r.u32()?;
        if version != NET_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let stored = r.config()?;
        check_config(cfg, &stored)?;
        let config_hash = r.string()?;
        let feature_mode = FeatureMode::from_code(r.u8()?)?;
        let grid_angular = r.u32()? as usize;
        let grid_delay = r.u32()? as usize;
        if grid_angular != cfg.grid_angular || grid_delay != cfg.grid_delay {
            return Err(Error::Format("checkpoint grid disagrees with its config".into()));
        }
        let epochs = r.u64()?;
        let final_val_loss = r.f64()?;
        let n_layers = r.u32()? as usize;
        let per = r.u32()? as usize;
        if per != PARAMS_PER_LAYER || n_layers > 10_000 {
            return Err(Error::Format(format!("bad layer block: {n_layers} layers of {per}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let params = (0..per).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Format("non-finite weight in checkpoint".into()));
            }
            layers.push(Layer::from_params(params));
        }
        r.expect_end()?;
        Ok(Self {
            grid_angular,
            grid_delay,
            feature_mode,
            layers,
            metadata: NetMetadata {
                epochs,
                final_val_loss,
                config_hash,
            },
        })
    }
}

const NET_MAGIC: &[u8; 8] = b"ASBLMNET";
const NET_VERSION: u32 = 1;
