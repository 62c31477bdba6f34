//! Layer-wise training of the unfolded estimator.
//!
//! Stage `s` trains a depth `s + 1` estimator (`s` networks). Stage 1 starts
//! from a random network; every later stage appends a copy of the last
//! network and retrains all of them. Noise is redrawn for every batch.
//! Gradients are taken through the whole unrolled estimator: conv layers,
//! features and both E-steps have hand-written backward passes.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::SystemConfig;
use crate::dataset::{Dataset, Split};
use crate::dictionaries::RidgeProjector;
use crate::error::{Error, Result};
use crate::eval::{evaluate_paired, nmse, Algo, AlgoRun};
use crate::learned::{
    adam_update, features_backward, layer_backward, layer_forward, AdamConfig, FeatureMode, ForwardCache, MStepNet,
    PARAMS_PER_LAYER,
};
use crate::rng::{substream, Stream};
use crate::sbl::{
    amp_e_step, amp_e_step_backward, exact_e_step, exact_e_step_backward, variance_to_precision, AmpTape, EStepKind,
    ExactTape,
};
use crate::system::System;

/// What the training loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossDomain {
    /// `||H_hat - H||_F^2 / ||H||_F^2`.
    Channel,
    /// `||x_hat - x_ls||^2` against the ridge projection of the true channel.
    Sparse,
}

/// How far gradients travel through an AMP E-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    /// Through `gamma` and through the carried state `(mu, tau_x, s)`.
    EndToEnd,
    /// Through `gamma` only; the carried AMP state is treated as a constant.
    Truncated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_patience: usize,
    pub early_stop_patience: usize,
    /// Per stage.
    pub max_epochs: usize,
    /// Target number of unrolled iterations L.
    pub depth: usize,
    pub loss: LossDomain,
    pub e_step: EStepKind,
    pub gradient: GradientMode,
    /// Lower bound on every learned gamma while training.
    pub gamma_floor: f64,
    pub feature_mode: FeatureMode,
    pub adam: AdamConfig,
    /// Relative ridge for sparse-domain labels.
    pub label_ridge: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-3,
            lr_decay: 0.1,
            lr_patience: 4,
            early_stop_patience: 10,
            max_epochs: 200,
            depth: 6,
            loss: LossDomain::Channel,
            e_step: EStepKind::Amp,
            gradient: GradientMode::EndToEnd,
            gamma_floor: 1e-12,
            feature_mode: FeatureMode::MagnitudeSquared,
            adam: AdamConfig::default(),
            label_ridge: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size < 1 {
            return bad("batch size must be at least 1");
        }
        if self.lr_patience < 1 || self.early_stop_patience < 1 {
            return bad("patiences must be at least 1");
        }
        if self.depth < 2 {
            return bad("depth must be at least 2");
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("learning rate must be positive and the decay factor in (0, 1)");
        }
        if !(self.gamma_floor >= 0.0) {
            return bad("gamma floor must be non-negative");
        }
        Ok(())
    }

    pub fn algo(&self) -> Algo {
        match self.e_step {
            EStepKind::Exact => Algo::SblUnfolding,
            EStepKind::Amp => Algo::AmpSblUnfolding,
        }
    }
}

// ---------------------------------------------------------------- splits

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub const PAPER: SplitSizes = SplitSizes {
        train: 8000,
        val: 1000,
        test: 1000,
    };
    pub const DESK: SplitSizes = SplitSizes {
        train: 2000,
        val: 250,
        test: 250,
    };
}

/// Channels only; each split draws from its own sub-streams.
pub fn generate_splits(cfg: &SystemConfig, sizes: SplitSizes) -> Result<(Dataset, Dataset, Dataset)> {
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(Error::InvalidConfig("split sizes must be positive".into()));
    }
    cfg.validate()?;
    Ok((
        Dataset::generate(cfg, Split::Train, sizes.train),
        Dataset::generate(cfg, Split::Val, sizes.val),
        Dataset::generate(cfg, Split::Test, sizes.test),
    ))
}

// ---------------------------------------------------------------- loss

/// Per-sample loss and its gradient with respect to `mu` (`dL/dRe + i dL/dIm`).
pub fn loss_and_grad(
    domain: LossDomain,
    sys: &System,
    mu: &DVector<Complex64>,
    h: &DMatrix<Complex64>,
    label: Option<&DVector<Complex64>>,
) -> Result<(f64, DVector<Complex64>)> {
    match domain {
        LossDomain::Channel => {
            let h_hat = sys.dicts.reconstruct_channel(mu)?;
            let loss = nmse(h, &h_hat)?;
            let scale = 2.0 / h.norm_squared();
            let g_h = (h_hat - h) * Complex64::new(scale, 0.0);
            Ok((loss, sys.dicts.reconstruct_adjoint(&g_h)?))
        }
        LossDomain::Sparse => {
            let x = label.ok_or_else(|| Error::InvalidConfig("sparse loss needs a label".into()))?;
            let diff = mu - x;
            Ok((diff.norm_squared(), diff * Complex64::new(2.0, 0.0)))
        }
    }
}

// ---------------------------------------------------------------- unrolled pass

enum ETape {
    Exact(ExactTape),
    Amp { tape: Box<AmpTape>, precision: DVector<f64> },
}

struct MTape {
    cache: ForwardCache,
    /// Entries where the floor overrode the network output.
    floored: Vec<bool>,
}

struct Unrolled {
    e: Vec<ETape>,
    m: Vec<MTape>,
    mus: Vec<DVector<Complex64>>,
    gammas: Vec<DVector<f64>>,
    mu: DVector<Complex64>,
}

/// Runs `net.n_layers() + 1` iterations keeping everything backprop needs.
fn unroll(
    sys: &System,
    net: &MStepNet,
    cfg: &TrainConfig,
    y: &DVector<Complex64>,
    r: &DVector<Complex64>,
) -> Result<Unrolled> {
    let depth = net.n_layers() + 1;
    let g = sys.cfg.grid_size();
    let sigma2 = sys.cfg.noise_var;
    let mut gamma = DVector::from_element(g, 1.0);
    let mut mu = DVector::zeros(g);
    let mut tau = DVector::from_element(g, 1.0);
    let mut s = DVector::zeros(sys.op.rows());
    let mut out = Unrolled {
        e: Vec::with_capacity(depth),
        m: Vec::with_capacity(depth - 1),
        mus: Vec::with_capacity(depth),
        gammas: vec![gamma.clone()],
        mu: DVector::zeros(0),
    };
    for l in 1..=depth {
        match cfg.e_step {
            EStepKind::Exact => {
                let o = exact_e_step(&sys.estimator.exact, y, sigma2, gamma.as_slice())?;
                mu = o.mu;
                tau = o.tau;
                out.e.push(ETape::Exact(o.tape));
            }
            EStepKind::Amp => {
                let precision = variance_to_precision(&gamma);
                let t = amp_e_step(&sys.estimator.amp, r, sigma2, &mu, &tau, &s, &precision, l)?;
                mu = t.mu.clone();
                tau = t.tau_x.clone();
                s = t.s.clone();
                out.e.push(ETape::Amp {
                    tape: Box::new(t),
                    precision,
                });
            }
        }
        out.mus.push(mu.clone());
        if l < depth {
            let f = net.features(&mu, &tau)?;
            let (raw, cache) = layer_forward(&net.layers[l - 1], &f, gamma.as_slice());
            let floored: Vec<bool> = raw.iter().map(|v| *v < cfg.gamma_floor).collect();
            gamma = DVector::from_iterator(g, raw.iter().map(|v| v.max(cfg.gamma_floor)));
            out.m.push(MTape { cache, floored });
            out.gammas.push(gamma.clone());
        }
    }
    out.mu = mu;
    Ok(out)
}

/// Gradient of the loss with respect to every network parameter, flattened
/// layer after layer.
fn backprop(
    sys: &System,
    net: &MStepNet,
    cfg: &TrainConfig,
    r: &DVector<Complex64>,
    u: &Unrolled,
    g_mu_out: DVector<Complex64>,
) -> Vec<f64> {
    let depth = net.n_layers() + 1;
    let g = sys.cfg.grid_size();
    let mut grads = vec![0.0; net.n_layers() * PARAMS_PER_LAYER];
    let mut g_mu = g_mu_out;
    let mut g_tau = DVector::<f64>::zeros(g);
    let mut g_s = DVector::<Complex64>::zeros(sys.op.rows());
    // gradient on gamma^l, filled by E-step l+1 and M-step l+1
    let mut g_gamma = DVector::<f64>::zeros(g);
    for l in (1..=depth).rev() {
        let mut g_gamma_prev = DVector::<f64>::zeros(g);
        if l < depth {
            let mt = &u.m[l - 1];
            let g_out: Vec<f64> = g_gamma
                .iter()
                .zip(&mt.floored)
                .map(|(v, f)| if *f { 0.0 } else { *v })
                .collect();
            let mg = layer_backward(&net.layers[l - 1], &mt.cache, &g_out);
            grads[(l - 1) * PARAMS_PER_LAYER..l * PARAMS_PER_LAYER].copy_from_slice(&mg.params);
            let (gm, gt) = features_backward(&u.mus[l - 1], &mg.features, net.feature_mode);
            g_mu += gm;
            g_tau += gt;
            g_gamma_prev += DVector::from_vec(mg.gamma_prev);
        }
        match &u.e[l - 1] {
            ETape::Exact(tape) => {
                let gg = exact_e_step_backward(tape, &g_mu, g_tau.as_slice());
                g_gamma_prev += DVector::from_vec(gg);
                g_mu.fill(Complex64::new(0.0, 0.0));
                g_tau.fill(0.0);
            }
            ETape::Amp { tape, precision } => {
                let ag = amp_e_step_backward(&sys.estimator.amp, r, tape, &g_mu, &g_tau, &g_s);
                let gamma = &u.gammas[l - 1];
                for j in 0..g {
                    // d(1/gamma)/dgamma = -1/gamma^2 = -precision^2
                    g_gamma_prev[j] -= ag.gamma[j] * precision[j] * precision[j];
                }
                debug_assert_eq!(gamma.len(), g);
                match cfg.gradient {
                    GradientMode::EndToEnd => {
                        g_mu = ag.mu_prev;
                        g_tau = ag.tau_x_prev;
                        g_s = ag.s_prev;
                    }
                    GradientMode::Truncated => {
                        g_mu.fill(Complex64::new(0.0, 0.0));
                        g_tau.fill(0.0);
                        g_s.fill(Complex64::new(0.0, 0.0));
                    }
                }
            }
        }
        g_gamma = g_gamma_prev;
    }
    grads
}

/// Loss of one observed sample under the training forward pass.
pub fn sample_loss(
    sys: &System,
    net: &MStepNet,
    cfg: &TrainConfig,
    y: &DVector<Complex64>,
    r: &DVector<Complex64>,
    h: &DMatrix<Complex64>,
    label: Option<&DVector<Complex64>>,
) -> Result<f64> {
    let u = unroll(sys, net, cfg, y, r)?;
    Ok(loss_and_grad(cfg.loss, sys, &u.mu, h, label)?.0)
}

/// Loss and parameter gradient of one observed sample.
pub fn sample_loss_grad(
    sys: &System,
    net: &MStepNet,
    cfg: &TrainConfig,
    y: &DVector<Complex64>,
    r: &DVector<Complex64>,
    h: &DMatrix<Complex64>,
    label: Option<&DVector<Complex64>>,
) -> Result<(f64, Vec<f64>)> {
    let u = unroll(sys, net, cfg, y, r)?;
    let (loss, g_mu) = loss_and_grad(cfg.loss, sys, &u.mu, h, label)?;
    Ok((loss, backprop(sys, net, cfg, r, &u, g_mu)))
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochEvent {
    None,
    LrDecay,
    EarlyStop,
    MaxEpochs,
}

impl EpochEvent {
    pub fn name(self) -> &'static str {
        match self {
            EpochEvent::None => "",
            EpochEvent::LrDecay => "lr_decay",
            EpochEvent::EarlyStop => "early_stop",
            EpochEvent::MaxEpochs => "max_epochs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: usize,
    pub depth: usize,
    /// 1-based within the stage.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub improved: bool,
    pub event: EpochEvent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub depth: usize,
    pub epochs: Vec<EpochRecord>,
    pub stop_epoch: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageReport>,
    pub final_test_nmse_db: Option<f64>,
}

impl TrainReport {
    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.stages.iter().flat_map(|s| s.epochs.iter())
    }
}

pub fn write_report_csv(report: &TrainReport, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("# config_hash={} seed={}", report.config_hash, report.seed);
    if let Some(v) = report.final_test_nmse_db {
        out.push_str(&format!(" final_test_nmse_db={v:.4}"));
    }
    out.push('\n');
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["stage", "depth", "epoch", "train_loss", "val_loss", "lr", "improved", "event"])?;
    for e in report.epochs() {
        w.write_record([
            e.stage.to_string(),
            e.depth.to_string(),
            e.epoch.to_string(),
            format!("{:e}", e.train_loss),
            format!("{:e}", e.val_loss),
            format!("{:e}", e.lr),
            (e.improved as u8).to_string(),
            e.event.name().to_string(),
        ])?;
    }
    out.push_str(std::str::from_utf8(&w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv is utf-8"));
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------- training

/// Fixed-noise observations of a validation set, so successive epochs are
/// scored on identical inputs.
pub struct ValidationSet {
    obs: Vec<(DVector<Complex64>, DVector<Complex64>)>,
    channels: Vec<DMatrix<Complex64>>,
    labels: Option<Vec<DVector<Complex64>>>,
}

impl ValidationSet {
    pub fn new(sys: &System, ds: &Dataset, labels: Option<&RidgeProjector>) -> Result<Self> {
        let mut obs = Vec::with_capacity(ds.len());
        for (i, s) in ds.samples.iter().enumerate() {
            let mut rng = substream(sys.cfg.rng_seed, Stream::EvalNoise, &[1, i as u64]);
            let o = sys.observe(&s.h, &mut rng);
            obs.push((o.y, o.r));
        }
        let channels: Vec<_> = ds.samples.iter().map(|s| s.h.clone()).collect();
        let labels = labels
            .map(|p| channels.iter().map(|h| p.project(h)).collect::<Result<Vec<_>>>())
            .transpose()?;
        Ok(Self { obs, channels, labels })
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Mean training loss of `net` over a validation set.
pub fn validate(net: &MStepNet, sys: &System, val: &ValidationSet, cfg: &TrainConfig) -> Result<f64> {
    let losses: Vec<Result<f64>> = (0..val.len())
        .into_par_iter()
        .map(|i| {
            let (y, r) = &val.obs[i];
            let label = val.labels.as_ref().map(|l| &l[i]);
            sample_loss(sys, net, cfg, y, r, &val.channels[i], label)
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / val.len().max(1) as f64)
}

/// Training inputs: a fixed system (operator shared by all samples) and the
/// three splits. `test` is optional and only used for the final score.
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: Option<&'a Dataset>,
}

/// Trains stages `net.n_layers() + 1 ..= depth - 1`; an empty `net` starts
/// from stage 1. `log` sees every finished epoch.
pub fn train_layerwise(
    cfg: &TrainConfig,
    sys: &System,
    data: TrainData<'_>,
    mut net: MStepNet,
    mut log: impl FnMut(&EpochRecord),
) -> Result<(MStepNet, TrainReport)> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::InvalidConfig("training and validation sets must be non-empty".into()));
    }
    if net.grid_angular != sys.cfg.grid_angular || net.grid_delay != sys.cfg.grid_delay {
        return Err(Error::InvalidConfig("network grid disagrees with the system".into()));
    }
    if net.n_layers() + 1 > cfg.depth {
        return Err(Error::InvalidConfig(format!(
            "network already has depth {}, target is {}",
            net.n_layers() + 1,
            cfg.depth
        )));
    }
    let seed = sys.cfg.rng_seed;
    let projector = match cfg.loss {
        LossDomain::Sparse => Some(RidgeProjector::new(&sys.dicts, cfg.label_ridge)?),
        LossDomain::Channel => None,
    };
    let train_labels = projector
        .as_ref()
        .map(|p| data.train.samples.iter().map(|s| p.project(&s.h)).collect::<Result<Vec<_>>>())
        .transpose()?;
    let val = ValidationSet::new(sys, data.val, projector.as_ref())?;

    let mut report = TrainReport {
        config_hash: sys.cfg.hash(),
        seed,
        stages: Vec::new(),
        final_test_nmse_db: None,
    };
    let mut total_epochs = net.metadata.epochs;
    let mut last_val = net.metadata.final_val_loss;

    for stage in net.n_layers() + 1..cfg.depth {
        net.push_layer(&mut substream(seed, Stream::NetInit, &[stage as u64]));
        for layer in &mut net.layers {
            layer.reset_moments();
        }
        let depth = stage + 1;
        let mut lr = cfg.learning_rate;
        let mut step: u64 = 0;
        let mut best = f64::INFINITY;
        let mut best_net = net.clone();
        let mut best_epoch = 0;
        let mut since_best = 0;
        let mut since_decay = 0;
        let mut epochs = Vec::new();
        let diverged = |epoch: usize, detail: String| Error::TrainingDiverged {
            stage,
            depth,
            epoch,
            detail,
        };

        for epoch in 1..=cfg.max_epochs {
            let mut order: Vec<usize> = (0..data.train.len()).collect();
            order.shuffle(&mut substream(seed, Stream::Shuffle, &[stage as u64, epoch as u64]));
            let mut loss_sum = 0.0;
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                let results: Vec<Result<(f64, Vec<f64>)>> = batch
                    .par_iter()
                    .map(|&i| {
                        let h = &data.train.samples[i].h;
                        let mut rng = substream(
                            seed,
                            Stream::Noise,
                            &[stage as u64, epoch as u64, b as u64, i as u64],
                        );
                        let o = sys.observe(h, &mut rng);
                        let label = train_labels.as_ref().map(|l| &l[i]);
                        sample_loss_grad(sys, &net, cfg, &o.y, &o.r, h, label)
                    })
                    .collect();
                let mut grad = vec![0.0; net.n_layers() * PARAMS_PER_LAYER];
                for res in results {
                    let (loss, g) = res.map_err(|e| diverged(epoch, format!("batch {b}: {e}")))?;
                    loss_sum += loss;
                    for (acc, v) in grad.iter_mut().zip(&g) {
                        *acc += v;
                    }
                }
                let scale = 1.0 / batch.len() as f64;
                grad.iter_mut().for_each(|v| *v *= scale);
                if !loss_sum.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                    return Err(diverged(epoch, format!("non-finite loss or gradient in batch {b}")));
                }
                step += 1;
                for (li, layer) in net.layers.iter_mut().enumerate() {
                    adam_update(
                        layer,
                        &grad[li * PARAMS_PER_LAYER..(li + 1) * PARAMS_PER_LAYER],
                        step,
                        lr,
                        &cfg.adam,
                    );
                }
            }
            let train_loss = loss_sum / data.train.len() as f64;
            let val_loss = validate(&net, sys, &val, cfg).map_err(|e| diverged(epoch, format!("validation: {e}")))?;
            if !val_loss.is_finite() {
                return Err(diverged(epoch, "non-finite validation loss".into()));
            }
            total_epochs += 1;
            let improved = val_loss < best;
            let epoch_lr = lr;
            if improved {
                best = val_loss;
                best_net = net.clone();
                best_epoch = epoch;
                since_best = 0;
                since_decay = 0;
            } else {
                since_best += 1;
                since_decay += 1;
            }
            let mut event = EpochEvent::None;
            if since_best >= cfg.early_stop_patience {
                event = EpochEvent::EarlyStop;
            } else if since_decay >= cfg.lr_patience {
                lr *= cfg.lr_decay;
                since_decay = 0;
                event = EpochEvent::LrDecay;
            } else if epoch == cfg.max_epochs {
                event = EpochEvent::MaxEpochs;
            }
            let rec = EpochRecord {
                stage,
                depth,
                epoch,
                train_loss,
                val_loss,
                lr: epoch_lr,
                improved,
                event,
            };
            log(&rec);
            epochs.push(rec);
            if event == EpochEvent::EarlyStop {
                break;
            }
        }
        net = best_net;
        last_val = best;
        report.stages.push(StageReport {
            stage,
            depth,
            stop_epoch: epochs.last().map_or(0, |e| e.epoch),
            epochs,
            best_epoch,
            best_val_loss: best,
        });
    }
    net.metadata.epochs = total_epochs;
    net.metadata.final_val_loss = last_val;
    net.metadata.config_hash = sys.cfg.hash();

    if let Some(test) = data.test {
        let channels: Vec<_> = test.samples.iter().map(|s| s.h.clone()).collect();
        let scores = evaluate_paired(sys, &channels, &[AlgoRun::learned(cfg.algo(), &net)], &[3])?;
        report.final_test_nmse_db = Some(scores[0].nmse_db());
    }
    Ok((net, report))
}

/// A fresh, untrained network for `cfg`'s grid.
pub fn empty_net(sys_cfg: &SystemConfig, mode: FeatureMode) -> MStepNet {
    MStepNet::new(sys_cfg.grid_angular, sys_cfg.grid_delay, mode)
}
