//! Continuity regulation of a generator, curve lengths, and the empirical
//! continuity constant.
//!
//! The regulation term samples two latent points `z0`, `zT` and a mixing
//! weight `λ`, and penalizes how far `G(z0 + λ(zT − z0))` is from the convex
//! combination `λ G(zT) + (1 − λ) G(z0)`. It is added to the generator's own
//! reconstruction loss and both are minimized by SGD.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Affine, Layer, Network, TIE_TOLERANCE};

/// Distribution the latent points are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LatentPrior {
    Uniform { low: f64, high: f64 },
    Normal { std: f64 },
}

impl Default for LatentPrior {
    fn default() -> Self {
        LatentPrior::Uniform {
            low: -1.0,
            high: 1.0,
        }
    }
}

impl LatentPrior {
    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> DVector<f64> {
        match *self {
            LatentPrior::Uniform { low, high } => {
                DVector::from_fn(dim, |_, _| rng.gen_range(low..=high))
            }
            LatentPrior::Normal { std } => {
                DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal) * std)
            }
        }
    }
}

/// `(z0, zT, λ)` with `z_ti = z0 + λ (zT − z0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSample {
    pub z0: DVector<f64>,
    pub zt: DVector<f64>,
    pub lambda: f64,
    pub z_ti: DVector<f64>,
}

impl TripletSample {
    pub fn new(z0: DVector<f64>, zt: DVector<f64>, lambda: f64) -> Result<Self> {
        if z0.len() != zt.len() {
            return Err(Error::shape("triplet endpoint", z0.len(), zt.len()));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Range(format!("lambda {lambda} outside [0, 1]")));
        }
        let z_ti = &z0 + (&zt - &z0) * lambda;
        Ok(TripletSample { z0, zt, lambda, z_ti })
    }

    pub fn sample<R: Rng + ?Sized>(prior: &LatentPrior, dim: usize, rng: &mut R) -> Self {
        let z0 = prior.sample(dim, rng);
        let zt = prior.sample(dim, rng);
        let lambda = rng.gen_range(0.0..=1.0);
        TripletSample::new(z0, zt, lambda).expect("sampled triplet is valid")
    }
}

/// Sign convention of the regulation residual.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContinuityForm {
    /// `λ G(zT) + (1 − λ) G(z0) − G(z_ti)`: vanishes at both endpoints.
    #[default]
    Convex,
    /// `λ G(zT) − G(z_ti) − (1 − λ) G(z0)`, kept for auditing.
    Literal,
}

impl ContinuityForm {
    /// Coefficients applied to `(G(zT), G(z0), G(z_ti))`.
    fn coefficients(self, lambda: f64) -> (f64, f64, f64) {
        match self {
            ContinuityForm::Convex => (lambda, 1.0 - lambda, -1.0),
            ContinuityForm::Literal => (lambda, -(1.0 - lambda), -1.0),
        }
    }
}

pub fn continuity_loss(g: &Network, s: &TripletSample) -> Result<f64> {
    continuity_loss_with(g, s, ContinuityForm::Convex)
}

pub fn continuity_loss_with(g: &Network, s: &TripletSample, form: ContinuityForm) -> Result<f64> {
    let (a, b, c) = form.coefficients(s.lambda);
    let residual = g.forward(&s.zt)? * a + g.forward(&s.z0)? * b + g.forward(&s.z_ti)? * c;
    Ok(residual.norm())
}

/// Regulation term for a generator conditioned on an extent input: `G`
/// takes `[a; δ]` and the segment runs over `δ` with `a` fixed.
pub fn conditioned_continuity_loss(
    g: &Network,
    a: &DVector<f64>,
    delta_0: &DVector<f64>,
    delta_t: &DVector<f64>,
    lambda: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Range(format!("lambda {lambda} outside [0, 1]")));
    }
    let stack = |d: &DVector<f64>| -> DVector<f64> {
        DVector::from_iterator(a.len() + d.len(), a.iter().chain(d.iter()).copied())
    };
    let delta_ti = delta_0 + (delta_t - delta_0) * lambda;
    let residual = g.forward(&stack(delta_t))? * lambda + g.forward(&stack(delta_0))? * (1.0 - lambda)
        - g.forward(&stack(&delta_ti))?;
    Ok(residual.norm())
}

/// Mean regulation loss over `n` fresh triplets.
pub fn mean_continuity_loss(g: &Network, prior: &LatentPrior, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n {
        total += continuity_loss(g, &TripletSample::sample(prior, g.input_dim, &mut rng))?;
    }
    Ok(total / n.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Training

/// Paired latent codes and target outputs, one sample per column.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub latents: DMatrix<f64>,
    pub targets: DMatrix<f64>,
}

impl TrainingSet {
    pub fn new(latents: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        if latents.ncols() != targets.ncols() {
            return Err(Error::shape("training targets", latents.ncols(), targets.ncols()));
        }
        if latents.ncols() == 0 {
            return Err(Error::Domain("training set is empty".into()));
        }
        Ok(TrainingSet { latents, targets })
    }

    pub fn len(&self) -> usize {
        self.latents.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
    }

    /// Mean squared reconstruction error of `g` over the whole set.
    pub fn reconstruction_loss(&self, g: &Network) -> Result<f64> {
        let out = g.forward_batch(&self.latents)?;
        let diff = out - &self.targets;
        Ok(diff.norm_squared() / (diff.nrows() * diff.ncols()) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight of the regulation term; 0 trains on reconstruction only.
    pub loss_weight: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Regulation triplets drawn per mini-batch.
    #[serde(default = "default_triplets")]
    pub triplets_per_batch: usize,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub prior: LatentPrior,
    #[serde(default)]
    pub form: ContinuityForm,
}

fn default_batch() -> usize {
    32
}

fn default_triplets() -> usize {
    8
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.05,
            seed: 0,
            loss_weight: 0.0,
            batch_size: default_batch(),
            triplets_per_batch: default_triplets(),
            momentum: 0.0,
            prior: LatentPrior::default(),
            form: ContinuityForm::Convex,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<EpochRecord>,
}

/// Layer inputs recorded during a batched forward pass.
struct Tape {
    inputs: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

fn forward_tape(net: &Network, x: DMatrix<f64>) -> Tape {
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut acc = x;
    for layer in &net.layers {
        let next = match layer {
            Layer::Affine(a) => {
                let mut out = &a.weights * &acc;
                for mut col in out.column_iter_mut() {
                    col += &a.bias;
                }
                out
            }
            Layer::Relu => acc.map(crate::network::relu),
            Layer::Clamp01 => acc.map(crate::network::clamp01),
            Layer::Clamp11 => acc.map(crate::network::clamp11),
        };
        inputs.push(acc);
        acc = next;
    }
    Tape {
        inputs,
        output: acc,
    }
}

fn pointwise_slope(layer: &Layer, x: f64) -> f64 {
    match layer {
        Layer::Relu => (x > TIE_TOLERANCE) as u8 as f64,
        Layer::Clamp01 => -((x > TIE_TOLERANCE && x < 1.0 - TIE_TOLERANCE) as u8 as f64),
        Layer::Clamp11 => -((x > TIE_TOLERANCE && x < 2.0 - TIE_TOLERANCE) as u8 as f64),
        Layer::Affine(_) => unreachable!(),
    }
}

/// Accumulates parameter gradients of `<grad_out, net(x)>` into `grads`.
fn backward(net: &Network, tape: &Tape, grad_out: DMatrix<f64>, grads: &mut [Option<Affine>]) {
    let mut g = grad_out;
    for (idx, layer) in net.layers.iter().enumerate().rev() {
        let input = &tape.inputs[idx];
        match layer {
            Layer::Affine(a) => {
                if let Some(acc) = grads[idx].as_mut() {
                    acc.weights.gemm(1.0, &g, &input.transpose(), 1.0);
                    for col in g.column_iter() {
                        acc.bias += col;
                    }
                }
                if idx > 0 {
                    g = a.weights.tr_mul(&g);
                }
            }
            _ => {
                g.zip_apply(input, |gv, x| *gv *= pointwise_slope(layer, x));
            }
        }
    }
}

fn zero_grads(net: &Network) -> Vec<Option<Affine>> {
    net.layers
        .iter()
        .map(|l| match l {
            Layer::Affine(a) => Some(Affine {
                weights: DMatrix::zeros(a.weights.nrows(), a.weights.ncols()),
                bias: DVector::zeros(a.bias.len()),
            }),
            _ => None,
        })
        .collect()
}

/// Trains `g0` on reconstruction loss plus `loss_weight` times the
/// regulation term with mini-batch SGD.
pub fn regulate_train(g0: &Network, data: &TrainingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.latents.nrows() != g0.input_dim {
        return Err(Error::shape("training latents", g0.input_dim, data.latents.nrows()));
    }
    if data.targets.nrows() != g0.output_dim {
        return Err(Error::shape("training targets", g0.output_dim, data.targets.nrows()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Range("batch_size must be positive".into()));
    }
    let mut net = g0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity = zero_grads(&net);
    let out_dim = net.output_dim as f64;
    let dim = net.input_dim;
    let regulate = cfg.loss_weight != 0.0 && cfg.triplets_per_batch > 0;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut l1_sum, mut l2_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = zero_grads(&net);
            let b = chunk.len() as f64;

            let x = TrainingSet::columns(&data.latents, chunk);
            let target = TrainingSet::columns(&data.targets, chunk);
            let tape = forward_tape(&net, x);
            let diff = &tape.output - target;
            let l1 = diff.norm_squared() / (out_dim * b);
            backward(&net, &tape, diff * (2.0 / (out_dim * b)), &mut grads);

            let mut l2 = 0.0;
            if regulate {
                let k = cfg.triplets_per_batch;
                let mut stacked = DMatrix::zeros(dim, 3 * k);
                let mut coeffs = Vec::with_capacity(k);
                for i in 0..k {
                    let s = TripletSample::sample(&cfg.prior, dim, &mut rng);
                    stacked.set_column(3 * i, &s.zt);
                    stacked.set_column(3 * i + 1, &s.z0);
                    stacked.set_column(3 * i + 2, &s.z_ti);
                    coeffs.push(cfg.form.coefficients(s.lambda));
                }
                let tape = forward_tape(&net, stacked);
                let mut grad_out = DMatrix::zeros(net.output_dim, 3 * k);
                for (i, &(ca, cb, cc)) in coeffs.iter().enumerate() {
                    let residual = tape.output.column(3 * i) * ca
                        + tape.output.column(3 * i + 1) * cb
                        + tape.output.column(3 * i + 2) * cc;
                    let norm = residual.norm();
                    l2 += norm;
                    if norm > 0.0 {
                        let unit = residual / norm * (cfg.loss_weight / k as f64);
                        grad_out.set_column(3 * i, &(&unit * ca));
                        grad_out.set_column(3 * i + 1, &(&unit * cb));
                        grad_out.set_column(3 * i + 2, &(&unit * cc));
                    }
                }
                l2 /= k as f64;
                backward(&net, &tape, grad_out, &mut grads);
            }

            if !l1.is_finite() || !l2.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("non-finite loss (L1 = {l1}, L2 = {l2})"),
                });
            }
            l1_sum += l1;
            l2_sum += l2;
            batches += 1;

            for ((layer, grad), vel) in net.layers.iter_mut().zip(&grads).zip(velocity.iter_mut()) {
                if let (Layer::Affine(a), Some(g), Some(v)) = (layer, grad, vel.as_mut()) {
                    v.weights *= cfg.momentum;
                    v.weights += &g.weights;
                    v.bias *= cfg.momentum;
                    v.bias += &g.bias;
                    a.weights -= &v.weights * cfg.lr;
                    a.bias -= &v.bias * cfg.lr;
                }
            }
        }
        let record = EpochRecord {
            epoch,
            l1: l1_sum / batches as f64,
            l2: l2_sum / batches as f64,
        };
        if net.layers.iter().any(|l| match l {
            Layer::Affine(a) => a.weights.iter().any(|w| !w.is_finite()),
            _ => false,
        }) {
            return Err(Error::Training {
                epoch,
                message: "non-finite weights".into(),
            });
        }
        history.push(record);
    }
    Ok(TrainOutcome {
        network: net,
        history,
    })
}

/// Writes `epoch,L1,L2` rows.
pub fn write_history_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "epoch,L1,L2")?;
    for r in history {
        writeln!(out, "{},{},{}", r.epoch, r.l1, r.l2)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Curve length and the continuity constant

/// `Σ_{i<N} ‖G(z_i + Δz) − G(z_i)‖` with `Δz = (z2 − z) / N` and `z_i = z + iΔz`.
pub fn curve_length(g: &Network, z: &DVector<f64>, z2: &DVector<f64>, steps: usize) -> Result<f64> {
    if steps < 1 {
        return Err(Error::Range("curve length needs at least one step".into()));
    }
    if z.len() != z2.len() {
        return Err(Error::shape("curve endpoint", z.len(), z2.len()));
    }
    let dz = (z2 - z) / steps as f64;
    let points = DMatrix::from_fn(z.len(), steps + 1, |r, c| z[r] + dz[r] * c as f64);
    let out = g.forward_batch(&points)?;
    Ok((0..steps)
        .map(|i| (out.column(i + 1) - out.column(i)).norm())
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityEstimate {
    /// `max` over pairs of `max(ratio, 1/ratio)`.
    pub c: f64,
    pub samples: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub p05: f64,
    pub p50: f64,
    pub p95: f64,
}

impl ContinuityEstimate {
    /// `ℓ_Z / (slack·C) <= ℓ_M <= slack·C·ℓ_Z` for one observed ratio `ℓ_M / ℓ_Z`.
    pub fn sandwich_holds(&self, ratio: f64, slack: f64) -> bool {
        let c = self.c * slack;
        ratio >= 1.0 / c && ratio <= c
    }
}

/// Curve-length to latent-distance ratios for `samples` prior pairs.
pub fn continuity_ratios(
    g: &Network,
    prior: &LatentPrior,
    samples: usize,
    seed: u64,
    steps: usize,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::with_capacity(samples);
    while ratios.len() < samples {
        let z = prior.sample(g.input_dim, &mut rng);
        let z2 = prior.sample(g.input_dim, &mut rng);
        let dist = (&z2 - &z).norm();
        if dist < 1e-9 {
            continue;
        }
        ratios.push(curve_length(g, &z, &z2, steps)? / dist);
    }
    Ok(ratios)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Empirical continuity constant over `samples` latent pairs.
pub fn estimate_c(
    g: &Network,
    prior: &LatentPrior,
    samples: usize,
    seed: u64,
    steps: usize,
) -> Result<ContinuityEstimate> {
    if samples < 2 {
        return Err(Error::Range("estimating C needs at least two samples".into()));
    }
    let mut ratios = continuity_ratios(g, prior, samples, seed, steps)?;
    ratios.sort_by(f64::total_cmp);
    let min_ratio = ratios[0];
    let max_ratio = *ratios.last().unwrap();
    let c = ratios
        .iter()
        .map(|&r| if r > 0.0 { r.max(1.0 / r) } else { f64::INFINITY })
        .fold(1.0, f64::max);
    Ok(ContinuityEstimate {
        c,
        samples,
        min_ratio,
        max_ratio,
        p05: quantile(&ratios, 0.05),
        p50: quantile(&ratios, 0.5),
        p95: quantile(&ratios, 0.95),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Affine;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn scaled_identity(dim: usize, s: f64) -> Network {
        Network::new(
            "scaled",
            dim,
            vec![Layer::Affine(Affine {
                weights: DMatrix::identity(dim, dim) * s,
                bias: DVector::zeros(dim),
            })],
        )
        .unwrap()
    }

    #[test]
    fn loss_vanishes_at_endpoints() {
        let g = Network::random("g", &[3, 8, 5], 1);
        let z0 = v(&[0.1, -0.5, 0.9]);
        let zt = v(&[-0.7, 0.2, 0.3]);
        for lambda in [0.0, 1.0] {
            let s = TripletSample::new(z0.clone(), zt.clone(), lambda).unwrap();
            assert!(continuity_loss(&g, &s).unwrap() < 1e-12);
        }
        // The literal sign does not vanish at λ = 0.
        let s = TripletSample::new(z0, zt, 0.0).unwrap();
        assert!(continuity_loss_with(&g, &s, ContinuityForm::Literal).unwrap() > 1e-3);
    }

    #[test]
    fn affine_generator_has_zero_loss() {
        let g = Network::random("g", &[3, 4], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = TripletSample::sample(&LatentPrior::default(), 3, &mut rng);
            assert!(continuity_loss(&g, &s).unwrap() < 1e-12);
        }
    }

    #[test]
    fn triplet_validation() {
        assert!(TripletSample::new(v(&[0.0]), v(&[1.0]), 1.5).is_err());
        assert!(TripletSample::new(v(&[0.0]), v(&[1.0, 2.0]), 0.5).is_err());
        let s = TripletSample::new(v(&[0.0, 2.0]), v(&[1.0, 0.0]), 0.25).unwrap();
        assert_eq!(s.z_ti, v(&[0.25, 1.5]));
    }

    #[test]
    fn conditioned_loss_vanishes_at_endpoints() {
        let g = Network::random("g", &[3, 6, 2], 4);
        let a = v(&[0.3, -0.2]);
        let (d0, dt) = (v(&[0.0]), v(&[1.0]));
        assert!(conditioned_continuity_loss(&g, &a, &d0, &dt, 0.0).unwrap() < 1e-12);
        assert!(conditioned_continuity_loss(&g, &a, &d0, &dt, 1.0).unwrap() < 1e-12);
    }

    #[test]
    fn curve_length_examples() {
        let id = Network::identity(2);
        let z = v(&[0.0, 0.0]);
        let z2 = v(&[2.0, 0.0]);
        for n in [1, 7, 100] {
            assert!((curve_length(&id, &z, &z2, n).unwrap() - 2.0).abs() < 1e-12);
        }
        let constant = Network::new(
            "c",
            2,
            vec![Layer::Affine(Affine::new(DMatrix::zeros(3, 2), v(&[1.0, 2.0, 3.0])).unwrap())],
        )
        .unwrap();
        assert_eq!(curve_length(&constant, &z, &z2, 10).unwrap(), 0.0);
        assert!(matches!(curve_length(&id, &z, &z2, 0), Err(Error::Range(_))));
    }

    #[test]
    fn c_of_scaled_identity() {
        let prior = LatentPrior::default();
        let est = estimate_c(&Network::identity(3), &prior, 20, 1, 4).unwrap();
        assert!((est.c - 1.0).abs() < 1e-12);
        let est = estimate_c(&scaled_identity(3, 2.0), &prior, 20, 1, 4).unwrap();
        assert!((est.c - 2.0).abs() < 1e-12);
        let est = estimate_c(&scaled_identity(3, 0.25), &prior, 20, 1, 4).unwrap();
        assert!((est.c - 4.0).abs() < 1e-12);
        assert!(estimate_c(&Network::identity(3), &prior, 1, 1, 4).is_err());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let g = Network::random("g", &[2, 4, 3], 5);
        let data = TrainingSet::new(DMatrix::zeros(2, 4), DMatrix::zeros(3, 4)).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(regulate_train(&g, &data, &cfg).unwrap().network, g);
    }

    /// Finite-difference check of the analytic gradients of L1 + w·L2.
    #[test]
    fn gradients_match_finite_differences() {
        let mut layers = Network::random("g", &[2, 5, 3], 9).layers;
        layers.push(Layer::Clamp11);
        let g = Network::new("g", 2, layers).unwrap();
        let x = DMatrix::from_row_slice(2, 3, &[0.1, -0.4, 0.7, 0.5, 0.2, -0.9]);
        let target = DMatrix::from_fn(3, 3, |r, c| 0.1 * (r as f64) - 0.2 * c as f64);
        let s = TripletSample::new(v(&[0.3, -0.6]), v(&[-0.5, 0.8]), 0.35).unwrap();
        let w = 0.7;

        let loss = |net: &Network| -> f64 {
            let out = net.forward_batch(&x).unwrap();
            let l1 = (out - &target).norm_squared() / 9.0;
            l1 + w * continuity_loss(net, &s).unwrap()
        };

        let mut grads = zero_grads(&g);
        let tape = forward_tape(&g, x.clone());
        backward(&g, &tape, (&tape.output - &target) * (2.0 / 9.0), &mut grads);
        let mut stacked = DMatrix::zeros(2, 3);
        stacked.set_column(0, &s.zt);
        stacked.set_column(1, &s.z0);
        stacked.set_column(2, &s.z_ti);
        let tape = forward_tape(&g, stacked);
        let (ca, cb, cc) = ContinuityForm::Convex.coefficients(s.lambda);
        let r = tape.output.column(0) * ca + tape.output.column(1) * cb + tape.output.column(2) * cc;
        let unit = &r / r.norm() * w;
        let mut go = DMatrix::zeros(3, 3);
        go.set_column(0, &(&unit * ca));
        go.set_column(1, &(&unit * cb));
        go.set_column(2, &(&unit * cc));
        backward(&g, &tape, go, &mut grads);

        let h = 1e-6;
        for (li, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            for (k, analytic) in grad.weights.iter().enumerate() {
                let mut plus = g.clone();
                let mut minus = g.clone();
                if let Layer::Affine(a) = &mut plus.layers[li] {
                    a.weights[k] += h;
                }
                if let Layer::Affine(a) = &mut minus.layers[li] {
                    a.weights[k] -= h;
                }
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!((numeric - analytic).abs() < 1e-5, "layer {li} weight {k}: {numeric} vs {analytic}");
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let g0 = Network::random("g", &[2, 16, 4], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let latents = DMatrix::<f64>::from_fn(2, 64, |_, _| rng.gen_range(-1.0..1.0));
        let targets = DMatrix::from_fn(4, 64, |r, c| (latents[(r % 2, c)] * 2.0).abs());
        let data = TrainingSet::new(latents, targets).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            lr: 0.02,
            seed: 4,
            loss_weight: 0.1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let a = regulate_train(&g0, &data, &cfg).unwrap();
        let b = regulate_train(&g0, &data, &cfg).unwrap();
        assert_eq!(a.network, b.network);
        assert_eq!(a.history, b.history);
        assert!(data.reconstruction_loss(&a.network).unwrap() < data.reconstruction_loss(&g0).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let g0 = Network::random("g", &[2, 2], 6);
        let latents = DMatrix::from_element(2, 8, 1.0);
        let targets = DMatrix::from_element(2, 8, 1e3);
        let data = TrainingSet::new(latents, targets).unwrap();
        let cfg = TrainConfig {
            epochs: 400,
            lr: 10.0,
            ..TrainConfig::default()
        };
        assert!(matches!(regulate_train(&g0, &data, &cfg), Err(Error::Training { .. })));
    }
}
