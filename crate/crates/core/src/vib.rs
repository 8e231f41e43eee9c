//! Intent bottleneck: posterior encoder, reparameterized sampling, the
//! closed-form KL against a discrete-time Ornstein–Uhlenbeck prior, and the
//! β warm-up/anneal schedule.
//!
//! The prior is `p(z_i | z_{i-1}) = N(α z_{i-1}, σ_p² I)` with `μ_0 = 0`. The
//! KL term penalizes `μ_i − α μ_{i-1}`, so components that vary from step to
//! step pay far more than components that stay put.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{DenseArray, Graph, NodeId, ParamSet};
use crate::rng::StreamRng;

/// Posterior σ is clamped into this range.
pub const SIGMA_MIN: f64 = 1e-4;
pub const SIGMA_MAX: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuPriorConfig {
    pub alpha: f64,
    pub sigma_p: f64,
    pub beta_max: f64,
    pub warmup_fraction: f64,
}

impl Default for OuPriorConfig {
    fn default() -> Self {
        OuPriorConfig {
            alpha: 0.95,
            sigma_p: 0.5,
            beta_max: 0.5,
            warmup_fraction: 0.10,
        }
    }
}

impl OuPriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::contract(format!(
                "alpha must be in (0,1), got {}",
                self.alpha
            )));
        }
        if !(self.sigma_p > 0.0 && self.sigma_p.is_finite()) {
            return Err(Error::contract(format!(
                "sigma_p must be positive, got {}",
                self.sigma_p
            )));
        }
        if !(self.beta_max >= 0.0 && self.beta_max.is_finite()) {
            return Err(Error::contract(format!(
                "beta_max must be nonnegative, got {}",
                self.beta_max
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::contract(format!(
                "warmup_fraction must be in [0,1), got {}",
                self.warmup_fraction
            )));
        }
        Ok(())
    }
}

/// Per-step diagonal Gaussian posterior `q(z_i | h_i) = N(μ_i, diag σ_i²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentPosterior {
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

impl IntentPosterior {
    pub fn new(mu: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::contract(format!(
                "posterior has {} means but {} scales",
                mu.len(),
                sigma.len()
            )));
        }
        for (m, s) in mu.iter().zip(&sigma) {
            if m.len() != s.len() {
                return Err(Error::contract("posterior mean/scale dimension mismatch"));
            }
            if let Some(bad) = s.iter().find(|v| !(**v > 0.0)) {
                return Err(Error::contract(format!(
                    "posterior scale must be positive, got {bad}"
                )));
            }
        }
        Ok(IntentPosterior { mu, sigma })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentSample {
    pub z: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    TrainSample,
    InferMean,
}

/// Per-position linear encoder `h -> (μ, log σ²)`.
///
/// Positions never mix, which keeps `E -> H -> Z` a Markov chain.
pub mod encoder {
    use super::*;

    pub const W_MU: &str = "intent.w_mu";
    pub const B_MU: &str = "intent.b_mu";
    pub const W_LOGVAR: &str = "intent.w_logvar";
    pub const B_LOGVAR: &str = "intent.b_logvar";

    pub const NAMES: [&str; 4] = [W_MU, B_MU, W_LOGVAR, B_LOGVAR];

    /// Inserts encoder parameters; `scale = 0` gives the zero-initialized encoder.
    pub fn init(params: &mut ParamSet, d_in: usize, d_z: usize, scale: f64, rng: &mut StreamRng) {
        params.insert(W_MU.into(), DenseArray::randn(&[d_in, d_z], scale, rng));
        params.insert(B_MU.into(), DenseArray::zeros(&[d_z]));
        params.insert(W_LOGVAR.into(), DenseArray::randn(&[d_in, d_z], scale, rng));
        params.insert(B_LOGVAR.into(), DenseArray::zeros(&[d_z]));
    }

    /// Graph nodes of an encoded posterior.
    #[derive(Debug, Clone, Copy)]
    pub struct PosteriorNodes {
        pub mu: NodeId,
        pub sigma: NodeId,
    }

    pub fn forward(g: &mut Graph, params: &ParamSet, h: NodeId) -> Result<PosteriorNodes> {
        let w_mu = g.param(W_MU, &params[W_MU]);
        let b_mu = g.param(B_MU, &params[B_MU]);
        let w_lv = g.param(W_LOGVAR, &params[W_LOGVAR]);
        let b_lv = g.param(B_LOGVAR, &params[B_LOGVAR]);
        let mu = g.matmul(h, w_mu)?;
        let mu = g.add(mu, b_mu)?;
        let lv = g.matmul(h, w_lv)?;
        let lv = g.add(lv, b_lv)?;
        let lv = g.clamp(lv, 2.0 * SIGMA_MIN.ln(), 2.0 * SIGMA_MAX.ln())?;
        let half = g.scale(lv, 0.5)?;
        let sigma = g.exp(half)?;
        Ok(PosteriorNodes { mu, sigma })
    }
}

/// Encodes each hidden vector independently into `(μ_i, σ_i)`.
pub fn encode_posterior(params: &ParamSet, h_seq: &[Vec<f64>]) -> Result<IntentPosterior> {
    if h_seq.is_empty() {
        return Err(Error::contract("encode_posterior: empty hidden sequence"));
    }
    let d = h_seq[0].len();
    if h_seq.iter().any(|h| h.len() != d) {
        return Err(Error::contract(
            "encode_posterior: hidden vectors differ in dimension",
        ));
    }
    let mut g = Graph::new();
    let h = g.constant(DenseArray::from_rows(h_seq)?);
    let nodes = encoder::forward(&mut g, params, h)?;
    let rows = |a: &DenseArray| (0..a.rows()).map(|r| a.row(r).to_vec()).collect::<Vec<_>>();
    IntentPosterior::new(rows(g.value(nodes.mu)), rows(g.value(nodes.sigma)))
}

/// `z_i = μ_i + σ_i ⊙ ε` in train mode, `z_i = μ_i` in infer mode.
pub fn sample_intent(
    post: &IntentPosterior,
    rng: &mut StreamRng,
    mode: SampleMode,
) -> IntentSample {
    let z = match mode {
        SampleMode::InferMean => post.mu.clone(),
        SampleMode::TrainSample => post
            .mu
            .iter()
            .zip(&post.sigma)
            .map(|(m, s)| m.iter().zip(s).map(|(m, s)| m + s * rng.normal()).collect())
            .collect(),
    };
    IntentSample { z }
}

/// In-graph reparameterized sample. The noise is a constant leaf.
pub fn sample_graph(
    g: &mut Graph,
    post: encoder::PosteriorNodes,
    rng: &mut StreamRng,
    mode: SampleMode,
) -> Result<NodeId> {
    match mode {
        SampleMode::InferMean => Ok(post.mu),
        SampleMode::TrainSample => {
            let shape = g.value(post.mu).shape().to_vec();
            let eps = g.constant(DenseArray::randn(&shape, 1.0, rng));
            let noise = g.mul(post.sigma, eps)?;
            g.add(post.mu, noise)
        }
    }
}

/// Closed-form `KL(N(μ_i, σ_i²) || N(α μ_prev, σ_p²))` summed over dimensions.
pub fn kl_ou_step(
    mu_i: &[f64],
    sigma_i: &[f64],
    mu_prev: &[f64],
    cfg: &OuPriorConfig,
) -> Result<f64> {
    if mu_i.len() != sigma_i.len() || mu_i.len() != mu_prev.len() {
        return Err(Error::contract(format!(
            "kl_ou_step: dims {} / {} / {} differ",
            mu_i.len(),
            sigma_i.len(),
            mu_prev.len()
        )));
    }
    if let Some(bad) = sigma_i.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::contract(format!(
            "kl_ou_step: nonpositive sigma {bad}"
        )));
    }
    let sp2 = cfg.sigma_p * cfg.sigma_p;
    let kl = mu_i
        .iter()
        .zip(sigma_i)
        .zip(mu_prev)
        .map(|((&m, &s), &mp)| {
            let s2 = s * s;
            let d = m - cfg.alpha * mp;
            (sp2 / s2).ln() + (s2 + d * d) / sp2 - 1.0
        })
        .sum::<f64>();
    Ok(0.5 * kl)
}

/// Sequence KL with `μ_0 = 0` and the previous mean detached.
pub fn kl_ou_sequence(post: &IntentPosterior, cfg: &OuPriorConfig) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..post.len() {
        let zero;
        let prev = if i == 0 {
            zero = vec![0.0; post.mu[0].len()];
            &zero
        } else {
            &post.mu[i - 1]
        };
        total += kl_ou_step(&post.mu[i], &post.sigma[i], prev, cfg)?;
    }
    Ok(total)
}

/// Matrix `S` with `(S·μ)_i = μ_{i-1}` inside each segment and zero at segment starts.
fn shift_matrix(lengths: &[usize]) -> DenseArray {
    let n: usize = lengths.iter().sum();
    let mut s = DenseArray::zeros(&[n, n]);
    let mut start = 0;
    for &len in lengths {
        for i in 1..len {
            let r = start + i;
            s.data_mut()[r * n + r - 1] = 1.0;
        }
        start += len;
    }
    s
}

/// In-graph sequence KL over stacked segments (rows of `mu`/`sigma`).
///
/// `lengths` splits the rows into independent sequences, each with its own
/// `μ_0 = 0` boundary. The previous mean passes through `stop_gradient` here,
/// so no caller can forget it.
pub fn kl_ou_graph(
    g: &mut Graph,
    mu: NodeId,
    sigma: NodeId,
    lengths: &[usize],
    cfg: &OuPriorConfig,
) -> Result<NodeId> {
    let rows = g.value(mu).rows();
    if lengths.iter().sum::<usize>() != rows || lengths.contains(&0) {
        return Err(Error::contract(format!(
            "kl_ou_graph: segment lengths {lengths:?} do not cover {rows} rows"
        )));
    }
    let shift = g.constant(shift_matrix(lengths));
    let prev = g.matmul(shift, mu)?;
    let prev = g.stop_gradient(prev)?;
    let prior_mean = g.scale(prev, cfg.alpha)?;
    let diff = g.sub(mu, prior_mean)?;
    let diff2 = g.square(diff)?;
    let s2 = g.square(sigma)?;
    let num = g.add(s2, diff2)?;
    let sp2 = cfg.sigma_p * cfg.sigma_p;
    let ratio = g.scale(num, 1.0 / sp2)?;
    let log_s2 = g.log(s2)?;
    // log σ_p² − log σ² + ratio − 1
    let t = g.sub(ratio, log_s2)?;
    let t = g.offset(t, sp2.ln() - 1.0)?;
    let total = g.sum(t)?;
    g.scale(total, 0.5)
}

/// Monte-Carlo `KL(q || p)` between diagonal Gaussians, written from the densities.
///
/// Returns `(estimate, standard error)`.
pub fn kl_monte_carlo(
    mu_q: &[f64],
    sigma_q: &[f64],
    mu_p: &[f64],
    sigma_p: f64,
    n_samples: usize,
    rng: &mut StreamRng,
) -> Result<(f64, f64)> {
    if n_samples < 10_000 {
        return Err(Error::contract(format!(
            "kl_monte_carlo needs >= 1e4 samples, got {n_samples}"
        )));
    }
    if mu_q.len() != sigma_q.len() || mu_q.len() != mu_p.len() {
        return Err(Error::contract("kl_monte_carlo: dimension mismatch"));
    }
    let log_normal =
        |x: f64, m: f64, s: f64| -0.5 * (2.0 * PI * s * s).ln() - (x - m) * (x - m) / (2.0 * s * s);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let mut lr = 0.0;
        for k in 0..mu_q.len() {
            let z = mu_q[k] + sigma_q[k] * rng.normal();
            lr += log_normal(z, mu_q[k], sigma_q[k]) - log_normal(z, mu_p[k], sigma_p);
        }
        sum += lr;
        sum_sq += lr * lr;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// β at `step`: zero through warm-up, then a half-period raised cosine to `beta_max`.
pub fn beta_schedule(step: usize, total_steps: usize, cfg: &OuPriorConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract(
            "beta_schedule: total_steps must be positive",
        ));
    }
    if step > total_steps {
        return Err(Error::contract(format!(
            "beta_schedule: step {step} > total {total_steps}"
        )));
    }
    let t_w = cfg.warmup_fraction * total_steps as f64;
    let s = step as f64;
    if s < t_w {
        return Ok(0.0);
    }
    let frac = (s - t_w) / (total_steps as f64 - t_w);
    Ok(cfg.beta_max * 0.5 * (1.0 - (PI * frac).cos()))
}
