//! The factorized recurrent Kalman cell.
//!
//! The latent state of dimension `n = 2m` is split into an upper half, which
//! the encoder observes directly through `H = [I_m 0]`, and a lower half that
//! carries information inferred over time. The covariance is restricted to
//! a 2x2 block matrix whose four `m x m` blocks are diagonal:
//!
//! ```text
//!     | diag(upper_var)  diag(cross_cov) |
//!     | diag(cross_cov)  diag(lower_var) |
//! ```
//!
//! With this structure the Kalman gain and update reduce to elementwise
//! operations per latent dimension. The predict step uses a locally linear
//! transition `A_t = sum_k alpha_k(z) A_k` built from banded basis matrices,
//! plus the additive control increment `b(a_t)`.
//!
//! All operations are recorded on a [`Graph`] so they take part in
//! backpropagation through time. Every belief field is a `[batch, m]` node.
//! Value-level helpers on [`FactorizedBelief`] wrap the same graph code for
//! single-belief use.

use acrkn_numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::Dense;

/// Slack allowed on `cross_cov^2 <= upper_var * lower_var`.
pub const PSD_SLACK: f64 = 1e-12;

/// Latent sizes. Only the observed half `m` is stored; `n = 2m` always.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentDims {
    m: usize,
}

impl LatentDims {
    pub fn new(latent_obs_dim: usize) -> Result<Self> {
        if latent_obs_dim == 0 {
            return Err(CoreError::Config("latent observation dimension must be >= 1".into()));
        }
        Ok(Self { m: latent_obs_dim })
    }

    /// Checks `n = 2m` for an explicitly configured pair.
    pub fn from_pair(latent_obs_dim: usize, latent_state_dim: usize) -> Result<Self> {
        if latent_state_dim != 2 * latent_obs_dim {
            return Err(CoreError::Config(format!(
                "latent state dimension {latent_state_dim} must be twice the latent observation dimension {latent_obs_dim}"
            )));
        }
        Self::new(latent_obs_dim)
    }

    pub fn m(self) -> usize {
        self.m
    }

    pub fn n(self) -> usize {
        2 * self.m
    }
}

/// A single Gaussian belief in factorized form.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedBelief {
    pub mean_upper: Vec<f64>,
    pub mean_lower: Vec<f64>,
    pub upper_var: Vec<f64>,
    pub lower_var: Vec<f64>,
    pub cross_cov: Vec<f64>,
}

/// Encoder output: latent features `w` and their variances.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentObservation {
    pub features: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Diagonals of the upper and lower Kalman gain blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanGain {
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
}

impl FactorizedBelief {
    /// Zero mean, `init_var` on both diagonal blocks, no cross covariance.
    pub fn initial(m: usize, init_var: f64) -> Result<Self> {
        if m == 0 {
            return Err(CoreError::Config("m must be >= 1".into()));
        }
        if !(init_var > 0.0 && init_var.is_finite()) {
            return Err(CoreError::Config(format!("init_var must be positive, got {init_var}")));
        }
        Ok(Self {
            mean_upper: vec![0.0; m],
            mean_lower: vec![0.0; m],
            upper_var: vec![init_var; m],
            lower_var: vec![init_var; m],
            cross_cov: vec![0.0; m],
        })
    }

    pub fn m(&self) -> usize {
        self.mean_upper.len()
    }

    /// Full latent mean `[upper; lower]`.
    pub fn mean(&self) -> Vec<f64> {
        let mut z = self.mean_upper.clone();
        z.extend_from_slice(&self.mean_lower);
        z
    }

    /// Checks lengths, non-negative variances and per-dimension PSD within
    /// `slack`.
    pub fn check(&self, slack: f64) -> Result<()> {
        let m = self.m();
        let lens = [
            self.mean_lower.len(),
            self.upper_var.len(),
            self.lower_var.len(),
            self.cross_cov.len(),
        ];
        if lens.iter().any(|&l| l != m) {
            return Err(CoreError::Dimension(format!("belief fields of unequal length: {m} vs {lens:?}")));
        }
        for i in 0..m {
            let (u, l, s) = (self.upper_var[i], self.lower_var[i], self.cross_cov[i]);
            if u < 0.0 || l < 0.0 {
                return Err(CoreError::CorruptBelief(format!("negative variance at {i}: {u}, {l}")));
            }
            if s * s > u * l + slack {
                return Err(CoreError::CorruptBelief(format!(
                    "dimension {i} is not PSD: {s}^2 > {u} * {l}"
                )));
            }
        }
        Ok(())
    }

    /// Dense `n x n` covariance, row-major.
    pub fn dense_covariance(&self) -> Vec<f64> {
        let m = self.m();
        let n = 2 * m;
        let mut p = vec![0.0; n * n];
        for i in 0..m {
            p[i * n + i] = self.upper_var[i];
            p[(m + i) * n + m + i] = self.lower_var[i];
            p[i * n + m + i] = self.cross_cov[i];
            p[(m + i) * n + i] = self.cross_cov[i];
        }
        p
    }

    pub fn compute_gain(&self, obs: &LatentObservation) -> Result<KalmanGain> {
        let mut g = Graph::new();
        let prior = BeliefVars::constant(&mut g, std::slice::from_ref(self))?;
        let obs = ObservationVars::constant(&mut g, std::slice::from_ref(obs))?;
        let gain = compute_gain(&mut g, &prior, &obs)?;
        Ok(KalmanGain {
            upper: g.value(gain.upper).data().to_vec(),
            lower: g.value(gain.lower).data().to_vec(),
        })
    }

    /// Kalman update with a latent observation.
    pub fn update(&self, obs: &LatentObservation) -> Result<Self> {
        let mut g = Graph::new();
        let prior = BeliefVars::constant(&mut g, std::slice::from_ref(self))?;
        let obs = ObservationVars::constant(&mut g, std::slice::from_ref(obs))?;
        let post = update(&mut g, &prior, &obs)?;
        Ok(post.values(&g).remove(0))
    }

    /// Update step for a missing observation: the posterior is the prior.
    pub fn update_skip(self) -> Self {
        self
    }

    /// Predict step through `bank` with latent control increment `control`.
    /// Returns the prior and the number of PSD clamps applied.
    pub fn predict(
        &self,
        store: &ParamStore,
        bank: &TransitionBank,
        control: &[f64],
    ) -> Result<(Self, usize)> {
        let mut g = Graph::new();
        let post = BeliefVars::constant(&mut g, std::slice::from_ref(self))?;
        let control = g.constant(Tensor::matrix(1, control.len(), control.to_vec())?);
        let out = predict(&mut g, store, bank, &post, control)?;
        Ok((out.belief.values(&g).remove(0), out.psd_clamps))
    }
}

/// A batch of beliefs recorded on a graph; each field is `[batch, m]`.
#[derive(Clone, Copy, Debug)]
pub struct BeliefVars {
    pub mean_upper: Var,
    pub mean_lower: Var,
    pub upper_var: Var,
    pub lower_var: Var,
    pub cross_cov: Var,
}

/// A batch of latent observations; each field is `[batch, m]`.
#[derive(Clone, Copy, Debug)]
pub struct ObservationVars {
    pub features: Var,
    pub variance: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GainVars {
    pub upper: Var,
    pub lower: Var,
}

fn stack_rows(rows: &[&[f64]]) -> Result<Tensor> {
    let width = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != width) {
        return Err(CoreError::Dimension("rows of unequal length".into()));
    }
    Ok(Tensor::matrix(rows.len(), width, rows.concat())?)
}

impl BeliefVars {
    /// Records beliefs as constants, one row each.
    pub fn constant(g: &mut Graph, beliefs: &[FactorizedBelief]) -> Result<Self> {
        Self::record(g, beliefs, false)
    }

    /// Records beliefs as differentiable inputs.
    pub fn input(g: &mut Graph, beliefs: &[FactorizedBelief]) -> Result<Self> {
        Self::record(g, beliefs, true)
    }

    fn record(g: &mut Graph, beliefs: &[FactorizedBelief], differentiable: bool) -> Result<Self> {
        let mut field = |f: fn(&FactorizedBelief) -> &[f64]| -> Result<Var> {
            let t = stack_rows(&beliefs.iter().map(f).collect::<Vec<_>>())?;
            Ok(if differentiable { g.input(t) } else { g.constant(t) })
        };
        Ok(Self {
            mean_upper: field(|b| &b.mean_upper)?,
            mean_lower: field(|b| &b.mean_lower)?,
            upper_var: field(|b| &b.upper_var)?,
            lower_var: field(|b| &b.lower_var)?,
            cross_cov: field(|b| &b.cross_cov)?,
        })
    }

    /// `batch` copies of the initial belief.
    pub fn initial(g: &mut Graph, batch: usize, m: usize, init_var: f64) -> Result<Self> {
        let b = FactorizedBelief::initial(m, init_var)?;
        Self::constant(g, &vec![b; batch])
    }

    pub fn fields(&self) -> [Var; 5] {
        [
            self.mean_upper,
            self.mean_lower,
            self.upper_var,
            self.lower_var,
            self.cross_cov,
        ]
    }

    /// `[batch, n]` latent mean.
    pub fn mean(&self, g: &mut Graph) -> Result<Var> {
        Ok(g.concat(&[self.mean_upper, self.mean_lower], 1)?)
    }

    /// Row-wise choice between two belief batches.
    pub fn select(g: &mut Graph, mask: &[bool], on: &Self, off: &Self) -> Result<Self> {
        Ok(Self {
            mean_upper: g.select_rows(mask, on.mean_upper, off.mean_upper)?,
            mean_lower: g.select_rows(mask, on.mean_lower, off.mean_lower)?,
            upper_var: g.select_rows(mask, on.upper_var, off.upper_var)?,
            lower_var: g.select_rows(mask, on.lower_var, off.lower_var)?,
            cross_cov: g.select_rows(mask, on.cross_cov, off.cross_cov)?,
        })
    }

    pub fn values(&self, g: &Graph) -> Vec<FactorizedBelief> {
        let rows = g.shape(self.mean_upper)[0];
        let row = |v: Var, i: usize| g.value(v).row(i).to_vec();
        (0..rows)
            .map(|i| FactorizedBelief {
                mean_upper: row(self.mean_upper, i),
                mean_lower: row(self.mean_lower, i),
                upper_var: row(self.upper_var, i),
                lower_var: row(self.lower_var, i),
                cross_cov: row(self.cross_cov, i),
            })
            .collect()
    }
}

impl ObservationVars {
    pub fn constant(g: &mut Graph, obs: &[LatentObservation]) -> Result<Self> {
        let features = stack_rows(&obs.iter().map(|o| o.features.as_slice()).collect::<Vec<_>>())?;
        let variance = stack_rows(&obs.iter().map(|o| o.variance.as_slice()).collect::<Vec<_>>())?;
        Ok(Self {
            features: g.constant(features),
            variance: g.constant(variance),
        })
    }
}

/// `q_upper = upper_var / (upper_var + obs_var)`,
/// `q_lower = cross_cov / (upper_var + obs_var)`.
pub fn compute_gain(g: &mut Graph, prior: &BeliefVars, obs: &ObservationVars) -> Result<GainVars> {
    if g.shape(prior.upper_var) != g.shape(obs.variance) {
        return Err(CoreError::Dimension(format!(
            "belief {:?} vs observation {:?}",
            g.shape(prior.upper_var),
            g.shape(obs.variance)
        )));
    }
    let denom = g.add(prior.upper_var, obs.variance)?;
    if let Some(bad) = g.value(denom).data().iter().find(|&&d| d <= 0.0) {
        return Err(CoreError::CorruptBelief(format!("gain denominator {bad} <= 0")));
    }
    Ok(GainVars {
        upper: g.div(prior.upper_var, denom)?,
        lower: g.div(prior.cross_cov, denom)?,
    })
}

/// Scalar-form Kalman update with observation model `H = [I 0]`.
pub fn update(g: &mut Graph, prior: &BeliefVars, obs: &ObservationVars) -> Result<BeliefVars> {
    let gain = compute_gain(g, prior, obs)?;
    let innovation = g.sub(obs.features, prior.mean_upper)?;
    let du = g.mul(gain.upper, innovation)?;
    let dl = g.mul(gain.lower, innovation)?;
    let mean_upper = g.add(prior.mean_upper, du)?;
    let mean_lower = g.add(prior.mean_lower, dl)?;

    let keep = g.one_minus(gain.upper)?;
    let upper_var = g.mul(keep, prior.upper_var)?;
    let cross_cov = g.mul(keep, prior.cross_cov)?;
    let shrink = g.mul(gain.lower, prior.cross_cov)?;
    let mut lower_var = g.sub(prior.lower_var, shrink)?;

    let min_lower = g.value(lower_var).data().iter().copied().fold(f64::INFINITY, f64::min);
    if min_lower < -PSD_SLACK {
        return Err(CoreError::CorruptBelief(format!(
            "posterior lower variance {min_lower} is negative"
        )));
    }
    if min_lower < 0.0 {
        lower_var = g.relu(lower_var)?;
    }
    Ok(BeliefVars {
        mean_upper,
        mean_lower,
        upper_var,
        lower_var,
        cross_cov,
    })
}

/// Missing observation: the posterior equals the prior.
pub fn update_skip(prior: &BeliefVars) -> BeliefVars {
    *prior
}

/// `K` banded basis matrices, the softmax coefficient network over the
/// latent mean, and the raw transition-noise vector.
///
/// Each basis matrix is made of four `m x m` blocks. Within a block, entry
/// `(i, j)` may be non-zero only if `|i - j| < bandwidth`, so bandwidth 1
/// means diagonal blocks. Off-band entries are masked on the graph and
/// therefore never receive gradient.
#[derive(Clone, Debug)]
pub struct TransitionBank {
    dims: LatentDims,
    num_basis: usize,
    bandwidth: usize,
    pub basis: ParamId,
    pub coefficients: Dense,
    pub noise_raw: ParamId,
    mask: Tensor,
}

/// Raw value whose `elu + 1` is `0.05`.
const NOISE_RAW_INIT: f64 = -2.995_732_273_553_991; // ln(0.05)

impl TransitionBank {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: LatentDims,
        num_basis: usize,
        bandwidth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_basis == 0 || bandwidth == 0 {
            return Err(CoreError::Config(format!(
                "transition bank needs num_basis >= 1 and bandwidth >= 1, got {num_basis}, {bandwidth}"
            )));
        }
        let (m, n) = (dims.m(), dims.n());
        let normal = Normal::new(0.0, 0.05).expect("valid std");
        let mut basis = vec![0.0; num_basis * n * n];
        for k in 0..num_basis {
            for i in 0..n {
                for j in 0..n {
                    if !in_band(m, bandwidth, i, j) {
                        continue;
                    }
                    let diagonal_block = (i < m) == (j < m);
                    let noise = normal.sample(rng);
                    basis[(k * n + i) * n + j] = if diagonal_block {
                        noise + if i == j { 1.0 } else { 0.0 }
                    } else {
                        0.2 * noise
                    };
                }
            }
        }
        let basis = store.add(
            format!("{name}.basis"),
            Tensor::new(vec![num_basis, n, n], basis)?,
        )?;
        let coefficients = Dense::new(store, &format!("{name}.coefficients"), n, num_basis, rng)?;
        store.value_mut(coefficients.bias).assign(&vec![0.0; num_basis])?;
        let noise_raw = store.add(
            format!("{name}.noise_raw"),
            Tensor::filled(&[n], NOISE_RAW_INIT)?,
        )?;
        let mask = band_mask(m, bandwidth);
        let mask = Tensor::new(vec![num_basis, n * n], mask.repeat(num_basis))?;
        Ok(Self {
            dims,
            num_basis,
            bandwidth,
            basis,
            coefficients,
            noise_raw,
            mask,
        })
    }

    pub fn dims(&self) -> LatentDims {
        self.dims
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    /// `true` where a basis entry is allowed to be non-zero (`n x n`,
    /// row-major).
    pub fn band_pattern(&self) -> Vec<bool> {
        band_mask(self.dims.m(), self.bandwidth)
            .into_iter()
            .map(|v| v != 0.0)
            .collect()
    }

    /// Softmax coefficients `[batch, K]` for latent means `z` (`[batch, n]`).
    pub fn coefficient_weights(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let logits = self.coefficients.forward(g, store, z)?;
        Ok(g.softmax(logits)?)
    }

    /// `A_t = sum_k alpha_k(z) A_k`, shape `[batch, n, n]`.
    pub fn compose(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let n = self.dims.n();
        let batch = g.shape(z)[0];
        let alpha = self.coefficient_weights(g, store, z)?;
        let basis = g.param(store, self.basis);
        let flat = g.reshape(basis, &[self.num_basis, n * n])?;
        let mask = g.constant(self.mask.clone());
        let banded = g.mul(flat, mask)?;
        let mixed = g.matmul(alpha, banded)?;
        Ok(g.reshape(mixed, &[batch, n, n])?)
    }

    /// Positive transition noise `elu(raw) + 1`, shape `[n]`.
    pub fn noise(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let raw = g.param(store, self.noise_raw);
        Ok(g.elu_plus_one(raw)?)
    }

    /// Value-level [`TransitionBank::compose`] for one latent mean; returns
    /// the `n x n` matrix row-major.
    pub fn compose_value(&self, store: &ParamStore, z: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(1, z.len(), z.to_vec())?);
        let a = self.compose(&mut g, store, z)?;
        Ok(g.value(a).data().to_vec())
    }
}

fn in_band(m: usize, bandwidth: usize, i: usize, j: usize) -> bool {
    (i % m).abs_diff(j % m) < bandwidth
}

fn band_mask(m: usize, bandwidth: usize) -> Vec<f64> {
    let n = 2 * m;
    (0..n * n)
        .map(|idx| if in_band(m, bandwidth, idx / n, idx % n) { 1.0 } else { 0.0 })
        .collect()
}

/// Result of a predict step.
#[derive(Clone, Copy, Debug)]
pub struct Predicted {
    pub belief: BeliefVars,
    /// Latent dimensions whose cross covariance had to be clamped to keep
    /// the factorized covariance PSD.
    pub psd_clamps: usize,
}

/// `z- = A_t z+ + b(a_t)` and `Sigma- = A_t Sigma+ A_t^T + diag(noise)`,
/// with the covariance reduced back to its three block diagonals.
///
/// The reduction keeps exactly the diagonals of the upper-left, lower-right
/// and upper-right blocks of the dense product. They are evaluated directly
/// from the block structure of `Sigma+`, e.g. for the upper-left block
///
/// ```text
/// upper_var-[i] = sum_j A11[i,j]^2 u[j] + 2 A11[i,j] A12[i,j] s[j] + A12[i,j]^2 l[j]
/// ```
///
/// which is lossless for bandwidth 1 and drops the off-diagonal entries of
/// each block otherwise.
pub fn predict(
    g: &mut Graph,
    store: &ParamStore,
    bank: &TransitionBank,
    posterior: &BeliefVars,
    control: Var,
) -> Result<Predicted> {
    let m = bank.dims.m();
    let z = posterior.mean(g)?;
    let batch = g.shape(z)[0];
    if g.shape(control) != [batch, bank.dims.n()] {
        return Err(CoreError::Dimension(format!(
            "control increment must be [{batch}, {}], got {:?}",
            bank.dims.n(),
            g.shape(control)
        )));
    }
    let a = bank.compose(g, store, z)?;

    let drift = g.batch_matvec(a, z)?;
    let mean = g.add(drift, control)?;
    let mean_upper = g.slice(mean, 1, 0, m)?;
    let mean_lower = g.slice(mean, 1, m, m)?;

    let top = g.slice(a, 1, 0, m)?;
    let bottom = g.slice(a, 1, m, m)?;
    let a11 = g.slice(top, 2, 0, m)?;
    let a12 = g.slice(top, 2, m, m)?;
    let a21 = g.slice(bottom, 2, 0, m)?;
    let a22 = g.slice(bottom, 2, m, m)?;

    let (u, s, l) = (posterior.upper_var, posterior.cross_cov, posterior.lower_var);
    // sum_j x[i,j] u[j] + (y[i,j] + y'[i,j]) s[j] + w[i,j] l[j] for the
    // row/column pair of blocks (p, q).
    let quad = |g: &mut Graph, p: (Var, Var), q: (Var, Var)| -> Result<Var> {
        let pu_qu = g.mul(p.0, q.0)?;
        let pu_ql = g.mul(p.0, q.1)?;
        let pl_qu = g.mul(p.1, q.0)?;
        let pl_ql = g.mul(p.1, q.1)?;
        let cross = g.add(pu_ql, pl_qu)?;
        let t_u = g.batch_matvec(pu_qu, u)?;
        let t_s = g.batch_matvec(cross, s)?;
        let t_l = g.batch_matvec(pl_ql, l)?;
        let t = g.add(t_u, t_s)?;
        Ok(g.add(t, t_l)?)
    };
    let upper_block = quad(g, (a11, a12), (a11, a12))?;
    let lower_block = quad(g, (a21, a22), (a21, a22))?;
    let mut cross_cov = quad(g, (a11, a12), (a21, a22))?;

    let noise = bank.noise(g, store)?;
    let noise_upper = g.slice(noise, 0, 0, m)?;
    let noise_lower = g.slice(noise, 0, m, m)?;
    let upper_var = g.add_row(upper_block, noise_upper)?;
    let lower_var = g.add_row(lower_block, noise_lower)?;

    let psd_clamps = {
        let (uv, lv, cv) = (g.value(upper_var).data(), g.value(lower_var).data(), g.value(cross_cov).data());
        (0..cv.len()).filter(|&i| cv[i] * cv[i] > uv[i] * lv[i] + PSD_SLACK).count()
    };
    if psd_clamps > 0 {
        let product = g.mul(upper_var, lower_var)?;
        let bound = g.sqrt(product)?;
        cross_cov = g.clamp_abs(cross_cov, bound)?;
    }
    Ok(Predicted {
        belief: BeliefVars {
            mean_upper,
            mean_lower,
            upper_var,
            lower_var,
            cross_cov,
        },
        psd_clamps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(features: &[f64], variance: &[f64]) -> LatentObservation {
        LatentObservation {
            features: features.to_vec(),
            variance: variance.to_vec(),
        }
    }

    fn belief(u: f64, s: f64, l: f64) -> FactorizedBelief {
        FactorizedBelief {
            mean_upper: vec![0.0],
            mean_lower: vec![0.0],
            upper_var: vec![u],
            lower_var: vec![l],
            cross_cov: vec![s],
        }
    }

    #[test]
    fn equal_variances_halve_the_gain() {
        let q = belief(0.5, 0.0, 1.0).compute_gain(&obs(&[0.0], &[0.5])).unwrap();
        assert_eq!(q.upper, vec![0.5]);
        assert_eq!(q.lower, vec![0.0]);
    }

    #[test]
    fn noiseless_observation_limit() {
        let q = belief(1.0, 0.2, 1.0).compute_gain(&obs(&[0.0], &[1e-14])).unwrap();
        assert!((q.upper[0] - 1.0).abs() < 1e-12);
        assert!((q.lower[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn gain_with_cross_covariance() {
        let q = belief(1.0, 0.5, 1.0).compute_gain(&obs(&[0.0], &[1.0])).unwrap();
        assert_eq!(q.upper, vec![0.5]);
        assert_eq!(q.lower, vec![0.25]);
    }

    #[test]
    fn posterior_covariance_example() {
        let post = belief(1.0, 0.5, 1.0).update(&obs(&[0.0], &[1.0])).unwrap();
        assert_eq!(post.upper_var, vec![0.5]);
        assert_eq!(post.cross_cov, vec![0.25]);
        assert_eq!(post.lower_var, vec![0.875]);
    }

    #[test]
    fn full_trust_copies_the_innovation() {
        // q_u = q_l = 1 needs u = s and a vanishing observation variance;
        // with l = u the prior stays PSD.
        let prior = belief(1.0, 1.0, 1.0);
        let post = prior.update(&obs(&[0.7], &[1e-300])).unwrap();
        assert_eq!(post.mean_upper, vec![0.7]);
        assert_eq!(post.mean_lower, vec![0.7]);
    }

    #[test]
    fn uninformative_observation_keeps_prior() {
        let prior = FactorizedBelief {
            mean_upper: vec![0.3],
            mean_lower: vec![-0.1],
            upper_var: vec![0.8],
            lower_var: vec![0.9],
            cross_cov: vec![0.2],
        };
        let post = prior.update(&obs(&[5.0], &[1e200])).unwrap();
        for (a, b) in post.mean().iter().zip(prior.mean()) {
            assert!((a - b).abs() < 1e-190);
        }
        assert!((post.upper_var[0] - 0.8).abs() < 1e-190);
    }

    #[test]
    fn skip_is_identity_and_idempotent() {
        let b = belief(0.4, 0.1, 0.3);
        assert_eq!(b.clone().update_skip(), b);
        assert_eq!(b.clone().update_skip().update_skip(), b);
    }

    #[test]
    fn initial_belief_shape() {
        let b = FactorizedBelief::initial(2, 10.0).unwrap();
        assert_eq!(b.mean(), vec![0.0; 4]);
        assert_eq!(b.upper_var, vec![10.0, 10.0]);
        assert_eq!(b.lower_var, vec![10.0, 10.0]);
        assert_eq!(b.cross_cov, vec![0.0, 0.0]);
        b.check(0.0).unwrap();
        let post = b.update(&obs(&[0.0, 0.0], &[10.0, 10.0])).unwrap();
        assert_eq!(post.mean(), vec![0.0; 4]);
        assert!(FactorizedBelief::initial(0, 1.0).is_err());
        assert!(FactorizedBelief::initial(2, 0.0).is_err());
    }

    #[test]
    fn corrupted_prior_is_rejected() {
        let bad = belief(-2.0, 0.0, 1.0);
        assert!(matches!(
            bad.compute_gain(&obs(&[0.0], &[1.0])),
            Err(CoreError::CorruptBelief(_))
        ));
    }

    #[test]
    fn latent_dims_require_n_equal_two_m() {
        assert!(LatentDims::from_pair(3, 6).is_ok());
        assert!(LatentDims::from_pair(3, 7).is_err());
    }

    fn identity_bank(store: &mut ParamStore, m: usize, noise: f64) -> TransitionBank {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = TransitionBank::new(store, "t", LatentDims::new(m).unwrap(), 1, 1, &mut rng).unwrap();
        let n = 2 * m;
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        store.value_mut(bank.basis).assign(&eye).unwrap();
        // elu+1 is the identity shift for non-negative raw values.
        let raw = if noise >= 1.0 { noise - 1.0 } else { noise.ln() };
        store.value_mut(bank.noise_raw).assign(&vec![raw; n]).unwrap();
        bank
    }

    #[test]
    fn identity_transition_adds_noise_only() {
        let mut store = ParamStore::new();
        let bank = identity_bank(&mut store, 2, 0.1);
        let post = FactorizedBelief {
            mean_upper: vec![0.5, -1.0],
            mean_lower: vec![2.0, 0.25],
            upper_var: vec![1.0, 2.0],
            lower_var: vec![3.0, 4.0],
            cross_cov: vec![0.5, -0.5],
        };
        let (prior, clamps) = post.predict(&store, &bank, &[0.0; 4]).unwrap();
        assert_eq!(clamps, 0);
        assert_eq!(prior.mean(), post.mean());
        for i in 0..2 {
            assert!((prior.upper_var[i] - post.upper_var[i] - 0.1).abs() < 1e-12);
            assert!((prior.lower_var[i] - post.lower_var[i] - 0.1).abs() < 1e-12);
        }
        assert_eq!(prior.cross_cov, post.cross_cov);
    }

    #[test]
    fn single_basis_composes_to_itself() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = TransitionBank::new(&mut store, "t", LatentDims::new(3).unwrap(), 1, 2, &mut rng).unwrap();
        let a = bank.compose_value(&store, &[0.3, -1.0, 2.0, 0.1, 0.0, 5.0]).unwrap();
        assert_eq!(a, store.value(bank.basis).data());
    }

    #[test]
    fn identical_bases_ignore_the_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = TransitionBank::new(&mut store, "t", LatentDims::new(2).unwrap(), 3, 2, &mut rng).unwrap();
        let one: Vec<f64> = store.value(bank.basis).data()[..16].to_vec();
        store.value_mut(bank.basis).assign(&one.repeat(3)).unwrap();
        for z in [[0.0, 1.0, -3.0, 2.0], [10.0, -5.0, 0.5, 0.0]] {
            let a = bank.compose_value(&store, &z).unwrap();
            for (x, y) in a.iter().zip(&one) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn symmetric_logits_average_two_bases() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bank = TransitionBank::new(&mut store, "t", LatentDims::new(2).unwrap(), 2, 2, &mut rng).unwrap();
        store.value_mut(bank.coefficients.weight).assign(&[0.0; 8]).unwrap();
        let basis = store.value(bank.basis).data().to_vec();
        let a = bank.compose_value(&store, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        for i in 0..16 {
            assert!((a[i] - 0.5 * (basis[i] + basis[16 + i])).abs() < 1e-15);
        }
    }

    #[test]
    fn band_structure_of_initial_bases() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bank = TransitionBank::new(&mut store, "t", LatentDims::new(5).unwrap(), 2, 2, &mut rng).unwrap();
        let pattern = bank.band_pattern();
        let n = 10;
        for k in 0..2 {
            for (idx, &free) in pattern.iter().enumerate() {
                let v = store.value(bank.basis).data()[k * n * n + idx];
                if !free {
                    assert_eq!(v, 0.0);
                }
            }
        }
        // Row 0: |i - j| < 2 within each block gives tridiagonal blocks.
        assert_eq!(&pattern[..n], &[true, true, false, false, false, true, true, false, false, false]);
    }

    #[test]
    fn initial_noise_is_five_hundredths() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bank = TransitionBank::new(&mut store, "t", LatentDims::new(2).unwrap(), 2, 1, &mut rng).unwrap();
        let mut g = Graph::new();
        let noise = bank.noise(&mut g, &store).unwrap();
        for v in g.value(noise).data() {
            assert!((v - 0.05).abs() < 1e-15);
        }
    }
}
