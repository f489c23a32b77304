//! Action conditioning: the latent increment `b(a_t)` added in predict.

use std::fmt;
use std::str::FromStr;

use acrkn_numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{fan_in_uniform, Dense, Mlp};
use crate::presets::preset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlKind {
    /// `b(a) = B a`.
    Linear,
    /// `b(a) = (sum_k beta_k(z) B_k) a`.
    LocallyLinear,
    /// `b(a) = f(a)` with a ReLU network.
    Nonlinear,
}

impl ControlKind {
    pub const ALL: [ControlKind; 3] = [
        ControlKind::Linear,
        ControlKind::LocallyLinear,
        ControlKind::Nonlinear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ControlKind::Linear => "linear",
            ControlKind::LocallyLinear => "locally-linear",
            ControlKind::Nonlinear => "nonlinear",
        }
    }
}

impl fmt::Display for ControlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControlKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        ControlKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown control kind `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub enum ControlModel {
    Linear {
        matrix: ParamId,
        action_dim: usize,
        state_dim: usize,
    },
    LocallyLinear {
        basis: ParamId,
        coefficients: Dense,
        action_dim: usize,
        state_dim: usize,
        num_basis: usize,
    },
    Nonlinear {
        net: Mlp,
    },
}

impl ControlModel {
    /// Matrices start uniform in `±1/sqrt(d_a n)` so that a unit action
    /// moves the whole latent state by O(1), whatever its size.
    pub fn linear(
        store: &mut ParamStore,
        name: &str,
        action_dim: usize,
        state_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let matrix = store.add(
            format!("{name}.matrix"),
            fan_in_uniform(rng, &[state_dim, action_dim], action_dim * state_dim)?,
        )?;
        Ok(ControlModel::Linear {
            matrix,
            action_dim,
            state_dim,
        })
    }

    pub fn locally_linear(
        store: &mut ParamStore,
        name: &str,
        action_dim: usize,
        state_dim: usize,
        num_basis: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_basis == 0 {
            return Err(CoreError::Config("locally-linear control needs at least one basis matrix".into()));
        }
        let basis = store.add(
            format!("{name}.basis"),
            fan_in_uniform(rng, &[num_basis, state_dim, action_dim], action_dim * state_dim)?,
        )?;
        let coefficients = Dense::new(store, &format!("{name}.coefficients"), state_dim, num_basis, rng)?;
        Ok(ControlModel::LocallyLinear {
            basis,
            coefficients,
            action_dim,
            state_dim,
            num_basis,
        })
    }

    pub fn nonlinear(
        store: &mut ParamStore,
        name: &str,
        action_dim: usize,
        state_dim: usize,
        hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let net = Mlp::new(store, &format!("{name}.net"), action_dim, hidden, state_dim, rng)?;
        Ok(ControlModel::Nonlinear { net })
    }

    /// Builds the model of `kind` with the layer sizes of `preset_name`.
    /// `num_basis` is only used by the locally-linear kind.
    #[allow(clippy::too_many_arguments)]
    pub fn default_architecture(
        store: &mut ParamStore,
        name: &str,
        kind: ControlKind,
        action_dim: usize,
        state_dim: usize,
        preset_name: &str,
        num_basis: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let p = preset(preset_name)?;
        match kind {
            ControlKind::Linear => Self::linear(store, name, action_dim, state_dim, rng),
            ControlKind::LocallyLinear => Self::locally_linear(
                store,
                name,
                action_dim,
                state_dim,
                num_basis.unwrap_or(p.num_basis),
                rng,
            ),
            ControlKind::Nonlinear => {
                Self::nonlinear(store, name, action_dim, state_dim, &p.control_hidden, rng)
            }
        }
    }

    pub fn kind(&self) -> ControlKind {
        match self {
            ControlModel::Linear { .. } => ControlKind::Linear,
            ControlModel::LocallyLinear { .. } => ControlKind::LocallyLinear,
            ControlModel::Nonlinear { .. } => ControlKind::Nonlinear,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            ControlModel::Linear { action_dim, .. } | ControlModel::LocallyLinear { action_dim, .. } => *action_dim,
            ControlModel::Nonlinear { net } => net.in_dim(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ControlModel::Linear { state_dim, .. } | ControlModel::LocallyLinear { state_dim, .. } => *state_dim,
            ControlModel::Nonlinear { net } => net.out_dim(),
        }
    }

    /// `[batch, n]` increments for actions `a` (`[batch, d_a]`) at latent
    /// means `z` (`[batch, n]`). Only the locally-linear kind reads `z`.
    pub fn increment(&self, g: &mut Graph, store: &ParamStore, a: Var, z: Var) -> Result<Var> {
        let shape = g.shape(a).to_vec();
        if shape.len() != 2 || shape[1] != self.action_dim() {
            return Err(CoreError::Dimension(format!(
                "control expects actions [batch, {}], got {shape:?}",
                self.action_dim()
            )));
        }
        let batch = shape[0];
        match self {
            ControlModel::Linear { matrix, .. } => {
                let b = g.param(store, *matrix);
                Ok(g.matmul_nt(a, b)?)
            }
            ControlModel::LocallyLinear {
                basis,
                coefficients,
                action_dim,
                state_dim,
                num_basis,
            } => {
                let logits = coefficients.forward(g, store, z)?;
                let beta = g.softmax(logits)?;
                let basis = g.param(store, *basis);
                let flat = g.reshape(basis, &[*num_basis, state_dim * action_dim])?;
                let mixed = g.matmul(beta, flat)?;
                let b_t = g.reshape(mixed, &[batch, *state_dim, *action_dim])?;
                Ok(g.batch_matvec(b_t, a)?)
            }
            ControlModel::Nonlinear { net } => net.forward(g, store, a),
        }
    }

    /// Value-level increment for a single action.
    pub fn increment_value(&self, store: &ParamStore, a: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, a.len(), a.to_vec())?);
        let z = g.constant(Tensor::matrix(1, z.len(), z.to_vec())?);
        let b = self.increment(&mut g, store, a, z)?;
        Ok(g.value(b).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use acrkn_numerics::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_matrix_gives_zero_increment() {
        let mut store = ParamStore::new();
        let c = ControlModel::linear(&mut store, "c", 2, 4, &mut rng()).unwrap();
        let ControlModel::Linear { matrix, .. } = c else { unreachable!() };
        store.value_mut(matrix).assign(&[0.0; 8]).unwrap();
        assert_eq!(c.increment_value(&store, &[3.0, -7.0], &[0.0; 4]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn identity_matrix_passes_action_through() {
        let mut store = ParamStore::new();
        let c = ControlModel::linear(&mut store, "c", 2, 2, &mut rng()).unwrap();
        let ControlModel::Linear { matrix, .. } = c else { unreachable!() };
        store.value_mut(matrix).assign(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(c.increment_value(&store, &[1.0, -1.0], &[0.0; 2]).unwrap(), vec![1.0, -1.0]);
    }

    #[test]
    fn symmetric_coefficients_halve_the_action() {
        let mut store = ParamStore::new();
        let c = ControlModel::locally_linear(&mut store, "c", 2, 2, 2, &mut rng()).unwrap();
        let ControlModel::LocallyLinear { basis, coefficients, .. } = &c else { unreachable!() };
        store.value_mut(*basis).assign(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        store.value_mut(coefficients.weight).assign(&[0.0; 4]).unwrap();
        store.value_mut(coefficients.bias).assign(&[0.0; 2]).unwrap();
        let b = c.increment_value(&store, &[0.8, -0.4], &[1.0, 2.0]).unwrap();
        assert_eq!(b, vec![0.4, -0.2]);
    }

    #[test]
    fn linear_is_additive_and_homogeneous() {
        let mut store = ParamStore::new();
        let c = ControlModel::linear(&mut store, "c", 3, 6, &mut rng()).unwrap();
        let z = [0.0; 6];
        let (a, b) = ([0.3, -1.2, 2.0], [1.5, 0.25, -0.7]);
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let fa = c.increment_value(&store, &a, &z).unwrap();
        let fb = c.increment_value(&store, &b, &z).unwrap();
        let fs = c.increment_value(&store, &sum, &z).unwrap();
        let scaled = c.increment_value(&store, &a.map(|x| -2.5 * x), &z).unwrap();
        for i in 0..6 {
            assert!((fs[i] - fa[i] - fb[i]).abs() < 1e-12);
            assert!((scaled[i] + 2.5 * fa[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn nonlinear_ignores_the_state() {
        let mut store = ParamStore::new();
        let c = ControlModel::nonlinear(&mut store, "c", 2, 4, &[8, 8], &mut rng()).unwrap();
        let x = c.increment_value(&store, &[0.5, 0.1], &[0.0; 4]).unwrap();
        let y = c.increment_value(&store, &[0.5, 0.1], &[9.0, -3.0, 1.0, 4.0]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn preset_architectures() {
        let mut store = ParamStore::new();
        let c = ControlModel::default_architecture(&mut store, "a", ControlKind::Nonlinear, 8, 120, "pam", None, &mut rng()).unwrap();
        let ControlModel::Nonlinear { net } = &c else { unreachable!() };
        assert_eq!(net.hidden_widths(), vec![120, 120, 120]);
        let c = ControlModel::default_architecture(&mut store, "b", ControlKind::Nonlinear, 7, 90, "panda-fwd", None, &mut rng()).unwrap();
        let ControlModel::Nonlinear { net } = &c else { unreachable!() };
        assert_eq!(net.hidden_widths(), vec![30, 30, 30]);
        let c = ControlModel::default_architecture(&mut store, "c", ControlKind::Linear, 3, 10, "brokk", None, &mut rng()).unwrap();
        let ControlModel::Linear { matrix, .. } = c else { unreachable!() };
        assert_eq!(store.value(matrix).shape(), &[10, 3]);
        assert!(ControlModel::default_architecture(&mut store, "d", ControlKind::Linear, 3, 10, "nope", None, &mut rng()).is_err());
    }

    #[test]
    fn action_length_is_checked() {
        let mut store = ParamStore::new();
        let c = ControlModel::linear(&mut store, "c", 2, 4, &mut rng()).unwrap();
        assert!(matches!(c.increment_value(&store, &[1.0], &[0.0; 4]), Err(CoreError::Dimension(_))));
    }

    #[test]
    fn gradients_of_every_kind() {
        for kind in ControlKind::ALL {
            let mut store = ParamStore::new();
            let c = ControlModel::default_architecture(&mut store, "c", kind, 2, 4, "desk", Some(3), &mut rng()).unwrap();
            let a = Tensor::matrix(2, 2, vec![0.3, -0.8, 1.1, 0.4]).unwrap();
            let z = Tensor::matrix(2, 4, vec![0.1, -0.5, 0.9, 0.2, -1.0, 0.4, 0.3, 0.7]).unwrap();
            let report = finite_diff_check(
                &mut store,
                |g: &mut Graph, s: &ParamStore| -> Result<Var> {
                    let a = g.constant(a.clone());
                    let z = g.constant(z.clone());
                    let b = c.increment(g, s, a, z)?;
                    let sq = g.square(b)?;
                    Ok(g.sum(sq)?)
                },
                1e-6,
                1e-5,
            )
            .unwrap();
            assert!(report.passed(), "{kind}: {report:?}");
        }
    }
}
