//! How strongly each past observation moves the final Q-value.

use ndarray::Array2;
use serde::Serialize;

use super::pipeline::{argmax, q_tape, PipelineSpec};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::models::nn;
use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityProfile {
    /// Greedy action at the last step.
    pub action: usize,
    /// `v_i = ‖∂Q(s_n, a_n)/∂o_i‖₁` by position.
    pub per_step: Vec<f64>,
    /// Share of `Σ v` within lag `k` of the last step (`k = 0` is the last
    /// observation); all zeros when degenerate.
    pub cumulative: Vec<f64>,
    /// `Σ v = 0`: nothing to normalize.
    pub degenerate: bool,
}

/// Q-values of the last step for one episode of observations.
pub fn final_q(spec: &PipelineSpec, params: &ParamSet, observations: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let obs = g.constant(nn::stack_rows(observations.iter().map(Vec::as_slice), spec.obs_dim));
    let begins: Vec<bool> = (0..observations.len()).map(|t| t == 0).collect();
    let q = q_tape(spec, &mut g, &bound, obs, &begins)?;
    Ok(g.value(q).row(observations.len() - 1).to_vec())
}

pub fn sensitivity_profile(
    spec: &PipelineSpec,
    params: &ParamSet,
    observations: &[Vec<f64>],
) -> Result<SensitivityProfile> {
    let n = observations.len();
    if n == 0 {
        return Err(Error::Precondition("sensitivity needs a non-empty episode".into()));
    }
    if let Some(bad) = observations.iter().find(|o| o.len() != spec.obs_dim) {
        return Err(Error::dims(spec.obs_dim, bad.len(), "observation width"));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let obs = g.param(nn::stack_rows(observations.iter().map(Vec::as_slice), spec.obs_dim));
    let begins: Vec<bool> = (0..n).map(|t| t == 0).collect();
    let q = q_tape(spec, &mut g, &bound, obs, &begins)?;
    let last = g.value(q).row(n - 1).to_vec();
    let action = argmax(&last);
    let mut seed = Array2::zeros(g.shape(q));
    seed[[n - 1, action]] = 1.0;
    let grads = g.backward_with(q, seed);
    let obs_grad = grads.get_or_zeros(obs, (n, spec.obs_dim));
    let per_step: Vec<f64> = obs_grad
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum())
        .collect();
    let total: f64 = per_step.iter().sum();
    let degenerate = total == 0.0;
    let cumulative = if degenerate {
        vec![0.0; n]
    } else {
        let mut acc = 0.0;
        let mut out: Vec<f64> = per_step
            .iter()
            .rev()
            .map(|v| {
                acc += v;
                acc / total
            })
            .collect();
        // exact endpoint despite rounding in the running sum
        *out.last_mut().expect("non-empty") = 1.0;
        out
    };
    Ok(SensitivityProfile {
        action,
        per_step,
        cumulative,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn episode(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn memoryless_pipeline_ignores_the_past() {
        let spec = PipelineSpec::new(3, 2, 6, ModelKind::Passthrough, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = spec.init_params(&mut rng).unwrap();
        let p = sensitivity_profile(&spec, &params, &episode(&mut rng, 8, 3)).unwrap();
        assert!(p.per_step[..7].iter().all(|&v| v == 0.0));
        assert!(p.per_step[7] > 0.0);
        assert_eq!(p.cumulative, vec![1.0; 8]);
    }

    #[test]
    fn cumulative_curve_is_monotone_to_one() {
        let spec = PipelineSpec::new(3, 2, 6, ModelKind::Ffm, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = spec.init_params(&mut rng).unwrap();
        let p = sensitivity_profile(&spec, &params, &episode(&mut rng, 12, 3)).unwrap();
        assert!(!p.degenerate);
        assert!(p.cumulative.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*p.cumulative.last().unwrap(), 1.0);
    }

    #[test]
    fn matches_finite_differences() {
        let spec = PipelineSpec::new(2, 3, 5, ModelKind::Lru, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = spec.init_params(&mut rng).unwrap();
        let obs = episode(&mut rng, 10, 2);
        let p = sensitivity_profile(&spec, &params, &obs).unwrap();
        let h = 1e-5;
        for i in [0, 4, 9] {
            let mut fd = 0.0;
            for c in 0..2 {
                let mut plus = obs.clone();
                let mut minus = obs.clone();
                plus[i][c] += h;
                minus[i][c] -= h;
                let d = (final_q(&spec, &params, &plus).unwrap()[p.action]
                    - final_q(&spec, &params, &minus).unwrap()[p.action])
                    / (2.0 * h);
                fd += d.abs();
            }
            assert!(
                (fd - p.per_step[i]).abs() <= 1e-3 * p.per_step[i].max(1e-6),
                "{i}: {fd} vs {}",
                p.per_step[i]
            );
        }
    }
}
