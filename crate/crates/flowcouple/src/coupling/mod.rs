//! Coupled (x0, x1) training pairs: independent Gaussian, local Gaussian
//! noise coupling, minibatch optimal transport, and rectified-flow reflow,
//! plus the linear-path interpolant and the SNR diagnostic.

mod assignment;

pub use assignment::{
    assignment_cost, brute_force_assign, solve_assignment, MAX_ASSIGN_SIZE, MAX_BRUTE_FORCE_SIZE,
};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::numcore::{DenseArray, VelocityNet};
use crate::rng::rng_for;
use crate::{Error, Result};

/// Floor applied to the local-noise scale so constant sources stay usable.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// A source/target latent pair with edited-region mask and conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct EditInstance {
    pub x_src: DenseArray,
    pub x_tgt: DenseArray,
    pub x_text: DenseArray,
    pub x_vit: DenseArray,
    pub edit_mask: Vec<bool>,
    pub task_id: u32,
}

impl EditInstance {
    /// Conditioning vector fed to the velocity net: `concat(x_text, x_vit)`.
    pub fn context(&self) -> Vec<f64> {
        let mut ctx = Vec::with_capacity(self.x_text.len() + self.x_vit.len());
        ctx.extend_from_slice(self.x_text.as_slice());
        ctx.extend_from_slice(self.x_vit.as_slice());
        ctx
    }

    /// The paired state `concat(x_src, x_tgt)` of length `2*d_s`.
    pub fn paired_latent(&self) -> Vec<f64> {
        let mut x1 = Vec::with_capacity(2 * self.x_src.len());
        x1.extend_from_slice(self.x_src.as_slice());
        x1.extend_from_slice(self.x_tgt.as_slice());
        x1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CouplingKind {
    Independent,
    LocalGaussian,
    MinibatchOt,
}

impl CouplingKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CouplingKind::Independent => "independent",
            CouplingKind::LocalGaussian => "local_gaussian",
            CouplingKind::MinibatchOt => "minibatch_ot",
        }
    }
}

/// A coupled (x0, x1) pair, the unit of flow-matching training.
///
/// `eps` is recorded as `x0 - x1` for every kind, so the velocity target
/// `x1 - x0 == -eps` holds bitwise throughout (floating subtraction is
/// exactly antisymmetric).
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSample {
    pub x0: DenseArray,
    pub x1: DenseArray,
    pub eps: DenseArray,
    pub sigma: f64,
    pub kind: CouplingKind,
}

impl CouplingSample {
    pub fn from_pair(x0: Vec<f64>, x1: Vec<f64>, sigma: f64, kind: CouplingKind) -> Self {
        let eps: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| a - b).collect();
        CouplingSample {
            x0: DenseArray::vector(x0),
            x1: DenseArray::vector(x1),
            eps: DenseArray::vector(eps),
            sigma,
            kind,
        }
    }
}

/// State along a flow trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x_t: DenseArray,
    pub t: f64,
}

/// Noise scale of the local Gaussian coupling: `max(std(x_src), SIGMA_FLOOR)`.
pub fn local_sigma(x_src: &DenseArray) -> f64 {
    crate::numcore::std_all(x_src.as_slice()).max(SIGMA_FLOOR)
}

/// Local Gaussian noise coupling: both halves of the paired latent are
/// perturbed with noise scaled to the source's standard deviation.
pub fn local_gaussian_couple(inst: &EditInstance, rng_seed: u64) -> CouplingSample {
    let sigma = local_sigma(&inst.x_src);
    let mut rng = rng_for(rng_seed, "local-gaussian", 0);
    let x1 = inst.paired_latent();
    let x0: Vec<f64> = x1
        .iter()
        .map(|v| {
            let n: f64 = rng.sample(StandardNormal);
            v + sigma * n
        })
        .collect();
    CouplingSample::from_pair(x0, x1, sigma, CouplingKind::LocalGaussian)
}

/// Independent coupling: `x0 ~ N(0, I)` over both halves.
pub fn independent_couple(inst: &EditInstance, rng_seed: u64) -> CouplingSample {
    let mut rng = rng_for(rng_seed, "independent", 0);
    let x1 = inst.paired_latent();
    let x0: Vec<f64> = (0..x1.len()).map(|_| rng.sample(StandardNormal)).collect();
    CouplingSample::from_pair(x0, x1, 0.0, CouplingKind::Independent)
}

/// Signal-to-noise ratio `||x_tgt||^2 / (sigma^2 * d_z)` of a perturbed
/// initialization; approximately 1 when source and target variances match.
pub fn snr(x_tgt: &DenseArray, sigma: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::contract(format!("snr requires sigma > 0, got {sigma}")));
    }
    let d_z = x_tgt.len() as f64;
    let energy: f64 = x_tgt.as_slice().iter().map(|v| v * v).sum();
    Ok(energy / (sigma * sigma * d_z))
}

/// Linear interpolation `x_t = (1-t) x0 + t x1`.
pub fn interpolate(s: &CouplingSample, t: f64) -> Result<FlowState> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("interpolation time {t} outside [0,1]")));
    }
    let x_t: Vec<f64> = s
        .x0
        .as_slice()
        .iter()
        .zip(s.x1.as_slice())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    Ok(FlowState {
        x_t: DenseArray::vector(x_t),
        t,
    })
}

/// Cost-minimizing pairing between two minibatches under squared Euclidean
/// cost; `perm[i]` is the index into `x1_batch` assigned to `x0_batch[i]`.
pub fn minibatch_ot_couple(x0_batch: &[Vec<f64>], x1_batch: &[Vec<f64>]) -> Result<Vec<usize>> {
    let b = x0_batch.len();
    if b != x1_batch.len() {
        return Err(Error::DimensionMismatch {
            context: "minibatch_ot_couple batch sizes",
            expected: b,
            actual: x1_batch.len(),
        });
    }
    if b == 0 || b > MAX_ASSIGN_SIZE {
        return Err(Error::contract(format!(
            "minibatch size {b} outside [1, {MAX_ASSIGN_SIZE}]"
        )));
    }
    let cost: Vec<Vec<f64>> = x0_batch
        .iter()
        .map(|a| {
            x1_batch
                .iter()
                .map(|c| a.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum())
                .collect()
        })
        .collect();
    solve_assignment(&cost)
}

/// Outcome of one reflow round.
#[derive(Debug)]
pub struct ReflowOutcome {
    pub samples: Vec<CouplingSample>,
    /// Instances dropped because their trajectory went non-finite.
    pub dropped: usize,
}

/// Rectified-flow re-pairing: each sample's `x1` is replaced by the Euler
/// endpoint of the current field from its `x0`; the coupling kind is kept.
pub fn reflow_pairs(
    net: &VelocityNet,
    pairs: &[(CouplingSample, Vec<f64>)],
    steps: usize,
) -> Result<ReflowOutcome> {
    if steps == 0 {
        return Err(Error::contract("reflow requires at least one Euler step"));
    }
    let mut samples = Vec::with_capacity(pairs.len());
    let mut dropped = 0;
    for (sample, context) in pairs {
        let traj = crate::sampler::euler_sample(net, sample.x0.as_slice(), context, steps)?;
        if !traj.valid {
            dropped += 1;
            continue;
        }
        let endpoint = traj.states.last().unwrap().x_t.as_slice().to_vec();
        samples.push(CouplingSample::from_pair(
            sample.x0.as_slice().to_vec(),
            endpoint,
            sample.sigma,
            sample.kind,
        ));
    }
    Ok(ReflowOutcome { samples, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_instance(d_s: usize) -> EditInstance {
        let mut rng = rng_for(4, "coupling-test", 0);
        let x_src: Vec<f64> = (0..d_s).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x_tgt: Vec<f64> = (0..d_s).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut edit_mask = vec![false; d_s];
        edit_mask[0] = true;
        EditInstance {
            x_src: DenseArray::vector(x_src),
            x_tgt: DenseArray::vector(x_tgt),
            x_text: DenseArray::vector(vec![1.0; d_s]),
            x_vit: DenseArray::vector(vec![0.0; d_s]),
            edit_mask,
            task_id: 0,
        }
    }

    #[test]
    fn sigma_matches_source_std() {
        let mut inst = toy_instance(4);
        inst.x_src = DenseArray::vector(vec![0.0, 2.0, 0.0, 2.0]); // std exactly 1
        let s = local_gaussian_couple(&inst, 1);
        assert!((s.sigma - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_source_uses_sigma_floor() {
        let mut inst = toy_instance(4);
        inst.x_src = DenseArray::vector(vec![0.7; 4]);
        let s = local_gaussian_couple(&inst, 1);
        assert_eq!(s.sigma, SIGMA_FLOOR);
    }

    #[test]
    fn recorded_eps_identity_holds_bitwise() {
        let inst = toy_instance(2);
        for seed in 0..20 {
            for s in [
                local_gaussian_couple(&inst, seed),
                independent_couple(&inst, seed),
            ] {
                for i in 0..s.x0.len() {
                    // x1 - x0 == -eps, bitwise
                    assert_eq!(s.x1[i] - s.x0[i], -s.eps[i]);
                }
            }
        }
    }

    #[test]
    fn local_gaussian_x0_reconstructs_from_eps() {
        let inst = toy_instance(3);
        let s = local_gaussian_couple(&inst, 9);
        for i in 0..s.x0.len() {
            assert_eq!(s.x1[i] + s.eps[i], s.x0[i]);
        }
    }

    #[test]
    fn independent_coupling_is_seed_reproducible() {
        let inst = toy_instance(3);
        assert_eq!(independent_couple(&inst, 5), independent_couple(&inst, 5));
        assert_ne!(independent_couple(&inst, 5), independent_couple(&inst, 6));
    }

    #[test]
    fn independent_coupling_is_standard_normal() {
        // law of large numbers: mean and variance over many draws
        let inst = toy_instance(2);
        let n = 10_000;
        let d = 4;
        let mut sums = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for seed in 0..n {
            let s = independent_couple(&inst, seed);
            for i in 0..d {
                sums[i] += s.x0[i];
                sq[i] += s.x0[i] * s.x0[i];
            }
        }
        for i in 0..d {
            let mean = sums[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.05, "coordinate {i} mean {mean}");
            assert!((0.9..=1.1).contains(&var), "coordinate {i} variance {var}");
        }
    }

    #[test]
    fn snr_arithmetic() {
        let x = DenseArray::vector(vec![1.0; 4]);
        assert!((snr(&x, 0.5).unwrap() - 4.0).abs() < 1e-15);
        assert!(snr(&x, 0.0).is_err());
    }

    #[test]
    fn snr_decreases_with_sigma() {
        let x = DenseArray::vector(vec![1.0, -2.0, 0.5]);
        let mut last = f64::INFINITY;
        for sigma in [0.5, 1.0, 2.0, 8.0, 100.0] {
            let v = snr(&x, sigma).unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn snr_concentrates_near_one_at_matched_variance() {
        // Monte Carlo: x_tgt ~ N(0, I), d = 1024, sigma = 1
        for seed in 0..100 {
            let mut rng = rng_for(seed, "snr-mc", 0);
            let x: Vec<f64> = (0..1024).map(|_| rng.sample(StandardNormal)).collect();
            let v = snr(&DenseArray::vector(x), 1.0).unwrap();
            assert!((0.85..=1.15).contains(&v), "seed {seed}: snr {v}");
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let s = CouplingSample::from_pair(vec![0.0, 0.0], vec![2.0, 4.0], 0.0, CouplingKind::Independent);
        assert_eq!(interpolate(&s, 0.0).unwrap().x_t.as_slice(), s.x0.as_slice());
        assert_eq!(interpolate(&s, 1.0).unwrap().x_t.as_slice(), s.x1.as_slice());
        assert_eq!(interpolate(&s, 0.5).unwrap().x_t.as_slice(), &[1.0, 2.0]);
        assert!(interpolate(&s, 1.5).is_err());
        assert!(interpolate(&s, -0.1).is_err());
    }

    #[test]
    fn perfect_swap_is_found() {
        let x0 = vec![vec![0.0], vec![1.0]];
        let x1 = vec![vec![1.0], vec![0.0]];
        let perm = minibatch_ot_couple(&x0, &x1).unwrap();
        assert_eq!(perm, vec![1, 0]);
    }

    #[test]
    fn singleton_batch_is_identity() {
        let p = minibatch_ot_couple(&[vec![3.0]], &[vec![-1.0]]).unwrap();
        assert_eq!(p, vec![0]);
    }

    #[test]
    fn ot_couple_matches_enumeration() {
        for seed in 0..20 {
            let mut rng = rng_for(seed, "ot-vs-bf", 0);
            let b = 6;
            let x0: Vec<Vec<f64>> = (0..b)
                .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let x1: Vec<Vec<f64>> = (0..b)
                .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let perm = minibatch_ot_couple(&x0, &x1).unwrap();
            let cost: Vec<Vec<f64>> = x0
                .iter()
                .map(|a| {
                    x1.iter()
                        .map(|c| a.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum())
                        .collect()
                })
                .collect();
            assert_eq!(perm, brute_force_assign(&cost).unwrap(), "seed {seed}");
        }
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let batch = vec![vec![0.0]; 65];
        assert!(minibatch_ot_couple(&batch, &batch).is_err());
    }

    #[test]
    fn reflow_zero_field_maps_x0_to_itself() {
        let net = VelocityNet::zeroed(2, 2, 4, 1);
        let inst = toy_instance(1);
        let s = independent_couple(&inst, 3);
        let ctx = vec![0.0, 0.0];
        let out = reflow_pairs(&net, &[(s.clone(), ctx)], 4).unwrap();
        assert_eq!(out.dropped, 0);
        assert_eq!(out.samples[0].x1.as_slice(), s.x0.as_slice());
        assert_eq!(out.samples[0].kind, s.kind);
    }

    #[test]
    fn reflow_constant_field_translates_by_c() {
        // bias-only single layer: field is constant c regardless of input
        let mut net = VelocityNet::zeroed(2, 0, 0, 0);
        {
            let mut arrays = net.param_arrays_mut();
            arrays[1][0] = 0.5;
            arrays[1][1] = -1.5;
        }
        let inst = toy_instance(1);
        let s = independent_couple(&inst, 3);
        for k in [1, 3, 10] {
            let out = reflow_pairs(&net, &[(s.clone(), vec![])], k).unwrap();
            let end = out.samples[0].x1.as_slice();
            assert!((end[0] - (s.x0[0] + 0.5)).abs() < 1e-12, "k={k}");
            assert!((end[1] - (s.x0[1] - 1.5)).abs() < 1e-12, "k={k}");
        }
    }
}
