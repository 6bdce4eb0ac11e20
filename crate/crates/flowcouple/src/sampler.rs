//! Fixed-step Euler integration of the learned velocity field, inference
//! initialization for both coupling regimes, NFE accounting, and the
//! trajectory-straightness diagnostic.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::coupling::{local_sigma, CouplingKind, EditInstance, FlowState};
use crate::numcore::{DenseArray, VelocityNet};
use crate::rng::rng_for;
use crate::{Error, Result};

/// A recorded Euler trajectory. `nfe` counts actual network evaluations.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<FlowState>,
    pub velocities: Vec<Vec<f64>>,
    pub nfe: usize,
    /// False if integration hit a non-finite state and was truncated.
    pub valid: bool,
}

impl Trajectory {
    pub fn endpoint(&self) -> &FlowState {
        self.states.last().expect("trajectory has at least the initial state")
    }
}

/// Inference-time initialization of the paired state.
///
/// The target latent is unknown at inference, so the local Gaussian regime
/// seeds both halves from the source latent plus noise at the source's
/// noise scale; the independent regime starts from pure `N(0, I)`.
pub fn init_inference_state(
    inst: &EditInstance,
    kind: CouplingKind,
    rng_seed: u64,
) -> Result<Vec<f64>> {
    let d_s = inst.x_src.len();
    let mut rng = rng_for(rng_seed, "init-inference", 0);
    match kind {
        CouplingKind::Independent => Ok((0..2 * d_s).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()),
        CouplingKind::LocalGaussian => {
            let sigma = local_sigma(&inst.x_src);
            let mut x0 = Vec::with_capacity(2 * d_s);
            for _ in 0..2 {
                for v in inst.x_src.as_slice() {
                    let n: f64 = rng.sample(StandardNormal);
                    x0.push(v + sigma * n);
                }
            }
            Ok(x0)
        }
        CouplingKind::MinibatchOt => Err(Error::contract(
            "minibatch_ot is a training-time pairing, not an inference initialization",
        )),
    }
}

/// Explicit Euler on the uniform grid `t_k = k/K`:
/// `x_{k+1} = x_k + (1/K) u(x_k, k/K | context)`.
pub fn euler_sample(
    net: &VelocityNet,
    x0: &[f64],
    context: &[f64],
    steps: usize,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::contract("euler_sample requires at least one step"));
    }
    let k = steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps);
    let mut x = x0.to_vec();
    states.push(FlowState {
        x_t: DenseArray::vector(x.clone()),
        t: 0.0,
    });
    let mut nfe = 0;
    let mut valid = true;
    for step in 0..steps {
        let t = step as f64 / k;
        let v = net.forward(&x, t, context)?;
        nfe += 1;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += vi / k;
        }
        velocities.push(v);
        let t_next = (step + 1) as f64 / k;
        if !x.iter().all(|v| v.is_finite()) {
            valid = false;
            states.push(FlowState {
                x_t: DenseArray::vector(x),
                t: t_next,
            });
            break;
        }
        states.push(FlowState {
            x_t: DenseArray::vector(x.clone()),
            t: t_next,
        });
    }
    Ok(Trajectory {
        states,
        velocities,
        nfe,
        valid,
    })
}

/// Mean squared deviation of per-step velocities from the trajectory chord
/// `x_K - x_0`; zero iff every velocity equals the chord.
pub fn straightness(traj: &Trajectory) -> Result<f64> {
    if !traj.valid {
        return Err(Error::contract("straightness of an invalid trajectory"));
    }
    if traj.velocities.is_empty() {
        return Err(Error::contract("straightness needs at least one velocity"));
    }
    let first = traj.states.first().unwrap().x_t.as_slice();
    let last = traj.endpoint().x_t.as_slice();
    let chord: Vec<f64> = last.iter().zip(first).map(|(b, a)| b - a).collect();
    let mut acc = 0.0;
    for v in &traj.velocities {
        acc += v
            .iter()
            .zip(&chord)
            .map(|(vi, ci)| (vi - ci) * (vi - ci))
            .sum::<f64>();
    }
    Ok(acc / traj.velocities.len() as f64)
}

/// Desk-scale decode: the target half of the final state.
pub fn decode_edit(traj: &Trajectory, inst: &EditInstance) -> Result<DenseArray> {
    if !traj.valid {
        return Err(Error::contract("cannot decode an invalid trajectory"));
    }
    let d_s = inst.x_src.len();
    let end = traj.endpoint().x_t.as_slice();
    if end.len() != 2 * d_s {
        return Err(Error::DimensionMismatch {
            context: "decode_edit state",
            expected: 2 * d_s,
            actual: end.len(),
        });
    }
    Ok(DenseArray::vector(end[d_s..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_instance(d_s: usize, seed: u64) -> EditInstance {
        let mut rng = rng_for(seed, "sampler-test", 0);
        EditInstance {
            x_src: DenseArray::vector((0..d_s).map(|_| rng.random_range(-1.0..1.0)).collect()),
            x_tgt: DenseArray::vector((0..d_s).map(|_| rng.random_range(-1.0..1.0)).collect()),
            x_text: DenseArray::vector(vec![1.0; d_s]),
            x_vit: DenseArray::vector(vec![0.0; d_s]),
            edit_mask: {
                let mut m = vec![false; d_s];
                m[0] = true;
                m
            },
            task_id: 0,
        }
    }

    #[test]
    fn constant_source_init_stays_near_source() {
        let mut inst = toy_instance(4, 1);
        inst.x_src = DenseArray::vector(vec![0.5; 4]);
        let x0 = init_inference_state(&inst, CouplingKind::LocalGaussian, 7).unwrap();
        for half in 0..2 {
            for i in 0..4 {
                assert!((x0[half * 4 + i] - 0.5).abs() < 0.01);
            }
        }
    }

    #[test]
    fn independent_init_is_seed_reproducible() {
        let inst = toy_instance(3, 2);
        let a = init_inference_state(&inst, CouplingKind::Independent, 5).unwrap();
        let b = init_inference_state(&inst, CouplingKind::Independent, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn local_init_noise_energy_matches_sigma() {
        // ||x0_half - x_src||^2 / d_s concentrates at sigma^2
        let inst = toy_instance(64, 3);
        let sigma = local_sigma(&inst.x_src);
        let mut acc = 0.0;
        let n = 1000;
        for seed in 0..n {
            let x0 = init_inference_state(&inst, CouplingKind::LocalGaussian, seed).unwrap();
            let d_s = 64;
            let e: f64 = x0[..d_s]
                .iter()
                .zip(inst.x_src.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            acc += e / d_s as f64;
        }
        let mean = acc / n as f64;
        assert!(
            (mean - sigma * sigma).abs() / (sigma * sigma) < 0.15,
            "noise energy {mean} vs sigma^2 {}",
            sigma * sigma
        );
    }

    #[test]
    fn zero_field_keeps_endpoint_at_x0() {
        let net = VelocityNet::zeroed(2, 0, 4, 1);
        let traj = euler_sample(&net, &[1.0, -2.0], &[], 7).unwrap();
        assert_eq!(traj.endpoint().x_t.as_slice(), &[1.0, -2.0]);
        assert_eq!(traj.nfe, 7);
        assert_eq!(traj.velocities.len(), 7);
        assert_eq!(traj.states.len(), 8);
    }

    #[test]
    fn constant_field_translates_by_c_for_every_k() {
        let mut net = VelocityNet::zeroed(2, 0, 0, 0);
        {
            let mut arrays = net.param_arrays_mut();
            arrays[1][0] = 1.25;
            arrays[1][1] = -0.5;
        }
        for k in [1, 2, 5, 32] {
            let traj = euler_sample(&net, &[0.0, 0.0], &[], k).unwrap();
            let end = traj.endpoint().x_t.as_slice();
            assert!((end[0] - 1.25).abs() < 1e-12, "k={k}");
            assert!((end[1] + 0.5).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn time_grid_is_strictly_increasing() {
        let net = VelocityNet::zeroed(2, 0, 4, 1);
        let traj = euler_sample(&net, &[0.0, 0.0], &[], 5).unwrap();
        for (k, st) in traj.states.iter().enumerate() {
            assert!((st.t - k as f64 / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn straightness_zero_for_constant_field() {
        let mut net = VelocityNet::zeroed(2, 0, 0, 0);
        net.param_arrays_mut()[1][0] = 2.0;
        let traj = euler_sample(&net, &[0.0, 0.0], &[], 6).unwrap();
        assert!(straightness(&traj).unwrap() < 1e-24);
    }

    #[test]
    fn straightness_hand_arithmetic_on_two_segment_path() {
        // states 0 -> (1,0) -> (1,1), velocities (1,0) then (0,1):
        // chord (1,1), per-step deviations each 1, metric 1.0
        let traj = Trajectory {
            states: vec![
                FlowState { x_t: DenseArray::vector(vec![0.0, 0.0]), t: 0.0 },
                FlowState { x_t: DenseArray::vector(vec![1.0, 0.0]), t: 0.5 },
                FlowState { x_t: DenseArray::vector(vec![1.0, 1.0]), t: 1.0 },
            ],
            velocities: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            nfe: 2,
            valid: true,
        };
        assert!((straightness(&traj).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_trajectory_is_rejected() {
        let mut net = VelocityNet::zeroed(2, 0, 0, 0);
        net.param_arrays_mut()[1][0] = f64::INFINITY;
        let traj = euler_sample(&net, &[0.0, 0.0], &[], 4).unwrap();
        assert!(!traj.valid);
        assert!(straightness(&traj).is_err());
        let inst = toy_instance(1, 4);
        assert!(decode_edit(&traj, &inst).is_err());
    }

    #[test]
    fn decode_edit_returns_target_half() {
        let net = VelocityNet::zeroed(4, 0, 0, 0);
        let inst = toy_instance(2, 5);
        let traj = euler_sample(&net, &[1.0, 2.0, 3.0, 4.0], &[], 1).unwrap();
        let out = decode_edit(&traj, &inst).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn euler_error_halves_as_k_doubles_on_affine_field() {
        // field u(x) = A x + b with a generic linear layer acting on x only
        let mut rng = rng_for(6, "euler-order", 0);
        let mut net = VelocityNet::zeroed(2, 0, 0, 0);
        {
            let in_dim = 2 + crate::numcore::TIME_FEATURE_DIM;
            let mut arrays = net.param_arrays_mut();
            for r in 0..2 {
                for c in 0..2 {
                    arrays[0][r * in_dim + c] = rng.random_range(-0.5..0.5);
                }
                arrays[1][r] = rng.random_range(-0.5..0.5);
            }
        }
        let x0 = [0.3, -0.7];
        let reference = euler_sample(&net, &x0, &[], 4096).unwrap();
        let r_end = reference.endpoint().x_t.as_slice().to_vec();
        let err_of = |k: usize| {
            let e = euler_sample(&net, &x0, &[], k).unwrap();
            e.endpoint()
                .x_t
                .as_slice()
                .iter()
                .zip(&r_end)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let mut prev = err_of(8);
        for k in [16, 32, 64] {
            let cur = err_of(k);
            let ratio = cur / prev;
            assert!((ratio - 0.5).abs() < 0.2 * 0.5 + 0.1, "k={k} ratio {ratio}");
            prev = cur;
        }
    }
}
