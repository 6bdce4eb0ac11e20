//! End-to-end experiment harnesses shared by the `oracle` command and the
//! acceptance suite: the 1-D Gaussian closed-form check, the regime
//! comparison on the synthetic edit tasks, the 2-Gaussian reflow toy, and
//! small self-check oracles (gradients, assignment, SNR).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::coupling::{
    brute_force_assign, independent_couple, interpolate, snr, solve_assignment, CouplingKind,
    CouplingSample,
};
use crate::editlab::{edit_metrics, gen_instance, standard_tasks};
use crate::flowloss::{combined_loss_backward, fm_loss, fm_loss_backward};
use crate::numcore::{finite_diff_grad, AdamState, DenseArray, NetGradients, VelocityNet};
use crate::rng::{derive_seed, rng_for};
use crate::sampler::{decode_edit, euler_sample, init_inference_state, straightness};
use crate::trainer::{train_run, CouplingRegime, CurriculumSchedule, TrainConfig, TrainOutputs};
use crate::{Error, Result};

/// Optimal linear field coefficient for the 1-D Gaussian task: with target
/// x1 ~ N(0, s^2) and x0 = x1 + eps, eps ~ N(0, sigma^2), the least-squares
/// velocity at time t is k(t) * x_t with
/// k(t) = -(1-t) sigma^2 / (s^2 + (1-t)^2 sigma^2).
pub fn gaussian_k(t: f64, s: f64, sigma: f64) -> f64 {
    let a = (1.0 - t) * sigma * sigma;
    -a / (s * s + (1.0 - t) * (1.0 - t) * sigma * sigma)
}

/// Monte Carlo slope of the regression of -eps on x_t, an independent route
/// to the same k(t).
pub fn gaussian_slope_regression(t: f64, s: f64, sigma: f64, n: usize, seed: u64) -> f64 {
    let mut rng = rng_for(seed, "gaussian-regression", (t * 1000.0) as u64);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for _ in 0..n {
        let x1: f64 = s * rng.sample::<f64, _>(StandardNormal);
        let eps: f64 = sigma * rng.sample::<f64, _>(StandardNormal);
        let x_t = x1 + (1.0 - t) * eps;
        sxy += -eps * x_t;
        sxx += x_t * x_t;
    }
    sxy / sxx
}

#[derive(Debug, Clone)]
pub struct GaussianFit {
    pub t: f64,
    pub expected: f64,
    pub fitted_net: f64,
    pub fitted_regression: f64,
}

#[derive(Debug, Clone)]
pub struct GaussianOracleReport {
    pub fits: Vec<GaussianFit>,
    /// Worst relative error of the trained net's slope against k(t).
    pub max_rel_error: f64,
}

/// Train a small unconditional field on the 1-D Gaussian task (s = 1,
/// sigma = 1) and fit its slope at a few times by least squares through the
/// origin; the true field is linear so the slope captures it fully.
pub fn gaussian_oracle(seed: u64) -> Result<GaussianOracleReport> {
    let (s, sigma) = (1.0, 1.0);
    let mut init_rng = rng_for(seed, "gaussian-net-init", 0);
    let mut net = VelocityNet::new(1, 0, 48, 2, &mut init_rng);
    let mut adam = AdamState::new(&net, 3e-3);
    let batch = 64;
    for step in 0..2500u64 {
        let mut rng = rng_for(seed, "gaussian-data", step);
        let mut grads = NetGradients::zeros_like(&net);
        let scale = 1.0 / batch as f64;
        for _ in 0..batch {
            let x1 = s * rng.sample::<f64, _>(StandardNormal);
            let eps = sigma * rng.sample::<f64, _>(StandardNormal);
            let sample =
                CouplingSample::from_pair(vec![x1 + eps], vec![x1], sigma, CouplingKind::LocalGaussian);
            let t: f64 = rng.random();
            let state = interpolate(&sample, t)?;
            let pred = net.forward(state.x_t.as_slice(), t, &[])?;
            let upstream = fm_loss_backward(&pred, &sample)?;
            let g = net.backward(state.x_t.as_slice(), t, &[], &upstream)?;
            grads.add_scaled(&g, scale);
        }
        adam.step(&mut net, &grads)?;
    }

    let mut fits = Vec::new();
    let mut max_rel_error = 0.0f64;
    for (i, &t) in [0.0, 0.25, 0.5, 0.75].iter().enumerate() {
        let expected = gaussian_k(t, s, sigma);
        let mut rng = rng_for(seed, "gaussian-eval", i as u64);
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        for _ in 0..4000 {
            let x1 = s * rng.sample::<f64, _>(StandardNormal);
            let eps = sigma * rng.sample::<f64, _>(StandardNormal);
            let x_t = x1 + (1.0 - t) * eps;
            let u = net.forward(&[x_t], t, &[])?[0];
            sxy += u * x_t;
            sxx += x_t * x_t;
        }
        let fitted_net = sxy / sxx;
        let fitted_regression =
            gaussian_slope_regression(t, s, sigma, 200_000, derive_seed(seed, "regression", i as u64));
        max_rel_error = max_rel_error.max((fitted_net - expected).abs() / expected.abs());
        fits.push(GaussianFit {
            t,
            expected,
            fitted_net,
            fitted_regression,
        });
    }
    Ok(GaussianOracleReport {
        fits,
        max_rel_error,
    })
}

/// Preserved-region error medians for one regime at the comparison step
/// counts.
#[derive(Debug, Clone, Copy)]
pub struct RegimeMedians {
    pub preserved_k5: f64,
    pub preserved_k10: f64,
    pub preserved_k50: f64,
}

#[derive(Debug, Clone)]
pub struct RegimeComparisonReport {
    pub lgnc: RegimeMedians,
    pub independent: RegimeMedians,
    pub seeds: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

const COMPARISON_D: usize = 16;

fn comparison_dataset(seed: u64) -> Result<Vec<crate::coupling::EditInstance>> {
    let mut dataset = Vec::new();
    for task in standard_tasks(COMPARISON_D) {
        for k in 0..3u64 {
            dataset.push(gen_instance(
                &task,
                derive_seed(seed, "dataset", k),
                COMPARISON_D,
                COMPARISON_D,
                COMPARISON_D,
            )?);
        }
    }
    Ok(dataset)
}

fn train_comparison_net(
    regime: CouplingRegime,
    alpha: f64,
    seed: u64,
    dataset: &[crate::coupling::EditInstance],
    out_dir: &std::path::Path,
) -> Result<VelocityNet> {
    let config = TrainConfig {
        batch_size: 8,
        learning_rate: 2e-3,
        alpha,
        d_s: COMPARISON_D,
        d_t: COMPARISON_D,
        d_v: COMPARISON_D,
        seed,
        coupling_regime: regime,
        reflow_rounds: 0,
        hidden_width: 64,
        hidden_layers: 2,
    };
    let schedule = CurriculumSchedule {
        warmup_steps: 100,
        warmup_local_frac: 0.25,
        main_local_frac: 0.5,
        max_steps: 400,
    };
    let outputs = TrainOutputs {
        checkpoint_path: out_dir.join(format!("{}-{seed}.ckpt", regime.as_str())),
        metrics_path: out_dir.join(format!("{}-{seed}.csv", regime.as_str())),
        checkpoint_interval: 0,
    };
    train_run(&config, dataset, &schedule, &outputs)?;
    let (net, _) = crate::numcore::load_checkpoint(&outputs.checkpoint_path)?;
    Ok(net)
}

fn regime_median_for(
    net: &VelocityNet,
    kind: CouplingKind,
    dataset: &[crate::coupling::EditInstance],
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let mut errs = Vec::with_capacity(dataset.len());
    for (i, inst) in dataset.iter().enumerate() {
        let x0 = init_inference_state(inst, kind, derive_seed(seed, "eval-init", i as u64))?;
        let traj = euler_sample(net, &x0, &inst.context(), steps)?;
        let pred = decode_edit(&traj, inst)?;
        errs.push(edit_metrics(pred.as_slice(), inst)?.preserved_rmse);
    }
    Ok(median(&mut errs))
}

/// Train both regimes on the four synthetic tasks over `n_seeds` seeds and
/// report median preserved-region RMSE at the comparison step counts. The
/// local regime is the curriculum schedule with the consistency loss on;
/// the baseline is pure independent coupling with it off.
pub fn regime_comparison(
    n_seeds: usize,
    master_seed: u64,
    work_dir: &std::path::Path,
) -> Result<RegimeComparisonReport> {
    let mut lgnc = (Vec::new(), Vec::new(), Vec::new());
    let mut indep = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..n_seeds as u64 {
        let seed = derive_seed(master_seed, "comparison-seed", s);
        let dataset = comparison_dataset(seed)?;
        let net_l = train_comparison_net(CouplingRegime::Curriculum, 0.1, seed, &dataset, work_dir)?;
        let net_i =
            train_comparison_net(CouplingRegime::PureIndependent, 0.0, seed, &dataset, work_dir)?;
        lgnc.0
            .push(regime_median_for(&net_l, CouplingKind::LocalGaussian, &dataset, 5, seed)?);
        lgnc.1
            .push(regime_median_for(&net_l, CouplingKind::LocalGaussian, &dataset, 10, seed)?);
        lgnc.2
            .push(regime_median_for(&net_l, CouplingKind::LocalGaussian, &dataset, 50, seed)?);
        indep
            .0
            .push(regime_median_for(&net_i, CouplingKind::Independent, &dataset, 5, seed)?);
        indep
            .1
            .push(regime_median_for(&net_i, CouplingKind::Independent, &dataset, 10, seed)?);
        indep
            .2
            .push(regime_median_for(&net_i, CouplingKind::Independent, &dataset, 50, seed)?);
    }
    Ok(RegimeComparisonReport {
        lgnc: RegimeMedians {
            preserved_k5: median(&mut lgnc.0),
            preserved_k10: median(&mut lgnc.1),
            preserved_k50: median(&mut lgnc.2),
        },
        independent: RegimeMedians {
            preserved_k5: median(&mut indep.0),
            preserved_k10: median(&mut indep.1),
            preserved_k50: median(&mut indep.2),
        },
        seeds: n_seeds,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ReflowReport {
    pub straightness_before: f64,
    pub straightness_after: f64,
}

fn two_gaussian_sample(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let side = if rng.random::<bool>() { 2.0 } else { -2.0 };
    vec![
        side + 0.3 * rng.sample::<f64, _>(StandardNormal),
        0.3 * rng.sample::<f64, _>(StandardNormal),
    ]
}

fn toy_train(
    net: &mut VelocityNet,
    adam: &mut AdamState,
    pairs: &[(Vec<f64>, Vec<f64>)],
    steps: u64,
    seed: u64,
    label: &'static str,
) -> Result<()> {
    let batch = 32;
    for step in 0..steps {
        let mut rng = rng_for(seed, label, step);
        let mut grads = NetGradients::zeros_like(net);
        let scale = 1.0 / batch as f64;
        for _ in 0..batch {
            let (x0, x1) = &pairs[rng.random_range(0..pairs.len())];
            let sample =
                CouplingSample::from_pair(x0.clone(), x1.clone(), 1.0, CouplingKind::Independent);
            let t: f64 = rng.random();
            let state = interpolate(&sample, t)?;
            let pred = net.forward(state.x_t.as_slice(), t, &[])?;
            if !fm_loss(&pred, &sample)?.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let upstream = fm_loss_backward(&pred, &sample)?;
            let g = net.backward(state.x_t.as_slice(), t, &[], &upstream)?;
            grads.add_scaled(&g, scale);
        }
        adam.step(net, &grads)?;
    }
    Ok(())
}

fn toy_median_straightness(net: &VelocityNet, x0s: &[Vec<f64>], steps: usize) -> Result<f64> {
    let mut vals = Vec::with_capacity(x0s.len());
    for x0 in x0s {
        let traj = euler_sample(net, x0, &[], steps)?;
        if traj.valid {
            vals.push(straightness(&traj)?);
        }
    }
    if vals.is_empty() {
        return Err(Error::contract("all toy trajectories went non-finite"));
    }
    Ok(median(&mut vals))
}

/// One rectified-flow round on the 2-D two-Gaussian toy; reports median
/// trajectory straightness before and after re-pairing.
pub fn reflow_experiment(seed: u64) -> Result<ReflowReport> {
    let mut init_rng = rng_for(seed, "toy-net-init", 0);
    let mut net = VelocityNet::new(2, 0, 32, 2, &mut init_rng);
    let mut adam = AdamState::new(&net, 3e-3);

    let mut data_rng = rng_for(seed, "toy-data", 0);
    let base_pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..1024)
        .map(|_| {
            let x0 = vec![
                data_rng.sample::<f64, _>(StandardNormal),
                data_rng.sample::<f64, _>(StandardNormal),
            ];
            (x0, two_gaussian_sample(&mut data_rng))
        })
        .collect();
    toy_train(&mut net, &mut adam, &base_pairs, 1500, seed, "toy-train")?;

    let mut eval_rng = rng_for(seed, "toy-eval", 0);
    let eval_x0s: Vec<Vec<f64>> = (0..256)
        .map(|_| {
            vec![
                eval_rng.sample::<f64, _>(StandardNormal),
                eval_rng.sample::<f64, _>(StandardNormal),
            ]
        })
        .collect();
    let straightness_before = toy_median_straightness(&net, &eval_x0s, 25)?;

    // re-pair every x0 with the endpoint the current field transports it to
    let mut reflow_pairs = Vec::with_capacity(base_pairs.len());
    for (x0, _) in &base_pairs {
        let traj = euler_sample(&net, x0, &[], 25)?;
        if traj.valid {
            reflow_pairs.push((x0.clone(), traj.endpoint().x_t.as_slice().to_vec()));
        }
    }
    if reflow_pairs.is_empty() {
        return Err(Error::contract("reflow dropped every toy pair"));
    }
    toy_train(&mut net, &mut adam, &reflow_pairs, 800, seed, "toy-reflow")?;
    let straightness_after = toy_median_straightness(&net, &eval_x0s, 25)?;

    Ok(ReflowReport {
        straightness_before,
        straightness_after,
    })
}

/// Worst relative error of analytic net+loss gradients against central
/// finite differences over `draws` random configurations.
pub fn gradient_check(draws: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..draws as u64 {
        let mut rng = rng_for(seed, "grad-check", i);
        let d_s = 3;
        let net = VelocityNet::new(2 * d_s, 2 * d_s, 8, 1, &mut rng);
        let inst = gen_instance(
            &standard_tasks(d_s)[0],
            derive_seed(seed, "grad-inst", i),
            d_s,
            d_s,
            d_s,
        )?;
        let sample = independent_couple(&inst, derive_seed(seed, "grad-pair", i));
        let t: f64 = rng.random();
        let state = interpolate(&sample, t)?;
        let ctx = inst.context();
        let pred = net.forward(state.x_t.as_slice(), t, &ctx)?;
        let upstream = combined_loss_backward(&pred, &sample, &inst, 0.1)?;
        let analytic = net.backward(state.x_t.as_slice(), t, &ctx, &upstream)?;
        let numeric = finite_diff_grad(&net, state.x_t.as_slice(), t, &ctx, &upstream, 1e-5)?;
        worst = worst.max(analytic.max_rel_error(&numeric));
    }
    Ok(worst)
}

/// Exact-solver vs brute-force agreement over random cost matrices with
/// B <= 7, including integer-valued matrices that force ties. Returns the
/// number of mismatches.
pub fn ot_equivalence_check(trials: usize, seed: u64) -> Result<usize> {
    let mut mismatches = 0;
    for trial in 0..trials as u64 {
        let mut rng = rng_for(seed, "ot-check", trial);
        let n = rng.random_range(1..=7);
        let integer_ties = trial % 4 == 0;
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        if integer_ties {
                            rng.random_range(0..3) as f64
                        } else {
                            rng.random::<f64>()
                        }
                    })
                    .collect()
            })
            .collect();
        if solve_assignment(&cost)? != brute_force_assign(&cost)? {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

/// Empirical SNR of the perturbed initialization at matched variances:
/// d_z = 1024, unit target variance, sigma = 1.
pub fn snr_check(seeds: usize, master_seed: u64) -> Result<(f64, f64, f64)> {
    let d = 1024;
    let mut sum = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in 0..seeds as u64 {
        let mut rng = rng_for(master_seed, "snr-check", s);
        let x_tgt =
            DenseArray::vector((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
        let v = snr(&x_tgt, 1.0)?;
        sum += v;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((sum / seeds as f64, lo, hi))
}
