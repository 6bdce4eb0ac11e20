//! Curriculum-scheduled training loop: coupling selection, batch assembly,
//! loss evaluation, Adam updates, checkpointing, and metric logging.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use crate::coupling::{
    independent_couple, interpolate, local_gaussian_couple, minibatch_ot_couple, CouplingKind,
    CouplingSample, EditInstance,
};
use crate::flowloss::{combined_loss, combined_loss_backward, LossBreakdown};
use crate::numcore::{save_checkpoint, AdamState, NetGradients, VelocityNet};
use crate::rng::{derive_seed, rng_for};
use crate::{Error, Result};

/// Probability schedule mixing local-Gaussian and independent couplings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumSchedule {
    pub warmup_steps: u64,
    pub warmup_local_frac: f64,
    pub main_local_frac: f64,
    pub max_steps: u64,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            warmup_steps: 300,
            warmup_local_frac: 0.25,
            main_local_frac: 0.5,
            max_steps: 1000,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        for (name, frac) in [
            ("warmup_local_frac", self.warmup_local_frac),
            ("main_local_frac", self.main_local_frac),
        ] {
            if !(0.0..=1.0).contains(&frac) {
                return Err(Error::config(format!("{name}={frac} outside [0,1]")));
            }
        }
        if self.warmup_steps > self.max_steps {
            return Err(Error::config(format!(
                "warmup_steps {} exceeds max_steps {}",
                self.warmup_steps, self.max_steps
            )));
        }
        Ok(())
    }

    /// Probability of drawing the local Gaussian coupling at `step`.
    /// Beyond `max_steps` the schedule clamps to the main-phase fraction.
    pub fn local_fraction(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.warmup_local_frac
        } else {
            self.main_local_frac
        }
    }
}

/// Coupling regime for a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingRegime {
    Curriculum,
    PureLocal,
    PureIndependent,
    MinibatchOt,
}

impl CouplingRegime {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "curriculum" => Ok(CouplingRegime::Curriculum),
            "pure_local" => Ok(CouplingRegime::PureLocal),
            "pure_independent" => Ok(CouplingRegime::PureIndependent),
            "minibatch_ot" => Ok(CouplingRegime::MinibatchOt),
            other => Err(Error::config(format!(
                "unknown coupling_regime '{other}' (expected curriculum | pure_local | pure_independent | minibatch_ot)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CouplingRegime::Curriculum => "curriculum",
            CouplingRegime::PureLocal => "pure_local",
            CouplingRegime::PureIndependent => "pure_independent",
            CouplingRegime::MinibatchOt => "minibatch_ot",
        }
    }
}

impl fmt::Display for CouplingRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub d_s: usize,
    pub d_t: usize,
    pub d_v: usize,
    pub seed: u64,
    pub coupling_regime: CouplingRegime,
    pub reflow_rounds: u32,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            alpha: 0.1,
            d_s: 64,
            d_t: 64,
            d_v: 64,
            seed: 0,
            coupling_regime: CouplingRegime::Curriculum,
            reflow_rounds: 0,
            hidden_width: 128,
            hidden_layers: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        for (name, dim) in [("d_s", self.d_s), ("d_t", self.d_t), ("d_v", self.d_v)] {
            if dim == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.d_t != self.d_s {
            return Err(Error::config(format!(
                "d_t ({}) must equal d_s ({}) so the consistency loss is well-typed",
                self.d_t, self.d_s
            )));
        }
        Ok(())
    }

    pub fn context_dim(&self) -> usize {
        self.d_t + self.d_v
    }

    pub fn fresh_net(&self) -> VelocityNet {
        let mut rng = rng_for(self.seed, "net-init", 0);
        VelocityNet::new(
            2 * self.d_s,
            self.context_dim(),
            self.hidden_width,
            self.hidden_layers,
            &mut rng,
        )
    }
}

/// Draw the coupling kind for one sample at `step` under the schedule.
pub fn choose_coupling(schedule: &CurriculumSchedule, step: u64, rng_seed: u64) -> CouplingKind {
    let frac = schedule.local_fraction(step);
    let u: f64 = rng_for(rng_seed, "choose-coupling", step).random();
    if u < frac {
        CouplingKind::LocalGaussian
    } else {
        CouplingKind::Independent
    }
}

/// Per-phase coupling tallies for the run manifest.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CouplingCounts {
    pub warmup_local: u64,
    pub warmup_other: u64,
    pub main_local: u64,
    pub main_other: u64,
}

impl CouplingCounts {
    fn record(&mut self, schedule: &CurriculumSchedule, step: u64, kind: CouplingKind) {
        let local = kind == CouplingKind::LocalGaussian;
        let warmup = step < schedule.warmup_steps;
        match (warmup, local) {
            (true, true) => self.warmup_local += 1,
            (true, false) => self.warmup_other += 1,
            (false, true) => self.main_local += 1,
            (false, false) => self.main_other += 1,
        }
    }

    pub fn local_total(&self) -> u64 {
        self.warmup_local + self.main_local
    }

    pub fn total(&self) -> u64 {
        self.warmup_local + self.warmup_other + self.main_local + self.main_other
    }
}

fn build_batch_samples(
    batch: &[&EditInstance],
    schedule: &CurriculumSchedule,
    step: u64,
    config: &TrainConfig,
) -> Result<Vec<(usize, CouplingSample)>> {
    let step_seed = derive_seed(config.seed, "train-step", step);
    match config.coupling_regime {
        CouplingRegime::MinibatchOt => {
            // independent draws re-paired by the exact assignment
            let x1s: Vec<Vec<f64>> = batch.iter().map(|inst| inst.paired_latent()).collect();
            let x0s: Vec<Vec<f64>> = (0..batch.len())
                .map(|i| {
                    let mut rng = rng_for(step_seed, "ot-noise", i as u64);
                    (0..x1s[i].len())
                        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                        .collect()
                })
                .collect();
            let perm = minibatch_ot_couple(&x0s, &x1s)?;
            Ok(x0s
                .into_iter()
                .zip(perm)
                .map(|(x0, j)| {
                    (
                        j,
                        CouplingSample::from_pair(x0, x1s[j].clone(), 0.0, CouplingKind::MinibatchOt),
                    )
                })
                .collect())
        }
        regime => Ok(batch
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                let inst_seed = derive_seed(step_seed, "instance", i as u64);
                let kind = match regime {
                    CouplingRegime::Curriculum => choose_coupling(schedule, step, inst_seed),
                    CouplingRegime::PureLocal => CouplingKind::LocalGaussian,
                    CouplingRegime::PureIndependent => CouplingKind::Independent,
                    CouplingRegime::MinibatchOt => unreachable!(),
                };
                let sample = match kind {
                    CouplingKind::LocalGaussian => local_gaussian_couple(inst, inst_seed),
                    _ => independent_couple(inst, inst_seed),
                };
                (i, sample)
            })
            .collect()),
    }
}

/// One training step: couple, interpolate, evaluate the combined loss per
/// instance in fixed ascending order, average gradients, apply one Adam
/// update. On a non-finite loss the step aborts with state unchanged.
pub fn train_step(
    net: &mut VelocityNet,
    adam: &mut AdamState,
    batch: &[&EditInstance],
    schedule: &CurriculumSchedule,
    step: u64,
    config: &TrainConfig,
    counts: &mut CouplingCounts,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::contract("train_step on an empty batch"));
    }
    let samples = build_batch_samples(batch, schedule, step, config)?;
    let step_seed = derive_seed(config.seed, "train-step", step);
    let scale = 1.0 / batch.len() as f64;
    let mut grads = NetGradients::zeros_like(net);
    let mut mean = LossBreakdown {
        fm: 0.0,
        ccl: 0.0,
        alpha: config.alpha,
        total: 0.0,
    };
    for (i, (inst_idx, sample)) in samples.iter().enumerate() {
        let inst = batch[*inst_idx];
        let t: f64 = rng_for(step_seed, "time", i as u64).random();
        let state = interpolate(sample, t)?;
        let ctx = inst.context();
        let pred = net.forward(state.x_t.as_slice(), t, &ctx)?;
        let lb = combined_loss(&pred, sample, inst, config.alpha)?;
        if !lb.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let upstream = combined_loss_backward(&pred, sample, inst, config.alpha)?;
        let g = net.backward(state.x_t.as_slice(), t, &ctx, &upstream)?;
        grads.add_scaled(&g, scale);
        mean.fm += scale * lb.fm;
        mean.ccl += scale * lb.ccl;
        counts.record(schedule, step, sample.kind);
    }
    mean.total = mean.fm + config.alpha * mean.ccl;
    if config.learning_rate != 0.0 {
        adam.step(net, &grads)?;
    } else {
        adam.step_count += 1;
    }
    Ok(mean)
}

/// File outputs of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoint_interval: u64,
}

/// Summary returned by [`train_run`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub final_loss: Option<LossBreakdown>,
    pub steps_run: u64,
    pub coupling_counts: CouplingCounts,
    pub wallclock_ms: u128,
}

pub const METRICS_HEADER: &str = "step,fm_loss,ccl_loss,total_loss,local_frac_running,wallclock_ms";

/// Run `schedule.max_steps` training steps over `dataset`, writing the
/// metrics log row by row and checkpointing every
/// `outputs.checkpoint_interval` steps and at the end.
pub fn train_run(
    config: &TrainConfig,
    dataset: &[EditInstance],
    schedule: &CurriculumSchedule,
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    config.validate()?;
    schedule.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    let started = Instant::now();
    let mut net = config.fresh_net();
    let mut adam = AdamState::new(&net, config.learning_rate);
    let mut counts = CouplingCounts::default();
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&outputs.metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    save_checkpoint(&outputs.checkpoint_path, &net, &adam)?;

    let mut final_loss = None;
    for step in 0..schedule.max_steps {
        let batch = pick_batch(dataset, config, step);
        let lb = train_step(&mut net, &mut adam, &batch, schedule, step, config, &mut counts)?;
        let local_frac = if counts.total() > 0 {
            counts.local_total() as f64 / counts.total() as f64
        } else {
            0.0
        };
        writeln!(
            metrics,
            "{},{:.12e},{:.12e},{:.12e},{:.6},{}",
            step,
            lb.fm,
            lb.ccl,
            lb.total,
            local_frac,
            started.elapsed().as_millis()
        )?;
        if outputs.checkpoint_interval > 0 && (step + 1) % outputs.checkpoint_interval == 0 {
            save_checkpoint(&outputs.checkpoint_path, &net, &adam)?;
        }
        final_loss = Some(lb);
    }

    for round in 0..config.reflow_rounds {
        reflow_round(&mut net, &mut adam, dataset, config, schedule, round, &mut metrics, started)?;
    }

    metrics.flush()?;
    save_checkpoint(&outputs.checkpoint_path, &net, &adam)?;
    Ok(TrainReport {
        final_loss,
        steps_run: schedule.max_steps,
        coupling_counts: counts,
        wallclock_ms: started.elapsed().as_millis(),
    })
}

fn pick_batch<'a>(dataset: &'a [EditInstance], config: &TrainConfig, step: u64) -> Vec<&'a EditInstance> {
    let mut rng = rng_for(config.seed, "batch-pick", step);
    (0..config.batch_size)
        .map(|_| &dataset[rng.random_range(0..dataset.len())])
        .collect()
}

/// One rectified-flow round: re-pair the dataset through the current field
/// and keep training on the frozen reflowed pairs with the plain flow loss.
#[allow(clippy::too_many_arguments)]
fn reflow_round(
    net: &mut VelocityNet,
    adam: &mut AdamState,
    dataset: &[EditInstance],
    config: &TrainConfig,
    schedule: &CurriculumSchedule,
    round: u32,
    metrics: &mut impl Write,
    started: Instant,
) -> Result<()> {
    let round_seed = derive_seed(config.seed, "reflow-round", round as u64);
    let pairs: Vec<(CouplingSample, Vec<f64>)> = dataset
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let s = independent_couple(inst, derive_seed(round_seed, "pair", i as u64));
            (s, inst.context())
        })
        .collect();
    let reflowed = crate::coupling::reflow_pairs(net, &pairs, 25)?;
    if reflowed.samples.is_empty() {
        return Err(Error::contract(format!(
            "reflow round {round} dropped every instance ({} non-finite trajectories)",
            reflowed.dropped
        )));
    }
    for step in 0..schedule.max_steps {
        let mut rng = rng_for(round_seed, "reflow-batch", step);
        let mut grads = NetGradients::zeros_like(net);
        let scale = 1.0 / config.batch_size as f64;
        let mut fm_mean = 0.0;
        for i in 0..config.batch_size {
            let k = rng.random_range(0..reflowed.samples.len());
            let sample = &reflowed.samples[k];
            let (pair_sample, ctx) = &pairs[k];
            let _ = pair_sample;
            let t: f64 = rng_for(round_seed, "reflow-time", step * config.batch_size as u64 + i as u64).random();
            let state = interpolate(sample, t)?;
            let pred = net.forward(state.x_t.as_slice(), t, ctx)?;
            let fm = crate::flowloss::fm_loss(&pred, sample)?;
            if !fm.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let upstream = crate::flowloss::fm_loss_backward(&pred, sample)?;
            let g = net.backward(state.x_t.as_slice(), t, ctx, &upstream)?;
            grads.add_scaled(&g, scale);
            fm_mean += scale * fm;
        }
        adam.step(net, &grads)?;
        writeln!(
            metrics,
            "{},{:.12e},{:.12e},{:.12e},{:.6},{}",
            schedule.max_steps * (round as u64 + 1) + step,
            fm_mean,
            0.0,
            fm_mean,
            -1.0,
            started.elapsed().as_millis()
        )?;
    }
    Ok(())
}
