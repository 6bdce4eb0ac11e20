//! Synthetic edit-pair generation with known edited-region masks, plus the
//! local/global fidelity metrics used for regime comparisons.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;

use crate::coupling::EditInstance;
use crate::numcore::DenseArray;
use crate::rng::rng_for;
use crate::{Error, Result};

const OVER_EDIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskName {
    BrightenRegion,
    InvertRegion,
    ShiftBlock,
    GlobalScale,
}

impl TaskName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "brighten_region" => Ok(TaskName::BrightenRegion),
            "invert_region" => Ok(TaskName::InvertRegion),
            "shift_block" => Ok(TaskName::ShiftBlock),
            "global_scale" => Ok(TaskName::GlobalScale),
            other => Err(Error::config(format!("unknown task name '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskName::BrightenRegion => "brighten_region",
            TaskName::InvertRegion => "invert_region",
            TaskName::ShiftBlock => "shift_block",
            TaskName::GlobalScale => "global_scale",
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A synthetic edit task over a contiguous index block of the latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EditTaskSpec {
    pub task_id: u32,
    pub name: TaskName,
    pub region: Range<usize>,
    pub magnitude: f64,
}

/// The four standard tasks over a `d_s`-sized grid.
pub fn standard_tasks(d_s: usize) -> Vec<EditTaskSpec> {
    let block = d_s / 4;
    vec![
        EditTaskSpec {
            task_id: 0,
            name: TaskName::BrightenRegion,
            region: block..2 * block,
            magnitude: 0.5,
        },
        EditTaskSpec {
            task_id: 1,
            name: TaskName::InvertRegion,
            region: 2 * block..3 * block,
            magnitude: 1.0,
        },
        EditTaskSpec {
            task_id: 2,
            name: TaskName::ShiftBlock,
            region: block..3 * block,
            magnitude: 2.0,
        },
        EditTaskSpec {
            task_id: 3,
            name: TaskName::GlobalScale,
            region: 0..d_s,
            magnitude: 0.3,
        },
    ]
}

/// Smooth source field: a seeded low-frequency cosine mixture scaled into
/// `[-1, 1]`.
fn smooth_field(d_s: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, "smooth-field", 0);
    let modes = 4;
    let amps: Vec<f64> = (0..modes).map(|_| rng.random_range(-1.0..1.0)).collect();
    let phases: Vec<f64> = (0..modes)
        .map(|_| rng.random_range(0.0..2.0 * std::f64::consts::PI))
        .collect();
    let mut field: Vec<f64> = (0..d_s)
        .map(|i| {
            let x = i as f64 / d_s as f64;
            (0..modes)
                .map(|m| amps[m] * (2.0 * std::f64::consts::PI * (m + 1) as f64 * x + phases[m]).cos())
                .sum()
        })
        .collect();
    let max_abs = field.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    for v in field.iter_mut() {
        *v *= 0.9 / max_abs;
    }
    field
}

fn apply_task(task: &EditTaskSpec, x_src: &[f64]) -> Vec<f64> {
    let mut x_tgt = x_src.to_vec();
    let r = task.region.clone();
    match task.name {
        TaskName::BrightenRegion => {
            for v in &mut x_tgt[r] {
                *v += task.magnitude;
            }
        }
        TaskName::InvertRegion => {
            for v in &mut x_tgt[r] {
                *v = -*v;
            }
        }
        TaskName::ShiftBlock => {
            let shift = task.magnitude.round().abs() as usize;
            let block = &x_src[r.clone()];
            let n = block.len();
            if n > 0 && shift % n != 0 {
                let s = shift % n;
                for (k, dst) in x_tgt[r].iter_mut().enumerate() {
                    *dst = block[(k + n - s) % n];
                }
            }
        }
        TaskName::GlobalScale => {
            for v in &mut x_tgt[r] {
                *v *= 1.0 + task.magnitude;
            }
        }
    }
    x_tgt
}

/// Instruction embedding: the `task_id`-th standard basis vector scaled by
/// the sign of the magnitude; distinct task ids are exactly orthogonal.
fn text_embedding(task_id: u32, magnitude: f64, d_t: usize) -> Vec<f64> {
    let mut e = vec![0.0; d_t];
    let sign = if magnitude < 0.0 { -1.0 } else { 1.0 };
    e[task_id as usize % d_t] = sign;
    e
}

/// Structure descriptor: 4x down-averaged source, zero-padded to `d_v`.
fn vit_embedding(x_src: &[f64], d_v: usize) -> Vec<f64> {
    let mut v: Vec<f64> = x_src
        .chunks(4)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    v.resize(d_v, 0.0);
    v.truncate(d_v);
    v
}

/// Generate one deterministic edit instance for `(task, seed)`.
pub fn gen_instance(
    task: &EditTaskSpec,
    seed: u64,
    d_s: usize,
    d_t: usize,
    d_v: usize,
) -> Result<EditInstance> {
    if task.region.start >= task.region.end || task.region.end > d_s {
        return Err(Error::contract(format!(
            "task region {:?} out of bounds for d_s={d_s}",
            task.region
        )));
    }
    if task.name == TaskName::GlobalScale && task.region != (0..d_s) {
        return Err(Error::contract("global_scale requires the full-range region"));
    }
    let instance_seed = crate::rng::derive_seed(seed, "edit-instance", task.task_id as u64);
    let x_src = smooth_field(d_s, instance_seed);
    let x_tgt = apply_task(task, &x_src);
    let mut edit_mask = vec![false; d_s];
    for i in task.region.clone() {
        edit_mask[i] = true;
    }
    Ok(EditInstance {
        x_vit: DenseArray::vector(vit_embedding(&x_src, d_v)),
        x_text: DenseArray::vector(text_embedding(task.task_id, task.magnitude, d_t)),
        x_src: DenseArray::vector(x_src),
        x_tgt: DenseArray::vector(x_tgt),
        edit_mask,
        task_id: task.task_id,
    })
}

/// Local/global fidelity of a predicted latent against the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditMetrics {
    /// RMSE on mask-false coordinates.
    pub preserved_rmse: f64,
    /// RMSE on mask-true coordinates.
    pub edited_rmse: f64,
    /// `exp(-preserved_rmse)`, a bounded context-preservation proxy.
    pub context_score: f64,
}

pub fn edit_metrics(pred_latent: &[f64], inst: &EditInstance) -> Result<EditMetrics> {
    let d_s = inst.x_tgt.len();
    if pred_latent.len() != d_s {
        return Err(Error::DimensionMismatch {
            context: "edit_metrics pred_latent",
            expected: d_s,
            actual: pred_latent.len(),
        });
    }
    let mut preserved = (0.0, 0usize);
    let mut edited = (0.0, 0usize);
    for i in 0..d_s {
        let e = pred_latent[i] - inst.x_tgt[i];
        if inst.edit_mask[i] {
            edited.0 += e * e;
            edited.1 += 1;
        } else {
            preserved.0 += e * e;
            preserved.1 += 1;
        }
    }
    let rmse = |acc: (f64, usize)| if acc.1 == 0 { 0.0 } else { (acc.0 / acc.1 as f64).sqrt() };
    let preserved_rmse = rmse(preserved);
    Ok(EditMetrics {
        preserved_rmse,
        edited_rmse: rmse(edited),
        context_score: (-preserved_rmse).exp(),
    })
}

/// Ratio of leaked change outside the mask to intended change inside it;
/// 0 for a perfect edit, 1 for uniform error, large when edits leak.
pub fn over_edit_index(pred_latent: &[f64], inst: &EditInstance) -> Result<f64> {
    let m = edit_metrics(pred_latent, inst)?;
    Ok(m.preserved_rmse / (m.edited_rmse + OVER_EDIT_EPS))
}

/// Write instances as CSV: `task_id,seed,coordinate_index,x_src,x_tgt,mask`.
pub fn dump_dataset(path: &Path, instances: &[(u64, EditInstance)]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        writeln!(w, "task_id,seed,coordinate_index,x_src,x_tgt,mask")?;
        for (seed, inst) in instances {
            for i in 0..inst.x_src.len() {
                writeln!(
                    w,
                    "{},{},{},{:.17e},{:.17e},{}",
                    inst.task_id,
                    seed,
                    i,
                    inst.x_src[i],
                    inst.x_tgt[i],
                    u8::from(inst.edit_mask[i])
                )?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a dataset written by [`dump_dataset`].
///
/// The conditioning vectors are rebuilt deterministically: `x_vit` from the
/// source latent and `x_text` from the task id (positive orientation; the
/// CSV schema does not carry the magnitude sign).
pub fn load_dataset(path: &Path, d_t: usize, d_v: usize) -> Result<Vec<(u64, EditInstance)>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut rows: Vec<(u32, u64, usize, f64, f64, bool)> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            if line.trim() != "task_id,seed,coordinate_index,x_src,x_tgt,mask" {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("unexpected dataset header '{line}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("expected 6 fields, got {}", parts.len()),
            });
        }
        let parse_err = |what: &str| Error::Parse {
            line: lineno + 1,
            message: format!("bad {what} value"),
        };
        rows.push((
            parts[0].parse().map_err(|_| parse_err("task_id"))?,
            parts[1].parse().map_err(|_| parse_err("seed"))?,
            parts[2].parse().map_err(|_| parse_err("coordinate_index"))?,
            parts[3].parse().map_err(|_| parse_err("x_src"))?,
            parts[4].parse().map_err(|_| parse_err("x_tgt"))?,
            parts[5].parse::<u8>().map_err(|_| parse_err("mask"))? != 0,
        ));
    }
    let mut out: Vec<(u64, EditInstance)> = Vec::new();
    let mut current: Option<(u32, u64, Vec<f64>, Vec<f64>, Vec<bool>)> = None;
    let mut flush = |cur: Option<(u32, u64, Vec<f64>, Vec<f64>, Vec<bool>)>,
                     out: &mut Vec<(u64, EditInstance)>| {
        if let Some((task_id, seed, x_src, x_tgt, mask)) = cur {
            let inst = EditInstance {
                x_text: DenseArray::vector(text_embedding(task_id, 1.0, d_t)),
                x_vit: DenseArray::vector(vit_embedding(&x_src, d_v)),
                x_src: DenseArray::vector(x_src),
                x_tgt: DenseArray::vector(x_tgt),
                edit_mask: mask,
                task_id,
            };
            out.push((seed, inst));
        }
    };
    for (task_id, seed, idx, src, tgt, mask) in rows {
        let start_new = match &current {
            Some((t, s, ..)) => *t != task_id || *s != seed || idx == 0,
            None => true,
        };
        if start_new {
            flush(current.take(), &mut out);
            current = Some((task_id, seed, Vec::new(), Vec::new(), Vec::new()));
        }
        let cur = current.as_mut().unwrap();
        cur.2.push(src);
        cur.3.push(tgt);
        cur.4.push(mask);
    }
    flush(current, &mut out);
    Ok(out)
}
