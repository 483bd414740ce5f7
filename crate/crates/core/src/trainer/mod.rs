//! Training of the affine translation maps `h` (vision-language → target
//! features) and `g` (target → vision-language) on paired image features,
//! with optional text features feeding the text cycle term.

mod adam;
mod affine;
mod loss;
mod ols;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use affine::{AffineMap, MapPair};
pub use loss::{
    cycle_loss, evaluate, loss_and_gradients, reconstruction_loss, total_loss, AffineGrad, Batch,
    LossBreakdown, PairGrad,
};
pub use ols::{ols_fit, OLS_RIDGE};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::store::{self, Workspace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Weight λ of the cycle loss.
    pub cycle_weight: f64,
    pub seed: u64,
    /// Square the cycle residual norms instead of using them as-is.
    pub cycle_squared: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            cycle_weight: 1.0,
            seed: 0,
            cycle_squared: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Precondition("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Precondition("learning_rate must be positive".into()));
        }
        if !(self.cycle_weight >= 0.0 && self.cycle_weight.is_finite()) {
            return Err(Error::Precondition("cycle_weight must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Precondition("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Precondition("adam_eps must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 0 is the initialization, before any update.
    pub epoch: usize,
    pub train: LossBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_out: Option<LossBreakdown>,
}

/// Everything about a run that is a pure function of inputs and config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub config: TrainingConfig,
    pub train_samples: usize,
    pub held_out_samples: usize,
    pub text_samples: usize,
    pub epochs: Vec<EpochReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    #[serde(flatten)]
    pub history: TrainHistory,
    pub wall_time_ms: u64,
}

impl TrainReport {
    pub fn final_epoch(&self) -> &EpochReport {
        self.history.epochs.last().expect("initial epoch always recorded")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub maps: MapPair,
    pub report: TrainReport,
}

/// Rows `[0, split)` train, `[split, count)` are held out.
fn split_point(count: usize) -> usize {
    count - count / 10
}

/// Seeded initialization shared by training and `epochs = 0` runs.
pub fn initial_maps(vl_dim: usize, target_dim: usize, seed: u64) -> MapPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = AffineMap::init(target_dim, vl_dim, &mut rng);
    let g = AffineMap::init(vl_dim, target_dim, &mut rng);
    MapPair { h, g }
}

/// Cycles through a reshuffled permutation of text rows.
struct TextStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl TextStream {
    fn new(count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7874_5f73_7472);
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains `h` and `g` with minibatch Adam on
/// `reconstruction + cycle_weight · cycle`.
///
/// The last 10% of paired rows (and of text rows) are held out and only
/// evaluated. Shuffling and initialization derive from `config.seed`, so a
/// run is reproducible bit for bit.
pub fn train_maps(ws: &Workspace, config: &TrainingConfig) -> Result<TrainOutcome> {
    config.validate()?;
    ws.validate()?;
    let started = Instant::now();
    let count = ws.target_image.count();
    let split = split_point(count);
    if split == 0 {
        return Err(Error::Precondition("workspace has no training samples".into()));
    }
    let train_idx: Vec<usize> = (0..split).collect();
    let held_idx: Vec<usize> = (split..count).collect();
    let p_all = &ws.target_image.features;
    let q_all = &ws.vl_image.features;
    let (p_train, q_train) = (p_all.select_rows(&train_idx), q_all.select_rows(&train_idx));
    let (p_held, q_held) = (p_all.select_rows(&held_idx), q_all.select_rows(&held_idx));

    let (t_train, t_held) = match &ws.vl_text {
        Some(t) => {
            let tc = t.count();
            let ts = split_point(tc);
            let tr: Vec<usize> = (0..ts).collect();
            let th: Vec<usize> = (ts..tc).collect();
            (
                Some(t.features.select_rows(&tr)),
                (!th.is_empty()).then(|| t.features.select_rows(&th)),
            )
        }
        None => (None, None),
    };

    let lambda = config.cycle_weight;
    let squared = config.cycle_squared;
    let full_train = Batch {
        target_image: &p_train,
        vl_image: &q_train,
        vl_text: t_train.as_ref(),
    };
    let held = (!held_idx.is_empty()).then_some(Batch {
        target_image: &p_held,
        vl_image: &q_held,
        vl_text: t_held.as_ref(),
    });
    let snapshot = |maps: &MapPair, epoch: usize| -> Result<EpochReport> {
        Ok(EpochReport {
            epoch,
            train: evaluate(&maps.h, &maps.g, &full_train, lambda, squared)?,
            held_out: held
                .as_ref()
                .map(|b| evaluate(&maps.h, &maps.g, b, lambda, squared))
                .transpose()?,
        })
    };

    let mut maps = initial_maps(ws.vl_dim(), ws.target_dim(), config.seed);
    let mut epochs = vec![snapshot(&maps, 0)?];

    let adam = config.adam();
    let mut states = [
        AdamState::new(maps.h.weights.as_slice().len()),
        AdamState::new(maps.h.bias.len()),
        AdamState::new(maps.g.weights.as_slice().len()),
        AdamState::new(maps.g.bias.len()),
    ];
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut texts = t_train.as_ref().map(|t| TextStream::new(t.rows(), config.seed));
    let mut order = train_idx.clone();
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let pb = p_train.select_rows(chunk);
            let qb = q_train.select_rows(chunk);
            let tb = match (&mut texts, &t_train) {
                (Some(stream), Some(t)) => Some(t.select_rows(&stream.next_batch(config.batch_size))),
                _ => None,
            };
            let batch = Batch {
                target_image: &pb,
                vl_image: &qb,
                vl_text: tb.as_ref(),
            };
            let diverged = |reason: String, last_good: &MapPair| Error::Diverged {
                epoch,
                step,
                reason,
                last_good: Box::new(last_good.clone()),
            };
            let (loss, grads) = loss_and_gradients(&maps.h, &maps.g, &batch, lambda, squared)
                .map_err(|e| diverged(e.to_string(), &maps))?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss became {}", loss.total), &maps));
            }
            let last_good = maps.clone();
            let (hw, hb) = maps.h.params_mut();
            let updates = [
                adam_step(hw, grads.h.weights.as_slice(), &mut states[0], &adam),
                adam_step(hb, &grads.h.bias, &mut states[1], &adam),
            ];
            let (gw, gb) = maps.g.params_mut();
            let more = [
                adam_step(gw, grads.g.weights.as_slice(), &mut states[2], &adam),
                adam_step(gb, &grads.g.bias, &mut states[3], &adam),
            ];
            if let Some(Err(e)) = updates.into_iter().chain(more).find(Result::is_err) {
                return Err(diverged(e.to_string(), &last_good));
            }
            if !maps.h.is_finite() || !maps.g.is_finite() {
                return Err(diverged("parameters became non-finite".into(), &last_good));
            }
            step += 1;
        }
        let diverged = |reason: String| Error::Diverged {
            epoch,
            step,
            reason,
            last_good: Box::new(maps.clone()),
        };
        let report = snapshot(&maps, epoch).map_err(|e| diverged(e.to_string()))?;
        if !report.train.is_finite() {
            return Err(diverged(format!("epoch loss became {}", report.train.total)));
        }
        epochs.push(report);
    }

    let history = TrainHistory {
        config: config.clone(),
        train_samples: split,
        held_out_samples: held_idx.len(),
        text_samples: ws.vl_text.as_ref().map_or(0, |t| t.count()),
        epochs,
    };
    Ok(TrainOutcome {
        maps,
        report: TrainReport {
            history,
            wall_time_ms: started.elapsed().as_millis() as u64,
        },
    })
}

fn bias_matrix(bias: &[f32]) -> Matrix {
    Matrix::from_vec(1, bias.len(), bias.to_vec()).expect("row vector")
}

/// Writes `h.weights.fmx`, `h.bias.fmx`, `g.weights.fmx`, `g.bias.fmx` and
/// `report.json` into a staging directory, then renames it to `dir`.
pub fn save_checkpoint(dir: impl AsRef<Path>, maps: &MapPair, report: &TrainReport) -> Result<()> {
    let dir = dir.as_ref();
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Precondition(format!("{} has no directory name", dir.display())))?;
    let mut staging_name = std::ffi::OsString::from(".staging-");
    staging_name.push(name);
    let staging = dir.with_file_name(staging_name);
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    std::fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    for (prefix, map) in [("h", &maps.h), ("g", &maps.g)] {
        store::write_fmx(&map.weights, staging.join(format!("{prefix}.weights.fmx")))?;
        store::write_fmx(&bias_matrix(&map.bias), staging.join(format!("{prefix}.bias.fmx")))?;
    }
    store::write_json(report, &staging.join("report.json"))?;
    let _ = std::fs::remove_file(staging.join(".textcav.lock"));
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<MapPair> {
    let dir = dir.as_ref();
    let load = |prefix: &str| -> Result<AffineMap> {
        let weights = store::read_fmx(dir.join(format!("{prefix}.weights.fmx")))?;
        let bias = store::read_fmx(dir.join(format!("{prefix}.bias.fmx")))?;
        if bias.rows() != 1 {
            return Err(Error::Consistency(format!(
                "{prefix}.bias.fmx must be a single row, found {}",
                bias.rows()
            )));
        }
        AffineMap::new(weights, bias.into_vec()).map_err(|e| Error::Consistency(format!("{prefix}: {e}")))
    };
    let maps = MapPair {
        h: load("h")?,
        g: load("g")?,
    };
    if maps.h.in_dim() != maps.g.out_dim() || maps.h.out_dim() != maps.g.in_dim() {
        return Err(Error::Consistency(format!(
            "h is {}->{} but g is {}->{}",
            maps.h.in_dim(),
            maps.h.out_dim(),
            maps.g.in_dim(),
            maps.g.out_dim()
        )));
    }
    Ok(maps)
}

pub fn load_report(dir: impl AsRef<Path>) -> Result<TrainReport> {
    store::read_json(&dir.as_ref().join("report.json"))
}
