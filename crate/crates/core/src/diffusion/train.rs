use serde::{Deserialize, Serialize};

use super::denoiser::{DenoiserArch, DenoiserNet};
use super::process::diffusion_loss_grad;
use super::schedule::NoiseSchedule;
use super::snapshot::{ModelSnapshot, SnapshotMeta};
use crate::concepts::ConceptTable;
use crate::error::{Error, Result};
use crate::numgrad::{AdamConfig, OptimizerState, Tensor};
use crate::util::{self, derive_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub arch: DenoiserArch,
    /// Cosine-anneal the learning rate from `lr` down to `lr * final_lr_fraction`.
    pub cosine_decay: bool,
    pub final_lr_fraction: f64,
    /// Exponential moving average of the weights; the averaged weights are returned.
    pub ema_decay: Option<f64>,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 30000,
            batch: 128,
            lr: 1e-3,
            seed: 0,
            arch: DenoiserArch::default(),
            cosine_decay: true,
            final_lr_fraction: 0.0,
            ema_decay: Some(0.999),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedBase {
    pub snapshot: ModelSnapshot,
    pub losses: Vec<f64>,
}

/// Fits the denoiser to ground-truth draws from every concept in the table, synonym
/// included, by minimising the noise-prediction loss with Adam.
pub fn train_base(
    table: &ConceptTable,
    sched: &NoiseSchedule,
    cfg: &BaseTrainConfig,
) -> Result<TrainedBase> {
    table.validate()?;
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    if let Some(d) = cfg.ema_decay {
        if !(0.0..1.0).contains(&d) {
            return Err(Error::Config(format!(
                "ema decay must lie in [0, 1), got {d}"
            )));
        }
    }
    let mut init_rng = util::seeded(derive_seed(cfg.seed, 0));
    let mut net = DenoiserNet::new(cfg.arch.clone(), &mut init_rng)?;
    let mut opt = OptimizerState::new(&net.params, AdamConfig::with_lr(cfg.lr));
    let mut rng = util::seeded(derive_seed(cfg.seed, 1));
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut ema = cfg.ema_decay.map(|_| net.params.flatten_values());
    let k = table.concepts.len();
    for step in 0..cfg.steps {
        let mut points = Vec::with_capacity(cfg.batch);
        let mut conds: Vec<&[f64]> = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let c = &table.concepts[rand::Rng::random_range(&mut rng, 0..k)];
            points.push(c.gen.sample(&mut rng));
            conds.push(&c.embedding);
        }
        let x0 = Tensor::from_rows(&points);
        let (loss, grad) = diffusion_loss_grad(&net, &x0, &conds, sched, &mut rng)
            .map_err(|e| diverged(e, step))?;
        if !loss.is_finite() {
            return Err(Error::numeric(
                "train_base",
                format!("loss is {loss} at step {step}"),
            ));
        }
        if cfg.cosine_decay {
            let progress = step as f64 / cfg.steps as f64;
            let floor = cfg.final_lr_fraction;
            let scale =
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            opt.config.lr = cfg.lr * scale;
        }
        opt.step(&mut net.params, &grad)
            .map_err(|e| diverged(e, step))?;
        if let (Some(avg), Some(decay)) = (ema.as_mut(), cfg.ema_decay) {
            let current = net.params.flatten_values();
            avg.iter_mut()
                .zip(current)
                .for_each(|(a, c)| *a = decay * *a + (1.0 - decay) * c);
        }
        losses.push(loss);
    }
    if let Some(avg) = ema {
        net.params.set_flat_values(&avg)?;
    }
    let meta = SnapshotMeta {
        origin: "base".into(),
        steps: cfg.steps,
        seed: cfg.seed,
        loss_digest: loss_digest(&losses),
        parent: None,
    };
    Ok(TrainedBase {
        snapshot: ModelSnapshot::new(net, sched.clone(), table, meta),
        losses,
    })
}

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op: "train_base",
            detail: format!("step {step} ({op}): {detail}"),
        },
        other => other,
    }
}

pub fn loss_digest(losses: &[f64]) -> String {
    let bytes: Vec<u8> = losses.iter().flat_map(|v| v.to_le_bytes()).collect();
    util::sha256_hex(&bytes)
}
