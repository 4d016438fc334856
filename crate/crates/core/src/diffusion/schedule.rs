use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

pub const COSINE_OFFSET: f64 = 0.008;
/// Largest per-step noise fraction `1 - alpha_bar[t]/alpha_bar[t-1]`.
pub const MAX_BETA: f64 = 0.999;
/// Default bound on each coordinate of the reconstructed clean point during reverse steps.
pub const DEFAULT_X0_CLIP: f64 = 6.0;

/// Cumulative signal coefficients `alpha_bar[0..=T]` of the forward process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    alpha_bar: Vec<f64>,
    x0_clip: Option<f64>,
}

fn cosine_raw(t: usize, steps: usize) -> f64 {
    let s = COSINE_OFFSET;
    let f = ((t as f64 / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
    f.cos().powi(2)
}

impl NoiseSchedule {
    /// Cosine cumulative schedule normalised so `alpha_bar[0] = 1`, with each step's
    /// noise fraction capped at [`MAX_BETA`] so the last coefficient stays positive.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        let base = cosine_raw(0, steps);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for t in 1..=steps {
            let raw = cosine_raw(t, steps) / base;
            let prev = alpha_bar[t - 1];
            alpha_bar.push(raw.max(prev * (1.0 - MAX_BETA)));
        }
        let sched = Self {
            steps,
            alpha_bar,
            x0_clip: Some(DEFAULT_X0_CLIP),
        };
        sched.validate()?;
        Ok(sched)
    }

    /// Schedule from explicit coefficients; used by tests that need specific values.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 3 {
            return Err(Error::Config("schedule needs at least 2 steps".into()));
        }
        let sched = Self {
            steps: alpha_bar.len() - 1,
            alpha_bar,
            x0_clip: None,
        };
        sched.validate()?;
        Ok(sched)
    }

    /// Bounds the clean-point estimate `x0_hat` to `[-clip, clip]` in every reverse step;
    /// `None` applies the unclipped update.
    pub fn with_x0_clip(mut self, clip: Option<f64>) -> Result<Self> {
        if let Some(c) = clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("x0 clip must be positive, got {c}")));
            }
        }
        self.x0_clip = clip;
        Ok(self)
    }

    pub fn x0_clip(&self) -> Option<f64> {
        self.x0_clip
    }

    fn validate(&self) -> Result<()> {
        if self.alpha_bar[0] != 1.0 {
            return Err(Error::Config("alpha_bar[0] must be 1".into()));
        }
        for w in self.alpha_bar.windows(2) {
            if !(w[1] < w[0]) || !(w[1] > 0.0) {
                return Err(Error::Config(format!(
                    "alpha_bar must decrease strictly within (0, 1]: {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Config(format!(
                "timestep {t} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }

    pub fn content_hash(&self) -> String {
        let mut bytes: Vec<u8> = self
            .alpha_bar
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        bytes.extend_from_slice(&self.x0_clip.unwrap_or(0.0).to_le_bytes());
        util::sha256_hex(&bytes)
    }
}

pub const TIME_EMBED_DIM: usize = 16;

/// Sinusoidal embedding of an integer timestep: eight sines then eight cosines over
/// geometrically spaced frequencies.
pub fn time_embedding(t: usize) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}
