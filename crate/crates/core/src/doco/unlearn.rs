use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::disc::{branch_accuracy, value_tape, DiscriminatorNet};
use super::surgery::{apply_surgery, SurgeryScope};
use crate::concepts::{ConceptTable, Role};
use crate::diffusion::{
    add_noise, denoise_step, denoise_step_tape, diffusion_loss_grad, grads_of, loss_digest, sample,
    standard_normal, uniform_timesteps, DenoiserNet, ModelSnapshot, NoisePredictor, NoiseSchedule,
    SnapshotMeta,
};
use crate::error::{Error, Result};
use crate::numgrad::{AdamConfig, FlatGrad, OptimizerState, Tape, Tensor};
use crate::util::{self, derive_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "doco-cp")]
    DocoCp,
    #[serde(rename = "doco-l2retain")]
    DocoL2Retain,
    #[serde(rename = "doco-noretain")]
    DocoNoRetain,
    #[serde(rename = "pairwise-l2")]
    PairwiseL2,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::DocoCp,
        Method::DocoL2Retain,
        Method::DocoNoRetain,
        Method::PairwiseL2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::DocoCp => "doco-cp",
            Method::DocoL2Retain => "doco-l2retain",
            Method::DocoNoRetain => "doco-noretain",
            Method::PairwiseL2 => "pairwise-l2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected one of doco-cp, doco-l2retain, doco-noretain, pairwise-l2)")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Update rule for the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenOptimizer {
    /// Plain gradient descent: the update is `-lr * G`, so the projected direction is
    /// applied as is.
    #[default]
    Sgd,
    Adam,
}

/// Which generator parameters the unlearning update may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamScope {
    /// Only the first-layer weights reading the concept embedding.
    #[default]
    Conditioning,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    pub iterations: usize,
    /// Leading iterations that train only the discriminator.
    pub warmup: usize,
    pub batch: usize,
    pub gen_lr: f64,
    /// Generator learning rate for `pairwise-l2`, whose loss is a squared noise difference
    /// and has gradients orders of magnitude larger than the critic loss.
    pub pairwise_lr: f64,
    pub gen_optimizer: GenOptimizer,
    pub param_scope: ParamScope,
    pub disc_lr: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Concepts whose diffusion loss defines the retain gradient. `None` means the anchor
    /// plus every retain concept.
    pub retain: Option<Vec<String>>,
    pub retain_batch: usize,
    /// Decay of the running average used as the retain gradient; 0 uses each step's
    /// fresh estimate.
    pub retain_grad_ema: f64,
    /// Anchor samples drawn from the initial model before the run.
    pub pool_size: usize,
    /// Fresh anchor samples used only to measure discriminator accuracy.
    pub heldout_size: usize,
    pub disc_steps_per_gen: usize,
    pub surgery_scope: SurgeryScope,
    /// Keep a copy of the generator every this many iterations.
    pub snapshot_every: Option<usize>,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            method: Method::DocoCp,
            iterations: 2000,
            warmup: 1000,
            batch: 256,
            gen_lr: 3.0,
            pairwise_lr: 3e-3,
            gen_optimizer: GenOptimizer::default(),
            param_scope: ParamScope::default(),
            disc_lr: 1e-3,
            lambda: 3.0,
            seed: 0,
            retain: None,
            retain_batch: 256,
            retain_grad_ema: 0.95,
            pool_size: 1024,
            heldout_size: 2000,
            disc_steps_per_gen: 1,
            surgery_scope: SurgeryScope::Global,
            snapshot_every: None,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self, table: &ConceptTable) -> Result<()> {
        if self.iterations > 0 && self.warmup >= self.iterations {
            return Err(Error::Config(format!(
                "warmup ({}) must be smaller than iterations ({})",
                self.warmup, self.iterations
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.batch == 0
            || self.retain_batch == 0
            || self.pool_size == 0
            || self.heldout_size == 0
            || self.disc_steps_per_gen == 0
        {
            return Err(Error::Config(
                "batch, retain_batch, pool_size, heldout_size and disc_steps_per_gen must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.retain_grad_ema) {
            return Err(Error::Config(format!(
                "retain_grad_ema must lie in [0, 1), got {}",
                self.retain_grad_ema
            )));
        }
        for (name, lr) in [
            ("gen_lr", self.gen_lr),
            ("pairwise_lr", self.pairwise_lr),
            ("disc_lr", self.disc_lr),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::Config("snapshot_every must be positive".into()));
        }
        self.retain_ids(table).map(|_| ())
    }

    /// Resolved retain set. Target and synonym concepts are never allowed.
    pub fn retain_ids(&self, table: &ConceptTable) -> Result<Vec<String>> {
        let ids = self
            .retain
            .clone()
            .unwrap_or_else(|| table.default_retain_ids());
        if ids.is_empty() {
            return Err(Error::Config("retain set is empty".into()));
        }
        for id in &ids {
            let c = table
                .get(id)
                .ok_or_else(|| Error::Config(format!("retain set names unknown concept `{id}`")))?;
            if matches!(c.role, Role::Target | Role::OodSynonym) {
                return Err(Error::Config(format!(
                    "retain set may not contain {} concept `{id}`",
                    c.role.as_str()
                )));
            }
        }
        Ok(ids)
    }
}

/// The two conditions compared by the critic.
#[derive(Debug, Clone, Copy)]
pub struct Branches<'a> {
    pub anchor: &'a [f64],
    pub target: &'a [f64],
}

impl<'a> Branches<'a> {
    pub fn from_table(table: &'a ConceptTable) -> Self {
        Self {
            anchor: &table.anchor().embedding,
            target: &table.target().embedding,
        }
    }
}

/// A noised batch shared by both branches.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub x_t: Tensor,
    pub t: Vec<usize>,
}

impl NoisedBatch {
    pub fn draw(
        pool: &[[f64; 2]],
        batch: usize,
        sched: &NoiseSchedule,
        rng: &mut Rng,
    ) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::InsufficientData("anchor pool is empty".into()));
        }
        let x0: Vec<[f64; 2]> = (0..batch)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        let x0 = Tensor::from_rows(&x0);
        let t = uniform_timesteps(rng, batch, sched);
        let eps = standard_normal(rng, batch);
        let x_t = add_noise(&x0, &t, &eps, sched)?;
        Ok(Self { x_t, t })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// One deterministic step from the shared `x_t` under each branch condition.
    pub fn denoise<N: NoisePredictor + ?Sized>(
        &self,
        net: &N,
        branches: Branches,
        sched: &NoiseSchedule,
    ) -> Result<(Tensor, Tensor)> {
        let n = self.len();
        let a = denoise_step(net, &self.x_t, &self.t, &vec![branches.anchor; n], sched)?;
        let b = denoise_step(net, &self.x_t, &self.t, &vec![branches.target; n], sched)?;
        Ok((a, b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscStepStats {
    /// Adversarial value before the update.
    pub value: f64,
    /// Batch accuracy before the update.
    pub accuracy: f64,
}

/// One ascent step on the adversarial value with respect to the critic only.
pub fn discriminator_step<N: NoisePredictor + ?Sized>(
    disc: &mut DiscriminatorNet,
    opt: &mut OptimizerState,
    net: &N,
    batch: &NoisedBatch,
    branches: Branches,
    sched: &NoiseSchedule,
) -> Result<DiscStepStats> {
    let (xa, xb) = batch.denoise(net, branches, sched)?;
    let mut tape = Tape::new();
    let vars = disc.params.bind(&mut tape);
    let a = tape.constant(xa);
    let b = tape.constant(xb);
    let za = disc.logits_tape(&mut tape, &vars, a, &batch.t)?;
    let zb = disc.logits_tape(&mut tape, &vars, b, &batch.t)?;
    let v = value_tape(&mut tape, za, zb)?;
    let neg = tape.scale(v, -1.0)?;
    tape.backward(neg)?;
    let stats = DiscStepStats {
        value: tape.value(v).values()[0],
        accuracy: branch_accuracy(tape.value(za).values(), tape.value(zb).values()),
    };
    let g = grads_of(&disc.params, &tape, &vars)?;
    opt.step(&mut disc.params, &g)?;
    Ok(stats)
}

/// Non-saturating generator loss `-mean log s(D(x_prev(target)))` and its gradient with
/// respect to the denoiser. The critic is frozen.
pub fn generator_unlearn_grad<N: NoisePredictor + ?Sized>(
    net: &N,
    disc: &DiscriminatorNet,
    batch: &NoisedBatch,
    branches: Branches,
    sched: &NoiseSchedule,
) -> Result<(f64, FlatGrad)> {
    let n = batch.len();
    let mut tape = Tape::new();
    let vars = net.params().bind(&mut tape);
    let dvars = disc.params.bind_frozen(&mut tape);
    let x_prev = denoise_step_tape(
        &mut tape,
        net,
        &vars,
        &batch.x_t,
        &batch.t,
        &vec![branches.target; n],
        sched,
    )?;
    let z = disc.logits_tape(&mut tape, &dvars, x_prev, &batch.t)?;
    let ls = tape.log_sigmoid(z)?;
    let m = tape.mean(ls)?;
    let loss = tape.scale(m, -1.0)?;
    tape.backward(loss)?;
    Ok((
        tape.value(loss).values()[0],
        grads_of(net.params(), &tape, &vars)?,
    ))
}

/// Ground-truth batch from the retain concepts, each row's concept chosen uniformly.
pub fn retain_batch(
    table: &ConceptTable,
    retain: &[String],
    batch: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<usize>)> {
    if retain.is_empty() {
        return Err(Error::Config("retain set is empty".into()));
    }
    let idx: Vec<usize> = retain
        .iter()
        .map(|id| {
            table
                .index_of(id)
                .ok_or_else(|| Error::Config(format!("unknown concept `{id}`")))
        })
        .collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(batch);
    let mut labels = Vec::with_capacity(batch);
    for _ in 0..batch {
        let i = idx[rng.random_range(0..idx.len())];
        points.push(table.concepts[i].gen.sample(rng));
        labels.push(i);
    }
    Ok((Tensor::from_rows(&points), labels))
}

/// Diffusion loss on a retain batch and its gradient.
pub fn generator_retain_grad<N: NoisePredictor + ?Sized>(
    net: &N,
    table: &ConceptTable,
    retain: &[String],
    batch: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(f64, FlatGrad)> {
    let (x0, labels) = retain_batch(table, retain, batch, rng)?;
    let conds: Vec<&[f64]> = labels
        .iter()
        .map(|&i| table.concepts[i].embedding.as_slice())
        .collect();
    diffusion_loss_grad(net, &x0, &conds, sched, rng)
}

/// `mean ||eps(x_t, target) - stopgrad(eps(x_t, anchor))||^2` and its gradient.
pub fn pairwise_l2_grad<N: NoisePredictor + ?Sized>(
    net: &N,
    batch: &NoisedBatch,
    branches: Branches,
) -> Result<(f64, FlatGrad)> {
    let n = batch.len();
    let reference = net.predict(&batch.x_t, &batch.t, &vec![branches.anchor; n])?;
    let mut tape = Tape::new();
    let vars = net.params().bind(&mut tape);
    let x = tape.constant(batch.x_t.clone());
    let eps = net.predict_tape(&mut tape, &vars, x, &batch.t, &vec![branches.target; n])?;
    let r = tape.constant(reference);
    let d = tape.sub(eps, r)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    let loss = tape.scale(s, 1.0 / n as f64)?;
    tape.backward(loss)?;
    Ok((
        tape.value(loss).values()[0],
        grads_of(net.params(), &tape, &vars)?,
    ))
}

/// Critic accuracy over a fixed noised batch, both branches re-denoised by `net`.
pub fn heldout_accuracy<N: NoisePredictor + ?Sized>(
    disc: &DiscriminatorNet,
    net: &N,
    heldout: &NoisedBatch,
    branches: Branches,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let (xa, xb) = heldout.denoise(net, branches, sched)?;
    Ok(branch_accuracy(
        &disc.logits(&xa, &heldout.t)?,
        &disc.logits(&xb, &heldout.t)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Joint,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub phase: Phase,
    pub unlearn_loss: Option<f64>,
    pub retain_loss: Option<f64>,
    pub value: f64,
    pub disc_accuracy: f64,
    /// `Some(true)` when the unlearn and retain gradients had a negative inner product.
    pub conflict: Option<bool>,
    pub grad_norm: Option<f64>,
}

pub const RUN_LOG_HEADER: &str = "iter,phase,L_u,L_r,V,disc_acc,conflict,grad_norm";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(RUN_LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            let conflict = match r.conflict {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.iter,
                r.phase.as_str(),
                opt_cell(r.unlearn_loss),
                opt_cell(r.retain_loss),
                r.value,
                r.disc_accuracy,
                conflict,
                opt_cell(r.grad_norm)
            );
        }
        s
    }

    /// Fraction of generator updates whose gradients conflicted.
    pub fn conflict_fraction(&self) -> Option<f64> {
        let flags: Vec<bool> = self.rows.iter().filter_map(|r| r.conflict).collect();
        if flags.is_empty() {
            return None;
        }
        Some(flags.iter().filter(|&&c| c).count() as f64 / flags.len() as f64)
    }

    fn mean_value(rows: &[LogRow]) -> f64 {
        rows.iter().map(|r| r.value).sum::<f64>() / rows.len() as f64
    }

    /// Mean adversarial value over the first and last `k` warm-up iterations.
    pub fn warmup_value_trend(&self, k: usize) -> Option<(f64, f64)> {
        let warm: Vec<LogRow> = self
            .rows
            .iter()
            .filter(|r| r.phase == Phase::Warmup)
            .cloned()
            .collect();
        if warm.len() < k || k == 0 {
            return None;
        }
        Some((
            Self::mean_value(&warm[..k]),
            Self::mean_value(&warm[warm.len() - k..]),
        ))
    }
}

#[derive(Debug, Clone)]
pub struct UnlearnRun {
    pub snapshot: ModelSnapshot,
    pub disc: DiscriminatorNet,
    pub log: RunLog,
    /// Held-out critic accuracy at the end of warm-up, before the generator moves.
    pub heldout_accuracy_warmup: Option<f64>,
    pub heldout_accuracy_final: Option<f64>,
    /// Intermediate generators as `(iteration, snapshot)`.
    pub checkpoints: Vec<(usize, ModelSnapshot)>,
}

/// A run stopped by a numeric failure. `partial` holds the log so far and the last
/// generator that completed an update.
#[derive(Debug)]
pub struct UnlearnAbort {
    pub error: Error,
    pub partial: Box<UnlearnRun>,
}

impl From<UnlearnAbort> for Error {
    fn from(a: UnlearnAbort) -> Self {
        a.error
    }
}

fn pool_from(snapshot: &ModelSnapshot, cond: &[f64], n: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    let set = sample(
        &snapshot.net,
        cond,
        "anchor",
        n,
        &snapshot.schedule,
        seed,
        &snapshot.id(),
    )?;
    Ok(set.points)
}

fn meta_for(cfg: &UnlearnConfig, init: &ModelSnapshot, steps: usize, log: &RunLog) -> SnapshotMeta {
    let losses: Vec<f64> = log.rows.iter().filter_map(|r| r.unlearn_loss).collect();
    SnapshotMeta {
        origin: format!("unlearn:{}", cfg.method),
        steps,
        seed: cfg.seed,
        loss_digest: loss_digest(&losses),
        parent: Some(init.id()),
    }
}

struct Engine<'a> {
    table: &'a ConceptTable,
    sched: &'a NoiseSchedule,
    cfg: &'a UnlearnConfig,
    retain: Vec<String>,
    net: DenoiserNet,
    disc: DiscriminatorNet,
    gen_opt: OptimizerState,
    gr_avg: Option<FlatGrad>,
    disc_opt: OptimizerState,
    pool: Vec<[f64; 2]>,
    rng: Rng,
}

impl Engine<'_> {
    fn branches(&self) -> Branches<'_> {
        Branches::from_table(self.table)
    }

    fn disc_step(&mut self) -> Result<DiscStepStats> {
        let batch = NoisedBatch::draw(&self.pool, self.cfg.batch, self.sched, &mut self.rng)?;
        let branches = Branches::from_table(self.table);
        discriminator_step(
            &mut self.disc,
            &mut self.disc_opt,
            &self.net,
            &batch,
            branches,
            self.sched,
        )
    }

    /// Returns `(L_u, L_r, conflict, |G|)` after updating the generator.
    fn generator_step(&mut self) -> Result<(f64, f64, bool, f64)> {
        let batch = NoisedBatch::draw(&self.pool, self.cfg.batch, self.sched, &mut self.rng)?;
        let branches = Branches::from_table(self.table);
        let (lu, mut gu) = match self.cfg.method {
            Method::PairwiseL2 => pairwise_l2_grad(&self.net, &batch, branches)?,
            _ => generator_unlearn_grad(&self.net, &self.disc, &batch, branches, self.sched)?,
        };
        let (lr, mut gr) = generator_retain_grad(
            &self.net,
            self.table,
            &self.retain,
            self.cfg.retain_batch,
            self.sched,
            &mut self.rng,
        )?;
        if self.cfg.param_scope == ParamScope::Conditioning {
            let keep = self.net.conditioning_indices();
            for g in [&mut gu, &mut gr] {
                for (i, v) in g.values.iter_mut().enumerate() {
                    if !keep.contains(&i) {
                        *v = 0.0;
                    }
                }
            }
        }
        let gr = self.smoothed_retain_grad(gr)?;
        let conflict = gu.dot(&gr) < 0.0;
        let g = match self.cfg.method {
            Method::DocoCp => {
                let layout = self.net.params.layout();
                apply_surgery(&gu, &gr, self.cfg.lambda, self.cfg.surgery_scope, &layout)?
            }
            Method::DocoL2Retain | Method::PairwiseL2 => gu.add(&gr)?,
            Method::DocoNoRetain => gu,
        };
        let step_lr = match self.cfg.method {
            Method::PairwiseL2 => self.cfg.pairwise_lr,
            _ => self.cfg.gen_lr,
        };
        let before = self.net.params.clone();
        match self.cfg.gen_optimizer {
            GenOptimizer::Adam => {
                self.gen_opt.config.lr = step_lr;
                self.gen_opt.step(&mut self.net.params, &g)?
            }
            GenOptimizer::Sgd => {
                if !g.is_finite() {
                    return Err(Error::numeric("unlearn", "non-finite generator gradient"));
                }
                let mut v = self.net.params.flatten_values();
                v.iter_mut()
                    .zip(&g.values)
                    .for_each(|(p, d)| *p -= step_lr * d);
                self.net.params.set_flat_values(&v)?;
            }
        }
        if self.net.params.tensors().iter().any(|t| !t.is_finite()) {
            self.net.params = before;
            return Err(Error::numeric(
                "unlearn",
                "generator parameters became non-finite",
            ));
        }
        Ok((lu, lr, conflict, g.norm()))
    }

    fn smoothed_retain_grad(&mut self, gr: FlatGrad) -> Result<FlatGrad> {
        let b = self.cfg.retain_grad_ema;
        if b == 0.0 {
            return Ok(gr);
        }
        let avg = match self.gr_avg.take() {
            None => gr,
            Some(mut a) => {
                a.check_compatible(&gr)?;
                a.values
                    .iter_mut()
                    .zip(&gr.values)
                    .for_each(|(x, y)| *x = b * *x + (1.0 - b) * y);
                a
            }
        };
        self.gr_avg = Some(avg.clone());
        Ok(avg)
    }

    fn iteration(&mut self, iter: usize) -> Result<LogRow> {
        let disc_before = (self.disc.clone(), self.disc_opt.clone());
        let result = (|| {
            let joint = iter >= self.cfg.warmup;
            let rounds = if joint {
                self.cfg.disc_steps_per_gen
            } else {
                1
            };
            let mut stats = self.disc_step()?;
            for _ in 1..rounds {
                stats = self.disc_step()?;
            }
            let mut row = LogRow {
                iter,
                phase: if joint { Phase::Joint } else { Phase::Warmup },
                unlearn_loss: None,
                retain_loss: None,
                value: stats.value,
                disc_accuracy: stats.accuracy,
                conflict: None,
                grad_norm: None,
            };
            if joint {
                let (lu, lr, conflict, norm) = self.generator_step()?;
                row.unlearn_loss = Some(lu);
                row.retain_loss = Some(lr);
                row.conflict = Some(conflict);
                row.grad_norm = Some(norm);
            }
            Ok(row)
        })();
        if result.is_err() {
            (self.disc, self.disc_opt) = disc_before;
        }
        result
    }
}

/// Runs the configured unlearning method starting from `init`, which is left untouched.
pub fn unlearn(
    init: &ModelSnapshot,
    table: &ConceptTable,
    cfg: &UnlearnConfig,
) -> Result<UnlearnRun, UnlearnAbort> {
    let abort_early = |error: Error| UnlearnAbort {
        error,
        partial: Box::new(UnlearnRun {
            snapshot: ModelSnapshot {
                meta: meta_for(cfg, init, 0, &RunLog::default()),
                ..init.clone()
            },
            disc: DiscriminatorNet::zeros().expect("fixed architecture"),
            log: RunLog::default(),
            heldout_accuracy_warmup: None,
            heldout_accuracy_final: None,
            checkpoints: vec![],
        }),
    };
    let setup = || -> Result<Engine<'_>> {
        table.validate()?;
        cfg.validate(table)?;
        if init.table_hash != table.content_hash() {
            return Err(Error::HashMismatch {
                what: "concept table".into(),
                expected: init.table_hash.clone(),
                found: table.content_hash(),
            });
        }
        let anchor = &table.anchor().embedding;
        let pool = if cfg.iterations == 0 {
            vec![]
        } else {
            pool_from(init, anchor, cfg.pool_size, derive_seed(cfg.seed, 10))?
        };
        let disc = DiscriminatorNet::new(&mut util::seeded(derive_seed(cfg.seed, 12)))?;
        let net = init.net.clone();
        Ok(Engine {
            table,
            sched: &init.schedule,
            cfg,
            retain: cfg.retain_ids(table)?,
            gen_opt: OptimizerState::new(&net.params, AdamConfig::with_lr(cfg.gen_lr)),
            gr_avg: None,
            disc_opt: OptimizerState::new(&disc.params, AdamConfig::with_lr(cfg.disc_lr)),
            net,
            disc,
            pool,
            rng: util::seeded(derive_seed(cfg.seed, 13)),
        })
    };
    let mut engine = setup().map_err(abort_early)?;
    let heldout = if cfg.iterations == 0 {
        None
    } else {
        let anchor = &table.anchor().embedding;
        let points = pool_from(init, anchor, cfg.heldout_size, derive_seed(cfg.seed, 11))
            .map_err(abort_early)?;
        let mut rng = util::seeded(derive_seed(cfg.seed, 14));
        Some(
            NoisedBatch::draw(&points, cfg.heldout_size, &init.schedule, &mut rng)
                .map_err(abort_early)?,
        )
    };

    let mut log = RunLog::default();
    let mut checkpoints = vec![];
    let mut warm_acc = None;
    let finish =
        |engine: Engine, log: RunLog, checkpoints, warm_acc, final_acc, steps| UnlearnRun {
            snapshot: ModelSnapshot::new(
                engine.net,
                init.schedule.clone(),
                table,
                meta_for(cfg, init, steps, &log),
            ),
            disc: engine.disc,
            log,
            heldout_accuracy_warmup: warm_acc,
            heldout_accuracy_final: final_acc,
            checkpoints,
        };
    for iter in 0..cfg.iterations {
        if iter == cfg.warmup {
            let h = heldout
                .as_ref()
                .expect("held-out batch exists when iterating");
            match heldout_accuracy(
                &engine.disc,
                &engine.net,
                h,
                engine.branches(),
                engine.sched,
            ) {
                Ok(a) => warm_acc = Some(a),
                Err(error) => {
                    return Err(UnlearnAbort {
                        error,
                        partial: Box::new(finish(engine, log, checkpoints, warm_acc, None, iter)),
                    })
                }
            }
        }
        match engine.iteration(iter) {
            Ok(row) => log.rows.push(row),
            Err(error) => {
                return Err(UnlearnAbort {
                    error,
                    partial: Box::new(finish(engine, log, checkpoints, warm_acc, None, iter)),
                })
            }
        }
        if let Some(k) = cfg.snapshot_every {
            if (iter + 1) % k == 0 && iter + 1 < cfg.iterations {
                let meta = meta_for(cfg, init, iter + 1, &log);
                checkpoints.push((
                    iter + 1,
                    ModelSnapshot::new(engine.net.clone(), init.schedule.clone(), table, meta),
                ));
            }
        }
    }
    let final_acc = match &heldout {
        Some(h) => match heldout_accuracy(
            &engine.disc,
            &engine.net,
            h,
            engine.branches(),
            engine.sched,
        ) {
            Ok(a) => Some(a),
            Err(error) => {
                return Err(UnlearnAbort {
                    error,
                    partial: Box::new(finish(
                        engine,
                        log,
                        checkpoints,
                        warm_acc,
                        None,
                        cfg.iterations,
                    )),
                })
            }
        },
        None => None,
    };
    Ok(finish(
        engine,
        log,
        checkpoints,
        warm_acc,
        final_acc,
        cfg.iterations,
    ))
}
