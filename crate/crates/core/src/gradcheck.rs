//! Finite-difference and property checks over small networks, run by the `gradcheck`
//! command.

use rand::Rng as _;

use crate::concepts::ConceptTable;
use crate::diffusion::{
    denoise_step, denoise_step_tape, diffusion_loss_grad, grads_of, DenoiserArch, DenoiserNet,
    NoisePredictor, NoiseSchedule,
};
use crate::doco::{
    adversarial_value, generator_retain_grad, generator_unlearn_grad, pairwise_l2_grad, surgery,
    value_tape, Branches, DiscriminatorNet, NoisedBatch,
};
use crate::error::Result;
use crate::numgrad::{clamped_log_sigmoid, Activation, FlatGrad, ParamSet, Tape, Tensor};
use crate::util::{self, Rng};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Worst elementwise relative error between analytic and central-difference gradients.
/// Entries smaller than `1e-5` of the largest entry are compared against that floor
/// instead, which keeps round-off in near-zero entries from dominating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

pub fn central_differences(
    params: &ParamSet,
    mut f: impl FnMut(&ParamSet) -> Result<f64>,
) -> Result<Vec<f64>> {
    let base = params.flatten_values();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut buf = base.clone();
    for i in 0..base.len() {
        buf[i] = base[i] + FD_STEP;
        probe.set_flat_values(&buf)?;
        let up = f(&probe)?;
        buf[i] = base[i] - FD_STEP;
        probe.set_flat_values(&buf)?;
        let down = f(&probe)?;
        buf[i] = base[i];
        out.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(out)
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> FdReport {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-5 * scale).max(1e-12);
    let max_rel_error = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max);
    FdReport {
        max_rel_error,
        checked: analytic.len(),
    }
}

fn fd_result(name: &str, analytic: &FlatGrad, numeric: &[f64]) -> CheckResult {
    let r = compare(&analytic.values, numeric);
    let passed = r.max_rel_error <= FD_TOLERANCE && analytic.norm() > 0.0;
    CheckResult::new(
        name,
        passed,
        format!(
            "max relative error {:.3e} over {} parameters",
            r.max_rel_error, r.checked
        ),
    )
}

/// Small networks and a fixed noised batch shared by the gradient checks.
pub struct Fixture {
    pub table: ConceptTable,
    pub sched: NoiseSchedule,
    pub net: DenoiserNet,
    pub disc: DiscriminatorNet,
    pub batch: NoisedBatch,
}

impl Fixture {
    pub fn new(seed: u64) -> Result<Self> {
        let table = ConceptTable::default_table(seed);
        let sched = NoiseSchedule::cosine(20)?;
        let mut rng = util::seeded(seed);
        let net = DenoiserNet::new(
            DenoiserArch {
                hidden: vec![8, 8],
                activation: Activation::Silu,
            },
            &mut rng,
        )?;
        let disc = DiscriminatorNet::with_hidden(&[6, 6], &mut rng)?;
        let anchor = table.anchor().clone();
        let pool: Vec<[f64; 2]> = (0..16).map(|_| anchor.gen.sample(&mut rng)).collect();
        let batch = NoisedBatch::draw(&pool, 6, &sched, &mut rng)?;
        Ok(Self {
            table,
            sched,
            net,
            disc,
            batch,
        })
    }

    fn with_params(&self, p: &ParamSet) -> DenoiserNet {
        DenoiserNet::from_params(self.net.arch.clone(), p.clone()).expect("same layout")
    }

    fn branches(&self) -> Branches<'_> {
        Branches::from_table(&self.table)
    }
}

fn check_retain(fx: &Fixture) -> Result<CheckResult> {
    let retain = fx.table.default_retain_ids();
    let rng = util::seeded(41);
    let (_, g) =
        generator_retain_grad(&fx.net, &fx.table, &retain, 6, &fx.sched, &mut rng.clone())?;
    let numeric = central_differences(&fx.net.params, |p| {
        let net = fx.with_params(p);
        Ok(generator_retain_grad(&net, &fx.table, &retain, 6, &fx.sched, &mut rng.clone())?.0)
    })?;
    Ok(fd_result("retain loss gradient", &g, &numeric))
}

fn unlearn_loss_plain(net: &DenoiserNet, fx: &Fixture) -> Result<f64> {
    let n = fx.batch.len();
    let x = denoise_step(
        net,
        &fx.batch.x_t,
        &fx.batch.t,
        &vec![fx.branches().target; n],
        &fx.sched,
    )?;
    let z = fx.disc.logits(&x, &fx.batch.t)?;
    Ok(-z.iter().map(|&v| clamped_log_sigmoid(v)).sum::<f64>() / n as f64)
}

fn check_unlearn(fx: &Fixture) -> Result<CheckResult> {
    let (_, g) = generator_unlearn_grad(&fx.net, &fx.disc, &fx.batch, fx.branches(), &fx.sched)?;
    let numeric = central_differences(&fx.net.params, |p| {
        unlearn_loss_plain(&fx.with_params(p), fx)
    })?;
    Ok(fd_result("unlearn loss gradient", &g, &numeric))
}

fn check_pairwise(fx: &Fixture) -> Result<CheckResult> {
    let (_, g) = pairwise_l2_grad(&fx.net, &fx.batch, fx.branches())?;
    let n = fx.batch.len();
    let reference = fx
        .net
        .predict(&fx.batch.x_t, &fx.batch.t, &vec![fx.branches().anchor; n])?;
    let numeric = central_differences(&fx.net.params, |p| {
        let e = fx.with_params(p).predict(
            &fx.batch.x_t,
            &fx.batch.t,
            &vec![fx.branches().target; n],
        )?;
        let s: f64 = e
            .values()
            .iter()
            .zip(reference.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(s / n as f64)
    })?;
    Ok(fd_result("pairwise noise-matching gradient", &g, &numeric))
}

/// Weighted sum of two chained denoising steps, differentiated through both.
fn check_denoise_chain(fx: &Fixture) -> Result<CheckResult> {
    let n = fx.batch.len();
    let mut rng = util::seeded(43);
    let weights: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t: Vec<usize> = fx.batch.t.iter().map(|&t| t.max(2)).collect();
    let t2: Vec<usize> = t.iter().map(|t| t - 1).collect();
    let cond = vec![fx.branches().anchor; n];
    let plain = |net: &DenoiserNet| -> Result<f64> {
        let x1 = denoise_step(net, &fx.batch.x_t, &t, &cond, &fx.sched)?;
        let x2 = denoise_step(net, &x1, &t2, &cond, &fx.sched)?;
        Ok(x2.values().iter().zip(&weights).map(|(a, w)| a * w).sum())
    };
    let mut tape = Tape::new();
    let vars = fx.net.params.bind(&mut tape);
    let x1 = denoise_step_tape(
        &mut tape,
        &fx.net,
        &vars,
        &fx.batch.x_t,
        &t,
        &cond,
        &fx.sched,
    )?;
    let eps = fx.net.predict_tape(&mut tape, &vars, x1, &t2, &cond)?;
    let x2 = crate::diffusion::reverse_step_tape(&mut tape, x1, eps, &t2, &fx.sched)?;
    let w = tape.constant(Tensor::new(vec![n, 2], weights.clone())?);
    let prod = tape.mul(x2, w)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;
    let g = grads_of(&fx.net.params, &tape, &vars)?;
    let numeric = central_differences(&fx.net.params, |p| plain(&fx.with_params(p)))?;
    Ok(fd_result(
        "two-step denoise composition gradient",
        &g,
        &numeric,
    ))
}

fn check_disc_value(fx: &Fixture) -> Result<CheckResult> {
    let (xa, xb) = fx.batch.denoise(&fx.net, fx.branches(), &fx.sched)?;
    let mut tape = Tape::new();
    let vars = fx.disc.params.bind(&mut tape);
    let a = tape.constant(xa.clone());
    let b = tape.constant(xb.clone());
    let za = fx.disc.logits_tape(&mut tape, &vars, a, &fx.batch.t)?;
    let zb = fx.disc.logits_tape(&mut tape, &vars, b, &fx.batch.t)?;
    let v = value_tape(&mut tape, za, zb)?;
    tape.backward(v)?;
    let g = grads_of(&fx.disc.params, &tape, &vars)?;
    let numeric = central_differences(&fx.disc.params, |p| {
        let mut d = fx.disc.clone();
        d.params = p.clone();
        adversarial_value(&d, &xa, &xb, &fx.batch.t)
    })?;
    Ok(fd_result(
        "adversarial value gradient (critic)",
        &g,
        &numeric,
    ))
}

fn check_diffusion_loss(fx: &Fixture) -> Result<CheckResult> {
    let rng = util::seeded(44);
    let x0 = Tensor::from_rows(&[[2.0, 2.1], [-1.9, -2.0], [2.2, -1.7]]);
    let conds: Vec<&[f64]> = fx.table.concepts[..3]
        .iter()
        .map(|c| c.embedding.as_slice())
        .collect();
    let (_, g) = diffusion_loss_grad(&fx.net, &x0, &conds, &fx.sched, &mut rng.clone())?;
    let numeric = central_differences(&fx.net.params, |p| {
        Ok(diffusion_loss_grad(&fx.with_params(p), &x0, &conds, &fx.sched, &mut rng.clone())?.0)
    })?;
    Ok(fd_result("noise-prediction loss gradient", &g, &numeric))
}

fn random_pair(rng: &mut Rng, n: usize) -> (FlatGrad, FlatGrad) {
    let mut v = || {
        (0..n)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    };
    (FlatGrad::new(v(), 1), FlatGrad::new(v(), 1))
}

fn check_surgery(trials: usize) -> Result<Vec<CheckResult>> {
    let mut rng = util::seeded(45);
    let mut oracle_err = 0.0f64;
    let mut passthrough_ok = true;
    let mut alignment_ok = true;
    let mut idempotent_err = 0.0f64;
    for i in 0..trials {
        let n = 1 + i % 17;
        let (gu, gr) = random_pair(&mut rng, n);
        let lambda = [0.0, 0.5, 1.0][i % 3];
        let out = surgery(&gu, &gr, lambda)?;
        let dot: f64 = gu.values.iter().zip(&gr.values).map(|(a, b)| a * b).sum();
        if dot >= 0.0 {
            passthrough_ok &= out.values == gu.values;
        }
        let nn: f64 = gr.values.iter().map(|b| b * b).sum();
        for (j, o) in out.values.iter().enumerate() {
            let expected = if dot < 0.0 && nn >= 1e-24 {
                gu.values[j] - lambda * dot / nn * gr.values[j]
            } else {
                gu.values[j]
            };
            oracle_err = oracle_err.max((o - expected).abs());
        }
        if lambda == 1.0 {
            alignment_ok &= out.dot(&gr) >= -1e-9 * out.norm() * gr.norm();
            let again = surgery(&out, &gr, 1.0)?;
            for (a, b) in again.values.iter().zip(&out.values) {
                idempotent_err = idempotent_err.max((a - b).abs());
            }
        }
    }
    let hand = surgery(
        &FlatGrad::new(vec![1.0, -1.0], 1),
        &FlatGrad::new(vec![0.0, 1.0], 1),
        0.5,
    )?;
    Ok(vec![
        CheckResult::new(
            "surgery matches vector oracle",
            oracle_err <= 1e-12,
            format!("max abs error {oracle_err:.3e} over {trials} triples"),
        ),
        CheckResult::new(
            "surgery passes non-conflicting gradients unchanged",
            passthrough_ok,
            String::new(),
        ),
        CheckResult::new(
            "surgery removes conflict at lambda = 1",
            alignment_ok,
            String::new(),
        ),
        CheckResult::new(
            "surgery is idempotent at lambda = 1",
            idempotent_err <= 1e-12,
            format!("max abs error {idempotent_err:.3e}"),
        ),
        CheckResult::new(
            "surgery hand example (1,-1),(0,1), lambda 0.5",
            hand.values == vec![1.0, -0.5],
            format!("{:?}", hand.values),
        ),
    ])
}

fn check_zero_critic(fx: &Fixture) -> Result<CheckResult> {
    let disc = DiscriminatorNet::zeros()?;
    let (lu, g) = generator_unlearn_grad(&fx.net, &disc, &fx.batch, fx.branches(), &fx.sched)?;
    let ok = (lu - std::f64::consts::LN_2).abs() < 1e-12 && g.values.iter().all(|&v| v == 0.0);
    Ok(CheckResult::new(
        "constant critic gives zero unlearn gradient",
        ok,
        format!("L_u = {lu}, |G_u| = {}", g.norm()),
    ))
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let fx = Fixture::new(seed)?;
    let mut out = vec![
        check_diffusion_loss(&fx)?,
        check_retain(&fx)?,
        check_unlearn(&fx)?,
        check_pairwise(&fx)?,
        check_denoise_chain(&fx)?,
        check_disc_value(&fx)?,
        check_zero_critic(&fx)?,
    ];
    out.extend(check_surgery(10_000)?);
    Ok(out)
}

pub fn report(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{status}  {}", r.name));
        if !r.detail.is_empty() {
            s.push_str(&format!("  ({})", r.detail));
        }
        s.push('\n');
    }
    s
}
