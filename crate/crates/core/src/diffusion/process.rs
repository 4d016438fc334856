//! Forward noising, the noise-prediction loss, one-step deterministic denoising and
//! full sampling.

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::denoiser::{NoisePredictor, DATA_DIM};
use super::schedule::NoiseSchedule;
use crate::concepts::{Provenance, SampleSet};
use crate::error::{Error, Result};
use crate::numgrad::{FlatGrad, ParamSet, Tape, Tensor, Var};
use crate::util::{self, Rng};

pub fn standard_normal(rng: &mut Rng, rows: usize) -> Tensor {
    let values = (0..rows * DATA_DIM)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Tensor::new(vec![rows, DATA_DIM], values).unwrap()
}

pub fn uniform_timesteps(rng: &mut Rng, rows: usize, sched: &NoiseSchedule) -> Vec<usize> {
    (0..rows)
        .map(|_| rng.random_range(1..=sched.steps()))
        .collect()
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps` for a single coefficient.
pub fn noise_with_alpha_bar(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// Forward process at per-row timesteps `t`.
pub fn add_noise(x0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() || x0.rows() != t.len() {
        return Err(Error::dim("add_noise", "x0, eps and t must agree in rows"));
    }
    let mut values = Vec::with_capacity(x0.len());
    for (r, &ti) in t.iter().enumerate() {
        sched.check_t(ti)?;
        values.extend(noise_with_alpha_bar(
            x0.row(r),
            eps.row(r),
            sched.alpha_bar(ti),
        ));
    }
    Tensor::new(x0.shape().to_vec(), values)
}

/// Deterministic reverse step from an estimate of the noise:
/// `x0_hat = (x_t - sqrt(1-ab_t) eps) / sqrt(ab_t)`,
/// `x_prev = sqrt(ab_prev) x0_hat + sqrt(1-ab_prev) eps`.
pub fn reverse_step_values(x_t: &[f64], eps_hat: &[f64], ab_t: f64, ab_prev: f64) -> Vec<f64> {
    let (st, nt) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sp, np) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    x_t.iter()
        .zip(eps_hat)
        .map(|(x, e)| {
            let x0_hat = (x - nt * e) / st;
            sp * x0_hat + np * e
        })
        .collect()
}

fn step_coefficients(t: &[usize], sched: &NoiseSchedule) -> Result<[Vec<f64>; 4]> {
    let mut c = [vec![], vec![], vec![], vec![]];
    for &ti in t {
        sched.check_t(ti)?;
        let (ab_t, ab_prev) = (sched.alpha_bar(ti), sched.alpha_bar(ti - 1));
        c[0].push((1.0 - ab_t).sqrt());
        c[1].push(1.0 / ab_t.sqrt());
        c[2].push(ab_prev.sqrt());
        c[3].push((1.0 - ab_prev).sqrt());
    }
    Ok(c)
}

/// Same arithmetic as [`reverse_step_values`], recorded on a tape so gradients reach
/// `eps_hat` (and `x_t` if tracked). With a clip set on the schedule, `x0_hat` is clamped
/// and the noise is re-derived from the clamped value so the step stays self-consistent.
pub fn reverse_step_tape(
    tape: &mut Tape,
    x_t: Var,
    eps_hat: Var,
    t: &[usize],
    sched: &NoiseSchedule,
) -> Result<Var> {
    let [noise_t, inv_signal_t, signal_prev, noise_prev] = step_coefficients(t, sched)?;
    let scaled_eps = tape.row_scale(eps_hat, noise_t.clone())?;
    let diff = tape.sub(x_t, scaled_eps)?;
    let x0_hat = tape.row_scale(diff, inv_signal_t.clone())?;
    let (x0_hat, eps) = match sched.x0_clip() {
        Some(c) => {
            let x0c = tape.clamp(x0_hat, -c, c)?;
            let signal_t = inv_signal_t.iter().map(|v| 1.0 / v).collect();
            let s = tape.row_scale(x0c, signal_t)?;
            let r = tape.sub(x_t, s)?;
            let eps = tape.row_scale(r, noise_t.iter().map(|v| 1.0 / v).collect())?;
            (x0c, eps)
        }
        None => (x0_hat, eps_hat),
    };
    let a = tape.row_scale(x0_hat, signal_prev)?;
    let b = tape.row_scale(eps, noise_prev)?;
    tape.add(a, b)
}

fn reverse_step_rows(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: &[usize],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let [noise_t, inv_signal_t, signal_prev, noise_prev] = step_coefficients(t, sched)?;
    let clip = sched.x0_clip();
    let mut values = Vec::with_capacity(x_t.len());
    for r in 0..x_t.rows() {
        for (x, e) in x_t.row(r).iter().zip(eps_hat.row(r)) {
            let x0_hat = (x - e * noise_t[r]) * inv_signal_t[r];
            let (x0_hat, e) = match clip {
                Some(c) => {
                    let x0c = x0_hat.clamp(-c, c);
                    (
                        x0c,
                        (x - x0c * (1.0 / inv_signal_t[r])) * (1.0 / noise_t[r]),
                    )
                }
                None => (x0_hat, *e),
            };
            values.push(x0_hat * signal_prev[r] + e * noise_prev[r]);
        }
    }
    Tensor::new(x_t.shape().to_vec(), values)
}

/// One deterministic denoising step of a batch under the given conditions.
pub fn denoise_step<N: NoisePredictor + ?Sized>(
    net: &N,
    x_t: &Tensor,
    t: &[usize],
    conds: &[&[f64]],
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let eps_hat = net.predict(x_t, t, conds)?;
    reverse_step_rows(x_t, &eps_hat, t, sched)
}

/// Differentiable version of [`denoise_step`]; `x_t` enters as a constant.
pub fn denoise_step_tape<N: NoisePredictor + ?Sized>(
    tape: &mut Tape,
    net: &N,
    vars: &[Var],
    x_t: &Tensor,
    t: &[usize],
    conds: &[&[f64]],
    sched: &NoiseSchedule,
) -> Result<Var> {
    let x = tape.constant(x_t.clone());
    let eps_hat = net.predict_tape(tape, vars, x, t, conds)?;
    reverse_step_tape(tape, x, eps_hat, t, sched)
}

/// Noise-prediction loss `mean_i ||eps_i - eps_hat(x_t,i, c_i, t_i)||^2` with `t` and `eps`
/// drawn from `rng`.
pub fn diffusion_loss_tape<N: NoisePredictor + ?Sized>(
    tape: &mut Tape,
    net: &N,
    vars: &[Var],
    x0: &Tensor,
    conds: &[&[f64]],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Var> {
    let rows = x0.rows();
    if rows == 0 {
        return Err(Error::dim("diffusion_loss", "empty batch"));
    }
    let t = uniform_timesteps(rng, rows, sched);
    let eps = standard_normal(rng, rows);
    let x_t = add_noise(x0, &t, &eps, sched)?;
    let x_t = tape.constant(x_t);
    let eps_hat = net.predict_tape(tape, vars, x_t, &t, conds)?;
    let eps = tape.constant(eps);
    let diff = tape.sub(eps, eps_hat)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / rows as f64)
}

/// Loss value and flattened parameter gradient.
pub fn diffusion_loss_grad<N: NoisePredictor + ?Sized>(
    net: &N,
    x0: &Tensor,
    conds: &[&[f64]],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(f64, FlatGrad)> {
    let mut tape = Tape::new();
    let vars = net.params().bind(&mut tape);
    let loss = diffusion_loss_tape(&mut tape, net, &vars, x0, conds, sched, rng)?;
    tape.backward(loss)?;
    let value = tape.value(loss).values()[0];
    Ok((value, grads_of(net.params(), &tape, &vars)?))
}

pub(crate) fn grads_of(params: &ParamSet, tape: &Tape, vars: &[Var]) -> Result<FlatGrad> {
    let mut p = params.clone();
    p.collect_grads(tape, vars)?;
    p.flatten_grads()
}

/// Generates `n` points from `x_T ~ N(0, I)` by applying the deterministic step for
/// `t = T..1` under a single condition.
pub fn sample<N: NoisePredictor + ?Sized>(
    net: &N,
    cond: &[f64],
    label: &str,
    n: usize,
    sched: &NoiseSchedule,
    seed: u64,
    tag: &str,
) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    let mut rng = util::seeded(seed);
    let mut x = standard_normal(&mut rng, n);
    let conds = vec![cond; n];
    for t in (1..=sched.steps()).rev() {
        let ts = vec![t; n];
        x = denoise_step(net, &x, &ts, &conds, sched).map_err(|e| at_timestep(e, t))?;
        if let Some(i) = x.values().iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "sample",
                format!("t = {t}: entry {i} is {}", x.values()[i]),
            ));
        }
    }
    let points = (0..n).map(|r| [x.row(r)[0], x.row(r)[1]]).collect();
    SampleSet::new(points, label, Provenance::Model(tag.to_string()), seed)
}

fn at_timestep(e: Error, t: usize) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op: "sample",
            detail: format!("t = {t} ({op}): {detail}"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DenoiserArch, DenoiserNet};

    fn close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn noising_hand_example() {
        let x = noise_with_alpha_bar(&[1.0, 0.0], &[0.0, 1.0], 0.25);
        close(&x, &[0.5, 0.8660254037844386], 1e-15);
        assert_eq!(
            noise_with_alpha_bar(&[1.5, -2.0], &[9.0, 9.0], 1.0),
            vec![1.5, -2.0]
        );
    }

    #[test]
    fn reverse_step_hand_example() {
        let x = reverse_step_values(&[0.5, 0.8660254037844386], &[0.0, 1.0], 0.25, 0.81);
        close(&x, &[0.9, 0.4358898943540674], 1e-12);
    }

    #[test]
    fn t_out_of_range_is_rejected() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let z = Tensor::zeros(vec![1, 2]);
        assert!(add_noise(&z, &[0], &z, &s).is_err());
        assert!(add_noise(&z, &[11], &z, &s).is_err());
        let net = DenoiserNet::zeros(DenoiserArch::default()).unwrap();
        let c = [0.0; 8];
        assert!(denoise_step(&net, &z, &[11], &[&c], &s).is_err());
    }

    #[test]
    fn tape_and_plain_reverse_steps_agree() {
        let s = NoiseSchedule::cosine(20).unwrap();
        let mut rng = util::seeded(4);
        let net = DenoiserNet::new(DenoiserArch::default(), &mut rng).unwrap();
        let x = standard_normal(&mut rng, 5);
        let t = vec![1, 5, 10, 19, 20];
        let c = [0.3; 8];
        let conds = vec![&c[..]; 5];
        let plain = denoise_step(&net, &x, &t, &conds, &s).unwrap();
        let mut tape = Tape::new();
        let vars = net.params.bind(&mut tape);
        let v = denoise_step_tape(&mut tape, &net, &vars, &x, &t, &conds, &s).unwrap();
        close(tape.value(v).values(), plain.values(), 1e-12);
    }

    #[test]
    fn zero_network_sampling_scales_initial_noise() {
        let s = NoiseSchedule::cosine(10)
            .unwrap()
            .with_x0_clip(None)
            .unwrap();
        let net = DenoiserNet::zeros(DenoiserArch::default()).unwrap();
        let c = [0.0; 8];
        let a = sample(&net, &c, "z", 16, &s, 3, "zero").unwrap();
        let b = sample(&net, &c, "z", 16, &s, 3, "zero").unwrap();
        assert_eq!(a, b);
        let x_t = standard_normal(&mut util::seeded(3), 16);
        let k = (s.alpha_bar(0) / s.alpha_bar(10)).sqrt();
        for (p, r) in a.points.iter().zip(0..) {
            for d in 0..2 {
                let expected = k * x_t.row(r)[d];
                assert!((p[d] - expected).abs() <= 1e-9 * expected.abs().max(1.0));
            }
        }
    }
}
