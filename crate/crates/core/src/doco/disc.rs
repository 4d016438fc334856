use rand::Rng;

use crate::diffusion::{time_embedding, DATA_DIM, TIME_EMBED_DIM};
use crate::error::{Error, Result};
use crate::numgrad::{clamped_log_sigmoid, Activation, MlpArch, ParamSet, Tape, Tensor, Var};

pub const DISC_HIDDEN: [usize; 2] = [64, 64];

/// Membership critic over one-step-denoised points. Input `[x_prev | t-embedding]`,
/// output one raw logit per row: positive means "anchor branch".
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorNet {
    mlp: MlpArch,
    pub params: ParamSet,
}

fn time_rows(t: &[usize]) -> Tensor {
    let values = t.iter().flat_map(|&ti| time_embedding(ti)).collect();
    Tensor::new(vec![t.len(), TIME_EMBED_DIM], values).unwrap()
}

fn check_rows(x: &Tensor, t: &[usize]) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != DATA_DIM || x.rows() != t.len() {
        return Err(Error::dim(
            "discriminator",
            format!("points {:?} with {} timesteps", x.shape(), t.len()),
        ));
    }
    Ok(())
}

impl DiscriminatorNet {
    pub fn arch_with(hidden: &[usize]) -> Result<MlpArch> {
        let mut sizes = vec![DATA_DIM + TIME_EMBED_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        MlpArch::new(sizes, Activation::LeakyRelu)
    }

    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        Self::with_hidden(&DISC_HIDDEN, rng)
    }

    pub fn with_hidden<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mlp = Self::arch_with(hidden)?;
        let params = mlp.init(rng);
        Ok(Self { mlp, params })
    }

    /// A critic whose logit is zero everywhere.
    pub fn zeros() -> Result<Self> {
        let mlp = Self::arch_with(&DISC_HIDDEN)?;
        let params = mlp.zeros();
        Ok(Self { mlp, params })
    }

    pub fn mlp(&self) -> &MlpArch {
        &self.mlp
    }

    pub fn logits_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x_prev: Var,
        t: &[usize],
    ) -> Result<Var> {
        let te = tape.constant(time_rows(t));
        let input = tape.concat_cols(&[x_prev, te])?;
        self.mlp.forward(tape, vars, input)
    }

    pub fn logits(&self, x_prev: &Tensor, t: &[usize]) -> Result<Vec<f64>> {
        check_rows(x_prev, t)?;
        let input = Tensor::concat_cols(&[x_prev, &time_rows(t)])?;
        Ok(self.mlp.eval(&self.params, &input)?.values().to_vec())
    }
}

/// `mean log s(D(a)) + mean log(1 - s(D(b)))` with clamped probabilities, where `a` is the
/// anchor branch and `b` the target branch.
pub fn adversarial_value(
    disc: &DiscriminatorNet,
    x_anchor: &Tensor,
    x_target: &Tensor,
    t: &[usize],
) -> Result<f64> {
    check_rows(x_anchor, t)?;
    check_rows(x_target, t)?;
    let la = disc.logits(x_anchor, t)?;
    let lb = disc.logits(x_target, t)?;
    value_from_logits(&la, &lb)
}

pub fn value_from_logits(anchor: &[f64], target: &[f64]) -> Result<f64> {
    if anchor.is_empty() || anchor.len() != target.len() {
        return Err(Error::dim(
            "adversarial_value",
            "branches must be non-empty and equal in size",
        ));
    }
    if anchor.iter().chain(target).any(|z| !z.is_finite()) {
        return Err(Error::numeric("adversarial_value", "non-finite logit"));
    }
    let n = anchor.len() as f64;
    let a: f64 = anchor.iter().map(|&z| clamped_log_sigmoid(z)).sum::<f64>() / n;
    let b: f64 = target.iter().map(|&z| clamped_log_sigmoid(-z)).sum::<f64>() / n;
    Ok(a + b)
}

/// Tape form of [`value_from_logits`]; both arguments are column vectors of logits.
pub fn value_tape(tape: &mut Tape, anchor_logits: Var, target_logits: Var) -> Result<Var> {
    let la = tape.log_sigmoid(anchor_logits)?;
    let a = tape.mean(la)?;
    let neg = tape.scale(target_logits, -1.0)?;
    let lb = tape.log_sigmoid(neg)?;
    let b = tape.mean(lb)?;
    tape.add(a, b)
}

/// Fraction of rows classified correctly: anchor logits above zero, target logits below.
pub fn branch_accuracy(anchor: &[f64], target: &[f64]) -> f64 {
    let hits =
        anchor.iter().filter(|&&z| z > 0.0).count() + target.iter().filter(|&&z| z < 0.0).count();
    hits as f64 / (anchor.len() + target.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded;

    fn points(rows: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let v = (0..rows * 2).map(|_| rng.random_range(-3.0..3.0)).collect();
        Tensor::new(vec![rows, 2], v).unwrap()
    }

    #[test]
    fn zero_critic_is_maximally_confused() {
        let d = DiscriminatorNet::zeros().unwrap();
        let t = vec![3, 50, 100];
        let v = adversarial_value(&d, &points(3, 1), &points(3, 2), &t).unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((v + 1.3862944).abs() < 1e-7);
    }

    #[test]
    fn saturated_critic_hits_the_clamp() {
        let v = value_from_logits(&[80.0, 90.0], &[-80.0, -70.0]).unwrap();
        assert!((v - 2.0 * (1.0 - 1e-7f64).ln()).abs() < 1e-15);
        assert!(v < 0.0);
    }

    #[test]
    fn value_matches_scalar_reevaluation() {
        let d = DiscriminatorNet::new(&mut seeded(4)).unwrap();
        let (xa, xb, t) = (
            points(16, 5),
            points(16, 6),
            (1..=16).map(|i| i * 6).collect::<Vec<_>>(),
        );
        let la = d.logits(&xa, &t).unwrap();
        let lb = d.logits(&xb, &t).unwrap();
        let p = |z: f64| (1.0 / (1.0 + (-z).exp())).clamp(1e-7, 1.0 - 1e-7);
        let expected = la.iter().map(|&z| p(z).ln()).sum::<f64>() / 16.0
            + lb.iter().map(|&z| (1.0 - p(z)).ln()).sum::<f64>() / 16.0;
        let v = adversarial_value(&d, &xa, &xb, &t).unwrap();
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");

        let mut tape = Tape::new();
        let vars = d.params.bind(&mut tape);
        let a = tape.constant(xa.clone());
        let b = tape.constant(xb.clone());
        let za = d.logits_tape(&mut tape, &vars, a, &t).unwrap();
        let zb = d.logits_tape(&mut tape, &vars, b, &t).unwrap();
        let vt = value_tape(&mut tape, za, zb).unwrap();
        assert_eq!(tape.value(vt).values()[0], v);
    }

    #[test]
    fn swapping_branches_with_negated_logits_preserves_value() {
        let la = [0.3, -1.2, 4.0, 17.5];
        let lb = [-0.7, 2.2, -30.0, 0.0];
        let neg = |v: &[f64]| v.iter().map(|z| -z).collect::<Vec<_>>();
        let v1 = value_from_logits(&la, &lb).unwrap();
        let v2 = value_from_logits(&neg(&lb), &neg(&la)).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn mismatched_branches_are_rejected() {
        assert!(value_from_logits(&[0.0], &[0.0, 1.0]).is_err());
        assert!(matches!(
            value_from_logits(&[f64::NAN], &[0.0]),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn accuracy_counts_both_branches() {
        assert_eq!(branch_accuracy(&[1.0, -1.0], &[-1.0, -2.0]), 0.75);
    }
}
