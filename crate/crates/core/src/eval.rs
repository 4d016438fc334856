//! Distribution-level metrics: Gaussian moment fits and their Fréchet distance,
//! Bayes-oracle concept rates, and kernel maximum mean discrepancy.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::concepts::{sample_ground_truth, ConceptTable, Role, SampleSet};
use crate::diffusion::{sample, ModelSnapshot};
use crate::error::{Error, Result};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

/// Eigenvalues of a symmetric 2x2 matrix, ascending.
fn sym_eigenvalues(m: &[[f64; 2]; 2]) -> (f64, f64) {
    let half_tr = 0.5 * (m[0][0] + m[1][1]);
    let half_diff = 0.5 * (m[0][0] - m[1][1]);
    let r = (half_diff * half_diff + m[0][1] * m[0][1]).sqrt();
    (half_tr - r, half_tr + r)
}

const PSD_TOLERANCE: f64 = 1e-10;

impl GaussianFit {
    /// Validates symmetry and positive semi-definiteness, clipping tiny negative
    /// eigenvalues to zero.
    pub fn new(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Self> {
        if (cov[0][1] - cov[1][0]).abs() > 1e-12 {
            return Err(Error::numeric(
                "gaussian_fit",
                "covariance is not symmetric",
            ));
        }
        let off = 0.5 * (cov[0][1] + cov[1][0]);
        let mut cov = [[cov[0][0], off], [off, cov[1][1]]];
        let (lo, hi) = sym_eigenvalues(&cov);
        if lo < -PSD_TOLERANCE || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::numeric(
                "gaussian_fit",
                format!("covariance eigenvalue {lo} < 0"),
            ));
        }
        if lo < 0.0 {
            // rebuild from the spectrum with the negative eigenvalue set to zero
            let v = if off.abs() > 0.0 {
                let (x, y) = (hi - cov[1][1], off);
                let n = (x * x + y * y).sqrt();
                [x / n, y / n]
            } else if cov[0][0] >= cov[1][1] {
                [1.0, 0.0]
            } else {
                [0.0, 1.0]
            };
            cov = [
                [hi * v[0] * v[0], hi * v[0] * v[1]],
                [hi * v[0] * v[1], hi * v[1] * v[1]],
            ];
        }
        Ok(Self { mean, cov })
    }
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(points: &[[f64; 2]]) -> Result<GaussianFit> {
    let n = points.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 points, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = [
        points.iter().map(|p| p[0]).sum::<f64>() / nf,
        points.iter().map(|p| p[1]).sum::<f64>() / nf,
    ];
    let mut c = [[0.0; 2]; 2];
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1]];
        c[0][0] += d[0] * d[0];
        c[0][1] += d[0] * d[1];
        c[1][1] += d[1] * d[1];
    }
    let k = 1.0 / (nf - 1.0);
    let off = c[0][1] * k;
    GaussianFit::new(mean, [[c[0][0] * k, off], [off, c[1][1] * k]])
}

/// Fréchet (2-Wasserstein) distance between two Gaussians.
///
/// For PSD 2x2 matrices the eigenvalues of `AB` are non-negative, so
/// `tr (AB)^{1/2} = sqrt(tr(AB) + 2 sqrt(det(AB)))`.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    // every term is written so that swapping a and b gives bit-identical results
    let dm = (a.mean[0] - b.mean[0]).powi(2) + (a.mean[1] - b.mean[1]).powi(2);
    let (ca, cb) = (&a.cov, &b.cov);
    let tr_ab = (ca[0][0] * cb[0][0] + ca[1][1] * cb[1][1] + 2.0 * (ca[0][1] * cb[0][1])).max(0.0);
    let det = |m: &[[f64; 2]; 2]| (m[0][0] * m[1][1] - m[0][1] * m[0][1]).max(0.0);
    let det_ab = det(ca) * det(cb);
    let tr_sqrt = (tr_ab + 2.0 * det_ab.sqrt()).sqrt();
    let d2 = dm + ((ca[0][0] + ca[1][1]) + (cb[0][0] + cb[1][1])) - 2.0 * tr_sqrt;
    if !d2.is_finite() {
        return Err(Error::numeric("frechet_distance", format!("d^2 = {d2}")));
    }
    Ok(d2.max(0.0).sqrt())
}

pub fn frechet_between(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    frechet_distance(&fit_gaussian(&a.points)?, &fit_gaussian(&b.points)?)
}

/// Per-class fractions of points assigned by the ground-truth density classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRates {
    pub ids: Vec<String>,
    pub counts: Vec<usize>,
    pub n: usize,
}

impl ConceptRates {
    pub fn rate(&self, id: &str) -> f64 {
        self.ids
            .iter()
            .position(|i| i == id)
            .map(|k| self.counts[k] as f64 / self.n as f64)
            .unwrap_or(0.0)
    }

    pub fn rates(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| c as f64 / self.n as f64)
            .collect()
    }
}

pub fn concept_rates(s: &SampleSet, table: &ConceptTable) -> Result<ConceptRates> {
    if s.is_empty() {
        return Err(Error::InsufficientData("empty sample set".into()));
    }
    let classes: Vec<usize> = table.classes().map(|(i, _)| i).collect();
    let mut counts = vec![0usize; classes.len()];
    for p in &s.points {
        let idx = table.bayes_classify_index(*p);
        let k = classes
            .iter()
            .position(|&c| c == idx)
            .expect("classifier returns a class");
        counts[k] += 1;
    }
    Ok(ConceptRates {
        ids: classes
            .iter()
            .map(|&i| table.concepts[i].id.clone())
            .collect(),
        counts,
        n: s.len(),
    })
}

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn kernel_mean(a: &[[f64; 2]], b: &[[f64; 2]], inv_two_bw2: f64) -> f64 {
    let mut total = 0.0;
    for x in a {
        let mut row = 0.0;
        for y in b {
            row += (-dist2(x, y) * inv_two_bw2).exp();
        }
        total += row;
    }
    total / (a.len() * b.len()) as f64
}

fn cmp_sets(a: &[[f64; 2]], b: &[[f64; 2]]) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        a.iter()
            .flatten()
            .map(|v| v.to_bits())
            .cmp(b.iter().flatten().map(|v| v.to_bits()))
    })
}

const MEDIAN_SUBSAMPLE: usize = 1000;

/// Median pairwise distance over (a prefix of) the pooled points.
pub fn median_heuristic(points: &[[f64; 2]]) -> f64 {
    let m = points.len().min(2 * MEDIAN_SUBSAMPLE);
    let pts = &points[..m];
    let mut d: Vec<f64> = Vec::with_capacity(m * (m.saturating_sub(1)) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push(dist2(&pts[i], &pts[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, median, _) = d.select_nth_unstable_by(mid, |x, y| x.total_cmp(y));
    if *median > 0.0 {
        *median
    } else {
        1.0
    }
}

/// Biased-estimator MMD with a Gaussian kernel `exp(-|x-y|^2 / (2 bw^2))`, returned as
/// the square root of MMD^2. `bandwidth = None` applies the median heuristic to the pooled
/// sets.
pub fn mmd(a: &[[f64; 2]], b: &[[f64; 2]], bandwidth: Option<f64>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData(
            "MMD needs two non-empty sets".into(),
        ));
    }
    // canonical operand order makes the estimate exactly symmetric
    let (a, b) = if cmp_sets(a, b) == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    };
    let bw = match bandwidth {
        Some(bw) if bw > 0.0 && bw.is_finite() => bw,
        Some(bw) => {
            return Err(Error::Config(format!(
                "bandwidth must be positive, got {bw}"
            )))
        }
        None => {
            let half = MEDIAN_SUBSAMPLE;
            let pooled: Vec<[f64; 2]> = a
                .iter()
                .take(half)
                .chain(b.iter().take(half))
                .copied()
                .collect();
            median_heuristic(&pooled)
        }
    };
    let g = 1.0 / (2.0 * bw * bw);
    let m2 = kernel_mean(a, a, g) + kernel_mean(b, b, g) - 2.0 * kernel_mean(a, b, g);
    Ok(m2.max(0.0).sqrt())
}

/// MMD against a fixed reference set whose self-similarity term is computed once.
pub struct MmdReference<'a> {
    points: &'a [[f64; 2]],
    inv_two_bw2: f64,
    self_term: f64,
}

impl<'a> MmdReference<'a> {
    pub fn new(points: &'a [[f64; 2]], bandwidth: f64) -> Self {
        let g = 1.0 / (2.0 * bandwidth * bandwidth);
        Self {
            points,
            inv_two_bw2: g,
            self_term: kernel_mean(points, points, g),
        }
    }

    pub fn distance(&self, other: &[[f64; 2]]) -> f64 {
        let g = self.inv_two_bw2;
        let m2 = self.self_term + kernel_mean(other, other, g)
            - 2.0 * kernel_mean(other, self.points, g);
        m2.max(0.0).sqrt()
    }
}

/// Metrics for one conditioning concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub concept: String,
    pub role: Role,
    /// Fraction classified as the concept's own ground-truth class (the target class for
    /// synonyms).
    pub self_rate: f64,
    pub target_rate: f64,
    pub anchor_rate: f64,
    pub frechet_to_ground_truth: f64,
    pub frechet_to_anchor: f64,
    pub frechet_to_target: f64,
    pub frechet_drift: f64,
    pub mmd_to_anchor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub model_id: String,
    pub baseline_id: String,
    pub n: usize,
    pub seed: u64,
    pub mmd_bandwidth: f64,
    pub disc_accuracy: Option<f64>,
    pub conditions: Vec<ConditionMetrics>,
}

pub const METRICS_CSV_HEADER: &str = "concept,role,self_rate,target_rate,anchor_rate,frechet_gt,frechet_anchor,frechet_target,frechet_drift,mmd_anchor";

impl MetricsRecord {
    pub fn condition(&self, id: &str) -> Option<&ConditionMetrics> {
        self.conditions.iter().find(|c| c.concept == id)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_CSV_HEADER}\n");
        for c in &self.conditions {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                c.concept,
                c.role.as_str(),
                c.self_rate,
                c.target_rate,
                c.anchor_rate,
                c.frechet_to_ground_truth,
                c.frechet_to_anchor,
                c.frechet_to_target,
                c.frechet_drift,
                c.mmd_to_anchor
            )
            .unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("metrics summary: {e}")))
    }
}

/// Samples drawn for every condition, in table order.
#[derive(Debug, Clone)]
pub struct ConditionSamples {
    pub sets: Vec<SampleSet>,
}

impl ConditionSamples {
    pub fn draw(
        snapshot: &ModelSnapshot,
        table: &ConceptTable,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        let tag = snapshot.id();
        let sets = table
            .concepts
            .iter()
            .enumerate()
            .map(|(i, c)| {
                sample(
                    &snapshot.net,
                    &c.embedding,
                    &c.id,
                    n,
                    &snapshot.schedule,
                    derive_seed(seed, i as u64),
                    &tag,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sets })
    }
}

/// Ground-truth reference sets, in table order.
pub fn ground_truth_sets(table: &ConceptTable, n: usize, seed: u64) -> Result<Vec<SampleSet>> {
    table
        .concepts
        .iter()
        .enumerate()
        .map(|(i, c)| sample_ground_truth(c, n, derive_seed(seed, 1000 + i as u64)))
        .collect()
}

/// Compares a model's per-condition samples with ground truth and with baseline samples.
pub fn evaluate_samples(
    table: &ConceptTable,
    model: &ConditionSamples,
    baseline: &ConditionSamples,
    truth: &[SampleSet],
    ids: (&str, &str),
    n: usize,
    seed: u64,
) -> Result<MetricsRecord> {
    let target_idx = table.index_of(&table.target().id).unwrap();
    let anchor_idx = table.index_of(&table.anchor().id).unwrap();
    let anchor_truth = &truth[anchor_idx].points;
    let bandwidth = median_heuristic(anchor_truth);
    let reference = MmdReference::new(anchor_truth, bandwidth);
    let anchor_fit = fit_gaussian(anchor_truth)?;
    let target_fit = fit_gaussian(&truth[target_idx].points)?;
    let mut conditions = Vec::with_capacity(table.concepts.len());
    for (i, c) in table.concepts.iter().enumerate() {
        let s = &model.sets[i];
        let rates = concept_rates(s, table)?;
        let own_class = if c.role == Role::OodSynonym {
            &table.target().id
        } else {
            &c.id
        };
        let fit = fit_gaussian(&s.points)?;
        conditions.push(ConditionMetrics {
            concept: c.id.clone(),
            role: c.role,
            self_rate: rates.rate(own_class),
            target_rate: rates.rate(&table.target().id),
            anchor_rate: rates.rate(&table.anchor().id),
            frechet_to_ground_truth: frechet_distance(&fit, &fit_gaussian(&truth[i].points)?)?,
            frechet_to_anchor: frechet_distance(&fit, &anchor_fit)?,
            frechet_to_target: frechet_distance(&fit, &target_fit)?,
            frechet_drift: frechet_distance(&fit, &fit_gaussian(&baseline.sets[i].points)?)?,
            mmd_to_anchor: reference.distance(&s.points),
        });
    }
    Ok(MetricsRecord {
        model_id: ids.0.to_string(),
        baseline_id: ids.1.to_string(),
        n,
        seed,
        mmd_bandwidth: bandwidth,
        disc_accuracy: None,
        conditions,
    })
}

/// Seeds for the three sample families used by [`evaluate`].
pub fn eval_seeds(seed: u64) -> (u64, u64, u64) {
    (
        derive_seed(seed, 1),
        derive_seed(seed, 2),
        derive_seed(seed, 3),
    )
}

/// Samples `n` points per condition from both snapshots and scores the edited model.
pub fn evaluate(
    model: &ModelSnapshot,
    baseline: &ModelSnapshot,
    table: &ConceptTable,
    n: usize,
    seed: u64,
) -> Result<MetricsRecord> {
    check_compatible(model, baseline, table)?;
    let (model_seed, baseline_seed, truth_seed) = eval_seeds(seed);
    let m = ConditionSamples::draw(model, table, n, model_seed)?;
    let b = ConditionSamples::draw(baseline, table, n, baseline_seed)?;
    let truth = ground_truth_sets(table, n, truth_seed)?;
    evaluate_samples(
        table,
        &m,
        &b,
        &truth,
        (&model.id(), &baseline.id()),
        n,
        seed,
    )
}

pub fn check_compatible(
    model: &ModelSnapshot,
    baseline: &ModelSnapshot,
    table: &ConceptTable,
) -> Result<()> {
    let table_hash = table.content_hash();
    for (what, snap) in [("model", model), ("baseline", baseline)] {
        if snap.table_hash != table_hash {
            return Err(Error::HashMismatch {
                what: format!("{what} concept table"),
                expected: table_hash.clone(),
                found: snap.table_hash.clone(),
            });
        }
    }
    if model.schedule.content_hash() != baseline.schedule.content_hash() {
        return Err(Error::HashMismatch {
            what: "noise schedule".into(),
            expected: baseline.schedule.content_hash(),
            found: model.schedule.content_hash(),
        });
    }
    Ok(())
}
