//! The synthetic concept universe: fixed embeddings standing in for frozen text-encoder
//! outputs, each paired with a ground-truth 2-D Gaussian mixture.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{self, Rng};

pub const EMBED_DIM: usize = 8;
const MIN_EMBED_DISTANCE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Target,
    Anchor,
    Retain,
    OodSynonym,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Target => "target",
            Role::Anchor => "anchor",
            Role::Retain => "retain",
            Role::OodSynonym => "ood-synonym",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: [f64; 2],
    pub sigma: f64,
    pub weight: f64,
}

/// Mixture of isotropic Gaussians in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub components: Vec<Component>,
}

impl Mixture {
    pub fn isotropic(mean: [f64; 2], sigma: f64) -> Self {
        Self {
            components: vec![Component {
                mean,
                sigma,
                weight: 1.0,
            }],
        }
    }

    /// Natural log of the mixture density at `p`.
    pub fn log_density(&self, p: [f64; 2]) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let d2 = (p[0] - c.mean[0]).powi(2) + (p[1] - c.mean[1]).powi(2);
                let var = c.sigma * c.sigma;
                c.weight.ln() - (2.0 * std::f64::consts::PI * var).ln() - d2 / (2.0 * var)
            })
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    pub fn sample(&self, rng: &mut Rng) -> [f64; 2] {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.last().unwrap();
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let zx: f64 = rng.sample(StandardNormal);
        let zy: f64 = rng.sample(StandardNormal);
        [
            chosen.mean[0] + chosen.sigma * zx,
            chosen.mean[1] + chosen.sigma * zy,
        ]
    }

    fn validate(&self, id: &str) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Config(format!(
                "concept {id} has no mixture components"
            )));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "concept {id}: weights sum to {total}"
            )));
        }
        for c in &self.components {
            if !(c.sigma > 0.0 && c.sigma.is_finite()) || !(c.weight >= 0.0) {
                return Err(Error::Config(format!(
                    "concept {id}: invalid component {c:?}"
                )));
            }
            if !c.mean.iter().all(|m| m.is_finite()) {
                return Err(Error::Config(format!("concept {id}: non-finite mean")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub embedding: Vec<f64>,
    pub role: Role,
    pub gen: Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTable {
    pub seed: u64,
    pub concepts: Vec<Concept>,
}

/// Default concept geometry: `(id, role, mean)`, all with σ = 0.3.
const DEFAULT_LAYOUT: [(&str, Role, [f64; 2]); 5] = [
    ("star", Role::Target, [2.0, 2.0]),
    ("blob", Role::Anchor, [-2.0, -2.0]),
    ("east", Role::Retain, [2.0, -2.0]),
    ("west", Role::Retain, [-2.0, 2.0]),
    ("starry", Role::OodSynonym, [2.0, 2.0]),
];
pub const DEFAULT_SIGMA: f64 = 0.3;

fn random_unit(rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..EMBED_DIM).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn embedding_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl ConceptTable {
    /// Five-concept fixture: target, anchor, two retained concepts and an out-of-distribution
    /// synonym that shares the target's distribution under a different embedding.
    pub fn default_table(seed: u64) -> Self {
        let mut rng = util::seeded(seed);
        let embeddings = loop {
            let e: Vec<Vec<f64>> = (0..DEFAULT_LAYOUT.len())
                .map(|_| random_unit(&mut rng))
                .collect();
            if min_pairwise_distance(&e) > MIN_EMBED_DISTANCE {
                break e;
            }
        };
        let concepts = DEFAULT_LAYOUT
            .iter()
            .zip(embeddings)
            .map(|(&(id, role, mean), embedding)| Concept {
                id: id.to_string(),
                embedding,
                role,
                gen: Mixture::isotropic(mean, DEFAULT_SIGMA),
            })
            .collect();
        Self { seed, concepts }
    }

    pub fn validate(&self) -> Result<()> {
        let count = |r: Role| self.concepts.iter().filter(|c| c.role == r).count();
        if count(Role::Target) != 1 || count(Role::Anchor) != 1 {
            return Err(Error::Config(
                "table needs exactly one target and one anchor".into(),
            ));
        }
        for (i, c) in self.concepts.iter().enumerate() {
            if self.concepts[..i].iter().any(|o| o.id == c.id) {
                return Err(Error::Config(format!("duplicate concept id {}", c.id)));
            }
            if c.embedding.len() != EMBED_DIM {
                return Err(Error::Config(format!(
                    "concept {} embedding has dim {}",
                    c.id,
                    c.embedding.len()
                )));
            }
            let norm = c.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "concept {} embedding norm {norm}",
                    c.id
                )));
            }
            c.gen.validate(&c.id)?;
        }
        let target = self.target();
        for s in self.concepts.iter().filter(|c| c.role == Role::OodSynonym) {
            if !mixture_bits_equal(&s.gen, &target.gen) {
                return Err(Error::Config(format!(
                    "synonym {} must share the target's distribution",
                    s.id
                )));
            }
        }
        let e: Vec<Vec<f64>> = self.concepts.iter().map(|c| c.embedding.clone()).collect();
        let d = min_pairwise_distance(&e);
        if d <= MIN_EMBED_DISTANCE {
            return Err(Error::Config(format!(
                "embeddings too close (min distance {d})"
            )));
        }
        Ok(())
    }

    pub fn target(&self) -> &Concept {
        self.concepts
            .iter()
            .find(|c| c.role == Role::Target)
            .expect("validated table")
    }

    pub fn anchor(&self) -> &Concept {
        self.concepts
            .iter()
            .find(|c| c.role == Role::Anchor)
            .expect("validated table")
    }

    pub fn get(&self, id: &str) -> Option<&Concept> {
        self.concepts.iter().find(|c| c.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.id == id)
    }

    /// Concepts eligible as classifier outputs (synonyms excluded).
    pub fn classes(&self) -> impl Iterator<Item = (usize, &Concept)> {
        self.concepts
            .iter()
            .enumerate()
            .filter(|(_, c)| c.role != Role::OodSynonym)
    }

    /// Anchor plus every retained concept, in table order.
    pub fn default_retain_ids(&self) -> Vec<String> {
        self.concepts
            .iter()
            .filter(|c| matches!(c.role, Role::Anchor | Role::Retain))
            .map(|c| c.id.clone())
            .collect()
    }

    /// Index of the class with the highest ground-truth density at `p`; ties go to the
    /// lowest table index.
    pub fn bayes_classify_index(&self, p: [f64; 2]) -> usize {
        argmax_density(self.classes().map(|(i, c)| (i, &c.gen)), p)
    }

    pub fn bayes_classify(&self, p: [f64; 2]) -> &str {
        &self.concepts[self.bayes_classify_index(p)].id
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("concept table: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    /// Content hash over the canonical serialization.
    pub fn content_hash(&self) -> String {
        util::sha256_hex(
            serde_json::to_string(self)
                .expect("table serializes")
                .as_bytes(),
        )
    }
}

pub(crate) fn argmax_density<'a>(
    classes: impl Iterator<Item = (usize, &'a Mixture)>,
    p: [f64; 2],
) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in classes {
        let ld = m.log_density(p);
        match best {
            Some((_, b)) if ld <= b => {}
            _ => best = Some((i, ld)),
        }
    }
    best.map(|(i, _)| i).expect("at least one class")
}

fn mixture_bits_equal(a: &Mixture, b: &Mixture) -> bool {
    a.components.len() == b.components.len()
        && a.components.iter().zip(&b.components).all(|(x, y)| {
            x.mean[0].to_bits() == y.mean[0].to_bits()
                && x.mean[1].to_bits() == y.mean[1].to_bits()
                && x.sigma.to_bits() == y.sigma.to_bits()
                && x.weight.to_bits() == y.weight.to_bits()
        })
}

fn min_pairwise_distance(e: &[Vec<f64>]) -> f64 {
    let mut d = f64::INFINITY;
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            d = d.min(embedding_distance(&e[i], &e[j]));
        }
    }
    d
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    GroundTruth,
    Model(String),
}

impl Provenance {
    pub fn tag(&self) -> String {
        match self {
            Provenance::GroundTruth => "ground-truth".into(),
            Provenance::Model(tag) => format!("model:{tag}"),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        if s == "ground-truth" {
            Ok(Provenance::GroundTruth)
        } else if let Some(tag) = s.strip_prefix("model:") {
            Ok(Provenance::Model(tag.to_string()))
        } else {
            Err(Error::Config(format!("unknown provenance {s}")))
        }
    }
}

/// Labelled points with their origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<String>,
    pub provenance: Provenance,
    pub seed: u64,
}

impl SampleSet {
    pub fn new(
        points: Vec<[f64; 2]>,
        label: &str,
        provenance: Provenance,
        seed: u64,
    ) -> Result<Self> {
        if let Some(i) = points
            .iter()
            .position(|p| !(p[0].is_finite() && p[1].is_finite()))
        {
            return Err(Error::numeric(
                "sample_set",
                format!("point {i} is not finite"),
            ));
        }
        let labels = vec![label.to_string(); points.len()];
        Ok(Self {
            points,
            labels,
            provenance,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,label,provenance\n");
        let prov = self.provenance.tag();
        for (p, l) in self.points.iter().zip(&self.labels) {
            writeln!(out, "{},{},{},{}", p[0], p[1], l, prov).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str, seed: u64) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("x,y,label,provenance") {
            return Err(Error::Config("sample CSV header mismatch".into()));
        }
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut provenance = Provenance::GroundTruth;
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Config(format!("sample CSV line {}: {line:?}", n + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            let x: f64 = f[0].parse().map_err(|_| bad())?;
            let y: f64 = f[1].parse().map_err(|_| bad())?;
            points.push([x, y]);
            labels.push(f[2].to_string());
            provenance = Provenance::parse(f[3])?;
        }
        Ok(Self {
            points,
            labels,
            provenance,
            seed,
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        util::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// `n` i.i.d. draws from the concept's ground-truth mixture.
pub fn sample_ground_truth(concept: &Concept, n: usize, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    let mut rng = util::seeded(seed);
    let points = (0..n).map(|_| concept.gen.sample(&mut rng)).collect();
    SampleSet::new(points, &concept.id, Provenance::GroundTruth, seed)
}
