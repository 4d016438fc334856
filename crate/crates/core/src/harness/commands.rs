use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::manifest::ExperimentManifest;
use super::report::{comparison_csv, comparison_markdown, scatter_svg, sort_rows, ComparisonRow};
use crate::concepts::{ConceptTable, SampleSet};
use crate::diffusion::{train_base, ModelSnapshot, NoiseSchedule};
use crate::doco::{unlearn, Method, UnlearnConfig, UnlearnRun};
use crate::error::{Error, Result};
use crate::eval::{
    check_compatible, eval_seeds, evaluate_samples, ground_truth_sets, ConditionSamples,
    MetricsRecord,
};
use crate::gradcheck;
use crate::util;

/// Where each artifact lives below the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn table(&self) -> PathBuf {
        self.root.join("table.json")
    }

    pub fn data(&self, concept: &str) -> PathBuf {
        self.root.join("data").join(format!("{concept}.csv"))
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.root.join("base/model.ckpt")
    }

    pub fn base_losses(&self) -> PathBuf {
        self.root.join("base/loss.csv")
    }

    pub fn unlearn_dir(&self, method: Method) -> PathBuf {
        self.root.join("unlearn").join(method.as_str())
    }

    pub fn unlearned_checkpoint(&self, method: Method) -> PathBuf {
        self.unlearn_dir(method).join("model.ckpt")
    }

    pub fn run_summary(&self, method: Method) -> PathBuf {
        self.unlearn_dir(method).join("summary.json")
    }

    pub fn eval_dir(&self, method: Method) -> PathBuf {
        self.root.join("eval").join(method.as_str())
    }

    pub fn metrics_json(&self, method: Method) -> PathBuf {
        self.eval_dir(method).join("metrics.json")
    }

    pub fn model_samples(&self, method: Method, concept: &str) -> PathBuf {
        self.eval_dir(method)
            .join("samples")
            .join(format!("{concept}.csv"))
    }

    pub fn baseline_samples(&self, concept: &str) -> PathBuf {
        self.root
            .join("eval/base/samples")
            .join(format!("{concept}.csv"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn gradcheck_report(&self) -> PathBuf {
        self.root.join("gradcheck/report.txt")
    }
}

/// Per-run facts that are not in the log itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub iterations: usize,
    pub model_id: String,
    pub parent_id: String,
    pub heldout_accuracy_warmup: Option<f64>,
    pub heldout_accuracy_final: Option<f64>,
    pub conflict_fraction: Option<f64>,
    /// Mean adversarial value over the first and last 100 warm-up iterations.
    pub warmup_value_trend: Option<(f64, f64)>,
    pub aborted: Option<String>,
}

impl RunSummary {
    fn of(
        run: &UnlearnRun,
        cfg: &UnlearnConfig,
        parent: &ModelSnapshot,
        aborted: Option<String>,
    ) -> Self {
        Self {
            method: cfg.method,
            seed: cfg.seed,
            iterations: run.log.rows.len(),
            model_id: run.snapshot.id(),
            parent_id: parent.id(),
            heldout_accuracy_warmup: run.heldout_accuracy_warmup,
            heldout_accuracy_final: run.heldout_accuracy_final,
            conflict_fraction: run.log.conflict_fraction(),
            warmup_value_trend: run.log.warmup_value_trend(100),
            aborted,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    util::write_atomic(path, text.as_bytes())
}

fn read_text(path: &Path, producer: &'static str) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        });
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Everything a command needs: the resolved configuration and where to write.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub table: ConceptTable,
    pub schedule: NoiseSchedule,
    pub layout: Layout,
}

impl Context {
    pub fn new(config: RunConfig) -> Result<Self> {
        let table = config.validate()?;
        let schedule = config.schedule()?;
        let layout = Layout::new(&config.output);
        Ok(Self {
            config,
            table,
            schedule,
            layout,
        })
    }

    /// Runs `f`, then rewrites the manifest as the final write.
    fn timed<T>(&self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        ExperimentManifest::update(
            &self.config,
            &self.layout.root,
            name,
            start.elapsed().as_secs_f64(),
        )?;
        Ok(out)
    }

    fn load_base(&self) -> Result<ModelSnapshot> {
        ModelSnapshot::load(&self.layout.base_checkpoint(), &self.table)
    }

    fn load_unlearned(&self, method: Method) -> Result<ModelSnapshot> {
        let path = self.layout.unlearned_checkpoint(method);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                producer: "unlearn",
            });
        }
        ModelSnapshot::load(&path, &self.table)
    }

    /// Concept table plus `eval.n` ground-truth points per concept.
    pub fn gen_data(&self) -> Result<()> {
        self.timed("gen-data", || {
            util::write_atomic(&self.layout.table(), self.table.to_json().as_bytes())?;
            let (_, _, truth_seed) = eval_seeds(self.config.eval.seed);
            for set in ground_truth_sets(&self.table, self.config.eval.n, truth_seed)? {
                set.save_csv(&self.layout.data(&set.labels[0]))?;
            }
            Ok(())
        })
    }

    pub fn train_base(&self) -> Result<ModelSnapshot> {
        self.timed("train-base", || {
            let trained = train_base(&self.table, &self.schedule, &self.config.diffusion.train)?;
            trained.snapshot.save(&self.layout.base_checkpoint())?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in trained.losses.iter().enumerate() {
                csv.push_str(&format!("{},{l}\n", i + 1));
            }
            util::write_atomic(&self.layout.base_losses(), csv.as_bytes())?;
            Ok(trained.snapshot)
        })
    }

    pub fn unlearn(&self, method: Method) -> Result<RunSummary> {
        let base = self.load_base()?;
        let cfg = UnlearnConfig {
            method,
            ..self.config.unlearn.clone()
        };
        let dir = self.layout.unlearn_dir(method);
        self.timed(&format!("unlearn:{method}"), || {
            let (run, aborted) = match unlearn(&base, &self.table, &cfg) {
                Ok(run) => (run, None),
                Err(abort) => (*abort.partial, Some(abort.error)),
            };
            let summary =
                RunSummary::of(&run, &cfg, &base, aborted.as_ref().map(|e| e.to_string()));
            let model = if aborted.is_some() {
                "model.partial.ckpt"
            } else {
                "model.ckpt"
            };
            run.snapshot.save(&dir.join(model))?;
            util::write_atomic(&dir.join("run_log.csv"), run.log.to_csv().as_bytes())?;
            for (iter, snap) in &run.checkpoints {
                snap.save(&dir.join(format!("iter_{iter:06}.ckpt")))?;
            }
            write_json(&self.layout.run_summary(method), &summary)?;
            match aborted {
                Some(e) => Err(e),
                None => Ok(summary),
            }
        })
    }

    /// Scores the unlearned model of `method` (or `snapshot`) against the base model (or
    /// `baseline`).
    pub fn eval(
        &self,
        method: Method,
        snapshot: Option<&Path>,
        baseline: Option<&Path>,
    ) -> Result<MetricsRecord> {
        let model = match snapshot {
            Some(p) => ModelSnapshot::load(p, &self.table)?,
            None => self.load_unlearned(method)?,
        };
        let base = match baseline {
            Some(p) => ModelSnapshot::load(p, &self.table)?,
            None => self.load_base()?,
        };
        check_compatible(&model, &base, &self.table)?;
        let summary: Option<RunSummary> = match snapshot {
            Some(_) => None,
            None => serde_json::from_str(&read_text(&self.layout.run_summary(method), "unlearn")?)
                .map(Some)
                .map_err(|e| Error::Config(format!("run summary: {e}")))?,
        };
        self.timed(&format!("eval:{method}"), || {
            let (n, seed) = (self.config.eval.n, self.config.eval.seed);
            let (model_seed, baseline_seed, truth_seed) = eval_seeds(seed);
            let m = ConditionSamples::draw(&model, &self.table, n, model_seed)?;
            let b = ConditionSamples::draw(&base, &self.table, n, baseline_seed)?;
            let truth = ground_truth_sets(&self.table, n, truth_seed)?;
            let mut record = evaluate_samples(
                &self.table,
                &m,
                &b,
                &truth,
                (&model.id(), &base.id()),
                n,
                seed,
            )?;
            record.disc_accuracy = summary.and_then(|s| s.heldout_accuracy_final);
            let dir = self.layout.eval_dir(method);
            util::write_atomic(&dir.join("metrics.csv"), record.to_csv().as_bytes())?;
            util::write_atomic(
                &self.layout.metrics_json(method),
                record.to_json().as_bytes(),
            )?;
            for (c, (ms, bs)) in self.table.concepts.iter().zip(m.sets.iter().zip(&b.sets)) {
                ms.save_csv(&self.layout.model_samples(method, &c.id))?;
                bs.save_csv(&self.layout.baseline_samples(&c.id))?;
            }
            Ok(record)
        })
    }

    fn read_samples(&self, path: &Path) -> Result<SampleSet> {
        SampleSet::from_csv(&read_text(path, "eval")?, self.config.eval.seed)
    }

    /// Scatter plots and the comparison table for every method that has been evaluated.
    pub fn report(&self) -> Result<Vec<ComparisonRow>> {
        let evaluated: Vec<Method> = Method::ALL
            .into_iter()
            .filter(|&m| self.layout.metrics_json(m).exists())
            .collect();
        if evaluated.is_empty() {
            return Err(Error::MissingArtifact {
                path: self.layout.metrics_json(self.config.unlearn.method),
                producer: "eval",
            });
        }
        self.timed("report", || {
            let dir = self.layout.report_dir();
            let base: Vec<SampleSet> = self
                .table
                .concepts
                .iter()
                .map(|c| self.read_samples(&self.layout.baseline_samples(&c.id)))
                .collect::<Result<_>>()?;
            let mut rows = Vec::new();
            for &m in &evaluated {
                let record =
                    MetricsRecord::from_json(&read_text(&self.layout.metrics_json(m), "eval")?)?;
                rows.push(ComparisonRow::from_metrics(m, &self.table, &record));
                let sets: Vec<SampleSet> = self
                    .table
                    .concepts
                    .iter()
                    .map(|c| self.read_samples(&self.layout.model_samples(m, &c.id)))
                    .collect::<Result<_>>()?;
                let svg = scatter_svg(&self.table, &[("base", &base), (m.as_str(), &sets)]);
                util::write_atomic(&dir.join(format!("scatter_{m}.svg")), svg.as_bytes())?;
            }
            sort_rows(&mut rows);
            util::write_atomic(
                &dir.join("comparison.csv"),
                comparison_csv(&rows).as_bytes(),
            )?;
            util::write_atomic(
                &dir.join("comparison.md"),
                comparison_markdown(&rows).as_bytes(),
            )?;
            Ok(rows)
        })
    }

    /// Finite-difference and surgery checks; fails with a numeric error if any check fails.
    pub fn gradcheck(&self) -> Result<Vec<gradcheck::CheckResult>> {
        self.timed("gradcheck", || {
            let results = gradcheck::run_all(self.config.unlearn.seed)?;
            util::write_atomic(
                &self.layout.gradcheck_report(),
                gradcheck::report(&results).as_bytes(),
            )?;
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Error::Numeric {
                    op: "gradcheck",
                    detail: format!("{failed} of {} checks failed", results.len()),
                });
            }
            Ok(results)
        })
    }

    /// The whole experiment: data, base model, all four methods, evaluation and report.
    pub fn pipeline(&self) -> Result<Vec<ComparisonRow>> {
        self.gen_data()?;
        self.train_base()?;
        for m in Method::ALL {
            self.unlearn(m)?;
            self.eval(m, None, None)?;
        }
        self.gradcheck()?;
        self.report()
    }
}
