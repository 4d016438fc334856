use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptTable, Role, SampleSet};
use crate::doco::Method;
use crate::eval::MetricsRecord;

const PALETTE: [&str; 8] = [
    "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];
const PANEL: f64 = 220.0;
const PAD: f64 = 24.0;
const EXTENT: f64 = 4.5;
/// Points drawn per panel; larger sets are thinned with a fixed stride.
pub const MAX_POINTS: usize = 800;

fn colour(table: &ConceptTable, class: usize) -> &'static str {
    let classes: Vec<usize> = table.classes().map(|(i, _)| i).collect();
    let k = classes.iter().position(|&c| c == class).unwrap_or(0);
    PALETTE[k % PALETTE.len()]
}

/// One row of panels per snapshot, one panel per conditioning concept. Points are
/// coloured by their Bayes class under the ground-truth densities.
pub fn scatter_svg(table: &ConceptTable, rows: &[(&str, &[SampleSet])]) -> String {
    let cols = table.concepts.len();
    let width = PAD + cols as f64 * (PANEL + PAD);
    let height = PAD + rows.len() as f64 * (PANEL + 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let scale = PANEL / (2.0 * EXTENT);
    for (r, (label, sets)) in rows.iter().enumerate() {
        let top = PAD + r as f64 * (PANEL + 2.0 * PAD);
        for (c, set) in sets.iter().enumerate().take(cols) {
            let left = PAD + c as f64 * (PANEL + PAD);
            let _ = writeln!(
                s,
                r##"<text x="{left}" y="{:.1}">{label} / {}</text>"##,
                top + 12.0,
                xml_escape(&table.concepts[c].id)
            );
            let y0 = top + 18.0;
            let _ = writeln!(
                s,
                r##"<rect x="{left}" y="{y0:.1}" width="{PANEL}" height="{PANEL}" fill="none" stroke="#999"/>"##
            );
            let stride = set.points.len().div_ceil(MAX_POINTS).max(1);
            for p in set.points.iter().step_by(stride) {
                let x = left + (p[0].clamp(-EXTENT, EXTENT) + EXTENT) * scale;
                let y = y0 + (EXTENT - p[1].clamp(-EXTENT, EXTENT)) * scale;
                let fill = colour(table, table.bayes_classify_index(*p));
                let _ = writeln!(
                    s,
                    r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.3" fill="{fill}" fill-opacity="0.6"/>"#
                );
            }
        }
    }
    let legend_y = height - 6.0;
    let mut x = PAD;
    for (i, c) in table.classes() {
        let _ = writeln!(
            s,
            r#"<circle cx="{x}" cy="{:.1}" r="4" fill="{}"/><text x="{:.1}" y="{legend_y:.1}">{}</text>"#,
            legend_y - 4.0,
            colour(table, i),
            x + 8.0,
            xml_escape(&c.id)
        );
        x += 70.0;
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// One line of the method comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub target_rate: f64,
    pub anchor_rate: f64,
    pub frechet_to_anchor: f64,
    pub frechet_to_target: f64,
    pub synonym_target_rate: f64,
    pub mean_retained_drift: f64,
    pub max_retained_drift: f64,
    pub min_retained_self_rate: f64,
    pub disc_accuracy: Option<f64>,
}

impl ComparisonRow {
    pub fn from_metrics(method: Method, table: &ConceptTable, m: &MetricsRecord) -> Self {
        let target = m
            .condition(&table.target().id)
            .expect("metrics cover the target");
        let synonym = m
            .conditions
            .iter()
            .find(|c| c.role == Role::OodSynonym)
            .map(|c| c.target_rate)
            .unwrap_or(f64::NAN);
        let retained: Vec<_> = m
            .conditions
            .iter()
            .filter(|c| matches!(c.role, Role::Anchor | Role::Retain))
            .collect();
        let drift: Vec<f64> = retained.iter().map(|c| c.frechet_drift).collect();
        Self {
            method,
            target_rate: target.target_rate,
            anchor_rate: target.anchor_rate,
            frechet_to_anchor: target.frechet_to_anchor,
            frechet_to_target: target.frechet_to_target,
            synonym_target_rate: synonym,
            mean_retained_drift: drift.iter().sum::<f64>() / drift.len().max(1) as f64,
            max_retained_drift: drift.iter().cloned().fold(0.0, f64::max),
            min_retained_self_rate: retained.iter().map(|c| c.self_rate).fold(1.0, f64::min),
            disc_accuracy: m.disc_accuracy,
        }
    }
}

pub const COMPARISON_HEADER: &str = "method,target_rate,anchor_rate,frechet_anchor,frechet_target,synonym_target_rate,mean_retained_drift,max_retained_drift,min_retained_self_rate,disc_accuracy";

/// Rows sorted into the order of [`Method::ALL`].
pub fn sort_rows(rows: &mut [ComparisonRow]) {
    rows.sort_by_key(|r| Method::ALL.iter().position(|m| *m == r.method));
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        let acc = r.disc_accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.target_rate,
            r.anchor_rate,
            r.frechet_to_anchor,
            r.frechet_to_target,
            r.synonym_target_rate,
            r.mean_retained_drift,
            r.max_retained_drift,
            r.min_retained_self_rate,
            acc
        );
    }
    s
}

pub fn comparison_markdown(rows: &[ComparisonRow]) -> String {
    let mut s = String::from(
        "| method | target rate | anchor rate | Fréchet to anchor | synonym target rate | mean retained drift | max retained drift | min retained self-rate | critic acc |\n",
    );
    s.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let acc = r
            .disc_accuracy
            .map(|a| format!("{a:.3}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {} |",
            r.method,
            r.target_rate,
            r.anchor_rate,
            r.frechet_to_anchor,
            r.synonym_target_rate,
            r.mean_retained_drift,
            r.max_retained_drift,
            r.min_retained_self_rate,
            acc
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::{sample_ground_truth, Provenance};

    #[test]
    fn scatter_has_one_panel_per_condition() {
        let table = ConceptTable::default_table(7);
        let sets: Vec<SampleSet> = table
            .concepts
            .iter()
            .map(|c| sample_ground_truth(c, 2000, 1).unwrap())
            .collect();
        let svg = scatter_svg(&table, &[("base", &sets), ("edited", &sets)]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect x=").count(), 10);
        let circles = svg.matches("<circle").count();
        assert_eq!(circles, 2 * 5 * 667 + 4);
    }

    #[test]
    fn thinning_keeps_small_sets_whole() {
        let table = ConceptTable::default_table(7);
        let s = SampleSet::new(vec![[0.0, 0.0]; 10], "star", Provenance::GroundTruth, 0).unwrap();
        let sets = vec![s; 5];
        assert_eq!(
            scatter_svg(&table, &[("x", &sets)])
                .matches("r=\"1.3\"")
                .count(),
            50
        );
    }

    fn row(method: Method) -> ComparisonRow {
        ComparisonRow {
            method,
            target_rate: 0.0,
            anchor_rate: 1.0,
            frechet_to_anchor: 0.0,
            frechet_to_target: 1.0,
            synonym_target_rate: 1.0,
            mean_retained_drift: 0.0,
            max_retained_drift: 0.0,
            min_retained_self_rate: 1.0,
            disc_accuracy: None,
        }
    }

    #[test]
    fn rows_follow_method_order() {
        let mut rows = vec![
            row(Method::PairwiseL2),
            row(Method::DocoNoRetain),
            row(Method::DocoCp),
            row(Method::DocoL2Retain),
        ];
        sort_rows(&mut rows);
        let order: Vec<Method> = rows.iter().map(|r| r.method).collect();
        assert_eq!(order, Method::ALL.to_vec());
        let csv = comparison_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("doco-cp,"));
        assert_eq!(comparison_markdown(&rows).lines().count(), 6);
    }
}
