//! `R@n, IoU@m` recall over ranked predictions.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;

use crate::data::QueryAnnotation;
use crate::error::{Error, Result};
use crate::inference::{PredictedSpan, QueryPrediction};
use crate::span::interval_iou;

pub const DEFAULT_RANKS: [usize; 2] = [1, 5];
pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.3, 0.5];

/// True iff one of the first `n` spans has IoU strictly greater than `m` with `(gt_start, gt_end)`.
pub fn query_hit(ranked: &[PredictedSpan], gt_start: f64, gt_end: f64, n: usize, m: f64) -> bool {
    ranked
        .iter()
        .take(n)
        .any(|p| interval_iou(p.start_sec, p.end_sec, gt_start, gt_end) > m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub ranks: Vec<usize>,
    pub thresholds: Vec<f64>,
    /// Missing predictions are an error instead of a miss.
    pub strict: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ranks: DEFAULT_RANKS.to_vec(),
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            strict: false,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(Error::InvalidArgument("ranks must be a nonempty list of positive integers".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|m| !(*m > 0.0 && *m < 1.0)) {
            return Err(Error::InvalidArgument("IoU thresholds must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

pub fn cell_name(n: usize, m: f64) -> String {
    format!("R@{n},IoU={m}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub ranks: Vec<usize>,
    pub thresholds: Vec<f64>,
    /// `hits[i][j]` counts queries hit at `ranks[i]`, `thresholds[j]`.
    pub hits: Vec<Vec<usize>>,
    pub total_queries: usize,
    pub missing_queries: usize,
}

impl MetricReport {
    pub fn recall(&self, n: usize, m: f64) -> Option<f64> {
        let i = self.ranks.iter().position(|&r| r == n)?;
        let j = self.thresholds.iter().position(|&t| t == m)?;
        Some(self.recall_at(i, j))
    }

    fn recall_at(&self, i: usize, j: usize) -> f64 {
        if self.total_queries == 0 {
            0.0
        } else {
            self.hits[i][j] as f64 / self.total_queries as f64
        }
    }

    fn cells(&self) -> Vec<(String, f64, usize)> {
        let mut out = Vec::new();
        for (i, &n) in self.ranks.iter().enumerate() {
            for (j, &m) in self.thresholds.iter().enumerate() {
                out.push((cell_name(n, m), self.recall_at(i, j), self.hits[i][j]));
            }
        }
        out
    }

    /// Percentages grouped by IoU threshold, one column per rank.
    pub fn to_table(&self) -> String {
        let width = 8;
        let mut head = String::new();
        let mut sub = String::new();
        let mut row = String::new();
        for (j, &m) in self.thresholds.iter().enumerate() {
            let group = width * self.ranks.len();
            let sep = if j == 0 { "" } else { " | " };
            let _ = write!(head, "{sep}{:^group$}", format!("IoU={m}"));
            sub.push_str(sep);
            row.push_str(sep);
            for (i, &n) in self.ranks.iter().enumerate() {
                let _ = write!(sub, "{:>width$}", format!("R@{n}"));
                let _ = write!(row, "{:>width$.2}", 100.0 * self.recall_at(i, j));
            }
        }
        format!("{head}\n{sub}\n{row}\n")
    }
}

impl Serialize for MetricReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        struct Ordered<'a>(&'a [(String, f64, usize)], bool);
        impl Serialize for Ordered<'_> {
            fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
                let mut map = serializer.serialize_map(Some(self.0.len()))?;
                for (name, recall, hits) in self.0 {
                    if self.1 {
                        map.serialize_entry(name, recall)?;
                    } else {
                        map.serialize_entry(name, hits)?;
                    }
                }
                map.end()
            }
        }
        let cells = self.cells();
        let mut map = serializer.serialize_map(Some(6))?;
        map.serialize_entry("cells", &Ordered(&cells, true))?;
        map.serialize_entry("hits", &Ordered(&cells, false))?;
        map.serialize_entry("total_queries", &self.total_queries)?;
        map.serialize_entry("missing_queries", &self.missing_queries)?;
        map.serialize_entry("ranks", &self.ranks)?;
        map.serialize_entry("ious", &self.thresholds)?;
        map.end()
    }
}

pub fn evaluate(predictions: &[QueryPrediction], annotations: &[QueryAnnotation], opts: &EvalOptions) -> Result<MetricReport> {
    opts.validate()?;
    let mut by_query: HashMap<&str, &[PredictedSpan]> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_query.insert(&p.query_id, &p.proposals).is_some() {
            return Err(Error::Input(format!("duplicate predictions for query `{}`", p.query_id)));
        }
    }
    let mut report = MetricReport {
        ranks: opts.ranks.clone(),
        thresholds: opts.thresholds.clone(),
        hits: vec![vec![0; opts.thresholds.len()]; opts.ranks.len()],
        total_queries: annotations.len(),
        missing_queries: 0,
    };
    let mut missing: BTreeSet<&str> = BTreeSet::new();
    for a in annotations {
        let Some(ranked) = by_query.get(a.query_id.as_str()) else {
            missing.insert(&a.query_id);
            continue;
        };
        for (i, &n) in opts.ranks.iter().enumerate() {
            for (j, &m) in opts.thresholds.iter().enumerate() {
                if query_hit(ranked, a.start_sec, a.end_sec, n, m) {
                    report.hits[i][j] += 1;
                }
            }
        }
    }
    report.missing_queries = missing.len();
    if let Some(first) = missing.iter().next() {
        if opts.strict {
            return Err(Error::Input(format!(
                "{} queries have no predictions, first `{first}`",
                missing.len()
            )));
        }
        log::warn!("{} queries have no predictions (counted as misses), first `{first}`", missing.len());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(s: f64, e: f64) -> PredictedSpan {
        PredictedSpan {
            start_sec: s,
            end_sec: e,
            score: 0.0,
        }
    }

    fn ann(q: &str, s: f64, e: f64) -> QueryAnnotation {
        QueryAnnotation {
            video_id: "v".into(),
            query_id: q.into(),
            text: String::new(),
            start_sec: s,
            end_sec: e,
            duration_sec: 100.0,
        }
    }

    fn pred(q: &str, spans: Vec<PredictedSpan>) -> QueryPrediction {
        QueryPrediction {
            query_id: q.into(),
            video_id: "v".into(),
            proposals: spans,
        }
    }

    #[test]
    fn hit_examples() {
        assert!(query_hit(&[span(0.0, 5.0)], 0.0, 5.0, 1, 0.99));
        assert!(!query_hit(&[span(6.0, 7.0); 5], 0.0, 5.0, 5, 0.3));
        assert!(!query_hit(&[], 0.0, 5.0, 5, 0.3));
        let ranked = [span(6.0, 10.0), span(20.0, 30.0), span(1.0, 6.0)];
        assert!(!query_hit(&ranked, 0.0, 5.0, 1, 0.5));
        assert!(query_hit(&ranked, 0.0, 5.0, 5, 0.5));
        // IoU exactly at the threshold is a miss
        assert!(!query_hit(&[span(0.0, 2.0)], 0.0, 4.0, 1, 0.5));
    }

    #[test]
    fn two_query_example() {
        let anns = [ann("A", 0.0, 6.0), ann("B", 0.0, 5.0)];
        // A: [0,6] vs [0,10] -> IoU 0.6
        let preds = [
            pred("A", vec![span(0.0, 10.0)]),
            pred("B", vec![span(6.0, 10.0), span(20.0, 30.0), span(1.0, 6.0)]),
        ];
        let r = evaluate(&preds, &anns, &EvalOptions::default()).unwrap();
        assert_eq!(r.recall(1, 0.5), Some(0.5));
        assert_eq!(r.recall(5, 0.5), Some(1.0));
    }

    #[test]
    fn perfect_empty_duplicate_strict() {
        let anns = [ann("A", 1.0, 2.0), ann("B", 3.0, 9.0)];
        let perfect: Vec<_> = anns.iter().map(|a| pred(&a.query_id, vec![span(a.start_sec, a.end_sec)])).collect();
        let r = evaluate(&perfect, &anns, &EvalOptions::default()).unwrap();
        assert!(r.cells().iter().all(|c| c.1 == 1.0));
        let r = evaluate(&[], &anns, &EvalOptions::default()).unwrap();
        assert!(r.cells().iter().all(|c| c.1 == 0.0));
        assert_eq!(r.missing_queries, 2);
        let strict = EvalOptions {
            strict: true,
            ..Default::default()
        };
        assert!(matches!(evaluate(&[], &anns, &strict), Err(Error::Input(_))));
        let dup = [perfect[0].clone(), perfect[0].clone()];
        assert!(matches!(evaluate(&dup, &anns, &EvalOptions::default()), Err(Error::Input(_))));
    }

    #[test]
    fn json_shape_and_table() {
        let anns = [ann("A", 0.0, 6.0)];
        let r = evaluate(&[pred("A", vec![span(0.0, 10.0)])], &anns, &EvalOptions::default()).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["cells"]["R@1,IoU=0.5"], 1.0);
        assert_eq!(v["cells"]["R@5,IoU=0.3"], 1.0);
        assert_eq!(v["total_queries"], 1);
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.find("R@1,IoU=0.3").unwrap() < text.find("R@1,IoU=0.5").unwrap());
        let table = r.to_table();
        assert_eq!(table.lines().count(), 3);
        assert!(table.contains("IoU=0.3") && table.contains("100.00"));
    }
}
