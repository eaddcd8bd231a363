use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::scores::ScoreKind;

/// One (OOD set, score kind) evaluation of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub ood_set: String,
    pub loss_kind: LossKind,
    pub score_kind: String,
    pub outlier_exposure: bool,
    pub seed: u64,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub tau: f64,
    pub tpr_at_tau: f64,
    pub closed_set_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub const EVAL_HEADER: [&str; 11] = [
    "ood_set",
    "loss_kind",
    "score_kind",
    "oe",
    "seed",
    "auroc",
    "aupr_in",
    "aupr_out",
    "tau",
    "tpr_at_tau",
    "closed_set_accuracy",
];

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad {what} `{field}` in report")))
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(EVAL_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.ood_set.clone(),
                r.loss_kind.to_string(),
                r.score_kind.clone(),
                r.outlier_exposure.to_string(),
                r.seed.to_string(),
                fmt6(r.auroc),
                fmt6(r.aupr_in),
                fmt6(r.aupr_out),
                fmt6(r.tau),
                fmt6(r.tpr_at_tau),
                fmt6(r.closed_set_accuracy),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header != EVAL_HEADER {
            return Err(Error::invalid(format!("unexpected report header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            rows.push(EvalRow {
                ood_set: rec[0].to_owned(),
                loss_kind: rec[1].parse()?,
                score_kind: rec[2].to_owned(),
                outlier_exposure: rec[3]
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad oe flag `{}`", &rec[3])))?,
                seed: rec[4]
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad seed `{}`", &rec[4])))?,
                auroc: parse_f64(&rec[5], "auroc")?,
                aupr_in: parse_f64(&rec[6], "aupr_in")?,
                aupr_out: parse_f64(&rec[7], "aupr_out")?,
                tau: parse_f64(&rec[8], "tau")?,
                tpr_at_tau: parse_f64(&rec[9], "tpr_at_tau")?,
                closed_set_accuracy: parse_f64(&rec[10], "closed_set_accuracy")?,
            });
        }
        Ok(Self { rows })
    }
}

/// AUROC / AUPR-In / AUPR-Out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triple {
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
}

impl Triple {
    fn minus(self, other: Triple) -> Triple {
        Triple {
            auroc: self.auroc - other.auroc,
            aupr_in: self.aupr_in - other.aupr_in,
            aupr_out: self.aupr_out - other.aupr_out,
        }
    }

    fn cell(self) -> String {
        format!("{:.3}/{:.3}/{:.3}", self.auroc, self.aupr_in, self.aupr_out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub ood_set: String,
    pub loss_kind: LossKind,
    pub score_kind: String,
    /// Seed-averaged metrics without / with outlier exposure.
    pub baseline: Option<Triple>,
    pub exposed: Option<Triple>,
    pub baseline_accuracy: Option<f64>,
    pub exposed_accuracy: Option<f64>,
}

impl AggregateRow {
    pub fn is_complete(&self) -> bool {
        self.baseline.is_some() && self.exposed.is_some()
    }

    /// Outlier exposure minus baseline.
    pub fn delta(&self) -> Option<Triple> {
        Some(self.exposed?.minus(self.baseline?))
    }

    pub fn accuracy_delta(&self) -> Option<f64> {
        Some(self.exposed_accuracy? - self.baseline_accuracy?)
    }
}

/// Baseline-vs-exposure comparison keyed by (OOD set, loss kind, score kind).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AggregateTable {
    pub rows: Vec<AggregateRow>,
}

#[derive(Default)]
struct Acc {
    sum: [f64; 4],
    n: usize,
}

impl Acc {
    fn push(&mut self, r: &EvalRow) {
        for (s, v) in self.sum.iter_mut().zip([r.auroc, r.aupr_in, r.aupr_out, r.closed_set_accuracy]) {
            *s += v;
        }
        self.n += 1;
    }

    fn mean(&self) -> Option<(Triple, f64)> {
        (self.n > 0).then(|| {
            let k = self.n as f64;
            (
                Triple {
                    auroc: self.sum[0] / k,
                    aupr_in: self.sum[1] / k,
                    aupr_out: self.sum[2] / k,
                },
                self.sum[3] / k,
            )
        })
    }
}

/// Joins baseline and outlier-exposure rows, averaging over seeds.
pub fn aggregate_reports(reports: &[EvalReport]) -> AggregateTable {
    let mut groups: BTreeMap<(String, LossKind, String), (Acc, Acc)> = BTreeMap::new();
    for r in reports.iter().flat_map(|r| &r.rows) {
        let entry = groups
            .entry((r.ood_set.clone(), r.loss_kind, r.score_kind.clone()))
            .or_default();
        if r.outlier_exposure {
            entry.1.push(r);
        } else {
            entry.0.push(r);
        }
    }
    let rows = groups
        .into_iter()
        .map(|((ood_set, loss_kind, score_kind), (base, oe))| {
            let b = base.mean();
            let e = oe.mean();
            AggregateRow {
                ood_set,
                loss_kind,
                score_kind,
                baseline: b.map(|x| x.0),
                exposed: e.map(|x| x.0),
                baseline_accuracy: b.map(|x| x.1),
                exposed_accuracy: e.map(|x| x.1),
            }
        })
        .collect();
    AggregateTable { rows }
}

fn opt6(v: Option<f64>) -> String {
    v.map(fmt6).unwrap_or_default()
}

impl AggregateTable {
    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(AggregateRow::is_complete)
    }

    /// Long format: one row per (OOD set, loss kind, score kind).
    pub fn write_long_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "ood_set",
            "loss_kind",
            "score_kind",
            "status",
            "base_auroc",
            "base_aupr_in",
            "base_aupr_out",
            "oe_auroc",
            "oe_aupr_in",
            "oe_aupr_out",
            "delta_auroc",
            "delta_aupr_in",
            "delta_aupr_out",
            "base_accuracy",
            "oe_accuracy",
            "delta_accuracy",
        ])?;
        for r in &self.rows {
            let t = |x: Option<Triple>| {
                [
                    opt6(x.map(|t| t.auroc)),
                    opt6(x.map(|t| t.aupr_in)),
                    opt6(x.map(|t| t.aupr_out)),
                ]
            };
            let mut rec = vec![
                r.ood_set.clone(),
                r.loss_kind.to_string(),
                r.score_kind.clone(),
                if r.is_complete() { "ok" } else { "incomplete" }.to_owned(),
            ];
            rec.extend(t(r.baseline));
            rec.extend(t(r.exposed));
            rec.extend(t(r.delta()));
            rec.extend([opt6(r.baseline_accuracy), opt6(r.exposed_accuracy), opt6(r.accuracy_delta())]);
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Wide format using each head's native score: blocks `without_oe`,
    /// `with_oe` and `difference`; rows are OOD sets, columns loss kinds and
    /// cells `AUROC/AUPR-In/AUPR-Out`.
    pub fn write_wide_csv<W: Write>(&self, writer: W) -> Result<()> {
        let native: Vec<&AggregateRow> = self
            .rows
            .iter()
            .filter(|r| r.score_kind == ScoreKind::native_for(r.loss_kind).name())
            .collect();
        let mut kinds: Vec<LossKind> = native.iter().map(|r| r.loss_kind).collect();
        kinds.sort_by_key(|k| LossKind::ALL.iter().position(|a| a == k));
        kinds.dedup();
        let mut sets: Vec<&str> = native.iter().map(|r| r.ood_set.as_str()).collect();
        sets.sort_unstable();
        sets.dedup();

        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["block".to_owned(), "ood_set".to_owned()];
        header.extend(kinds.iter().map(|k| k.to_string()));
        w.write_record(&header)?;
        type Pick = fn(&AggregateRow) -> Option<Triple>;
        let blocks: [(&str, Pick); 3] = [
            ("without_oe", |r| r.baseline),
            ("with_oe", |r| r.exposed),
            ("difference", AggregateRow::delta),
        ];
        for (block, pick) in blocks {
            for set in &sets {
                let mut rec = vec![block.to_owned(), (*set).to_owned()];
                for k in &kinds {
                    let cell = native
                        .iter()
                        .find(|r| r.ood_set == *set && r.loss_kind == *k)
                        .and_then(|r| pick(r))
                        .map(Triple::cell)
                        .unwrap_or_default();
                    rec.push(cell);
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
