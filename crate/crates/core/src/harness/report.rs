use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::PathBuf;

use serde::Serialize;

use super::{EvalReport, BASELINE};
use crate::compute::{curve_csv, CurveRow, FlopLedger};
use crate::metrics::{kruskal_wallis, mean, median, Prediction};
use crate::tuning::{DriftReport, StrategyKind};

/// Outcome of one (project, strategy, fold) cell.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub project: String,
    pub strategy: StrategyKind,
    pub fold: usize,
    pub best_val_loss: f64,
    pub best_step: usize,
    pub steps: usize,
    pub trainable_params: usize,
    pub ledger: FlopLedger,
    pub report: Option<EvalReport>,
    pub drift: Option<DriftReport>,
    pub checkpoint: Option<PathBuf>,
    pub failed: Option<String>,
    #[serde(skip)]
    pub predictions: Vec<Prediction>,
}

/// Fold-averaged metrics of one method on one project.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub project: String,
    pub method: String,
    pub folds: usize,
    pub bleu4: f64,
    pub perplexity: f64,
    pub exact_at: [f64; 5],
    pub abstract_at: [f64; 5],
    pub style_similarity: f64,
}

fn title(method: &str) -> String {
    if method == BASELINE {
        return "Base".to_string();
    }
    method.parse::<StrategyKind>().map(|s| s.title().to_string()).unwrap_or_else(|_| method.to_string())
}

/// Methods in report order: baseline first, then strategies as listed.
pub fn method_order(strategies: &[StrategyKind]) -> Vec<String> {
    std::iter::once(BASELINE.to_string())
        .chain(strategies.iter().map(|s| s.name().to_string()))
        .collect()
}

/// Averages reports over folds per (project, method).
pub fn summarize(reports: &[&EvalReport]) -> Vec<MethodSummary> {
    let mut groups: BTreeMap<(String, String), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.project.clone(), r.method.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((project, method), rs)| {
            let avg = |f: &dyn Fn(&EvalReport) -> f64| mean(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let mut exact_at = [0.0; 5];
            let mut abstract_at = [0.0; 5];
            for k in 0..5 {
                exact_at[k] = avg(&|r| r.exact_at[k]);
                abstract_at[k] = avg(&|r| r.abstract_at[k]);
            }
            MethodSummary {
                project,
                method,
                folds: rs.len(),
                bleu4: avg(&|r| r.bleu4),
                perplexity: avg(&|r| r.perplexity),
                exact_at,
                abstract_at,
                style_similarity: avg(&|r| r.style_similarity),
            }
        })
        .collect()
}

fn lookup<'a>(s: &'a [MethodSummary], project: &str, method: &str) -> Option<&'a MethodSummary> {
    s.iter().find(|m| m.project == project && m.method == method)
}

fn projects(s: &[MethodSummary]) -> Vec<String> {
    let mut p: Vec<String> = s.iter().map(|m| m.project.clone()).collect();
    p.dedup();
    p
}

/// Per-project BLEU4 and perplexity with one column pair per method, plus
/// a mean row.
pub fn metric_table_markdown(s: &[MethodSummary], methods: &[String]) -> String {
    let mut out = String::from("| Project |");
    for m in methods {
        write!(out, " {} BLEU4 | {} PPL |", title(m), title(m)).unwrap();
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(2 * methods.len()));
    out.push('\n');
    let mut rows: Vec<(String, Vec<Option<(f64, f64)>>)> = projects(s)
        .into_iter()
        .map(|p| {
            let cells = methods.iter().map(|m| lookup(s, &p, m).map(|x| (x.bleu4, x.perplexity))).collect();
            (p, cells)
        })
        .collect();
    let means = (0..methods.len())
        .map(|i| {
            let vals: Vec<(f64, f64)> = rows.iter().filter_map(|(_, c)| c[i]).collect();
            (!vals.is_empty()).then(|| {
                (
                    mean(&vals.iter().map(|v| v.0).collect::<Vec<_>>()),
                    mean(&vals.iter().map(|v| v.1).collect::<Vec<_>>()),
                )
            })
        })
        .collect();
    rows.push(("mean".to_string(), means));
    for (p, cells) in rows {
        write!(out, "| {p} |").unwrap();
        for c in cells {
            match c {
                Some((b, ppl)) => write!(out, " {:.2} | {:.4} |", 100.0 * b, ppl).unwrap(),
                None => out.push_str(" - | - |"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn metric_table_csv(s: &[MethodSummary]) -> String {
    let mut out = String::from("project,method,folds,bleu4,perplexity");
    for k in 1..=5 {
        write!(out, ",exact@{k}").unwrap();
    }
    for k in 1..=5 {
        write!(out, ",abstract@{k}").unwrap();
    }
    out.push_str(",style_similarity\n");
    for m in s {
        write!(out, "{},{},{},{:.6},{:.6}", m.project, m.method, m.folds, m.bleu4, m.perplexity).unwrap();
        for v in m.exact_at.iter().chain(&m.abstract_at) {
            write!(out, ",{v:.6}").unwrap();
        }
        writeln!(out, ",{:.6}", m.style_similarity).unwrap();
    }
    out
}

/// Pairwise Kruskal-Wallis test over per-project fold-averaged values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KwCell {
    pub metric: String,
    pub a: String,
    pub b: String,
    pub h: f64,
    pub p_value: f64,
}

pub fn kw_matrix(s: &[MethodSummary], methods: &[String]) -> Vec<KwCell> {
    let mut out = Vec::new();
    let metrics: [(&str, fn(&MethodSummary) -> f64); 2] = [("bleu4", |m| m.bleu4), ("perplexity", |m| m.perplexity)];
    for (name, get) in metrics {
        let values = |method: &str| -> Vec<f64> { s.iter().filter(|m| m.method == method).map(get).collect() };
        for (i, a) in methods.iter().enumerate() {
            for b in &methods[i + 1..] {
                if let Ok(r) = kruskal_wallis(&[values(a), values(b)]) {
                    out.push(KwCell {
                        metric: name.to_string(),
                        a: a.clone(),
                        b: b.clone(),
                        h: r.h,
                        p_value: r.p_value,
                    });
                }
            }
        }
    }
    out
}

pub fn kw_csv(cells: &[KwCell]) -> String {
    let mut out = String::from("metric,method_a,method_b,h,p_value\n");
    for c in cells {
        writeln!(out, "{},{},{},{:.6},{:.6}", c.metric, c.a, c.b, c.h, c.p_value).unwrap();
    }
    out
}

/// Lower triangle of p-values: perplexity below the diagonal, BLEU4 above.
pub fn kw_markdown(cells: &[KwCell], methods: &[String]) -> String {
    let p = |metric: &str, a: &str, b: &str| {
        cells
            .iter()
            .find(|c| c.metric == metric && ((c.a == a && c.b == b) || (c.a == b && c.b == a)))
            .map(|c| format!("{:.3}", c.p_value))
            .unwrap_or_else(|| "-".to_string())
    };
    let mut out = String::from("|  |");
    for m in methods {
        write!(out, " {} |", title(m)).unwrap();
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(methods.len()));
    out.push('\n');
    for (i, a) in methods.iter().enumerate() {
        write!(out, "| {} |", title(a)).unwrap();
        for (j, b) in methods.iter().enumerate() {
            let cell = match i.cmp(&j) {
                std::cmp::Ordering::Equal => String::new(),
                std::cmp::Ordering::Less => p("bleu4", a, b),
                std::cmp::Ordering::Greater => p("perplexity", a, b),
            };
            write!(out, " {cell} |").unwrap();
        }
        out.push('\n');
    }
    out.push_str("\nAbove the diagonal: BLEU4. Below: perplexity.\n");
    out
}

/// Top-k match rates per report, long format.
pub fn topk_csv(reports: &[&EvalReport]) -> String {
    let mut out = String::from("project,method,fold,mode,k,rate\n");
    for r in reports {
        for (mode, rates) in [("exact", &r.exact_at), ("abstract", &r.abstract_at)] {
            for (k, v) in rates.iter().enumerate() {
                writeln!(out, "{},{},{},{mode},{},{v:.6}", r.project, r.method, r.fold, k + 1).unwrap();
            }
        }
    }
    out
}

pub fn curves_csv(runs: &[RunRecord]) -> String {
    let rows: Vec<CurveRow> = runs
        .iter()
        .flat_map(|r| CurveRow::from_ledger(r.strategy.name(), &r.project, r.fold, &r.ledger))
        .collect();
    curve_csv(&rows)
}

/// Per-run drift rows for every run that has one.
pub fn drift_csv(runs: &[RunRecord]) -> String {
    let mut out = String::from("strategy,project,fold,block_label,mean_abs_change\n");
    for r in runs {
        if let Some(d) = &r.drift {
            for (b, v) in &d.blocks {
                writeln!(out, "{},{},{},{b},{v:e}", r.strategy, r.project, r.fold).unwrap();
            }
        }
    }
    out
}

/// Drift averaged over all runs of one strategy.
pub fn mean_drift(runs: &[RunRecord], strategy: StrategyKind) -> Option<DriftReport> {
    let reports: Vec<&DriftReport> = runs
        .iter()
        .filter(|r| r.strategy == strategy)
        .filter_map(|r| r.drift.as_ref())
        .collect();
    let first = reports.first()?;
    let blocks = first
        .blocks
        .iter()
        .map(|(b, _)| (*b, mean(&reports.iter().filter_map(|r| r.get(*b)).collect::<Vec<_>>())))
        .collect();
    Some(DriftReport { blocks })
}

/// Median style similarity over reports of the chosen methods.
pub fn median_style(reports: &[&EvalReport], keep: impl Fn(&str) -> bool) -> f64 {
    median(
        &reports
            .iter()
            .filter(|r| keep(&r.method))
            .map(|r| r.style_similarity)
            .collect::<Vec<_>>(),
    )
}
