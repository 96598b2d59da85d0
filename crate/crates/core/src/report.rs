//! Result tables: per-fold CSV rows, cross-fold aggregation, and a markdown
//! report. All numeric formatting is fixed-width so identical runs produce
//! byte-identical files.

use crate::error::{Error, Result};
use crate::eval::{EvalResult, PairingScheme};
use crate::fusion::FusionStrategy;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub strategy: FusionStrategy,
    pub fold: usize,
    pub scheme: PairingScheme,
    pub bacc_mean: f64,
    pub bacc_std: f64,
    /// Row-major [true][predicted], averaged over pairing repetitions.
    pub confusion: Vec<Vec<f64>>,
}

impl ResultRow {
    pub fn from_eval(strategy: FusionStrategy, fold: usize, e: &EvalResult) -> Self {
        ResultRow {
            strategy,
            fold,
            scheme: e.scheme,
            bacc_mean: e.bacc_mean,
            bacc_std: e.bacc_std,
            confusion: e.confusion.clone(),
        }
    }
}

fn strategy_key(s: FusionStrategy) -> &'static str {
    match s {
        FusionStrategy::SinglePet => "single_pet",
        FusionStrategy::SingleMri => "single_mri",
        FusionStrategy::Early => "early",
        FusionStrategy::Middle => "middle",
        FusionStrategy::Late => "late",
    }
}

const HEADER: [&str; 6] = ["strategy", "fold", "scheme", "bacc_mean", "bacc_std", "confusion"];

fn encode_confusion(c: &[Vec<f64>]) -> String {
    c.iter()
        .flat_map(|row| row.iter())
        .map(|v| format!("{v:.6}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn decode_confusion(s: &str) -> Result<Vec<Vec<f64>>> {
    let flat: Vec<f64> = s
        .split(';')
        .map(|t| t.parse().map_err(|_| Error::format(format!("bad confusion cell '{t}'"))))
        .collect::<Result<_>>()?;
    let classes = (flat.len() as f64).sqrt() as usize;
    if classes * classes != flat.len() {
        return Err(Error::format("confusion matrix is not square".to_string()));
    }
    Ok(flat.chunks(classes).map(|r| r.to_vec()).collect())
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for r in rows {
        w.write_record([
            strategy_key(r.strategy),
            &r.fold.to_string(),
            r.scheme.label(),
            &format!("{:.12}", r.bacc_mean),
            &format!("{:.12}", r.bacc_std),
            &encode_confusion(&r.confusion),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    if rd.headers()?.iter().ne(HEADER.iter().copied()) {
        return Err(Error::format(format!("{}: unexpected results header", path.display())));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        rows.push(ResultRow {
            strategy: rec[0].parse()?,
            fold: rec[1].parse().map_err(|_| Error::format("bad fold".to_string()))?,
            scheme: rec[2].parse()?,
            bacc_mean: rec[3].parse().map_err(|_| Error::format("bad bacc_mean".to_string()))?,
            bacc_std: rec[4].parse().map_err(|_| Error::format("bad bacc_std".to_string()))?,
            confusion: decode_confusion(&rec[5])?,
        });
    }
    Ok(rows)
}

/// Cross-fold aggregate for one strategy × scheme cell.
#[derive(Debug, Clone)]
pub struct Aggregate {
    pub strategy: FusionStrategy,
    pub scheme: PairingScheme,
    pub folds: usize,
    pub bacc_mean: f64,
    /// Sample standard deviation of per-fold means.
    pub bacc_std: f64,
    pub confusion: Vec<Vec<f64>>,
}

pub fn aggregate(rows: &[ResultRow]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(&'static str, &'static str), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((strategy_key(r.strategy), r.scheme.label())).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let baccs: Vec<f64> = g.iter().map(|r| r.bacc_mean).collect();
            let mean = baccs.iter().sum::<f64>() / baccs.len() as f64;
            let classes = g[0].confusion.len();
            let mut confusion = vec![vec![0.0; classes]; classes];
            for r in &g {
                for (i, row) in r.confusion.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        confusion[i][j] += v / g.len() as f64;
                    }
                }
            }
            Aggregate {
                strategy: g[0].strategy,
                scheme: g[0].scheme,
                folds: g.len(),
                bacc_mean: mean,
                bacc_std: crate::eval::sample_std(&baccs),
                confusion,
            }
        })
        .collect()
}

/// Markdown report: one balanced-accuracy table (strategy rows × pairing
/// columns, mean ± std over folds) and per-cell confusion matrices.
pub fn render_markdown(rows: &[ResultRow]) -> String {
    let aggs = aggregate(rows);
    let mut strategies: Vec<FusionStrategy> = Vec::new();
    for s in FusionStrategy::ALL {
        if aggs.iter().any(|a| a.strategy == s) {
            strategies.push(s);
        }
    }
    let mut schemes: Vec<PairingScheme> = Vec::new();
    for sch in PairingScheme::ALL {
        if aggs.iter().any(|a| a.scheme == sch) {
            schemes.push(sch);
        }
    }
    let cell = |s: FusionStrategy, sch: PairingScheme| -> String {
        aggs.iter()
            .find(|a| a.strategy == s && a.scheme == sch)
            .map(|a| format!("{:.3} ± {:.3}", a.bacc_mean, a.bacc_std))
            .unwrap_or_else(|| "—".to_string())
    };

    let mut md = String::new();
    md.push_str("# Results\n\n## Balanced accuracy by pairing scheme\n\n");
    md.push_str("Mean ± standard deviation over folds.\n\n");
    md.push_str("| Model |");
    for sch in &schemes {
        md.push_str(&format!(" {} |", sch.label()));
    }
    md.push('\n');
    md.push_str("|---|");
    for _ in &schemes {
        md.push_str("---|");
    }
    md.push('\n');
    for &s in &strategies {
        md.push_str(&format!("| {} |", s.label()));
        for &sch in &schemes {
            md.push_str(&format!(" {} |", cell(s, sch)));
        }
        md.push('\n');
    }

    md.push_str("\n## Confusion matrices\n\nRows are true classes, columns predictions; counts are averaged over folds and pairing repetitions.\n");
    for a in &aggs {
        md.push_str(&format!("\n### {} — {}\n\n", a.strategy.label(), a.scheme.label()));
        for row in &a.confusion {
            md.push_str("| ");
            md.push_str(&row.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" | "));
            md.push_str(" |\n");
            if std::ptr::eq(row, &a.confusion[0]) {
                md.push_str(&"|---".repeat(row.len()));
                md.push_str("|\n");
            }
        }
    }
    md
}

pub fn write_summary_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["strategy", "scheme", "folds", "bacc_mean", "bacc_std"])?;
    for a in aggregate(rows) {
        w.write_record([
            strategy_key(a.strategy),
            a.scheme.label(),
            &a.folds.to_string(),
            &format!("{:.12}", a.bacc_mean),
            &format!("{:.12}", a.bacc_std),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<ResultRow> {
        let mut v = Vec::new();
        for fold in 0..3 {
            for (scheme, base) in [(PairingScheme::Correct, 0.9), (PairingScheme::RandomMri, 0.6)] {
                v.push(ResultRow {
                    strategy: FusionStrategy::Late,
                    fold,
                    scheme,
                    bacc_mean: base + fold as f64 * 0.01,
                    bacc_std: 0.02,
                    confusion: vec![vec![8.0, 2.0], vec![1.0, 9.0]],
                });
            }
        }
        v
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("results.csv");
        let rows = rows();
        write_results_csv(&p, &rows).unwrap();
        assert_eq!(read_results_csv(&p).unwrap(), rows);
    }

    #[test]
    fn aggregate_means_and_std() {
        let aggs = aggregate(&rows());
        assert_eq!(aggs.len(), 2);
        let correct = aggs.iter().find(|a| a.scheme == PairingScheme::Correct).unwrap();
        // folds 0.90, 0.91, 0.92 → mean 0.91
        assert!((correct.bacc_mean - 0.91).abs() < 1e-12);
        assert!((correct.bacc_std - 0.01).abs() < 1e-12);
        assert_eq!(correct.folds, 3);
        assert_eq!(correct.confusion[0][0], 8.0);
    }

    #[test]
    fn markdown_contains_table_and_cells() {
        let md = render_markdown(&rows());
        assert!(md.contains("| Late Fusion |"));
        assert!(md.contains("0.910 ± 0.010"));
        assert!(md.contains("correct"));
        assert!(md.contains("random_mri"));
    }

    #[test]
    fn identical_rows_render_identical_bytes() {
        let a = render_markdown(&rows());
        let b = render_markdown(&rows());
        assert_eq!(a, b);
    }
}
