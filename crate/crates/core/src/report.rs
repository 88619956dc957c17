//! Aggregates sweep result tables into plot data and a text summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sweep::{csv_error, RESULT_COLUMNS};

/// One parsed results row; text fields are kept verbatim.
#[derive(Clone, Debug, PartialEq)]
struct Row {
    axis: String,
    value: u64,
    seed: u64,
    arm: String,
    metric: String,
    score: Option<f64>,
    status: String,
}

/// Seed statistics at one grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotPoint {
    pub axis: String,
    pub metric: String,
    pub arm: String,
    pub x: u64,
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub stddev: f64,
    pub seeds: usize,
    pub failed: usize,
}

/// Collects result files: directories contribute every `results.csv` below
/// them, plain paths are taken as-is. Sorted for stable output.
pub fn collect_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            walk(p, &mut out)?;
        } else if p.exists() {
            out.push(p.clone());
        } else {
            return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
        }
    }
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::Input("no results.csv files found".into()));
    }
    Ok(out)
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "results.csv") {
            out.push(p);
        }
    }
    Ok(())
}

fn read_rows(path: &Path) -> std::result::Result<Vec<Row>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let header: Vec<String> = r.headers().map_err(|e| e.to_string())?.iter().map(str::to_string).collect();
    if header != RESULT_COLUMNS {
        return Err(format!("header {header:?} does not match {RESULT_COLUMNS:?}"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let num = |i: usize| rec[i].parse::<u64>().map_err(|e| format!("column {}: {e}", RESULT_COLUMNS[i]));
        let score = if rec[5].is_empty() {
            None
        } else {
            Some(rec[5].parse::<f64>().map_err(|e| format!("score: {e}"))?)
        };
        rows.push(Row {
            axis: rec[0].to_string(),
            value: num(1)?,
            seed: num(2)?,
            arm: rec[3].to_string(),
            metric: rec[4].to_string(),
            score,
            status: rec[6].to_string(),
        });
    }
    Ok(rows)
}

/// Reads every file and groups scores by `(axis, metric, arm, x)`.
pub fn aggregate(files: &[PathBuf]) -> Result<Vec<PlotPoint>> {
    let mut bad = Vec::new();
    let mut reasons = Vec::new();
    let mut seen: BTreeMap<(String, u64, u64, String, String), PathBuf> = BTreeMap::new();
    let mut groups: BTreeMap<(String, String, String, u64), (Vec<f64>, usize)> = BTreeMap::new();
    for f in files {
        let rows = match read_rows(f) {
            Ok(r) => r,
            Err(e) => {
                reasons.push(format!("{}: {e}", f.display()));
                bad.push(f.clone());
                continue;
            }
        };
        for r in rows {
            let key = (r.axis.clone(), r.value, r.seed, r.arm.clone(), r.metric.clone());
            if let Some(first) = seen.insert(key.clone(), f.clone()) {
                reasons.push(format!("duplicate row {key:?} in {} and {}", first.display(), f.display()));
                bad.push(first);
                bad.push(f.clone());
                continue;
            }
            let g = groups.entry((r.axis, r.metric, r.arm, r.value)).or_default();
            match (r.status.as_str(), r.score) {
                ("ok", Some(s)) => g.0.push(s),
                _ => g.1 += 1,
            }
        }
    }
    if !bad.is_empty() {
        bad.sort();
        bad.dedup();
        return Err(Error::Aggregation {
            reason: reasons.join("; "),
            files: bad,
        });
    }
    Ok(groups
        .into_iter()
        .map(|((axis, metric, arm, x), (scores, failed))| {
            let (mean, stddev) = mean_std(&scores);
            PlotPoint {
                axis,
                metric,
                arm,
                x,
                mean,
                stddev,
                seeds: scores.len(),
                failed,
            }
        })
        .collect())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Written artifacts, relative to the output directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportBundle {
    pub plot_files: Vec<PathBuf>,
    pub summary: PathBuf,
}

fn plot_name(axis: &str, metric: &str) -> String {
    let clean: String = metric
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect();
    format!("plot_{axis}_{clean}.csv")
}

/// Text of the summary: per axis and metric, one line per grid point with
/// each arm's mean and spread, plus the pmp minus random gap when both exist.
pub fn summary_text(points: &[PlotPoint], inputs: &[PathBuf]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "inputs:");
    for p in inputs {
        let _ = writeln!(out, "  {}", p.display());
    }
    let mut by_fig: BTreeMap<(&str, &str), BTreeMap<u64, Vec<&PlotPoint>>> = BTreeMap::new();
    for p in points {
        by_fig
            .entry((&p.axis, &p.metric))
            .or_default()
            .entry(p.x)
            .or_default()
            .push(p);
    }
    for ((axis, metric), xs) in &by_fig {
        let _ = writeln!(out, "\n{metric} vs {axis}");
        for (x, arms) in xs {
            let cells: Vec<String> = arms
                .iter()
                .map(|p| format!("{} {:.4} +- {:.4} (n={})", p.arm, p.mean, p.stddev, p.seeds))
                .collect();
            let pmp = arms.iter().find(|p| p.arm == "pmp").map(|p| p.mean);
            let rnd = arms.iter().find(|p| p.arm == "random").map(|p| p.mean);
            let gap = match (pmp, rnd) {
                (Some(a), Some(b)) => format!("  gap {:+.4}", a - b),
                _ => String::new(),
            };
            let _ = writeln!(out, "  {x:>7}: {}{gap}", cells.join(" | "));
        }
    }
    out
}

/// Aggregates `inputs` into plot-data files and `summary.txt` under `out`.
/// Output bytes depend only on the input contents and their paths.
pub fn emit_report(inputs: &[PathBuf], out: &Path) -> Result<ReportBundle> {
    let files = collect_inputs(inputs)?;
    let points = aggregate(&files)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut per_file: BTreeMap<String, Vec<&PlotPoint>> = BTreeMap::new();
    for p in &points {
        per_file.entry(plot_name(&p.axis, &p.metric)).or_default().push(p);
    }
    let mut plot_files = Vec::new();
    for (name, pts) in &per_file {
        let path = out.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(["x", "arm", "metric", "mean", "stddev", "seeds", "failed"])
            .map_err(|e| csv_error(&path, e))?;
        for p in pts {
            w.write_record([
                p.x.to_string(),
                p.arm.clone(),
                p.metric.clone(),
                p.mean.to_string(),
                p.stddev.to_string(),
                p.seeds.to_string(),
                p.failed.to_string(),
            ])
            .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        plot_files.push(PathBuf::from(name));
    }
    let summary = out.join("summary.txt");
    std::fs::write(&summary, summary_text(&points, &files)).map_err(|e| Error::io(&summary, e))?;
    Ok(ReportBundle {
        plot_files,
        summary: PathBuf::from("summary.txt"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "axis,value,seed,arm,metric,score,status\n";

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, format!("{HEADER}{body}")).unwrap();
        p
    }

    #[test]
    fn mean_and_stddev_match_hand_values() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(
            dir.path(),
            "a.csv",
            "finetune_samples,256,0,pmp,pairwise_accuracy,0.6,ok\n\
             finetune_samples,256,1,pmp,pairwise_accuracy,0.7,ok\n\
             finetune_samples,256,2,pmp,pairwise_accuracy,0.8,ok\n\
             finetune_samples,256,0,random,pairwise_accuracy,0.5,ok\n",
        );
        let pts = aggregate(&[f]).unwrap();
        let pmp = pts.iter().find(|p| p.arm == "pmp").unwrap();
        assert!((pmp.mean - 0.7).abs() < 1e-12);
        assert!((pmp.stddev - 0.1).abs() < 1e-12);
        assert_eq!(pmp.seeds, 3);
        let rnd = pts.iter().find(|p| p.arm == "random").unwrap();
        assert_eq!(rnd.stddev, 0.0);
    }

    #[test]
    fn disjoint_files_union_and_failures_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "pmp_pairs,5000,0,pmp,m,0.5,ok\n");
        let b = write(dir.path(), "b.csv", "pmp_pairs,10000,0,pmp,m,0.6,ok\npmp_pairs,10000,1,pmp,m,,failed\n");
        let pts = aggregate(&[a, b]).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!((pts[1].seeds, pts[1].failed), (1, 1));
    }

    #[test]
    fn mixed_schemas_name_the_offending_files() {
        let dir = tempfile::tempdir().unwrap();
        let good = write(dir.path(), "good.csv", "pmp_pairs,1,0,pmp,m,0.5,ok\n");
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "x,y\n1,2\n").unwrap();
        match aggregate(&[good, bad.clone()]) {
            Err(Error::Aggregation { files, .. }) => assert_eq!(files, vec![bad]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_rows_are_an_aggregation_error() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "pmp_pairs,1,0,pmp,m,0.5,ok\n");
        let b = write(dir.path(), "b.csv", "pmp_pairs,1,0,pmp,m,0.6,ok\n");
        assert!(matches!(aggregate(&[a, b]), Err(Error::Aggregation { files, .. }) if files.len() == 2));
    }

    #[test]
    fn rerun_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        std::fs::create_dir(&run).unwrap();
        write(
            &run,
            "results.csv",
            "finetune_samples,256,0,pmp,pairwise_accuracy,0.61,ok\nfinetune_samples,256,0,random,pairwise_accuracy,0.52,ok\n",
        );
        let read_all = |out: &Path| {
            let mut names: Vec<_> = std::fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            names.into_iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>()
        };
        let o1 = dir.path().join("r1");
        let o2 = dir.path().join("r2");
        emit_report(&[run.clone()], &o1).unwrap();
        emit_report(&[run], &o2).unwrap();
        assert_eq!(read_all(&o1), read_all(&o2));
        let summary = std::fs::read_to_string(o1.join("summary.txt")).unwrap();
        assert!(summary.contains("gap +0.0900"), "{summary}");
    }
}
