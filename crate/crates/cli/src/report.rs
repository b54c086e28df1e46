//! Metric rows and table assembly: every evaluation command appends flat
//! rows (city, task, model, metric, value, seed); `report` merges the
//! rows of several run directories into one CSV and a markdown summary.

use anyhow::{bail, Context, Result};
use std::path::Path;

pub const ROWS_FILE: &str = "rows.csv";
pub const ROWS_HEADER: &str = "city,task,model,metric,value,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub city: String,
    pub task: String,
    pub model: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

impl Row {
    fn to_csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.city, self.task, self.model, self.metric, self.value, self.seed)
    }
}

pub fn rows_to_csv(rows: &[Row]) -> String {
    let mut out = String::from(ROWS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    out
}

pub fn parse_rows(text: &str, source: &Path) -> Result<Vec<Row>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == ROWS_HEADER => {}
        other => bail!("{}: unexpected rows header {:?}", source.display(), other),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            bail!("{}: row {} has {} fields", source.display(), i + 2, parts.len());
        }
        rows.push(Row {
            city: parts[0].to_string(),
            task: parts[1].to_string(),
            model: parts[2].to_string(),
            metric: parts[3].to_string(),
            value: parts[4].parse().with_context(|| format!("{}: row {}", source.display(), i + 2))?,
            seed: parts[5].parse().with_context(|| format!("{}: row {}", source.display(), i + 2))?,
        });
    }
    Ok(rows)
}

/// Gather rows from run directories. Directories without a rows file are
/// flagged, not fabricated.
pub fn collect(dirs: &[std::path::PathBuf]) -> Result<(Vec<Row>, Vec<String>)> {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for dir in dirs {
        let path = dir.join(ROWS_FILE);
        if !path.exists() {
            missing.push(format!("{}: no {ROWS_FILE}", dir.display()));
            continue;
        }
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        rows.extend(parse_rows(&text, &path)?);
    }
    rows.sort_by(|a, b| {
        (&a.city, a.seed, &a.task, &a.model, &a.metric)
            .cmp(&(&b.city, b.seed, &b.task, &b.model, &b.metric))
    });
    Ok((rows, missing))
}

/// Markdown summary: one line per (city, seed, task, model) with metric
/// columns; metrics a task does not produce stay empty.
pub fn markdown_summary(rows: &[Row]) -> String {
    let metrics = ["rmse", "mae", "jsd"];
    let mut keys: Vec<(String, u64, String, String)> = rows
        .iter()
        .map(|r| (r.city.clone(), r.seed, r.task.clone(), r.model.clone()))
        .collect();
    keys.sort();
    keys.dedup();

    let mut out = String::from("| city | seed | task | model | rmse | mae | jsd |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for (city, seed, task, model) in keys {
        let mut cells = Vec::new();
        for metric in metrics {
            let found = rows.iter().find(|r| {
                r.city == city && r.seed == seed && r.task == task && r.model == model && r.metric == metric
            });
            cells.push(found.map(|r| r.value.to_string()).unwrap_or_default());
        }
        out.push_str(&format!(
            "| {city} | {seed} | {task} | {model} | {} | {} | {} |\n",
            cells[0], cells[1], cells[2]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(city: &str, task: &str, metric: &str, value: f64) -> Row {
        Row {
            city: city.into(),
            task: task.into(),
            model: "uomo".into(),
            metric: metric.into(),
            value,
            seed: 3,
        }
    }

    #[test]
    fn csv_roundtrip() {
        let rows = vec![row("a", "short", "rmse", 0.25), row("a", "short", "mae", 0.125)];
        let csv = rows_to_csv(&rows);
        let parsed = parse_rows(&csv, Path::new("test")).unwrap();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn single_run_single_row() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run1");
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join(ROWS_FILE), rows_to_csv(&[row("b", "long", "rmse", 0.5)])).unwrap();
        let (rows, missing) = collect(&[dir]).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(missing.is_empty());
    }

    #[test]
    fn missing_rows_flagged_not_fabricated() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("empty-run");
        std::fs::create_dir_all(&dir).unwrap();
        let (rows, missing) = collect(&[dir]).unwrap();
        assert!(rows.is_empty());
        assert_eq!(missing.len(), 1);
    }

    #[test]
    fn markdown_leaves_missing_jsd_empty() {
        let rows = vec![row("a", "short", "rmse", 0.1), row("a", "short", "mae", 0.05)];
        let md = markdown_summary(&rows);
        let line = md.lines().nth(2).unwrap();
        assert!(line.contains("| 0.1 | 0.05 |  |"), "line: {line}");
    }

    #[test]
    fn collect_order_stable() {
        let tmp = tempfile::tempdir().unwrap();
        let mk = |name: &str, rows: &[Row]| {
            let dir = tmp.path().join(name);
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(dir.join(ROWS_FILE), rows_to_csv(rows)).unwrap();
            dir
        };
        let d1 = mk("r1", &[row("b", "short", "rmse", 0.2), row("a", "gen", "jsd", 0.3)]);
        let d2 = mk("r2", &[row("a", "short", "rmse", 0.1)]);
        let (fwd, _) = collect(&[d1.clone(), d2.clone()]).unwrap();
        let (rev, _) = collect(&[d2, d1]).unwrap();
        assert_eq!(fwd, rev);
        assert_eq!(fwd[0].city, "a");
    }
}
