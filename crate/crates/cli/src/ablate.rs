//! One-axis sweeps driven through this executable's own `eval` subcommand.
//! Each axis value runs in its own directory; the table is read back from
//! the persisted reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::Context;
use clap::{Args, ValueEnum};
use patchace_core::{Aggregation, CovType, Detector, EvalReport};

use crate::commands::write_atomic;
use crate::config::ConfigArgs;
use crate::{CmdResult, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Cov,
    Agg,
    Detector,
}

impl Axis {
    fn flag(self) -> &'static str {
        match self {
            Axis::Cov => "--cov",
            Axis::Agg => "--agg",
            Axis::Detector => "--detector",
        }
    }

    fn check(self, value: &str) -> Result<(), String> {
        let parsed = match self {
            Axis::Cov => value.parse::<CovType>().map(drop),
            Axis::Agg => value.parse::<Aggregation>().map(drop),
            Axis::Detector => value.parse::<Detector>().map(drop),
        };
        parsed.map_err(|e| e.to_string())
    }
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values of the swept setting.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub values: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Receives `base.json`, one directory per value, `table.csv` and `table.txt`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Mean and std in percent, or why the cell is missing.
#[derive(Debug, Clone, PartialEq)]
enum Cell {
    Value { mean: f64, std: f64 },
    Missing,
    Failed,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Value { mean, std } => format!("{:.2}±{:.2}", 100.0 * mean, 100.0 * std),
            Cell::Missing => "n/a".into(),
            Cell::Failed => "FAILED".into(),
        }
    }
}

const METRICS: [(&str, &str); 2] = [
    ("image_auroc", "image AUROC"),
    ("pixel_auroc", "pixel AUROC"),
];

fn cells(report: Option<&EvalReport>) -> [Cell; 2] {
    match report {
        None => [Cell::Failed, Cell::Failed],
        Some(r) => [
            Cell::Value {
                mean: r.mean.image_auroc,
                std: r.std.image_auroc,
            },
            match (r.mean.pixel_auroc, r.std.pixel_auroc) {
                (Some(mean), Some(std)) => Cell::Value { mean, std },
                _ => Cell::Missing,
            },
        ],
    }
}

fn csv(values: &[String], columns: &[[Cell; 2]]) -> String {
    let mut out = format!("metric,{}\n", values.join(","));
    for (m, (key, _)) in METRICS.iter().enumerate() {
        let row: Vec<String> = columns.iter().map(|c| c[m].render()).collect();
        let _ = writeln!(out, "{key},{}", row.join(","));
    }
    out
}

fn text_table(axis: Axis, values: &[String], columns: &[[Cell; 2]]) -> String {
    let mut rows = vec![std::iter::once(format!("{axis:?}").to_lowercase())
        .chain(values.iter().cloned())
        .collect::<Vec<_>>()];
    for (m, (_, label)) in METRICS.iter().enumerate() {
        rows.push(
            std::iter::once(label.to_string())
                .chain(columns.iter().map(|c| c[m].render()))
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (s, &w))| {
                let pad = " ".repeat(w - s.chars().count());
                if j == 0 {
                    format!("{s}{pad}")
                } else {
                    format!("{pad}{s}")
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn run_value(exe: &Path, a: &AblateArgs, base: &Path, value: &str) -> anyhow::Result<EvalReport> {
    let dir = a.out_dir.join(value);
    let report_path = dir.join("report.json");
    let mut cmd = Command::new(exe);
    cmd.arg("eval")
        .arg("--config")
        .arg(base)
        .arg(a.axis.flag())
        .arg(value)
        .arg("--data")
        .arg(&a.data)
        .arg("--out")
        .arg(&report_path)
        .arg("--work-dir")
        .arg(&dir);
    if let Some(f) = &a.features {
        cmd.arg("--features").arg(f);
    }
    let output = cmd
        .output()
        .with_context(|| format!("launching {}", exe.display()))?;
    fs::create_dir_all(&dir)?;
    fs::write(
        dir.join("eval.log"),
        [output.stdout.as_slice(), output.stderr.as_slice()].concat(),
    )?;
    if !output.status.success() {
        anyhow::bail!(
            "eval failed ({}): {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        );
    }
    let text = fs::read_to_string(&report_path)
        .with_context(|| format!("reading {}", report_path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn run(a: AblateArgs) -> CmdResult {
    for v in &a.values {
        a.axis
            .check(v)
            .map_err(|e| Failure::Usage(format!("invalid {} value: {e}", a.axis.flag())))?;
    }
    let rc = a.config.resolve()?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let base = a.out_dir.join("base.json");
    write_atomic(
        &base,
        serde_json::to_string_pretty(&rc.to_file_config())
            .map_err(anyhow::Error::from)?
            .as_bytes(),
    )?;
    let exe = std::env::current_exe().context("locating the patchace executable")?;

    let mut columns = Vec::with_capacity(a.values.len());
    let mut failures = 0;
    for value in &a.values {
        let report = match run_value(&exe, &a, &base, value) {
            Ok(r) => Some(r),
            Err(e) => {
                eprintln!("{} {value}: {e:#}", a.axis.flag());
                failures += 1;
                None
            }
        };
        columns.push(cells(report.as_ref()));
    }

    write_atomic(
        &a.out_dir.join("table.csv"),
        csv(&a.values, &columns).as_bytes(),
    )?;
    let table = text_table(a.axis, &a.values, &columns);
    write_atomic(&a.out_dir.join("table.txt"), table.as_bytes())?;
    print!("{table}");
    if failures > 0 {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "{failures} of {} runs failed; table is partial",
            a.values.len()
        )));
    }
    Ok(())
}
