use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::ControlClass;
use crate::error::{Error, Result};
use crate::eval::distribution::FeatureDistribution;
use crate::eval::metrics::ConfusionMatrix;

pub const SUMMARY_COLUMNS: [&str; 9] =
    ["model", "samples", "control_accuracy", "perplexity", "rouge_1", "rouge_2", "rouge_l", "bleurt", "judge"];
pub const CONFUSION_COLUMNS: [&str; 4] = ["target", "pred_low", "pred_medium", "pred_high"];
pub const FEATURE_COLUMNS: [&str; 5] = ["class", "feature", "samples", "mean", "std"];
pub const GAP_COLUMNS: [&str; 2] = ["feature", "high_minus_low"];

/// Automatic metrics of one generator on one held-out set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    /// Description of the classifier that judged control accuracy.
    pub judge: String,
    pub samples: usize,
    pub control_accuracy: f64,
    pub perplexity: f64,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    /// Reserved for table parity; never computed.
    pub bleurt: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub features: FeatureDistribution,
}

/// Files written by [`EvalReport::emit`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportPaths {
    pub json: PathBuf,
    pub summary_csv: PathBuf,
    pub confusion_csv: PathBuf,
    pub features_csv: PathBuf,
    pub gaps_csv: PathBuf,
    pub confusion_svg: PathBuf,
    pub features_svg: PathBuf,
}

impl ReportPaths {
    /// `report.json`, `tables/*.csv` and `figures/*.svg` under `dir`.
    pub fn under(dir: &Path) -> Self {
        let (tables, figures) = (dir.join("tables"), dir.join("figures"));
        ReportPaths {
            json: dir.join("report.json"),
            summary_csv: tables.join("summary.csv"),
            confusion_csv: tables.join("confusion.csv"),
            features_csv: tables.join("features.csv"),
            gaps_csv: tables.join("feature_gaps.csv"),
            confusion_svg: figures.join("confusion.svg"),
            features_svg: figures.join("features.svg"),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(format!("csv encoding: {e}")))
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(src: &str) -> Result<Self> {
        Ok(serde_json::from_str(src)?)
    }

    pub fn summary_csv(&self) -> Result<String> {
        let row = vec![
            self.model.clone(),
            self.samples.to_string(),
            self.control_accuracy.to_string(),
            self.perplexity.to_string(),
            self.rouge_1.to_string(),
            self.rouge_2.to_string(),
            self.rouge_l.to_string(),
            self.bleurt.map(|b| b.to_string()).unwrap_or_default(),
            self.judge.clone(),
        ];
        csv_string(&SUMMARY_COLUMNS, &[row])
    }

    pub fn confusion_csv(&self) -> Result<String> {
        let rows: Vec<Vec<String>> = ControlClass::ALL
            .iter()
            .map(|c| {
                let mut row = vec![c.name().to_string()];
                row.extend(self.confusion.0[c.index()].iter().map(usize::to_string));
                row
            })
            .collect();
        csv_string(&CONFUSION_COLUMNS, &rows)
    }

    pub fn features_csv(&self) -> Result<String> {
        let rows: Vec<Vec<String>> = self
            .features
            .classes
            .iter()
            .flat_map(|summary| {
                summary.stats.iter().map(move |s| {
                    vec![
                        summary.class.name().to_string(),
                        s.feature.name().to_string(),
                        summary.samples.to_string(),
                        s.mean.to_string(),
                        s.std.to_string(),
                    ]
                })
            })
            .collect();
        csv_string(&FEATURE_COLUMNS, &rows)
    }

    pub fn gaps_csv(&self) -> Result<String> {
        let rows: Vec<Vec<String>> = self
            .features
            .gaps
            .iter()
            .map(|g| vec![g.feature.name().to_string(), g.high_minus_low.to_string()])
            .collect();
        csv_string(&GAP_COLUMNS, &rows)
    }

    /// Heat map of the confusion counts, targets down and predictions across.
    pub fn confusion_svg(&self) -> String {
        let cell = 80;
        let (left, top) = (90, 60);
        let max = self.confusion.0.iter().flatten().copied().max().unwrap_or(0).max(1);
        let mut svg = String::new();
        let (w, h) = (left + 3 * cell + 20, top + 3 * cell + 20);
        let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(svg, r#"<text x="{left}" y="20">{} (rows: target, columns: predicted)</text>"#, escape(&self.model));
        for c in ControlClass::ALL {
            let i = c.index() as i32;
            let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, left + i * cell + 20, top - 8, c.name());
            let _ = writeln!(svg, r#"<text x="10" y="{}">{}</text>"#, top + i * cell + cell / 2, c.name());
        }
        for (r, row) in self.confusion.0.iter().enumerate() {
            for (col, count) in row.iter().enumerate() {
                let shade = 255 - (200 * count / max) as i32;
                let (x, y) = (left + col as i32 * cell, top + r as i32 * cell);
                let _ = writeln!(svg, r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="black"/>"#);
                let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{count}</text>"#, x + cell / 2, y + cell / 2);
            }
        }
        svg.push_str("</svg>\n");
        svg
    }

    /// Grouped bars of per-class feature means, one group per feature.
    pub fn features_svg(&self) -> String {
        let classes = &self.features.classes;
        let features: Vec<_> = classes.first().map(|c| c.stats.iter().map(|s| s.feature).collect()).unwrap_or_default();
        let peak = classes.iter().flat_map(|c| c.stats.iter().map(|s| s.mean.abs())).fold(0.0, f64::max).max(1e-9);
        let (bar, group_gap, height, top) = (24.0, 30.0, 200.0, 40.0);
        let group = bar * classes.len() as f64 + group_gap;
        let width = 60.0 + group * features.len().max(1) as f64;
        let colors = ["#4c72b0", "#dd8452", "#55a868"];
        let mut svg = String::new();
        let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="11">"#, top + height + 50.0);
        let _ = writeln!(svg, r#"<text x="10" y="20">{}: mean feature value by target class</text>"#, escape(&self.features.variant));
        for (k, summary) in classes.iter().enumerate() {
            let color = colors[summary.class.index()];
            let _ = writeln!(svg, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#, width - 90.0, 8.0 + 14.0 * k as f64, width - 76.0, 17.0 + 14.0 * k as f64, summary.class.name());
            for (j, stat) in summary.stats.iter().enumerate() {
                let h = height * stat.mean.abs() / peak;
                let x = 40.0 + group * j as f64 + bar * k as f64;
                let _ = writeln!(svg, r#"<rect x="{x:.1}" y="{:.1}" width="{bar}" height="{h:.1}" fill="{color}"/>"#, top + height - h);
            }
        }
        for (j, f) in features.iter().enumerate() {
            let _ = writeln!(svg, r#"<text x="{:.1}" y="{}">{}</text>"#, 40.0 + group * j as f64, top + height + 16.0, f.name());
        }
        svg.push_str("</svg>\n");
        svg
    }

    /// Writes every artifact; I/O errors name the failing path.
    pub fn emit(&self, paths: &ReportPaths) -> Result<()> {
        write_file(&paths.json, &self.to_json()?)?;
        write_file(&paths.summary_csv, &self.summary_csv()?)?;
        write_file(&paths.confusion_csv, &self.confusion_csv()?)?;
        write_file(&paths.features_csv, &self.features_csv()?)?;
        write_file(&paths.gaps_csv, &self.gaps_csv()?)?;
        write_file(&paths.confusion_svg, &self.confusion_svg())?;
        write_file(&paths.features_svg, &self.features_svg())
    }
}
