//! Report serialization and bar charts.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::run::EvalReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
    Csv,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> Option<ReportFormat> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "json" => Some(ReportFormat::Json),
            "md" | "markdown" => Some(ReportFormat::Markdown),
            "csv" => Some(ReportFormat::Csv),
            _ => None,
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Usage(format!("unknown report format {other:?}"))),
        }
    }
}

pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            // going through Value sorts every object's keys
            let value = serde_json::to_value(report).expect("report serializes");
            let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
            s.push('\n');
            s.into_bytes()
        }
        ReportFormat::Markdown => markdown(report).into_bytes(),
        ReportFormat::Csv => csv_rows(report),
    }
}

fn markdown(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {} on {} ({})", r.model, r.dataset, r.template);
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "samples {}, accuracy {:.4}, macro-F1 {:.4}, unparseable {}, errors {}",
        r.sample_count, r.accuracy, r.macro_f1, r.unparseable, r.errors
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "| class | precision | recall | f1 | support |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    for c in &r.per_class {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {:.4} | {} |",
            c.label, c.precision, c.recall, c.f1, c.support
        );
    }
    let _ = writeln!(
        s,
        "| macro | {:.4} | {:.4} | {:.4} | {} |",
        r.macro_precision, r.macro_recall, r.macro_f1, r.sample_count
    );
    s
}

fn csv_rows(r: &EvalReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "dataset",
        "model",
        "template",
        "class",
        "precision",
        "recall",
        "f1",
        "support",
        "accuracy",
    ];
    w.write_record(header).expect("in-memory write");
    let acc = format!("{:.6}", r.accuracy);
    let mut row = |class: &str, p: f64, rc: f64, f: f64, support: u64| {
        w.write_record([
            r.dataset.as_str(),
            r.model.as_str(),
            r.template.as_str(),
            class,
            &format!("{p:.6}"),
            &format!("{rc:.6}"),
            &format!("{f:.6}"),
            &support.to_string(),
            &acc,
        ])
        .expect("in-memory write");
    };
    for c in &r.per_class {
        row(&c.label, c.precision, c.recall, c.f1, c.support);
    }
    row(
        "macro",
        r.macro_precision,
        r.macro_recall,
        r.macro_f1,
        r.sample_count,
    );
    row(
        "weighted",
        r.weighted_precision,
        r.weighted_recall,
        r.weighted_f1,
        r.sample_count,
    );
    w.into_inner().expect("in-memory flush")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    MacroF1,
    WeightedF1,
    MacroPrecision,
    MacroRecall,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MacroF1 => "macro_f1",
            Metric::WeightedF1 => "weighted_f1",
            Metric::MacroPrecision => "macro_precision",
            Metric::MacroRecall => "macro_recall",
        }
    }

    pub fn value(self, r: &EvalReport) -> f64 {
        match self {
            Metric::Accuracy => r.accuracy,
            Metric::MacroF1 => r.macro_f1,
            Metric::WeightedF1 => r.weighted_f1,
            Metric::MacroPrecision => r.macro_precision,
            Metric::MacroRecall => r.macro_recall,
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Metric::Accuracy,
            Metric::MacroF1,
            Metric::WeightedF1,
            Metric::MacroPrecision,
            Metric::MacroRecall,
        ]
        .into_iter()
        .find(|m| m.name() == s || (s == "f1" && *m == Metric::MacroF1))
        .ok_or_else(|| Error::Usage(format!("unknown metric {s:?}")))
    }
}

const PALETTE: [&str; 6] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1",
];
pub const PLOT_HEIGHT: f64 = 300.0;
const BAR_WIDTH: f64 = 24.0;
const GROUP_GAP: f64 = 30.0;
const LEFT: f64 = 60.0;
const TOP: f64 = 30.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Grouped bars: one group per dataset, one bar per model, heights
/// proportional to `metric` on a 0..1 axis.
pub fn render_chart(reports: &[EvalReport], metric: Metric) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Usage("no reports to chart".into()));
    }
    let mut datasets: Vec<&str> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for r in reports {
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let group_width = models.len() as f64 * BAR_WIDTH;
    let width = LEFT + datasets.len() as f64 * (group_width + GROUP_GAP) + GROUP_GAP + 160.0;
    let height = TOP + PLOT_HEIGHT + 60.0;
    let base = TOP + PLOT_HEIGHT;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{base}" stroke="black"/><line x1="{LEFT}" y1="{base}" x2="{:.3}" y2="{base}" stroke="black"/>"#,
        width - 160.0
    );
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = base - v * PLOT_HEIGHT;
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{y:.3}" text-anchor="end">{v:.2}</text>"#,
            LEFT - 6.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="axis-label" x="14" y="{:.3}" transform="rotate(-90 14 {:.3})" text-anchor="middle">{}</text>"#,
        TOP + PLOT_HEIGHT / 2.0,
        TOP + PLOT_HEIGHT / 2.0,
        metric.name()
    );
    for (gi, ds) in datasets.iter().enumerate() {
        let gx = LEFT + GROUP_GAP + gi as f64 * (group_width + GROUP_GAP);
        for (mi, model) in models.iter().enumerate() {
            let Some(r) = reports
                .iter()
                .find(|r| r.dataset == *ds && r.model == *model)
            else {
                continue;
            };
            let v = metric.value(r).clamp(0.0, 1.0);
            let h = v * PLOT_HEIGHT;
            let _ = writeln!(
                s,
                r#"<rect class="bar" data-dataset="{}" data-model="{}" x="{:.3}" y="{:.3}" width="{BAR_WIDTH}" height="{h:.3}" fill="{}"/>"#,
                escape(ds),
                escape(model),
                gx + mi as f64 * BAR_WIDTH,
                base - h,
                PALETTE[mi % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">{}</text>"#,
            gx + group_width / 2.0,
            base + 18.0,
            escape(ds)
        );
    }
    let lx = width - 150.0;
    for (mi, model) in models.iter().enumerate() {
        let y = TOP + mi as f64 * 18.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.3}" y="{y:.3}" width="12" height="12" fill="{}"/><text x="{:.3}" y="{:.3}">{}</text>"#,
            PALETTE[mi % PALETTE.len()],
            lx + 18.0,
            y + 10.0,
            escape(model)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
