//! Per-sample metric rows, per-split means, JSONL output and plain-text
//! tables.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SplitTag;
use crate::error::Result;

/// PSNR values may be `+inf`; JSON has no such number so it is written as
/// the string `"inf"`.
mod psnr_value {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Repr::Text(t)) => Err(serde::de::Error::custom(format!("bad psnr value `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sample_id: String,
    pub split: SplitTag,
    pub ssim_edit: Option<f64>,
    #[serde(with = "psnr_value")]
    pub psnr_edit: Option<f64>,
    pub fsim_edit: Option<f64>,
    pub ssim_noise: Option<f64>,
    pub clip_t: Option<f64>,
    pub runtime_ms: Option<f64>,
    pub peak_mem_mib: Option<f64>,
}

impl MetricRow {
    pub fn empty(sample_id: impl Into<String>, split: SplitTag) -> Self {
        Self {
            sample_id: sample_id.into(),
            split,
            ssim_edit: None,
            psnr_edit: None,
            fsim_edit: None,
            ssim_noise: None,
            clip_t: None,
            runtime_ms: None,
            peak_mem_mib: None,
        }
    }
}

/// Means over the rows of one split. Each mean covers only rows where the
/// metric is present; infinite PSNR values are excluded and counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: SplitTag,
    pub rows: usize,
    pub ssim_edit: Option<f64>,
    #[serde(with = "psnr_value")]
    pub psnr_edit: Option<f64>,
    pub psnr_inf_count: usize,
    pub fsim_edit: Option<f64>,
    pub ssim_noise: Option<f64>,
    pub clip_t: Option<f64>,
    pub runtime_ms: Option<f64>,
    pub peak_mem_mib: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub sample_id: String,
    pub error: String,
}

pub fn mean_present(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.into_iter().flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean of the finite PSNR values plus the number of `+inf` entries. When
/// every present value is infinite the mean is `+inf` itself.
pub fn psnr_mean(values: impl IntoIterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let vals: Vec<f64> = values.into_iter().flatten().collect();
    let inf = vals.iter().filter(|v| v.is_infinite()).count();
    let finite = mean_present(vals.iter().filter(|v| v.is_finite()).map(|v| Some(*v)));
    match finite {
        Some(m) => (Some(m), inf),
        None if inf > 0 => (Some(f64::INFINITY), inf),
        None => (None, 0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ReportLine {
    Header { method: String, backend: String },
    Row(MetricRow),
    Summary(SplitSummary),
    Failure(SampleFailure),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub backend: String,
    pub rows: Vec<MetricRow>,
    pub failures: Vec<SampleFailure>,
}

impl MetricReport {
    pub fn new(method: impl Into<String>, backend: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            backend: backend.into(),
            ..Default::default()
        }
    }

    pub fn summary(&self, split: SplitTag) -> SplitSummary {
        let rows: Vec<&MetricRow> = self.rows.iter().filter(|r| r.split == split).collect();
        let col = |f: fn(&MetricRow) -> Option<f64>| mean_present(rows.iter().map(|r| f(r)));
        let (psnr_edit, psnr_inf_count) = psnr_mean(rows.iter().map(|r| r.psnr_edit));
        SplitSummary {
            split,
            rows: rows.len(),
            ssim_edit: col(|r| r.ssim_edit),
            psnr_edit,
            psnr_inf_count,
            fsim_edit: col(|r| r.fsim_edit),
            ssim_noise: col(|r| r.ssim_noise),
            clip_t: col(|r| r.clip_t),
            runtime_ms: col(|r| r.runtime_ms),
            peak_mem_mib: col(|r| r.peak_mem_mib),
        }
    }

    /// Summaries of the seen and unseen splits, in that order.
    pub fn summaries(&self) -> [SplitSummary; 2] {
        [self.summary(SplitTag::Seen), self.summary(SplitTag::Unseen)]
    }

    /// Means over every row regardless of split.
    pub fn overall(&self) -> SplitSummary {
        let mut all = self.clone();
        for r in &mut all.rows {
            r.split = SplitTag::Seen;
        }
        all.summary(SplitTag::Seen)
    }

    pub fn lines(&self) -> Vec<ReportLine> {
        let mut out = vec![ReportLine::Header {
            method: self.method.clone(),
            backend: self.backend.clone(),
        }];
        out.extend(self.rows.iter().cloned().map(ReportLine::Row));
        out.extend(self.summaries().into_iter().map(ReportLine::Summary));
        out.extend(self.failures.iter().cloned().map(ReportLine::Failure));
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for line in self.lines() {
            s.push_str(&serde_json::to_string(&line)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    /// Rebuilds a report from its JSONL form; summary lines are ignored
    /// since they are derived from the rows.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut report = MetricReport::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<ReportLine>(line)? {
                ReportLine::Header { method, backend } => {
                    report.method = method;
                    report.backend = backend;
                }
                ReportLine::Row(r) => report.rows.push(r),
                ReportLine::Summary(_) => {}
                ReportLine::Failure(f) => report.failures.push(f),
            }
        }
        Ok(report)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(x) if x.is_infinite() => "inf".to_string(),
        Some(x) => format!("{x:.digits$}"),
        None => "N/A".to_string(),
    }
}

/// Renders a fixed-width text table.
pub fn render_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let ncol = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate().take(ncol) {
            widths[i] = widths[i].max(c.chars().count());
        }
    }
    let fmt_row = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect();
        parts.join(" | ")
    };
    let mut out = fmt_row(headers);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    out.push('\n');
    for r in rows {
        out.push_str(&fmt_row(r));
        out.push('\n');
    }
    out
}

/// The image comparison table: editing failure (SSIM, PSNR, FSIM),
/// imperceptibility (SSIM of the noise), text misalignment (CLIP-T), each
/// for seen and unseen, followed by mean immunization runtime and memory.
pub fn render_comparison(reports: &[&MetricReport]) -> String {
    let mut headers = vec!["Method".to_string()];
    for m in ["SSIM", "PSNR", "FSIM", "SSIM (Noise)", "CLIP-T"] {
        headers.push(format!("{m} seen"));
        headers.push(format!("{m} unseen"));
    }
    headers.push("Runtime (s)".into());
    headers.push("Mem (MiB)".into());
    let mut rows = Vec::new();
    let mut inf_note = Vec::new();
    for r in reports {
        let [s, u] = r.summaries();
        let all = r.overall();
        let mut row = vec![r.method.clone()];
        for (a, b, d) in [
            (s.ssim_edit, u.ssim_edit, 3),
            (s.psnr_edit, u.psnr_edit, 2),
            (s.fsim_edit, u.fsim_edit, 3),
            (s.ssim_noise, u.ssim_noise, 3),
            (s.clip_t, u.clip_t, 2),
        ] {
            row.push(fmt_opt(a, d));
            row.push(fmt_opt(b, d));
        }
        row.push(fmt_opt(all.runtime_ms.map(|ms| ms / 1000.0), 3));
        row.push(fmt_opt(all.peak_mem_mib, 1));
        rows.push(row);
        if all.psnr_inf_count > 0 {
            inf_note.push(format!(
                "{}: {} identical edit pair(s) excluded from PSNR means",
                r.method, all.psnr_inf_count
            ));
        }
        if !r.failures.is_empty() {
            inf_note.push(format!("{}: {} sample(s) failed", r.method, r.failures.len()));
        }
    }
    let mut out = render_table(&headers, &rows);
    for n in inf_note {
        out.push_str(&format!("* {n}\n"));
    }
    out
}
