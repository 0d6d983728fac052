//! Grouped bar charts of per-split report means as standalone SVG.

use crate::data::SplitTag;
use crate::eval::{MetricReport, SplitSummary};

const METRICS: [(&str, fn(&SplitSummary) -> Option<f64>); 5] = [
    ("SSIM", |s| s.ssim_edit),
    ("PSNR", |s| s.psnr_edit.filter(|v| v.is_finite())),
    ("FSIM", |s| s.fsim_edit),
    ("SSIM (Noise)", |s| s.ssim_noise),
    ("CLIP-T", |s| s.clip_t),
];

const COLORS: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One panel per metric; inside each panel, seen and unseen groups with
/// one bar per report.
pub fn render_svg(reports: &[MetricReport]) -> String {
    let panel_w = 220.0;
    let panel_h = 200.0;
    let top = 40.0;
    let legend_h = 20.0 * reports.len() as f64 + 10.0;
    let width = panel_w * METRICS.len() as f64 + 20.0;
    let height = top + panel_h + 50.0 + legend_h;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (pi, (name, get)) in METRICS.iter().enumerate() {
        let x0 = 10.0 + pi as f64 * panel_w;
        let values: Vec<[Option<f64>; 2]> = reports
            .iter()
            .map(|r| [get(&r.summary(SplitTag::Seen)), get(&r.summary(SplitTag::Unseen))])
            .collect();
        let max = values
            .iter()
            .flatten()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-9);
        s.push_str(&format!(
            "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-weight=\"bold\">{}</text>\n",
            x0 + panel_w / 2.0,
            escape(name)
        ));
        let base = top + panel_h;
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{base}\" x2=\"{}\" y2=\"{base}\" stroke=\"black\"/>\n",
            x0 + 10.0,
            x0 + panel_w - 10.0
        ));
        let group_w = (panel_w - 30.0) / 2.0;
        let bar_w = (group_w - 10.0) / reports.len().max(1) as f64;
        for (gi, split) in ["seen", "unseen"].iter().enumerate() {
            let gx = x0 + 15.0 + gi as f64 * group_w;
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{split}</text>\n",
                gx + group_w / 2.0 - 5.0,
                base + 15.0
            ));
            for (ri, v) in values.iter().enumerate() {
                let Some(v) = v[gi] else { continue };
                let h = (v.abs() / max) * (panel_h - 20.0);
                let bx = gx + ri as f64 * bar_w;
                s.push_str(&format!(
                    "<rect x=\"{bx:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"><title>{v:.4}</title></rect>\n",
                    base - h,
                    (bar_w - 2.0).max(1.0),
                    COLORS[ri % COLORS.len()]
                ));
            }
        }
    }
    for (ri, r) in reports.iter().enumerate() {
        let y = top + panel_h + 40.0 + 20.0 * ri as f64;
        s.push_str(&format!(
            "<rect x=\"10\" y=\"{y}\" width=\"12\" height=\"12\" fill=\"{}\"/><text x=\"28\" y=\"{}\">{}</text>\n",
            COLORS[ri % COLORS.len()],
            y + 10.0,
            escape(&r.method)
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::MetricRow;

    #[test]
    fn one_bar_per_present_value() {
        let mut r = MetricReport::new("a<b", "x");
        r.rows.push(MetricRow {
            ssim_edit: Some(0.5),
            ..MetricRow::empty("s", SplitTag::Seen)
        });
        let svg = render_svg(&[r]);
        assert_eq!(svg.matches("<title>").count(), 1);
        assert!(svg.contains("a&lt;b"));
    }
}
