//! Text tables and static SVG figures.

use dkan_core::eval::{ConfusionMatrix, EvalReport};
use std::fmt::Write;

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Markdown table of per-category AP50 and the group means.
pub fn report_table(report: &EvalReport) -> String {
    let mut s = String::from("| category | group | AP50 |\n|---|---|---|\n");
    for c in &report.base_categories {
        let _ = writeln!(s, "| {c} | base | {} |", pct(report.per_category_ap[c]));
    }
    for c in &report.novel_categories {
        let _ = writeln!(s, "| {c} | novel | {} |", pct(report.per_category_ap[c]));
    }
    let _ = write!(
        s,
        "\n| AP_B | AP_N | AP_All |\n|---|---|---|\n| {} | {} | {} |\n",
        pct(report.ap_base),
        pct(report.ap_novel),
        pct(report.ap_all)
    );
    s
}

/// One row per tagged report.
pub fn comparison_table(rows: &[(String, &EvalReport)]) -> String {
    let mut s = String::from("| run | AP_B | AP_N | AP_All |\n|---|---|---|---|\n");
    for (tag, r) in rows {
        let _ = writeln!(s, "| {tag} | {} | {} | {} |", pct(r.ap_base), pct(r.ap_novel), pct(r.ap_all));
    }
    s
}

/// Loss ablation grid: rows none, fka, lka, both with check marks.
pub fn ablation_grid(none: &EvalReport, fka: &EvalReport, lka: &EvalReport, both: &EvalReport) -> String {
    let mut s = String::from("| FKA | LKA | AP_B | AP_N | AP_All |\n|---|---|---|---|---|\n");
    for (f, l, r) in [("", "", none), ("✓", "", fka), ("", "✓", lka), ("✓", "✓", both)] {
        let _ = writeln!(s, "| {f} | {l} | {} | {} | {} |", pct(r.ap_base), pct(r.ap_novel), pct(r.ap_all));
    }
    s
}

/// Line plot of several series over shared x values.
pub fn line_plot_svg(title: &str, x_label: &str, xs: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    let (w, h, m) = (560.0, 360.0, 50.0);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let n = xs.len().max(1);
    // categorical x axis keeps log-spaced sweeps readable
    let px = |i: usize| {
        if n == 1 {
            w / 2.0
        } else {
            m + (w - 2.0 * m) * i as f64 / (n - 1) as f64
        }
    };
    let py = |v: f64| h - m - (h - 2.0 * m) * v.clamp(0.0, 1.0);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/><line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>",
        h - m,
        w - m,
        h - m,
        h - m
    );
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text><line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#ddd\"/>",
            m - 6.0,
            py(v) + 4.0,
            pct(v),
            py(v),
            w - m,
            py(v)
        );
    }
    for (i, x) in xs.iter().enumerate() {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x}</text>", px(i), h - m + 16.0);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", w / 2.0, h - 10.0, escape(x_label));
    for (j, (name, ys)) in series.iter().enumerate() {
        let c = colors[j % colors.len()];
        let pts: Vec<String> = ys.iter().enumerate().map(|(i, &v)| format!("{:.1},{:.1}", px(i), py(v))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        for p in &pts {
            let (x, y) = p.split_once(',').expect("point");
            let _ = writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{c}\"/>");
        }
        let ly = m + 16.0 * j as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{c}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            w - m - 70.0,
            ly - 9.0,
            w - m - 55.0,
            ly,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Heat map of row-normalised ratios with percentages in each cell.
pub fn confusion_svg(title: &str, cm: &ConfusionMatrix) -> String {
    let n = cm.labels.len();
    let cell = 48.0;
    let m = 60.0;
    let size = m + cell * n as f64 + 20.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        size + 20.0,
        size / 2.0,
        escape(title)
    );
    for (i, row) in cm.ratios.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let x = m + cell * j as f64;
            let y = m + cell * i as f64;
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))) as u8;
            let text = if v > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#888\"/>\
                 <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{text}\">{}</text>",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0,
                pct(v)
            );
        }
    }
    for (k, l) in cm.labels.iter().enumerate() {
        let c = m + cell * k as f64 + cell / 2.0;
        let _ = writeln!(s, "<text x=\"{c}\" y=\"{}\" text-anchor=\"middle\">{}</text>", m - 6.0, escape(l));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", m - 6.0, c + 4.0, escape(l));
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">predicted</text>",
        m + cell * n as f64 / 2.0,
        size + 10.0
    );
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn report(ap: f64) -> EvalReport {
        let per: BTreeMap<String, f64> = [("A".to_string(), ap), ("B".to_string(), ap / 2.0)].into();
        EvalReport::from_category_aps(
            per,
            vec!["A".into()],
            vec!["B".into()],
            ConfusionMatrix {
                labels: vec!["A".into(), "B".into(), "BG".into()],
                counts: vec![vec![1, 0, 0], vec![0, 1, 1], vec![0, 0, 0]],
                ratios: vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.5, 0.5], vec![0.0, 0.0, 0.0]],
            },
        )
    }

    #[test]
    fn grid_has_four_rows() {
        let r = report(0.8);
        let g = ablation_grid(&r, &r, &r, &r);
        assert_eq!(g.lines().count(), 6);
        assert!(g.contains("| ✓ | ✓ | 80.0 | 40.0 | 60.0 |"));
    }

    #[test]
    fn svgs_are_well_formed() {
        let r = report(0.5);
        let c = confusion_svg("cm", &r.confusion);
        assert!(c.starts_with("<svg") && c.trim_end().ends_with("</svg>"));
        assert_eq!(c.matches("<rect x=").count(), 9);
        let p = line_plot_svg("t", "tau", &[3.0, 4.0], &[("AP_B", vec![0.1, 0.2])]);
        assert_eq!(p.matches("<polyline").count(), 1);
    }
}
