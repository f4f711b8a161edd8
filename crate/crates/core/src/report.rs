//! Report emission: fixed-precision text tables, CSV tables, JSON and an SVG
//! ROC plot.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::roc::{RocCurve, RocPoint};

/// Six significant digits; integers and zero stay short.
pub fn sig6(v: f64) -> String {
    if v.is_nan() {
        return "NA".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.into();
    }
    if v == 0.0 {
        return "0".into();
    }
    let magnitude = v.abs().log10().floor() as i32;
    if (-4..6).contains(&magnitude) {
        let decimals = (5 - magnitude).max(0) as usize;
        let s = format!("{v:.decimals$}");
        // rounding can carry into a new digit, e.g. 9.999996 -> 10.00000
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        if s == "-0" {
            "0".into()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

pub fn opt_sig6(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), sig6)
}

/// Plain-text table with left-aligned first column and right-aligned others.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
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
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn csv_table(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::io("<csv buffer>", std::io::Error::other(e.to_string()));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner()
        .map_err(|e| Error::io("<csv buffer>", std::io::Error::other(e.to_string())))
}

/// Pretty JSON with struct field order and shortest round-trip floats.
pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::io("<json buffer>", std::io::Error::other(e.to_string())))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn roc_csv(curve: &RocCurve) -> Result<Vec<u8>> {
    let rows: Vec<Vec<String>> = curve
        .points
        .iter()
        .map(|p| vec![format!("{}", p.threshold), format!("{}", p.fpr), format!("{}", p.tpr)])
        .collect();
    csv_table(&["threshold", "fpr", "tpr"], &rows)
}

/// A labelled point drawn over the ROC curve (a grader or operating point).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotMarker {
    pub label: String,
    pub fpr: f64,
    pub tpr: f64,
    pub kind: MarkerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MarkerKind {
    Grader,
    OperatingPoint,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// ROC plot: sensitivity against 1 - specificity, with markers.
pub fn roc_svg(curve: &RocCurve, title: &str, markers: &[PlotMarker]) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 56.0;
    let x = |fpr: f64| PAD + fpr * SIZE;
    let y = |tpr: f64| PAD + (1.0 - tpr) * SIZE;
    let mut s = String::new();
    let total = SIZE + 2.0 * PAD;
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total}\" height=\"{total}\" viewBox=\"0 0 {total} {total}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!("<rect x=\"0\" y=\"0\" width=\"{total}\" height=\"{total}\" fill=\"white\"/>\n"));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">{} (AUC {})</text>\n",
        total / 2.0,
        PAD / 2.0,
        escape(title),
        sig6(curve.auc)
    ));
    for i in 0..=10 {
        let t = f64::from(i) / 10.0;
        s.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#e5e5e5\"/>\n",
            x(t),
            y(0.0),
            x(t),
            y(1.0)
        ));
        s.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#e5e5e5\"/>\n",
            x(0.0),
            y(t),
            x(1.0),
            y(t)
        ));
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{t:.1}</text>\n",
            x(t),
            y(0.0) + 16.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{t:.1}</text>\n",
            x(0.0) - 6.0,
            y(t) + 4.0
        ));
    }
    s.push_str(&format!(
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{SIZE}\" height=\"{SIZE}\" fill=\"none\" stroke=\"black\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">1 - specificity</text>\n",
        total / 2.0,
        total - 12.0
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">sensitivity</text>\n",
        total / 2.0,
        total / 2.0
    ));
    let path: Vec<String> = curve
        .points
        .iter()
        .map(|RocPoint { fpr, tpr, .. }| format!("{:.2},{:.2}", x(*fpr), y(*tpr)))
        .collect();
    s.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"2\"/>\n",
        path.join(" ")
    ));
    for m in markers {
        let (cx, cy) = (x(m.fpr), y(m.tpr));
        match m.kind {
            MarkerKind::Grader => s.push_str(&format!(
                "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"4\" fill=\"#c0392b\"><title>{}</title></circle>\n",
                escape(&m.label)
            )),
            MarkerKind::OperatingPoint => s.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"8\" height=\"8\" fill=\"#27ae60\"><title>{}</title></rect>\n",
                cx - 4.0,
                cy - 4.0,
                escape(&m.label)
            )),
        }
    }
    s.push_str("</svg>\n");
    s
}
