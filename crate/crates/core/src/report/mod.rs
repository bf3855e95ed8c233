//! Standalone SVG figures: the explanation heatmap and sweep line plots.
//! Output depends only on the input values, so identical inputs give
//! byte-identical documents.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::explain::ExplanationMatrix;
use crate::train_eval::SweepTable;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("nothing to plot: {0}")]
    Empty(&'static str),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("{model} at {axis}={value}: AUC {auc} outside [0, 1]")]
    OutOfRange { model: String, axis: String, value: usize, auc: f64 },
    #[error("{0}")]
    Shape(String),
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
}

/// Five colour stops, low to high.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Palette(pub [[u8; 3]; 5]);

impl Default for Palette {
    /// Light yellow through orange to dark purple.
    fn default() -> Self {
        Palette([[255, 255, 204], [254, 217, 118], [253, 141, 60], [227, 26, 28], [84, 39, 143]])
    }
}

impl Palette {
    /// Colour at `t ∈ [0,1]`, linear between neighbouring stops.
    pub fn color(&self, t: f64) -> String {
        let t = t.clamp(0.0, 1.0) * 4.0;
        let i = (t.floor() as usize).min(3);
        let f = t - i as f64;
        let (a, b) = (self.0[i], self.0[i + 1]);
        let ch = |k: usize| (a[k] as f64 + f * (b[k] as f64 - a[k] as f64)).round() as u8;
        format!("#{:02x}{:02x}{:02x}", ch(0), ch(1), ch(2))
    }

    pub fn midpoint(&self) -> String {
        self.color(0.5)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const CELL: f64 = 12.0;
const FONT: f64 = 10.0;

/// Heatmap of a row-major `rows × cols` matrix drawn in the given display
/// orders. Values are min-max scaled over the whole matrix; a constant
/// matrix maps every cell to the palette midpoint.
pub fn render_heatmap_svg(
    values: &[f64],
    row_labels: &[String],
    col_labels: &[String],
    row_order: &[usize],
    col_order: &[usize],
    palette: &Palette,
) -> Result<String, ReportError> {
    let (rows, cols) = (row_labels.len(), col_labels.len());
    if rows == 0 || cols == 0 {
        return Err(ReportError::Empty("heatmap has no cells"));
    }
    if values.len() != rows * cols {
        return Err(ReportError::Shape(format!("{} values for a {rows}×{cols} heatmap", values.len())));
    }
    if !is_perm(row_order, rows) || !is_perm(col_order, cols) {
        return Err(ReportError::Shape("display orders must be permutations".into()));
    }
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(ReportError::NonFinite { row: k / cols, col: k % cols });
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };

    let label_w = 8.0 + 0.6 * FONT * row_labels.iter().map(|l| l.chars().count()).max().unwrap_or(0) as f64;
    let label_h = 8.0 + 0.6 * FONT * col_labels.iter().map(|l| l.chars().count()).max().unwrap_or(0) as f64;
    let (x0, y0) = (label_w, label_h);
    let width = x0 + cols as f64 * CELL + 10.0;
    let height = y0 + rows as f64 * CELL + 10.0;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="{FONT}">"#);
    for (dr, &r) in row_order.iter().enumerate() {
        let y = y0 + dr as f64 * CELL;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 4.0, y + CELL * 0.8, escape(&row_labels[r]));
    }
    for (dc, &c) in col_order.iter().enumerate() {
        let x = x0 + dc as f64 * CELL + CELL * 0.7;
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" transform="rotate(-90 {x:.1} {:.1})">{}</text>"#,
            y0 - 4.0,
            y0 - 4.0,
            escape(&col_labels[c])
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="cells">"#);
    for (dr, &r) in row_order.iter().enumerate() {
        for (dc, &c) in col_order.iter().enumerate() {
            let v = values[r * cols + c];
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{CELL}" height="{CELL}" fill="{}"><title>{} / {}: {v:.4}</title></rect>"#,
                x0 + dc as f64 * CELL,
                y0 + dr as f64 * CELL,
                palette.color(scale(v)),
                escape(&row_labels[r]),
                escape(&col_labels[c]),
            );
        }
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

/// Heatmap of an explanation matrix in its stored display orders.
pub fn explanation_heatmap_svg(m: &ExplanationMatrix, palette: &Palette) -> Result<String, ReportError> {
    let cols: Vec<String> = m.targets.iter().map(|t| t.to_string()).collect();
    render_heatmap_svg(&m.values, &m.feature_names, &cols, &m.row_order, &m.col_order, palette)
}

fn is_perm(order: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    order.len() == n && order.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

/// Series colours for line plots, cycled by model column.
const SERIES: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#a6761d"];

/// Mean AUC against the sweep axis: one polyline per model, legend in
/// column order. Axis values are spaced evenly.
pub fn render_lines_svg(table: &SweepTable) -> Result<String, ReportError> {
    if table.rows.is_empty() || table.models.is_empty() {
        return Err(ReportError::Empty("sweep table has no rows"));
    }
    for row in &table.rows {
        if row.cells.len() != table.models.len() {
            return Err(ReportError::Shape(format!("row {} has {} cells for {} models", row.value, row.cells.len(), table.models.len())));
        }
        for (m, c) in table.models.iter().zip(&row.cells) {
            if !(0.0..=1.0).contains(&c.mean) {
                return Err(ReportError::OutOfRange { model: m.clone(), axis: table.axis.clone(), value: row.value, auc: c.mean });
            }
        }
    }
    let means = table.rows.iter().flat_map(|r| r.cells.iter().map(|c| c.mean));
    let (lo, hi) = means.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let mut ymin = (lo * 10.0).floor() / 10.0;
    let mut ymax = (hi * 10.0).ceil() / 10.0;
    if ymax - ymin < 0.1 {
        ymin = (ymin - 0.05).max(0.0);
        ymax = (ymin + 0.1).min(1.0);
        ymin = ymax - 0.1;
    }

    let (left, top, pw, ph) = (60.0, 20.0, 400.0, 260.0);
    let legend_x = left + pw + 20.0;
    let width = legend_x + 20.0 + 8.0 * table.models.iter().map(|m| m.chars().count()).max().unwrap_or(0) as f64 + 20.0;
    let height = top + ph + 50.0;
    let n = table.rows.len();
    let px = |i: usize| if n == 1 { left + pw / 2.0 } else { left + pw * i as f64 / (n - 1) as f64 };
    let py = |v: f64| top + ph * (1.0 - (v - ymin) / (ymax - ymin));

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="{FONT}">"#);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#, top + ph);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, top + ph, left + pw, top + ph);
    let ticks = ((ymax - ymin) * 10.0).round() as usize;
    for k in 0..=ticks {
        let v = ymin + k as f64 * 0.1;
        let y = py(v);
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{y:.1}" x2="{left}" y2="{y:.1}" stroke="black"/>"#, left - 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, left - 6.0, y + 3.5);
    }
    for (i, row) in table.rows.iter().enumerate() {
        let x = px(i);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, top + ph + 15.0, row.value);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, left + pw / 2.0, top + ph + 35.0, escape(&table.axis));
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">AUC</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (m, name) in table.models.iter().enumerate() {
        let color = SERIES[m % SERIES.len()];
        let pts: Vec<String> = table.rows.iter().enumerate().map(|(i, r)| format!("{:.1},{:.1}", px(i), py(r.cells[m].mean))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"><title>{}</title></polyline>"#, pts.join(" "), escape(name));
        let ly = top + 10.0 + 16.0 * m as f64;
        let _ = writeln!(
            s,
            r#"<g class="legend"><line x1="{legend_x:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text></g>"#,
            legend_x + 15.0,
            legend_x + 20.0,
            ly + 3.5,
            escape(name)
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_svg(svg: &str, path: impl AsRef<Path>) -> Result<(), ReportError> {
    let path = path.as_ref();
    fs::write(path, svg).map_err(|e| ReportError::Io { path: path.display().to_string(), msg: e.to_string() })
}
