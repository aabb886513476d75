//! Standalone SVG scatter plots of 2D embeddings.
//!
//! One filled circle per point (radius 3), a fixed 10-color palette indexed
//! by class label, an axis-free square canvas auto-scaled to the data
//! bounding box with a 5% margin, and a 10-swatch legend panel on the right.

use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("bad csv: {0}")]
    BadCsv(String),
}

/// Side of the square plotting canvas, in SVG user units.
pub const CANVAS_SIDE: f64 = 800.0;
/// Margin fraction on each side of the data bounding box.
pub const MARGIN_FRAC: f64 = 0.05;
/// Width of the legend panel appended to the right of the canvas.
pub const LEGEND_WIDTH: f64 = 150.0;
pub const POINT_RADIUS: f64 = 3.0;

/// Class colors, indexed by digit label.
pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, Copy)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub label: u8,
}

/// Affine map from the data bounding box to the margin-inset canvas. X and Y
/// scale independently; Y is flipped so larger data values render higher.
#[derive(Debug, Clone, Copy)]
pub struct Viewport {
    min_x: f64,
    min_y: f64,
    scale_x: f64,
    scale_y: f64,
    inset: f64,
    span: f64,
}

impl Viewport {
    pub fn fit(points: &[PlotPoint]) -> Self {
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            min_x = min_x.min(p.x);
            max_x = max_x.max(p.x);
            min_y = min_y.min(p.y);
            max_y = max_y.max(p.y);
        }
        let inset = CANVAS_SIDE * MARGIN_FRAC;
        let span = CANVAS_SIDE - 2.0 * inset;
        let range_x = max_x - min_x;
        let range_y = max_y - min_y;
        Self {
            min_x,
            min_y,
            scale_x: if range_x > 0.0 { span / range_x } else { 0.0 },
            scale_y: if range_y > 0.0 { span / range_y } else { 0.0 },
            inset,
            span,
        }
    }

    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let cx = if self.scale_x > 0.0 {
            self.inset + (x - self.min_x) * self.scale_x
        } else {
            self.inset + self.span / 2.0
        };
        let cy = if self.scale_y > 0.0 {
            self.inset + self.span - (y - self.min_y) * self.scale_y
        } else {
            self.inset + self.span / 2.0
        };
        (cx, cy)
    }
}

/// Parse an `embedding.csv` (`sample_ref,label,x,y` with header).
pub fn parse_embedding_csv(text: &str) -> Result<Vec<PlotPoint>, PlotError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| PlotError::BadCsv("empty file".into()))?;
    if header.trim() != "sample_ref,label,x,y" {
        return Err(PlotError::BadCsv(format!("unexpected header {header:?}")));
    }
    let mut points = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(PlotError::BadCsv(format!(
                "line {}: expected 4 fields, found {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| PlotError::BadCsv(format!("line {}: bad {what}: {e}", lineno + 2)))
        };
        let label: u8 = fields[1]
            .trim()
            .parse()
            .map_err(|e| PlotError::BadCsv(format!("line {}: bad label: {e}", lineno + 2)))?;
        if label > 9 {
            return Err(PlotError::BadCsv(format!(
                "line {}: label {label} out of range",
                lineno + 2
            )));
        }
        points.push(PlotPoint {
            x: parse_f(fields[2], "x")?,
            y: parse_f(fields[3], "y")?,
            label,
        });
    }
    if points.is_empty() {
        return Err(PlotError::BadCsv("no data rows".into()));
    }
    Ok(points)
}

/// Render the scatter plot as a standalone SVG document.
pub fn render_scatter(points: &[PlotPoint], title: &str) -> Result<String, PlotError> {
    if points.is_empty() {
        return Err(PlotError::BadCsv("no points to plot".into()));
    }
    let viewport = Viewport::fit(points);
    let width = CANVAS_SIDE + LEGEND_WIDTH;
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{CANVAS_SIDE}\" \
         viewBox=\"0 0 {width} {CANVAS_SIDE}\">\n"
    );
    let _ = write!(
        svg,
        "<rect width=\"{width}\" height=\"{CANVAS_SIDE}\" fill=\"white\"/>\n"
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"18\" \
         text-anchor=\"middle\">{}</text>\n",
        CANVAS_SIDE / 2.0,
        escape_xml(title)
    );
    for p in points {
        let (cx, cy) = viewport.map(p.x, p.y);
        let _ = write!(
            svg,
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"{POINT_RADIUS}\" fill=\"{}\" \
             fill-opacity=\"0.75\"/>\n",
            PALETTE[p.label as usize]
        );
    }
    // Legend: one swatch per digit.
    for (label, color) in PALETTE.iter().enumerate() {
        let y = 60.0 + label as f64 * 28.0;
        let _ = write!(
            svg,
            "<g class=\"legend-entry\"><rect x=\"{}\" y=\"{}\" width=\"16\" height=\"16\" \
             fill=\"{color}\"/><text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" \
             font-size=\"14\">{label}</text></g>\n",
            CANVAS_SIDE + 20.0,
            y,
            CANVAS_SIDE + 44.0,
            y + 13.0,
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
