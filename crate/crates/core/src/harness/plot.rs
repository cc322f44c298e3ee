//! Static SVG plots rendered from experiment CSVs.
//!
//! Output is plain text assembled with fixed number formatting, so the same
//! CSV always yields the same bytes.

use std::fmt::Write as _;
use std::path::Path;

use super::table::Table;
use crate::error::{Error, Result};

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const N_TICKS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Mean return per delta, with one standard deviation across seeds.
    DeltaSweep,
    /// Target RTG against observed RTG, colored by timestep.
    TargetObserved,
    /// No recognized columns; axes only.
    Empty,
}

impl PlotKind {
    pub fn detect(table: &Table) -> Result<Self> {
        let has = |c| table.column(c).is_some();
        if table.header.is_empty() {
            Ok(PlotKind::Empty)
        } else if has("delta") && has("mean_return") {
            Ok(PlotKind::DeltaSweep)
        } else if has("target_rtg") && has("observed_rtg") && has("t") {
            Ok(PlotKind::TargetObserved)
        } else {
            Err(Error::Unsupported(format!(
                "no plot for a CSV with columns {}",
                table.header.join(",")
            )))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(xs: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in xs.filter(|x| x.is_finite()) {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        if !lo.is_finite() {
            return Range { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-9 {
            return Range { lo: lo - 0.5, hi: hi + 0.5 };
        }
        let pad = 0.05 * (hi - lo);
        Range { lo: lo - pad, hi: hi + pad }
    }

    fn union(self, other: Range) -> Self {
        Range {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }
}

struct Canvas {
    svg: String,
    x: Range,
    y: Range,
}

impl Canvas {
    fn new(x: Range, y: Range, title: &str, x_label: &str, y_label: &str) -> Self {
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );
        let mut c = Canvas { svg, x, y };
        c.axes(x_label, y_label);
        c
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.lo) / (self.x.hi - self.x.lo) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.lo) / (self.y.hi - self.y.lo) * (HEIGHT - 2.0 * MARGIN)
    }

    fn axes(&mut self, x_label: &str, y_label: &str) {
        let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
        let _ = writeln!(
            self.svg,
            r#"<path d="M{x0:.1},{y1:.1} L{x0:.1},{y0:.1} L{x1:.1},{y0:.1}" fill="none" stroke="black"/>"#
        );
        for i in 0..N_TICKS {
            let f = i as f64 / (N_TICKS - 1) as f64;
            let xv = self.x.lo + f * (self.x.hi - self.x.lo);
            let yv = self.y.lo + f * (self.y.hi - self.y.lo);
            let (px, py) = (self.px(xv), self.py(yv));
            let _ = writeln!(
                self.svg,
                r#"<line x1="{px:.1}" y1="{y0:.1}" x2="{px:.1}" y2="{:.1}" stroke="black"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{xv:.2}</text>"#,
                y0 + 4.0,
                y0 + 16.0
            );
            let _ = writeln!(
                self.svg,
                r#"<line x1="{:.1}" y1="{py:.1}" x2="{x0:.1}" y2="{py:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.2}</text>"#,
                x0 - 4.0,
                x0 - 6.0,
                py + 4.0
            );
        }
        let _ = writeln!(
            self.svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 10.0,
            escape(x_label)
        );
        let _ = writeln!(
            self.svg,
            r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(y_label)
        );
    }

    fn point(&mut self, x: f64, y: f64, color: &str) {
        let _ = writeln!(
            self.svg,
            r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
            self.px(x),
            self.py(y)
        );
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Linear blue-to-red ramp.
fn ramp(f: f64) -> String {
    let f = f.clamp(0.0, 1.0);
    let r = (40.0 + f * 200.0).round() as u8;
    let b = (220.0 - f * 180.0).round() as u8;
    format!("#{r:02x}40{b:02x}")
}

fn delta_sweep(table: &Table) -> Result<String> {
    let deltas = table.f64_column("delta")?;
    let means = table.f64_column("mean_return")?;
    // Mean and spread across rows (seeds) that share a delta.
    let mut groups: Vec<(f64, Vec<f64>)> = Vec::new();
    for (d, m) in deltas.iter().zip(&means) {
        match groups.iter_mut().find(|(g, _)| g == d) {
            Some((_, v)) => v.push(*m),
            None => groups.push((*d, vec![*m])),
        }
    }
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    let stats: Vec<(f64, f64, f64)> = groups
        .iter()
        .map(|(d, v)| {
            let (m, s) = crate::util::mean_std(v);
            (*d, m, s)
        })
        .collect();
    let x = Range::of(stats.iter().map(|s| s.0));
    let y = Range::of(stats.iter().map(|s| s.1 - s.2)).union(Range::of(stats.iter().map(|s| s.1 + s.2)));
    let mut c = Canvas::new(x, y, "Return against delta", "delta", "mean return");
    if !stats.is_empty() {
        let pts: Vec<String> = stats
            .iter()
            .map(|(d, m, _)| format!("{:.1},{:.1}", c.px(*d), c.py(*m)))
            .collect();
        let _ = writeln!(
            c.svg,
            r##"<polyline points="{}" fill="none" stroke="#2040c0"/>"##,
            pts.join(" ")
        );
    }
    for (d, m, s) in &stats {
        let px = c.px(*d);
        let (lo, hi) = (c.py(m - s), c.py(m + s));
        let _ = writeln!(
            c.svg,
            r##"<line x1="{px:.1}" y1="{lo:.1}" x2="{px:.1}" y2="{hi:.1}" stroke="#2040c0"/>"##
        );
        c.point(*d, *m, "#2040c0");
    }
    Ok(c.finish())
}

fn target_observed(table: &Table) -> Result<String> {
    let target = table.f64_column("target_rtg")?;
    let observed = table.f64_column("observed_rtg")?;
    let t = table.f64_column("t")?;
    let x = Range::of(target.iter().copied());
    let y = Range::of(observed.iter().copied());
    let t_max = t.iter().copied().fold(0.0, f64::max);
    let mut c = Canvas::new(x, y, "Target and observed RTG", "target RTG", "observed RTG");
    for i in 0..target.len() {
        if target[i].is_finite() && observed[i].is_finite() {
            let f = if t_max > 0.0 { t[i] / t_max } else { 0.0 };
            c.point(target[i], observed[i], &ramp(f));
        }
    }
    Ok(c.finish())
}

/// Renders a table as SVG according to its columns.
pub fn render(table: &Table) -> Result<String> {
    match PlotKind::detect(table)? {
        PlotKind::DeltaSweep => delta_sweep(table),
        PlotKind::TargetObserved => target_observed(table),
        PlotKind::Empty => {
            let unit = Range { lo: 0.0, hi: 1.0 };
            Ok(Canvas::new(unit, unit, "", "", "").finish())
        }
    }
}

/// Reads each CSV and writes `<stem>.svg` into `out_dir`. Returns the paths written.
pub fn emit_plots(csv_paths: &[impl AsRef<Path>], out_dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for p in csv_paths {
        let p = p.as_ref();
        let svg = render(&Table::load(p)?)?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
        let out = out_dir.join(format!("{stem}.svg"));
        std::fs::write(&out, svg)?;
        written.push(out);
    }
    Ok(written)
}

/// Number of plotted points in an SVG produced by [`render`].
pub fn count_points(svg: &str) -> usize {
    svg.matches("<circle").count()
}
