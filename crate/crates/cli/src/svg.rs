//! Minimal SVG line and scatter charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mark {
    Points,
    Line,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub mark: Mark,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Explicit x tick positions; evenly spaced ticks otherwise.
    pub x_ticks: Option<Vec<f64>>,
    /// Use one range for both axes and draw the y = x line.
    pub diagonal: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Compact tick label.
pub fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

impl Chart {
    pub fn ranges(&self) -> ((f64, f64), (f64, f64)) {
        let pts = || self.series.iter().flat_map(|s| s.points.iter().copied());
        let mut xs = extent(
            pts()
                .map(|p| p.0)
                .chain(self.x_ticks.iter().flatten().copied()),
        );
        let mut ys = extent(pts().map(|p| p.1));
        if self.diagonal {
            let both = (xs.0.min(ys.0), xs.1.max(ys.1));
            xs = both;
            ys = both;
        }
        (padded(xs.0, xs.1), padded(ys.0, ys.1))
    }

    /// Maps data coordinates to SVG coordinates.
    pub fn to_screen(&self, x: f64, y: f64) -> (f64, f64) {
        let ((x0, x1), (y0, y1)) = self.ranges();
        let w = WIDTH - LEFT - RIGHT;
        let h = HEIGHT - TOP - BOTTOM;
        (
            LEFT + (x - x0) / (x1 - x0) * w,
            TOP + h - (y - y0) / (y1 - y0) * h,
        )
    }

    pub fn render(&self) -> String {
        let ((x0, x1), (y0, y1)) = self.ranges();
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(
            out,
            r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
            escape(&self.title)
        );

        let (ax0, ay0) = (LEFT, HEIGHT - BOTTOM);
        let (ax1, ay1) = (WIDTH - RIGHT, TOP);
        let _ = writeln!(
            out,
            r##"<path class="axes" d="M{ax0:.2},{ay1:.2} L{ax0:.2},{ay0:.2} L{ax1:.2},{ay0:.2}" fill="none" stroke="#333"/>"##
        );

        let x_ticks = self.x_ticks.clone().unwrap_or_else(|| {
            (0..=4)
                .map(|k| x0 + (x1 - x0) * f64::from(k) / 4.0)
                .collect()
        });
        for &t in &x_ticks {
            let (sx, _) = self.to_screen(t, y0);
            let _ = writeln!(
                out,
                r##"<g class="xtick" data-value="{t}"><line x1="{sx:.2}" y1="{ay0:.2}" x2="{sx:.2}" y2="{:.2}" stroke="#333"/><text x="{sx:.2}" y="{:.2}" text-anchor="middle">{}</text></g>"##,
                ay0 + 5.0,
                ay0 + 18.0,
                tick_label(t)
            );
        }
        for k in 0..=4 {
            let t = y0 + (y1 - y0) * f64::from(k) / 4.0;
            let (_, sy) = self.to_screen(x0, t);
            let _ = writeln!(
                out,
                r##"<g class="ytick"><line x1="{:.2}" y1="{sy:.2}" x2="{ax0:.2}" y2="{sy:.2}" stroke="#333"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text></g>"##,
                ax0 - 5.0,
                ax0 - 8.0,
                sy + 4.0,
                tick_label(t)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            (ax0 + ax1) / 2.0,
            HEIGHT - 15.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text transform="translate(18,{:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
            (ay0 + ay1) / 2.0,
            escape(&self.y_label)
        );

        if self.diagonal {
            let (sx0, sy0) = self.to_screen(x0, x0);
            let (sx1, sy1) = self.to_screen(x1, x1);
            let _ = writeln!(
                out,
                r##"<line class="diagonal" x1="{sx0:.2}" y1="{sy0:.2}" x2="{sx1:.2}" y2="{sy1:.2}" stroke="#999" stroke-dasharray="4 3"/>"##
            );
        }

        for (k, s) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            match s.mark {
                Mark::Points => {
                    for &(x, y) in &s.points {
                        let (sx, sy) = self.to_screen(x, y);
                        let _ = writeln!(
                            out,
                            r#"<circle cx="{sx:.2}" cy="{sy:.2}" r="3" fill="{color}" fill-opacity="0.7"/>"#
                        );
                    }
                }
                Mark::Line => {
                    let path: Vec<String> = s
                        .points
                        .iter()
                        .map(|&(x, y)| {
                            let (sx, sy) = self.to_screen(x, y);
                            format!("{sx:.2},{sy:.2}")
                        })
                        .collect();
                    let _ = writeln!(
                        out,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                        path.join(" ")
                    );
                    for p in &path {
                        let (sx, sy) = p.split_once(',').expect("formatted pair");
                        let _ =
                            writeln!(out, r#"<circle cx="{sx}" cy="{sy}" r="3" fill="{color}"/>"#);
                    }
                }
            }
            let ly = TOP + 10.0 + 18.0 * k as f64;
            let lx = WIDTH - RIGHT + 15.0;
            let _ = writeln!(
                out,
                r#"<rect x="{lx:.2}" y="{:.2}" width="10" height="10" fill="{color}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                ly - 9.0,
                lx + 15.0,
                ly,
                escape(&s.label)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tick_labels_are_compact() {
        assert_eq!(tick_label(1.0), "1");
        assert_eq!(tick_label(0.25), "0.25");
        assert_eq!(tick_label(-0.0001), "0");
    }

    #[test]
    fn escapes_text() {
        let chart = Chart {
            title: "a < b & c".into(),
            ..Chart::default()
        };
        assert!(chart.render().contains("a &lt; b &amp; c"));
    }

    #[test]
    fn empty_chart_renders() {
        let svg = Chart::default().render();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }
}
