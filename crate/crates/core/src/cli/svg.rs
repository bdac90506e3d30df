//! Self-contained SVG line charts. Output is a pure function of the input,
//! so identical data produces identical bytes.

use crate::error::{Error, Result};
use crate::propagation::LayerStats;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// One named polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// A filled band between two curves sharing the same x grid.
#[derive(Debug, Clone)]
pub struct Band {
    pub low: Vec<(f64, f64)>,
    pub high: Vec<(f64, f64)>,
}

/// Chart labels and scale options.
#[derive(Debug, Clone, Default)]
pub struct ChartSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 0.01 && a < 10000.0 {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

struct Scale {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    log_y: bool,
}

impl Scale {
    fn x(&self, v: f64) -> f64 {
        let t = (v - self.x_min) / (self.x_max - self.x_min);
        MARGIN_L + t * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        let v = if self.log_y { v.log10() } else { v };
        let t = (v - self.y_min) / (self.y_max - self.y_min);
        HEIGHT - MARGIN_B - t * (HEIGHT - MARGIN_T - MARGIN_B)
    }

    fn y_tick_value(&self, t: f64) -> f64 {
        let v = self.y_min + t * (self.y_max - self.y_min);
        if self.log_y {
            10f64.powf(v)
        } else {
            v
        }
    }
}

/// Render series (plus an optional band) as a self-contained SVG document.
pub fn render_svg(series: &[Series], band: Option<&Band>, spec: &ChartSpec) -> Result<String> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let usable = |y: f64| !spec.log_y || y > 0.0;
    for s in series {
        for &(x, y) in &s.points {
            if y.is_finite() && x.is_finite() && usable(y) {
                xs.push(x);
                ys.push(y);
            }
        }
    }
    if let Some(b) = band {
        for &(x, y) in b.low.iter().chain(b.high.iter()) {
            if y.is_finite() && x.is_finite() && usable(y) {
                xs.push(x);
                ys.push(y);
            }
        }
    }
    if xs.is_empty() {
        return Err(Error::Parameter("no data points to render".into()));
    }
    let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut y_min = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let mut y_max = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if spec.log_y {
        y_min = y_min.log10();
        y_max = y_max.log10();
    }
    let pad = |lo: &mut f64, hi: &mut f64| {
        if *lo == *hi {
            *lo -= 0.5;
            *hi += 0.5;
        } else {
            let d = (*hi - *lo) * 0.05;
            *lo -= d;
            *hi += d;
        }
    };
    let (mut x_min, mut x_max) = (x_min, x_max);
    pad(&mut y_min, &mut y_max);
    if x_min == x_max {
        x_min -= 0.5;
        x_max += 0.5;
    }
    let scale = Scale {
        x_min,
        x_max,
        y_min,
        y_max,
        log_y: spec.log_y,
    };

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" \
         text-anchor=\"middle\">{}</text>\n",
        fmt(WIDTH / 2.0),
        escape(&spec.title)
    ));

    // axes and ticks
    let x0 = MARGIN_L;
    let y0 = HEIGHT - MARGIN_B;
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(x0),
        fmt(MARGIN_T),
        fmt(x0),
        fmt(y0)
    ));
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(x0),
        fmt(y0),
        fmt(WIDTH - MARGIN_R),
        fmt(y0)
    ));
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let xv = x_min + t * (x_max - x_min);
        let xp = scale.x(xv);
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#cccccc\"/>\n",
            fmt(xp),
            fmt(MARGIN_T),
            fmt(xp),
            fmt(y0)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\">{}</text>\n",
            fmt(xp),
            fmt(y0 + 18.0),
            tick_label(xv)
        ));
        let yv = scale.y_tick_value(t);
        let yp = scale.y(yv);
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#cccccc\"/>\n",
            fmt(x0),
            fmt(yp),
            fmt(WIDTH - MARGIN_R),
            fmt(yp)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"end\">{}</text>\n",
            fmt(x0 - 6.0),
            fmt(yp + 4.0),
            tick_label(yv)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" \
         text-anchor=\"middle\">{}</text>\n",
        fmt((MARGIN_L + WIDTH - MARGIN_R) / 2.0),
        fmt(HEIGHT - 12.0),
        escape(&spec.x_label)
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" \
         text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        fmt(HEIGHT / 2.0),
        fmt(HEIGHT / 2.0),
        escape(&spec.y_label)
    ));

    if let Some(b) = band {
        let mut d = String::new();
        for &(x, y) in &b.low {
            if !usable(y) {
                continue;
            }
            d.push_str(&format!("{},{} ", fmt(scale.x(x)), fmt(scale.y(y))));
        }
        for &(x, y) in b.high.iter().rev() {
            if !usable(y) {
                continue;
            }
            d.push_str(&format!("{},{} ", fmt(scale.x(x)), fmt(scale.y(y))));
        }
        out.push_str(&format!(
            "<polygon points=\"{}\" fill=\"#1f77b4\" fill-opacity=\"0.2\" stroke=\"none\"/>\n",
            d.trim_end()
        ));
    }

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|&&(x, y)| x.is_finite() && y.is_finite() && usable(y))
            .map(|&(x, y)| format!("{},{}", fmt(scale.x(x)), fmt(scale.y(y))))
            .collect();
        if pts.is_empty() {
            continue;
        }
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
             fill=\"{color}\">{}</text>\n",
            fmt(MARGIN_L + 10.0),
            fmt(MARGIN_T + 16.0 + 16.0 * i as f64),
            escape(&s.name)
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Small-multiple histograms of per-layer pre-activations, one panel per
/// layer.
pub fn histogram_svg(stats: &[LayerStats]) -> Result<String> {
    if stats.is_empty() {
        return Err(Error::Parameter("no layers to render".into()));
    }
    let panel_h = 110.0;
    let panel_w = 760.0;
    let total_h = 30.0 + panel_h * stats.len() as f64;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"{}\" \
         viewBox=\"0 0 800 {}\">\n",
        fmt(total_h),
        fmt(total_h)
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(
        "<text x=\"400\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" \
         text-anchor=\"middle\">pre-activation histograms per layer</text>\n",
    );
    for (i, ls) in stats.iter().enumerate() {
        let top = 30.0 + panel_h * i as f64;
        let base = top + panel_h - 24.0;
        let peak = *ls.histogram.iter().max().unwrap_or(&1) as f64;
        let n = ls.histogram.len() as f64;
        let bin_w = panel_w / n;
        out.push_str(&format!(
            "<text x=\"24\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">layer {} \
             (mean {:.3}, var {:.3}, corr {:.3})</text>\n",
            fmt(top + 12.0),
            ls.layer,
            ls.mean,
            ls.var,
            ls.mean_offdiag_corr
        ));
        for (b, &count) in ls.histogram.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let h = (count as f64 / peak) * (panel_h - 44.0);
            let x = 24.0 + b as f64 * bin_w;
            out.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#1f77b4\"/>\n",
                fmt(x),
                fmt(base - h),
                fmt(bin_w.max(1.0) - 0.5),
                fmt(h)
            ));
        }
        out.push_str(&format!(
            "<line x1=\"24\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            fmt(base),
            fmt(24.0 + panel_w),
            fmt(base)
        ));
        out.push_str(&format!(
            "<text x=\"24\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n",
            fmt(base + 12.0),
            tick_label(ls.hist_lo)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"end\">{}</text>\n",
            fmt(24.0 + panel_w),
            fmt(base + 12.0),
            tick_label(ls.hist_hi)
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_series_has_two_vertices() {
        let series = [Series {
            name: "line".into(),
            points: vec![(0.0, 0.0), (1.0, 1.0)],
        }];
        let svg = render_svg(&series, None, &ChartSpec::default()).unwrap();
        let polyline = svg
            .lines()
            .find(|l| l.starts_with("<polyline"))
            .expect("polyline present");
        let pts = polyline.split("points=\"").nth(1).unwrap();
        let pts = &pts[..pts.find('"').unwrap()];
        assert_eq!(pts.split(' ').count(), 2, "{pts}");
    }

    #[test]
    fn identical_input_identical_bytes() {
        let series = [Series {
            name: "a".into(),
            points: vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)],
        }];
        let spec = ChartSpec {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            log_y: true,
        };
        let a = render_svg(&series, None, &spec).unwrap();
        let b = render_svg(&series, None, &spec).unwrap();
        assert_eq!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn empty_data_is_an_error() {
        assert!(render_svg(&[], None, &ChartSpec::default()).is_err());
        let empty = [Series {
            name: "none".into(),
            points: vec![],
        }];
        assert!(render_svg(&empty, None, &ChartSpec::default()).is_err());
    }

    #[test]
    fn band_renders_polygon() {
        let series = [Series {
            name: "median".into(),
            points: vec![(0.0, 1.0), (1.0, 2.0)],
        }];
        let band = Band {
            low: vec![(0.0, 0.5), (1.0, 1.5)],
            high: vec![(0.0, 1.5), (1.0, 2.5)],
        };
        let svg = render_svg(&series, Some(&band), &ChartSpec::default()).unwrap();
        assert!(svg.contains("<polygon"));
    }
}
