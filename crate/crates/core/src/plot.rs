//! Deterministic SVG line charts with optional mean ± std bands.

use std::collections::BTreeMap;

use crate::bounds::{BoundRow, BOUND_NAMES};
use crate::error::{Error, Result};
use crate::evaluation::{mean_std, MetricsRow};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// One curve: `mean[i] ± std[i]` at `x[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub width: f64,
    pub height: f64,
}

impl PlotSpec {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_x: false,
            width: 720.0,
            height: 440.0,
        }
    }
}

const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Short tick label without trailing zeros.
fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        return format!("{v:.0e}");
    }
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// About five round-valued ticks covering `[lo, hi]`.
fn linear_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| raw <= *s)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn padded_range(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { 0.1 * lo.abs() };
        (lo - pad, hi + pad)
    }
}

/// Renders the series as an SVG document. Non-finite points are dropped,
/// and a series whose std is zero everywhere is drawn without a band.
pub fn line_plot(spec: &PlotSpec, series: &[Series]) -> Result<String> {
    for s in series {
        if s.x.len() != s.mean.len() || s.x.len() != s.std.len() {
            return Err(Error::DimensionMismatch {
                expected: s.x.len(),
                got: s.mean.len().min(s.std.len()),
            });
        }
    }
    let keep = |x: f64, m: f64, sd: f64| {
        x.is_finite() && m.is_finite() && sd.is_finite() && (!spec.log_x || x > 0.0)
    };
    let pts: Vec<Vec<(f64, f64, f64)>> = series
        .iter()
        .map(|s| {
            (0..s.x.len())
                .filter(|&i| keep(s.x[i], s.mean[i], s.std[i]))
                .map(|i| (s.x[i], s.mean[i], s.std[i].abs()))
                .collect()
        })
        .collect();
    let all = pts.iter().flatten();
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, m, sd) in all {
        let x = if spec.log_x { x.log10() } else { x };
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(m - sd);
        y_hi = y_hi.max(m + sd);
    }
    if !x_lo.is_finite() {
        (x_lo, x_hi, y_lo, y_hi) = (0.0, 1.0, 0.0, 1.0);
    }
    let (x_lo, x_hi) = if x_hi > x_lo {
        (x_lo, x_hi)
    } else {
        padded_range(x_lo, x_hi)
    };
    let (y_lo, y_hi) = padded_range(y_lo, y_hi);

    let pw = spec.width - LEFT - RIGHT;
    let ph = spec.height - TOP - BOTTOM;
    let sx = |x: f64| {
        let x = if spec.log_x { x.log10() } else { x };
        LEFT + (x - x_lo) / (x_hi - x_lo) * pw
    };
    let sy = |y: f64| TOP + (y_hi - y) / (y_hi - y_lo) * ph;

    let mut out = String::new();
    let w = |out: &mut String, s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    w(
        &mut out,
        format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="12">"#,
            num(spec.width),
            num(spec.height),
            num(spec.width),
            num(spec.height)
        ),
    );
    w(
        &mut out,
        format!(
            r#"<rect x="0" y="0" width="{}" height="{}" fill="white"/>"#,
            num(spec.width),
            num(spec.height)
        ),
    );
    w(
        &mut out,
        format!(
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            num(LEFT + pw / 2.0),
            escape(&spec.title)
        ),
    );

    // axes and ticks
    w(
        &mut out,
        format!(
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            num(LEFT),
            num(TOP),
            num(pw),
            num(ph)
        ),
    );
    let x_ticks: Vec<f64> = if spec.log_x {
        (x_lo.ceil() as i64..=x_hi.floor() as i64)
            .map(|e| 10f64.powi(e as i32))
            .collect()
    } else {
        linear_ticks(x_lo, x_hi)
    };
    for t in x_ticks {
        let px = num(sx(t));
        w(
            &mut out,
            format!(
                r#"<line x1="{px}" y1="{}" x2="{px}" y2="{}" stroke="black"/>"#,
                num(TOP + ph),
                num(TOP + ph + 5.0)
            ),
        );
        w(
            &mut out,
            format!(
                r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#,
                num(TOP + ph + 18.0),
                tick_label(t)
            ),
        );
    }
    for t in linear_ticks(y_lo, y_hi) {
        let py = num(sy(t));
        w(
            &mut out,
            format!(
                r##"<line x1="{}" y1="{py}" x2="{}" y2="{py}" stroke="#dddddd"/>"##,
                num(LEFT),
                num(LEFT + pw)
            ),
        );
        w(
            &mut out,
            format!(
                r#"<text x="{}" y="{py}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
                num(LEFT - 6.0),
                tick_label(t)
            ),
        );
    }
    w(
        &mut out,
        format!(
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            num(LEFT + pw / 2.0),
            num(spec.height - 12.0),
            escape(&spec.x_label)
        ),
    );
    w(
        &mut out,
        format!(
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            num(TOP + ph / 2.0),
            num(TOP + ph / 2.0),
            escape(&spec.y_label)
        ),
    );

    for (i, (s, p)) in series.iter().zip(&pts).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if p.iter().any(|q| q.2 > 0.0) {
            let upper = p
                .iter()
                .map(|&(x, m, sd)| format!("{},{}", num(sx(x)), num(sy(m + sd))));
            let lower = p
                .iter()
                .rev()
                .map(|&(x, m, sd)| format!("{},{}", num(sx(x)), num(sy(m - sd))));
            let poly: Vec<String> = upper.chain(lower).collect();
            w(
                &mut out,
                format!(
                    r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                    poly.join(" ")
                ),
            );
        }
        if !p.is_empty() {
            let line: Vec<String> = p
                .iter()
                .map(|&(x, m, _)| format!("{},{}", num(sx(x)), num(sy(m))))
                .collect();
            w(
                &mut out,
                format!(
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
                    line.join(" ")
                ),
            );
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        w(
            &mut out,
            format!(
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="3"/>"#,
                num(lx),
                num(ly),
                num(lx + 18.0),
                num(ly)
            ),
        );
        w(
            &mut out,
            format!(
                r#"<text x="{}" y="{}" dominant-baseline="middle">{}</text>"#,
                num(lx + 24.0),
                num(ly),
                escape(&s.name)
            ),
        );
    }
    w(&mut out, "</svg>".into());
    Ok(out)
}

/// Columns of the metrics table that can be plotted.
pub const METRIC_COLUMNS: [&str; 5] = [
    "success_rate",
    "collision_rate",
    "spearman",
    "rel_error",
    "lipschitz_ratio",
];

fn metric_value(r: &MetricsRow, metric: &str) -> Result<f64> {
    Ok(match metric {
        "success_rate" => r.success_rate,
        "collision_rate" => r.collision_rate,
        "spearman" => r.spearman,
        "rel_error" => r.rel_error,
        "lipschitz_ratio" => r.lipschitz_ratio,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown metric column {other:?}"
            )))
        }
    })
}

/// One series per run, averaged over seeds at each logged step.
pub fn learning_curves(rows: &[MetricsRow], metric: &str) -> Result<Vec<Series>> {
    let mut runs: BTreeMap<&str, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        runs.entry(&r.run_id)
            .or_default()
            .entry(r.step)
            .or_default()
            .push(metric_value(r, metric)?);
    }
    Ok(runs
        .into_iter()
        .map(|(name, steps)| {
            let mut s = Series {
                name: name.into(),
                x: Vec::new(),
                mean: Vec::new(),
                std: Vec::new(),
            };
            for (step, vals) in steps {
                let ms = mean_std(&vals);
                s.x.push(step as f64);
                s.mean.push(ms.mean);
                s.std.push(ms.std);
            }
            s
        })
        .collect())
}

pub fn learning_curve_svg(rows: &[MetricsRow], metric: &str) -> Result<String> {
    let series = learning_curves(rows, metric)?;
    line_plot(
        &PlotSpec::new(
            &format!("{metric} (mean ± std over seeds)"),
            "training step",
            metric,
        ),
        &series,
    )
}

/// Bound values against the horizon on a log axis.
pub fn bounds_svg(rows: &[BoundRow]) -> Result<String> {
    let series: Vec<Series> = BOUND_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| Series {
            name: (*name).into(),
            x: rows.iter().map(|r| r.t).collect(),
            mean: rows.iter().map(|r| r.values[i]).collect(),
            std: vec![0.0; rows.len()],
        })
        .collect();
    let mut spec = PlotSpec::new("error-probability bounds", "horizon T", "bound");
    spec.log_x = true;
    line_plot(&spec, &series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::fig8_sweep;

    fn row(run: &str, seed: u64, step: u64, r: f64) -> MetricsRow {
        MetricsRow {
            run_id: run.into(),
            seed,
            step,
            success_rate: r,
            collision_rate: 100.0 - r,
            spearman: 0.9,
            rel_error: 0.1,
            lipschitz_ratio: 1.0,
        }
    }

    #[test]
    fn one_seed_has_no_band() {
        let rows = vec![row("a", 0, 0, 10.0), row("a", 0, 100, 40.0)];
        let svg = learning_curve_svg(&rows, "success_rate").unwrap();
        assert!(!svg.contains("<polygon"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        let two = vec![
            row("a", 0, 0, 10.0),
            row("a", 1, 0, 20.0),
            row("a", 0, 100, 40.0),
            row("a", 1, 100, 60.0),
        ];
        assert_eq!(
            learning_curve_svg(&two, "success_rate")
                .unwrap()
                .matches("<polygon")
                .count(),
            1
        );
    }

    #[test]
    fn curves_average_over_seeds() {
        let rows = vec![
            row("b", 0, 5, 10.0),
            row("a", 0, 5, 20.0),
            row("a", 1, 5, 40.0),
            row("a", 0, 1, 0.0),
        ];
        let c = learning_curves(&rows, "success_rate").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].name, "a");
        assert_eq!(c[0].x, vec![1.0, 5.0]);
        assert_eq!(c[0].mean, vec![0.0, 30.0]);
        assert!((c[0].std[1] - 200f64.sqrt()).abs() < 1e-12);
        assert!(learning_curves(&rows, "nope").is_err());
    }

    #[test]
    fn deterministic_and_escaped() {
        let rows = fig8_sweep();
        let a = bounds_svg(&rows).unwrap();
        assert_eq!(a, bounds_svg(&rows).unwrap());
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        for name in BOUND_NAMES {
            assert!(a.contains(name));
        }
        assert!(a.contains(">1000<"));
        let s = Series {
            name: "a<b".into(),
            x: vec![1.0],
            mean: vec![f64::NAN],
            std: vec![0.0],
        };
        let svg = line_plot(&PlotSpec::new("t&t", "x", "y"), &[s]).unwrap();
        assert!(svg.contains("a&lt;b") && svg.contains("t&amp;t") && !svg.contains("NaN"));
        let bad = Series {
            name: "x".into(),
            x: vec![1.0, 2.0],
            mean: vec![1.0],
            std: vec![0.0],
        };
        assert!(line_plot(&PlotSpec::new("", "", ""), &[bad]).is_err());
    }

    #[test]
    fn ticks_are_round() {
        assert_eq!(
            linear_ticks(0.0, 100.0),
            vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0]
        );
        assert_eq!(tick_label(0.30000000000000004), "0.3");
        assert_eq!(tick_label(20000.0), "20000");
    }
}
