//! RMSE-versus-depth-range plots from per-range CSVs.

use std::fmt::Write as _;

use redt_core::losses_metrics::{RangeRmse, RANGE_CSV_HEADER};

use crate::error::{AppError, AppResult};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const LEGEND_W: f64 = 150.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct RangeSeries {
    pub label: String,
    pub buckets: Vec<RangeRmse>,
}

pub fn parse_range_csv(text: &str) -> AppResult<Vec<RangeRmse>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RANGE_CSV_HEADER) {
        return Err(AppError::Usage(format!("expected header `{RANGE_CSV_HEADER}`")));
    }
    let bad = |n: usize, line: &str| AppError::Usage(format!("line {}: cannot parse `{line}`", n + 2));
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 4 {
                return Err(bad(n, line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n, line));
            let rmse = if f[2].is_empty() { None } else { Some(num(f[2])?) };
            Ok(RangeRmse { lo: num(f[0])?, hi: num(f[1])?, rmse, count: f[3].parse().map_err(|_| bad(n, line))? })
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Standalone SVG with one polyline per run, broken wherever a bucket is
/// empty.
pub fn render_svg(series: &[RangeSeries]) -> AppResult<String> {
    let points: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.buckets.iter().filter_map(|b| b.rmse.map(|r| (0.5 * (b.lo + b.hi), r))))
        .collect();
    if series.is_empty() || series.iter().all(|s| s.buckets.is_empty()) {
        return Err(AppError::Usage("nothing to plot".into()));
    }
    let x_lo = series.iter().flat_map(|s| s.buckets.iter().map(|b| b.lo)).fold(f64::INFINITY, f64::min);
    let x_hi = series.iter().flat_map(|s| s.buckets.iter().map(|b| b.hi)).fold(f64::NEG_INFINITY, f64::max);
    let y_hi = points.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-9) * 1.1;
    let plot_w = WIDTH - 2.0 * MARGIN - LEGEND_W;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo).max(1e-12) * plot_w;
    let sy = |y: f64| HEIGHT - MARGIN - y / y_hi * plot_h;

    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, MARGIN + plot_w, MARGIN);
    writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#).unwrap();
    writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
    for i in 0..=4 {
        let xv = x_lo + (x_hi - x_lo) * i as f64 / 4.0;
        let yv = y_hi * i as f64 / 4.0;
        writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.1}</text>"#, sx(xv), y0 + 16.0).unwrap();
        writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.2}</text>"#, x0 - 6.0, sy(yv) + 4.0).unwrap();
    }
    writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">depth range (m)</text>"#, MARGIN + plot_w / 2.0, HEIGHT - 15.0).unwrap();
    writeln!(svg, r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">RMSE (m)</text>"#, HEIGHT / 2.0, HEIGHT / 2.0).unwrap();

    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut segment: Vec<String> = Vec::new();
        let flush = |segment: &mut Vec<String>, svg: &mut String| {
            if !segment.is_empty() {
                writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, segment.join(" ")).unwrap();
                segment.clear();
            }
        };
        for b in &s.buckets {
            match b.rmse {
                Some(r) => segment.push(format!("{:.2},{:.2}", sx(0.5 * (b.lo + b.hi)), sy(r))),
                None => flush(&mut segment, &mut svg),
            }
        }
        flush(&mut segment, &mut svg);
        let ly = MARGIN + 18.0 * i as f64;
        let lx = WIDTH - MARGIN - LEGEND_W + 20.0;
        writeln!(
            svg,
            r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn text_table(series: &[RangeSeries]) -> String {
    let mut out = String::new();
    for s in series {
        writeln!(out, "{}", s.label).unwrap();
        for b in &s.buckets {
            let v = b.rmse.map_or_else(|| "-".to_string(), |r| format!("{r:.4}"));
            writeln!(out, "  [{:>6.2}, {:>6.2})  rmse {v:>8}  n {}", b.lo, b.hi, b.count).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(label: &str, rmse: &[Option<f64>]) -> RangeSeries {
        RangeSeries {
            label: label.into(),
            buckets: rmse.iter().enumerate().map(|(i, &r)| RangeRmse { lo: 5.0 * i as f64, hi: 5.0 * (i + 1) as f64, rmse: r, count: r.map_or(0, |_| 10) }).collect(),
        }
    }

    #[test]
    fn one_run_two_buckets() {
        let svg = render_svg(&[series("a", &[Some(1.0), Some(2.0)])]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), 2);
    }

    #[test]
    fn legend_per_run_and_gaps() {
        let svg = render_svg(&[series("on", &[Some(1.0), None, Some(2.0)]), series("off", &[Some(1.5), Some(1.0), Some(2.5)])]).unwrap();
        assert_eq!(svg.matches("class=\"legend\"").count(), 2);
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(render_svg(&[]).is_err());
    }

    #[test]
    fn parses_empty_bucket() {
        let b = parse_range_csv("range_lo,range_hi,rmse,count\n0,10,1.5,4\n10,20,,0\n").unwrap();
        assert_eq!(b[1].rmse, None);
        assert_eq!(b[0].rmse, Some(1.5));
        assert!(parse_range_csv("lo,hi\n").is_err());
    }
}
