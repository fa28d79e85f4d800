//! Binary graymaps and small SVG line plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Result};
use crate::tensor::Grid;

/// P5 bytes with maxval 255; each pixel is `floor(255·v + 0.5)`.
pub fn pgm_bytes(grid: &Grid) -> Result<Vec<u8>> {
    if let Some(v) = grid.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(format!("pixel value {v} outside [0, 1]")));
    }
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(grid.data().iter().map(|&v| (255.0 * v + 0.5).floor() as u8));
    Ok(out)
}

pub fn export_pgm(grid: &Grid, path: &Path) -> Result<()> {
    std::fs::write(path, pgm_bytes(grid)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotLabels {
    pub title: String,
    pub x: String,
    pub y: String,
}

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line plot with markers, one polyline per series, axis labels and a legend.
pub fn svg_plot(labels: &PlotLabels, series: &[Series]) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(invalid("cannot plot an empty series"));
    }
    if series
        .iter()
        .flat_map(|s| &s.points)
        .any(|(x, y)| !x.is_finite() || !y.is_finite())
    {
        return Err(invalid("plot points must be finite"));
    }
    let (x0, x1) = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = extent(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        WIDTH / 2.0,
        escape(&labels.title)
    );
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#
    );
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="{anchor}">{}</text>"#,
            px(v),
            b + 14.0,
            fmt_tick(v)
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            l - 4.0,
            py(v) + 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0,
        escape(&labels.x)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        HEIGHT / 2.0,
        escape(&labels.y)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        for &(x, y) in &ser.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}"/>"#,
                px(x),
                py(y)
            );
        }
        let ly = t + 4.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#,
            r,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn fmt_tick(v: f64) -> String {
    crate::eval::sweep::format_sig6((v * 1e4).round() / 1e4)
}

pub fn export_svg_plot(path: &Path, labels: &PlotLabels, series: &[Series]) -> Result<()> {
    std::fs::write(path, svg_plot(labels, series)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> PlotLabels {
        PlotLabels {
            title: "t & cos".into(),
            x: "t".into(),
            y: "cosine_mean".into(),
        }
    }

    #[test]
    fn half_grey_rounds_up() {
        let bytes = pgm_bytes(&Grid::filled(3, 4, 0.5)).unwrap();
        let header = b"P5\n4 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|&b| b == 128));
        assert_eq!(bytes.len(), header.len() + 12);
    }

    #[test]
    fn pgm_extremes_and_range() {
        let g = Grid::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(pgm_bytes(&g).unwrap().ends_with(&[0, 255]));
        assert!(pgm_bytes(&Grid::filled(1, 1, 1.01)).is_err());
        assert!(pgm_bytes(&Grid::filled(1, 1, f64::NAN)).is_err());
    }

    #[test]
    fn svg_is_deterministic_and_labelled() {
        let series = vec![Series {
            name: "fg".into(),
            points: vec![(1.0, 0.2), (2.0, -0.4), (3.0, 0.9)],
        }];
        let a = svg_plot(&labels(), &series).unwrap();
        assert_eq!(a, svg_plot(&labels(), &series).unwrap());
        assert!(a.contains("cosine_mean") && a.contains("t &amp; cos") && a.contains("<polyline"));
        let flat = vec![Series {
            name: "c".into(),
            points: vec![(1.0, 1.0), (2.0, 1.0)],
        }];
        assert!(svg_plot(&labels(), &flat).unwrap().contains("<polyline"));
    }

    #[test]
    fn empty_series_rejected() {
        assert!(svg_plot(&labels(), &[]).is_err());
        assert!(svg_plot(
            &labels(),
            &[Series {
                name: "x".into(),
                points: vec![]
            }]
        )
        .is_err());
    }
}
