//! Static SVG trajectory plots: the ground-truth polyline plus one polyline
//! and point set per prediction method, on an equal-aspect meter grid.

use crate::error::Result;
use crate::geodata::{gps_to_utm, GpsPoint};

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// A named trajectory in UTM meters.
#[derive(Debug, Clone)]
pub struct PlotSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl PlotSeries {
    pub fn from_gps(label: &str, gps: &[(f64, f64)]) -> Result<Self> {
        let points = gps
            .iter()
            .map(|&(lat, lon)| {
                let u = gps_to_utm(GpsPoint::new(lat, lon)?)?;
                Ok((u.easting, u.northing))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { label: label.to_string(), points })
    }
}

/// Render truth plus predictions into a self-contained SVG document.
pub fn plot_svg(truth: &PlotSeries, predictions: &[PlotSeries]) -> String {
    let all_points = || {
        truth
            .points
            .iter()
            .chain(predictions.iter().flat_map(|p| p.points.iter()))
    };
    let min_x = all_points().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = all_points().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = all_points().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = all_points().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let span = (max_x - min_x).max(max_y - min_y).max(1.0);
    let margin = 0.06 * span;
    let scale = 720.0 / (span + 2.0 * margin);
    let width = 760.0;
    let height = 760.0 + 24.0 * (predictions.len() + 1) as f64;

    // Equal aspect; SVG y runs downward, northing upward.
    let tx = |x: f64| (x - min_x + margin) * scale + 20.0;
    let ty = |y: f64| 740.0 - (y - min_y + margin) * scale;

    let polyline = |pts: &[(f64, f64)], color: &str, width: f64, dash: &str| -> String {
        if pts.len() < 2 {
            return String::new();
        }
        let coords: Vec<String> =
            pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", tx(x), ty(y))).collect();
        format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"{}\"{} />\n",
            coords.join(" "),
            color,
            width,
            if dash.is_empty() { String::new() } else { format!(" stroke-dasharray=\"{}\"", dash) }
        )
    };
    let dots = |pts: &[(f64, f64)], color: &str, r: f64| -> String {
        pts.iter()
            .map(|&(x, y)| {
                format!(
                    "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{}\" fill=\"{}\" />\n",
                    tx(x),
                    ty(y),
                    r,
                    color
                )
            })
            .collect()
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
        w = width,
        h = height
    ));
    svg.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"#fafafa\" />\n");
    svg.push_str(&format!("  <!-- scale: {:.4} px/m -->\n", scale));

    svg.push_str(&polyline(&truth.points, "#333333", 2.5, ""));
    svg.push_str(&dots(&truth.points, "#333333", 3.0));
    for (i, series) in predictions.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        svg.push_str(&polyline(&series.points, color, 1.8, "6,3"));
        svg.push_str(&dots(&series.points, color, 2.5));
    }

    // Legend.
    let mut ly = 764.0;
    svg.push_str(&format!(
        "  <text x=\"24\" y=\"{:.0}\" font-family=\"monospace\" font-size=\"14\" fill=\"#333333\">{} (truth)</text>\n",
        ly, xml_escape(&truth.label)
    ));
    for (i, series) in predictions.iter().enumerate() {
        ly += 24.0;
        svg.push_str(&format!(
            "  <text x=\"24\" y=\"{:.0}\" font-family=\"monospace\" font-size=\"14\" fill=\"{}\">{}</text>\n",
            ly,
            PALETTE[i % PALETTE.len()],
            xml_escape(&series.label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_plot(
    path: &std::path::Path,
    truth: &PlotSeries,
    predictions: &[PlotSeries],
) -> Result<()> {
    std::fs::write(path, plot_svg(truth, predictions))?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Pull a named series' plotted polyline back out of the SVG for geometric
/// assertions (screen coordinates; aspect is preserved so ratios carry over).
pub fn parse_polyline(svg: &str, index: usize) -> Option<Vec<(f64, f64)>> {
    svg.lines()
        .filter(|l| l.trim_start().starts_with("<polyline"))
        .nth(index)
        .and_then(|line| {
            let start = line.find("points=\"")? + 8;
            let end = line[start..].find('"')? + start;
            let pts = line[start..end]
                .split_whitespace()
                .filter_map(|pair| {
                    let (a, b) = pair.split_once(',')?;
                    Some((a.parse().ok()?, b.parse().ok()?))
                })
                .collect();
            Some(pts)
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(label: &str, pts: &[(f64, f64)]) -> PlotSeries {
        PlotSeries { label: label.into(), points: pts.to_vec() }
    }

    /// Minimal well-formedness check: tags balance and attributes are quoted.
    fn assert_well_formed_xml(doc: &str) {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = doc;
        while let Some(open) = rest.find('<') {
            let close = rest[open..].find('>').map(|c| open + c).expect("unclosed tag");
            let tag = &rest[open + 1..close];
            rest = &rest[close + 1..];
            if let Some(name) = tag.strip_prefix('/') {
                let top = stack.pop().unwrap_or_else(|| panic!("stray </{}>", name));
                assert_eq!(top, name, "mismatched closing tag");
            } else if !tag.ends_with('/') && !tag.starts_with('!') && !tag.starts_with('?') {
                let name = tag.split_whitespace().next().unwrap().to_string();
                stack.push(name);
            }
            // Attribute quoting: an even number of quotes per tag.
            assert_eq!(tag.matches('"').count() % 2, 0, "unbalanced quotes in <{}>", tag);
        }
        assert!(stack.is_empty(), "unclosed tags: {:?}", stack);
    }

    #[test]
    fn truth_only_plot_is_valid() {
        let truth = series("truth", &[(0.0, 0.0), (10.0, 5.0), (20.0, 8.0)]);
        let svg = plot_svg(&truth, &[]);
        assert_well_formed_xml(&svg);
        assert!(svg.contains("truth"));
        let pts = parse_polyline(&svg, 0).unwrap();
        assert_eq!(pts.len(), 3);
    }

    #[test]
    fn jumpy_series_shows_a_long_segment_smooth_one_does_not() {
        let base: Vec<(f64, f64)> = (0..8).map(|i| (i as f64 * 20.0, 0.0)).collect();
        let truth = series("truth", &base);
        let mut jumpy_pts = base.clone();
        jumpy_pts[4] = (900.0, 700.0);
        let jumpy = series("nn", &jumpy_pts);
        let smooth = series("dp", &base.iter().map(|&(x, y)| (x, y + 2.0)).collect::<Vec<_>>());
        let svg = plot_svg(&truth, &[jumpy, smooth]);
        assert_well_formed_xml(&svg);

        let seg_lengths = |pts: &[(f64, f64)]| -> Vec<f64> {
            pts.windows(2)
                .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
                .collect()
        };
        let median = |mut v: Vec<f64>| -> f64 {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        // Polyline 0 is truth, 1 is nn, 2 is dp.
        let nn = seg_lengths(&parse_polyline(&svg, 1).unwrap());
        let dp = seg_lengths(&parse_polyline(&svg, 2).unwrap());
        let nn_max = nn.iter().cloned().fold(0.0, f64::max);
        let dp_max = dp.iter().cloned().fold(0.0, f64::max);
        assert!(
            nn_max > 3.0 * median(nn.clone()),
            "nn jump not visible: max {} vs median {}",
            nn_max,
            median(nn)
        );
        assert!(dp_max <= 3.0 * median(dp.clone()), "dp should be smooth");
    }

    #[test]
    fn gps_series_projects_through_utm() {
        let s = PlotSeries::from_gps("t", &[(40.0, -74.0), (40.001, -74.0)]).unwrap();
        let dy = s.points[1].1 - s.points[0].1;
        assert!((dy - 111.0).abs() < 1.0, "0.001 deg lat is about 111 m, got {}", dy);
    }
}
