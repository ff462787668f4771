//! Minimal deterministic SVG line charts for benchmark results.
//!
//! Everything is rendered with fixed-precision formatting and no clock,
//! RNG, or platform input, so the same rows always produce byte-identical
//! output — which the repeatability checks rely on.

use std::path::Path;

use crate::bench::BenchRow;
use crate::error::{Result, SimError};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 76.0;
const MARGIN_RIGHT: f64 = 180.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 56.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Plot x on a log2 axis (chosen automatically by [`Chart::from_rows`]
    /// when the x values span a wide range).
    pub log_x: bool,
    pub series: Vec<Series>,
}

impl Chart {
    /// Modeled time per call against the swept quantity, one series per
    /// scheme. Sweeps of message size use `msg_elems` on x; a sweep where
    /// every row has the same message size (the per-node-width experiment)
    /// uses total ranks instead.
    pub fn from_rows(rows: &[BenchRow]) -> Chart {
        let mut msg_sizes: Vec<usize> = rows.iter().map(|r| r.msg_elems).collect();
        msg_sizes.sort_unstable();
        msg_sizes.dedup();
        let by_ranks = msg_sizes.len() <= 1 && rows.len() > 1;
        let x_label = if by_ranks {
            "total ranks"
        } else {
            "message elements per rank"
        };
        let mut series: Vec<Series> = Vec::new();
        for row in rows {
            let x = if by_ranks {
                row.total_ranks as f64
            } else {
                row.msg_elems as f64
            };
            let point = (x, row.modeled_time);
            match series.iter_mut().find(|s| s.name == row.scheme) {
                Some(s) => s.points.push(point),
                None => series.push(Series {
                    name: row.scheme.clone(),
                    points: vec![point],
                }),
            }
        }
        for s in &mut series {
            s.points
                .sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        }
        let xs: Vec<f64> = series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0))
            .collect();
        let spread_is_wide = match (
            xs.iter().copied().fold(f64::INFINITY, f64::min),
            xs.iter().copied().fold(0.0f64, f64::max),
        ) {
            (lo, hi) if lo.is_finite() && lo > 0.0 => hi / lo >= 16.0,
            _ => false,
        };
        let title = rows
            .first()
            .map(|r| format!("{} experiment", r.experiment))
            .unwrap_or_else(|| "benchmark".to_string());
        Chart {
            title,
            x_label: x_label.to_string(),
            y_label: "modeled time per call".to_string(),
            log_x: spread_is_wide,
            series,
        }
    }

    pub fn to_svg(&self) -> String {
        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
             viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
        ));
        svg.push_str(&format!(
            "  <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
            (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0,
            escape(&self.title)
        ));
        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        // axes
        svg.push_str(&format!(
            "  <line x1=\"{MARGIN_LEFT}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            MARGIN_TOP + plot_h,
            MARGIN_LEFT + plot_w,
            MARGIN_TOP + plot_h
        ));
        svg.push_str(&format!(
            "  <line x1=\"{MARGIN_LEFT}\" y1=\"{MARGIN_TOP}\" x2=\"{MARGIN_LEFT}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            MARGIN_TOP + plot_h
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_LEFT + plot_w / 2.0,
            HEIGHT - 14.0,
            escape(&self.x_label)
        ));
        svg.push_str(&format!(
            "  <text x=\"18\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" \
             transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
            MARGIN_TOP + plot_h / 2.0,
            MARGIN_TOP + plot_h / 2.0,
            escape(&self.y_label)
        ));

        let points: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .collect();
        if points.is_empty() {
            svg.push_str(&format!(
                "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\" \
                 fill=\"#666666\">no data</text>\n",
                MARGIN_LEFT + plot_w / 2.0,
                MARGIN_TOP + plot_h / 2.0
            ));
            svg.push_str("</svg>\n");
            return svg;
        }

        let tx = |x: f64| if self.log_x { x.log2() } else { x };
        let x_lo = points.iter().map(|p| tx(p.0)).fold(f64::INFINITY, f64::min);
        let x_hi = points
            .iter()
            .map(|p| tx(p.0))
            .fold(f64::NEG_INFINITY, f64::max);
        let x_span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
        let y_hi = points.iter().map(|p| p.1).fold(0.0f64, f64::max);
        let y_hi = if y_hi > 0.0 { y_hi * 1.05 } else { 1.0 };
        let px = |x: f64| MARGIN_LEFT + (tx(x) - x_lo) / x_span * plot_w;
        let py = |y: f64| MARGIN_TOP + plot_h - y / y_hi * plot_h;

        // y ticks: five even divisions
        for i in 0..=4 {
            let v = y_hi * i as f64 / 4.0;
            let y = py(v);
            svg.push_str(&format!(
                "  <line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n",
                MARGIN_LEFT,
                MARGIN_LEFT + plot_w
            ));
            svg.push_str(&format!(
                "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
                MARGIN_LEFT - 6.0,
                y + 4.0,
                format_tick(v)
            ));
        }
        // x ticks at distinct data positions, thinned to at most twelve
        let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let step = xs.len().div_ceil(12);
        for x in xs.iter().step_by(step.max(1)) {
            let sx = px(*x);
            svg.push_str(&format!(
                "  <line x1=\"{sx:.1}\" y1=\"{:.1}\" x2=\"{sx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
                MARGIN_TOP + plot_h,
                MARGIN_TOP + plot_h + 5.0
            ));
            svg.push_str(&format!(
                "  <text x=\"{sx:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
                MARGIN_TOP + plot_h + 18.0,
                format_tick(*x)
            ));
        }
        // series polylines and legend
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            if pts.len() == 1 {
                let (x, y) = s.points[0];
                svg.push_str(&format!(
                    "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                    px(x),
                    py(y)
                ));
            } else {
                svg.push_str(&format!(
                    "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
                    pts.join(" ")
                ));
            }
            let ly = MARGIN_TOP + 16.0 * i as f64;
            let lx = WIDTH - MARGIN_RIGHT + 12.0;
            svg.push_str(&format!(
                "  <line x1=\"{lx:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                ly + 5.0,
                lx + 18.0,
                ly + 5.0
            ));
            svg.push_str(&format!(
                "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{}</text>\n",
                lx + 24.0,
                ly + 9.0,
                escape(&s.name)
            ));
        }
        svg.push_str("</svg>\n");
        svg
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_svg())
            .map_err(|e| SimError::Io(format!("cannot write {}: {e}", path.display())))
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Short deterministic tick label: integers as integers, everything else
/// with enough digits to tell ticks apart.
fn format_tick(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e12 {
        format!("{}", v as i64)
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{run_plan, BenchPlan, Experiment};
    use crate::sim::CostModel;

    fn rows() -> Vec<BenchRow> {
        run_plan(&BenchPlan {
            experiment: Experiment::SingleNode { ranks: 4 },
            schemes: Vec::new(),
            msg_elems: vec![8, 128, 2048],
            cost: CostModel::default(),
            seed: 2,
            reps: 1,
        })
        .unwrap()
    }

    #[test]
    fn one_polyline_per_scheme_with_legend() {
        let chart = Chart::from_rows(&rows());
        assert_eq!(chart.series.len(), 4);
        let svg = chart.to_svg();
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains("Hy_Allgather"));
        assert!(svg.contains("Allgather_RecDbl"));
        assert!(svg.contains("message elements per rank"));
    }

    #[test]
    fn wide_sweeps_pick_a_log_axis() {
        let chart = Chart::from_rows(&rows());
        assert!(chart.log_x, "8..2048 spans more than 16x");
        let narrow: Vec<BenchRow> = rows().into_iter().filter(|r| r.msg_elems == 8).collect();
        assert!(!Chart::from_rows(&narrow).log_x);
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = Chart::from_rows(&rows()).to_svg();
        let b = Chart::from_rows(&rows()).to_svg();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_input_renders_axes_and_a_note() {
        let chart = Chart::from_rows(&[]);
        let svg = chart.to_svg();
        assert!(svg.contains("no data"));
        assert!(svg.contains("<line"), "axes are still drawn");
        assert!(!svg.contains("<polyline"));
    }

    #[test]
    fn single_point_series_render_as_markers() {
        let chart = Chart {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            log_x: false,
            series: vec![Series {
                name: "only".into(),
                points: vec![(1.0, 2.0)],
            }],
        };
        let svg = chart.to_svg();
        assert!(svg.contains("<circle"));
        assert!(!svg.contains("<polyline"));
    }
}
