//! Trajectory overlay plots as standalone SVG files: observed tracks in
//! light gray on a dark background, target ground truth in red, and one
//! distinct color per estimation method, with frame markers and a legend.

use std::fmt::Write as _;
use std::path::Path;

const BACKGROUND: &str = "#10151b";
const OBSERVED_COLOR: &str = "#d5d9dd";
const GT_COLOR: &str = "#e53935";
const METHOD_COLORS: [&str; 6] = [
    "#ffd54f", "#4dd0e1", "#ab47bc", "#9ccc65", "#ff8a65", "#64b5f6",
];

/// Tracks of one rendered clip.
pub struct SvgScene<'a> {
    pub width: f64,
    pub height: f64,
    pub observed: &'a [Vec<(f64, f64)>],
    pub target_gt: &'a [Vec<(f64, f64)>],
    /// Per method: label and one estimated track per target.
    pub estimates: &'a [(String, Vec<Vec<(f64, f64)>>)],
}

fn polyline(out: &mut String, points: &[(f64, f64)], color: &str, width: f64, dashed: bool) {
    let mut coords = String::new();
    for (i, (x, y)) in points.iter().enumerate() {
        if i > 0 {
            coords.push(' ');
        }
        write!(coords, "{x:.2},{y:.2}").expect("string write");
    }
    let dash = if dashed { " stroke-dasharray=\"6,4\"" } else { "" };
    writeln!(
        out,
        "  <polyline points=\"{coords}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width:.1}\"{dash}/>"
    )
    .expect("string write");
    for &(x, y) in points {
        writeln!(
            out,
            "  <circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2.5\" fill=\"{color}\"/>"
        )
        .expect("string write");
    }
}

/// Render the scene to SVG markup.
pub fn trajectory_svg(scene: &SvgScene) -> String {
    let mut out = String::with_capacity(1 << 14);
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0:.0}\" height=\"{1:.0}\" viewBox=\"0 0 {0:.2} {1:.2}\">",
        scene.width, scene.height
    )
    .expect("string write");
    writeln!(
        out,
        "  <rect x=\"0\" y=\"0\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{BACKGROUND}\"/>",
        scene.width, scene.height
    )
    .expect("string write");

    for track in scene.observed {
        polyline(&mut out, track, OBSERVED_COLOR, 1.5, false);
    }
    for track in scene.target_gt {
        polyline(&mut out, track, GT_COLOR, 2.0, false);
    }
    for (i, (_, tracks)) in scene.estimates.iter().enumerate() {
        let color = METHOD_COLORS[i % METHOD_COLORS.len()];
        for track in tracks {
            polyline(&mut out, track, color, 2.0, true);
        }
    }

    // Legend.
    let mut y = 18.0;
    let legend_entry = |out: &mut String, color: &str, label: &str, y: f64| {
        writeln!(
            out,
            "  <rect x=\"10\" y=\"{:.1}\" width=\"14\" height=\"4\" fill=\"{color}\"/>",
            y - 4.0
        )
        .expect("string write");
        writeln!(
            out,
            "  <text x=\"30\" y=\"{y:.1}\" fill=\"#eceff1\" font-family=\"monospace\" font-size=\"12\">{label}</text>"
        )
        .expect("string write");
    };
    legend_entry(&mut out, OBSERVED_COLOR, "observed", y);
    y += 16.0;
    legend_entry(&mut out, GT_COLOR, "target ground truth", y);
    for (i, (label, _)) in scene.estimates.iter().enumerate() {
        y += 16.0;
        legend_entry(&mut out, METHOD_COLORS[i % METHOD_COLORS.len()], label, y);
    }
    out.push_str("</svg>\n");
    out
}

pub fn write_svg(path: &Path, scene: &SvgScene) -> std::io::Result<()> {
    std::fs::write(path, trajectory_svg(scene))
}
