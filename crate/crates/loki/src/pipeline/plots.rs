//! SVG plot generation from the CSV exports. Hand-rolled, dependency-free
//! and deterministic: fixed canvas, fixed precision, no timestamps.

use std::path::Path;

use crate::{LokiError, Result};

use super::artifacts::files;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 48.0;

/// Color per label/series index, cycled.
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

/// Parsed CSV with a header row.
struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn read(path: &Path) -> Result<Csv> {
        if !path.is_file() {
            return Err(LokiError::MissingArtifact(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| LokiError::Data(format!("{} is empty", path.display())))?
            .split(',')
            .map(str::to_string)
            .collect();
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect();
        Ok(Csv { header, rows })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LokiError::Data(format!("csv lacks a `{name}` column")))
    }

    fn floats(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.column(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(record, row)| {
                row.get(idx)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| LokiError::Parse {
                        record,
                        message: format!("bad `{name}` value"),
                    })
            })
            .collect()
    }
}

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Maps data coordinates to the pixel canvas (y grows upward in data space).
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{:.2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" \
         text-anchor=\"middle\">{title}</text>\n",
        WIDTH / 2.0
    )
}

fn svg_axes(frame: &Frame) -> String {
    format!(
        "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" \
         stroke=\"#333333\" stroke-width=\"1\"/>\n\
         <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"start\">{:.3}</text>\n\
         <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
         text-anchor=\"start\">{:.3}</text>\n",
        MARGIN,
        MARGIN,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN,
        4.0,
        HEIGHT - MARGIN,
        frame.y0,
        4.0,
        MARGIN + 10.0,
        frame.y1,
    )
}

fn svg_polyline(frame: &Frame, ys: &[f64], stroke: &str) -> String {
    let points: Vec<String> = ys
        .iter()
        .enumerate()
        .filter(|(_, y)| y.is_finite())
        .map(|(t, &y)| format!("{:.2},{:.2}", frame.px(t as f64), frame.py(y)))
        .collect();
    format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.5\"/>\n",
        points.join(" ")
    )
}

fn svg_vlines(frame: &Frame, xs: &[f64], stroke: &str, dash: &str) -> String {
    let mut out = String::new();
    for &x in xs {
        out.push_str(&format!(
            "<line x1=\"{0:.2}\" y1=\"{1:.2}\" x2=\"{0:.2}\" y2=\"{2:.2}\" stroke=\"{stroke}\" \
             stroke-width=\"1\" stroke-dasharray=\"{dash}\"/>\n",
            frame.px(x),
            MARGIN,
            HEIGHT - MARGIN,
        ));
    }
    out
}

fn svg_legend(entries: &[(&str, &str)]) -> String {
    let mut out = String::new();
    for (i, (name, stroke)) in entries.iter().enumerate() {
        let y = 40.0 + 16.0 * i as f64;
        out.push_str(&format!(
            "<line x1=\"{0:.2}\" y1=\"{y:.2}\" x2=\"{1:.2}\" y2=\"{y:.2}\" stroke=\"{stroke}\" \
             stroke-width=\"2\"/>\n\
             <text x=\"{2:.2}\" y=\"{3:.2}\" font-family=\"sans-serif\" font-size=\"11\">{name}</text>\n",
            WIDTH - MARGIN - 130.0,
            WIDTH - MARGIN - 110.0,
            WIDTH - MARGIN - 104.0,
            y + 4.0,
        ));
    }
    out
}

/// Line chart of named series over the step index, with vertical markers.
fn line_chart(
    title: &str,
    series: &[(&str, &str, &[f64])],
    vlines: &[(&str, &str, Vec<f64>)],
) -> String {
    let n = series.iter().map(|(_, _, ys)| ys.len()).max().unwrap_or(1);
    let (y0, y1) = finite_range(series.iter().flat_map(|(_, _, ys)| ys.iter().copied()));
    let frame = Frame { x0: 0.0, x1: (n.max(2) - 1) as f64, y0, y1 };
    let mut svg = svg_open(title);
    svg.push_str(&svg_axes(&frame));
    for (name, stroke, xs) in vlines {
        let _ = name;
        svg.push_str(&svg_vlines(&frame, xs, stroke, "4 3"));
    }
    for (_, stroke, ys) in series {
        svg.push_str(&svg_polyline(&frame, ys, stroke));
    }
    let legend: Vec<(&str, &str)> = series
        .iter()
        .map(|&(name, stroke, _)| (name, stroke))
        .chain(vlines.iter().map(|(name, stroke, _)| (*name, *stroke)))
        .collect();
    svg.push_str(&svg_legend(&legend));
    svg.push_str("</svg>\n");
    svg
}

/// Scatter plot of labeled 2-D points plus centroid markers.
fn scatter_chart(
    title: &str,
    points: &[(f64, f64, usize)],
    centroids: &[(usize, f64, f64)],
) -> String {
    let (x0, x1) = finite_range(
        points.iter().map(|p| p.0).chain(centroids.iter().map(|c| c.1)),
    );
    let (y0, y1) = finite_range(
        points.iter().map(|p| p.1).chain(centroids.iter().map(|c| c.2)),
    );
    let frame = Frame { x0, x1, y0, y1 };
    let mut svg = svg_open(title);
    svg.push_str(&svg_axes(&frame));
    for &(x, y, label) in points {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"/>\n",
            frame.px(x),
            frame.py(y),
            color(label)
        ));
    }
    for &(label, x, y) in centroids {
        svg.push_str(&format!(
            "<circle cx=\"{0:.2}\" cy=\"{1:.2}\" r=\"7\" fill=\"none\" stroke=\"{2}\" \
             stroke-width=\"2\"/>\n\
             <text x=\"{3:.2}\" y=\"{4:.2}\" font-family=\"sans-serif\" font-size=\"11\">k{label}</text>\n",
            frame.px(x),
            frame.py(y),
            color(label),
            frame.px(x) + 9.0,
            frame.py(y) + 4.0,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn marks(csv: &Csv, flag_column: &str) -> Result<Vec<f64>> {
    let t = csv.floats("t")?;
    let flags = csv.floats(flag_column)?;
    Ok(t.into_iter().zip(flags).filter(|&(_, f)| f > 0.5).map(|(t, _)| t).collect())
}

/// Renders every available CSV export as an SVG under `plots/`.
pub fn stage_plots(out: &Path) -> Result<()> {
    let csv = out.join(files::CSV_DIR);
    let plot_dir = out.join(files::PLOT_DIR);
    std::fs::create_dir_all(&plot_dir)?;
    let mut written = 0usize;

    for task in 0.. {
        let path = csv.join(format!("entropy_task{task}.csv"));
        if !path.is_file() {
            break;
        }
        let table = Csv::read(&path)?;
        let entropy = table.floats("entropy")?;
        let boundaries = marks(&table, "boundary")?;
        let svg = line_chart(
            &format!("assignment entropy, task {task}"),
            &[("entropy", color(0), &entropy)],
            &[("boundary", "#d62728", boundaries)],
        );
        std::fs::write(plot_dir.join(format!("entropy_task{task}.svg")), svg)?;
        written += 1;
    }

    for task in 0.. {
        let path = csv.join(format!("error_curve_task{task}.csv"));
        if !path.is_file() {
            break;
        }
        let table = Csv::read(&path)?;
        let error = table.floats("error")?;
        let smoothed = table.floats("smoothed")?;
        let svg = line_chart(
            &format!("reconstruction error, task {task}"),
            &[("error", color(0), &error), ("smoothed", color(1), &smoothed)],
            &[
                ("macro boundary", "#333333", marks(&table, "hard")?),
                ("candidate", "#aaaaaa", marks(&table, "candidate")?),
                ("refined", "#d62728", marks(&table, "refined")?),
            ],
        );
        std::fs::write(plot_dir.join(format!("error_curve_task{task}.svg")), svg)?;
        written += 1;
    }

    let pca_path = csv.join("pca.csv");
    if pca_path.is_file() {
        let table = Csv::read(&pca_path)?;
        let kind = table.column("kind")?;
        let label = table.column("label")?;
        let pc1 = table.floats("pc1")?;
        let pc2 = table.floats("pc2")?;
        let mut points = Vec::new();
        let mut centroids = Vec::new();
        for (i, row) in table.rows.iter().enumerate() {
            let l: usize = row[label]
                .parse()
                .map_err(|_| LokiError::Parse { record: i, message: "bad label".into() })?;
            match row[kind].as_str() {
                "point" => points.push((pc1[i], pc2[i], l)),
                "centroid" => centroids.push((l, pc1[i], pc2[i])),
                other => {
                    return Err(LokiError::Parse {
                        record: i,
                        message: format!("unknown kind `{other}`"),
                    })
                }
            }
        }
        let svg = scatter_chart("segment embeddings (pca)", &points, &centroids);
        std::fs::write(plot_dir.join("pca.svg"), svg)?;
        written += 1;
    }

    if written == 0 {
        return Err(LokiError::MissingArtifact(format!(
            "no csv exports under {} — run the pipeline first",
            csv.display()
        )));
    }
    eprintln!("[plots] {written} svg files");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_valid_svg_with_all_elements() {
        let ys = [0.0, 1.0, 0.5, 2.0, 1.5];
        let svg = line_chart(
            "demo",
            &[("a", "#1f77b4", &ys)],
            &[("marks", "#d62728", vec![2.0])],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.contains("demo"));
    }

    #[test]
    fn scatter_chart_draws_points_and_centroids() {
        let svg = scatter_chart(
            "s",
            &[(0.0, 0.0, 0), (1.0, 1.0, 1)],
            &[(0, 0.1, 0.1)],
        );
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("k0"));
    }

    #[test]
    fn plots_from_csv_fixtures() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join(files::CSV_DIR);
        std::fs::create_dir_all(&csv).unwrap();
        std::fs::write(
            csv.join("entropy_task0.csv"),
            "t,entropy,log_entropy,boundary,tag\n0,1.0,0.0,0,intrinsic\n1,0.5,-0.7,1,extrinsic\n",
        )
        .unwrap();
        std::fs::write(
            csv.join("error_curve_task0.csv"),
            "t,error,smoothed,d2,hard,candidate,refined\n0,1.0,1.0,0.0,0,0,0\n1,2.0,1.5,0.1,1,0,0\n",
        )
        .unwrap();
        std::fs::write(
            csv.join("pca.csv"),
            "kind,label,pc1,pc2\npoint,0,0.0,0.1\npoint,1,1.0,0.2\ncentroid,0,0.05,0.1\n",
        )
        .unwrap();
        stage_plots(dir.path()).unwrap();
        let plots = dir.path().join(files::PLOT_DIR);
        assert!(plots.join("entropy_task0.svg").is_file());
        assert!(plots.join("error_curve_task0.svg").is_file());
        assert!(plots.join("pca.svg").is_file());
        // Deterministic output: a second run produces identical bytes.
        let before = std::fs::read(plots.join("pca.svg")).unwrap();
        stage_plots(dir.path()).unwrap();
        assert_eq!(std::fs::read(plots.join("pca.svg")).unwrap(), before);
    }

    #[test]
    fn plots_without_csvs_is_a_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            stage_plots(dir.path()),
            Err(LokiError::MissingArtifact(_))
        ));
    }
}
