//! `export-curves`: SVG plots and a long-format CSV from a metrics file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use plotters::prelude::*;

const LOSSES: [&str; 5] = ["l_cs", "l_align", "l_cons", "l_fair", "total"];
const PALETTE: [RGBColor; 5] = [BLUE, RED, GREEN, MAGENTA, BLACK];

/// Series keyed by column name, each a list of `(step, value)` points in
/// file order. Empty cells contribute no point.
pub type Series = BTreeMap<String, Vec<(u64, f64)>>;

pub fn read_series(path: &Path) -> Result<Series> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers().with_context(|| format!("reading {}", path.display()))?.clone();
    let step_col = headers
        .iter()
        .position(|h| h == "step")
        .ok_or_else(|| anyhow!("{}: no `step` column", path.display()))?;
    let mut series = Series::new();
    let mut rows = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.with_context(|| format!("{}: line {line}", path.display()))?;
        let step: u64 = rec[step_col]
            .parse()
            .with_context(|| format!("{}: line {line}: bad step `{}`", path.display(), &rec[step_col]))?;
        for (col, cell) in headers.iter().zip(rec.iter()) {
            if col == "step" || cell.is_empty() {
                continue;
            }
            let v: f64 = cell
                .parse()
                .with_context(|| format!("{}: line {line}: bad `{col}` value `{cell}`", path.display()))?;
            series.entry(col.to_string()).or_default().push((step, v));
        }
        rows += 1;
    }
    if rows == 0 {
        bail!("{}: no data rows", path.display());
    }
    Ok(series)
}

fn bounds<'a>(lines: impl Iterator<Item = &'a Vec<(u64, f64)>>) -> Option<(u64, u64, f64, f64)> {
    let mut b: Option<(u64, u64, f64, f64)> = None;
    for &(s, v) in lines.flatten() {
        b = Some(match b {
            None => (s, s, v, v),
            Some((s0, s1, v0, v1)) => (s0.min(s), s1.max(s), v0.min(v), v1.max(v)),
        });
    }
    b.map(|(s0, s1, v0, v1)| {
        let pad = if v1 > v0 { 0.05 * (v1 - v0) } else { 0.5 };
        (s0, s1.max(s0 + 1), v0 - pad, v1 + pad)
    })
}

fn plot(path: &Path, title: &str, y_label: &str, lines: &[(&str, &Vec<(u64, f64)>)]) -> Result<()> {
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let Some((s0, s1, v0, v1)) = bounds(lines.iter().map(|(_, l)| *l)) else {
        root.present()?;
        return Ok(());
    };
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(s0..s1, v0..v1)?;
    chart.configure_mesh().x_desc("step").y_desc(y_label).draw()?;
    for (i, (name, pts)) in lines.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    if lines.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
    }
    root.present()?;
    Ok(())
}

/// Writes `pseudo_label_accuracy.svg`, `losses.svg` and `curves.csv`
/// (`step,metric,value`) into `out`.
pub fn export(metrics: &Path, out: &Path) -> Result<()> {
    let series = read_series(metrics)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut tidy = csv::Writer::from_path(out.join("curves.csv"))?;
    tidy.write_record(["step", "metric", "value"])?;
    for (name, pts) in &series {
        for (s, v) in pts {
            tidy.write_record([s.to_string(), name.clone(), v.to_string()])?;
        }
    }
    tidy.flush()?;

    let empty = Vec::new();
    let pseudo = series.get("pseudo_acc").unwrap_or(&empty);
    plot(
        &out.join("pseudo_label_accuracy.svg"),
        "pseudo-label accuracy",
        "accuracy",
        &[("pseudo_acc", pseudo)],
    )?;
    let losses: Vec<(&str, &Vec<(u64, f64)>)> = LOSSES
        .iter()
        .filter_map(|&k| series.get(k).map(|v| (k, v)))
        .collect();
    plot(&out.join("losses.svg"), "training losses", "loss", &losses)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_empty_cells_and_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "step,l_cs,pseudo_acc,top1\n1,0.5,,\n2,0.4,0.75,\n2,,,0.3\n").unwrap();
        let s = read_series(&p).unwrap();
        assert_eq!(s["l_cs"], vec![(1, 0.5), (2, 0.4)]);
        assert_eq!(s["pseudo_acc"], vec![(2, 0.75)]);
        assert_eq!(s["top1"], vec![(2, 0.3)]);

        fs::write(&p, "step,l_cs\n").unwrap();
        assert!(read_series(&p).is_err());
        fs::write(&p, "").unwrap();
        assert!(read_series(&p).is_err());
        fs::write(&p, "step,l_cs\n1,abc\n").unwrap();
        assert!(read_series(&p).is_err());
        fs::write(&p, "l_cs\n1\n").unwrap();
        assert!(read_series(&p).is_err());
    }
}
