//! SVG figures for the four analyses.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::{ReportError, Rq1Output, Rq2Output, Rq3Output, Rq4Output};
use crate::stats;

const SIZE: (u32, u32) = (900, 520);

fn fig_err(path: &Path, e: impl std::fmt::Display) -> ReportError {
    ReportError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn bounds<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    if lo > hi {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.08).max(1e-3);
    (lo - pad, hi + pad)
}

/// One box per group: quartiles, whiskers at the extremes, points on top.
pub fn box_plot(
    path: &Path,
    title: &str,
    y_label: &str,
    groups: &BTreeMap<String, Vec<f64>>,
) -> Result<(), ReportError> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fig_err(path, e))?;
    let (lo, hi) = bounds(groups.values().flatten());
    let n = groups.len().max(1);
    let names: Vec<&String> = groups.keys().collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(-0.5f64..n as f64 - 0.5, lo..hi)
        .map_err(|e| fig_err(path, e))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                names
                    .get(i as usize)
                    .map(|s| s.to_string())
                    .unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc(y_label)
        .draw()
        .map_err(|e| fig_err(path, e))?;
    for (i, values) in groups.values().enumerate() {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        let x = i as f64;
        let color = Palette99::pick(i);
        let (q1, q2, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
        let (min, max) = (v[0], v[v.len() - 1]);
        chart
            .draw_series([
                Rectangle::new([(x - 0.25, q1), (x + 0.25, q3)], color.mix(0.3).filled()),
                Rectangle::new([(x - 0.25, q1), (x + 0.25, q3)], color.stroke_width(1)),
            ])
            .map_err(|e| fig_err(path, e))?;
        chart
            .draw_series([
                PathElement::new(vec![(x - 0.25, q2), (x + 0.25, q2)], BLACK.stroke_width(2)),
                PathElement::new(vec![(x, min), (x, q1)], BLACK.stroke_width(1)),
                PathElement::new(vec![(x, q3), (x, max)], BLACK.stroke_width(1)),
            ])
            .map_err(|e| fig_err(path, e))?;
        chart
            .draw_series(v.iter().map(|&y| Circle::new((x, y), 2, color.filled())))
            .map_err(|e| fig_err(path, e))?;
    }
    root.present().map_err(|e| fig_err(path, e))?;
    Ok(())
}

/// Mirrored Gaussian kernel density per group.
pub fn violin_plot(
    path: &Path,
    title: &str,
    y_label: &str,
    groups: &BTreeMap<String, Vec<f64>>,
) -> Result<(), ReportError> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fig_err(path, e))?;
    let (lo, hi) = bounds(groups.values().flatten());
    let n = groups.len().max(1);
    let names: Vec<&String> = groups.keys().collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(-0.5f64..n as f64 - 0.5, lo..hi)
        .map_err(|e| fig_err(path, e))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                names
                    .get(i as usize)
                    .map(|s| s.to_string())
                    .unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc(y_label)
        .draw()
        .map_err(|e| fig_err(path, e))?;
    for (i, values) in groups.values().enumerate() {
        let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        let Some(ms) = stats::MeanStd::of(&v) else {
            continue;
        };
        // Silverman's rule, floored so constant samples still draw.
        let bw = (1.06 * ms.std * (v.len() as f64).powf(-0.2)).max((hi - lo) * 0.02);
        let ys: Vec<f64> = (0..=100)
            .map(|j| lo + (hi - lo) * j as f64 / 100.0)
            .collect();
        let dens: Vec<f64> = ys
            .iter()
            .map(|&y| {
                v.iter()
                    .map(|&s| (-0.5 * ((y - s) / bw).powi(2)).exp())
                    .sum::<f64>()
            })
            .collect();
        let peak = dens.iter().cloned().fold(0.0, f64::max).max(1e-12);
        let x = i as f64;
        let mut outline: Vec<(f64, f64)> = ys
            .iter()
            .zip(&dens)
            .map(|(&y, &d)| (x + 0.4 * d / peak, y))
            .collect();
        outline.extend(
            ys.iter()
                .zip(&dens)
                .rev()
                .map(|(&y, &d)| (x - 0.4 * d / peak, y)),
        );
        let color = Palette99::pick(i);
        chart
            .draw_series([Polygon::new(outline.clone(), color.mix(0.35).filled())])
            .map_err(|e| fig_err(path, e))?;
        chart
            .draw_series([PathElement::new(outline, color.stroke_width(1))])
            .map_err(|e| fig_err(path, e))?;
        chart
            .draw_series([Circle::new((x, ms.mean), 3, BLACK.filled())])
            .map_err(|e| fig_err(path, e))?;
    }
    root.present().map_err(|e| fig_err(path, e))?;
    Ok(())
}

/// One line per series over integer x values.
pub fn line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &BTreeMap<String, Vec<(f64, f64)>>,
) -> Result<(), ReportError> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fig_err(path, e))?;
    let (x_lo, x_hi) = bounds(series.values().flatten().map(|(x, _)| x));
    let (y_lo, y_hi) = bounds(series.values().flatten().map(|(_, y)| y));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x_lo..x_hi, y_lo..y_hi)
        .map_err(|e| fig_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| fig_err(path, e))?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i);
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| fig_err(path, e))?
            .label(name.clone())
            .legend(move |(x, y)| {
                PathElement::new(
                    vec![(x, y), (x + 16, y)],
                    Palette99::pick(i).stroke_width(2),
                )
            });
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| fig_err(path, e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| fig_err(path, e))?;
    root.present().map_err(|e| fig_err(path, e))?;
    Ok(())
}

/// Scatter with an optional fitted curve.
pub fn scatter_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64)],
    curve: Option<&dyn Fn(f64) -> f64>,
) -> Result<(), ReportError> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fig_err(path, e))?;
    let (x_lo, x_hi) = bounds(points.iter().map(|(x, _)| x));
    let (y_lo, y_hi) = bounds(points.iter().map(|(_, y)| y));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x_lo..x_hi, y_lo..y_hi)
        .map_err(|e| fig_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| fig_err(path, e))?;
    chart
        .draw_series(points.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))
        .map_err(|e| fig_err(path, e))?;
    if let Some(f) = curve {
        let xs = (0..=200).map(|i| x_lo + (x_hi - x_lo) * i as f64 / 200.0);
        chart
            .draw_series(LineSeries::new(
                xs.map(|x| (x, f(x))).filter(|(_, y)| y.is_finite()),
                RED.stroke_width(2),
            ))
            .map_err(|e| fig_err(path, e))?;
    }
    root.present().map_err(|e| fig_err(path, e))?;
    Ok(())
}

/// Write every figure under `dir` and return their paths.
pub fn write_figures(
    dir: &Path,
    rq1: &Rq1Output,
    rq2: &Rq2Output,
    rq3: &Rq3Output,
    rq4: &Rq4Output,
) -> Result<Vec<PathBuf>, ReportError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let mut pools: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in &rq1.summary {
        pools
            .entry(r.pooling.to_string())
            .or_default()
            .entry(r.provider.clone())
            .or_default()
            .push(r.rho_mean);
    }
    for (pooling, groups) in &pools {
        let path = dir.join(format!("rq1_alignment_{pooling}.svg"));
        box_plot(
            &path,
            &format!("CAV alignment ({pooling})"),
            "cosine similarity",
            groups,
        )?;
        written.push(path);
    }

    let mut curves: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for g in &rq2.by_source {
        if let Ok(u) = g.x.parse::<f64>() {
            curves
                .entry(g.method.clone())
                .or_default()
                .entry(g.group.clone())
                .or_default()
                .push((u, g.mean));
        }
    }
    for (pooling, series) in &curves {
        let path = dir.join(format!("rq2_intra_similarity_{pooling}.svg"));
        line_plot(
            &path,
            &format!("Intra-similarity ({pooling})"),
            "subset size u",
            "mean cosine",
            series,
        )?;
        written.push(path);
    }

    let mut deltas: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for d in &rq3.deltas {
        deltas
            .entry(d.method.to_string())
            .or_default()
            .entry(d.provider.clone())
            .or_default()
            .push(d.delta);
    }
    for (method, groups) in &deltas {
        let path = dir.join(format!("rq3_importance_delta_{method}.svg"));
        box_plot(
            &path,
            &format!("Importance delta ({method})"),
            "|s_gen - s_real|",
            groups,
        )?;
        written.push(path);
    }

    let mut removal: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in &rq4.removal {
        removal
            .entry(r.method.to_string())
            .or_default()
            .entry(r.cav_source.clone())
            .or_default()
            .push(r.delta_rm);
    }
    for (method, groups) in &removal {
        let path = dir.join(format!("rq4_removal_delta_{method}.svg"));
        violin_plot(
            &path,
            &format!("Importance drop after removal ({method})"),
            "s - s_rm",
            groups,
        )?;
        written.push(path);
    }

    let dp: BTreeMap<(&str, &str), f64> = rq4
        .probabilities
        .iter()
        .map(|p| ((p.concept.as_str(), p.model.as_str()), p.delta_p))
        .collect();
    for fit in &rq4.logistic {
        let points: Vec<(f64, f64)> = rq4
            .removal
            .iter()
            .filter(|r| r.method.to_string() == fit.method && r.cav_source == "real")
            .filter_map(|r| {
                dp.get(&(r.concept.as_str(), r.model.as_str()))
                    .map(|&d| (r.delta_rm, d))
            })
            .collect();
        if points.is_empty() {
            continue;
        }
        let params = stats::LogisticParams {
            l: fit.l,
            k: fit.k,
            x0: fit.x0,
        };
        let f = move |x: f64| params.eval(x);
        let curve: Option<&dyn Fn(f64) -> f64> = if fit.error.is_empty() { Some(&f) } else { None };
        let path = dir.join(format!("rq4_probability_{}.svg", fit.method));
        scatter_plot(
            &path,
            &format!("Probability drop vs importance drop ({})", fit.method),
            "s - s_rm",
            "P - P_rm",
            &points,
            curve,
        )?;
        written.push(path);
    }
    Ok(written)
}
