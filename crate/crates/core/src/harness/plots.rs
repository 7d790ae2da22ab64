//! Deterministic SVG figures rendered from the CSV outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::records::Table;
use crate::error::{Error, Result};
use crate::geometry::Polytope;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 420.0;

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Axis range covering `values`, padded; `[0, 1]` when empty.
fn range(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.into_iter().filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

struct Panel {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Panel {
    fn new(x: f64, y: f64, w: f64, h: f64, xr: (f64, f64), yr: (f64, f64)) -> Self {
        Panel { x, y, w, h, xr, yr }
    }

    fn px(&self, v: f64) -> f64 {
        self.x + (v - self.xr.0) / (self.xr.1 - self.xr.0) * self.w
    }

    fn py(&self, v: f64) -> f64 {
        self.y + self.h - (v - self.yr.0) / (self.yr.1 - self.yr.0) * self.h
    }

    fn axes(&self, svg: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let _ = writeln!(svg, r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#, num(self.x), num(self.y), num(self.w), num(self.h));
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let xv = self.xr.0 + f * (self.xr.1 - self.xr.0);
            let yv = self.yr.0 + f * (self.yr.1 - self.yr.0);
            let (tx, ty) = (self.px(xv), self.py(yv));
            let _ = writeln!(svg, r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/>"#, num(tx), num(self.y + self.h), num(self.y + self.h + 4.0));
            let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{}</text>"#, num(tx), num(self.y + self.h + 16.0), tick(xv));
            let _ = writeln!(svg, r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black"/>"#, num(self.x - 4.0), num(ty), num(self.x));
            let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{}</text>"#, num(self.x - 6.0), num(ty + 3.0), tick(yv));
        }
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">{}</text>"#, num(self.x + self.w / 2.0), num(self.y - 8.0), escape(title));
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#, num(self.x + self.w / 2.0), num(self.y + self.h + 32.0), escape(xlabel));
        let _ = writeln!(
            svg,
            r#"<text x="{0}" y="{1}" font-size="11" text-anchor="middle" transform="rotate(-90 {0} {1})">{2}</text>"#,
            num(self.x - 46.0),
            num(self.y + self.h / 2.0),
            escape(ylabel)
        );
    }

    fn polyline(&self, svg: &mut String, pts: &[(f64, f64)], color: &str, class: &str) {
        if pts.is_empty() {
            return;
        }
        let p: Vec<String> = pts.iter().map(|&(x, y)| format!("{},{}", num(self.px(x)), num(self.py(y)))).collect();
        let _ = writeln!(svg, r#"<polyline class="{class}" points="{}" fill="none" stroke="{color}" stroke-width="1.2"/>"#, p.join(" "));
    }

    fn legend(&self, svg: &mut String, labels: &[(String, &str)]) {
        for (k, (label, color)) in labels.iter().enumerate() {
            let y = self.y + 14.0 + 14.0 * k as f64;
            let x = self.x + self.w - 110.0;
            let _ = writeln!(svg, r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{color}" stroke-width="2"/>"#, num(x), num(y - 3.0), num(x + 16.0));
            let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="10">{}</text>"#, num(x + 20.0), num(y), escape(label));
        }
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        num(v)
    }
}

fn document(body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n{body}</svg>\n",
        w = WIDTH,
        h = HEIGHT
    )
}

type Series = (String, Vec<(f64, f64)>);

fn series_of(tables: &[(String, Table)], column: &str) -> Result<Vec<Series>> {
    tables
        .iter()
        .map(|(name, t)| {
            let mut pts = Vec::new();
            for row in 0..t.len() {
                if let Some(v) = t.opt_f64(row, column)? {
                    pts.push((t.f64(row, "episode")?, v));
                }
            }
            Ok((name.clone(), pts))
        })
        .collect()
}

fn line_figure(panels: &[(&str, &str, Vec<Series>)]) -> String {
    let mut svg = String::new();
    let n = panels.len() as f64;
    let w = (WIDTH - 80.0 * n) / n;
    for (k, (title, ylabel, series)) in panels.iter().enumerate() {
        let xr = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
        let yr = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
        let panel = Panel::new(70.0 + k as f64 * (w + 80.0), 40.0, w, HEIGHT - 100.0, xr, yr);
        panel.axes(&mut svg, title, "episode", ylabel);
        let mut labels = Vec::new();
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            panel.polyline(&mut svg, pts, color, "series");
            labels.push((name.clone(), color));
        }
        panel.legend(&mut svg, &labels);
    }
    document(&svg)
}

/// NRMSE and R^2 of the terminal cost against the oracle, per training run.
pub fn training_curves(tables: &[(String, Table)]) -> Result<String> {
    Ok(line_figure(&[("Terminal cost fit: NRMSE", "NRMSE", series_of(tables, "nrmse")?), ("Terminal cost fit: R^2", "R^2", series_of(tables, "r2")?)]))
}

/// Class-K coefficients over training; one panel per coefficient.
pub fn gamma_curves(tables: &[(String, Table)]) -> Result<String> {
    let n_gamma = tables.first().map_or(0, |(_, t)| t.header.iter().filter(|h| h.starts_with("gamma_")).count());
    let mut panels = Vec::new();
    let titles: Vec<String> = (1..=n_gamma).map(|j| format!("gamma_{j}")).collect();
    for name in &titles {
        panels.push((name.as_str(), name.as_str(), series_of(tables, name)?));
    }
    if panels.is_empty() {
        panels.push(("gamma", "gamma", Vec::new()));
    }
    Ok(line_figure(&panels))
}

fn box_plot(svg: &mut String, panel: &Panel, groups: &[(String, Vec<f64>)], log: bool) {
    let tf = |v: f64| if log { v.max(1e-12).log10() } else { v };
    let slot = panel.w / groups.len().max(1) as f64;
    for (k, (name, values)) in groups.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let cx = panel.x + slot * (k as f64 + 0.5);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#, num(cx), num(panel.y + panel.h + 16.0), escape(name));
        if values.is_empty() {
            continue;
        }
        let q = |p: f64| tf(super::evaluate::quantile(values, p));
        let (lo, q1, med, q3, hi) = (q(0.0), q(0.25), q(0.5), q(0.75), q(1.0));
        let half = slot * 0.2;
        let _ = writeln!(svg, r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="{color}"/>"#, num(cx), num(panel.py(lo)), num(panel.py(hi)));
        let _ = writeln!(
            svg,
            r#"<rect class="box" x="{}" y="{}" width="{}" height="{}" fill="{color}" fill-opacity="0.3" stroke="{color}"/>"#,
            num(cx - half),
            num(panel.py(q3)),
            num(2.0 * half),
            num(panel.py(q1) - panel.py(q3))
        );
        let _ = writeln!(svg, r#"<line x1="{}" y1="{2}" x2="{}" y2="{2}" stroke="black" stroke-width="2"/>"#, num(cx - half), num(cx + half), num(panel.py(med)));
    }
}

/// Return distributions and per-episode mean solve times, per policy.
pub fn evaluation_distributions(t: &Table) -> Result<String> {
    let mut groups: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for row in 0..t.len() {
        let policy = t.str(row, "policy")?.to_string();
        let (ret, time) = (t.f64(row, "return")?, t.f64(row, "mean_solve_time_s")?);
        match groups.iter_mut().find(|g| g.0 == policy) {
            Some(g) => {
                g.1.push(ret);
                g.2.push(time);
            }
            None => groups.push((policy, vec![ret], vec![time])),
        }
    }
    let returns: Vec<(String, Vec<f64>)> = groups.iter().map(|g| (g.0.clone(), g.1.clone())).collect();
    let times: Vec<(String, Vec<f64>)> = groups.iter().map(|g| (g.0.clone(), g.2.clone())).collect();
    let mut svg = String::new();
    let w = (WIDTH - 160.0) / 2.0;
    let p1 = Panel::new(70.0, 40.0, w, HEIGHT - 100.0, (0.0, 1.0), range(returns.iter().flat_map(|g| g.1.iter().copied())));
    p1.axes(&mut svg, "Closed-loop return", "policy", "return");
    box_plot(&mut svg, &p1, &returns, false);
    let p2 = Panel::new(150.0 + w, 40.0, w, HEIGHT - 100.0, (0.0, 1.0), range(times.iter().flat_map(|g| g.1.iter().map(|v| v.max(1e-12).log10()))));
    p2.axes(&mut svg, "Mean solve time per episode", "policy", "log10 seconds");
    box_plot(&mut svg, &p2, &times, true);
    Ok(document(&svg))
}

/// State trajectories over the outline of `set`.
pub fn trajectory_plot(t: &Table, set: &Polytope) -> Result<String> {
    let outline = set.vertices_2d()?;
    let mut paths: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for row in 0..t.len() {
        let key = format!("{}/{}", t.str(row, "policy")?, t.str(row, "episode")?);
        let p = (t.f64(row, "s1")?, t.f64(row, "s2")?);
        match paths.last_mut() {
            Some(last) if last.0 == key => last.1.push(p),
            _ => paths.push((key, vec![p])),
        }
    }
    let xr = range(outline.iter().map(|v| v[0]).chain(paths.iter().flat_map(|p| p.1.iter().map(|q| q.0))));
    let yr = range(outline.iter().map(|v| v[1]).chain(paths.iter().flat_map(|p| p.1.iter().map(|q| q.1))));
    // equal aspect ratio
    let side = HEIGHT - 100.0;
    let span = (xr.1 - xr.0).max(yr.1 - yr.0);
    let (cx, cy) = ((xr.0 + xr.1) / 2.0, (yr.0 + yr.1) / 2.0);
    let panel = Panel::new((WIDTH - side) / 2.0, 40.0, side, side, (cx - span / 2.0, cx + span / 2.0), (cy - span / 2.0, cy + span / 2.0));
    let mut svg = String::new();
    panel.axes(&mut svg, "State trajectories and invariant set", "s1", "s2");
    let pts: Vec<String> = outline.iter().map(|v| format!("{},{}", num(panel.px(v[0])), num(panel.py(v[1])))).collect();
    let _ = writeln!(svg, r#"<polygon class="outline" points="{}" fill="none" stroke="black" stroke-dasharray="4 2"/>"#, pts.join(" "));
    let mut policies: Vec<String> = Vec::new();
    for (key, pts) in &paths {
        let policy = key.split('/').next().unwrap_or_default().to_string();
        let idx = policies.iter().position(|p| *p == policy).unwrap_or_else(|| {
            policies.push(policy.clone());
            policies.len() - 1
        });
        panel.polyline(&mut svg, pts, PALETTE[idx % PALETTE.len()], "trajectory");
    }
    let labels: Vec<(String, &str)> = policies.iter().enumerate().map(|(i, p)| (p.clone(), PALETTE[i % PALETTE.len()])).collect();
    panel.legend(&mut svg, &labels);
    Ok(document(&svg))
}

fn read_table(path: &Path) -> Result<Table> {
    Table::read(std::fs::File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?)
}

/// Reads the polytope written by `Polytope::write_csv`.
pub fn read_polytope(path: &Path) -> Result<Polytope> {
    let t = read_table(path)?;
    let dim = t.header.len() - 1;
    let mut rows = Vec::new();
    let mut offsets = Vec::new();
    for r in 0..t.len() {
        rows.push((1..=dim).map(|i| t.f64(r, &format!("g{i}"))).collect::<Result<Vec<f64>>>()?);
        offsets.push(t.f64(r, "offset")?);
    }
    let mut p = Polytope::new(dim, rows, offsets)?;
    p.pruned = true;
    Ok(p)
}

/// Renders every figure whose inputs exist in `dir` and returns the written
/// paths: `training.svg` and `gamma.svg` from `training_seed*.csv`,
/// `evaluation.svg` from `evaluation.csv`, `trajectories.svg` from
/// `trajectories.csv` and `invariant_set.csv`.
pub fn emit_plots(dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().and_then(|e| e.file_name().into_string().ok()))
        .filter(|n| n.starts_with("training_seed") && n.ends_with(".csv"))
        .collect();
    names.sort();
    let mut write = |name: &str, svg: String| -> Result<()> {
        let p = out.join(name);
        std::fs::write(&p, svg)?;
        written.push(p);
        Ok(())
    };
    if !names.is_empty() {
        let tables = names
            .iter()
            .map(|n| Ok((n.trim_start_matches("training_").trim_end_matches(".csv").to_string(), read_table(&dir.join(n))?)))
            .collect::<Result<Vec<_>>>()?;
        write("training.svg", training_curves(&tables)?)?;
        write("gamma.svg", gamma_curves(&tables)?)?;
    }
    if dir.join("evaluation.csv").exists() {
        write("evaluation.svg", evaluation_distributions(&read_table(&dir.join("evaluation.csv"))?)?)?;
    }
    if dir.join("trajectories.csv").exists() && dir.join("invariant_set.csv").exists() {
        let set = read_polytope(&dir.join("invariant_set.csv"))?;
        write("trajectories.svg", trajectory_plot(&read_table(&dir.join("trajectories.csv"))?, &set)?)?;
    }
    Ok(written)
}
