//! Trajectory CSV and SVG plots.

use std::fmt::Write as _;

use thiserror::Error;

use crate::matrix::norm_max;
use crate::simkit::Trajectory;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CsvError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn csv_header(n: usize) -> String {
    let mut h = String::from("k");
    for i in 1..=n {
        write!(h, ",x{i}").unwrap();
    }
    h.push_str(",u,objective,terminal_norm,active_set_size");
    h
}

/// One row per step plus a final row holding `x(N)` with empty control columns.
/// Floats carry 17 significant digits.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let n = traj.final_state.len();
    let mut out = csv_header(n);
    out.push('\n');
    let opt = |v: Option<String>| v.unwrap_or_default();
    for s in &traj.steps {
        out.push_str(&s.k.to_string());
        for v in &s.x {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        write!(
            out,
            ",{},{},{},{}",
            fmt_f64(s.u),
            opt(s.objective.map(fmt_f64)),
            opt(s.terminal_state.as_deref().map(|t| fmt_f64(norm_max(t)))),
            opt(s.active_set_size.map(|a| a.to_string())),
        )
        .unwrap();
        out.push('\n');
    }
    out.push_str(&traj.steps.len().to_string());
    for v in &traj.final_state {
        out.push(',');
        out.push_str(&fmt_f64(*v));
    }
    out.push_str(",,,,\n");
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub k: usize,
    pub x: Vec<f64>,
    pub u: Option<f64>,
    pub objective: Option<f64>,
    pub terminal_norm: Option<f64>,
    pub active_set_size: Option<usize>,
}

pub fn parse_trajectory_csv(text: &str) -> Result<Vec<CsvRow>, CsvError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(CsvError::Parse { line: 1, msg: "empty file".into() })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 6 || cols[0] != "k" {
        return Err(CsvError::Parse { line: 1, msg: format!("unexpected header {header:?}") });
    }
    let n = cols.len() - 5;
    if header != csv_header(n) {
        return Err(CsvError::Parse { line: 1, msg: format!("unexpected header {header:?}") });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let err = |msg: String| CsvError::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n + 5 {
            return Err(err(format!("expected {} fields, got {}", n + 5, fields.len())));
        }
        let num = |s: &str| -> Result<f64, CsvError> { s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}"))) };
        let opt = |s: &str| -> Result<Option<f64>, CsvError> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        let k = fields[0].parse::<usize>().map_err(|e| err(format!("k: {e}")))?;
        let x = fields[1..=n].iter().map(|s| num(s)).collect::<Result<Vec<_>, _>>()?;
        let active = fields[n + 4];
        rows.push(CsvRow {
            k,
            x,
            u: opt(fields[n + 1])?,
            objective: opt(fields[n + 2])?,
            terminal_norm: opt(fields[n + 3])?,
            active_set_size: if active.is_empty() {
                None
            } else {
                Some(active.parse().map_err(|e| err(format!("active_set_size: {e}")))?)
            },
        });
    }
    Ok(rows)
}

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 600.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Panel {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    lo: f64,
    hi: f64,
    steps: usize,
}

impl Panel {
    fn new(y0: f64, h: f64, steps: usize, values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = values.fold((0.0f64, 0.0f64), |(l, h), v| (l.min(v), h.max(v)));
        if hi - lo < 1e-12 {
            lo -= 1.0;
            hi += 1.0;
        }
        let pad = 0.05 * (hi - lo);
        Self {
            x0: 70.0,
            y0,
            w: WIDTH - 100.0,
            h,
            lo: lo - pad,
            hi: hi + pad,
            steps: steps.max(1),
        }
    }

    fn px(&self, k: f64) -> f64 {
        self.x0 + self.w * k / self.steps as f64
    }

    fn py(&self, v: f64) -> f64 {
        self.y0 + self.h * (self.hi - v) / (self.hi - self.lo)
    }

    fn frame(&self, out: &mut String, title: &str) {
        writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444"/>"##,
            self.x0, self.y0, self.w, self.h
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="14" font-family="sans-serif">{title}</text>"#,
            self.x0,
            self.y0 - 8.0
        )
        .unwrap();
        let zero = self.py(0.0);
        writeln!(
            out,
            r##"<line x1="{:.2}" y1="{zero:.2}" x2="{:.2}" y2="{zero:.2}" stroke="#bbb"/>"##,
            self.x0,
            self.x0 + self.w
        )
        .unwrap();
        for (label, v) in [(self.hi, self.hi), (self.lo, self.lo)] {
            writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end" font-family="sans-serif">{:.3}</text>"#,
                self.x0 - 6.0,
                self.py(v) + 4.0,
                label
            )
            .unwrap();
        }
        let tick_every = (self.steps / 10).max(1);
        for k in (0..=self.steps).step_by(tick_every) {
            writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle" font-family="sans-serif">{k}</text>"#,
                self.px(k as f64),
                self.y0 + self.h + 16.0
            )
            .unwrap();
        }
    }

    fn polyline(&self, out: &mut String, points: impl Iterator<Item = (f64, f64)>, color: &str, dash: bool) {
        let pts: Vec<String> = points.map(|(k, v)| format!("{:.2},{:.2}", self.px(k), self.py(v))).collect();
        let dash = if dash { r#" stroke-dasharray="6,4""# } else { "" };
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.8"{dash} points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
    }
}

/// Self-contained 900×600 SVG: states on top, control (with dashed bounds)
/// below. A trajectory that is identically zero gets a single flat panel.
pub fn trajectory_svg(traj: &Trajectory, title: &str, bounds: Option<(f64, f64)>) -> String {
    let states = traj.states();
    let controls = traj.controls();
    let steps = states.len().saturating_sub(1);
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<text x="{:.2}" y="22" font-size="16" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )
    .unwrap();

    let all_zero = states.iter().all(|x| x.iter().all(|v| *v == 0.0)) && controls.iter().all(|u| *u == 0.0);
    if all_zero {
        let panel = Panel::new(60.0, 480.0, steps, std::iter::empty());
        panel.frame(&mut out, "state and control (identically zero)");
        panel.polyline(&mut out, (0..=steps).map(|k| (k as f64, 0.0)), PALETTE[0], false);
        out.push_str("</svg>\n");
        return out;
    }

    let n = traj.final_state.len();
    let top = Panel::new(60.0, 220.0, steps, states.iter().flat_map(|x| x.iter().copied()));
    top.frame(&mut out, "states x(k)");
    for i in 0..n {
        top.polyline(
            &mut out,
            states.iter().enumerate().map(|(k, x)| (k as f64, x[i])),
            PALETTE[i % PALETTE.len()],
            false,
        );
        writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" fill="{}" font-family="sans-serif">x{}</text>"#,
            top.x0 + top.w + 6.0,
            top.y0 + 14.0 * (i as f64 + 1.0),
            PALETTE[i % PALETTE.len()],
            i + 1
        )
        .unwrap();
    }

    let extra = bounds.map(|(lo, hi)| vec![lo, hi]).unwrap_or_default();
    let bottom = Panel::new(340.0, 220.0, steps, controls.iter().copied().chain(extra.iter().copied()));
    bottom.frame(&mut out, "control u(k)");
    // zero-order hold
    let hold = controls
        .iter()
        .enumerate()
        .flat_map(|(k, &u)| [(k as f64, u), ((k + 1) as f64, u)]);
    bottom.polyline(&mut out, hold, "#222", false);
    if let Some((lo, hi)) = bounds {
        for b in [lo, hi] {
            bottom.polyline(&mut out, [(0.0, b), (steps as f64, b)].into_iter(), "#d62728", true);
        }
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
