//! Curve persistence (CSV, JSON), SVG line charts and curve-shape
//! classification.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numeric::fmt_f64;
use crate::sweep::{AggregateCurve, Curve, ModelFamily, Phase, RegimeKind};
use crate::{Error, Result};

pub const CSV_HEADER: [&str; 10] = [
    "index",
    "label",
    "phase",
    "param_leaf",
    "param_boost",
    "param_ens",
    "train_mse",
    "test_mse",
    "test_mse_sd",
    "interpolated",
];

/// Either kind of curve, as accepted by the writers.
#[derive(Debug, Clone, Copy)]
pub enum CurveRef<'a> {
    Single(&'a Curve),
    Aggregate(&'a AggregateCurve),
}

impl<'a> From<&'a Curve> for CurveRef<'a> {
    fn from(c: &'a Curve) -> Self {
        CurveRef::Single(c)
    }
}

impl<'a> From<&'a AggregateCurve> for CurveRef<'a> {
    fn from(c: &'a AggregateCurve) -> Self {
        CurveRef::Aggregate(c)
    }
}

impl CurveRef<'_> {
    pub fn rows(&self) -> Vec<CurveRow> {
        match self {
            CurveRef::Single(c) => c
                .points
                .iter()
                .map(|p| CurveRow {
                    index: p.index,
                    label: p.label.clone(),
                    phase: p.phase,
                    param_leaf: Some(p.params.leaf_budget),
                    param_boost: p.params.n_stages,
                    param_ens: Some(p.params.n_members),
                    train_mse: p.train_mse,
                    test_mse: p.test_mse,
                    test_mse_sd: None,
                    interpolated: p.train_interpolated,
                })
                .collect(),
            CurveRef::Aggregate(c) => c
                .points
                .iter()
                .map(|p| CurveRow {
                    index: p.index,
                    label: p.label.clone(),
                    phase: p.phase,
                    param_leaf: Some(p.params.leaf_budget),
                    param_boost: p.params.n_stages,
                    param_ens: Some(p.params.n_members),
                    train_mse: p.train_mse_mean,
                    test_mse: p.test_mse_mean,
                    test_mse_sd: Some(p.test_mse_sd),
                    interpolated: p.interpolated,
                })
                .collect(),
        }
    }

    fn regime(&self) -> &crate::sweep::RegimeSpec {
        match self {
            CurveRef::Single(c) => &c.regime,
            CurveRef::Aggregate(c) => &c.regime,
        }
    }

    fn threshold_index(&self) -> Option<usize> {
        match self {
            CurveRef::Single(c) => c.threshold_index,
            CurveRef::Aggregate(c) => c.threshold_index,
        }
    }
}

/// One CSV line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub index: usize,
    pub label: String,
    pub phase: Phase,
    pub param_leaf: Option<usize>,
    pub param_boost: Option<usize>,
    pub param_ens: Option<usize>,
    pub train_mse: f64,
    pub test_mse: f64,
    pub test_mse_sd: Option<f64>,
    pub interpolated: bool,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_curve_csv_to<'a, W: Write>(curve: impl Into<CurveRef<'a>>, out: W) -> Result<()> {
    let rows = curve.into().rows();
    if rows.is_empty() {
        return Err(Error::usage("cannot write an empty curve"));
    }
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::io("<curve csv>", e.into());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.index.to_string(),
            r.label,
            r.phase.as_str().to_string(),
            opt(r.param_leaf),
            opt(r.param_boost),
            opt(r.param_ens),
            fmt_f64(r.train_mse),
            fmt_f64(r.test_mse),
            r.test_mse_sd.map(fmt_f64).unwrap_or_default(),
            r.interpolated.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<curve csv>", e))?;
    Ok(())
}

pub fn curve_csv_string<'a>(curve: impl Into<CurveRef<'a>>) -> Result<String> {
    let mut buf = Vec::new();
    write_curve_csv_to(curve, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Write the curve table to `path`, replacing it atomically.
pub fn write_curve_csv<'a>(curve: impl Into<CurveRef<'a>>, path: &Path) -> Result<()> {
    write_atomic(path, curve_csv_string(curve)?.as_bytes())
}

fn parse_opt<T: std::str::FromStr>(field: &str, line: usize, name: &str) -> Result<Option<T>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::format(Some(line), format!("bad {name} value {field:?}")))
}

fn parse_req<T: std::str::FromStr>(field: &str, line: usize, name: &str) -> Result<T> {
    parse_opt(field, line, name)?.ok_or_else(|| Error::format(Some(line), format!("missing {name}")))
}

pub fn read_curve_csv_from<R: std::io::Read>(input: R) -> Result<Vec<CurveRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r
        .headers()
        .map_err(|e| Error::format(Some(1), e.to_string()))?
        .clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::format(Some(1), "unexpected curve csv header"));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::format(Some(line), e.to_string()))?;
        let phase = match &rec[2] {
            "capacity" => Phase::Capacity,
            "ensemble" => Phase::Ensemble,
            other => return Err(Error::format(Some(line), format!("unknown phase {other:?}"))),
        };
        rows.push(CurveRow {
            index: parse_req(&rec[0], line, "index")?,
            label: rec[1].to_string(),
            phase,
            param_leaf: parse_opt(&rec[3], line, "param_leaf")?,
            param_boost: parse_opt(&rec[4], line, "param_boost")?,
            param_ens: parse_opt(&rec[5], line, "param_ens")?,
            train_mse: parse_req(&rec[6], line, "train_mse")?,
            test_mse: parse_req(&rec[7], line, "test_mse")?,
            test_mse_sd: parse_opt(&rec[8], line, "test_mse_sd")?,
            interpolated: parse_req(&rec[9], line, "interpolated")?,
        });
    }
    Ok(rows)
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_curve_csv_from(std::io::BufReader::new(f)).map_err(|e| e.context(path.display()))
}

/// Write `bytes` to a temporary file next to `path`, then rename it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeClass {
    #[serde(rename = "L_SHAPE")]
    LShape,
    #[serde(rename = "U_SHAPE")]
    UShape,
    #[serde(rename = "DOUBLE_DESCENT")]
    DoubleDescent,
    #[serde(rename = "MONOTONE_INCREASING")]
    MonotoneIncreasing,
    #[serde(rename = "FLAT")]
    Flat,
    #[serde(rename = "AMBIGUOUS")]
    Ambiguous,
}

impl ShapeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeClass::LShape => "L_SHAPE",
            ShapeClass::UShape => "U_SHAPE",
            ShapeClass::DoubleDescent => "DOUBLE_DESCENT",
            ShapeClass::MonotoneIncreasing => "MONOTONE_INCREASING",
            ShapeClass::Flat => "FLAT",
            ShapeClass::Ambiguous => "AMBIGUOUS",
        }
    }
}

impl std::fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Down,
    Up,
}

/// A turning point of the compressed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pivot {
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveShape {
    pub classification: ShapeClass,
    /// Direction of each run that moved by more than the tolerance.
    pub runs: Vec<Direction>,
    /// Run endpoints: `pivots[k]..pivots[k + 1]` spans run `k`.
    pub pivots: Vec<Pivot>,
    pub noise_tol: f64,
}

/// Compress `values` into monotone runs and name the pattern.
///
/// A run only ends once the sequence has retreated from the run's extreme by
/// more than `noise_tol`; smaller wiggles are absorbed.
pub fn classify_shape(values: &[f64], noise_tol: f64) -> Result<CurveShape> {
    if values.len() < 3 {
        return Err(Error::usage(format!(
            "shape classification needs at least 3 points, got {}",
            values.len()
        )));
    }
    if !(noise_tol >= 0.0 && noise_tol.is_finite()) {
        return Err(Error::usage(format!("noise_tol must be finite and >= 0, got {noise_tol}")));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::usage(format!("non-finite value at index {i}")));
    }
    let at = |i: usize| Pivot {
        index: i,
        value: values[i],
    };
    let mut runs = Vec::new();
    let mut pivots = Vec::new();
    let (mut lo, mut hi) = (0usize, 0usize);
    let mut dir: Option<Direction> = None;
    // `ext` is the extreme of the current run.
    let mut ext = 0usize;
    for (i, &v) in values.iter().enumerate().skip(1) {
        match dir {
            None => {
                if v < values[lo] {
                    lo = i;
                }
                if v > values[hi] {
                    hi = i;
                }
                if v - values[lo] > noise_tol {
                    pivots.push(at(lo));
                    dir = Some(Direction::Up);
                    ext = i;
                } else if values[hi] - v > noise_tol {
                    pivots.push(at(hi));
                    dir = Some(Direction::Down);
                    ext = i;
                }
            }
            Some(Direction::Up) => {
                if v > values[ext] {
                    ext = i;
                } else if values[ext] - v > noise_tol {
                    runs.push(Direction::Up);
                    pivots.push(at(ext));
                    dir = Some(Direction::Down);
                    ext = i;
                }
            }
            Some(Direction::Down) => {
                if v < values[ext] {
                    ext = i;
                } else if v - values[ext] > noise_tol {
                    runs.push(Direction::Down);
                    pivots.push(at(ext));
                    dir = Some(Direction::Up);
                    ext = i;
                }
            }
        }
    }
    if let Some(d) = dir {
        runs.push(d);
        pivots.push(at(ext));
    }
    use Direction::{Down, Up};
    let classification = match runs.as_slice() {
        [] => ShapeClass::Flat,
        [Down] => ShapeClass::LShape,
        [Down, Up] => ShapeClass::UShape,
        [Down, Up, Down] => ShapeClass::DoubleDescent,
        [Up] => ShapeClass::MonotoneIncreasing,
        _ => ShapeClass::Ambiguous,
    };
    Ok(CurveShape {
        classification,
        runs,
        pivots,
        noise_tol,
    })
}

/// Half the mean per-point standard deviation when replicate spread is
/// available and positive, else 2% of the value range.
pub fn default_noise_tol(values: &[f64], sd: Option<&[f64]>) -> f64 {
    if let Some(sd) = sd {
        if !sd.is_empty() {
            let m = sd.iter().sum::<f64>() / sd.len() as f64;
            if m > 0.0 && m.is_finite() {
                return 0.5 * m;
            }
        }
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        0.0
    } else {
        0.02 * (hi - lo)
    }
}

/// A named series for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCurve {
    pub name: String,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
    pub threshold_index: Option<usize>,
    pub phase_boundary: Option<usize>,
    pub family: ModelFamily,
}

impl LabeledCurve {
    /// Test MSE of a curve (seed mean for aggregates).
    pub fn test_mse<'a>(name: impl Into<String>, curve: impl Into<CurveRef<'a>>) -> Self {
        let curve = curve.into();
        let rows = curve.rows();
        Self {
            name: name.into(),
            labels: rows.iter().map(|r| r.label.clone()).collect(),
            values: rows.iter().map(|r| r.test_mse).collect(),
            threshold_index: curve.threshold_index(),
            phase_boundary: curve.regime().phase_boundary(),
            family: curve.regime().model_family,
        }
    }

    /// Train MSE of a curve, without threshold or phase markers.
    pub fn train_mse<'a>(name: impl Into<String>, curve: impl Into<CurveRef<'a>>) -> Self {
        let curve = curve.into();
        let rows = curve.rows();
        Self {
            name: name.into(),
            labels: rows.iter().map(|r| r.label.clone()).collect(),
            values: rows.iter().map(|r| r.train_mse).collect(),
            threshold_index: None,
            phase_boundary: None,
            family: curve.regime().model_family,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvgOptions {
    pub log_x: bool,
    pub threshold_marker: bool,
    pub title: String,
}

impl Default for SvgOptions {
    fn default() -> Self {
        Self {
            log_x: false,
            threshold_marker: true,
            title: String::new(),
        }
    }
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 500.0;
const MARGIN_X: f64 = 0.1 * SVG_W;
const MARGIN_Y: f64 = 0.1 * SVG_H;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// x-coordinate of tick `k` out of `n`.
pub fn tick_x(k: usize, n: usize, log_x: bool) -> f64 {
    let plot_w = SVG_W - 2.0 * MARGIN_X;
    if n <= 1 {
        return MARGIN_X + plot_w / 2.0;
    }
    let t = if log_x {
        ((k + 1) as f64).ln() / (n as f64).ln()
    } else {
        k as f64 / (n - 1) as f64
    };
    MARGIN_X + plot_w * t
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    step * mag
}

/// Render curves sharing one categorical x-axis as a standalone SVG.
pub fn render_svg(curves: &[LabeledCurve], opts: &SvgOptions) -> Result<Vec<u8>> {
    let first = curves.first().ok_or_else(|| Error::usage("no curves to plot"))?;
    let n = first.labels.len();
    if n == 0 {
        return Err(Error::usage("cannot plot an empty curve"));
    }
    for c in curves {
        if c.labels != first.labels || c.values.len() != n {
            return Err(Error::usage(format!(
                "curve {:?} does not share the x-axis of {:?}",
                c.name, first.name
            )));
        }
        if c.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::usage(format!("curve {:?} has non-finite values", c.name)));
        }
    }
    let mut lo = curves.iter().flat_map(|c| &c.values).copied().fold(f64::INFINITY, f64::min);
    let mut hi = curves.iter().flat_map(|c| &c.values).copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 * hi.abs().max(1.0) {
        lo -= 0.5 * lo.abs().max(1.0);
        hi += 0.5 * hi.abs().max(1.0);
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let (top, bottom) = (MARGIN_Y, SVG_H - MARGIN_Y);
    let y_of = |v: f64| bottom - (v - lo) / (hi - lo) * (bottom - top);
    let x_of = |k: usize| tick_x(k, n, opts.log_x);
    let (left, right) = (MARGIN_X, SVG_W - MARGIN_X);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SVG_W} {SVG_H}" width="{SVG_W}" height="{SVG_H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>"#);
    if !opts.title.is_empty() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="15">{}</text>"#,
            SVG_W / 2.0,
            MARGIN_Y / 2.0,
            escape(&opts.title)
        );
    }
    // Axes.
    let _ = writeln!(
        s,
        r#"<path d="M{left:.2},{top:.2} V{bottom:.2} H{right:.2}" fill="none" stroke="black"/>"#
    );
    // y ticks.
    let step = nice_step(hi - lo);
    let mut t = (lo / step).ceil() * step;
    while t <= hi + 1e-9 * step {
        let y = y_of(t);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{left:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 4.0,
            left - 6.0,
            y + 4.0,
            format_tick(t, step)
        );
        t += step;
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">MSE</text>"#,
        MARGIN_X / 3.0,
        SVG_H / 2.0,
        MARGIN_X / 3.0,
        SVG_H / 2.0
    );
    // x ticks with point labels.
    for (k, label) in first.labels.iter().enumerate() {
        let x = x_of(k);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{bottom:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="end" transform="rotate(-45 {x:.2} {:.2})">{}</text>"#,
            bottom + 4.0,
            bottom + 14.0,
            bottom + 14.0,
            escape(label)
        );
    }
    // Phase annotation.
    if let Some(b) = first.phase_boundary.filter(|&b| b > 0 && b < n) {
        let xb = (x_of(b - 1) + x_of(b)) / 2.0;
        let capacity = match first.family {
            ModelFamily::TreeForest => "tree phase",
            ModelFamily::Gbm => "boosting phase",
        };
        let _ = writeln!(
            s,
            r##"<line class="phase-boundary" x1="{xb:.2}" y1="{top:.2}" x2="{xb:.2}" y2="{bottom:.2}" stroke="#bbbbbb"/>"##
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{:.2}" text-anchor="middle" fill="#555555">{capacity}</text><text x="{:.2}" y="{:.2}" text-anchor="middle" fill="#555555">ensemble phase</text>"##,
            (left + xb) / 2.0,
            top + 14.0,
            (xb + right) / 2.0,
            top + 14.0
        );
    }
    if opts.threshold_marker {
        if let Some(k) = first.threshold_index.filter(|&k| k < n) {
            let x = x_of(k);
            let _ = writeln!(
                s,
                r#"<line class="threshold" x1="{x:.2}" y1="{top:.2}" x2="{x:.2}" y2="{bottom:.2}" stroke="black" stroke-dasharray="4 4"/>"#
            );
        }
    }
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .values
            .iter()
            .enumerate()
            .map(|(k, &v)| format!("{:.2},{:.2}", x_of(k), y_of(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for (k, &v) in c.values.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#,
                x_of(k),
                y_of(v)
            );
        }
        let ly = top + 30.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            right - 150.0,
            right - 130.0,
            right - 125.0,
            ly + 4.0,
            escape(&c.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s.into_bytes())
}

fn format_tick(v: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let v = if v.abs() < step * 1e-9 { 0.0 } else { v };
    format!("{v:.decimals$}")
}

/// Per-regime JSON record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub name: String,
    pub kind: RegimeKind,
    pub model_family: ModelFamily,
    pub n_seeds: usize,
    pub n_points: usize,
    pub labels: Vec<String>,
    pub threshold_index: Option<usize>,
    pub threshold_label: Option<String>,
    pub phase_boundary: Option<usize>,
    pub min_test_index: usize,
    pub max_test_index: usize,
    pub shape: CurveShape,
}

pub fn summarize<'a>(curve: impl Into<CurveRef<'a>>, noise_tol: Option<f64>) -> Result<RegimeSummary> {
    let curve = curve.into();
    let rows = curve.rows();
    let test: Vec<f64> = rows.iter().map(|r| r.test_mse).collect();
    let sd: Option<Vec<f64>> = rows.iter().map(|r| r.test_mse_sd).collect();
    let tol = noise_tol.unwrap_or_else(|| default_noise_tol(&test, sd.as_deref()));
    let shape = classify_shape(&test, tol)?;
    let argext = |better: fn(f64, f64) -> bool| {
        let mut best = 0;
        for (i, &v) in test.iter().enumerate() {
            if better(v, test[best]) {
                best = i;
            }
        }
        best
    };
    let regime = curve.regime();
    let threshold_index = curve.threshold_index();
    Ok(RegimeSummary {
        name: regime.name.clone(),
        kind: regime.kind,
        model_family: regime.model_family,
        n_seeds: match curve {
            CurveRef::Single(_) => 1,
            CurveRef::Aggregate(a) => a.n_seeds,
        },
        n_points: rows.len(),
        labels: rows.iter().map(|r| r.label.clone()).collect(),
        threshold_index,
        threshold_label: threshold_index.map(|k| rows[k].label.clone()),
        phase_boundary: regime.phase_boundary(),
        min_test_index: argext(|a, b| a < b),
        max_test_index: argext(|a, b| a > b),
        shape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweep::{expand_regime, run_regime, RegimeConfig};
    use crate::synthgen::{generate_friedman1, Friedman1Spec};
    use crate::{split_dataset, Dataset};
    use proptest::prelude::*;

    fn class(v: &[f64], tol: f64) -> ShapeClass {
        classify_shape(v, tol).unwrap().classification
    }

    #[test]
    fn shape_examples() {
        assert_eq!(class(&[1.0, 0.5, 0.4, 0.4], 0.05), ShapeClass::LShape);
        assert_eq!(class(&[1.0, 0.4, 0.9, 1.2], 0.05), ShapeClass::UShape);
        assert_eq!(class(&[0.135, 0.115, 0.140, 0.100], 0.005), ShapeClass::DoubleDescent);
        assert_eq!(class(&[0.1, 0.2, 0.3], 0.05), ShapeClass::MonotoneIncreasing);
        assert_eq!(class(&[0.3, 0.31, 0.29], 0.05), ShapeClass::Flat);
        assert_eq!(class(&[0.2, 0.5, 0.1], 0.05), ShapeClass::Ambiguous);
        assert!(matches!(classify_shape(&[1.0, 2.0], 0.1), Err(Error::Usage(_))));
        assert!(matches!(classify_shape(&[1.0, 2.0, 3.0], -0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn small_wiggles_are_absorbed() {
        let v = [1.0, 0.6, 0.62, 0.4, 0.41, 0.2];
        assert_eq!(class(&v, 0.05), ShapeClass::LShape);
        assert_eq!(class(&v, 0.01), ShapeClass::DoubleDescent);
    }

    #[test]
    fn pivots_mark_run_ends() {
        let s = classify_shape(&[0.135, 0.115, 0.140, 0.100], 0.005).unwrap();
        let idx: Vec<usize> = s.pivots.iter().map(|p| p.index).collect();
        assert_eq!(idx, [0, 1, 2, 3]);
        assert_eq!(s.runs, [Direction::Down, Direction::Up, Direction::Down]);
    }

    #[test]
    fn default_tolerance() {
        assert_eq!(default_noise_tol(&[1.0, 3.0, 2.0], None), 0.04);
        assert!((default_noise_tol(&[1.0, 3.0, 2.0], Some(&[0.2, 0.4, 0.0])) - 0.1).abs() < 1e-15);
        assert_eq!(default_noise_tol(&[1.0, 3.0, 2.0], Some(&[0.0, 0.0, 0.0])), 0.04);
    }

    fn sample_curve() -> Curve {
        let ds: Dataset = generate_friedman1(&Friedman1Spec {
            n_samples: 80,
            n_features: 6,
            noise_sigma: 0.5,
            seed: 3,
        })
        .unwrap();
        let split = split_dataset(&ds, 0.7, 1, None).unwrap();
        let spec = expand_regime(
            &RegimeConfig {
                kind: "composite_tree".into(),
                l_max: Some(56),
                ..Default::default()
            },
            4,
        )
        .unwrap();
        run_regime(&spec, &ds, &split).unwrap()
    }

    #[test]
    fn csv_round_trip_and_line_count() {
        let curve = sample_curve();
        assert_eq!(curve.points.len(), 12);
        let text = curve_csv_string(&curve).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
        let back = read_curve_csv_from(text.as_bytes()).unwrap();
        assert_eq!(back, CurveRef::from(&curve).rows());
        for (r, p) in back.iter().zip(&curve.points) {
            assert_eq!(r.test_mse.to_bits(), p.test_mse.to_bits());
            assert_eq!(r.train_mse.to_bits(), p.train_mse.to_bits());
            assert_eq!(r.test_mse_sd, None);
        }
    }

    #[test]
    fn aggregate_of_one_has_zero_sd_column() {
        let curve = sample_curve();
        let agg = AggregateCurve::from_curves(&curve.regime, std::slice::from_ref(&curve)).unwrap();
        let back = read_curve_csv_from(curve_csv_string(&agg).unwrap().as_bytes()).unwrap();
        assert!(back.iter().all(|r| r.test_mse_sd == Some(0.0)));
    }

    #[test]
    fn csv_file_is_written_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let curve = sample_curve();
        write_curve_csv(&curve, &path).unwrap();
        write_curve_csv(&curve, &path).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert_eq!(read_curve_csv(&path).unwrap().len(), 12);
        let missing = dir.path().join("nope").join("c.csv");
        assert!(matches!(write_curve_csv(&curve, &missing), Err(Error::Io { .. })));
    }

    #[test]
    fn rejects_bad_csv() {
        assert!(matches!(read_curve_csv_from("a,b\n1,2\n".as_bytes()), Err(Error::Format { .. })));
        let bad = format!("{}\n0,L2,capacity,2,,1,x,0.1,,false\n", CSV_HEADER.join(","));
        assert!(matches!(
            read_curve_csv_from(bad.as_bytes()),
            Err(Error::Format { line: Some(2), .. })
        ));
    }

    #[test]
    fn svg_structure() {
        let curve = sample_curve();
        let lc = LabeledCurve::test_mse("test", &curve);
        let no_marker = SvgOptions {
            threshold_marker: false,
            ..Default::default()
        };
        let svg = String::from_utf8(render_svg(std::slice::from_ref(&lc), &no_marker).unwrap()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(!svg.contains("stroke-dasharray"));
        assert!(svg.contains(">L10<") && svg.contains(">RF50<"));
        assert!(svg.contains("tree phase") && svg.contains("ensemble phase"));

        let opts = SvgOptions {
            title: "Composite <trees>".into(),
            ..Default::default()
        };
        let a = render_svg(std::slice::from_ref(&lc), &opts).unwrap();
        let b = render_svg(std::slice::from_ref(&lc), &opts).unwrap();
        assert_eq!(a, b);
        let svg = String::from_utf8(a).unwrap();
        assert!(svg.contains("Composite &lt;trees&gt;"));
        let k = curve.threshold_index.unwrap();
        let x = format!("x1=\"{:.2}\"", tick_x(k, curve.points.len(), false));
        let marker = svg.lines().find(|l| l.contains("class=\"threshold\"")).unwrap();
        assert!(marker.contains(&x), "{marker} vs {x}");
        let tick = svg.lines().find(|l| l.contains(&format!(">{}<", curve.points[k].label))).unwrap();
        assert!(tick.contains(&x));
    }

    #[test]
    fn svg_errors() {
        assert!(matches!(render_svg(&[], &SvgOptions::default()), Err(Error::Usage(_))));
        let curve = sample_curve();
        let a = LabeledCurve::test_mse("a", &curve);
        let mut b = a.clone();
        b.labels.pop();
        b.values.pop();
        assert!(matches!(render_svg(&[a, b], &SvgOptions::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn summary_fields() {
        let curve = sample_curve();
        let s = summarize(&curve, Some(0.01)).unwrap();
        assert_eq!(s.n_points, 12);
        assert_eq!(s.threshold_index, curve.threshold_index);
        assert_eq!(s.phase_boundary, Some(6));
        assert_eq!(s.threshold_label.as_deref(), Some("L56"));
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"classification\""));
        assert_eq!(serde_json::from_str::<RegimeSummary>(&json).unwrap(), s);
    }

    proptest! {
        #[test]
        fn scaling_by_powers_of_two(v in prop::collection::vec(0.0f64..10.0, 3..20), tol in 0.0f64..2.0, e in -8i32..8) {
            let c = 2f64.powi(e);
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert_eq!(class(&v, tol), class(&scaled, tol * c));
        }

        #[test]
        fn constant_is_flat(c in -1e6f64..1e6, n in 3usize..30, tol in 1e-9f64..1.0) {
            prop_assert_eq!(class(&vec![c; n], tol), ShapeClass::Flat);
        }

        #[test]
        fn appending_near_run_extreme_keeps_class(
            v in prop::collection::vec(0.0f64..10.0, 3..20),
            tol in 0.01f64..2.0,
            frac in -1.0f64..0.999,
        ) {
            let base = classify_shape(&v, tol).unwrap();
            let last = *v.last().unwrap();
            let mut dup = v.clone();
            dup.push(last);
            prop_assert_eq!(class(&dup, tol), base.classification);
            let at_extreme = base.pivots.last().map_or(false, |p| p.index == v.len() - 1);
            prop_assume!(base.classification != ShapeClass::Flat && at_extreme);
            let mut ext = v.clone();
            ext.push(last + frac * tol);
            prop_assert_eq!(class(&ext, tol), base.classification);
        }

        #[test]
        fn pivots_are_valid(v in prop::collection::vec(-5.0f64..5.0, 3..30), tol in 0.0f64..1.0) {
            let s = classify_shape(&v, tol).unwrap();
            prop_assert!(s.pivots.iter().all(|p| p.index < v.len() && p.value == v[p.index]));
            prop_assert!(s.pivots.windows(2).all(|w| w[0].index < w[1].index));
            prop_assert_eq!(s.pivots.len(), if s.runs.is_empty() { 0 } else { s.runs.len() + 1 });
        }
    }
}
