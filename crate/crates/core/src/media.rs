//! Coefficient fields `a(x, ξ) = ā(x) + Σ aᵢ(x) ξᵢ`: the trigonometric
//! fluctuation families of the experiments, a seeded high-contrast mean
//! generator, and a plain-text raster importer for external permeability
//! data.
//!
//! All fields are sampled at fine-cell centers. A [`CoefficientModel`]
//! validates uniform ellipticity, `ā − Σᵢ |aᵢ| > 0` cellwise, which keeps
//! every realization with `ξ ∈ [−1,1]^r` positive.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::fem::CellField;
use crate::grid::GridPair;

/// The four closed-form fluctuation shapes used by the experiments. Writing
/// `s = 2π/ε`, each field is `amplitude · (2 + P·num) / (2 − P·den)` with:
///
/// * `DiagSin`: `num = sin(s(x₁−x₂))`, `den = cos(s(x₁−x₂))`
/// * `AxisCos`: `num = cos(s·x₁)`, `den = sin(s·x₂)`
/// * `Shifted`: `num = sin(s(x₁−½))`, `den = cos(s(x₂−½))`
/// * `DiagSum`: `num = sin(s(x₁−x₂))`, `den = cos(s(x₁+x₂))`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrigVariant {
    DiagSin,
    AxisCos,
    Shifted,
    DiagSum,
}

/// Samples one trigonometric fluctuation field at fine-cell centers.
pub fn trig_field(
    g: &GridPair,
    amplitude: f64,
    p: f64,
    eps: f64,
    variant: TrigVariant,
) -> Result<CellField> {
    if p.abs() >= 2.0 {
        return Err(invalid("trig_field", format!("|P| = {} >= 2 makes the denominator vanish", p.abs())));
    }
    if eps <= 0.0 {
        return Err(invalid("trig_field", format!("eps must be positive, got {eps}")));
    }
    let s = 2.0 * std::f64::consts::PI / eps;
    Ok(CellField::from_fn(g, |x, y| {
        let (num, den) = match variant {
            TrigVariant::DiagSin => ((s * (x - y)).sin(), (s * (x - y)).cos()),
            TrigVariant::AxisCos => ((s * x).cos(), (s * y).sin()),
            TrigVariant::Shifted => ((s * (x - 0.5)).sin(), (s * (y - 0.5)).cos()),
            TrigVariant::DiagSum => ((s * (x - y)).sin(), (s * (x + y)).cos()),
        };
        amplitude * (2.0 + p * num) / (2.0 - p * den)
    }))
}

/// Synthetic high-contrast mean field: a positive background crossed by
/// axis-aligned channels at the contrast value. Deterministic for a given
/// seed; the generated field attains both the background and the contrast
/// value.
pub fn high_contrast_mean(
    g: &GridPair,
    n_channels: usize,
    background: f64,
    contrast: f64,
    seed: u64,
) -> Result<CellField> {
    if background <= 0.0 || contrast <= background {
        return Err(invalid(
            "high_contrast_mean",
            format!("need contrast > background > 0, got ({background}, {contrast})"),
        ));
    }
    let n = g.n_fine();
    let mut field = CellField::constant(g, background);
    if n_channels == 0 {
        return Ok(field);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Channel width scales with the grid but stays well below a grid line so
    // background cells always remain.
    let width = (n / 20).max(1);
    for _ in 0..n_channels {
        let horizontal = rng.random::<bool>();
        let lane = rng.random_range(0..n.saturating_sub(width).max(1));
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        let (lo, hi) = (a.min(b), a.max(b).max(a.min(b) + n / 4).min(n - 1));
        for t in lo..=hi {
            for w in 0..width {
                let (cx, cy) = if horizontal { (t, lane + w) } else { (lane + w, t) };
                field.values[g.cell_index(cx, cy)] = contrast;
            }
        }
    }
    // Keep the contract even for adversarial draws: pin one background cell
    // and one contrast cell.
    field.values[0] = background;
    let last = g.cell_index(n - 1, n - 1);
    if !field.values.iter().any(|&v| v == contrast) {
        field.values[last] = contrast;
    }
    Ok(field)
}

/// Imports a plain-text matrix (whitespace-separated rows, top row = largest
/// y) as a fine-cell field by nearest-cell resampling, multiplied by `scale`.
/// The raster dimensions must divide the fine-cell grid.
pub fn raster_import(path: &str, g: &GridPair, scale: f64) -> Result<CellField> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.to_string(), msg: e.to_string() })?;
    parse_raster(&text, g, scale).map_err(|e| match e {
        Error::InvalidArgument { msg, .. } => Error::Io { path: path.to_string(), msg },
        other => other,
    })
}

fn parse_raster(text: &str, g: &GridPair, scale: f64) -> Result<CellField> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| {
                invalid("raster_import", format!("line {}: unparsable value {tok:?}", lineno + 1))
            })?;
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(
                    "raster_import",
                    format!("line {}: non-positive value {v}", lineno + 1),
                ));
            }
            row.push(v * scale);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(invalid("raster_import", "empty raster"));
    }
    let ny = rows.len();
    let nx = rows[0].len();
    if rows.iter().any(|r| r.len() != nx) {
        return Err(invalid("raster_import", "ragged rows"));
    }
    let n = g.n_fine();
    if n % nx != 0 || n % ny != 0 {
        return Err(invalid(
            "raster_import",
            format!("raster {nx}x{ny} does not divide the {n}x{n} fine-cell grid"),
        ));
    }
    let (bx, by) = (n / nx, n / ny);
    let mut values = Vec::with_capacity(n * n);
    for cy in 0..n {
        // Top row of the file is the largest y.
        let ry = ny - 1 - cy / by;
        for cx in 0..n {
            values.push(rows[ry][cx / bx]);
        }
    }
    Ok(CellField { n, values })
}

/// The coefficient `a(x, ξ) = ā(x) + Σᵢ aᵢ(x) ξᵢ` with validated uniform
/// ellipticity.
#[derive(Debug, Clone)]
pub struct CoefficientModel {
    /// Mean field ā.
    pub abar: CellField,
    /// Fluctuation fields a₁..a_r.
    pub modes: Vec<CellField>,
}

impl CoefficientModel {
    /// Validates cellwise positivity of `ā − Σ |aᵢ|` and dimension
    /// consistency.
    pub fn new(abar: CellField, modes: Vec<CellField>) -> Result<Self> {
        let n = abar.n;
        for (i, m) in modes.iter().enumerate() {
            if m.n != n {
                return Err(invalid(
                    "CoefficientModel",
                    format!("fluctuation {i} has {} cells per side, mean has {n}", m.n),
                ));
            }
        }
        for cell in 0..n * n {
            let worst = abar.values[cell]
                - modes.iter().map(|m| m.values[cell].abs()).sum::<f64>();
            if !(worst > 0.0) {
                return Err(Error::NonPositiveCoefficient {
                    cell: (cell % n, cell / n),
                    value: worst,
                });
            }
        }
        Ok(CoefficientModel { abar, modes })
    }

    /// Number of random variables.
    pub fn r(&self) -> usize {
        self.modes.len()
    }

    /// One realization `ā + Σ aᵢ ξᵢ`.
    pub fn realize(&self, xi: &[f64]) -> CellField {
        debug_assert_eq!(xi.len(), self.r());
        let mut out = self.abar.clone();
        for (m, &x) in self.modes.iter().zip(xi) {
            for (o, v) in out.values.iter_mut().zip(&m.values) {
                *o += v * x;
            }
        }
        out
    }
}
