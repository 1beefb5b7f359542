//! Persistence images: a fixed-length, differentiable view of a diagram.
//!
//! A point (b, d) maps to (b, p) with p = d - b, carries weight p, and
//! deposits a normalized Gaussian bump onto a grid of pixel centers. The
//! output is row-major over (persistence row, birth column). Gradients with
//! respect to each input point are analytic, which is what makes diagram
//! terms trainable end to end.

use crate::error::{Error, Result};
use crate::persistence::PersistenceDiagram;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImageParams {
    /// Pixels along the birth axis.
    pub grid_w: usize,
    /// Pixels along the persistence axis.
    pub grid_h: usize,
    pub birth_range: (f64, f64),
    pub pers_range: (f64, f64),
    pub bandwidth: f64,
}

/// Fraction of the data span added as margin and used as the kernel width.
const FIT_MARGIN: f64 = 0.05;
/// Spans below this are treated as degenerate and replaced by 1.0.
const DEGENERATE_SPAN: f64 = 1e-9;

impl ImageParams {
    pub fn output_len(&self) -> usize {
        self.grid_w * self.grid_h
    }

    /// Freezes grid bounds and bandwidth from a set of diagrams (normally the
    /// training set): min/max plus a 5% margin per axis, bandwidth 5% of the
    /// persistence span. Diagrams must already be finite.
    pub fn fit(diagrams: &[&PersistenceDiagram], grid_w: usize, grid_h: usize) -> Result<ImageParams> {
        if grid_w == 0 || grid_h == 0 {
            return Err(Error::invalid("image grid must have at least one pixel per axis"));
        }
        let mut b_lo = f64::INFINITY;
        let mut b_hi = f64::NEG_INFINITY;
        let mut p_lo = f64::INFINITY;
        let mut p_hi = f64::NEG_INFINITY;
        let mut any = false;
        for d in diagrams {
            for &(birth, death) in &d.pairs {
                if !death.is_finite() {
                    return Err(Error::invalid(
                        "cannot fit image bounds over infinite deaths; truncate upstream",
                    ));
                }
                any = true;
                let pers = death - birth;
                b_lo = b_lo.min(birth);
                b_hi = b_hi.max(birth);
                p_lo = p_lo.min(pers);
                p_hi = p_hi.max(pers);
            }
        }
        if !any {
            (b_lo, b_hi, p_lo, p_hi) = (0.0, 1.0, 0.0, 1.0);
        }
        let mut b_span = b_hi - b_lo;
        if b_span < DEGENERATE_SPAN {
            b_span = 1.0;
        }
        let mut p_span = p_hi - p_lo;
        if p_span < DEGENERATE_SPAN {
            p_span = 1.0;
        }
        Ok(ImageParams {
            grid_w,
            grid_h,
            birth_range: (b_lo - FIT_MARGIN * b_span, b_hi + FIT_MARGIN * b_span),
            pers_range: (p_lo - FIT_MARGIN * p_span, p_hi + FIT_MARGIN * p_span),
            bandwidth: FIT_MARGIN * p_span,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.grid_w == 0 || self.grid_h == 0 {
            return Err(Error::invalid("image grid must have at least one pixel per axis"));
        }
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::invalid(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        for (lo, hi, name) in [
            (self.birth_range.0, self.birth_range.1, "birth"),
            (self.pers_range.0, self.pers_range.1, "persistence"),
        ] {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::invalid(format!(
                    "{name} range [{lo}, {hi}] must be finite and increasing"
                )));
            }
        }
        Ok(())
    }

    fn birth_center(&self, ix: usize) -> f64 {
        let (lo, hi) = self.birth_range;
        lo + (ix as f64 + 0.5) * (hi - lo) / self.grid_w as f64
    }

    fn pers_center(&self, iy: usize) -> f64 {
        let (lo, hi) = self.pers_range;
        lo + (iy as f64 + 0.5) * (hi - lo) / self.grid_h as f64
    }

    pub fn pixel_area(&self) -> f64 {
        let bw = (self.birth_range.1 - self.birth_range.0) / self.grid_w as f64;
        let ph = (self.pers_range.1 - self.pers_range.0) / self.grid_h as f64;
        bw * ph
    }
}

fn check_finite(d: &PersistenceDiagram) -> Result<()> {
    if d.pairs.iter().any(|&(_, death)| !death.is_finite()) {
        return Err(Error::invalid(
            "diagram has infinite deaths; truncate upstream before vectorizing",
        ));
    }
    Ok(())
}

/// The persistence image of a finite diagram, length grid_w * grid_h,
/// row-major over (persistence row, birth column).
pub fn vectorize(d: &PersistenceDiagram, params: &ImageParams) -> Result<Vec<f64>> {
    params.validate()?;
    check_finite(d)?;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * params.bandwidth * params.bandwidth);
    let inv2s2 = 1.0 / (2.0 * params.bandwidth * params.bandwidth);
    let mut out = vec![0.0; params.output_len()];
    for &(b, death) in &d.pairs {
        let p = death - b;
        for iy in 0..params.grid_h {
            let cy = params.pers_center(iy);
            let u2 = cy - p;
            for ix in 0..params.grid_w {
                let cx = params.birth_center(ix);
                let u1 = cx - b;
                let g = norm * (-(u1 * u1 + u2 * u2) * inv2s2).exp();
                out[iy * params.grid_w + ix] += p * g;
            }
        }
    }
    Ok(out)
}

/// Gradient of an upstream scalar with respect to each diagram point:
/// returns (dL/d birth, dL/d death) per point, where `upstream` holds
/// dL/d pixel for the image produced by `vectorize`.
pub fn vectorize_gradient(
    d: &PersistenceDiagram,
    params: &ImageParams,
    upstream: &[f64],
) -> Result<Vec<(f64, f64)>> {
    params.validate()?;
    check_finite(d)?;
    if upstream.len() != params.output_len() {
        return Err(Error::invalid(format!(
            "upstream length {} does not match image length {}",
            upstream.len(),
            params.output_len()
        )));
    }
    let s2 = params.bandwidth * params.bandwidth;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * s2);
    let inv2s2 = 1.0 / (2.0 * s2);
    let mut grads = Vec::with_capacity(d.pairs.len());
    for &(b, death) in &d.pairs {
        let p = death - b;
        let mut db = 0.0;
        let mut dd = 0.0;
        for iy in 0..params.grid_h {
            let cy = params.pers_center(iy);
            let u2 = cy - p;
            for ix in 0..params.grid_w {
                let cx = params.birth_center(ix);
                let u1 = cx - b;
                let g = norm * (-(u1 * u1 + u2 * u2) * inv2s2).exp();
                let up = upstream[iy * params.grid_w + ix];
                // f = p * g(u1, u2); u1 = cx - b, u2 = cy - (death - b).
                db += up * (-g + p * g * (u1 - u2) / s2);
                dd += up * (g + p * g * u2 / s2);
            }
        }
        grads.push((db, dd));
    }
    Ok(grads)
}
