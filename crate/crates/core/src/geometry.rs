//! Decision-circle and square pseudo-box geometry.
//!
//! A predicted center counts as a hit when it lies within radius `r` of the
//! ground-truth center. Box-based evaluators instead compare two axis-aligned
//! squares of side `a` centered on the predicted and true centers and require
//! `IoU >= alpha`. The set of center offsets passing the IoU test is a
//! four-lobed region; [`solve_box_size`] picks `a` so that this region has the
//! same area as the decision circle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::Annotation;

pub const DEFAULT_RADIUS: f64 = 12.0;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxGeometry {
    pub radius: f64,
    pub alpha: f64,
    pub side: f64,
}

impl BoxGeometry {
    pub fn from_radius(radius: f64, alpha: f64) -> Result<Self> {
        let side = solve_box_size(radius, alpha)?;
        Ok(Self {
            radius,
            alpha,
            side,
        })
    }
}

impl Default for BoxGeometry {
    fn default() -> Self {
        Self::from_radius(DEFAULT_RADIUS, DEFAULT_ALPHA).expect("default geometry is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

fn check_side(a: f64) -> Result<()> {
    if a > 0.0 && a.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("box side must be positive, got {a}")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn check_radius(r: f64) -> Result<()> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("radius must be positive, got {r}")))
    }
}

/// IoU of two axis-aligned squares of side `a` whose centers differ by `(dx, dy)`.
pub fn iou_square_offset(a: f64, dx: f64, dy: f64) -> Result<f64> {
    check_side(a)?;
    Ok(iou_unchecked(a, dx, dy))
}

#[inline]
pub(crate) fn iou_unchecked(a: f64, dx: f64, dy: f64) -> f64 {
    let (dx, dy) = (dx.abs(), dy.abs());
    if dx >= a || dy >= a {
        return 0.0;
    }
    let inter = (a - dx) * (a - dy);
    inter / (2.0 * a * a - inter)
}

/// Overlap area at which the IoU of two side-`a` squares equals `alpha`.
fn intersection_level(a: f64, alpha: f64) -> f64 {
    2.0 * a * a * alpha / (1.0 + alpha)
}

/// Upper boundary `dy(dx)` of the first-quadrant region where `IoU >= alpha`,
/// or 0 where the region has ended.
pub fn isocontour_boundary(a: f64, alpha: f64, dx: f64) -> f64 {
    let k = intersection_level(a, alpha);
    let dx = dx.abs();
    if dx >= a - k / a {
        return 0.0;
    }
    (a - k / (a - dx)).max(0.0)
}

/// Area of `{(dx, dy) >= 0 : IoU(dx, dy) >= alpha}`.
///
/// With `c = 2 alpha / (1 + alpha)` the region is bounded by
/// `(a - dx)(a - dy) = c a^2`, which integrates to `a^2 (1 - c + c ln c)`.
pub fn isocontour_area_quadrant(a: f64, alpha: f64) -> Result<f64> {
    check_side(a)?;
    check_alpha(alpha)?;
    Ok(a * a * quadrant_area_factor(alpha))
}

fn quadrant_area_factor(alpha: f64) -> f64 {
    let c = 2.0 * alpha / (1.0 + alpha);
    1.0 - c + c * c.ln()
}

/// Side of the square pseudo-box whose IoU>=alpha offset region has the area
/// of a radius-`r` disk. Solved by bisection.
pub fn solve_box_size(r: f64, alpha: f64) -> Result<f64> {
    check_radius(r)?;
    check_alpha(alpha)?;
    let target = std::f64::consts::PI * r * r / 4.0;
    let area = |a: f64| a * a * quadrant_area_factor(alpha);

    let (mut lo, mut hi) = (r, 10.0 * r);
    // [r, 10r] brackets the root for moderate alpha; widen for extreme ones.
    while area(lo) > target {
        lo *= 0.5;
    }
    while area(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if area(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// True iff the predicted center lies within distance `r` of the ground truth.
pub fn center_match(pred: &Annotation, gt: &Annotation, r: f64) -> bool {
    pred.distance(gt) <= r
}

/// Square box of side `a` centered on the annotation. Not clipped to any image.
pub fn center_to_box(c: &Annotation, a: f64) -> BoundingBox {
    let h = 0.5 * a;
    BoundingBox {
        x_min: c.cx - h,
        y_min: c.cy - h,
        x_max: c.cx + h,
        y_max: c.cy + h,
    }
}

/// Mismatch between the decision disk and the full IoU>=alpha offset region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    /// Symmetric-difference area divided by the disk area.
    pub fraction: f64,
    /// Error estimate of `fraction` from the quadrature.
    pub std_error: f64,
    pub disk_area: f64,
    pub region_area: f64,
    pub symmetric_difference_area: f64,
}

/// Area of the symmetric difference between the radius-`r` disk and the
/// IoU>=alpha offset region for side-`a` boxes, relative to the disk.
///
/// Both regions are symmetric under reflection in either axis, so one
/// quadrant is integrated: `4 * int |disk(x) - region(x)| dx`. The integrand
/// is split at the points where the two boundaries cross and each piece is
/// integrated with adaptive Simpson.
pub fn region_disagreement(r: f64, a: f64, alpha: f64) -> Result<Disagreement> {
    check_radius(r)?;
    check_side(a)?;
    check_alpha(alpha)?;

    let disk = |x: f64| (r * r - x * x).max(0.0).sqrt();
    let region = |x: f64| isocontour_boundary(a, alpha, x);
    let gap = |x: f64| disk(x) - region(x);

    let k = intersection_level(a, alpha);
    let region_end = a - k / a;
    let end = r.max(region_end);

    let mut breaks = vec![0.0, r.min(end), region_end.min(end), end];
    const SCAN: usize = 4096;
    let step = end / SCAN as f64;
    for i in 0..SCAN {
        let (x0, x1) = (i as f64 * step, (i + 1) as f64 * step);
        let (g0, g1) = (gap(x0), gap(x1));
        if g0 == 0.0 {
            breaks.push(x0);
        } else if g0.signum() != g1.signum() && g1 != 0.0 {
            breaks.push(bisect_root(&gap, x0, x1));
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|x, y| (*x - *y).abs() < 1e-14);

    let mut quadrant = 0.0;
    let mut err = 0.0;
    for w in breaks.windows(2) {
        if w[1] - w[0] <= 0.0 {
            continue;
        }
        let (v, e) = adaptive_simpson(&|x: f64| gap(x).abs(), w[0], w[1], 1e-12, 50);
        quadrant += v;
        err += e;
    }

    let disk_area = std::f64::consts::PI * r * r;
    let region_area = 4.0 * a * a * quadrant_area_factor(alpha);
    let sym = 4.0 * quadrant;
    Ok(Disagreement {
        fraction: sym / disk_area,
        std_error: 4.0 * err / disk_area,
        disk_area,
        region_area,
        symmetric_difference_area: sym,
    })
}

fn bisect_root(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let flo = f(lo).signum();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid).signum() == flo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Returns the integral and an estimate of its absolute error.
fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> (f64, f64) {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> (f64, f64) {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return (left + right + delta / 15.0, delta.abs() / 15.0);
    }
    let (l, le) = simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1);
    let (r, re) = simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
    (l + r, le + re)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn iou_examples() {
        assert_eq!(iou_square_offset(42.36, 0.0, 0.0).unwrap(), 1.0);
        // overlap 2x3 = 6, union 9 + 9 - 6 = 12
        assert!((iou_square_offset(3.0, 1.0, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(iou_square_offset(5.0, 5.0, 0.0).unwrap(), 0.0);
        assert!(iou_square_offset(0.0, 0.0, 0.0).is_err());
        assert!(iou_square_offset(-1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn half_alpha_boundary_matches_closed_curve() {
        let a = 42.36;
        for i in 0..50 {
            let dx = a / 3.0 * i as f64 / 50.0;
            let expected = a * (a - 3.0 * dx) / (3.0 * (a - dx));
            assert!((isocontour_boundary(a, 0.5, dx) - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn quadrant_area_examples() {
        assert!((isocontour_area_quadrant(3.0, 0.5).unwrap() - 0.5672).abs() < 1e-3);
        assert!(isocontour_area_quadrant(10.0, 1.0 - 1e-9).unwrap() < 1e-6);
        let quarter_disk = 36.0 * PI;
        let got = isocontour_area_quadrant(42.36, 0.5).unwrap();
        assert!((got - quarter_disk).abs() / quarter_disk < 1e-3);
        assert!(isocontour_area_quadrant(3.0, 1.0).is_err());
        assert!(isocontour_area_quadrant(3.0, 0.0).is_err());
    }

    #[test]
    fn box_size_for_default_circle() {
        let a = solve_box_size(12.0, 0.5).unwrap();
        assert!((a - 42.36).abs() < 0.01, "a = {a}");
        let closed = 12.0 * (3.0 * PI / (4.0 * (1.0 - 2.0 * 1.5f64.ln()))).sqrt();
        assert!((a - closed).abs() < 1e-6);
        let a2 = solve_box_size(24.0, 0.5).unwrap();
        assert!((a2 - 2.0 * a).abs() < 1e-9);
    }

    #[test]
    fn box_size_for_extreme_alpha() {
        for alpha in [0.01, 0.2, 0.9, 0.99] {
            let a = solve_box_size(12.0, alpha).unwrap();
            let area = isocontour_area_quadrant(a, alpha).unwrap();
            assert!((area - 36.0 * PI).abs() / (36.0 * PI) < 1e-9, "alpha {alpha}");
        }
    }

    #[test]
    fn center_match_examples() {
        let gt = Annotation::new(50.0, 50.0);
        assert!(center_match(&Annotation::new(55.0, 50.0), &gt, 12.0));
        assert!(center_match(&gt, &gt, 12.0));
        assert!(!center_match(&Annotation::new(70.0, 50.0), &gt, 12.0));
    }

    #[test]
    fn center_to_box_examples() {
        let b = center_to_box(&Annotation::new(10.0, 10.0), 42.36);
        for (got, want) in [
            (b.x_min, -11.18),
            (b.y_min, -11.18),
            (b.x_max, 31.18),
            (b.y_max, 31.18),
        ] {
            assert!((got - want).abs() < 1e-9);
        }
        let b = center_to_box(&Annotation::new(56.0, 56.0), 42.36);
        assert!((b.x_min - 34.82).abs() < 1e-9 && (b.x_max - 77.18).abs() < 1e-9);
        assert!((b.width() - 42.36).abs() < 1e-12 && (b.height() - 42.36).abs() < 1e-12);
        assert_eq!(b.center(), (56.0, 56.0));
    }

    #[test]
    fn disagreement_grows_with_mismatched_box() {
        let matched = region_disagreement(12.0, 42.36, 0.5).unwrap();
        let oversized = region_disagreement(12.0, 84.72, 0.5).unwrap();
        assert!(matched.fraction < 0.2, "{matched:?}");
        assert!(oversized.fraction > matched.fraction);
        assert!((matched.region_area - matched.disk_area).abs() / matched.disk_area < 1e-3);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_even(a in 0.1f64..100.0, dx in -120.0f64..120.0, dy in -120.0f64..120.0) {
            let v = iou_square_offset(a, dx, dy).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou_square_offset(a, dy, dx).unwrap());
            prop_assert_eq!(v, iou_square_offset(a, -dx, dy).unwrap());
            prop_assert_eq!(v, iou_square_offset(a, dx, -dy).unwrap());
        }

        #[test]
        fn iou_decreases_with_offset(a in 1.0f64..100.0, f1 in 0.0f64..1.0, f2 in 0.0f64..1.0, fy in 0.0f64..1.0) {
            let (lo, hi) = if f1 < f2 { (f1, f2) } else { (f2, f1) };
            let dy = fy * a * 0.99;
            let near = iou_square_offset(a, lo * a, dy).unwrap();
            let far = iou_square_offset(a, hi * a, dy).unwrap();
            prop_assert!(far <= near);
        }

        #[test]
        fn box_size_scales_linearly(r in 0.5f64..50.0, k in 0.1f64..10.0) {
            let a = solve_box_size(r, 0.5).unwrap();
            let ak = solve_box_size(k * r, 0.5).unwrap();
            prop_assert!((ak - k * a).abs() <= 1e-9 * k * a);
        }

        #[test]
        fn center_match_symmetric(x1 in -50.0f64..50.0, y1 in -50.0f64..50.0, x2 in -50.0f64..50.0, y2 in -50.0f64..50.0) {
            let (p, g) = (Annotation::new(x1, y1), Annotation::new(x2, y2));
            prop_assert_eq!(center_match(&p, &g, 12.0), center_match(&g, &p, 12.0));
        }
    }
}
