//! Separable resampling on 2-D grids.
//!
//! Bilinear interpolation uses half-pixel centers with edge clamping, i.e. the
//! `align_corners = false` convention. Every plan also exposes its adjoint so
//! gradients can be pulled back from the output grid to the input grid.

use ndarray::{Array2, ArrayView2};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Precomputed bilinear map from a `src` grid to a `dst` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearPlan {
    src: (usize, usize),
    dst: (usize, usize),
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl BilinearPlan {
    /// Panics if any dimension is zero.
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        assert!(
            src.0 > 0 && src.1 > 0 && dst.0 > 0 && dst.1 > 0,
            "empty grid"
        );
        Self {
            src,
            dst,
            rows: axis_taps(src.0, dst.0),
            cols: axis_taps(src.1, dst.1),
        }
    }

    pub fn src(&self) -> (usize, usize) {
        self.src
    }

    pub fn dst(&self) -> (usize, usize) {
        self.dst
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    pub fn apply(&self, input: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(input.dim(), self.src, "input grid does not match plan");
        if self.is_identity() {
            return input.to_owned();
        }
        // Interpolate along columns first, then rows.
        let mut tmp = Array2::<f64>::zeros((self.src.0, self.dst.1));
        for r in 0..self.src.0 {
            for (c, t) in self.cols.iter().enumerate() {
                tmp[[r, c]] = input[[r, t.lo]] * (1.0 - t.frac) + input[[r, t.hi]] * t.frac;
            }
        }
        let mut out = Array2::<f64>::zeros(self.dst);
        for (r, t) in self.rows.iter().enumerate() {
            for c in 0..self.dst.1 {
                out[[r, c]] = tmp[[t.lo, c]] * (1.0 - t.frac) + tmp[[t.hi, c]] * t.frac;
            }
        }
        out
    }

    /// Transpose of [`apply`](Self::apply): maps a gradient on the output grid
    /// back onto the input grid.
    pub fn adjoint(&self, grad: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(grad.dim(), self.dst, "gradient grid does not match plan");
        if self.is_identity() {
            return grad.to_owned();
        }
        let mut tmp = Array2::<f64>::zeros((self.src.0, self.dst.1));
        for (r, t) in self.rows.iter().enumerate() {
            for c in 0..self.dst.1 {
                let g = grad[[r, c]];
                tmp[[t.lo, c]] += g * (1.0 - t.frac);
                tmp[[t.hi, c]] += g * t.frac;
            }
        }
        let mut out = Array2::<f64>::zeros(self.src);
        for r in 0..self.src.0 {
            for (c, t) in self.cols.iter().enumerate() {
                let g = tmp[[r, c]];
                out[[r, t.lo]] += g * (1.0 - t.frac);
                out[[r, t.hi]] += g * t.frac;
            }
        }
        out
    }
}

pub fn resize_bilinear(input: ArrayView2<f64>, dst: (usize, usize)) -> Array2<f64> {
    BilinearPlan::new(input.dim(), dst).apply(input)
}

/// Nearest-neighbour resize using half-pixel centers. Preserves binary values.
pub fn resize_nearest<T: Copy>(input: ArrayView2<T>, dst: (usize, usize)) -> Array2<T> {
    let (sh, sw) = input.dim();
    let pick = |d: usize, src: usize, out: usize| -> usize {
        ((((d as f64) + 0.5) * src as f64 / out as f64).floor() as usize).min(src - 1)
    };
    Array2::from_shape_fn(dst, |(r, c)| {
        input[[pick(r, sh, dst.0), pick(c, sw, dst.1)]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_plan_copies() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(resize_bilinear(a.view(), (2, 2)), a);
    }

    #[test]
    fn constant_input_stays_constant() {
        let a = Array2::from_elem((3, 5), 0.25);
        let out = resize_bilinear(a.view(), (17, 9));
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_to_four_matches_half_pixel_convention() {
        // Output centers at 0.25, 0.75, 1.25, 1.75 in input pixel units map to
        // source positions -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
        let a = array![[0.0, 1.0]];
        let out = resize_bilinear(a.view(), (1, 4));
        let expected = [0.0, 0.25, 0.75, 1.0];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let plan = BilinearPlan::new((3, 4), (7, 5));
        let x = Array2::from_shape_fn((3, 4), |(r, c)| (r * 4 + c) as f64 * 0.37 - 1.0);
        let y = Array2::from_shape_fn((7, 5), |(r, c)| ((r + 2 * c) as f64).sin());
        let lhs = (&plan.apply(x.view()) * &y).sum();
        let rhs = (&x * &plan.adjoint(y.view())).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn nearest_keeps_binary_values() {
        let a = array![[0u8, 1], [1, 0]];
        let out = resize_nearest(a.view(), (4, 4));
        assert_eq!(out[[0, 0]], 0);
        assert_eq!(out[[0, 3]], 1);
        assert_eq!(out[[3, 0]], 1);
        assert_eq!(out[[3, 3]], 0);
    }
}
