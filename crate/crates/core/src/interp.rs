//! Piecewise-linear interpolation on sorted and uniform 1D meshes.

/// Linear interpolation of `(xs, ys)` at `x`, `xs` strictly increasing. Outside
/// the mesh the end segments are extended and the flag is set.
pub fn interp_sorted(xs: &[f64], ys: &[f64], x: f64) -> (f64, bool) {
    let n = xs.len();
    if n == 1 {
        return (ys[0], x != xs[0]);
    }
    let extrapolated = x < xs[0] || x > xs[n - 1];
    let j = match xs.partition_point(|&v| v <= x) {
        0 => 0,
        p if p >= n => n - 2,
        p => p - 1,
    };
    let w = (x - xs[j]) / (xs[j + 1] - xs[j]);
    (ys[j] + w * (ys[j + 1] - ys[j]), extrapolated)
}

/// Uniform mesh `lo + j h`, `j = 0..len`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Uniform {
    pub lo: f64,
    pub h: f64,
    pub len: usize,
}

impl Uniform {
    pub fn new(lo: f64, h: f64, len: usize) -> Self {
        Self { lo, h, len }
    }

    /// Mesh covering `[lo, hi]` with step `h`.
    pub fn covering(lo: f64, hi: f64, h: f64) -> Self {
        let len = ((hi - lo) / h + 1e-9).floor() as usize + 1;
        Self { lo, h, len }
    }

    pub fn point(&self, j: usize) -> f64 {
        self.lo + self.h * j as f64
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|j| self.point(j)).collect()
    }

    pub fn hi(&self) -> f64 {
        self.point(self.len - 1)
    }

    /// Linear interpolation of `vals` at `x`, extending the end segments.
    pub fn interp(&self, vals: &[f64], x: f64) -> (f64, bool) {
        let s = (x - self.lo) / self.h;
        let extrapolated = s < -1e-12 || s > (self.len - 1) as f64 + 1e-12;
        let j = (s.floor().max(0.0) as usize).min(self.len - 2);
        let w = s - j as f64;
        (vals[j] + w * (vals[j + 1] - vals[j]), extrapolated)
    }

    /// Left neighbour index and weight, clamped to the mesh.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let s = (x - self.lo) / self.h;
        let j = (s.floor().max(0.0) as usize).min(self.len - 2);
        (j, s - j as f64)
    }
}

/// First and second differences at `j`: central in the interior, one-sided at
/// the two end points. Both are exact on affine data.
pub fn derivatives(u: &[f64], h: f64, j: usize) -> (f64, f64) {
    let n = u.len();
    if j == 0 {
        let d1 = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * h);
        let d2 = (u[0] - 2.0 * u[1] + u[2]) / (h * h);
        (d1, d2)
    } else if j == n - 1 {
        let d1 = (3.0 * u[n - 1] - 4.0 * u[n - 2] + u[n - 3]) / (2.0 * h);
        let d2 = (u[n - 1] - 2.0 * u[n - 2] + u[n - 3]) / (h * h);
        (d1, d2)
    } else {
        let d1 = (u[j + 1] - u[j - 1]) / (2.0 * h);
        let d2 = (u[j + 1] - 2.0 * u[j] + u[j - 1]) / (h * h);
        (d1, d2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_data_is_reproduced() {
        let xs = [0.0, 0.5, 1.5, 2.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        for x in [-1.0, 0.2, 1.0, 1.9, 3.0] {
            let (v, ex) = interp_sorted(&xs, &ys, x);
            assert!((v - (2.0 * x - 1.0)).abs() < 1e-14);
            assert_eq!(ex, !(0.0..=2.0).contains(&x));
        }
        let m = Uniform::covering(-1.0, 1.0, 0.25);
        assert_eq!(m.len, 9);
        let vals: Vec<f64> = m.points().iter().map(|x| 3.0 * x + 0.5).collect();
        for x in [-1.3, -0.9, 0.0, 0.99, 1.2] {
            assert!((m.interp(&vals, x).0 - (3.0 * x + 0.5)).abs() < 1e-13);
        }
        for j in 0..m.len {
            let (d1, d2) = derivatives(&vals, m.h, j);
            assert!((d1 - 3.0).abs() < 1e-12 && d2.abs() < 1e-10);
        }
    }
}
