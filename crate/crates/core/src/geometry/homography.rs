use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in continuous image coordinates (`x` right, `y` down); the center
/// of pixel `(row, col)` is `(col + 0.5, row + 0.5)`.
pub type Point = [f64; 2];

const MIN_DET: f64 = 1e-12;

/// Projective 3x3 transform, normalized so `m[2][2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Homography {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    pub fn scaling(s: f64) -> Self {
        Homography {
            m: [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Normalizes by `m[2][2]` and checks invertibility.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let w = m[2][2];
        if w.abs() < MIN_DET || !w.is_finite() {
            return Err(Error::SingularConfiguration(
                "homography has a vanishing m[2][2]".into(),
            ));
        }
        let mut n = m;
        for row in &mut n {
            for v in row.iter_mut() {
                *v /= w;
            }
        }
        let h = Homography { m: n };
        if h.det().abs() <= MIN_DET || !h.det().is_finite() {
            return Err(Error::SingularConfiguration(format!(
                "homography determinant {} is not invertible",
                h.det()
            )));
        }
        Ok(h)
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.m;
        let x = m[0][0] * p[0] + m[0][1] * p[1] + m[0][2];
        let y = m[1][0] * p[0] + m[1][1] * p[1] + m[1][2];
        let w = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
        [x / w, y / w]
    }

    pub fn inverse(&self) -> Result<Self> {
        let d = self.det();
        if d.abs() <= MIN_DET || !d.is_finite() {
            return Err(Error::SingularConfiguration(format!(
                "cannot invert homography with determinant {d}"
            )));
        }
        let m = &self.m;
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        let mut inv = adj;
        for row in &mut inv {
            for v in row.iter_mut() {
                *v /= d;
            }
        }
        Self::from_matrix(inv)
    }

    /// `self * rhs` (apply `rhs` first).
    pub fn compose(&self, rhs: &Homography) -> Homography {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * rhs.m[k][j]).sum();
            }
        }
        // Products of normalized, invertible matrices with a nonzero [2][2]
        // term stay valid; fall back to the raw product otherwise.
        Homography::from_matrix(out).unwrap_or(Homography { m: out })
    }

    /// Conjugates by `diag(s, s, 1)`: `S^-1 * self * S`.
    pub fn conjugate_scale(&self, s: f64) -> Homography {
        let m = &self.m;
        Homography {
            m: [
                [m[0][0], m[0][1], m[0][2] / s],
                [m[1][0], m[1][1], m[1][2] / s],
                [m[2][0] * s, m[2][1] * s, m[2][2]],
            ],
        }
    }
}

fn collinear(a: Point, b: Point, c: Point) -> bool {
    let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let scale = (b[0] - a[0]).hypot(b[1] - a[1]) * (c[0] - a[0]).hypot(c[1] - a[1]);
    cross.abs() <= 1e-10 * scale.max(1e-300)
}

fn general_position(p: &[Point; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES
        .iter()
        .all(|t| !collinear(p[t[0]], p[t[1]], p[t[2]]))
}

/// Solves the 8-unknown direct linear system mapping `src[i]` to `dst[i]`.
pub fn solve_homography(src: &[Point; 4], dst: &[Point; 4]) -> Result<Homography> {
    if !general_position(src) || !general_position(dst) {
        return Err(Error::SingularConfiguration(
            "three of the four points are collinear".into(),
        ));
    }
    // Rows: [x y 1 0 0 0 -x u -y u | u] and [0 0 0 x y 1 -x v -y v | v].
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let [x, y] = src[i];
        let [u, v] = dst[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v, v];
    }
    let h = gauss_solve(a)?;
    Homography::from_matrix([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
}

/// Gaussian elimination with partial pivoting on an augmented 8x9 system.
fn gauss_solve(mut a: [[f64; 9]; 8]) -> Result<[f64; 8]> {
    let n = 8;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::SingularConfiguration(
                "homography system is singular".into(),
            ));
        }
        a.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..=n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut x = [0.0; 8];
    for row in (0..n).rev() {
        let mut s = a[row][n];
        for k in row + 1..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Ok(x)
}
