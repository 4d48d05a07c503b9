//! Finite frames for R^d.
//!
//! A [`Frame`] stores its `N` elements as the rows of an `N x d` matrix.
//! Harmonic frames are built from trigonometric rows and are tight with
//! bound `A = N/d`; explicit frames can be arbitrary spanning sets of unit
//! vectors. The module also provides the frame operator, analysis and dual
//! synthesis, frame variation along a permutation, and a constructive
//! ordering whose variation obeys the `4 sqrt(d+3) (N^(1-1/d) - 1)` bound.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows of a frame must have unit norm to within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-12;

/// Max-entry tolerance used when tagging a frame as tight.
pub const TIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameKind {
    Harmonic,
    Explicit,
}

/// A finite unit-norm frame for R^d.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    vectors: DMatrix<f64>,
    kind: FrameKind,
    tight: bool,
}

/// Outcome of [`verify_funtf`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FuntfReport {
    pub unit_norm_ok: bool,
    pub tight_ok: bool,
    /// `N/d` when the frame is tight, `None` otherwise.
    pub frame_bound_a: Option<f64>,
    pub max_norm_deviation: f64,
    pub max_tight_deviation: f64,
}

impl FuntfReport {
    pub fn is_funtf(&self) -> bool {
        self.unit_norm_ok && self.tight_ok
    }
}

impl Frame {
    /// The real harmonic frame with `n` elements in R^d.
    ///
    /// Even `d = 2h`: row k is `sqrt(2/d) [cos(2 pi j k/N), sin(2 pi j k/N)]`
    /// for `j = 1..=h`. Odd `d = 2h+1` prepends the constant `1/sqrt(d)`.
    /// When `N = d` with `d` even the top frequency `j = h` aliases
    /// (`sin(pi k) = 0`), so that one case uses half-integer frequencies
    /// `j - 1/2`, which is tight for every `N >= d`.
    pub fn harmonic(d: usize, n: usize) -> Result<Self> {
        if d < 2 || n < d {
            return Err(Error::InvalidArgument(format!(
                "harmonic frame needs 2 <= d <= N, got d = {d}, N = {n}"
            )));
        }
        let odd = d % 2 == 1;
        let shift = if !odd && n == d { 0.5 } else { 0.0 };
        let scale = (2.0 / d as f64).sqrt();
        let constant = 1.0 / (d as f64).sqrt();
        let vectors = DMatrix::from_fn(n, d, |k, col| {
            if odd && col == 0 {
                return constant;
            }
            let c = if odd { col - 1 } else { col };
            let freq = (c / 2 + 1) as f64 - shift;
            let angle = 2.0 * PI * freq * k as f64 / n as f64;
            if c % 2 == 0 {
                scale * angle.cos()
            } else {
                scale * angle.sin()
            }
        });
        let frame = Frame {
            vectors,
            kind: FrameKind::Harmonic,
            tight: true,
        };
        let report = frame.verify(TIGHT_TOL);
        if !report.is_funtf() {
            // Construction bug, not a caller error.
            return Err(Error::NotTight {
                deviation: report.max_tight_deviation,
            });
        }
        Ok(frame)
    }

    /// A frame given by its rows. Rows must be unit vectors and `N >= d >= 2`.
    pub fn explicit(vectors: DMatrix<f64>) -> Result<Self> {
        let (n, d) = vectors.shape();
        if d < 2 || n < d {
            return Err(Error::InvalidArgument(format!(
                "frame needs 2 <= d <= N, got d = {d}, N = {n}"
            )));
        }
        if let Some((i, norm)) = vectors
            .row_iter()
            .map(|r| r.norm())
            .enumerate()
            .find(|(_, norm)| (norm - 1.0).abs() > UNIT_NORM_TOL)
        {
            return Err(Error::InvalidArgument(format!(
                "frame row {i} has norm {norm}, expected 1"
            )));
        }
        let tight = tight_deviation(&vectors) <= TIGHT_TOL;
        Ok(Frame {
            vectors,
            kind: FrameKind::Explicit,
            tight,
        })
    }

    /// Dimension `d` of the ambient space.
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Number of frame elements `N`.
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn kind(&self) -> FrameKind {
        self.kind
    }

    /// Whether the frame operator equals `(N/d) I` within [`TIGHT_TOL`].
    pub fn is_tight(&self) -> bool {
        self.tight
    }

    /// Frame elements as rows of an `N x d` matrix.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn element(&self, i: usize) -> DVector<f64> {
        self.vectors.row(i).transpose()
    }

    /// Frame bound `A = N/d` of a FUNTF.
    pub fn tight_bound(&self) -> f64 {
        self.len() as f64 / self.dim() as f64
    }

    /// Rows reordered so that row `k` is `e_{p(k)}`.
    pub fn permuted_vectors(&self, p: &Permutation) -> DMatrix<f64> {
        if p.is_identity() {
            return self.vectors.clone();
        }
        self.vectors.select_rows(p.order())
    }

    pub fn frame_operator(&self) -> FrameOperator {
        frame_operator(self)
    }

    pub fn verify(&self, tol: f64) -> FuntfReport {
        verify_funtf_rows(&self.vectors, tol)
    }
}

/// Symmetric positive (semi)definite `d x d` matrix `S = sum_i e_i e_i^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOperator {
    matrix: DMatrix<f64>,
}

impl FrameOperator {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    /// Solves `S y = v`.
    pub fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let chol = self.matrix.clone().cholesky().ok_or(Error::SingularFrame)?;
        Ok(chol.solve(v))
    }
}

pub fn frame_operator(frame: &Frame) -> FrameOperator {
    FrameOperator {
        matrix: gram_of_rows(&frame.vectors),
    }
}

fn gram_of_rows(vectors: &DMatrix<f64>) -> DMatrix<f64> {
    let s = vectors.tr_mul(vectors);
    // Symmetrize exactly; gemm does not guarantee bitwise symmetry.
    let st = s.transpose();
    (s + st) * 0.5
}

fn tight_deviation(vectors: &DMatrix<f64>) -> f64 {
    let (n, d) = vectors.shape();
    let a = n as f64 / d as f64;
    let s = gram_of_rows(vectors);
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { a } else { 0.0 };
            worst = worst.max((s[(i, j)] - target).abs());
        }
    }
    worst
}

/// Checks unit norms and tightness of an arbitrary set of rows.
pub fn verify_funtf_rows(vectors: &DMatrix<f64>, tol: f64) -> FuntfReport {
    let max_norm_deviation = vectors
        .row_iter()
        .map(|r| (r.norm() - 1.0).abs())
        .fold(0.0, f64::max);
    let max_tight_deviation = tight_deviation(vectors);
    let unit_norm_ok = max_norm_deviation <= tol;
    let tight_ok = max_tight_deviation <= tol;
    FuntfReport {
        unit_norm_ok,
        tight_ok,
        frame_bound_a: tight_ok.then(|| vectors.nrows() as f64 / vectors.ncols() as f64),
        max_norm_deviation,
        max_tight_deviation,
    }
}

pub fn verify_funtf(frame: &Frame, tol: f64) -> FuntfReport {
    frame.verify(tol)
}

/// Frame coefficients `<x, e_i>`.
pub fn analysis(frame: &Frame, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != frame.dim() {
        return Err(Error::DimensionMismatch {
            context: "analysis input".into(),
            expected: frame.dim(),
            actual: x.len(),
        });
    }
    Ok(&frame.vectors * x)
}

/// `sum_i c_i S^{-1} e_{p(i)}`. Tight frames use the scalar dual `d/N`.
pub fn synthesis_dual(frame: &Frame, c: &DVector<f64>, p: &Permutation) -> Result<DVector<f64>> {
    if c.len() != frame.len() {
        return Err(Error::DimensionMismatch {
            context: "synthesis coefficients".into(),
            expected: frame.len(),
            actual: c.len(),
        });
    }
    check_permutation_len(frame, p)?;
    let mut sum = DVector::zeros(frame.dim());
    for (i, &ci) in c.iter().enumerate() {
        if ci != 0.0 {
            sum.axpy(ci, &frame.vectors.row(p.order[i]).transpose(), 1.0);
        }
    }
    if frame.tight {
        Ok(sum * (frame.dim() as f64 / frame.len() as f64))
    } else {
        frame.frame_operator().solve(&sum)
    }
}

fn check_permutation_len(frame: &Frame, p: &Permutation) -> Result<()> {
    if p.len() != frame.len() {
        return Err(Error::DimensionMismatch {
            context: "permutation length".into(),
            expected: frame.len(),
            actual: p.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PermutationKind {
    Identity,
    Serpentine,
    Explicit,
}

/// A bijection on `0..N`, stored as the visiting order (`order[k] = p(k)`).
/// Equality compares the order only; `kind` records how it was obtained.
#[derive(Debug, Clone)]
pub struct Permutation {
    order: Vec<usize>,
    kind: PermutationKind,
}

impl PartialEq for Permutation {
    fn eq(&self, other: &Self) -> bool {
        self.order == other.order
    }
}

impl Eq for Permutation {}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation {
            order: (0..n).collect(),
            kind: PermutationKind::Identity,
        }
    }

    /// Validates that `order` is a bijection on `0..order.len()`.
    pub fn explicit(order: Vec<usize>) -> Result<Self> {
        Self::checked(order, PermutationKind::Explicit)
    }

    fn checked(order: Vec<usize>, kind: PermutationKind) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &i in &order {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!(
                    "permutation of length {n} is not a bijection (index {i})"
                )));
            }
        }
        Ok(Permutation { order, kind })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn kind(&self) -> PermutationKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(k, &i)| k == i)
    }
}

/// `sigma(F, p) = sum_{i<N} ||e_{p(i)} - e_{p(i+1)}||`.
pub fn frame_variation(frame: &Frame, p: &Permutation) -> Result<f64> {
    check_permutation_len(frame, p)?;
    Ok(path_length(&frame.vectors, p.order()))
}

/// Length of the polygonal path through the rows of `points` in `order`.
pub fn path_length(points: &DMatrix<f64>, order: &[usize]) -> f64 {
    order
        .windows(2)
        .map(|w| {
            let (a, b) = (points.row(w[0]), points.row(w[1]));
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

/// `4 sqrt(d+3) N^(1-1/d) - 4 sqrt(d+3)`, the guaranteed variation of a good
/// ordering of `N` unit vectors in R^d (`d >= 3`).
pub fn variation_threshold(d: usize, n: usize) -> f64 {
    let c = 4.0 * ((d + 3) as f64).sqrt();
    c * (n as f64).powf(1.0 - 1.0 / d as f64) - c
}

/// Uniform bound `2 pi (d+1) / sqrt(3)` on the identity-order variation of
/// harmonic frames.
pub fn harmonic_variation_bound(d: usize) -> f64 {
    2.0 * PI * (d as f64 + 1.0) / 3f64.sqrt()
}

/// Ordering used for quantization: identity for harmonic frames, otherwise a
/// serpentine grid ordering whose variation is checked against
/// [`variation_threshold`] when `d >= 3`.
pub fn find_permutation(frame: &Frame) -> Result<Permutation> {
    if frame.kind == FrameKind::Harmonic {
        return Ok(Permutation::identity(frame.len()));
    }
    let order = serpentine_order(&frame.vectors);
    let p = Permutation::checked(order, PermutationKind::Serpentine)?;
    let d = frame.dim();
    if d >= 3 {
        let achieved = path_length(&frame.vectors, p.order());
        let threshold = variation_threshold(d, frame.len());
        if achieved > threshold {
            return Err(Error::PermutationBound {
                achieved,
                threshold,
            });
        }
    }
    Ok(p)
}

/// Boustrophedon ordering of points in `[-1, 1]^d` (rows of `points`).
///
/// The cube is cut into `m = ceil(N^(1/d))` equal slabs along the first
/// coordinate; slabs are visited in order and each is ordered recursively on
/// the remaining coordinates, flipping direction after every non-empty slab.
/// The last coordinate is ordered by sorting.
pub fn serpentine_order(points: &DMatrix<f64>) -> Vec<usize> {
    let (n, d) = points.shape();
    if n <= 1 || d == 0 {
        return (0..n).collect();
    }
    let mut m = (n as f64).powf(1.0 / d as f64).ceil() as usize;
    // Guard against powf landing just above an exact integer root.
    if m > 1 && (m - 1).checked_pow(d as u32).is_some_and(|v| v >= n) {
        m -= 1;
    }
    let m = m.max(1);
    let mut out = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    order_slab(points, indices, 0, true, m, &mut out);
    out
}

fn order_slab(
    points: &DMatrix<f64>,
    mut indices: Vec<usize>,
    coord: usize,
    forward: bool,
    m: usize,
    out: &mut Vec<usize>,
) {
    let d = points.ncols();
    if indices.len() <= 1 {
        out.extend(indices);
        return;
    }
    if coord + 1 == d {
        indices.sort_by(|&a, &b| {
            let ord = points[(a, coord)].total_cmp(&points[(b, coord)]);
            if forward {
                ord.then(a.cmp(&b))
            } else {
                ord.reverse().then(b.cmp(&a))
            }
        });
        out.extend(indices);
        return;
    }
    // Scaled points (1/2) e_i live in [-1/2, 1/2]; slab t covers
    // [-1/2 + t/m, -1/2 + (t+1)/m).
    let mut slabs: Vec<Vec<usize>> = vec![Vec::new(); m];
    for i in indices {
        let x = 0.5 * points[(i, coord)] + 0.5;
        let t = ((x * m as f64).floor().max(0.0) as usize).min(m - 1);
        slabs[t].push(i);
    }
    if !forward {
        slabs.reverse();
    }
    let mut inner_forward = true;
    for slab in slabs.into_iter().filter(|s| !s.is_empty()) {
        order_slab(points, slab, coord + 1, inner_forward, m, out);
        inner_forward = !inner_forward;
    }
}
