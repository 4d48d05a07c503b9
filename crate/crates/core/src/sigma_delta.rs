//! Midrise alphabets and first-order Sigma-Delta quantization.
//!
//! Codes are exchanged as level indices `j in 0..2K`, representing the value
//! `(-K + j + 1/2) * delta`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{Frame, Permutation};

/// The `2K`-level midrise alphabet with step `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alphabet {
    levels: u32,
    step: f64,
}

impl Alphabet {
    pub fn new(levels: u32, step: f64) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidArgument("alphabet needs K >= 1".into()));
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alphabet step must be positive and finite, got {step}"
            )));
        }
        Ok(Alphabet { levels, step })
    }

    /// `K`.
    pub fn levels(&self) -> u32 {
        self.levels
    }

    /// `delta`.
    pub fn step(&self) -> f64 {
        self.step
    }

    /// Number of alphabet values, `2K`.
    pub fn size(&self) -> usize {
        2 * self.levels as usize
    }

    /// Largest value, `(K - 1/2) delta`. Inputs up to this magnitude keep the
    /// Sigma-Delta state within `delta/2`.
    pub fn max_value(&self) -> f64 {
        (self.levels as f64 - 0.5) * self.step
    }

    pub fn value(&self, index: u32) -> f64 {
        (index as f64 - self.levels as f64 + 0.5) * self.step
    }

    /// All values in ascending order.
    pub fn values(&self) -> Vec<f64> {
        (0..2 * self.levels).map(|j| self.value(j)).collect()
    }

    /// Index of the nearest value; midpoints resolve to the larger value and
    /// out-of-range inputs saturate at the extreme levels.
    pub fn nearest_index(&self, v: f64) -> u32 {
        // Level j is nearest when v/delta + K lies in [j, j+1).
        let t = (v / self.step + self.levels as f64).floor();
        if t.is_nan() || t <= 0.0 {
            0
        } else {
            (t as u64).min(2 * self.levels as u64 - 1) as u32
        }
    }

    pub fn quantize(&self, v: f64) -> f64 {
        self.value(self.nearest_index(v))
    }

    /// Bits needed to store one level index, `ceil(log2(2K))`.
    pub fn bits_per_code(&self) -> u32 {
        bits_for_levels(self.levels)
    }
}

pub(crate) fn bits_for_levels(levels: u32) -> u32 {
    let size = 2 * levels as u64;
    64 - (size - 1).leading_zeros()
}

pub fn alphabet_values(levels: u32, step: f64) -> Result<Vec<f64>> {
    Ok(Alphabet::new(levels, step)?.values())
}

pub fn scalar_quantize(v: f64, alphabet: &Alphabet) -> f64 {
    alphabet.quantize(v)
}

/// The `(q, u)` sequences of one Sigma-Delta run.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaDeltaTrace {
    /// Level indices of `q_1..q_N`.
    pub codes: Vec<u32>,
    /// Values `q_1..q_N`.
    pub q: Vec<f64>,
    /// States `u_0..u_N`, with `u_0 = 0`.
    pub u: Vec<f64>,
    /// Set when some input exceeded `(K - 1/2) delta`, in which case the state
    /// bound `|u_n| <= delta/2` is no longer guaranteed.
    pub unstable_input: bool,
}

/// `q_n = Q(u_{n-1} + x_n)`, `u_n = u_{n-1} + x_n - q_n`, `u_0 = 0`.
pub fn sd_quantize_sequence(x: &[f64], alphabet: &Alphabet) -> SigmaDeltaTrace {
    let mut codes = Vec::with_capacity(x.len());
    let mut q = Vec::with_capacity(x.len());
    let mut u = Vec::with_capacity(x.len() + 1);
    u.push(0.0);
    let limit = alphabet.max_value();
    let mut state = 0.0;
    let mut unstable_input = false;
    for &xn in x {
        unstable_input |= xn.abs() > limit;
        let j = alphabet.nearest_index(state + xn);
        let qn = alphabet.value(j);
        state = state + xn - qn;
        codes.push(j);
        q.push(qn);
        u.push(state);
    }
    SigmaDeltaTrace {
        codes,
        q,
        u,
        unstable_input,
    }
}

/// Runs the recursion over `x` and writes level indices into `codes`,
/// without recording states.
pub(crate) fn sd_codes_into(x: impl Iterator<Item = f64>, alphabet: &Alphabet, codes: &mut [u32]) {
    let mut state = 0.0;
    for (slot, xn) in codes.iter_mut().zip(x) {
        let j = alphabet.nearest_index(state + xn);
        state = state + xn - alphabet.value(j);
        *slot = j;
    }
}

/// Quantized expansion of one vector against a FUNTF.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorQuantization {
    pub codes: Vec<u32>,
    pub reconstruction: DVector<f64>,
}

/// Sigma-Delta quantizes the frame coefficients of `x` taken in the order of
/// `p` and reconstructs with the scalar dual `d/N`.
///
/// Every coefficient must lie within `(K - 1/2) delta`, which is all the
/// state bound needs; `||x|| <= (K - 1/2) delta` implies it.
pub fn quantize_vector(
    x: &DVector<f64>,
    frame: &Frame,
    p: &Permutation,
    alphabet: &Alphabet,
) -> Result<VectorQuantization> {
    if x.len() != frame.dim() {
        return Err(Error::DimensionMismatch {
            context: "quantized vector".into(),
            expected: frame.dim(),
            actual: x.len(),
        });
    }
    if p.len() != frame.len() {
        return Err(Error::DimensionMismatch {
            context: "permutation length".into(),
            expected: frame.len(),
            actual: p.len(),
        });
    }
    if !frame.is_tight() {
        return Err(Error::NotTight {
            deviation: frame.verify(crate::frames::TIGHT_TOL).max_tight_deviation,
        });
    }
    let vectors = frame.vectors();
    let coeffs: Vec<f64> = p
        .order()
        .iter()
        .map(|&i| vectors.row(i).iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let magnitude = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let limit = alphabet.max_value();
    if magnitude > limit {
        return Err(Error::NormOverflow { magnitude, limit });
    }
    let mut codes = vec![0; frame.len()];
    sd_codes_into(coeffs.into_iter(), alphabet, &mut codes);
    let mut reconstruction = DVector::zeros(frame.dim());
    for (k, &j) in codes.iter().enumerate() {
        let row = vectors.row(p.order()[k]);
        let q = alphabet.value(j);
        for (r, e) in reconstruction.iter_mut().zip(row.iter()) {
            *r += q * e;
        }
    }
    reconstruction *= frame.dim() as f64 / frame.len() as f64;
    Ok(VectorQuantization {
        codes,
        reconstruction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn alpha(k: u32, d: f64) -> Alphabet {
        Alphabet::new(k, d).unwrap()
    }

    #[test]
    fn alphabet_examples() {
        assert_eq!(alphabet_values(2, 0.5).unwrap(), vec![-0.75, -0.25, 0.25, 0.75]);
        assert_eq!(alphabet_values(1, 1.0).unwrap(), vec![-0.5, 0.5]);
        assert_eq!(alphabet_values(1, 8.0).unwrap(), vec![-4.0, 4.0]);
        assert!(Alphabet::new(0, 1.0).is_err());
        assert!(Alphabet::new(1, 0.0).is_err());
        assert!(Alphabet::new(1, f64::NAN).is_err());
    }

    #[test]
    fn bits_per_code() {
        assert_eq!(bits_for_levels(1), 1);
        assert_eq!(bits_for_levels(2), 2);
        assert_eq!(bits_for_levels(3), 3);
        assert_eq!(bits_for_levels(4), 3);
        assert_eq!(bits_for_levels(8), 4);
        assert_eq!(bits_for_levels(9), 5);
    }

    #[test]
    fn scalar_quantizer_examples() {
        assert_eq!(scalar_quantize(0.3, &alpha(1, 1.0)), 0.5);
        assert_eq!(scalar_quantize(0.0, &alpha(1, 1.0)), 0.5);
        assert_eq!(scalar_quantize(10.0, &alpha(2, 0.5)), 0.75);
        assert_eq!(scalar_quantize(-10.0, &alpha(2, 0.5)), -0.75);
        // Midpoint between -0.25 and 0.25 is 0; between 0.25 and 0.75 is 0.5.
        assert_eq!(scalar_quantize(0.5, &alpha(2, 0.5)), 0.75);
        assert_eq!(scalar_quantize(-0.5, &alpha(2, 0.5)), -0.25);
    }

    #[test]
    fn scalar_quantizer_matches_brute_force() {
        let a = alpha(4, 0.3);
        let values = a.values();
        for i in -400..400 {
            let v = i as f64 * 0.00731;
            let got = a.quantize(v);
            let best = values
                .iter()
                .copied()
                .min_by(|x, y| (v - x).abs().total_cmp(&(v - y).abs()).then(y.total_cmp(x)))
                .unwrap();
            assert!((v - got).abs() <= (v - best).abs() + 1e-15, "v={v}");
        }
    }

    #[test]
    fn hand_iterated_trace() {
        let t = sd_quantize_sequence(&[0.3, 0.3, 0.3], &alpha(1, 1.0));
        assert_eq!(t.q, vec![0.5, 0.5, -0.5]);
        let expected = [0.0, -0.2, -0.4, 0.4];
        for (u, e) in t.u.iter().zip(expected) {
            assert!((u - e).abs() < 1e-15);
        }
        assert!(!t.unstable_input);
    }

    #[test]
    fn zero_input_alternates() {
        let a = alpha(3, 0.25);
        let t = sd_quantize_sequence(&[0.0; 7], &a);
        for (n, q) in t.q.iter().enumerate() {
            let expected = if n % 2 == 0 { 0.125 } else { -0.125 };
            assert_eq!(*q, expected);
        }
        assert!(t.u.last().unwrap().abs() <= 0.125);
    }

    #[test]
    fn single_step() {
        let a = alpha(2, 0.5);
        let t = sd_quantize_sequence(&[0.6], &a);
        assert_eq!(t.q, vec![a.quantize(0.6)]);
        assert!(t.u[1].abs() <= 0.25);
    }

    #[test]
    fn unstable_flag() {
        let t = sd_quantize_sequence(&[0.2, 3.0], &alpha(1, 1.0));
        assert!(t.unstable_input);
    }

    #[test]
    fn quantize_vector_examples() {
        let basis = Frame::explicit(DMatrix::identity(3, 3)).unwrap();
        let id = Permutation::identity(3);
        let a = alpha(1, 1.0);
        let bound = 0.5 * (2.0 * 2f64.sqrt() + 1.0);

        let z = quantize_vector(&DVector::zeros(3), &basis, &id, &a).unwrap();
        assert_eq!(z.reconstruction.as_slice(), &[0.5, -0.5, 0.5]);
        assert!((z.reconstruction.norm() - 0.75f64.sqrt()).abs() < 1e-15);
        assert!(z.reconstruction.norm() <= bound);

        let x = DVector::from_element(3, 0.3);
        let r = quantize_vector(&x, &basis, &id, &a).unwrap();
        assert_eq!(r.reconstruction.as_slice(), &[0.5, 0.5, -0.5]);
        let err = (&x - &r.reconstruction).norm();
        assert!((err - 0.72f64.sqrt()).abs() < 1e-12);
        assert!(err <= bound);
    }

    #[test]
    fn quantize_vector_errors() {
        let h = Frame::harmonic(3, 6).unwrap();
        let id = Permutation::identity(6);
        let a = alpha(1, 1.0);
        let big = DVector::from_element(3, 1.0);
        assert!(matches!(quantize_vector(&big, &h, &id, &a), Err(Error::NormOverflow { .. })));

        let s = 0.5f64.sqrt();
        let rows = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, s, s, 0.0, 1.0]);
        let loose = Frame::explicit(rows).unwrap();
        let x = DVector::from_element(2, 0.1);
        assert!(matches!(
            quantize_vector(&x, &loose, &Permutation::identity(3), &a),
            Err(Error::NotTight { .. })
        ));
    }
}
