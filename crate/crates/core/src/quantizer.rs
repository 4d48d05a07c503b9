//! Frame quantization of weight matrices and whole networks.
//!
//! Each column of a weight matrix (or each row, in [`Mode::Row`]) is expanded
//! in a FUNTF and its frame coefficients are Sigma-Delta quantized. Only the
//! level indices are stored; the quantized matrix is rebuilt on demand as
//! `q_j = (d/N) sum_k q_{j,k} e_{p(k)}`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{find_permutation, Frame, Permutation, TIGHT_TOL};
use crate::network::{Layer, Model, QuantizedLayer, QuantizedModel};
use crate::sigma_delta::{sd_codes_into, Alphabet};

/// Relative slack allowed when checking `max ||w_j|| <= (K - 1/2) delta`, so
/// that a step computed as `max ||w_j|| / (K - 1/2)` passes its own check.
const STEP_CHECK_RTOL: f64 = 1e-12;

/// Which vectors of a matrix are quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Columns of `W`; the frame lives in R^rows.
    Column,
    /// Rows of `W` (columns of `W^T`); the frame lives in R^cols.
    Row,
}

impl Mode {
    /// Length of the quantized vectors of a `rows x cols` matrix.
    pub fn vector_dim(self, rows: usize, cols: usize) -> usize {
        match self {
            Mode::Column => rows,
            Mode::Row => cols,
        }
    }

    /// Number of quantized vectors of a `rows x cols` matrix.
    pub fn vector_count(self, rows: usize, cols: usize) -> usize {
        match self {
            Mode::Column => cols,
            Mode::Row => rows,
        }
    }
}

/// How `K` and `delta` are chosen for a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPolicy {
    /// `K = 2^(b-1)` and the smallest step satisfying the range constraint,
    /// scaled by the headroom factor.
    Bits(u32),
    /// Fixed step with the smallest admissible `K`.
    Step(f64),
    /// Both given; validated against the range constraint.
    Explicit { levels: u32, step: f64 },
}

fn vector_norms(w: &DMatrix<f64>, mode: Mode) -> Vec<f64> {
    match mode {
        Mode::Column => w.column_iter().map(|c| c.norm()).collect(),
        Mode::Row => w.row_iter().map(|r| r.norm()).collect(),
    }
}

fn max_norm(norms: &[f64]) -> (usize, f64) {
    norms
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, n)| if n > best.1 { (i, n) } else { best })
}

fn check_range(norms: &[f64], alphabet: &Alphabet) -> Result<()> {
    let limit = alphabet.max_value();
    let (index, norm) = max_norm(norms);
    if norm > limit * (1.0 + STEP_CHECK_RTOL) {
        return Err(Error::StepConstraint { index, norm, limit });
    }
    Ok(())
}

/// Picks `(K, delta)` with `max_j ||w_j|| <= (K - 1/2) delta` over the vectors
/// selected by `mode`.
pub fn select_k_delta(
    w: &DMatrix<f64>,
    policy: StepPolicy,
    mode: Mode,
    headroom: f64,
) -> Result<Alphabet> {
    if !(headroom >= 1.0 && headroom.is_finite()) {
        return Err(Error::InvalidArgument(format!("headroom must be >= 1, got {headroom}")));
    }
    let norms = vector_norms(w, mode);
    let (_, largest) = max_norm(&norms);
    match policy {
        StepPolicy::Bits(bits) => {
            if bits == 0 || bits > 31 {
                return Err(Error::InvalidArgument(format!("bit budget {bits} out of range 1..=31")));
            }
            if largest == 0.0 {
                return Err(Error::InvalidArgument(
                    "all-zero matrix: bit budget cannot fix a step, give delta explicitly".into(),
                ));
            }
            let levels = 1u32 << (bits - 1);
            let step = headroom * largest / (levels as f64 - 0.5);
            Alphabet::new(levels, step)
        }
        StepPolicy::Step(step) => {
            if largest == 0.0 {
                return Err(Error::InvalidArgument(
                    "all-zero matrix: give (K, delta) explicitly".into(),
                ));
            }
            let alphabet = Alphabet::new(1, step)?;
            let k = (headroom * largest / step + 0.5).ceil();
            if k > u32::MAX as f64 {
                return Err(Error::InvalidArgument(format!("step {step} needs K = {k} levels")));
            }
            let mut levels = (k as u32).max(1);
            // Ceil can land one short when the ratio is an exact half-integer
            // plus rounding noise.
            while (levels as f64 - 0.5) * alphabet.step() < largest * (1.0 - STEP_CHECK_RTOL) {
                levels += 1;
            }
            Alphabet::new(levels, step)
        }
        StepPolicy::Explicit { levels, step } => {
            let alphabet = Alphabet::new(levels, step)?;
            check_range(&norms, &alphabet)?;
            Ok(alphabet)
        }
    }
}

/// Level indices of a quantized matrix plus everything needed to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    /// `vector_count x N`, row-major: vector `j` outer, frame index `k` inner.
    codes: Vec<u32>,
    alphabet: Alphabet,
    frame: Arc<Frame>,
    permutation: Permutation,
    mode: Mode,
    rows: usize,
    cols: usize,
    bias_folded: bool,
}

impl QuantizedMatrix {
    /// Assembles a quantized matrix from stored parts, validating shapes and
    /// code ranges.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        codes: Vec<u32>,
        alphabet: Alphabet,
        frame: Arc<Frame>,
        permutation: Permutation,
        mode: Mode,
        rows: usize,
        cols: usize,
        bias_folded: bool,
    ) -> Result<Self> {
        let dim = mode.vector_dim(rows, cols);
        if frame.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: format!("frame dimension for {mode:?} mode on {rows}x{cols}"),
                expected: dim,
                actual: frame.dim(),
            });
        }
        if permutation.len() != frame.len() {
            return Err(Error::DimensionMismatch {
                context: "permutation length".into(),
                expected: frame.len(),
                actual: permutation.len(),
            });
        }
        let expected = mode.vector_count(rows, cols) * frame.len();
        if codes.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "code count".into(),
                expected,
                actual: codes.len(),
            });
        }
        let size = alphabet.size() as u32;
        if let Some(bad) = codes.iter().find(|&&c| c >= size) {
            return Err(Error::Format(format!("code {bad} outside alphabet of size {size}")));
        }
        Ok(QuantizedMatrix {
            codes,
            alphabet,
            frame,
            permutation,
            mode,
            rows,
            cols,
            bias_folded,
        })
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    /// Codes of quantized vector `j`.
    pub fn vector_codes(&self, j: usize) -> &[u32] {
        let n = self.frame.len();
        &self.codes[j * n..(j + 1) * n]
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn frame(&self) -> &Arc<Frame> {
        &self.frame
    }

    pub fn permutation(&self) -> &Permutation {
        &self.permutation
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Rows of the quantized matrix.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Columns of the quantized matrix, including the bias column when
    /// [`Self::bias_folded`].
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bias_folded(&self) -> bool {
        self.bias_folded
    }

    pub fn vector_count(&self) -> usize {
        self.mode.vector_count(self.rows, self.cols)
    }

    /// `N x vector_count` matrix of code values.
    fn code_values(&self) -> DMatrix<f64> {
        let n = self.frame.len();
        DMatrix::from_fn(n, self.vector_count(), |k, j| {
            self.alphabet.value(self.codes[j * n + k])
        })
    }

    fn dual_scale(&self) -> f64 {
        self.frame.dim() as f64 / self.frame.len() as f64
    }

    /// Materializes the `rows x cols` quantized matrix.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let fp = self.frame.permuted_vectors(&self.permutation);
        let r = fp.tr_mul(&self.code_values()) * self.dual_scale();
        match self.mode {
            Mode::Column => r,
            Mode::Row => r.transpose(),
        }
    }

    /// `Q x` evaluated from the codes without forming `Q`.
    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                context: "quantized matvec input".into(),
                expected: self.cols,
                actual: x.len(),
            });
        }
        let fp = self.frame.permuted_vectors(&self.permutation);
        let values = self.code_values();
        let y = match self.mode {
            Mode::Column => fp.tr_mul(&(values * x)),
            Mode::Row => values.tr_mul(&(fp * x)),
        };
        Ok(y * self.dual_scale())
    }

    pub fn storage(&self) -> StorageBits {
        let code_bits = (self.vector_count() * self.frame.len()) as u64
            * self.alphabet.bits_per_code() as u64;
        let dense_bits_32 = 32 * (self.rows * self.cols) as u64;
        StorageBits {
            code_bits,
            dense_bits_32,
            saved_bits: dense_bits_32 as i64 - code_bits as i64,
            frame_overhead_bits: frame_overhead_bits(&self.frame),
        }
    }
}

fn frame_overhead_bits(frame: &Frame) -> u64 {
    match frame.kind() {
        crate::frames::FrameKind::Harmonic => 2 * 32,
        crate::frames::FrameKind::Explicit => 64 * (frame.len() * frame.dim()) as u64,
    }
}

/// Quantizes the columns (or rows) of `w`.
pub fn quantize_matrix(
    w: &DMatrix<f64>,
    frame: Arc<Frame>,
    permutation: Permutation,
    alphabet: Alphabet,
    mode: Mode,
) -> Result<QuantizedMatrix> {
    quantize_matrix_impl(w, frame, permutation, alphabet, mode, false)
}

fn quantize_matrix_impl(
    w: &DMatrix<f64>,
    frame: Arc<Frame>,
    permutation: Permutation,
    alphabet: Alphabet,
    mode: Mode,
    bias_folded: bool,
) -> Result<QuantizedMatrix> {
    let (rows, cols) = w.shape();
    let dim = mode.vector_dim(rows, cols);
    if frame.dim() != dim {
        return Err(Error::DimensionMismatch {
            context: format!("frame dimension for {mode:?} mode on {rows}x{cols}"),
            expected: dim,
            actual: frame.dim(),
        });
    }
    if permutation.len() != frame.len() {
        return Err(Error::DimensionMismatch {
            context: "permutation length".into(),
            expected: frame.len(),
            actual: permutation.len(),
        });
    }
    if !frame.is_tight() {
        return Err(Error::NotTight {
            deviation: frame.verify(TIGHT_TOL).max_tight_deviation,
        });
    }
    check_range(&vector_norms(w, mode), &alphabet)?;

    let n = frame.len();
    let fp = frame.permuted_vectors(&permutation);
    let count = mode.vector_count(rows, cols);
    let mut codes = vec![0u32; count * n];
    // One product per vector, so a vector's codes never depend on its
    // neighbours through blocked summation order.
    codes.par_chunks_mut(n).enumerate().for_each(|(j, slot)| {
        let v = match mode {
            Mode::Column => w.column(j).into_owned(),
            Mode::Row => w.row(j).transpose(),
        };
        let c = &fp * v;
        sd_codes_into(c.iter().copied(), &alphabet, slot);
    });
    Ok(QuantizedMatrix {
        codes,
        alphabet,
        frame,
        permutation,
        mode,
        rows,
        cols,
        bias_folded,
    })
}

/// Frame used for one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameSpec {
    Harmonic { dim: usize, len: usize },
    Explicit(Arc<Frame>),
}

impl FrameSpec {
    fn dim(&self) -> usize {
        match self {
            FrameSpec::Harmonic { dim, .. } => *dim,
            FrameSpec::Explicit(f) => f.dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerConfig {
    pub frame: FrameSpec,
    pub policy: StepPolicy,
    pub mode: Mode,
}

/// Per-layer settings for [`quantize_network`]. Residual blocks use one entry
/// for both of their matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationConfig {
    pub layers: Vec<LayerConfig>,
    /// Multiplies the minimal step (bits policy) or the norm used to size `K`
    /// (step policy). At least 1.
    pub headroom: f64,
    /// Quantize every matrix with the largest `K` selected for any layer.
    pub shared_levels: bool,
}

impl QuantizationConfig {
    /// Harmonic frames with `len` elements for every layer. Hidden layers use
    /// column mode; the final affine layer uses row mode when
    /// `last_layer_row` is set.
    pub fn harmonic(model: &Model, len: usize, policy: StepPolicy, last_layer_row: bool) -> Self {
        let last = model.layers().len().saturating_sub(1);
        let layers = model
            .layers()
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let mode = match layer {
                    Layer::Affine { .. } if i == last && last_layer_row => Mode::Row,
                    _ => Mode::Column,
                };
                let (rows, cols) = layer.quantized_shape();
                LayerConfig {
                    frame: FrameSpec::Harmonic {
                        dim: mode.vector_dim(rows, cols),
                        len,
                    },
                    policy,
                    mode,
                }
            })
            .collect();
        QuantizationConfig {
            layers,
            headroom: 1.0,
            shared_levels: false,
        }
    }
}

/// Matrix actually quantized for a weight and optional bias: `(W, b)` when a
/// bias is present.
pub fn augmented(weight: &DMatrix<f64>, bias: Option<&DVector<f64>>) -> DMatrix<f64> {
    match bias {
        None => weight.clone(),
        Some(b) => {
            let mut a = weight.clone().insert_column(weight.ncols(), 0.0);
            a.set_column(weight.ncols(), b);
            a
        }
    }
}

struct FrameCache {
    harmonic: HashMap<(usize, usize), Arc<Frame>>,
}

impl FrameCache {
    fn get(&mut self, spec: &FrameSpec) -> Result<(Arc<Frame>, Permutation)> {
        let frame = match spec {
            FrameSpec::Harmonic { dim, len } => match self.harmonic.get(&(*dim, *len)) {
                Some(f) => f.clone(),
                None => {
                    let f = Arc::new(Frame::harmonic(*dim, *len)?);
                    self.harmonic.insert((*dim, *len), f.clone());
                    f
                }
            },
            FrameSpec::Explicit(f) => f.clone(),
        };
        let p = find_permutation(&frame)?;
        Ok((frame, p))
    }
}

/// Quantizes every weight matrix of `model`. Biases are folded into the
/// final column of their matrix (`(W, b)`), so a biased layer's quantized
/// matrix acts on `(x; 1)`.
pub fn quantize_network(model: &Model, cfg: &QuantizationConfig) -> Result<QuantizedModel> {
    if cfg.layers.len() != model.layers().len() {
        return Err(Error::InvalidArgument(format!(
            "config has {} layer entries, model has {} layers",
            cfg.layers.len(),
            model.layers().len()
        )));
    }
    if !(cfg.headroom >= 1.0 && cfg.headroom.is_finite()) {
        return Err(Error::InvalidArgument(format!("headroom must be >= 1, got {}", cfg.headroom)));
    }

    // Matrices to quantize, tagged with their layer index.
    let mut jobs: Vec<(usize, DMatrix<f64>, bool)> = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            Layer::Affine { weight, bias } => {
                jobs.push((i, augmented(weight, bias.as_ref()), bias.is_some()))
            }
            Layer::Residual {
                first,
                second,
                bias,
            } => {
                jobs.push((i, augmented(first, bias.as_ref()), bias.is_some()));
                jobs.push((i, second.clone(), false));
            }
        }
    }

    let mut alphabets = Vec::with_capacity(jobs.len());
    for (i, w, _) in &jobs {
        let lc = &cfg.layers[*i];
        if lc.frame.dim() != lc.mode.vector_dim(w.nrows(), w.ncols()) {
            return Err(Error::DimensionMismatch {
                context: format!("frame dimension for {:?} mode on {}x{}", lc.mode, w.nrows(), w.ncols()),
                expected: lc.mode.vector_dim(w.nrows(), w.ncols()),
                actual: lc.frame.dim(),
            }
            .in_layer(*i));
        }
        let a = select_k_delta(w, lc.policy, lc.mode, cfg.headroom).map_err(|e| e.in_layer(*i))?;
        alphabets.push(a);
    }
    if cfg.shared_levels {
        let k = alphabets.iter().map(|a| a.levels()).max().unwrap_or(1);
        for a in &mut alphabets {
            *a = Alphabet::new(k, a.step())?;
        }
    }

    let mut cache = FrameCache {
        harmonic: HashMap::new(),
    };
    let mut quantized = Vec::with_capacity(jobs.len());
    for ((i, w, folded), alphabet) in jobs.iter().zip(alphabets) {
        let lc = &cfg.layers[*i];
        let (frame, p) = cache.get(&lc.frame).map_err(|e| e.in_layer(*i))?;
        let qm = quantize_matrix_impl(w, frame, p, alphabet, lc.mode, *folded)
            .map_err(|e| e.in_layer(*i))?;
        quantized.push((*i, qm));
    }

    let mut layers = Vec::with_capacity(model.layers().len());
    let mut it = quantized.into_iter().peekable();
    while let Some((i, qm)) = it.next() {
        match &model.layers()[i] {
            Layer::Affine { .. } => layers.push(QuantizedLayer::Affine(qm)),
            Layer::Residual { .. } => {
                let (_, second) = it.next().expect("residual blocks quantize two matrices");
                layers.push(QuantizedLayer::Residual { first: qm, second });
            }
        }
    }
    QuantizedModel::new(layers, model.activation())
}

/// Storage accounting in bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct StorageBits {
    /// `vectors x N x ceil(log2(2K))` summed over matrices.
    pub code_bits: u64,
    /// `32 x rows x cols` summed over matrices.
    pub dense_bits_32: u64,
    /// `dense_bits_32 - code_bits`; negative when codes take more room.
    pub saved_bits: i64,
    /// Harmonic frames count as two 32-bit integers, explicit frames as
    /// `64 N d`.
    pub frame_overhead_bits: u64,
}

impl std::ops::Add for StorageBits {
    type Output = StorageBits;

    fn add(self, o: StorageBits) -> StorageBits {
        StorageBits {
            code_bits: self.code_bits + o.code_bits,
            dense_bits_32: self.dense_bits_32 + o.dense_bits_32,
            saved_bits: self.saved_bits + o.saved_bits,
            frame_overhead_bits: self.frame_overhead_bits + o.frame_overhead_bits,
        }
    }
}

impl std::iter::Sum for StorageBits {
    fn sum<I: Iterator<Item = StorageBits>>(iter: I) -> StorageBits {
        iter.fold(StorageBits::default(), |a, b| a + b)
    }
}

pub fn storage_bits(qm: &QuantizedModel) -> StorageBits {
    qm.matrices().map(|m| m.storage()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::matrix_bound;
    use crate::frames::frame_variation;
    use crate::network::Activation;

    fn basis3() -> Arc<Frame> {
        Arc::new(Frame::explicit(DMatrix::identity(3, 3)).unwrap())
    }

    #[test]
    fn select_bits_at_equality() {
        let w = DMatrix::from_column_slice(2, 2, &[3.0, 0.0, 1.0, 1.0]);
        let a = select_k_delta(&w, StepPolicy::Bits(1), Mode::Column, 1.0).unwrap();
        assert_eq!(a.levels(), 1);
        assert_eq!(a.step(), 6.0);
    }

    #[test]
    fn select_fixed_step() {
        let w = DMatrix::from_column_slice(2, 1, &[3.0, 0.0]);
        let a = select_k_delta(&w, StepPolicy::Step(8.0), Mode::Column, 1.0).unwrap();
        assert_eq!(a.levels(), 1);
        let a = select_k_delta(&w, StepPolicy::Step(1.0), Mode::Column, 1.0).unwrap();
        // (K - 1/2) >= 3 -> K = 4 (K = 3.5 exactly would be the boundary).
        assert_eq!(a.levels(), 4);
        let a = select_k_delta(&w, StepPolicy::Step(0.25), Mode::Column, 1.0).unwrap();
        assert_eq!(a.levels(), 13);
        assert!(a.max_value() >= 3.0);
    }

    #[test]
    fn select_rejects_degenerate_and_violations() {
        let z = DMatrix::zeros(3, 2);
        assert!(select_k_delta(&z, StepPolicy::Bits(2), Mode::Column, 1.0).is_err());
        assert!(select_k_delta(&z, StepPolicy::Step(0.5), Mode::Column, 1.0).is_err());
        let w = DMatrix::from_column_slice(2, 2, &[0.1, 0.0, 3.0, 0.0]);
        match select_k_delta(&w, StepPolicy::Explicit { levels: 1, step: 1.0 }, Mode::Column, 1.0) {
            Err(Error::StepConstraint { index, norm, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(norm, 3.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn row_mode_uses_row_norms() {
        let w = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 0.0, 1.0]);
        let a = select_k_delta(&w, StepPolicy::Bits(1), Mode::Row, 1.0).unwrap();
        assert_eq!(a.step(), 10.0);
    }

    #[test]
    fn zero_matrix_alternates() {
        let frame = Arc::new(Frame::harmonic(4, 8).unwrap());
        let a = Alphabet::new(1, 0.5).unwrap();
        let w = DMatrix::zeros(4, 3);
        let qm = quantize_matrix(&w, frame.clone(), Permutation::identity(8), a, Mode::Column).unwrap();
        for j in 0..3 {
            let expected: Vec<u32> = (0..8).map(|k| if k % 2 == 0 { 1 } else { 0 }).collect();
            assert_eq!(qm.vector_codes(j), &expected[..]);
        }
        let q = qm.reconstruct();
        let err = crate::bounds::operator_norm(&q, 1e-12, 10_000);
        assert!(err <= matrix_bound(0.5, 4, 3, 8, false).unwrap());
    }

    #[test]
    fn identity_with_standard_basis() {
        let a = Alphabet::new(2, 1.0).unwrap();
        let w = DMatrix::identity(3, 3);
        let qm = quantize_matrix(&w, basis3(), Permutation::identity(3), a, Mode::Column).unwrap();
        let q = qm.reconstruct();
        let bound = 0.5 * (2.0 * 2f64.sqrt() + 1.0);
        for j in 0..3 {
            assert!((w.column(j) - q.column(j)).norm() <= bound);
        }
        assert_eq!(qm.reconstruct(), q);
    }

    #[test]
    fn reconstruct_all_zero_codes() {
        let frame = Arc::new(Frame::harmonic(3, 5).unwrap());
        let a = Alphabet::new(1, 2.0).unwrap();
        let qm = QuantizedMatrix::from_parts(
            vec![0; 2 * 5],
            a,
            frame.clone(),
            Permutation::identity(5),
            Mode::Column,
            3,
            2,
            false,
        )
        .unwrap();
        let sum: DVector<f64> = (0..5).map(|k| frame.element(k)).sum();
        let expected = -(sum * (3.0 / 5.0));
        let q = qm.reconstruct();
        for j in 0..2 {
            assert!((q.column(j) - &expected).norm() < 1e-14);
        }
    }

    #[test]
    fn row_mode_is_transposed_column_mode() {
        let w = DMatrix::from_fn(3, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.1 - 0.2);
        let frame = Arc::new(Frame::harmonic(5, 11).unwrap());
        let a = Alphabet::new(2, 0.3).unwrap();
        let p = Permutation::identity(11);
        let row = quantize_matrix(&w, frame.clone(), p.clone(), a, Mode::Row).unwrap();
        let col = quantize_matrix(&w.transpose(), frame, p, a, Mode::Column).unwrap();
        assert_eq!(row.codes(), col.codes());
        assert_eq!(row.reconstruct(), col.reconstruct().transpose());
    }

    #[test]
    fn quantize_matrix_errors() {
        let frame = Arc::new(Frame::harmonic(4, 8).unwrap());
        let a = Alphabet::new(1, 0.5).unwrap();
        let w = DMatrix::zeros(3, 3);
        assert!(matches!(
            quantize_matrix(&w, frame.clone(), Permutation::identity(8), a, Mode::Column),
            Err(Error::DimensionMismatch { .. })
        ));
        let w = DMatrix::from_element(4, 2, 1.0);
        assert!(matches!(
            quantize_matrix(&w, frame, Permutation::identity(8), a, Mode::Column),
            Err(Error::StepConstraint { .. })
        ));
    }

    #[test]
    fn serpentine_permutation_column_error_within_vector_bound() {
        let frame = Arc::new(Frame::harmonic(3, 16).unwrap());
        // Shuffled copy so the identity order is poor.
        let order: Vec<usize> = (0..16).map(|k| (k * 5) % 16).collect();
        let shuffled = Arc::new(Frame::explicit(frame.vectors().select_rows(&order)).unwrap());
        let p = find_permutation(&shuffled).unwrap();
        let var = frame_variation(&shuffled, &p).unwrap();
        let w = DMatrix::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.1);
        let a = Alphabet::new(4, 0.125).unwrap();
        let qm = quantize_matrix(&w, shuffled, p, a, Mode::Column).unwrap();
        let q = qm.reconstruct();
        let bound = 0.125 * 3.0 / 32.0 * (var + 1.0);
        for j in 0..4 {
            assert!((w.column(j) - q.column(j)).norm() <= bound + 1e-12);
        }
    }

    #[test]
    fn storage_one_bit_arithmetic() {
        let m = Model::new(
            vec![
                Layer::affine(DMatrix::from_element(256, 784, 0.001), None),
                Layer::affine(DMatrix::from_element(256, 256, 0.001), None),
            ],
            Activation::Relu,
        )
        .unwrap();
        let cfg = QuantizationConfig::harmonic(&m, 300, StepPolicy::Explicit { levels: 1, step: 8.0 }, false);
        let qm = quantize_network(&m, &cfg).unwrap();
        let s = storage_bits(&qm);
        assert_eq!(s.code_bits, 1040 * 300);
        assert_eq!(s.dense_bits_32, 8192 * 1040);
        assert_eq!(s.saved_bits, 1040 * (8192 - 300));
        assert_eq!(s.frame_overhead_bits, 128);
    }

    #[test]
    fn network_errors_name_layer() {
        let m = Model::new(
            vec![
                Layer::affine(DMatrix::from_element(4, 3, 0.1), None),
                Layer::affine(DMatrix::from_element(3, 4, 5.0), None),
            ],
            Activation::Relu,
        )
        .unwrap();
        let cfg = QuantizationConfig::harmonic(&m, 8, StepPolicy::Explicit { levels: 1, step: 1.0 }, false);
        match quantize_network(&m, &cfg) {
            Err(Error::Layer { layer, source }) => {
                assert_eq!(layer, 1);
                assert!(matches!(*source, Error::StepConstraint { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shared_levels_uses_largest_k() {
        let m = Model::new(
            vec![
                Layer::affine(DMatrix::from_element(4, 3, 0.1), None),
                Layer::affine(DMatrix::from_element(3, 4, 0.5), None),
            ],
            Activation::Relu,
        )
        .unwrap();
        let mut cfg = QuantizationConfig::harmonic(&m, 8, StepPolicy::Step(0.125), false);
        cfg.shared_levels = true;
        let qm = quantize_network(&m, &cfg).unwrap();
        let ks: Vec<u32> = qm.matrices().map(|m| m.alphabet().levels()).collect();
        assert!(ks.windows(2).all(|w| w[0] == w[1]));
    }
}
