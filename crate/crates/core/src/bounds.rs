//! Closed-form error bounds and their empirical counterparts.
//!
//! Every bound is evaluated exactly as a closed form in the quantization
//! parameters. Operator norms come from power iteration on `W^T W`.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::frames::{frame_variation, variation_threshold, FrameKind};
use crate::network::{Layer, Model, QuantizedLayer, QuantizedModel};
use crate::quantizer::QuantizedMatrix;

/// Tolerance used for the operator norms that feed the bounds.
pub const NORM_TOL: f64 = 1e-10;
pub const NORM_MAX_ITERS: usize = 10_000;

/// Largest singular value of `w` by power iteration on `W^T W`.
///
/// Stops when the eigen-residual `||W^T W v - lambda v||` drops below
/// `tol * lambda`, or after `max_iters` steps. Returns 0 for a zero matrix.
pub fn operator_norm(w: &DMatrix<f64>, tol: f64, max_iters: usize) -> f64 {
    let n = w.ncols();
    if n == 0 || w.nrows() == 0 || w.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6f70_6e6f_726d);
    let mut v = DVector::from_fn(n, |_, _| rand::Rng::random::<f64>(&mut rng) + 0.5);
    v.normalize_mut();
    let mut lambda = 0.0;
    for _ in 0..max_iters.max(1) {
        let y = w * &v;
        let z = w.tr_mul(&y);
        lambda = y.norm_squared();
        let residual = (&z - &v * lambda).norm();
        let zn = z.norm();
        if zn == 0.0 {
            // Start vector fell in the kernel; the kernel of W^T W is proper
            // since W != 0, so nudge and continue.
            v = DVector::from_fn(n, |i, _| 1.0 + i as f64);
            v.normalize_mut();
            continue;
        }
        v = z / zn;
        if residual <= tol * lambda {
            break;
        }
    }
    let last = (w * &v).norm_squared();
    lambda.max(last).sqrt()
}

/// Operator norm inflated by the iteration tolerance, used inside bounds.
pub fn safe_norm(w: &DMatrix<f64>) -> f64 {
    operator_norm(w, NORM_TOL, NORM_MAX_ITERS) * (1.0 + 1e-8)
}

fn check_frame_dims(d: usize, n: usize) -> Result<()> {
    if d < 3 {
        return Err(Error::Precondition(format!("frame dimension {d} < 3")));
    }
    if n < d {
        return Err(Error::Precondition(format!("frame size N = {n} < d = {d}")));
    }
    Ok(())
}

/// `(delta d / 2N) (variation + 1)`: vector error for a FUNTF and a given
/// frame variation.
pub fn vector_bound(delta: f64, d: usize, n: usize, variation: f64) -> Result<f64> {
    if d == 0 || n < d {
        return Err(Error::Precondition(format!("need 1 <= d <= N, got d = {d}, N = {n}")));
    }
    Ok(delta * d as f64 / (2.0 * n as f64) * (variation + 1.0))
}

/// [`vector_bound`] with the guaranteed variation of a good ordering.
pub fn vector_bound_generic(delta: f64, d: usize, n: usize) -> Result<f64> {
    check_frame_dims(d, n)?;
    vector_bound(delta, d, n, variation_threshold(d, n))
}

/// Per-matrix error bound for quantizing `vectors` vectors of length
/// `frame_dim` with an `n`-element FUNTF.
///
/// General frames: `2 sqrt(2) delta m sqrt(m m') N^(-1/m)`. Harmonic frames in
/// identity order: `(delta m sqrt(m') / 2N) (2 pi (m+1)/sqrt(3) + 1)`. In
/// column mode `m = rows`, `m' = cols`.
pub fn matrix_bound(delta: f64, frame_dim: usize, vectors: usize, n: usize, harmonic: bool) -> Result<f64> {
    check_frame_dims(frame_dim, n)?;
    let m = frame_dim as f64;
    let mp = vectors as f64;
    let nf = n as f64;
    Ok(if harmonic {
        delta * m * mp.sqrt() / (2.0 * nf) * (2.0 * PI * (m + 1.0) / 3f64.sqrt() + 1.0)
    } else {
        2.0 * SQRT_2 * delta * m * (m * mp).sqrt() * nf.powf(-1.0 / m)
    })
}

/// Per-layer data feeding the network bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerStats {
    /// Input and output widths of the layer map.
    pub m_in: usize,
    pub m_out: usize,
    /// Dimension of the frame and number of quantized vectors.
    pub frame_dim: usize,
    pub vectors: usize,
    /// `||W||`.
    pub sigma: f64,
    pub delta: f64,
    pub levels: u32,
    pub n: usize,
    /// `sigma(F, p)` of the frame and permutation used.
    pub variation: f64,
    /// Harmonic frame in identity order.
    pub harmonic: bool,
}

impl LayerStats {
    /// Statistics of a weight matrix and its quantized counterpart.
    pub fn from_quantized(w: &DMatrix<f64>, q: &QuantizedMatrix) -> Result<Self> {
        let frame = q.frame();
        let variation = frame_variation(frame, q.permutation())?;
        Ok(LayerStats {
            m_in: w.ncols(),
            m_out: w.nrows(),
            frame_dim: frame.dim(),
            vectors: q.vector_count(),
            sigma: safe_norm(w),
            delta: q.alphabet().step(),
            levels: q.alphabet().levels(),
            n: frame.len(),
            variation,
            harmonic: frame.kind() == FrameKind::Harmonic && q.permutation().is_identity(),
        })
    }

    pub fn matrix_bound(&self) -> Result<f64> {
        matrix_bound(self.delta, self.frame_dim, self.vectors, self.n, false)
    }

    pub fn harmonic_matrix_bound(&self) -> Result<f64> {
        if !self.harmonic {
            return Err(Error::Precondition("harmonic bound needs a harmonic frame in identity order".into()));
        }
        matrix_bound(self.delta, self.frame_dim, self.vectors, self.n, true)
    }
}

/// `||Q|| <= matrix_bound + sigma`.
pub fn quantized_norm_bound(stats: &LayerStats) -> Result<f64> {
    Ok(stats.matrix_bound()? + stats.sigma)
}

/// Harmonic per-layer constant `(8 pi + sqrt 3) / (6 sqrt 3)`.
fn harmonic_constant() -> f64 {
    (8.0 * PI + 3f64.sqrt()) / (6.0 * 3f64.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FnnVariant {
    /// Per-layer general-frame bound.
    General,
    /// Harmonic frames in identity order, `O(1/N)` per layer.
    Harmonic,
    /// Equal hidden widths, shared `(N, delta)`, last layer in row mode.
    SameWidth,
    /// [`FnnVariant::SameWidth`] once `N >= (2 sqrt2 delta M^2 / min sigma)^m`.
    Simplified,
}

/// `L^(n-1) ||X|| sum_j { e_j prod_{i>j} sigma_i prod_{l<j} (e_l + sigma_l) }`.
fn layered_sum(errs: &[f64], sigmas: &[f64], lip: f64, input_norm: f64) -> f64 {
    let n = errs.len();
    let mut total = 0.0;
    for j in 0..n {
        let after: f64 = sigmas[j + 1..].iter().product();
        let before: f64 = (0..j).map(|l| errs[l] + sigmas[l]).product();
        total += errs[j] * after * before;
    }
    lip.powi(n as i32 - 1) * input_norm * total
}

/// Shared `(m, M, N, delta)` for the same-width variants.
fn same_width_params(stats: &[LayerStats]) -> Result<(usize, f64, usize, f64)> {
    let n_layers = stats.len();
    if n_layers < 2 {
        return Err(Error::Precondition("same-width bounds need at least two layers".into()));
    }
    let m = stats[0].m_out;
    if stats[..n_layers - 1].iter().any(|s| s.m_out != m) {
        return Err(Error::Precondition("hidden widths differ".into()));
    }
    if stats.iter().any(|s| s.frame_dim != m) {
        return Err(Error::Precondition(
            "every frame must live in R^m (hidden layers by column, last layer by row)".into(),
        ));
    }
    let (n, delta) = (stats[0].n, stats[0].delta);
    if stats.iter().any(|s| s.n != n || s.delta != delta) {
        return Err(Error::Precondition("layers use different N or delta".into()));
    }
    let big_m = stats[0].m_in.max(m).max(stats[n_layers - 1].m_out);
    Ok((m, big_m as f64, n, delta))
}

/// Feed-forward network error bound, linear in `input_norm`.
pub fn fnn_bound(stats: &[LayerStats], lip: f64, input_norm: f64, variant: FnnVariant) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::InvalidArgument("no layers".into()));
    }
    let sigmas: Vec<f64> = stats.iter().map(|s| s.sigma).collect();
    match variant {
        FnnVariant::General => {
            let errs = stats.iter().map(|s| s.matrix_bound()).collect::<Result<Vec<_>>>()?;
            Ok(layered_sum(&errs, &sigmas, lip, input_norm))
        }
        FnnVariant::Harmonic => {
            let c = harmonic_constant();
            let errs = stats
                .iter()
                .map(|s| {
                    if !s.harmonic {
                        return Err(Error::Precondition(
                            "harmonic bound needs harmonic frames in identity order".into(),
                        ));
                    }
                    check_frame_dims(s.frame_dim, s.n)?;
                    let m = s.frame_dim as f64;
                    Ok(c * s.delta * m * m * (s.vectors as f64).sqrt() / s.n as f64)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(layered_sum(&errs, &sigmas, lip, input_norm))
        }
        FnnVariant::SameWidth => {
            let (m, big_m, n, delta) = same_width_params(stats)?;
            check_frame_dims(m, n)?;
            let t = 2.0 * SQRT_2 * delta * big_m * big_m * (n as f64).powf(-1.0 / m as f64);
            Ok(layered_sum(&vec![t; stats.len()], &sigmas, lip, input_norm))
        }
        FnnVariant::Simplified => {
            let (m, big_m, n, delta) = same_width_params(stats)?;
            check_frame_dims(m, n)?;
            let min_sigma = sigmas.iter().copied().fold(f64::INFINITY, f64::min);
            if min_sigma <= 0.0 {
                return Err(Error::Precondition("a layer has zero norm; N threshold is infinite".into()));
            }
            let threshold = (2.0 * SQRT_2 * delta * big_m * big_m / min_sigma).powi(m as i32);
            if (n as f64) < threshold {
                return Err(Error::Precondition(format!(
                    "N threshold not met: N = {n} < (2 sqrt2 delta M^2 / min sigma)^m = {threshold:e}"
                )));
            }
            let prod: f64 = sigmas.iter().product();
            let sum: f64 = sigmas
                .iter()
                .enumerate()
                .map(|(j, s)| 2f64.powi(j as i32 + 1) / s)
                .sum();
            Ok(SQRT_2 * delta * big_m * big_m * (n as f64).powf(-1.0 / m as f64)
                * lip.powi(stats.len() as i32 - 1)
                * input_norm
                * prod
                * sum)
        }
    }
}

/// Error bound for `n_blocks` residual blocks of width `k` quantized with a
/// shared `(N, delta)`; `lambda` is the largest norm of any block matrix.
pub fn residual_bound(lambda: f64, delta: f64, k: usize, n: usize, n_blocks: usize, input_norm: f64) -> Result<f64> {
    check_frame_dims(k, n)?;
    if n_blocks == 0 {
        return Err(Error::InvalidArgument("no residual blocks".into()));
    }
    let kf = k as f64;
    let c = delta * kf * (kf * (kf + 3.0)).sqrt();
    let decay = (n as f64).powf(-1.0 / kf);
    let a = 4.0 * c * (c + lambda) * decay;
    let b = (2.0 * c * decay + lambda).powi(2) + 1.0;
    let growth = lambda * lambda + 1.0;
    let sum: f64 = (0..n_blocks)
        .map(|j| growth.powi(j as i32) * b.powi((n_blocks - 1 - j) as i32))
        .sum();
    Ok(a * input_norm * sum)
}

/// Worst and mean output error over a dataset, with the log-scaled
/// tightness statistic `ln mean(||f(X) - f_Q(X)|| N / delta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmpiricalError {
    pub worst: f64,
    pub mean: f64,
    /// `None` when every error is zero, or when layers do not share one
    /// `(N, delta)`.
    pub tightness: Option<f64>,
}

/// Shared `(N, delta)` across every quantized matrix, if any.
pub fn shared_scale(qm: &QuantizedModel) -> Option<(usize, f64)> {
    let mut it = qm.matrices();
    let first = it.next()?;
    let scale = (first.frame().len(), first.alphabet().step());
    it.all(|m| (m.frame().len(), m.alphabet().step()) == scale)
        .then_some(scale)
}

pub fn empirical_error(model: &Model, qm: &QuantizedModel, inputs: &[DVector<f64>]) -> Result<EmpiricalError> {
    empirical_error_with(model, &qm.reconstruct(), shared_scale(qm), inputs)
}

/// As [`empirical_error`], for a quantized model that is already
/// materialized.
pub fn empirical_error_with(
    model: &Model,
    quantized: &Model,
    scale: Option<(usize, f64)>,
    inputs: &[DVector<f64>],
) -> Result<EmpiricalError> {
    use rayon::prelude::*;
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let errs = inputs
        .par_iter()
        .map(|x| Ok((model.forward(x)? - quantized.forward(x)?).norm()))
        .collect::<Result<Vec<f64>>>()?;
    let worst = errs.iter().copied().fold(0.0, f64::max);
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    let tightness = match scale {
        Some((n, delta)) if mean > 0.0 => Some((mean * n as f64 / delta).ln()),
        _ => None,
    };
    Ok(EmpiricalError {
        worst,
        mean,
        tightness,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BoundKind {
    Vector,
    Matrix,
    MatrixHarmonic,
    QuantizedNorm,
    #[serde(rename = "FNN")]
    Fnn,
    #[serde(rename = "FNNHarmonic")]
    FnnHarmonic,
    #[serde(rename = "FNNSameWidth")]
    FnnSameWidth,
    #[serde(rename = "FNNSimplified")]
    FnnSimplified,
    Residual,
}

impl BoundKind {
    pub fn name(&self) -> &'static str {
        match self {
            BoundKind::Vector => "Vector",
            BoundKind::Matrix => "Matrix",
            BoundKind::MatrixHarmonic => "MatrixHarmonic",
            BoundKind::QuantizedNorm => "QuantizedNorm",
            BoundKind::Fnn => "FNN",
            BoundKind::FnnHarmonic => "FNNHarmonic",
            BoundKind::FnnSameWidth => "FNNSameWidth",
            BoundKind::FnnSimplified => "FNNSimplified",
            BoundKind::Residual => "Residual",
        }
    }
}

/// One theoretical bound next to the measured quantity it controls.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub bound_kind: BoundKind,
    /// Layer index for per-matrix reports.
    pub layer: Option<usize>,
    pub theoretical: f64,
    pub empirical: f64,
    /// `||X||` of the input the network-level report was evaluated at; 0 for
    /// per-matrix reports.
    pub input_norm: f64,
    pub delta: f64,
    pub n: usize,
    pub holds: bool,
}

impl BoundReport {
    fn new(kind: BoundKind, layer: Option<usize>, theoretical: f64, empirical: f64, input_norm: f64, delta: f64, n: usize) -> Self {
        BoundReport {
            bound_kind: kind,
            layer,
            theoretical,
            empirical,
            input_norm,
            delta,
            n,
            holds: empirical <= theoretical + 1e-9,
        }
    }

    pub const CSV_HEADER: &'static str = "bound_kind,layer,theoretical,empirical,input_norm,delta,N,holds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{},{},{}",
            self.bound_kind.name(),
            self.layer.map(|l| l.to_string()).unwrap_or_default(),
            self.theoretical,
            self.empirical,
            self.input_norm,
            self.delta,
            self.n,
            self.holds
        )
    }
}

/// Pairs of float and quantized matrices, layer by layer.
fn matrix_pairs<'a>(model: &'a Model, qm: &'a QuantizedModel) -> Result<Vec<(usize, DMatrix<f64>, &'a QuantizedMatrix)>> {
    if model.layers().len() != qm.layers().len() {
        return Err(Error::DimensionMismatch {
            context: "layer count of quantized model".into(),
            expected: model.layers().len(),
            actual: qm.layers().len(),
        });
    }
    let mut out = Vec::new();
    for (i, (l, ql)) in model.layers().iter().zip(qm.layers()).enumerate() {
        match (l, ql) {
            (Layer::Affine { weight, bias }, QuantizedLayer::Affine(q)) => {
                out.push((i, crate::quantizer::augmented(weight, bias.as_ref()), q));
            }
            (Layer::Residual { first, second, bias }, QuantizedLayer::Residual { first: q1, second: q2 }) => {
                out.push((i, crate::quantizer::augmented(first, bias.as_ref()), q1));
                out.push((i, second.clone(), q2));
            }
            _ => {
                return Err(Error::Format("float and quantized layer kinds differ".into()).in_layer(i));
            }
        }
    }
    for (i, w, q) in &out {
        if w.shape() != (q.rows(), q.cols()) {
            return Err(Error::DimensionMismatch {
                context: "quantized matrix shape".into(),
                expected: w.nrows() * w.ncols(),
                actual: q.rows() * q.cols(),
            }
            .in_layer(*i));
        }
    }
    Ok(out)
}

/// Finds the input maximizing `err(X) / ||X||` for maps whose bound is
/// linear in `||X||`; returns `(err, ||X||)`.
fn worst_ratio(errors: impl Iterator<Item = (f64, f64)>) -> Option<(f64, f64)> {
    errors
        .filter(|&(_, norm)| norm > 0.0)
        .max_by(|a, b| (a.0 / a.1).total_cmp(&(b.0 / b.1)))
}

/// Evaluates every applicable bound for `model` and its quantization on
/// `inputs`.
///
/// Per-matrix reports cover every layer. Network-level reports need a
/// biasless model: feed-forward bounds for all-affine models, and the
/// residual bound for the longest run of residual blocks, evaluated on the
/// float activations entering that run.
pub fn bound_reports(model: &Model, qm: &QuantizedModel, inputs: &[DVector<f64>]) -> Result<Vec<BoundReport>> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let pairs = matrix_pairs(model, qm)?;
    let mut reports = Vec::new();
    let mut stats = Vec::with_capacity(pairs.len());
    for (i, w, q) in &pairs {
        let s = LayerStats::from_quantized(w, q)?;
        let diff = operator_norm(&(w - q.reconstruct()), NORM_TOL, NORM_MAX_ITERS);
        let qnorm = operator_norm(&q.reconstruct(), NORM_TOL, NORM_MAX_ITERS);
        if let Ok(b) = s.matrix_bound() {
            reports.push(BoundReport::new(BoundKind::Matrix, Some(*i), b, diff, 0.0, s.delta, s.n));
            reports.push(BoundReport::new(BoundKind::QuantizedNorm, Some(*i), b + s.sigma, qnorm, 0.0, s.delta, s.n));
        }
        if let Ok(b) = s.harmonic_matrix_bound() {
            reports.push(BoundReport::new(BoundKind::MatrixHarmonic, Some(*i), b, diff, 0.0, s.delta, s.n));
        }
        stats.push(s);
    }

    let biasless = model.layers().iter().all(|l| !l.has_bias());
    if !biasless {
        return Ok(reports);
    }
    let quantized = qm.reconstruct();
    let scale = shared_scale(qm).unwrap_or((0, f64::NAN));

    if !model.has_residual() {
        let errs: Vec<(f64, f64)> = inputs
            .iter()
            .map(|x| Ok(((model.forward(x)? - quantized.forward(x)?).norm(), x.norm())))
            .collect::<Result<_>>()?;
        if let Some((err, norm)) = worst_ratio(errs.into_iter()) {
            let lip = model.activation().lipschitz();
            for (variant, kind) in [
                (FnnVariant::General, BoundKind::Fnn),
                (FnnVariant::Harmonic, BoundKind::FnnHarmonic),
                (FnnVariant::SameWidth, BoundKind::FnnSameWidth),
                (FnnVariant::Simplified, BoundKind::FnnSimplified),
            ] {
                if let Ok(b) = fnn_bound(&stats, lip, norm, variant) {
                    reports.push(BoundReport::new(kind, None, b, err, norm, scale.1, scale.0));
                }
            }
        }
        return Ok(reports);
    }

    // Longest run of consecutive residual blocks.
    let layers = model.layers();
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < layers.len() {
        if matches!(layers[i], Layer::Residual { .. }) {
            let start = i;
            while i < layers.len() && matches!(layers[i], Layer::Residual { .. }) {
                i += 1;
            }
            if best.is_none_or(|(s, e)| e - s < i - start) {
                best = Some((start, i));
            }
        } else {
            i += 1;
        }
    }
    let Some((start, end)) = best else {
        return Ok(reports);
    };
    let act = model.activation();
    let block_stats: Vec<&LayerStats> = pairs
        .iter()
        .zip(&stats)
        .filter(|((i, _, _), _)| (start..end).contains(i))
        .map(|(_, s)| s)
        .collect();
    let lambda = block_stats.iter().map(|s| s.sigma).fold(0.0, f64::max);
    let delta = block_stats.iter().map(|s| s.delta).fold(0.0, f64::max);
    let n = block_stats.iter().map(|s| s.n).min().unwrap_or(0);
    let k = layers[start].out_dim();

    let errs: Vec<(f64, f64)> = inputs
        .iter()
        .map(|x| {
            // Float activations entering the residual run.
            let mut h = x.clone();
            for layer in &layers[..start] {
                h = Model::new(vec![layer.clone()], act)?.forward(&h)?;
                act.apply_in_place(&mut h);
            }
            let (mut y, mut yq) = (h.clone(), h.clone());
            for (idx, (layer, qlayer)) in layers.iter().zip(quantized.layers()).enumerate().take(end).skip(start) {
                let f = Model::new(vec![layer.clone()], act)?;
                let fq = Model::new(vec![qlayer.clone()], act)?;
                if idx > start {
                    act.apply_in_place(&mut y);
                    act.apply_in_place(&mut yq);
                }
                y = f.forward(&y)?;
                yq = fq.forward(&yq)?;
            }
            Ok(((y - yq).norm(), h.norm()))
        })
        .collect::<Result<_>>()?;
    if let Some((err, norm)) = worst_ratio(errs.into_iter()) {
        if let Ok(b) = residual_bound(lambda, delta, k, n, end - start, norm) {
            reports.push(BoundReport::new(BoundKind::Residual, None, b, err, norm, delta, n));
        }
    }
    Ok(reports)
}
