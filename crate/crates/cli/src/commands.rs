use std::path::{Path, PathBuf};

use framequant::bounds::{bound_reports, empirical_error_with, shared_scale, BoundReport, EmpiricalError};
use framequant::formats::{load_model, load_quantized, save_quantized};
use framequant::frames::{verify_funtf_rows, FuntfReport};
use framequant::mnist::{load_mnist, Dataset};
use framequant::network::argmax;
use framequant::quantizer::{augmented, quantize_network, select_k_delta, FrameSpec, LayerConfig, StorageBits};
use framequant::{Frame, Layer, Mode, Model, QuantizationConfig, QuantizedModel, StepPolicy};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::table::{emit, opt_real, real, Format, Table};
use crate::{Failure, LayoutArgs, ModeArg, PolicyArgs, SampleArgs, Switch};

const VERIFY_TOL: f64 = 1e-9;
const PREPROCESSING: &str = "pixels / 255, no centering";

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn policy(p: &PolicyArgs) -> Result<Option<StepPolicy>, Failure> {
    Ok(match (p.bits, p.delta, p.k) {
        (Some(b), None, None) => Some(StepPolicy::Bits(b)),
        (None, Some(step), None) => Some(StepPolicy::Step(step)),
        (None, Some(step), Some(levels)) => Some(StepPolicy::Explicit { levels, step }),
        (None, None, None) => None,
        _ => return Err(usage("use --bits alone, --delta alone, or --K with --delta")),
    })
}

fn required_policy(p: &PolicyArgs) -> Result<StepPolicy, Failure> {
    policy(p)?.ok_or_else(|| usage("a step policy is required: --bits, --delta, or --K with --delta"))
}

/// Harmonic frames with `n` elements per layer, modes taken from `layout`.
pub fn config(model: &Model, n: usize, policy: StepPolicy, layout: &LayoutArgs) -> Result<QuantizationConfig, Failure> {
    let last = model.layers().len() - 1;
    let mut layers = Vec::with_capacity(model.layers().len());
    for (i, layer) in model.layers().iter().enumerate() {
        let mode = match layer {
            Layer::Residual { .. } => Mode::Column,
            Layer::Affine { .. } if i == last && layout.last_layer_row == Switch::On => Mode::Row,
            Layer::Affine { .. } => match layout.mode {
                ModeArg::Column => Mode::Column,
                ModeArg::Row => Mode::Row,
            },
        };
        let (rows, cols) = layer.quantized_shape();
        let dim = mode.vector_dim(rows, cols);
        if let Some(d) = layout.frame_d {
            if d != dim {
                return Err(usage(format!(
                    "--frame-d {d} does not fit layer {i}: its {mode:?} vectors have length {dim}"
                )));
            }
        }
        layers.push(LayerConfig {
            frame: FrameSpec::Harmonic { dim, len: n },
            policy,
            mode,
        });
    }
    Ok(QuantizationConfig {
        layers,
        headroom: 1.0,
        shared_levels: false,
    })
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<Model>, Failure> {
    paths.iter().map(|p| load_model(p).map_err(Failure::from)).collect()
}

fn load_data(dir: &Path) -> Result<Dataset, Failure> {
    let data = load_mnist(dir)?;
    if data.is_empty() {
        return Err(Failure::Data(format!("{}: dataset is empty", dir.display())));
    }
    Ok(data)
}

/// Image indices for repetition `rep`: everything, or a seeded subsample.
fn subset(len: usize, sample: &SampleArgs, rep: usize) -> Result<Vec<usize>, Failure> {
    match sample.samples {
        None => Ok((0..len).collect()),
        Some(0) => Err(usage("--samples must be positive")),
        Some(n) if n > len => Err(usage(format!("--samples {n} exceeds dataset size {len}"))),
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(sample.seed.wrapping_add(rep as u64));
            let mut idx = rand::seq::index::sample(&mut rng, len, n).into_vec();
            idx.sort_unstable();
            Ok(idx)
        }
    }
}

struct Batch {
    inputs: Vec<DVector<f64>>,
    labels: Vec<u8>,
}

fn batch(data: &Dataset, idx: &[usize]) -> Batch {
    Batch {
        inputs: idx.iter().map(|&i| data.images[i].clone()).collect(),
        labels: idx.iter().map(|&i| data.labels[i]).collect(),
    }
}

fn accuracy(model: &Model, b: &Batch) -> Result<f64, Failure> {
    let hits = b
        .inputs
        .par_iter()
        .zip(&b.labels)
        .map(|(x, &y)| Ok((argmax(&model.forward(x)?) == y as usize) as usize))
        .collect::<framequant::Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / b.labels.len() as f64)
}

/// Accuracy of `evaluated` and, when the float model is known, its output
/// error against it.
struct Cell {
    accuracy: f64,
    error: Option<EmpiricalError>,
}

fn evaluate(float: Option<&Model>, evaluated: &Model, scale: Option<(usize, f64)>, b: &Batch) -> Result<Cell, Failure> {
    let error = match float {
        Some(f) => Some(empirical_error_with(f, evaluated, scale, &b.inputs)?),
        None => None,
    };
    Ok(Cell {
        accuracy: accuracy(evaluated, b)?,
        error,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

const EVAL_COLUMNS: [&str; 7] = ["N", "delta", "accuracy_mean", "accuracy_std", "worst_error", "mean_error", "tightness"];

/// One CSV row: accuracy mean and sample standard deviation over cells,
/// worst error over cells, mean of per-cell mean errors, and the tightness
/// statistic of that mean.
fn aggregate_row(scale: Option<(usize, f64)>, cells: &[Cell]) -> Vec<Value> {
    let acc: Vec<f64> = cells.iter().map(|c| c.accuracy).collect();
    let (acc_mean, acc_std) = mean_std(&acc);
    let errors: Option<Vec<EmpiricalError>> = cells.iter().map(|c| c.error).collect();
    let (worst, mean, tight) = match errors {
        Some(e) if !e.is_empty() => {
            let worst = e.iter().map(|e| e.worst).fold(0.0, f64::max);
            let mean = e.iter().map(|e| e.mean).sum::<f64>() / e.len() as f64;
            let tight = match scale {
                Some((n, delta)) if mean > 0.0 => Some((mean * n as f64 / delta).ln()),
                _ => None,
            };
            (Some(worst), Some(mean), tight)
        }
        _ => (None, None, None),
    };
    vec![
        scale.map_or(Value::Null, |s| json!(s.0)),
        opt_real(scale.map(|s| s.1)),
        real(acc_mean),
        real(acc_std),
        opt_real(worst),
        opt_real(mean),
        opt_real(tight),
    ]
}

fn rows_of(frame: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for row in frame.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
    }
    s
}

fn parse_rows(path: &Path) -> Result<DMatrix<f64>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| Failure::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Failure::Data(format!(
                    "{}:{}: {} values, expected {}",
                    path.display(),
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Failure::Data(format!("{}: no frame vectors", path.display())));
    }
    let d = rows[0].len();
    Ok(DMatrix::from_row_iterator(rows.len(), d, rows.into_iter().flatten()))
}

fn frame_table(kind: &str, vectors: &DMatrix<f64>, r: &FuntfReport) -> Table {
    let mut t = Table::new(&[
        "kind",
        "d",
        "N",
        "unit_norm_ok",
        "tight_ok",
        "A",
        "max_norm_deviation",
        "max_tight_deviation",
    ]);
    t.push(vec![
        json!(kind),
        json!(vectors.ncols()),
        json!(vectors.nrows()),
        json!(r.unit_norm_ok),
        json!(r.tight_ok),
        opt_real(r.frame_bound_a),
        real(r.max_norm_deviation),
        real(r.max_tight_deviation),
    ]);
    t
}

pub fn frame(
    harmonic: bool,
    explicit: Option<PathBuf>,
    d: Option<usize>,
    n: Option<usize>,
    out: Option<PathBuf>,
    format: Format,
) -> Result<(), Failure> {
    let (kind, vectors) = if harmonic {
        let (d, n) = (d.expect("required by clap"), n.expect("required by clap"));
        ("harmonic", Frame::harmonic(d, n)?.vectors().clone())
    } else {
        let path = explicit.expect("required by clap");
        let v = parse_rows(&path)?;
        if d.is_some_and(|d| d != v.ncols()) || n.is_some_and(|n| n != v.nrows()) {
            return Err(Failure::Data(format!(
                "{}: frame is {} x {}, which does not match --frame-d/--frame-N",
                path.display(),
                v.nrows(),
                v.ncols()
            )));
        }
        ("explicit", v)
    };
    let report = verify_funtf_rows(&vectors, VERIFY_TOL);
    emit(&frame_table(kind, &vectors, &report).render(format), None)?;
    if !report.is_funtf() {
        return Err(Failure::Constraint(format!(
            "not a FUNTF: max |norm - 1| = {:e}, max deviation of S from (N/d)I = {:e}",
            report.max_norm_deviation, report.max_tight_deviation
        )));
    }
    if let Some(path) = out {
        emit(&rows_of(&vectors), Some(&path))?;
    }
    Ok(())
}

fn matrix_names(qm: &QuantizedModel) -> Vec<(usize, &'static str, &framequant::QuantizedMatrix)> {
    let mut out = Vec::new();
    for (i, layer) in qm.layers().iter().enumerate() {
        match layer {
            framequant::QuantizedLayer::Affine(m) => out.push((i, "affine", m)),
            framequant::QuantizedLayer::Residual { first, second } => {
                out.push((i, "residual_w1", first));
                out.push((i, "residual_w2", second));
            }
        }
    }
    out
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Column => "column",
        Mode::Row => "row",
    }
}

pub fn quantize(
    model: &Path,
    n: usize,
    policy: &PolicyArgs,
    layout: &LayoutArgs,
    out: &Path,
    format: Format,
) -> Result<(), Failure> {
    let model = load_model(model)?;
    let cfg = config(&model, n, required_policy(policy)?, layout)?;
    let qm = quantize_network(&model, &cfg)?;
    save_quantized(&qm, out)?;
    let mut t = Table::new(&["layer", "matrix", "rows", "cols", "mode", "K", "delta", "N", "bits_per_code", "code_bits"]);
    for (i, name, m) in matrix_names(&qm) {
        t.push(vec![
            json!(i),
            json!(name),
            json!(m.rows()),
            json!(m.cols()),
            json!(mode_name(m.mode())),
            json!(m.alphabet().levels()),
            real(m.alphabet().step()),
            json!(m.frame().len()),
            json!(m.alphabet().bits_per_code()),
            json!(m.storage().code_bits),
        ]);
    }
    t.meta("output", out.display().to_string());
    emit(&t.render(format), None)
}

pub struct EvalInput {
    pub models: Vec<PathBuf>,
    pub quantized: Vec<PathBuf>,
    pub data: PathBuf,
    pub frame_n: Option<usize>,
    pub policy: PolicyArgs,
    pub layout: LayoutArgs,
    pub sample: SampleArgs,
    pub out: Option<PathBuf>,
    pub format: Format,
}

fn common_scale(scales: &[Option<(usize, f64)>]) -> Option<(usize, f64)> {
    let first = *scales.first()?;
    scales.iter().all(|s| *s == first).then_some(first).flatten()
}

pub fn eval(a: EvalInput) -> Result<(), Failure> {
    let policy = policy(&a.policy)?;
    if a.models.is_empty() && a.quantized.is_empty() {
        return Err(usage("give --model or --quantized"));
    }
    if !a.quantized.is_empty() && !a.models.is_empty() && a.quantized.len() != a.models.len() {
        return Err(usage(format!(
            "{} --model files but {} --quantized files",
            a.models.len(),
            a.quantized.len()
        )));
    }
    if a.frame_n.is_some() != policy.is_some() {
        return Err(usage("on-the-fly quantization needs both --frame-N and a step policy"));
    }
    let data = load_data(&a.data)?;
    let b = batch(&data, &subset(data.len(), &a.sample, 0)?);
    let floats = load_models(&a.models)?;

    let mut cells = Vec::new();
    let mut scales = Vec::new();
    if !a.quantized.is_empty() {
        for (i, path) in a.quantized.iter().enumerate() {
            let qm = load_quantized(path)?;
            let scale = shared_scale(&qm);
            cells.push(evaluate(floats.get(i), &qm.reconstruct(), scale, &b)?);
            scales.push(scale);
        }
    } else if let (Some(n), Some(policy)) = (a.frame_n, policy) {
        for model in &floats {
            let qm = quantize_network(model, &config(model, n, policy, &a.layout)?)?;
            let scale = shared_scale(&qm);
            cells.push(evaluate(Some(model), &qm.reconstruct(), scale, &b)?);
            scales.push(scale);
        }
    } else {
        for model in &floats {
            cells.push(evaluate(None, model, None, &b)?);
            scales.push(None);
        }
    }
    let mut t = Table::new(&EVAL_COLUMNS);
    t.push(aggregate_row(common_scale(&scales), &cells));
    t.meta("preprocessing", PREPROCESSING);
    t.meta("samples", b.labels.len());
    t.meta("models", cells.len());
    emit(&t.render(a.format), a.out.as_deref())
}

pub struct SweepInput {
    pub models: Vec<PathBuf>,
    pub data: PathBuf,
    pub ns: Vec<usize>,
    pub deltas: Vec<f64>,
    pub k: Option<u32>,
    pub repetitions: usize,
    pub layout: LayoutArgs,
    pub sample: SampleArgs,
    pub out: Option<PathBuf>,
    pub format: Format,
}

fn sorted_grid(mut ns: Vec<usize>, mut deltas: Vec<f64>) -> Result<(Vec<usize>, Vec<f64>), Failure> {
    if ns.is_empty() || deltas.is_empty() {
        return Err(usage("N and delta lists must be nonempty"));
    }
    if let Some(d) = deltas.iter().find(|d| **d <= 0.0) {
        return Err(usage(format!("delta must be positive, got {d}")));
    }
    ns.sort_unstable();
    ns.dedup();
    deltas.sort_by(f64::total_cmp);
    deltas.dedup();
    Ok((ns, deltas))
}

/// Batches for every repetition.
fn repetition_batches(data: &Dataset, sample: &SampleArgs, repetitions: usize) -> Result<Vec<Batch>, Failure> {
    if repetitions == 0 {
        return Err(usage("--repetitions must be at least 1"));
    }
    if repetitions > 1 && sample.samples.is_none() {
        return Err(usage("--repetitions > 1 needs --samples, otherwise every repetition is identical"));
    }
    (0..repetitions)
        .map(|r| Ok(batch(data, &subset(data.len(), sample, r)?)))
        .collect()
}

pub fn sweep(a: SweepInput) -> Result<(), Failure> {
    let (ns, deltas) = sorted_grid(a.ns, a.deltas)?;
    let models = load_models(&a.models)?;
    let data = load_data(&a.data)?;
    let batches = repetition_batches(&data, &a.sample, a.repetitions)?;

    let mut t = Table::new(&EVAL_COLUMNS);
    for &n in &ns {
        for &delta in &deltas {
            let policy = match a.k {
                Some(levels) => StepPolicy::Explicit { levels, step: delta },
                None => StepPolicy::Step(delta),
            };
            let mut cells = Vec::new();
            for model in &models {
                let qm = quantize_network(model, &config(model, n, policy, &a.layout)?)?;
                let fq = qm.reconstruct();
                for b in &batches {
                    cells.push(evaluate(Some(model), &fq, Some((n, delta)), b)?);
                }
            }
            t.push(aggregate_row(Some((n, delta)), &cells));
        }
    }
    t.meta("preprocessing", PREPROCESSING);
    t.meta("samples", batches[0].labels.len());
    t.meta("models", models.len());
    t.meta("repetitions", a.repetitions);
    t.meta("seed", a.sample.seed);
    emit(&t.render(a.format), a.out.as_deref())
}

/// Smallest step admitting `K = 1` for every matrix of `model`.
fn uniform_onebit_step(model: &Model, layout: &LayoutArgs) -> Result<f64, Failure> {
    // N only sets frame lengths, which the step selection ignores.
    let cfg = config(model, model.input_dim(), StepPolicy::Bits(1), layout)?;
    let mut step = 0.0f64;
    for (i, (layer, lc)) in model.layers().iter().zip(&cfg.layers).enumerate() {
        let mats = match layer {
            Layer::Affine { weight, bias } => vec![augmented(weight, bias.as_ref())],
            Layer::Residual { first, second, bias } => vec![augmented(first, bias.as_ref()), second.clone()],
        };
        for w in mats {
            let a = select_k_delta(&w, StepPolicy::Bits(1), lc.mode, 1.0).map_err(|e| Failure::from(e.in_layer(i)))?;
            step = step.max(a.step());
        }
    }
    Ok(step)
}

fn storage_excluding_last(qm: &QuantizedModel) -> StorageBits {
    let last = qm.layers().len() - 1;
    qm.layers()[..last]
        .iter()
        .flat_map(|l| l.matrices())
        .map(|m| m.storage())
        .sum()
}

#[allow(clippy::too_many_arguments)]
pub fn onebit(
    paths: &[PathBuf],
    dir: &Path,
    ns: &[usize],
    delta: Option<f64>,
    layout: &LayoutArgs,
    sample: &SampleArgs,
    out: Option<&Path>,
    format: Format,
) -> Result<(), Failure> {
    let (ns, _) = sorted_grid(ns.to_vec(), vec![1.0])?;
    let models = load_models(paths)?;
    let data = load_data(dir)?;
    let b = batch(&data, &subset(data.len(), sample, 0)?);
    let steps = models
        .iter()
        .map(|m| match delta {
            Some(d) => Ok(d),
            None => uniform_onebit_step(m, layout),
        })
        .collect::<Result<Vec<f64>, Failure>>()?;

    let mut t = Table::new(&["N", "accuracy_mean", "accuracy_std", "code_bits", "saved_bits"]);
    for &n in &ns {
        let mut acc = Vec::new();
        let mut bits = None;
        for (model, &step) in models.iter().zip(&steps) {
            let policy = StepPolicy::Explicit { levels: 1, step };
            let qm = quantize_network(model, &config(model, n, policy, layout)?)?;
            acc.push(accuracy(&qm.reconstruct(), &b)?);
            bits.get_or_insert_with(|| storage_excluding_last(&qm));
        }
        let (mean, std) = mean_std(&acc);
        let bits = bits.expect("at least one model");
        t.push(vec![json!(n), real(mean), real(std), json!(bits.code_bits), json!(bits.saved_bits)]);
    }
    t.meta("preprocessing", PREPROCESSING);
    t.meta("samples", b.labels.len());
    t.meta("delta", steps.iter().map(|s| real(*s)).collect::<Vec<_>>());
    t.meta("storage_scope", "every layer except the last");
    emit(&t.render(format), out)
}

pub fn bounds(
    model: &Path,
    quantized: &Path,
    dir: &Path,
    sample: &SampleArgs,
    out: Option<&Path>,
    format: Format,
) -> Result<(), Failure> {
    let model = load_model(model)?;
    let qm = load_quantized(quantized)?;
    let data = load_data(dir)?;
    let b = batch(&data, &subset(data.len(), sample, 0)?);
    let reports = bound_reports(&model, &qm, &b.inputs)?;
    let columns: Vec<&'static str> = BoundReport::CSV_HEADER.split(',').collect();
    let mut t = Table::new(&columns);
    for r in &reports {
        t.push(vec![
            json!(r.bound_kind.name()),
            r.layer.map_or(Value::Null, |l| json!(l)),
            real(r.theoretical),
            real(r.empirical),
            real(r.input_norm),
            real(r.delta),
            json!(r.n),
            json!(r.holds),
        ]);
    }
    t.meta("preprocessing", PREPROCESSING);
    t.meta("samples", b.labels.len());
    emit(&t.render(format), out)
}

#[allow(clippy::too_many_arguments)]
pub fn storage(
    quantized: Option<&Path>,
    model: Option<&Path>,
    n: Option<usize>,
    policy: &PolicyArgs,
    layout: &LayoutArgs,
    out: Option<&Path>,
    format: Format,
) -> Result<(), Failure> {
    let qm = match (quantized, model) {
        (Some(q), _) => load_quantized(q)?,
        (None, Some(m)) => {
            let n = n.ok_or_else(|| usage("--model needs --frame-N"))?;
            let model = load_model(m)?;
            quantize_network(&model, &config(&model, n, required_policy(policy)?, layout)?)?
        }
        (None, None) => return Err(usage("give --quantized or --model")),
    };
    let mut t = Table::new(&[
        "layer",
        "matrix",
        "rows",
        "cols",
        "vectors",
        "N",
        "bits_per_code",
        "code_bits",
        "dense_bits_32",
        "saved_bits",
        "frame_overhead_bits",
    ]);
    let mut total = StorageBits::default();
    for (i, name, m) in matrix_names(&qm) {
        let s = m.storage();
        total = total + s;
        t.push(vec![
            json!(i),
            json!(name),
            json!(m.rows()),
            json!(m.cols()),
            json!(m.vector_count()),
            json!(m.frame().len()),
            json!(m.alphabet().bits_per_code()),
            json!(s.code_bits),
            json!(s.dense_bits_32),
            json!(s.saved_bits),
            json!(s.frame_overhead_bits),
        ]);
    }
    t.push(vec![
        Value::Null,
        json!("total"),
        Value::Null,
        Value::Null,
        Value::Null,
        Value::Null,
        Value::Null,
        json!(total.code_bits),
        json!(total.dense_bits_32),
        json!(total.saved_bits),
        json!(total.frame_overhead_bits),
    ]);
    emit(&t.render(format), out)
}
