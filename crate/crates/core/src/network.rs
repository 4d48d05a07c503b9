//! Feed-forward and residual networks, float and quantized inference.
//!
//! A [`Model`] is an ordered list of layers with the activation applied
//! between consecutive layers and not after the last one. Residual blocks
//! compute `W2 relu(W1 x + b) + x`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{Mode, QuantizedMatrix};

/// Activation between layers. Every variant has `act(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { alpha: f64 },
    Identity,
}

impl Activation {
    /// Lipschitz constant `L`.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Activation::Relu | Activation::Identity => 1.0,
            Activation::LeakyRelu { alpha } => alpha.abs().max(1.0),
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu { alpha } => {
                if v >= 0.0 {
                    v
                } else {
                    alpha * v
                }
            }
            Activation::Identity => v,
        }
    }

    pub fn apply_in_place(&self, x: &mut DVector<f64>) {
        if *self != Activation::Identity {
            x.apply(|v| *v = self.apply(*v));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Affine {
        /// `out x in`.
        weight: DMatrix<f64>,
        bias: Option<DVector<f64>>,
    },
    /// `x -> second * relu(first * x + bias) + x`, both `k x k`.
    Residual {
        first: DMatrix<f64>,
        second: DMatrix<f64>,
        bias: Option<DVector<f64>>,
    },
}

impl Layer {
    pub fn affine(weight: DMatrix<f64>, bias: Option<DVector<f64>>) -> Self {
        Layer::Affine { weight, bias }
    }

    pub fn residual(first: DMatrix<f64>, second: DMatrix<f64>, bias: Option<DVector<f64>>) -> Self {
        Layer::Residual { first, second, bias }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Affine { weight, .. } => weight.ncols(),
            Layer::Residual { first, .. } => first.ncols(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Affine { weight, .. } => weight.nrows(),
            Layer::Residual { first, .. } => first.nrows(),
        }
    }

    pub fn has_bias(&self) -> bool {
        match self {
            Layer::Affine { bias, .. } | Layer::Residual { bias, .. } => bias.is_some(),
        }
    }

    /// Shape of the (bias-augmented) first matrix handed to the quantizer.
    pub fn quantized_shape(&self) -> (usize, usize) {
        (self.out_dim(), self.in_dim() + self.has_bias() as usize)
    }

    fn validate(&self, index: usize) -> Result<()> {
        let err = |context: &str, expected: usize, actual: usize| {
            Err(Error::DimensionMismatch {
                context: context.into(),
                expected,
                actual,
            }
            .in_layer(index))
        };
        match self {
            Layer::Affine { weight, bias } => {
                if let Some(b) = bias {
                    if b.len() != weight.nrows() {
                        return err("bias length", weight.nrows(), b.len());
                    }
                }
            }
            Layer::Residual { first, second, bias } => {
                let k = first.nrows();
                if first.ncols() != k {
                    return err("residual first matrix columns", k, first.ncols());
                }
                if second.shape() != (k, k) {
                    return err("residual second matrix size", k, second.nrows().max(second.ncols()));
                }
                if let Some(b) = bias {
                    if b.len() != k {
                        return err("bias length", k, b.len());
                    }
                }
            }
        }
        Ok(())
    }

    fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Layer::Affine { weight, bias } => {
                let mut y = weight * x;
                if let Some(b) = bias {
                    y += b;
                }
                y
            }
            Layer::Residual { first, second, bias } => {
                let mut h = first * x;
                if let Some(b) = bias {
                    h += b;
                }
                Activation::Relu.apply_in_place(&mut h);
                second * h + x
            }
        }
    }
}

fn check_chain(dims: impl Iterator<Item = (usize, usize)>, has_residual: bool, act: Activation) -> Result<()> {
    let mut prev: Option<usize> = None;
    for (i, (input, output)) in dims.enumerate() {
        if let Some(p) = prev {
            if p != input {
                return Err(Error::DimensionMismatch {
                    context: "layer input does not chain with previous output".into(),
                    expected: p,
                    actual: input,
                }
                .in_layer(i));
            }
        }
        prev = Some(output);
    }
    if prev.is_none() {
        return Err(Error::InvalidArgument("model has no layers".into()));
    }
    if has_residual && act != Activation::Relu {
        return Err(Error::InvalidArgument(
            "residual blocks require ReLU activation".into(),
        ));
    }
    Ok(())
}

/// A float network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    activation: Activation,
    metadata: Option<serde_json::Value>,
}

impl Model {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            l.validate(i)?;
        }
        let has_residual = layers.iter().any(|l| matches!(l, Layer::Residual { .. }));
        check_chain(
            layers.iter().map(|l| (l.in_dim(), l.out_dim())),
            has_residual,
            activation,
        )?;
        Ok(Model {
            layers,
            activation,
            metadata: None,
        })
    }

    /// Attaches free-form metadata carried through the weight file.
    pub fn with_metadata(mut self, metadata: Option<serde_json::Value>) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn metadata(&self) -> Option<&serde_json::Value> {
        self.metadata.as_ref()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn has_residual(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Residual { .. }))
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_input(self.input_dim(), x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i != last {
                self.activation.apply_in_place(&mut h);
            }
        }
        Ok(h)
    }
}

fn check_input(expected: usize, x: &DVector<f64>) -> Result<()> {
    if x.len() != expected {
        return Err(Error::DimensionMismatch {
            context: "network input".into(),
            expected,
            actual: x.len(),
        });
    }
    Ok(())
}

pub fn forward(model: &Model, x: &DVector<f64>) -> Result<DVector<f64>> {
    model.forward(x)
}

/// Quantized counterpart of [`Layer`]. A folded bias lives in the last
/// column of the (first) quantized matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantizedLayer {
    Affine(QuantizedMatrix),
    Residual {
        first: QuantizedMatrix,
        second: QuantizedMatrix,
    },
}

impl QuantizedLayer {
    fn first(&self) -> &QuantizedMatrix {
        match self {
            QuantizedLayer::Affine(m) | QuantizedLayer::Residual { first: m, .. } => m,
        }
    }

    pub fn in_dim(&self) -> usize {
        let m = self.first();
        m.cols() - m.bias_folded() as usize
    }

    pub fn out_dim(&self) -> usize {
        self.first().rows()
    }

    pub fn matrices(&self) -> impl Iterator<Item = &QuantizedMatrix> {
        let (a, b) = match self {
            QuantizedLayer::Affine(m) => (m, None),
            QuantizedLayer::Residual { first, second } => (first, Some(second)),
        };
        std::iter::once(a).chain(b)
    }

    fn validate(&self, index: usize) -> Result<()> {
        if let QuantizedLayer::Residual { first, second } = self {
            let k = first.rows();
            let fail = |context: &str, expected, actual| {
                Err(Error::DimensionMismatch {
                    context: context.into(),
                    expected,
                    actual,
                }
                .in_layer(index))
            };
            if first.cols() - first.bias_folded() as usize != k {
                return fail("residual first matrix columns", k, first.cols());
            }
            if second.bias_folded() {
                return Err(Error::Format("residual second matrix cannot carry a bias".into()).in_layer(index));
            }
            if second.rows() != k || second.cols() != k {
                return fail("residual second matrix shape", k, second.rows().max(second.cols()));
            }
        }
        Ok(())
    }
}

fn augment_input(x: &DVector<f64>, folded: bool) -> std::borrow::Cow<'_, DVector<f64>> {
    if folded {
        std::borrow::Cow::Owned(x.clone().insert_row(x.len(), 1.0))
    } else {
        std::borrow::Cow::Borrowed(x)
    }
}

/// A network whose weights are stored as frame quantization codes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    layers: Vec<QuantizedLayer>,
    activation: Activation,
}

impl QuantizedModel {
    pub fn new(layers: Vec<QuantizedLayer>, activation: Activation) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            l.validate(i)?;
        }
        let has_residual = layers.iter().any(|l| matches!(l, QuantizedLayer::Residual { .. }));
        check_chain(
            layers.iter().map(|l| (l.in_dim(), l.out_dim())),
            has_residual,
            activation,
        )?;
        Ok(QuantizedModel { layers, activation })
    }

    pub fn layers(&self) -> &[QuantizedLayer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Every quantized matrix in layer order.
    pub fn matrices(&self) -> impl Iterator<Item = &QuantizedMatrix> {
        self.layers.iter().flat_map(|l| l.matrices())
    }

    /// Inference straight from the codes (`Q x` via the frame, never forming
    /// `Q`).
    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_input(self.input_dim(), x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                QuantizedLayer::Affine(m) => m.apply(&augment_input(&h, m.bias_folded()))?,
                QuantizedLayer::Residual { first, second } => {
                    let mut t = first.apply(&augment_input(&h, first.bias_folded()))?;
                    Activation::Relu.apply_in_place(&mut t);
                    second.apply(&t)? + &h
                }
            };
            if i != last {
                self.activation.apply_in_place(&mut h);
            }
        }
        Ok(h)
    }

    /// The float network `f_Q` with quantized matrices materialized.
    pub fn reconstruct(&self) -> Model {
        fn split(m: &QuantizedMatrix) -> (DMatrix<f64>, Option<DVector<f64>>) {
            let q = m.reconstruct();
            if m.bias_folded() {
                let last = q.ncols() - 1;
                let b = q.column(last).into_owned();
                (q.remove_column(last), Some(b))
            } else {
                (q, None)
            }
        }
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                QuantizedLayer::Affine(m) => {
                    let (weight, bias) = split(m);
                    Layer::Affine { weight, bias }
                }
                QuantizedLayer::Residual { first, second } => {
                    let (first, bias) = split(first);
                    Layer::Residual {
                        first,
                        second: second.reconstruct(),
                        bias,
                    }
                }
            })
            .collect();
        Model {
            layers,
            activation: self.activation,
            metadata: None,
        }
    }

    /// Whether any layer quantizes rows rather than columns.
    pub fn uses_row_mode(&self) -> bool {
        self.matrices().any(|m| m.mode() == Mode::Row)
    }
}

pub fn forward_quantized(qm: &QuantizedModel, x: &DVector<f64>) -> Result<DVector<f64>> {
    qm.forward(x)
}

/// Index of the largest output; ties go to the smallest index.
pub fn argmax(output: &DVector<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in output.iter().enumerate() {
        if v > output[best] {
            best = i;
        }
    }
    best
}

pub fn classify(model: &Model, x: &DVector<f64>) -> Result<usize> {
    Ok(argmax(&model.forward(x)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn identity_layer() {
        let m = Model::new(vec![Layer::affine(DMatrix::identity(2, 2), None)], Activation::Relu).unwrap();
        assert_eq!(m.forward(&v(&[1.0, -1.0])).unwrap(), v(&[1.0, -1.0]));
    }

    #[test]
    fn relu_between_layers() {
        let m = Model::new(
            vec![
                Layer::affine(DMatrix::identity(2, 2), None),
                Layer::affine(DMatrix::identity(2, 2), None),
            ],
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(m.forward(&v(&[1.0, -1.0])).unwrap(), v(&[1.0, 0.0]));
    }

    #[test]
    fn zero_residual_is_skip() {
        let m = Model::new(
            vec![Layer::residual(DMatrix::zeros(3, 3), DMatrix::zeros(3, 3), None)],
            Activation::Relu,
        )
        .unwrap();
        let x = v(&[0.5, -2.0, 3.0]);
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn residual_needs_relu() {
        let r = Model::new(
            vec![Layer::residual(DMatrix::zeros(3, 3), DMatrix::zeros(3, 3), None)],
            Activation::Identity,
        );
        assert!(r.is_err());
    }

    #[test]
    fn shape_errors() {
        let r = Model::new(
            vec![
                Layer::affine(DMatrix::zeros(3, 2), None),
                Layer::affine(DMatrix::zeros(2, 4), None),
            ],
            Activation::Relu,
        );
        assert!(matches!(r, Err(Error::Layer { layer: 1, .. })));
        let m = Model::new(vec![Layer::affine(DMatrix::zeros(3, 2), None)], Activation::Relu).unwrap();
        assert!(m.forward(&v(&[1.0])).is_err());
        assert!(Model::new(vec![], Activation::Relu).is_err());
    }

    #[test]
    fn leaky_relu_lipschitz() {
        assert_eq!(Activation::LeakyRelu { alpha: 0.1 }.lipschitz(), 1.0);
        assert_eq!(Activation::LeakyRelu { alpha: 2.0 }.lipschitz(), 2.0);
        assert_eq!(Activation::LeakyRelu { alpha: 0.1 }.apply(-2.0), -0.2);
    }

    #[test]
    fn argmax_ties() {
        assert_eq!(argmax(&v(&[0.1, 0.9])), 1);
        assert_eq!(argmax(&v(&[0.3, 0.3, 0.3])), 0);
    }
}
