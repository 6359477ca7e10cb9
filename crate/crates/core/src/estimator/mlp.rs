use crate::error::{Error, Result};

/// Fully connected layer `y = W x + b`, `W` row-major `rows x cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    rows: usize,
    cols: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl DenseLayer {
    pub fn new(rows: usize, cols: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidWeights(format!("layer shape {rows}x{cols} has a zero side")));
        }
        if weights.len() != rows * cols || bias.len() != rows {
            return Err(Error::InvalidWeights(format!(
                "layer {rows}x{cols} has {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            weights,
            bias,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, &b)| {
                row.iter().zip(input).map(|(&w, &x)| w as f64 * x).sum::<f64>() + b as f64
            })
            .collect()
    }
}

/// Affine layers with ReLU between all but the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidWeights("MLP has no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].rows != pair[1].cols {
                return Err(Error::InvalidWeights(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    pair[0].rows,
                    i + 1,
                    pair[1].cols
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        mlp_forward(&self.layers, input)
    }
}

pub fn mlp_forward(layers: &[DenseLayer], input: &[f64]) -> Result<Vec<f64>> {
    let first = layers.first().ok_or_else(|| Error::InvalidWeights("MLP has no layers".into()))?;
    if input.len() != first.cols {
        return Err(Error::InvalidWeights(format!(
            "input has {} values, first layer expects {}",
            input.len(),
            first.cols
        )));
    }
    let mut x = input.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        if layer.cols != x.len() {
            return Err(Error::InvalidWeights(format!("layer {i} shape mismatch")));
        }
        x = layer.apply(&x);
        if i + 1 < layers.len() {
            x.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    Ok(x)
}
