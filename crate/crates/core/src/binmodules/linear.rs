//! The binarized linear layer.
//!
//! With per-channel weight scales `alpha`, input codes `b` carrying row
//! parameters `(shift_t, beta_t)`, and integer row sums `rs_o` of the
//! weight codes, the layer output is
//!
//! ```text
//! y[t][o] = alpha_o * (beta_t * (W_b[o] . b[t]) + shift_t * rs_o) + bias_o
//! ```
//!
//! which equals the float product of the reconstructed operands. The shift
//! term costs one multiply-add per output.

use crate::bittensor::{binary_gemm, BitMatrix, Encoding};
use crate::error::{shape_err, Result};
use crate::hybridize::{quantize_activation, ActCodes, HybridPolicy, QuantizedActivation};
use crate::quantize::{fine_dot, l1_mean, Binarizer, FineGrainedCode, Granularity, QuantSpec, ScaleSet};
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryLinear {
    pub name: String,
    /// `out x in` sign codes
    pub weight_bits: BitMatrix,
    pub alpha: ScaleSet,
    /// sum of each output row's ±1 codes
    pub row_sums: Vec<i64>,
    pub in_spec: QuantSpec,
    pub bias: Vec<f64>,
    pub shadow: Option<Tensor>,
}

/// Per-channel sign codes of a weight matrix with their l1 scales.
pub fn pack_weights(w: &Tensor) -> (BitMatrix, Vec<f64>, Vec<i64>) {
    let bits = BitMatrix::from_fn(w.rows(), w.cols(), Encoding::Signed, |r, c| w.get(r, c) >= 0.0);
    let alpha = w.iter_rows().map(l1_mean).collect();
    let n = w.cols() as i64;
    let sums = (0..w.rows())
        .map(|r| 2 * bits.row_plane(r).popcount() as i64 - n)
        .collect();
    (bits, alpha, sums)
}

impl BinaryLinear {
    pub fn from_shadow(name: impl Into<String>, shadow: Tensor, bias: Vec<f64>, in_spec: QuantSpec) -> Result<Self> {
        if bias.len() != shadow.rows() {
            return Err(shape_err("binary linear bias", shadow.rows(), bias.len()));
        }
        let mut layer = Self {
            name: name.into(),
            weight_bits: BitMatrix::zeros(0, 0, Encoding::Signed),
            alpha: ScaleSet {
                values: Vec::new(),
                granularity: Granularity::PerChannel,
            },
            row_sums: Vec::new(),
            in_spec,
            bias,
            shadow: Some(shadow),
        };
        layer.sync();
        Ok(layer)
    }

    /// Re-derive packed codes and scales from the shadow weights.
    pub fn sync(&mut self) {
        if let Some(w) = &self.shadow {
            let (bits, alpha, sums) = pack_weights(w);
            self.weight_bits = bits;
            self.alpha.values = alpha;
            self.row_sums = sums;
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight_bits.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight_bits.rows()
    }

    pub fn in_id(&self) -> String {
        format!("{}.in", self.name)
    }

    /// `alpha_o * code(W[o][i])` as a float matrix.
    pub fn reconstruct_weight(&self) -> Tensor {
        let mut w = Tensor::new(self.out_dim(), self.in_dim(), self.weight_bits.unpack());
        for (r, a) in self.alpha.values.iter().enumerate() {
            for v in w.row_mut(r) {
                *v *= a;
            }
        }
        w
    }

    fn add_bias(&self, y: &mut Tensor) {
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
    }

    /// Binary weights against a full-precision input.
    pub fn forward_fp_input(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, false, &self.reconstruct_weight(), true)?;
        self.add_bias(&mut y);
        Ok(y)
    }

    fn weight_row_code(&self, o: usize) -> FineGrainedCode {
        FineGrainedCode {
            binarizer: Binarizer::Sign,
            group_masks: vec![crate::bittensor::BitPlane::ones(self.in_dim(), Encoding::Unsigned)],
            group_bits: vec![self.weight_bits.row_plane(o)],
            group_shifts: vec![0.0],
            group_scales: ScaleSet {
                values: vec![self.alpha.values[o]],
                granularity: Granularity::Group(1),
            },
            partition_points: Vec::new(),
            degenerate: false,
        }
    }
}

/// Eq.-1 layer: quantize the input under the policy, then compute the
/// product with xnor/popcount kernels and rescale.
pub fn binary_linear_forward(x: &Tensor, layer: &BinaryLinear, policy: &HybridPolicy) -> Result<Tensor> {
    if x.cols() != layer.in_dim() {
        return Err(shape_err("binary_linear_forward", format!("{} input features", layer.in_dim()), x.cols()));
    }
    let qa = quantize_activation(x, &layer.in_spec, policy, &layer.in_id())?;
    linear_with_codes(layer, &qa)
}

/// Layer output for an already binarized input.
pub fn linear_with_codes(layer: &BinaryLinear, qa: &QuantizedActivation) -> Result<Tensor> {
    if qa.cols != layer.in_dim() {
        return Err(shape_err("binary linear", format!("{} input features", layer.in_dim()), qa.cols));
    }
    let (t, out) = (qa.rows, layer.out_dim());
    let mut y = Tensor::zeros(t, out);
    match &qa.codes {
        ActCodes::Plain(code) if code.bits.encoding() == Encoding::Signed => {
            let dots = binary_gemm(&layer.weight_bits, &code.bits)?;
            for (ti, (shift, beta)) in code.row_params().into_iter().enumerate() {
                let yr = y.row_mut(ti);
                for o in 0..out {
                    let acc = beta * dots.get(o, ti) as f64 + shift * layer.row_sums[o] as f64;
                    yr[o] = layer.alpha.values[o] * acc;
                }
            }
        }
        _ => {
            // fine-grained or {0,1} inputs: per-group-pair popcount products
            let rows = qa.row_codes()?;
            for o in 0..out {
                let wc = layer.weight_row_code(o);
                for (ti, (beta, ac)) in rows.iter().enumerate() {
                    y.set(ti, o, beta * fine_dot(&wc, ac)?);
                }
            }
        }
    }
    layer.add_bias(&mut y);
    Ok(y)
}
