//! Attention arithmetic: softmax, the binary attention core and entropy
//! instrumentation for the uniform-attention failure mode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybridize::{quantize_activation, HybridPolicy, QuantizedActivation};
use crate::quantize::{fine_dot, FineGrainedCode, QuantSpec};
use crate::tensor::{matmul, Tensor};

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// fraction of rows whose entropy is within `eps` of `ln T`
    pub near_uniform: f64,
}

pub const ROW_SUM_TOL: f64 = 1e-5;

/// Shannon entropy (natural log) of each attention row, summarized.
pub fn attention_entropy(attn: &Tensor, eps: f64) -> Result<EntropyStats> {
    if attn.rows() == 0 || attn.cols() == 0 {
        return Err(Error::InvalidArgument("empty attention matrix".into()));
    }
    let ln_t = (attn.cols() as f64).ln();
    let (mut sum, mut min, mut max, mut near) = (0.0, f64::INFINITY, f64::NEG_INFINITY, 0usize);
    for (r, row) in attn.iter_rows().enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::NotNormalized { row: r, sum: total });
        }
        let h: f64 = -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
        sum += h;
        min = min.min(h);
        max = max.max(h);
        if (ln_t - h).abs() <= eps {
            near += 1;
        }
    }
    Ok(EntropyStats {
        mean: sum / attn.rows() as f64,
        min,
        max,
        near_uniform: near as f64 / attn.rows() as f64,
    })
}

/// Tensor ids of one block's dynamic activation quantizers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnIds {
    pub q: String,
    pub k: String,
    pub v: String,
    pub attn: String,
}

impl AttnIds {
    pub fn for_block(b: usize) -> Self {
        Self {
            q: format!("blocks.{b}.q.out"),
            k: format!("blocks.{b}.k.out"),
            v: format!("blocks.{b}.v.out"),
            attn: format!("blocks.{b}.attn"),
        }
    }
}

pub struct AttnSpecs<'a> {
    pub q: &'a QuantSpec,
    pub k: &'a QuantSpec,
    pub v: &'a QuantSpec,
    pub attn: &'a QuantSpec,
}

/// Full-precision `softmax(Q K^T / sqrt d) V`; returns `(A V, A)`.
pub fn float_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let logits = matmul(q, false, k, true)?.scale(1.0 / (q.cols() as f64).sqrt());
    let a = softmax_rows(&logits);
    Ok((matmul(&a, false, v, false)?, a))
}

/// Binary attention: logits from popcount products of the fine-grained Q and
/// K codes, softmax, then the round-binarized attention times the
/// per-channel V codes. Returns `(A_b V_b, softmax output)`.
pub fn binary_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    specs: &AttnSpecs<'_>,
    ids: &AttnIds,
    policy: &HybridPolicy,
) -> Result<(Tensor, Tensor)> {
    binary_attention_with(q, k, v, specs, ids, &mut |id, t, spec| quantize_activation(t, spec, policy, id))
}

/// [`binary_attention`] with a caller-supplied activation quantizer.
pub fn binary_attention_with(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    specs: &AttnSpecs<'_>,
    ids: &AttnIds,
    quant: &mut dyn FnMut(&str, &Tensor, &QuantSpec) -> Result<QuantizedActivation>,
) -> Result<(Tensor, Tensor)> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "attention",
            expected: format!("q {:?}, k [*, {}], v [{}, *]", q.shape(), q.cols(), k.rows()),
            got: format!("k {:?}, v {:?}", k.shape(), v.shape()),
        });
    }
    let inv_sqrt_d = 1.0 / (q.cols() as f64).sqrt();
    let qc = quant(&ids.q, q, specs.q)?.row_codes()?;
    let kc = quant(&ids.k, k, specs.k)?.row_codes()?;
    let a = softmax_rows(&code_products(&qc, &kc, 1.0)?.scale(inv_sqrt_d));
    let ac = quant(&ids.attn, &a, specs.attn)?.row_codes()?;
    // V is quantized per channel: rows of V^T
    let vc = quant(&ids.v, &v.transpose(), specs.v)?.row_codes()?;
    Ok((code_products(&ac, &vc, 1.0)?, a))
}

/// `out[i][j] = scale * m_i * n_j * (a_i . b_j)` over `(multiplier, code)`
/// rows, each dot product computed with popcounts.
pub fn code_products(a: &[(f64, FineGrainedCode)], b: &[(f64, FineGrainedCode)], scale: f64) -> Result<Tensor> {
    let mut out = Tensor::zeros(a.len(), b.len());
    for (i, (ma, ca)) in a.iter().enumerate() {
        for (j, (mb, cb)) in b.iter().enumerate() {
            out.set(i, j, ma * mb * fine_dot(ca, cb)? * scale);
        }
    }
    Ok(out)
}
