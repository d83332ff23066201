//! Binarizers, l1 scale factors, granularity units and the fine-grained
//! multi-group binarizer.
//!
//! Granularity units are rows of a 2-D tensor. Activations are `tokens x
//! channels`, so `PerToken` is a row; weights are `out x in`, so
//! `PerChannel` (output channel) is also a row. `Group(g)` splits the rows
//! into `g` contiguous blocks.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::bittensor::{and_popcount, BitMatrix, BitPlane, Encoding};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Lower clamp for a scale computed from an all-zero unit.
pub const SCALE_FLOOR: f64 = 1.0 / (1u64 << 24) as f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binarizer {
    /// `+1` for `x >= 0`, else `-1`
    Sign,
    /// `1` for `x >= 0.5`, else `0`
    Round,
}

impl Binarizer {
    pub fn encoding(self) -> Encoding {
        match self {
            Binarizer::Sign => Encoding::Signed,
            Binarizer::Round => Encoding::Unsigned,
        }
    }

    #[inline]
    pub fn bit(self, x: f64) -> bool {
        match self {
            Binarizer::Sign => x >= 0.0,
            Binarizer::Round => x >= 0.5,
        }
    }

    #[inline]
    pub fn code(self, x: f64) -> f64 {
        self.encoding().decode(self.bit(x))
    }

    /// Clipped-identity surrogate derivative at `x` (already shifted/scaled).
    #[inline]
    pub fn ste_mask(self, x: f64) -> f64 {
        let pass = match self {
            Binarizer::Sign => x.abs() <= 1.0,
            Binarizer::Round => (0.0..=1.0).contains(&x),
        };
        if pass {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerToken,
    PerChannel,
    Group(usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Static,
    Dynamic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStrategy {
    /// equal-population groups
    #[default]
    Percentile,
    /// equal-width value ranges
    ValueUniform,
}

/// Frozen fine-grained parameters, one entry per granularity unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineParams {
    pub points: Vec<Vec<f64>>,
    pub shifts: Vec<Vec<f64>>,
    pub scales: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub binarizer: Binarizer,
    pub granularity: Granularity,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "one")]
    pub fine_groups: usize,
    #[serde(default)]
    pub partition: PartitionStrategy,
    /// per-unit offsets; empty until calibrated or trained
    #[serde(default)]
    pub shift: Vec<f64>,
    /// per-unit multipliers; empty until calibrated or trained
    #[serde(default)]
    pub scale: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine: Option<FineParams>,
}

fn one() -> usize {
    1
}

impl QuantSpec {
    pub fn new(binarizer: Binarizer, granularity: Granularity, mode: Mode) -> Self {
        Self {
            binarizer,
            granularity,
            mode,
            fine_groups: 1,
            partition: PartitionStrategy::Percentile,
            shift: Vec::new(),
            scale: Vec::new(),
            fine: None,
        }
    }

    pub fn with_fine_groups(mut self, g: usize) -> Self {
        self.fine_groups = g;
        self
    }

    pub fn with_params(mut self, shift: Vec<f64>, scale: Vec<f64>) -> Self {
        self.shift = shift;
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4, 8].contains(&self.fine_groups) {
            return Err(Error::InvalidSpec(format!(
                "fine_groups must be one of 1, 2, 4, 8 (got {})",
                self.fine_groups
            )));
        }
        if let Granularity::Group(0) = self.granularity {
            return Err(Error::InvalidSpec("group granularity needs at least one group".into()));
        }
        if self.shift.len() != self.scale.len() {
            return Err(Error::InvalidSpec(format!(
                "{} shifts but {} scales",
                self.shift.len(),
                self.scale.len()
            )));
        }
        if let Some(i) = self.shift.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidSpec(format!("shift[{i}] is not finite")));
        }
        if let Some(i) = self.scale.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidSpec(format!("scale[{i}] must be positive")));
        }
        Ok(())
    }

    pub fn is_fine(&self) -> bool {
        self.fine_groups > 1
    }

    /// Whether the spec carries the parameters a STATIC tensor needs.
    pub fn is_frozen(&self) -> bool {
        if self.is_fine() {
            self.fine.is_some()
        } else {
            !self.scale.is_empty()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    pub values: Vec<f64>,
    pub granularity: Granularity,
}

impl ScaleSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

// ---------------------------------------------------------------------------
// units

/// Ranges of flat indices, one per granularity unit.
pub fn units(rows: usize, cols: usize, gran: Granularity) -> Result<Vec<Range<usize>>> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!("empty tensor {rows}x{cols} has no units")));
    }
    Ok(match gran {
        Granularity::PerTensor => vec![0..rows * cols],
        Granularity::PerToken | Granularity::PerChannel => (0..rows).map(|r| r * cols..(r + 1) * cols).collect(),
        Granularity::Group(g) => {
            if g == 0 || g > rows {
                return Err(Error::InvalidSpec(format!("{g} groups over {rows} rows")));
            }
            (0..g).map(|j| (j * rows / g) * cols..((j + 1) * rows / g) * cols).collect()
        }
    })
}

pub fn unit_count(rows: usize, gran: Granularity) -> usize {
    match gran {
        Granularity::PerTensor => 1,
        Granularity::PerToken | Granularity::PerChannel => rows,
        Granularity::Group(g) => g,
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// binarizers and scales

pub fn binarize(x: &[f64], binarizer: Binarizer) -> Result<BitPlane> {
    check_finite(x)?;
    Ok(BitPlane::from_fn(x.len(), binarizer.encoding(), |i| binarizer.bit(x[i])))
}

pub fn binarize_sign(x: &[f64]) -> Result<BitPlane> {
    binarize(x, Binarizer::Sign)
}

pub fn binarize_round(x: &[f64]) -> Result<BitPlane> {
    binarize(x, Binarizer::Round)
}

/// Mean absolute value, clamped away from zero.
pub fn l1_mean(x: &[f64]) -> f64 {
    let s: f64 = x.iter().map(|v| v.abs()).sum();
    (s / x.len() as f64).max(SCALE_FLOOR)
}

pub fn scale_factor(x: &Tensor, gran: Granularity) -> Result<ScaleSet> {
    check_finite(x.data())?;
    let values = units(x.rows(), x.cols(), gran)?
        .into_iter()
        .map(|u| l1_mean(&x.data()[u]))
        .collect();
    Ok(ScaleSet {
        values,
        granularity: gran,
    })
}

fn check_params(n_units: usize, shift: &[f64], scale: &[f64]) -> Result<()> {
    if shift.len() != n_units || scale.len() != n_units {
        return Err(shape_err(
            "shift_scale",
            format!("{n_units} units"),
            format!("{} shifts, {} scales", shift.len(), scale.len()),
        ));
    }
    if let Some(unit) = scale.iter().position(|&s| s == 0.0) {
        return Err(Error::ZeroScale { unit });
    }
    Ok(())
}

/// `x' = (x - shift_u) / scale_u` for the unit `u` holding each element.
pub fn shift_scale(x: &Tensor, gran: Granularity, shift: &[f64], scale: &[f64]) -> Result<Tensor> {
    let us = units(x.rows(), x.cols(), gran)?;
    check_params(us.len(), shift, scale)?;
    let mut out = x.clone();
    for (u, r) in us.into_iter().enumerate() {
        for v in &mut out.data_mut()[r] {
            *v = (*v - shift[u]) / scale[u];
        }
    }
    Ok(out)
}

/// Inverse of [`shift_scale`].
pub fn unshift_scale(x: &Tensor, gran: Granularity, shift: &[f64], scale: &[f64]) -> Result<Tensor> {
    let us = units(x.rows(), x.cols(), gran)?;
    check_params(us.len(), shift, scale)?;
    let mut out = x.clone();
    for (u, r) in us.into_iter().enumerate() {
        for v in &mut out.data_mut()[r] {
            *v = *v * scale[u] + shift[u];
        }
    }
    Ok(out)
}

/// Calibrated static parameters: shift = unit mean, scale = mean |x - shift|.
pub fn calibrate(x: &Tensor, gran: Granularity) -> Result<(Vec<f64>, Vec<f64>)> {
    check_finite(x.data())?;
    let mut shift = Vec::new();
    let mut scale = Vec::new();
    for u in units(x.rows(), x.cols(), gran)? {
        let v = &x.data()[u];
        let m = v.iter().sum::<f64>() / v.len() as f64;
        shift.push(m);
        scale.push((v.iter().map(|a| (a - m).abs()).sum::<f64>() / v.len() as f64).max(SCALE_FLOOR));
    }
    Ok((shift, scale))
}

/// Rows of a tensor packed to bits, with the parameters that map codes back
/// to real values: `value = shift_u + scale_u * code`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryCode {
    pub bits: BitMatrix,
    pub granularity: Granularity,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl BinaryCode {
    pub fn encode(x: &Tensor, binarizer: Binarizer, gran: Granularity, shift: &[f64], scale: &[f64]) -> Result<Self> {
        check_finite(x.data())?;
        let xp = shift_scale(x, gran, shift, scale)?;
        let bits = BitMatrix::from_fn(x.rows(), x.cols(), binarizer.encoding(), |r, c| binarizer.bit(xp.get(r, c)));
        Ok(Self {
            bits,
            granularity: gran,
            shift: shift.to_vec(),
            scale: scale.to_vec(),
        })
    }

    /// Plain sign binarization with l1 scales and zero shift.
    pub fn sign_l1(x: &Tensor, gran: Granularity) -> Result<Self> {
        let s = scale_factor(x, gran)?;
        let zeros = vec![0.0; s.len()];
        Self::encode(x, Binarizer::Sign, gran, &zeros, &s.values)
    }

    pub fn rows(&self) -> usize {
        self.bits.rows()
    }

    pub fn cols(&self) -> usize {
        self.bits.cols()
    }

    /// Per-row (shift, scale), expanded from the unit parameters.
    pub fn row_params(&self) -> Vec<(f64, f64)> {
        let rows = self.rows();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let u = match self.granularity {
                Granularity::PerTensor => 0,
                Granularity::PerToken | Granularity::PerChannel => r,
                Granularity::Group(g) => (0..g).rfind(|&j| j * rows / g <= r).unwrap_or(0),
            };
            out.push((self.shift[u], self.scale[u]));
        }
        out
    }

    pub fn reconstruct(&self) -> Tensor {
        let enc = self.bits.encoding();
        let params = self.row_params();
        let mut out = Tensor::zeros(self.rows(), self.cols());
        for (r, &(sh, sc)) in params.iter().enumerate() {
            for c in 0..self.cols() {
                out.set(r, c, sh + sc * enc.decode(self.bits.get(r, c)));
            }
        }
        out
    }
}

/// `scale * code + shift` for each bit of a plane.
pub fn reconstruct_plane(p: &BitPlane, scale: f64, shift: f64) -> Vec<f64> {
    p.unpack().into_iter().map(|c| shift + scale * c).collect()
}

// ---------------------------------------------------------------------------
// fine-grained codes

#[derive(Clone, Debug, PartialEq)]
pub struct FineGrainedCode {
    pub binarizer: Binarizer,
    pub group_masks: Vec<BitPlane>,
    pub group_bits: Vec<BitPlane>,
    pub group_shifts: Vec<f64>,
    pub group_scales: ScaleSet,
    pub partition_points: Vec<f64>,
    /// set when the input range collapsed to a point
    pub degenerate: bool,
}

/// Exact least-squares two-level fit of a set of values, returned as the
/// (shift, scale) pair for the binarizer's code set.
///
/// The optimal two-level quantizer in one dimension splits the sorted values
/// at a single threshold; every split is scored in O(n) with prefix sums.
fn fit_two_level(values: &[f64], binarizer: Binarizer) -> (f64, f64) {
    let n = values.len();
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (lo, hi) = (v[0], v[n - 1]);
    if lo == hi {
        let s = SCALE_FLOOR * lo.abs().max(1.0);
        return match binarizer {
            // code -1 lands on the value
            Binarizer::Sign => (lo + s, s),
            // code 0 lands on the value
            Binarizer::Round => (lo, s),
        };
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    // between-class score S_k^2 * n / (k (n - k)) on centred data
    let (mut acc, mut best_k, mut best) = (0.0, 0, f64::NEG_INFINITY);
    for k in 1..n {
        acc += v[k - 1] - mean;
        if v[k - 1] == v[k] {
            continue;
        }
        let score = acc * acc / (k as f64 * (n - k) as f64);
        if score > best {
            best = score;
            best_k = k;
        }
    }
    let l1 = v[..best_k].iter().sum::<f64>() / best_k as f64;
    let l2 = v[best_k..].iter().sum::<f64>() / (n - best_k) as f64;
    match binarizer {
        Binarizer::Sign => (0.5 * (l1 + l2), (0.5 * (l2 - l1)).max(SCALE_FLOOR)),
        Binarizer::Round => (l1, (l2 - l1).max(SCALE_FLOOR)),
    }
}

fn partition_points(sorted: &[f64], g: usize, strategy: PartitionStrategy) -> Vec<f64> {
    let n = sorted.len();
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    let mut pts: Vec<f64> = (1..g)
        .map(|j| match strategy {
            PartitionStrategy::Percentile => sorted[n * j / g],
            PartitionStrategy::ValueUniform => lo + (hi - lo) * j as f64 / g as f64,
        })
        .filter(|&p| p > lo)
        .collect();
    pts.dedup();
    pts
}

#[inline]
fn group_of(points: &[f64], x: f64) -> usize {
    points.partition_point(|&p| p <= x)
}

impl FineGrainedCode {
    pub fn len(&self) -> usize {
        self.group_masks.first().map_or(0, BitPlane::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn groups(&self) -> usize {
        self.group_masks.len()
    }

    fn assemble(x: &[f64], binarizer: Binarizer, points: Vec<f64>, shifts: Vec<f64>, scales: Vec<f64>, degenerate: bool) -> Self {
        let g = shifts.len();
        let n = x.len();
        let group: Vec<usize> = x.iter().map(|&v| group_of(&points, v).min(g - 1)).collect();
        let enc = binarizer.encoding();
        let group_masks = (0..g).map(|j| BitPlane::from_fn(n, Encoding::Unsigned, |i| group[i] == j)).collect();
        let group_bits = (0..g)
            .map(|j| {
                BitPlane::from_fn(n, enc, |i| {
                    group[i] == j && binarizer.bit((x[i] - shifts[j]) / scales[j])
                })
            })
            .collect();
        Self {
            binarizer,
            group_masks,
            group_bits,
            group_shifts: shifts,
            group_scales: ScaleSet {
                values: scales,
                granularity: Granularity::Group(g),
            },
            partition_points: points,
            degenerate,
        }
    }

    /// Encode with previously frozen partition points and group parameters.
    pub fn encode_frozen(x: &[f64], binarizer: Binarizer, points: &[f64], shifts: &[f64], scales: &[f64]) -> Result<Self> {
        check_finite(x)?;
        if shifts.is_empty() || shifts.len() != scales.len() || points.len() + 1 != shifts.len() {
            return Err(Error::InvalidSpec(format!(
                "frozen fine-grained parameters disagree: {} points, {} shifts, {} scales",
                points.len(),
                shifts.len(),
                scales.len()
            )));
        }
        Ok(Self::assemble(x, binarizer, points.to_vec(), shifts.to_vec(), scales.to_vec(), false))
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.len();
        let enc = self.binarizer.encoding();
        let mut out = vec![0.0; n];
        for (j, mask) in self.group_masks.iter().enumerate() {
            let (sh, sc) = (self.group_shifts[j], self.group_scales.values[j]);
            let bits = &self.group_bits[j];
            for (i, o) in out.iter_mut().enumerate() {
                if mask.get(i) {
                    *o = sh + sc * enc.decode(bits.get(i));
                }
            }
        }
        out
    }
}

/// Multi-group binarization of one unit. Values are split into value-range
/// groups at `G - 1` partition points; each group gets its own two-level
/// code. `G = 1` is plain binarization (sign with l1 scale, or round with
/// unit scale).
pub fn fine_grained_binarize(x: &[f64], g: usize, strategy: PartitionStrategy, binarizer: Binarizer) -> Result<FineGrainedCode> {
    if ![1, 2, 4, 8].contains(&g) {
        return Err(Error::InvalidSpec(format!("fine_groups must be one of 1, 2, 4, 8 (got {g})")));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("cannot binarize an empty unit".into()));
    }
    check_finite(x)?;
    if g == 1 {
        let (shift, scale) = match binarizer {
            Binarizer::Sign => (0.0, l1_mean(x)),
            Binarizer::Round => (0.0, 1.0),
        };
        return Ok(FineGrainedCode::assemble(x, binarizer, Vec::new(), vec![shift], vec![scale], false));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        let (sh, sc) = fit_two_level(x, binarizer);
        return Ok(FineGrainedCode::assemble(x, binarizer, Vec::new(), vec![sh], vec![sc], true));
    }
    let raw = partition_points(&sorted, g, strategy);
    // Drop empty groups and re-anchor each point at its group's minimum so
    // that points are always observed values.
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); raw.len() + 1];
    for &v in x {
        members[group_of(&raw, v)].push(v);
    }
    members.retain(|m| !m.is_empty());
    let points = members[1..]
        .iter()
        .map(|m| m.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let (shifts, scales) = members.iter().map(|m| fit_two_level(m, binarizer)).unzip();
    Ok(FineGrainedCode::assemble(x, binarizer, points, shifts, scales, false))
}

/// Real-valued dot product of two fine-grained codes using only mask/bit
/// popcounts and per-group-pair scalar arithmetic.
///
/// With `x_i = mu_a + sigma_a * b_i` on group `a` and `y_i = nu_c + tau_c * e_i`
/// on group `c`, the contribution of `a x c` is
/// `mu nu P + mu tau E + sigma nu B + sigma tau BE` where each sum runs over
/// the intersection of the two masks.
pub fn fine_dot(x: &FineGrainedCode, y: &FineGrainedCode) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    // code = s * bit + o
    let lin = |b: Binarizer| match b {
        Binarizer::Sign => (2.0, -1.0),
        Binarizer::Round => (1.0, 0.0),
    };
    let (sb, ob) = lin(x.binarizer);
    let (se, oe) = lin(y.binarizer);
    let nw = x.group_masks.first().map_or(0, |m| m.words().len());
    let mut inter = vec![0u64; nw];
    let mut total = 0.0;
    for a in 0..x.groups() {
        let (mu, sigma) = (x.group_shifts[a], x.group_scales.values[a]);
        let (ma, ba) = (x.group_masks[a].words(), x.group_bits[a].words());
        for c in 0..y.groups() {
            let (nu, tau) = (y.group_shifts[c], y.group_scales.values[c]);
            let (mc, ec) = (y.group_masks[c].words(), y.group_bits[c].words());
            for w in 0..nw {
                inter[w] = ma[w] & mc[w];
            }
            let p = inter.iter().map(|w| w.count_ones() as u64).sum::<u64>() as f64;
            if p == 0.0 {
                continue;
            }
            let pb = and_popcount(&inter, ba) as f64;
            let pe = and_popcount(&inter, ec) as f64;
            let pbe = inter.iter().zip(ba).zip(ec).map(|((i, b), e)| (i & b & e).count_ones() as u64).sum::<u64>() as f64;
            let sum_b = sb * pb + ob * p;
            let sum_e = se * pe + oe * p;
            let sum_be = sb * se * pbe + sb * oe * pb + ob * se * pe + ob * oe * p;
            total += mu * nu * p + mu * tau * sum_e + sigma * nu * sum_b + sigma * tau * sum_be;
        }
    }
    Ok(total)
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StudentT};

    #[test]
    fn sign_boundaries() {
        let p = binarize_sign(&[0.0, -0.3, 2.1]).unwrap();
        assert_eq!(p.unpack(), vec![1.0, -1.0, 1.0]);
        assert_eq!(binarize_sign(&[-1.0, -0.1]).unwrap().unpack(), vec![-1.0, -1.0]);
        assert!(matches!(binarize_sign(&[1.0, f64::NAN]), Err(Error::NonFinite { index: 1 })));
    }

    #[test]
    fn round_boundaries() {
        let p = binarize_round(&[0.5, 0.49, 1.0]).unwrap();
        assert_eq!(p.unpack(), vec![1.0, 0.0, 1.0]);
        assert_eq!(binarize_round(&[0.125; 8]).unwrap().popcount(), 0);
    }

    #[test]
    fn scale_factor_direct() {
        let t = Tensor::row_vector(vec![1.0, -1.0, 1.0, -1.0]);
        assert_eq!(scale_factor(&t, Granularity::PerTensor).unwrap().values, vec![1.0]);
        let t = Tensor::row_vector(vec![0.5, -1.5, 2.0, 0.0]);
        assert_eq!(scale_factor(&t, Granularity::PerTensor).unwrap().values, vec![1.0]);
        let m = Tensor::new(2, 4, vec![1.0, 2.0, -3.0, 2.0, 0.0, 0.0, 0.0, -4.0]);
        assert_eq!(scale_factor(&m, Granularity::PerChannel).unwrap().values, vec![2.0, 1.0]);
        let z = Tensor::zeros(1, 3);
        assert_eq!(scale_factor(&z, Granularity::PerTensor).unwrap().values, vec![SCALE_FLOOR]);
    }

    #[test]
    fn group_units_cover_rows() {
        let us = units(5, 2, Granularity::Group(2)).unwrap();
        assert_eq!(us, vec![0..4, 4..10]);
        assert!(units(2, 2, Granularity::Group(3)).is_err());
    }

    #[test]
    fn shift_scale_identity_and_zero_scale() {
        let t = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(shift_scale(&t, Granularity::PerTensor, &[0.0], &[1.0]).unwrap(), t);
        let c = shift_scale(&t, Granularity::PerTensor, &[2.5], &[1.0]).unwrap();
        assert_eq!(c.data().iter().sum::<f64>(), 0.0);
        assert!(matches!(
            shift_scale(&t, Granularity::PerToken, &[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroScale { unit: 1 })
        ));
    }

    #[test]
    fn l1_scale_is_reconstruction_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s = l1_mean(&x);
        let err = |a: f64| x.iter().map(|v| (v - a * v.signum()).powi(2)).sum::<f64>();
        assert!(err(s) < err(1.1 * s));
        assert!(err(s) < err(0.9 * s));
    }

    #[test]
    fn reconstruct_small_cases() {
        let p = BitPlane::pack(&[1.0, -1.0], Encoding::Signed).unwrap();
        assert_eq!(reconstruct_plane(&p, 0.7, 0.0), vec![0.7, -0.7]);
        let p = BitPlane::pack(&[1.0, 0.0], Encoding::Unsigned).unwrap();
        assert_eq!(reconstruct_plane(&p, 0.3, 0.0), vec![0.3, 0.0]);
    }

    #[test]
    fn fine_g1_is_plain_sign() {
        let x = [0.5, -2.0, 1.5, 0.0];
        let c = fine_grained_binarize(&x, 1, PartitionStrategy::Percentile, Binarizer::Sign).unwrap();
        assert_eq!(c.groups(), 1);
        assert_eq!(c.group_shifts, vec![0.0]);
        assert_eq!(c.group_scales.values, vec![1.0]);
        assert_eq!(c.reconstruct(), vec![1.0, -1.0, 1.0, 1.0]);
        assert_eq!(c.group_bits[0], binarize_sign(&x).unwrap());
    }

    #[test]
    fn fine_two_clusters() {
        let x = [-5.1, -4.9, -5.0, 5.0, 4.8, 5.2];
        let e1 = mse(&x, &fine_grained_binarize(&x, 1, PartitionStrategy::Percentile, Binarizer::Sign).unwrap().reconstruct());
        let c2 = fine_grained_binarize(&x, 2, PartitionStrategy::Percentile, Binarizer::Sign).unwrap();
        let e2 = mse(&x, &c2.reconstruct());
        assert!(e2 < e1);
        assert_eq!(c2.partition_points, vec![4.8]);
    }

    #[test]
    fn fine_manual_group_arithmetic() {
        // groups {1,2} and {10,14}; each group's two levels are its members
        let x = [1.0, 10.0, 2.0, 14.0];
        let c = fine_grained_binarize(&x, 2, PartitionStrategy::Percentile, Binarizer::Sign).unwrap();
        assert_eq!(c.group_shifts, vec![1.5, 12.0]);
        assert_eq!(c.group_scales.values, vec![0.5, 2.0]);
        assert_eq!(c.reconstruct(), x.to_vec());
        let r = fine_grained_binarize(&x, 2, PartitionStrategy::Percentile, Binarizer::Round).unwrap();
        assert_eq!(r.group_shifts, vec![1.0, 10.0]);
        assert_eq!(r.reconstruct(), x.to_vec());
    }

    #[test]
    fn fine_degenerate_range() {
        let c = fine_grained_binarize(&[3.0; 5], 4, PartitionStrategy::Percentile, Binarizer::Sign).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.groups(), 1);
        for v in c.reconstruct() {
            assert!((v - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fine_value_uniform_drops_empty_groups() {
        let x = [0.0, 0.1, 0.2, 10.0];
        let c = fine_grained_binarize(&x, 8, PartitionStrategy::ValueUniform, Binarizer::Sign).unwrap();
        assert_eq!(c.groups(), 2);
        assert_eq!(c.partition_points, vec![10.0]);
        assert!(c.group_masks.iter().all(|m| m.popcount() > 0));
    }

    #[test]
    fn frozen_encoding_reuses_parameters() {
        let x = [1.0, 10.0, 2.0, 14.0];
        let c = fine_grained_binarize(&x, 2, PartitionStrategy::Percentile, Binarizer::Sign).unwrap();
        let f = FineGrainedCode::encode_frozen(&x, Binarizer::Sign, &c.partition_points, &c.group_shifts, &c.group_scales.values).unwrap();
        assert_eq!(f.reconstruct(), c.reconstruct());
        assert!(FineGrainedCode::encode_frozen(&x, Binarizer::Sign, &[], &[0.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn heavy_tailed_monotone_over_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = StudentT::new(2.0).unwrap();
        for _ in 0..50 {
            let n = rng.random_range(8..300);
            let x: Vec<f64> = (0..n).map(|_| t.sample(&mut rng)).collect();
            let mut prev = f64::INFINITY;
            for g in [1, 2, 4, 8] {
                let e = mse(&x, &fine_grained_binarize(&x, g, PartitionStrategy::Percentile, Binarizer::Sign).unwrap().reconstruct());
                assert!(e <= prev * (1.0 + 1e-12), "g={g}: {e} > {prev}");
                prev = e;
            }
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    proptest! {
        #[test]
        fn scale_is_mean_abs(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect());
            let s = scale_factor(&t, Granularity::PerToken).unwrap();
            for r in 0..rows {
                let want = t.row(r).iter().map(|v| v.abs()).sum::<f64>() / cols as f64;
                prop_assert!((s.values[r] - want.max(SCALE_FLOOR)).abs() <= 1e-9);
            }
        }

        #[test]
        fn sign_preserving(x in proptest::collection::vec(-10.0f64..10.0, 1..100)) {
            let p = binarize_sign(&x).unwrap();
            for (c, v) in p.unpack().iter().zip(&x) {
                prop_assert!(c * v >= 0.0);
            }
        }

        #[test]
        fn shift_scale_inverts(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect());
            let shift: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scale: Vec<f64> = (0..rows).map(|_| rng.random_range(0.1..3.0)).collect();
            let xp = shift_scale(&t, Granularity::PerChannel, &shift, &scale).unwrap();
            let back = unshift_scale(&xp, Granularity::PerChannel, &shift, &scale).unwrap();
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }

        #[test]
        fn fine_masks_partition(x in proptest::collection::vec(-4.0f64..4.0, 1..120), gi in 0usize..4) {
            let g = [1, 2, 4, 8][gi];
            let c = fine_grained_binarize(&x, g, PartitionStrategy::Percentile, Binarizer::Sign).unwrap();
            let mut union = BitPlane::zeros(x.len(), Encoding::Unsigned);
            for (i, a) in c.group_masks.iter().enumerate() {
                for b in &c.group_masks[i + 1..] {
                    prop_assert_eq!(a.and(b).unwrap().popcount(), 0);
                }
                union = union.or(a).unwrap();
            }
            prop_assert_eq!(union.popcount() as usize, x.len());
            prop_assert!(c.partition_points.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn fine_dot_matches_reconstruction(
            pair in (1usize..150).prop_flat_map(|n| (
                proptest::collection::vec(-3.0f64..3.0, n),
                proptest::collection::vec(0.0f64..1.0, n),
            )),
            gi in 0usize..4, gj in 0usize..4,
        ) {
            let a = fine_grained_binarize(&pair.0, [1, 2, 4, 8][gi], PartitionStrategy::Percentile, Binarizer::Sign).unwrap();
            let b = fine_grained_binarize(&pair.1, [1, 2, 4, 8][gj], PartitionStrategy::Percentile, Binarizer::Round).unwrap();
            for (p, q) in [(&a, &a), (&a, &b), (&b, &a), (&b, &b)] {
                let want = dot(&p.reconstruct(), &q.reconstruct());
                let got = fine_dot(p, q).unwrap();
                prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
            }
        }
    }
}
