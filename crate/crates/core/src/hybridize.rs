//! Dynamic/static hybrid quantization: which tensors get their binarization
//! parameters frozen offline and which recompute them from live activations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::binmodules::model::Model;
use crate::binmodules::PointCloud;
use crate::bittensor::{BitPlane, Encoding};
use crate::error::{Error, Result};
use crate::quantize::{
    calibrate, fine_grained_binarize, l1_mean, scale_factor, units, BinaryCode, Binarizer, FineGrainedCode, FineParams, Granularity,
    Mode, QuantSpec, ScaleSet,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridPolicy {
    #[serde(default)]
    pub default_mode: Mode,
    #[serde(default)]
    pub assignments: BTreeMap<String, Mode>,
}

impl Default for HybridPolicy {
    fn default() -> Self {
        Self {
            default_mode: Mode::Static,
            assignments: BTreeMap::new(),
        }
    }
}

impl HybridPolicy {
    pub fn register(&mut self, id: impl Into<String>, mode: Mode) {
        self.assignments.insert(id.into(), mode);
    }

    /// Register with the policy default unless an assignment already exists.
    pub fn register_default(&mut self, id: impl Into<String>) {
        let d = self.default_mode;
        self.assignments.entry(id.into()).or_insert(d);
    }

    pub fn mode(&self, id: &str) -> Result<Mode> {
        self.assignments
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnregisteredTensor(id.to_string()))
    }

    pub fn dynamic_ids(&self) -> impl Iterator<Item = &str> {
        self.assignments
            .iter()
            .filter(|(_, m)| **m == Mode::Dynamic)
            .map(|(k, _)| k.as_str())
    }

    /// Same registrations, every tensor STATIC.
    pub fn all_static(&self) -> Self {
        Self {
            default_mode: Mode::Static,
            assignments: self.assignments.keys().map(|k| (k.clone(), Mode::Static)).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidSpec(format!("policy: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActCodes {
    Plain(BinaryCode),
    /// one code per granularity unit, over values normalized by the unit scale
    Fine(Vec<FineGrainedCode>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedActivation {
    pub rows: usize,
    pub cols: usize,
    pub codes: ActCodes,
    pub scales: ScaleSet,
}

impl QuantizedActivation {
    pub fn reconstruct(&self) -> Tensor {
        match &self.codes {
            ActCodes::Plain(c) => c.reconstruct(),
            ActCodes::Fine(codes) => {
                let mut out = Tensor::zeros(self.rows, self.cols);
                let us = units(self.rows, self.cols, self.scales.granularity).expect("shape was validated at encode");
                for ((u, code), beta) in us.into_iter().zip(codes).zip(&self.scales.values) {
                    for (o, v) in out.data_mut()[u].iter_mut().zip(code.reconstruct()) {
                        *o = beta * v;
                    }
                }
                out
            }
        }
    }

    pub fn fine_units(&self) -> Option<(&[FineGrainedCode], &[f64])> {
        match &self.codes {
            ActCodes::Fine(c) => Some((c, &self.scales.values)),
            ActCodes::Plain(_) => None,
        }
    }

    /// One `(multiplier, code)` pair per row, so that row `r` reconstructs
    /// as `multiplier * code.reconstruct()`. Plain rows become single-group
    /// codes; fine codes must be laid out one unit per row.
    pub fn row_codes(&self) -> Result<Vec<(f64, FineGrainedCode)>> {
        match &self.codes {
            ActCodes::Plain(c) => {
                let enc = c.bits.encoding();
                let binarizer = match enc {
                    Encoding::Signed => Binarizer::Sign,
                    Encoding::Unsigned => Binarizer::Round,
                };
                let all = BitPlane::ones(self.cols, Encoding::Unsigned);
                Ok(c.row_params()
                    .into_iter()
                    .enumerate()
                    .map(|(r, (shift, scale))| {
                        let code = FineGrainedCode {
                            binarizer,
                            group_masks: vec![all.clone()],
                            group_bits: vec![c.bits.row_plane(r)],
                            group_shifts: vec![shift],
                            group_scales: ScaleSet {
                                values: vec![scale],
                                granularity: Granularity::Group(1),
                            },
                            partition_points: Vec::new(),
                            degenerate: false,
                        };
                        (1.0, code)
                    })
                    .collect())
            }
            ActCodes::Fine(codes) => {
                if codes.len() != self.rows || codes.iter().any(|c| c.len() != self.cols) {
                    return Err(Error::InvalidSpec(format!(
                        "fine-grained units must be rows: {} units for a {}x{} tensor",
                        codes.len(),
                        self.rows,
                        self.cols
                    )));
                }
                Ok(self.scales.values.iter().copied().zip(codes.iter().cloned()).collect())
            }
        }
    }
}

fn normalized_units(x: &Tensor, gran: Granularity, beta: &[f64]) -> Result<Vec<Vec<f64>>> {
    Ok(units(x.rows(), x.cols(), gran)?
        .into_iter()
        .zip(beta)
        .map(|(u, b)| x.data()[u].iter().map(|v| v / b).collect())
        .collect())
}

/// Binarize an activation tensor under the mode the policy assigns to
/// `tensor_id`. DYNAMIC recomputes the unit scales (and fine-grained
/// partitions) from `x`; STATIC uses the spec's frozen parameters.
pub fn quantize_activation(x: &Tensor, spec: &QuantSpec, policy: &HybridPolicy, tensor_id: &str) -> Result<QuantizedActivation> {
    let mode = policy.mode(tensor_id)?;
    spec.validate()?;
    let gran = spec.granularity;
    let (codes, scales) = match mode {
        Mode::Dynamic => {
            let scales = scale_factor(x, gran)?;
            let codes = if spec.is_fine() {
                let codes = normalized_units(x, gran, &scales.values)?
                    .iter()
                    .map(|u| fine_grained_binarize(u, spec.fine_groups, spec.partition, spec.binarizer))
                    .collect::<Result<_>>()?;
                ActCodes::Fine(codes)
            } else {
                let zeros = vec![0.0; scales.len()];
                ActCodes::Plain(BinaryCode::encode(x, spec.binarizer, gran, &zeros, &scales.values)?)
            };
            (codes, scales)
        }
        Mode::Static => {
            if !spec.is_frozen() {
                return Err(Error::Unfrozen(tensor_id.to_string()));
            }
            let codes = match &spec.fine {
                Some(f) if spec.is_fine() => {
                    let codes = normalized_units(x, gran, &spec.scale)?
                        .iter()
                        .enumerate()
                        .map(|(u, v)| FineGrainedCode::encode_frozen(v, spec.binarizer, &f.points[u], &f.shifts[u], &f.scales[u]))
                        .collect::<Result<_>>()?;
                    ActCodes::Fine(codes)
                }
                _ => ActCodes::Plain(BinaryCode::encode(x, spec.binarizer, gran, &spec.shift, &spec.scale)?),
            };
            (
                codes,
                ScaleSet {
                    values: spec.scale.clone(),
                    granularity: gran,
                },
            )
        }
    };
    Ok(QuantizedActivation {
        rows: x.rows(),
        cols: x.cols(),
        codes,
        scales,
    })
}

/// Collect every sample's values for each granularity unit.
fn pooled_units(spec: &QuantSpec, samples: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut pooled: Vec<Vec<f64>> = Vec::new();
    for s in samples {
        let us = units(s.rows(), s.cols(), spec.granularity)?;
        if pooled.is_empty() {
            pooled = vec![Vec::new(); us.len()];
        } else if pooled.len() != us.len() {
            return Err(Error::InvalidArgument(format!(
                "calibration samples disagree on unit count ({} vs {})",
                pooled.len(),
                us.len()
            )));
        }
        for (p, u) in pooled.iter_mut().zip(us) {
            p.extend_from_slice(&s.data()[u]);
        }
    }
    Ok(pooled)
}

/// Fit a STATIC spec's parameters from calibration activations. A spec that
/// is already frozen is left untouched.
pub fn freeze_spec(spec: &mut QuantSpec, id: &str, samples: &[Tensor]) -> Result<()> {
    if spec.is_frozen() {
        return Ok(());
    }
    if samples.is_empty() {
        return Err(Error::EmptyCalibration(id.to_string()));
    }
    let pooled = pooled_units(spec, samples)?;
    if spec.is_fine() {
        let mut fine = FineParams {
            points: Vec::new(),
            shifts: Vec::new(),
            scales: Vec::new(),
        };
        let mut beta = Vec::new();
        for u in &pooled {
            let b = l1_mean(u);
            let norm: Vec<f64> = u.iter().map(|v| v / b).collect();
            let code = fine_grained_binarize(&norm, spec.fine_groups, spec.partition, spec.binarizer)?;
            fine.points.push(code.partition_points);
            fine.shifts.push(code.group_shifts);
            fine.scales.push(code.group_scales.values);
            beta.push(b);
        }
        spec.shift = vec![0.0; beta.len()];
        spec.scale = beta;
        spec.fine = Some(fine);
    } else {
        let mut shift = Vec::new();
        let mut scale = Vec::new();
        for u in &pooled {
            let t = Tensor::row_vector(u.clone());
            let (s, c) = match spec.binarizer {
                Binarizer::Sign => calibrate(&t, Granularity::PerTensor)?,
                Binarizer::Round => (vec![0.0], vec![l1_mean(u)]),
            };
            shift.push(s[0]);
            scale.push(c[0]);
        }
        spec.shift = shift;
        spec.scale = scale;
    }
    spec.mode = Mode::Static;
    Ok(())
}

/// Freeze every STATIC tensor of a trained model; see [`Model::freeze_static`].
pub fn freeze_static(model: &mut Model, calibration: &[PointCloud]) -> Result<()> {
    model.freeze_static(calibration)
}

/// Float operations spent computing runtime binarization parameters for one
/// inference of `model` with a transformer sequence of `seq_len` tokens.
pub fn dynamic_overhead(model: &Model, seq_len: usize) -> f64 {
    crate::cost::dynamic_overhead_flops(
        &model.config.with_tokens(seq_len),
        &model.policy,
        model.flags,
        &crate::cost::CostKnobs::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    fn policy(id: &str, mode: Mode) -> HybridPolicy {
        let mut p = HybridPolicy::default();
        p.register(id, mode);
        p
    }

    #[test]
    fn unregistered_tensor_rejected() {
        let spec = QuantSpec::new(Binarizer::Sign, Granularity::PerToken, Mode::Dynamic);
        let err = quantize_activation(&random(2, 3, 0), &spec, &HybridPolicy::default(), "q").unwrap_err();
        assert_eq!(err, Error::UnregisteredTensor("q".into()));
    }

    #[test]
    fn dynamic_scales_delegate_and_double() {
        let x = random(4, 8, 1);
        let spec = QuantSpec::new(Binarizer::Sign, Granularity::PerToken, Mode::Dynamic).with_fine_groups(4);
        let p = policy("q", Mode::Dynamic);
        let a = quantize_activation(&x, &spec, &p, "q").unwrap();
        assert_eq!(a.scales, scale_factor(&x, Granularity::PerToken).unwrap());
        let b = quantize_activation(&x.scale(2.0), &spec, &p, "q").unwrap();
        for (u, v) in a.scales.values.iter().zip(&b.scales.values) {
            assert_eq!(2.0 * u, *v);
        }
        assert_eq!(a.codes, b.codes);
    }

    #[test]
    fn static_scales_fixed() {
        let x = random(3, 5, 2);
        let spec = QuantSpec::new(Binarizer::Sign, Granularity::PerTensor, Mode::Static).with_params(vec![0.1], vec![0.8]);
        let p = policy("a", Mode::Static);
        let a = quantize_activation(&x, &spec, &p, "a").unwrap();
        let b = quantize_activation(&x.scale(2.0), &spec, &p, "a").unwrap();
        assert_eq!(a.scales, b.scales);
        assert_eq!(a.scales.values, vec![0.8]);
    }

    #[test]
    fn unfrozen_static_rejected() {
        let spec = QuantSpec::new(Binarizer::Sign, Granularity::PerTensor, Mode::Static);
        let err = quantize_activation(&random(2, 2, 3), &spec, &policy("a", Mode::Static), "a").unwrap_err();
        assert_eq!(err, Error::Unfrozen("a".into()));
    }

    #[test]
    fn freeze_spec_idempotent_and_needs_data() {
        let mut spec = QuantSpec::new(Binarizer::Sign, Granularity::PerToken, Mode::Static).with_fine_groups(2);
        assert_eq!(freeze_spec(&mut spec, "v", &[]), Err(Error::EmptyCalibration("v".into())));
        let samples = [random(3, 16, 4), random(3, 16, 5)];
        freeze_spec(&mut spec, "v", &samples).unwrap();
        let once = spec.clone();
        freeze_spec(&mut spec, "v", &[random(3, 16, 6)]).unwrap();
        assert_eq!(spec, once);
        let p = policy("v", Mode::Static);
        let a = quantize_activation(&samples[0], &spec, &p, "v").unwrap();
        let b = quantize_activation(&samples[1], &spec, &p, "v").unwrap();
        assert_eq!(a.scales, b.scales);
    }

    #[test]
    fn fine_reconstruct_matches_unit_codes() {
        let x = random(3, 20, 7);
        let spec = QuantSpec::new(Binarizer::Sign, Granularity::PerToken, Mode::Dynamic).with_fine_groups(4);
        let q = quantize_activation(&x, &spec, &policy("k", Mode::Dynamic), "k").unwrap();
        let r = q.reconstruct();
        let (codes, beta) = q.fine_units().unwrap();
        for row in 0..3 {
            let want: Vec<f64> = codes[row].reconstruct().iter().map(|v| v * beta[row]).collect();
            assert_eq!(r.row(row), &want[..]);
        }
    }

    #[test]
    fn policy_json_round_trip() {
        let mut p = HybridPolicy::default();
        p.register("blocks.0.q.out", Mode::Dynamic);
        p.register("blocks.0.q.in", Mode::Static);
        let back = HybridPolicy::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.dynamic_ids().collect::<Vec<_>>(), vec!["blocks.0.q.out"]);
        assert!(HybridPolicy::from_json(r#"{"bogus": 1}"#).is_err());
    }

    proptest! {
        #[test]
        fn dynamic_homogeneous(seed in any::<u64>(), c in 0.01f64..100.0, gi in 0usize..4) {
            let x = random(3, 12, seed);
            let spec = QuantSpec::new(Binarizer::Sign, Granularity::PerToken, Mode::Dynamic).with_fine_groups([1, 2, 4, 8][gi]);
            let p = policy("q", Mode::Dynamic);
            let a = quantize_activation(&x, &spec, &p, "q").unwrap();
            let b = quantize_activation(&x.scale(c), &spec, &p, "q").unwrap();
            for (u, v) in a.scales.values.iter().zip(&b.scales.values) {
                prop_assert!((c * u - v).abs() <= 1e-9 * v.abs());
            }
            if let (ActCodes::Plain(pa), ActCodes::Plain(pb)) = (&a.codes, &b.codes) {
                prop_assert_eq!(&pa.bits, &pb.bits);
            }
        }
    }
}
