//! The assembled classifier: full-precision point embedding, binary local
//! feature stages, offset-attention blocks, a fused global feature and a
//! full-precision head.
//!
//! The architecture is written once, generic over [`Backend`]. The packed
//! backend here runs inference on xnor/popcount kernels; the training graph
//! (in `train::graph`) records the same calls on a tape with fake
//! quantization.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::attention::{attention_entropy, binary_attention_with, float_attention, AttnIds, AttnSpecs};
use super::linear::{linear_with_codes, BinaryLinear};
use super::sampling::CloudPlan;
use super::PointCloud;
use crate::error::{shape_err, Error, Result};
use crate::hybridize::{freeze_spec, quantize_activation, HybridPolicy, QuantizedActivation};
use crate::quantize::{Binarizer, Granularity, Mode, PartitionStrategy, QuantSpec, SCALE_FLOOR};
use crate::tensor::{matmul, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// centers kept by farthest point sampling
    pub samples: usize,
    pub neighbors: usize,
    /// output widths of the binary layers applied to grouped features
    pub mlps: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_points: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub point_mlps: Vec<usize>,
    pub stages: Vec<StageConfig>,
    pub blocks: usize,
    /// query/key width
    pub attn_dim: usize,
    #[serde(default = "default_groups")]
    pub qkv_groups: usize,
    #[serde(default = "default_groups")]
    pub attn_groups: usize,
    #[serde(default)]
    pub partition: PartitionStrategy,
    pub fuse_dim: usize,
    #[serde(default)]
    pub head_hidden: Vec<usize>,
    pub classes: usize,
}

fn default_groups() -> usize {
    4
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            num_points: 256,
            embed_dim: 32,
            point_mlps: Vec::new(),
            stages: vec![StageConfig {
                samples: 64,
                neighbors: 16,
                mlps: vec![64, 64],
            }],
            blocks: 2,
            attn_dim: 16,
            qkv_groups: 4,
            attn_groups: 4,
            partition: PartitionStrategy::Percentile,
            fuse_dim: 128,
            head_hidden: vec![64],
            classes: 4,
        }
    }

    /// PCT-sized configuration used for cost accounting.
    pub fn paper() -> Self {
        Self {
            num_points: 1024,
            embed_dim: 64,
            point_mlps: vec![64],
            stages: vec![
                StageConfig {
                    samples: 512,
                    neighbors: 16,
                    mlps: vec![128, 128],
                },
                StageConfig {
                    samples: 256,
                    neighbors: 16,
                    mlps: vec![256, 256],
                },
            ],
            blocks: 4,
            attn_dim: 64,
            qkv_groups: 4,
            attn_groups: 4,
            partition: PartitionStrategy::Percentile,
            fuse_dim: 1024,
            head_hidden: vec![256],
            classes: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_points == 0 || self.embed_dim == 0 || self.classes == 0 || self.fuse_dim == 0 || self.attn_dim == 0 {
            return bad("point count, widths and class count must be positive".into());
        }
        if self.blocks == 0 {
            return bad("at least one attention block is required".into());
        }
        for g in [self.qkv_groups, self.attn_groups] {
            if ![1, 2, 4, 8].contains(&g) {
                return bad(format!("fine-grained group count {g} not in {{1, 2, 4, 8}}"));
            }
        }
        if self.point_mlps.contains(&0) || self.head_hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        let mut n = self.num_points;
        for (s, st) in self.stages.iter().enumerate() {
            if st.samples == 0 || st.samples > n {
                return bad(format!("stage {s} samples {} of {n} points", st.samples));
            }
            if st.neighbors == 0 || st.neighbors > n {
                return bad(format!("stage {s} takes {} neighbours of {n} points", st.neighbors));
            }
            if st.mlps.is_empty() || st.mlps.contains(&0) {
                return bad(format!("stage {s} needs positive mlp widths"));
            }
            n = st.samples;
        }
        Ok(())
    }

    /// Transformer width.
    pub fn channels(&self) -> usize {
        match self.stages.last() {
            Some(s) => *s.mlps.last().expect("validated"),
            None => self.point_mlps.last().copied().unwrap_or(self.embed_dim),
        }
    }

    /// Transformer sequence length.
    pub fn tokens(&self) -> usize {
        self.stages.last().map_or(self.num_points, |s| s.samples)
    }

    /// Same architecture with the transformer sequence length set to `t`.
    pub fn with_tokens(&self, t: usize) -> Self {
        let mut c = self.clone();
        match c.stages.last_mut() {
            Some(s) => s.samples = t,
            None => c.num_points = t,
        }
        c
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Every binary linear layer as `(name, in, out, group)`, in forward order.
    pub fn binary_layers(&self) -> Vec<(String, usize, usize, ParamGroup)> {
        let mut out = Vec::new();
        let mut c = self.embed_dim;
        for (i, &w) in self.point_mlps.iter().enumerate() {
            out.push((format!("points.{i}"), c, w, ParamGroup::Local));
            c = w;
        }
        for (s, st) in self.stages.iter().enumerate() {
            let mut cin = 2 * c;
            for (i, &w) in st.mlps.iter().enumerate() {
                out.push((format!("stages.{s}.mlp.{i}"), cin, w, ParamGroup::Local));
                cin = w;
            }
            c = cin;
        }
        let d = self.attn_dim;
        for b in 0..self.blocks {
            for (p, o) in [("q", d), ("k", d), ("v", c), ("out", c)] {
                out.push((format!("blocks.{b}.{p}"), c, o, ParamGroup::Transformer));
            }
        }
        out.push(("fuse".into(), c * self.blocks, self.fuse_dim, ParamGroup::Local));
        out
    }

    /// Full-precision linear layers as `(name, in, out, group)`.
    pub fn fp_layers(&self) -> Vec<(String, usize, usize, ParamGroup)> {
        let mut out = vec![("embed".to_string(), 3, self.embed_dim, ParamGroup::Local)];
        let mut c = self.fuse_dim;
        for (i, &w) in self.head_hidden.iter().enumerate() {
            out.push((format!("head.{i}"), c, w, ParamGroup::Head));
            c = w;
        }
        out.push(("classifier".into(), c, self.classes, ParamGroup::Head));
        out
    }

    /// Normalization layers as `(name, width)`.
    pub fn norms(&self) -> Vec<(String, usize)> {
        let mut out = vec![("embed.norm".to_string(), self.embed_dim)];
        for (i, &w) in self.point_mlps.iter().enumerate() {
            out.push((format!("points.{i}.norm"), w));
        }
        for (s, st) in self.stages.iter().enumerate() {
            for (i, &w) in st.mlps.iter().enumerate() {
                out.push((format!("stages.{s}.mlp.{i}.norm"), w));
            }
        }
        for b in 0..self.blocks {
            out.push((format!("blocks.{b}.norm"), self.channels()));
        }
        out.push(("fuse.norm".into(), self.fuse_dim));
        for (i, &w) in self.head_hidden.iter().enumerate() {
            out.push((format!("head.{i}.norm"), w));
        }
        out
    }
}

/// Which parts of the network run binarized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinFlags {
    /// local feature module and fuse layer: weights and activations
    pub non_transformer: bool,
    pub transformer_weights: bool,
    /// inputs of the q/k/v/out projections
    pub transformer_static_acts: bool,
    /// Q, K, V and the attention matrix
    pub transformer_dynamic_acts: bool,
}

impl BinFlags {
    pub const NONE: Self = Self {
        non_transformer: false,
        transformer_weights: false,
        transformer_static_acts: false,
        transformer_dynamic_acts: false,
    };
    pub const ALL: Self = Self {
        non_transformer: true,
        transformer_weights: true,
        transformer_static_acts: true,
        transformer_dynamic_acts: true,
    };
    pub const STAGE1: Self = Self {
        non_transformer: true,
        ..Self::NONE
    };
    pub const STAGE2: Self = Self {
        non_transformer: true,
        transformer_weights: true,
        transformer_static_acts: true,
        transformer_dynamic_acts: false,
    };
    pub const TRANSFORMER_ONLY: Self = Self {
        non_transformer: false,
        ..Self::ALL
    };

    pub fn to_vec(self) -> Vec<f64> {
        [
            self.non_transformer,
            self.transformer_weights,
            self.transformer_static_acts,
            self.transformer_dynamic_acts,
        ]
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect()
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [a, b, c, d] => Ok(Self {
                non_transformer: *a != 0.0,
                transformer_weights: *b != 0.0,
                transformer_static_acts: *c != 0.0,
                transformer_dynamic_acts: *d != 0.0,
            }),
            _ => Err(Error::InvalidArgument(format!("expected 4 flag values, got {}", v.len()))),
        }
    }

    /// (binary weights, binary input) for a layer of the given group.
    pub fn for_layer(self, group: ParamGroup) -> (bool, bool) {
        match group {
            ParamGroup::Local => (self.non_transformer, self.non_transformer),
            ParamGroup::Transformer => (self.transformer_weights, self.transformer_static_acts),
            ParamGroup::Head => (false, false),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// point embedding, local feature stages, fuse layer
    Local,
    Transformer,
    /// task head, always full precision
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("blocks.") {
            ParamGroup::Transformer
        } else if name.starts_with("head.") || name.starts_with("classifier") {
            ParamGroup::Head
        } else {
            ParamGroup::Local
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return i;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.names.len() - 1
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.values[self.id(name)?])
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// activation quantizers by tensor id
    pub specs: BTreeMap<String, QuantSpec>,
    pub policy: HybridPolicy,
    pub flags: BinFlags,
    /// packed binary layers, kept in step with the shadow weights
    pub binary: BTreeMap<String, BinaryLinear>,
    /// static activation quantizers whose parameters have been fitted
    pub calibrated: BTreeSet<String>,
    pub frozen: bool,
    layer_groups: HashMap<String, ParamGroup>,
}

fn is_weight_id(id: &str) -> bool {
    id.ends_with(".weight")
}

impl Model {
    /// Fresh model with the default hybrid policy; `overrides` reassigns
    /// modes of registered tensors.
    pub fn new(config: ModelConfig, overrides: &HybridPolicy, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let mut specs = BTreeMap::new();
        let mut policy = HybridPolicy::default();
        let mut layer_groups = HashMap::new();
        let mut init = |params: &mut ParamStore, name: &str, i: usize, o: usize| {
            let std = (2.0 / i as f64).sqrt();
            let n = Normal::new(0.0, std).expect("finite std");
            params.insert(format!("{name}.weight"), Tensor::new(o, i, (0..o * i).map(|_| n.sample(&mut rng)).collect()));
            params.insert(format!("{name}.bias"), Tensor::zeros(1, o));
        };
        for (name, i, o, g) in config.fp_layers() {
            init(&mut params, &name, i, o);
            layer_groups.insert(name, g);
        }
        for (name, i, o, g) in config.binary_layers() {
            init(&mut params, &name, i, o);
            params.insert(format!("{name}.in.shift"), Tensor::zeros(1, 1));
            params.insert(format!("{name}.in.scale"), Tensor::full(1, 1, 1.0));
            specs.insert(format!("{name}.in"), QuantSpec::new(Binarizer::Sign, Granularity::PerTensor, Mode::Static));
            policy.register(format!("{name}.in"), Mode::Static);
            policy.register(format!("{name}.weight"), Mode::Static);
            layer_groups.insert(name, g);
        }
        for (name, w) in config.norms() {
            params.insert(format!("{name}.gamma"), Tensor::full(1, w, 1.0));
            params.insert(format!("{name}.beta"), Tensor::zeros(1, w));
        }
        for b in 0..config.blocks {
            let ids = AttnIds::for_block(b);
            let fine = |bin, gran, g| {
                let mut s = QuantSpec::new(bin, gran, Mode::Dynamic).with_fine_groups(g);
                s.partition = config.partition;
                s
            };
            specs.insert(ids.q.clone(), fine(Binarizer::Sign, Granularity::PerToken, config.qkv_groups));
            specs.insert(ids.k.clone(), fine(Binarizer::Sign, Granularity::PerToken, config.qkv_groups));
            specs.insert(ids.v.clone(), fine(Binarizer::Sign, Granularity::PerChannel, config.qkv_groups));
            specs.insert(ids.attn.clone(), fine(Binarizer::Round, Granularity::PerToken, config.attn_groups));
            for id in [ids.q, ids.k, ids.v, ids.attn] {
                policy.register(id, Mode::Dynamic);
            }
        }
        for (id, &mode) in &overrides.assignments {
            if !policy.assignments.contains_key(id) {
                return Err(Error::UnregisteredTensor(id.clone()));
            }
            if is_weight_id(id) && mode == Mode::Dynamic {
                return Err(Error::InvalidSpec(format!("weights never change at inference; `{id}` cannot be DYNAMIC")));
            }
            policy.register(id.clone(), mode);
            if let Some(s) = specs.get_mut(id) {
                s.mode = mode;
            }
        }
        let mut model = Self {
            config,
            params,
            specs,
            policy,
            flags: BinFlags::NONE,
            binary: BTreeMap::new(),
            calibrated: BTreeSet::new(),
            frozen: false,
            layer_groups,
        };
        model.sync_packed()?;
        Ok(model)
    }

    pub fn group_of(&self, layer: &str) -> ParamGroup {
        self.layer_groups.get(layer).copied().unwrap_or_else(|| ParamGroup::of(layer))
    }

    /// SHA-256 over the configuration and the layout (not the fitted
    /// values) of every activation quantizer.
    pub fn arch_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.config.canonical_json().as_bytes());
        for (id, s) in &self.specs {
            let layout = (id, s.binarizer, s.granularity, s.mode, s.fine_groups, s.partition);
            h.update(serde_json::to_string(&layout).expect("layout serializes").as_bytes());
        }
        h.finalize().into()
    }

    /// Refresh packed weights, scales and biases from the shadow parameters,
    /// and the static input specs from their learned parameters.
    pub fn sync_packed(&mut self) -> Result<()> {
        for (name, _, _, _) in self.config.binary_layers() {
            let w = self.params.get(&format!("{name}.weight"))?.clone();
            let bias = self.params.get(&format!("{name}.bias"))?.data().to_vec();
            let in_id = format!("{name}.in");
            let spec = self.specs.get_mut(&in_id).expect("registered at construction");
            if self.calibrated.contains(&in_id) {
                let sh = self.params.get(&format!("{in_id}.shift"))?.data()[0];
                let sc = self.params.get(&format!("{in_id}.scale"))?.data()[0].max(SCALE_FLOOR);
                spec.shift = vec![sh];
                spec.scale = vec![sc];
            } else {
                spec.shift.clear();
                spec.scale.clear();
            }
            let mut layer = BinaryLinear::from_shadow(name.clone(), w, bias, spec.clone())?;
            layer.shadow = None;
            self.binary.insert(name, layer);
        }
        Ok(())
    }

    /// Static activation quantizers that the current flags use.
    pub fn active_static_ids(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, _, _, g) in self.config.binary_layers() {
            if self.flags.for_layer(g).1 {
                out.push(format!("{name}.in"));
            }
        }
        if self.flags.transformer_dynamic_acts {
            for b in 0..self.config.blocks {
                let ids = AttnIds::for_block(b);
                for id in [ids.q, ids.k, ids.v, ids.attn] {
                    if self.policy.mode(&id).ok() == Some(Mode::Static) {
                        out.push(id);
                    }
                }
            }
        }
        out
    }

    pub fn uncalibrated_ids(&self) -> Vec<String> {
        self.active_static_ids()
            .into_iter()
            .filter(|id| !self.calibrated.contains(id))
            .collect()
    }

    /// Fit every active, not yet calibrated static quantizer from forward
    /// passes over `inputs`.
    pub fn calibrate_acts(&mut self, inputs: &[(&CloudPlan, &Tensor)]) -> Result<()> {
        let pending = self.uncalibrated_ids();
        if pending.is_empty() {
            return Ok(());
        }
        if inputs.is_empty() {
            return Err(Error::EmptyCalibration(pending[0].clone()));
        }
        self.sync_packed()?;
        let mut records: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
        for (plan, pts) in inputs {
            let mut b = PackedBackend::calibrating(self);
            forward(self, &mut b, plan, pts)?;
            for (id, mut ts) in b.records {
                records.entry(id).or_default().append(&mut ts);
            }
        }
        for id in pending {
            let samples = records.get(&id).map(Vec::as_slice).unwrap_or(&[]);
            let spec = self.specs.get_mut(&id).expect("active ids are registered");
            spec.shift.clear();
            spec.scale.clear();
            spec.fine = None;
            freeze_spec(spec, &id, samples)?;
            if let (Some(&sh), Some(&sc)) = (spec.shift.first(), spec.scale.first()) {
                if self.params.id(&format!("{id}.shift")).is_ok() {
                    self.params.insert(format!("{id}.shift"), Tensor::full(1, 1, sh));
                    self.params.insert(format!("{id}.scale"), Tensor::full(1, 1, sc));
                }
            }
            self.calibrated.insert(id);
        }
        self.sync_packed()
    }

    /// Pack every weight, fix every active STATIC quantizer and mark the
    /// model frozen. Quantizers that were never trained or calibrated are
    /// fitted on `calibration`.
    pub fn freeze_static(&mut self, calibration: &[PointCloud]) -> Result<()> {
        let plans = calibration
            .iter()
            .map(|pc| CloudPlan::build(&self.config, &pc.points))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<(&CloudPlan, &Tensor)> = plans.iter().zip(calibration).map(|(p, c)| (p, &c.points)).collect();
        self.calibrate_acts(&inputs)?;
        self.sync_packed()?;
        self.frozen = true;
        Ok(())
    }

    /// Class logits for one cloud on the packed inference path.
    pub fn forward_packed(&self, plan: &CloudPlan, points: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut b = PackedBackend::new(self);
        let logits = forward(self, &mut b, plan, points)?;
        Ok((logits.into_data(), b.entropies))
    }
}

// ---------------------------------------------------------------------------
// backend abstraction

/// Primitive operations the architecture is built from.
pub trait Backend {
    type V: Clone;
    fn input(&mut self, t: Tensor) -> Self::V;
    fn fp_linear(&mut self, name: &str, x: &Self::V) -> Result<Self::V>;
    fn norm(&mut self, name: &str, x: &Self::V) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn binary_linear(&mut self, name: &str, x: &Self::V, bin_w: bool, bin_a: bool) -> Result<Self::V>;
    /// `A V` for one block; `binary` selects the binarized Q/K/V/A path.
    fn attention(&mut self, block: usize, q: &Self::V, k: &Self::V, v: &Self::V, binary: bool) -> Result<Self::V>;
    fn gather(&mut self, x: &Self::V, idx: &[usize]) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn concat(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    /// max over consecutive row blocks of size `k`
    fn max_pool(&mut self, x: &Self::V, k: usize) -> Result<Self::V>;
}

fn mlp_layer<B: Backend>(model: &Model, b: &mut B, name: &str, x: &B::V) -> Result<B::V> {
    let (bw, ba) = model.flags.for_layer(model.group_of(name));
    let h = b.binary_linear(name, x, bw, ba)?;
    let h = b.norm(&format!("{name}.norm"), &h)?;
    Ok(b.relu(&h))
}

/// Point embedding and local feature stages: `T x C` tokens.
pub fn local_features<B: Backend>(model: &Model, b: &mut B, plan: &CloudPlan, points: &Tensor) -> Result<B::V> {
    let cfg = &model.config;
    if points.rows() != cfg.num_points || points.cols() != 3 {
        return Err(shape_err("model input", format!("{} x 3", cfg.num_points), format!("{:?}", points.shape())));
    }
    if plan.stages.len() != cfg.stages.len() {
        return Err(shape_err("cloud plan", cfg.stages.len(), plan.stages.len()));
    }
    let x = b.input(points.clone());
    let h = b.fp_linear("embed", &x)?;
    let h = b.norm("embed.norm", &h)?;
    let mut h = b.relu(&h);
    for i in 0..cfg.point_mlps.len() {
        h = mlp_layer(model, b, &format!("points.{i}"), &h)?;
    }
    for (s, (st, sp)) in cfg.stages.iter().zip(&plan.stages).enumerate() {
        let nbr = b.gather(&h, &sp.neighbors);
        let ctr = b.gather(&h, &sp.centers_rep);
        let diff = b.sub(&nbr, &ctr)?;
        let mut g = b.concat(&[diff, ctr])?;
        for i in 0..st.mlps.len() {
            g = mlp_layer(model, b, &format!("stages.{s}.mlp.{i}"), &g)?;
        }
        h = b.max_pool(&g, sp.k)?;
    }
    Ok(h)
}

/// Offset-attention block: `y = x + ReLU(LN(out(x - A V)))`.
pub fn transformer_block<B: Backend>(model: &Model, b: &mut B, blk: usize, x: &B::V) -> Result<B::V> {
    let f = model.flags;
    let (bw, ba) = (f.transformer_weights, f.transformer_static_acts);
    let q = b.binary_linear(&format!("blocks.{blk}.q"), x, bw, ba)?;
    let k = b.binary_linear(&format!("blocks.{blk}.k"), x, bw, ba)?;
    let v = b.binary_linear(&format!("blocks.{blk}.v"), x, bw, ba)?;
    let r = b.attention(blk, &q, &k, &v, f.transformer_dynamic_acts)?;
    let off = b.sub(x, &r)?;
    let o = b.binary_linear(&format!("blocks.{blk}.out"), &off, bw, ba)?;
    let o = b.norm(&format!("blocks.{blk}.norm"), &o)?;
    let o = b.relu(&o);
    b.add(x, &o)
}

/// Class logits (`1 x classes`).
pub fn forward<B: Backend>(model: &Model, b: &mut B, plan: &CloudPlan, points: &Tensor) -> Result<B::V> {
    let cfg = &model.config;
    let mut h = local_features(model, b, plan, points)?;
    let mut outs = Vec::with_capacity(cfg.blocks);
    for blk in 0..cfg.blocks {
        h = transformer_block(model, b, blk, &h)?;
        outs.push(h.clone());
    }
    let f = b.concat(&outs)?;
    let f = mlp_layer(model, b, "fuse", &f)?;
    let tokens = cfg.tokens();
    let mut g = b.max_pool(&f, tokens)?;
    for i in 0..cfg.head_hidden.len() {
        let name = format!("head.{i}");
        g = b.fp_linear(&name, &g)?;
        g = b.norm(&format!("{name}.norm"), &g)?;
        g = b.relu(&g);
    }
    b.fp_linear("classifier", &g)
}

// ---------------------------------------------------------------------------
// packed inference backend

pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64]) -> Tensor {
    let mut out = x.clone();
    let c = x.cols() as f64;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = (*v - mean) * rstd * g + b;
        }
    }
    out
}

pub fn max_pool_rows(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 || x.rows() % k != 0 {
        return Err(shape_err("max_pool", format!("rows divisible by {k}"), x.rows()));
    }
    let mut out = Tensor::full(x.rows() / k, x.cols(), f64::NEG_INFINITY);
    for r in 0..x.rows() {
        let o = out.row_mut(r / k);
        for (m, v) in o.iter_mut().zip(x.row(r)) {
            if *v > *m {
                *m = *v;
            }
        }
    }
    Ok(out)
}

fn add_bias(y: &mut Tensor, b: &[f64]) {
    for r in 0..y.rows() {
        for (v, bb) in y.row_mut(r).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

/// Inference on packed weights and xnor/popcount kernels.
pub struct PackedBackend<'m> {
    model: &'m Model,
    calibrating: bool,
    /// inputs seen by uncalibrated static quantizers (calibration mode)
    pub records: BTreeMap<String, Vec<Tensor>>,
    /// mean softmax-row entropy per attention block
    pub entropies: Vec<f64>,
    /// softmax outputs per block, when requested
    pub attention_maps: Option<Vec<Tensor>>,
}

impl<'m> PackedBackend<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self {
            model,
            calibrating: false,
            records: BTreeMap::new(),
            entropies: Vec::new(),
            attention_maps: None,
        }
    }

    pub fn calibrating(model: &'m Model) -> Self {
        Self {
            calibrating: true,
            ..Self::new(model)
        }
    }

    fn act_quant(&mut self, id: &str, x: &Tensor) -> Result<QuantizedActivation> {
        let spec = self
            .model
            .specs
            .get(id)
            .ok_or_else(|| Error::UnregisteredTensor(id.to_string()))?;
        let pending = self.model.policy.mode(id)? == Mode::Static && !self.model.calibrated.contains(id);
        if !pending {
            return quantize_activation(x, spec, &self.model.policy, id);
        }
        if !self.calibrating {
            return Err(Error::Unfrozen(id.to_string()));
        }
        self.records.entry(id.to_string()).or_default().push(x.clone());
        let mut tmp = spec.clone();
        tmp.shift.clear();
        tmp.scale.clear();
        tmp.fine = None;
        freeze_spec(&mut tmp, id, std::slice::from_ref(x))?;
        quantize_activation(x, &tmp, &self.model.policy, id)
    }

    fn fp_weights(&self, name: &str) -> Result<(&'m Tensor, &'m [f64])> {
        let p = &self.model.params;
        Ok((p.get(&format!("{name}.weight"))?, p.get(&format!("{name}.bias"))?.data()))
    }
}

impl Backend for PackedBackend<'_> {
    type V = Tensor;

    fn input(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn fp_linear(&mut self, name: &str, x: &Tensor) -> Result<Tensor> {
        let (w, b) = self.fp_weights(name)?;
        let mut y = matmul(x, false, w, true)?;
        add_bias(&mut y, b);
        Ok(y)
    }

    fn norm(&mut self, name: &str, x: &Tensor) -> Result<Tensor> {
        let p = &self.model.params;
        Ok(layer_norm(
            x,
            p.get(&format!("{name}.gamma"))?.data(),
            p.get(&format!("{name}.beta"))?.data(),
        ))
    }

    fn relu(&mut self, x: &Tensor) -> Tensor {
        x.map(|v| v.max(0.0))
    }

    fn binary_linear(&mut self, name: &str, x: &Tensor, bin_w: bool, bin_a: bool) -> Result<Tensor> {
        let model = self.model;
        let layer = model
            .binary
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no binary layer `{name}`")))?;
        match (bin_w, bin_a) {
            (true, true) => {
                let qa = self.act_quant(&layer.in_id(), x)?;
                linear_with_codes(layer, &qa)
            }
            (true, false) => layer.forward_fp_input(x),
            (false, true) => {
                let xh = self.act_quant(&layer.in_id(), x)?.reconstruct();
                self.fp_linear(name, &xh)
            }
            (false, false) => self.fp_linear(name, x),
        }
    }

    fn attention(&mut self, block: usize, q: &Tensor, k: &Tensor, v: &Tensor, binary: bool) -> Result<Tensor> {
        let (r, a) = if binary {
            let ids = AttnIds::for_block(block);
            let model: &Model = self.model;
            let specs = &model.specs;
            let get = |id: &str| specs.get(id).ok_or_else(|| Error::UnregisteredTensor(id.to_string()));
            let s = AttnSpecs {
                q: get(&ids.q)?,
                k: get(&ids.k)?,
                v: get(&ids.v)?,
                attn: get(&ids.attn)?,
            };
            binary_attention_with(q, k, v, &s, &ids, &mut |id, t, _spec| self.act_quant(id, t))?
        } else {
            float_attention(q, k, v)?
        };
        self.entropies.push(attention_entropy(&a, 0.0)?.mean);
        if let Some(maps) = &mut self.attention_maps {
            maps.push(a);
        }
        Ok(r)
    }

    fn gather(&mut self, x: &Tensor, idx: &[usize]) -> Tensor {
        x.gather_rows(idx)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.sub(b)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }

    fn concat(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        Tensor::concat_cols(&parts.iter().collect::<Vec<_>>())
    }

    fn max_pool(&mut self, x: &Tensor, k: usize) -> Result<Tensor> {
        max_pool_rows(x, k)
    }
}

/// Class logits for a point cloud on the packed inference path.
pub fn model_forward(pc: &PointCloud, model: &Model) -> Result<Vec<f64>> {
    let plan = CloudPlan::build(&model.config, &pc.points)?;
    Ok(model.forward_packed(&plan, &pc.points)?.0)
}

/// Local feature module output (`T x C`) on the packed path.
pub fn local_feature_forward(pc: &PointCloud, model: &Model) -> Result<Tensor> {
    let plan = CloudPlan::build(&model.config, &pc.points)?;
    local_features(model, &mut PackedBackend::new(model), &plan, &pc.points)
}

/// One offset-attention block on the packed path.
pub fn binary_attention_forward(x: &Tensor, model: &Model, block: usize) -> Result<Tensor> {
    if block >= model.config.blocks || x.cols() != model.config.channels() {
        return Err(shape_err("attention block", format!("block < {}, {} channels", model.config.blocks, model.config.channels()), format!("block {block}, {} channels", x.cols())));
    }
    transformer_block(model, &mut PackedBackend::new(model), block, x)
}
