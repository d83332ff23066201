//! Model-size and FLOP accounting.
//!
//! One multiply-accumulate of full-precision work is one FLOP. Binary
//! multiply-accumulates are charged `binary_op_cost` each (1/64 by default:
//! one 64-bit xnor+popcount word replaces 64 MACs). Everything kept in
//! floating point on the binary path (input shift/scale and sign, output
//! rescale, fine-grained combines, norms, softmax, sampling) is charged at
//! full cost, as are runtime binarization statistics for DYNAMIC tensors.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::binmodules::attention::AttnIds;
use crate::binmodules::model::{BinFlags, Model, ModelConfig, ParamGroup};
use crate::hybridize::HybridPolicy;
use crate::quantize::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostKnobs {
    /// FLOPs charged per binary multiply-accumulate
    pub binary_op_cost: f64,
    pub layer_norm_per_elem: f64,
    pub softmax_per_elem: f64,
    /// per point per sampling iteration: distance plus running-min update
    pub fps_per_point: f64,
    /// per point pair, plus one comparison for selection
    pub distance: f64,
    /// input shift, scale and sign per binarized element
    pub binarize_per_elem: f64,
    /// one fused `k_o * dot + c_o` per binary layer output
    pub rescale_per_output: f64,
    /// float ops combining one group pair's popcounts
    pub fine_combine: f64,
}

impl Default for CostKnobs {
    fn default() -> Self {
        Self {
            binary_op_cost: 1.0 / 64.0,
            layer_norm_per_elem: 8.0,
            softmax_per_elem: 5.0,
            fps_per_point: 10.0,
            distance: 8.0,
            binarize_per_elem: 3.0,
            rescale_per_output: 1.0,
            fine_combine: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer_id: String,
    pub module: ParamGroup,
    pub param_bits_fp: u64,
    pub param_bits_bin: u64,
    /// float ops of the full-precision model
    pub flops_fp: f64,
    /// binary multiply-accumulates of the binarized model
    pub binops: f64,
    /// float ops the binarized model still performs, excluding runtime statistics
    pub flops_bin_fp: f64,
    pub dynamic_overhead_flops: f64,
}

impl LayerCost {
    fn new(layer_id: impl Into<String>, module: ParamGroup) -> Self {
        Self {
            layer_id: layer_id.into(),
            module,
            param_bits_fp: 0,
            param_bits_bin: 0,
            flops_fp: 0.0,
            binops: 0.0,
            flops_bin_fp: 0.0,
            dynamic_overhead_flops: 0.0,
        }
    }

    /// Work identical on both paths.
    fn shared(mut self, flops: f64) -> Self {
        self.flops_fp += flops;
        self.flops_bin_fp += flops;
        self
    }

    fn fp_params(mut self, bits: u64) -> Self {
        self.param_bits_fp += bits;
        self.param_bits_bin += bits;
        self
    }

    pub fn effective_flops(&self, knobs: &CostKnobs) -> f64 {
        self.flops_bin_fp + self.binops * knobs.binary_op_cost + self.dynamic_overhead_flops
    }

    fn accumulate(&mut self, o: &LayerCost) {
        self.param_bits_fp += o.param_bits_fp;
        self.param_bits_bin += o.param_bits_bin;
        self.flops_fp += o.flops_fp;
        self.binops += o.binops;
        self.flops_bin_fp += o.flops_bin_fp;
        self.dynamic_overhead_flops += o.dynamic_overhead_flops;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<LayerCost>,
    pub totals: LayerCost,
    pub fp_flops: f64,
    pub effective_flops: f64,
    pub size_reduction_pct: f64,
    pub flops_reduction_pct: f64,
    pub knobs: CostKnobs,
    /// layers required to stay full precision that carry packed weights
    pub audit: Vec<String>,
}

const F32: u64 = 32;

fn linear_cost(name: &str, group: ParamGroup, rows: usize, i: usize, o: usize, bin: (bool, bool), k: &CostKnobs) -> LayerCost {
    let (r, i, o) = (rows as f64, i as f64, o as f64);
    let (iu, ou) = (i as u64, o as u64);
    let mut c = LayerCost::new(name, group);
    c.param_bits_fp = F32 * (iu * ou + ou);
    c.flops_fp = r * i * o + r * o;
    let (bw, ba) = bin;
    c.param_bits_bin = match bw {
        // sign codes, per-channel scale, bias
        true => iu * ou + 2 * F32 * ou,
        false => F32 * (iu * ou + ou),
    } + if ba { 2 * F32 } else { 0 };
    c.flops_bin_fp = match (bw, ba) {
        (true, true) => {
            c.binops = r * i * o;
            k.binarize_per_elem * r * i + k.rescale_per_output * r * o
        }
        // signed accumulation of the float input, then the fused rescale
        (true, false) => r * i * o + k.rescale_per_output * r * o,
        (false, true) => k.binarize_per_elem * r * i + r * i * o + r * o,
        (false, false) => r * i * o + r * o,
    };
    c
}

fn norm_cost(name: &str, group: ParamGroup, rows: usize, w: usize, k: &CostKnobs) -> LayerCost {
    // norm followed by ReLU
    LayerCost::new(name, group)
        .fp_params(2 * F32 * w as u64)
        .shared((k.layer_norm_per_elem + 1.0) * (rows * w) as f64)
}

/// Float ops to compute runtime binarization parameters for one unit of `n`
/// values split into `g` fine-grained groups: l1 scale and normalization,
/// sorting for the partition points, per-group fitting, group assignment.
pub fn unit_statistics_flops(n: usize, g: usize) -> f64 {
    let n = n as f64;
    let log_n = n.log2().ceil().max(0.0);
    let log_g = (g as f64).log2();
    3.0 * n + if g > 1 { n * log_n + 6.0 * n } else { 0.0 } + n * (log_g + 2.0)
}

/// Float ops to encode one unit against frozen partitions.
fn unit_encode_flops(n: usize, g: usize) -> f64 {
    let n = n as f64;
    n + n * ((g as f64).log2() + 2.0)
}

/// Cost of one attention core (`softmax(QK^T/sqrt d)` and `A V`).
fn attention_cost(cfg: &ModelConfig, policy: &HybridPolicy, block: usize, binary: bool, k: &CostKnobs) -> LayerCost {
    let (t, c, d) = (cfg.tokens() as f64, cfg.channels() as f64, cfg.attn_dim as f64);
    let ids = AttnIds::for_block(block);
    let mut row = LayerCost::new(ids.attn.clone(), ParamGroup::Transformer);
    let scale_softmax = (1.0 + k.softmax_per_elem) * t * t;
    row.flops_fp = t * t * d + t * t * c + scale_softmax;
    if !binary {
        row.flops_bin_fp = row.flops_fp;
        return row;
    }
    let (gq, ga) = (cfg.qkv_groups as f64, cfg.attn_groups as f64);
    // four popcount streams per group pair, then a float combine
    let logits_pairs = t * t * gq * gq;
    let av_pairs = t * c * ga * gq;
    row.binops = 4.0 * (logits_pairs * d + av_pairs * t);
    row.flops_bin_fp = k.fine_combine * (logits_pairs + av_pairs) + scale_softmax;
    // (id, units, unit length, groups)
    let quantized = [
        (&ids.q, cfg.tokens(), cfg.attn_dim, cfg.qkv_groups),
        (&ids.k, cfg.tokens(), cfg.attn_dim, cfg.qkv_groups),
        (&ids.v, cfg.channels(), cfg.tokens(), cfg.qkv_groups),
        (&ids.attn, cfg.tokens(), cfg.tokens(), cfg.attn_groups),
    ];
    for (id, units, n, g) in quantized {
        match policy.mode(id).unwrap_or(policy.default_mode) {
            Mode::Dynamic => row.dynamic_overhead_flops += units as f64 * unit_statistics_flops(n, g),
            Mode::Static => row.flops_bin_fp += units as f64 * unit_encode_flops(n, g),
        }
    }
    row
}

/// Per-layer cost rows of a configuration under the given flags, in forward
/// order.
pub fn cost_rows(cfg: &ModelConfig, policy: &HybridPolicy, flags: BinFlags, k: &CostKnobs) -> Vec<LayerCost> {
    let mut rows = Vec::new();
    let n = cfg.num_points;
    let fp = (false, false);
    rows.push(linear_cost("embed", ParamGroup::Local, n, 3, cfg.embed_dim, fp, k));
    rows.push(norm_cost("embed.norm", ParamGroup::Local, n, cfg.embed_dim, k));
    let binary = cfg.binary_layers();
    let mut layers = binary.iter();
    let mut next_binary = |rows: &mut Vec<LayerCost>, r: usize| {
        let (name, i, o, g) = layers.next().expect("binary layers follow the forward order");
        rows.push(linear_cost(name, *g, r, *i, *o, flags.for_layer(*g), k));
        (name.clone(), *o, *g)
    };
    for _ in &cfg.point_mlps {
        let (name, o, g) = next_binary(&mut rows, n);
        rows.push(norm_cost(&format!("{name}.norm"), g, n, o, k));
    }
    let (mut pts, mut c) = (n, cfg.point_mlps.last().copied().unwrap_or(cfg.embed_dim));
    for (s, st) in cfg.stages.iter().enumerate() {
        let (m, kk) = (st.samples as f64, st.neighbors as f64);
        let sampling = m * pts as f64 * k.fps_per_point + m * pts as f64 * (k.distance + 1.0);
        rows.push(LayerCost::new(format!("stages.{s}.sample"), ParamGroup::Local).shared(sampling));
        // neighbour minus center
        rows.push(LayerCost::new(format!("stages.{s}.group"), ParamGroup::Local).shared(m * kk * c as f64));
        let grouped = st.samples * st.neighbors;
        for _ in &st.mlps {
            let (name, o, g) = next_binary(&mut rows, grouped);
            rows.push(norm_cost(&format!("{name}.norm"), g, grouped, o, k));
            c = o;
        }
        rows.push(LayerCost::new(format!("stages.{s}.pool"), ParamGroup::Local).shared(m * kk * c as f64));
        pts = st.samples;
    }
    let t = cfg.tokens();
    for b in 0..cfg.blocks {
        for _ in 0..3 {
            next_binary(&mut rows, t);
        }
        rows.push(attention_cost(cfg, policy, b, flags.transformer_dynamic_acts, k));
        next_binary(&mut rows, t);
        // offset subtraction and residual add
        rows.push(LayerCost::new(format!("blocks.{b}.residual"), ParamGroup::Transformer).shared(2.0 * (t * c) as f64));
        rows.push(norm_cost(&format!("blocks.{b}.norm"), ParamGroup::Transformer, t, c, k));
    }
    let (name, o, g) = next_binary(&mut rows, t);
    rows.push(norm_cost(&format!("{name}.norm"), g, t, o, k));
    rows.push(LayerCost::new("fuse.pool", ParamGroup::Local).shared((t * o) as f64));
    let mut c = cfg.fuse_dim;
    for (i, &w) in cfg.head_hidden.iter().enumerate() {
        rows.push(linear_cost(&format!("head.{i}"), ParamGroup::Head, 1, c, w, fp, k));
        rows.push(norm_cost(&format!("head.{i}.norm"), ParamGroup::Head, 1, w, k));
        c = w;
    }
    rows.push(linear_cost("classifier", ParamGroup::Head, 1, c, cfg.classes, fp, k));
    rows
}

impl CostReport {
    pub fn from_rows(rows: Vec<LayerCost>, knobs: CostKnobs, audit: Vec<String>) -> Self {
        let mut totals = LayerCost::new("total", ParamGroup::Local);
        for r in &rows {
            totals.accumulate(r);
        }
        let fp_flops = totals.flops_fp;
        let effective_flops = totals.effective_flops(&knobs);
        let pct = |fp: f64, bin: f64| if fp > 0.0 { 100.0 * (1.0 - bin / fp) } else { 0.0 };
        Self {
            size_reduction_pct: pct(totals.param_bits_fp as f64, totals.param_bits_bin as f64),
            flops_reduction_pct: pct(fp_flops, effective_flops),
            rows,
            totals,
            fp_flops,
            effective_flops,
            knobs,
            audit,
        }
    }

    pub fn for_config(cfg: &ModelConfig, policy: &HybridPolicy, flags: BinFlags, knobs: CostKnobs) -> Self {
        Self::from_rows(cost_rows(cfg, policy, flags, &knobs), knobs, Vec::new())
    }

    /// Report with one module's rows dropped.
    pub fn without_module(&self, module: ParamGroup) -> Self {
        let rows = self.rows.iter().filter(|r| r.module != module).cloned().collect();
        Self::from_rows(rows, self.knobs, self.audit.clone())
    }

    pub fn fp_bytes(&self) -> u64 {
        self.totals.param_bits_fp.div_ceil(8)
    }

    pub fn bin_bytes(&self) -> u64 {
        self.totals.param_bits_bin.div_ceil(8)
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<22} {:>11} {:>12} {:>12} {:>14} {:>14} {:>14} {:>12}",
            "layer", "module", "bits_fp", "bits_bin", "flops_fp", "binops", "flops_eff", "dyn_flops"
        );
        let module = |m: ParamGroup| match m {
            ParamGroup::Local => "local",
            ParamGroup::Transformer => "transformer",
            ParamGroup::Head => "head",
        };
        for r in self.rows.iter().chain(std::iter::once(&self.totals)) {
            let _ = writeln!(
                s,
                "{:<22} {:>11} {:>12} {:>12} {:>14.0} {:>14.0} {:>14.0} {:>12.0}",
                r.layer_id,
                if r.layer_id == "total" { "" } else { module(r.module) },
                r.param_bits_fp,
                r.param_bits_bin,
                r.flops_fp,
                r.binops,
                r.effective_flops(&self.knobs),
                r.dynamic_overhead_flops
            );
        }
        let _ = writeln!(
            s,
            "size: {} -> {} bytes ({:.1}% reduction)",
            self.fp_bytes(),
            self.bin_bytes(),
            self.size_reduction_pct
        );
        let _ = writeln!(
            s,
            "flops: {:.4e} -> {:.4e} ({:.1}% reduction, binary op = {} flop)",
            self.fp_flops, self.effective_flops, self.flops_reduction_pct, self.knobs.binary_op_cost
        );
        if self.audit.is_empty() {
            let _ = writeln!(s, "audit: ok");
        } else {
            for a in &self.audit {
                let _ = writeln!(s, "audit: {a}");
            }
        }
        s
    }

    /// One JSON object per row, then one for the totals.
    pub fn render_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let mut v = serde_json::to_value(r).expect("row serializes");
            v["effective_flops"] = r.effective_flops(&self.knobs).into();
            let _ = writeln!(s, "{v}");
        }
        let summary = serde_json::json!({
            "layer_id": "total",
            "param_bits_fp": self.totals.param_bits_fp,
            "param_bits_bin": self.totals.param_bits_bin,
            "fp_flops": self.fp_flops,
            "effective_flops": self.effective_flops,
            "dynamic_overhead_flops": self.totals.dynamic_overhead_flops,
            "size_reduction_pct": self.size_reduction_pct,
            "flops_reduction_pct": self.flops_reduction_pct,
            "audit": self.audit,
        });
        let _ = writeln!(s, "{summary}");
        s
    }
}

/// Packed weights present in layers that must stay full precision.
pub fn audit(model: &Model) -> Vec<String> {
    let mut out = Vec::new();
    for (name, _, _, _) in model.config.fp_layers() {
        if model.binary.contains_key(&name) {
            out.push(format!("`{name}` must stay full precision but holds packed weights"));
        }
    }
    out
}

pub fn report_with(model: &Model, num_points: usize, knobs: CostKnobs) -> CostReport {
    let mut cfg = model.config.clone();
    cfg.num_points = num_points;
    CostReport::from_rows(cost_rows(&cfg, &model.policy, model.flags, &knobs), knobs, audit(model))
}

/// Cost report of the model as currently flagged, for clouds of `num_points`.
pub fn report(model: &Model, num_points: usize) -> CostReport {
    report_with(model, num_points, CostKnobs::default())
}

/// `(fp_bytes, bin_bytes)`.
pub fn count_params(model: &Model) -> (u64, u64) {
    let r = report(model, model.config.num_points);
    (r.fp_bytes(), r.bin_bytes())
}

/// `(fp_flops, effective_flops)` for one cloud of `num_points` points.
pub fn count_flops(model: &Model, num_points: usize) -> (f64, f64) {
    let r = report(model, num_points);
    (r.fp_flops, r.effective_flops)
}

/// Runtime binarization statistics for one inference.
pub fn dynamic_overhead_flops(cfg: &ModelConfig, policy: &HybridPolicy, flags: BinFlags, knobs: &CostKnobs) -> f64 {
    if !flags.transformer_dynamic_acts {
        return 0.0;
    }
    (0..cfg.blocks)
        .map(|b| attention_cost(cfg, policy, b, true, knobs).dynamic_overhead_flops)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy_for(cfg: &ModelConfig) -> HybridPolicy {
        Model::new(cfg.clone(), &HybridPolicy::default(), 0).unwrap().policy
    }

    #[test]
    fn single_binary_layer_bits() {
        let k = CostKnobs::default();
        let c = linear_cost("l", ParamGroup::Local, 1, 64, 64, (true, true), &k);
        // 512 bytes of sign bits + 256 bytes of per-channel scales, then
        // bias and the input shift/scale pair
        assert_eq!(c.param_bits_bin, 512 * 8 + 256 * 8 + 64 * 32 + 64);
        assert_eq!(c.binops, 4096.0);
        let dot = linear_cost("d", ParamGroup::Local, 1, 64, 1, (true, true), &k);
        assert_eq!(dot.binops * k.binary_op_cost, 1.0);
        assert_eq!(linear_cost("d", ParamGroup::Local, 1, 64, 1, (false, false), &k).flops_fp, 65.0);
    }

    #[test]
    fn full_precision_model_is_unchanged() {
        for cfg in [ModelConfig::toy(), ModelConfig::paper()] {
            let r = CostReport::for_config(&cfg, &policy_for(&cfg), BinFlags::NONE, CostKnobs::default());
            assert_eq!(r.fp_bytes(), r.bin_bytes());
            assert_eq!(r.fp_flops, r.effective_flops);
            assert_eq!(r.totals.dynamic_overhead_flops, 0.0);
        }
    }

    #[test]
    fn totals_are_column_sums() {
        let cfg = ModelConfig::toy();
        let r = CostReport::for_config(&cfg, &policy_for(&cfg), BinFlags::ALL, CostKnobs::default());
        let bits: u64 = r.rows.iter().map(|x| x.param_bits_bin).sum();
        let eff: f64 = r.rows.iter().map(|x| x.effective_flops(&r.knobs)).sum();
        assert_eq!(bits, r.totals.param_bits_bin);
        assert!((eff - r.effective_flops).abs() <= 1e-9 * eff);
        assert!((0.0..100.0).contains(&r.size_reduction_pct));
        assert!((0.0..100.0).contains(&r.flops_reduction_pct));
    }

    #[test]
    fn dropping_transformer_removes_exactly_its_rows() {
        let cfg = ModelConfig::toy();
        let r = CostReport::for_config(&cfg, &policy_for(&cfg), BinFlags::ALL, CostKnobs::default());
        let d = r.without_module(ParamGroup::Transformer);
        let tr: Vec<_> = r.rows.iter().filter(|x| x.module == ParamGroup::Transformer).collect();
        assert!(!tr.is_empty());
        let bits: u64 = tr.iter().map(|x| x.param_bits_bin).sum();
        let eff: f64 = tr.iter().map(|x| x.effective_flops(&r.knobs)).sum();
        assert_eq!(r.totals.param_bits_bin - d.totals.param_bits_bin, bits);
        assert!((r.effective_flops - d.effective_flops - eff).abs() <= 1e-6);
    }

    #[test]
    fn binarizing_more_layers_never_costs_more() {
        for cfg in [ModelConfig::toy(), ModelConfig::paper()] {
            let p = policy_for(&cfg);
            let k = CostKnobs::default();
            // whole layers at a time: weights and inputs together
            let tr = BinFlags {
                transformer_weights: true,
                transformer_static_acts: true,
                ..BinFlags::NONE
            };
            for chain in [[BinFlags::NONE, BinFlags::STAGE1, BinFlags::STAGE2], [BinFlags::NONE, tr, BinFlags::STAGE2]] {
                let reports: Vec<_> = chain.iter().map(|&f| CostReport::for_config(&cfg, &p, f, k)).collect();
                for w in reports.windows(2) {
                    assert!(w[1].totals.param_bits_bin <= w[0].totals.param_bits_bin);
                    assert!(w[1].effective_flops <= w[0].effective_flops);
                }
            }
        }
    }

    #[test]
    fn dynamic_overhead_small_and_zero_when_static() {
        let cfg = ModelConfig::toy();
        let p = policy_for(&cfg);
        let k = CostKnobs::default();
        let r = CostReport::for_config(&cfg, &p, BinFlags::ALL, k);
        assert!(r.totals.dynamic_overhead_flops > 0.0);
        assert!(r.totals.dynamic_overhead_flops < 0.1 * r.effective_flops);
        assert_eq!(dynamic_overhead_flops(&cfg, &p.all_static(), BinFlags::ALL, &k), 0.0);
    }

    #[test]
    fn per_token_overhead_is_linear_in_tokens() {
        let cfg = ModelConfig::toy();
        let mut p = policy_for(&cfg);
        for b in 0..cfg.blocks {
            let ids = AttnIds::for_block(b);
            p.register(ids.v, Mode::Static);
            p.register(ids.attn, Mode::Static);
        }
        let k = CostKnobs::default();
        let a = dynamic_overhead_flops(&cfg.with_tokens(32), &p, BinFlags::ALL, &k);
        let b = dynamic_overhead_flops(&cfg.with_tokens(64), &p, BinFlags::ALL, &k);
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn reductions_ignore_weight_values() {
        let cfg = ModelConfig::toy();
        let mut a = Model::new(cfg.clone(), &HybridPolicy::default(), 1).unwrap();
        let mut b = Model::new(cfg, &HybridPolicy::default(), 2).unwrap();
        a.flags = BinFlags::ALL;
        b.flags = BinFlags::ALL;
        assert_eq!(report(&a, 256), report(&b, 256));
        assert_eq!(report(&a, 256).render_text(), report(&a, 256).render_text());
        assert!(audit(&a).is_empty());
    }
}
