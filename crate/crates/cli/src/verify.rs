//! Randomized oracle checks of the kernels and binarizers.
//!
//! Every check compares the library against a direct integer or float
//! evaluation written out here. The report text depends only on the seed.

use std::fmt::Write as _;

use fbpt_core::binmodules::BinaryLinear;
use fbpt_core::bittensor::{binary_gemm, bitcount_dot, bitcount_dot_mixed, bitcount_dot_unsigned, BitMatrix, BitPlane, Encoding};
use fbpt_core::hybridize::HybridPolicy;
use fbpt_core::quantize::{
    binarize_round, binarize_sign, fine_grained_binarize, mse, scale_factor, Binarizer, Granularity, Mode, PartitionStrategy,
    QuantSpec,
};
use fbpt_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 200;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    /// first failing case
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.checks.iter().all(|c| c.failure.is_none())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let status = if c.failure.is_none() { "ok" } else { "FAIL" };
            writeln!(s, "{:<22} {:>4}/{:<4} {status}", c.name, c.passed, c.total).unwrap();
            if let Some(f) = &c.failure {
                writeln!(s, "  first failure: {f}").unwrap();
            }
        }
        let verdict = if self.ok() { "all checks passed" } else { "verification FAILED" };
        writeln!(s, "{verdict}").unwrap();
        s
    }
}

fn run(name: &'static str, total: usize, mut case: impl FnMut(usize) -> Result<(), String>) -> CheckResult {
    let mut passed = 0;
    let mut failure = None;
    for i in 0..total {
        match case(i) {
            Ok(()) => passed += 1,
            Err(e) => {
                if failure.is_none() {
                    failure = Some(format!("instance {i}: {e}"));
                }
            }
        }
    }
    CheckResult {
        name,
        passed,
        total,
        failure,
    }
}

fn bits(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(0.5)).collect()
}

fn pm(b: bool) -> i64 {
    if b {
        1
    } else {
        -1
    }
}

/// Runs every check. With `inject_fault` one bit of the first packed
/// operand is flipped after the oracle has read it.
pub fn verify(seed: u64, inject_fault: bool) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    checks.push(run("bitcount_dot signed", INSTANCES, |i| {
        let n = rng.random_range(1..=512);
        let (a, b) = (bits(&mut rng, n), bits(&mut rng, n));
        let want: i64 = a.iter().zip(&b).map(|(&x, &y)| pm(x) * pm(y)).sum();
        let mut pa = BitPlane::from_fn(n, Encoding::Signed, |k| a[k]);
        if inject_fault && i == 0 {
            pa.set(n / 2, !a[n / 2]);
        }
        let got = bitcount_dot(&pa, &BitPlane::from_fn(n, Encoding::Signed, |k| b[k])).map_err(|e| e.to_string())?;
        (got == want).then_some(()).ok_or(format!("n {n}: expected {want}, got {got}"))
    }));

    checks.push(run("bitcount_dot unsigned", INSTANCES, |_| {
        let n = rng.random_range(1..=512);
        let (a, b) = (bits(&mut rng, n), bits(&mut rng, n));
        let want = a.iter().zip(&b).filter(|(&x, &y)| x && y).count() as i64;
        let got = bitcount_dot_unsigned(
            &BitPlane::from_fn(n, Encoding::Unsigned, |k| a[k]),
            &BitPlane::from_fn(n, Encoding::Unsigned, |k| b[k]),
        )
        .map_err(|e| e.to_string())?;
        (got == want).then_some(()).ok_or(format!("n {n}: expected {want}, got {got}"))
    }));

    checks.push(run("bitcount_dot mixed", INSTANCES, |_| {
        let n = rng.random_range(1..=512);
        let (u, s) = (bits(&mut rng, n), bits(&mut rng, n));
        let want: i64 = u.iter().zip(&s).map(|(&x, &y)| i64::from(x) * pm(y)).sum();
        let got = bitcount_dot_mixed(
            &BitPlane::from_fn(n, Encoding::Unsigned, |k| u[k]),
            &BitPlane::from_fn(n, Encoding::Signed, |k| s[k]),
        )
        .map_err(|e| e.to_string())?;
        (got == want).then_some(()).ok_or(format!("n {n}: expected {want}, got {got}"))
    }));

    checks.push(run("binary_gemm", INSTANCES / 4, |_| {
        let (m, p, n) = (rng.random_range(1..=12), rng.random_range(1..=12), rng.random_range(1..=300));
        let (w, a) = (bits(&mut rng, m * n), bits(&mut rng, p * n));
        let wm = BitMatrix::from_fn(m, n, Encoding::Signed, |r, c| w[r * n + c]);
        let am = BitMatrix::from_fn(p, n, Encoding::Signed, |r, c| a[r * n + c]);
        let got = binary_gemm(&wm, &am).map_err(|e| e.to_string())?;
        for i in 0..m {
            for j in 0..p {
                let want: i64 = (0..n).map(|k| pm(w[i * n + k]) * pm(a[j * n + k])).sum();
                if i64::from(got.get(i, j)) != want {
                    return Err(format!("{m}x{n} by {p}x{n}, entry ({i}, {j}): expected {want}, got {}", got.get(i, j)));
                }
            }
        }
        Ok(())
    }));

    checks.push(run("binary linear", INSTANCES / 4, |_| {
        let (t, i_dim, o_dim) = (rng.random_range(1..=8), rng.random_range(1..=150), rng.random_range(1..=10));
        let w = Tensor::new(o_dim, i_dim, (0..o_dim * i_dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let x = Tensor::new(t, i_dim, (0..t * i_dim).map(|_| rng.random_range(-3.0..3.0)).collect());
        let bias: Vec<f64> = (0..o_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = QuantSpec::new(Binarizer::Sign, Granularity::PerToken, Mode::Dynamic);
        let layer = BinaryLinear::from_shadow("l", w.clone(), bias.clone(), spec).map_err(|e| e.to_string())?;
        let mut policy = HybridPolicy::default();
        policy.register("l.in", Mode::Dynamic);
        let got = fbpt_core::binmodules::binary_linear_forward(&x, &layer, &policy).map_err(|e| e.to_string())?;
        let sgn = |v: f64| if v >= 0.0 { 1.0 } else { -1.0 };
        for r in 0..t {
            let beta = x.row(r).iter().map(|v| v.abs()).sum::<f64>() / i_dim as f64;
            for o in 0..o_dim {
                let alpha = w.row(o).iter().map(|v| v.abs()).sum::<f64>() / i_dim as f64;
                let dot: f64 = (0..i_dim).map(|k| sgn(x.get(r, k)) * sgn(w.get(o, k))).sum();
                let want = alpha * beta * dot + bias[o];
                let g = got.get(r, o);
                if (g - want).abs() > 1e-9 * want.abs().max(1.0) {
                    return Err(format!("output ({r}, {o}): expected {want}, got {g}"));
                }
            }
        }
        Ok(())
    }));

    checks.push(run("scale factor", INSTANCES / 4, |_| {
        let (r, c) = (rng.random_range(1..=16), rng.random_range(1..=64));
        let x = Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-5.0..5.0)).collect());
        let s = scale_factor(&x, Granularity::PerToken).map_err(|e| e.to_string())?;
        for row in 0..r {
            let want = x.row(row).iter().map(|v| v.abs()).sum::<f64>() / c as f64;
            if (s.values[row] - want).abs() > 1e-9 * want.max(1.0) {
                return Err(format!("row {row}: expected {want}, got {}", s.values[row]));
            }
        }
        Ok(())
    }));

    checks.push(run("binarizer boundaries", 1, |_| {
        let s = binarize_sign(&[0.0, -0.0, -1e-300]).map_err(|e| e.to_string())?;
        let r = binarize_round(&[0.5, 0.49999999, 1.0]).map_err(|e| e.to_string())?;
        let got = (s.unpack(), r.unpack());
        let want = (vec![1.0, 1.0, -1.0], vec![1.0, 0.0, 1.0]);
        (got == want).then_some(()).ok_or(format!("expected {want:?}, got {got:?}"))
    }));

    checks.push(run("fine-grained mse", INSTANCES / 4, |_| {
        let n = rng.random_range(16..=256);
        let x: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.random_range(1e-9..1.0);
                let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                s * (-u.ln()).powi(2)
            })
            .collect();
        let mut last = f64::INFINITY;
        for g in [1, 2, 4, 8] {
            let code = fine_grained_binarize(&x, g, PartitionStrategy::Percentile, Binarizer::Sign).map_err(|e| e.to_string())?;
            let e = mse(&x, &code.reconstruct());
            if e > last * (1.0 + 1e-12) + 1e-15 {
                return Err(format!("n {n}: mse rose from {last} to {e} at G = {g}"));
            }
            last = e;
        }
        Ok(())
    }));

    VerifyReport { checks }
}
