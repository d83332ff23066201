use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fbpt_core::bench::gemm_throughput;
use fbpt_core::binmodules::model::{BinFlags, Model};
use fbpt_core::cost;
use fbpt_core::train::{evaluate_detailed, synth_dataset, Dataset, EpochRecord, Stage, Trainer};

use crate::config::RunConfig;
use crate::pointio;
use crate::verify::verify;
use crate::weights::{WeightError, WeightFile};

#[derive(Debug, Parser)]
#[command(name = "fbpt", version, about = "Fully binary point-cloud transformer")]
pub struct Cli {
    /// run configuration (TOML)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// weight file to read
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// overrides the configured seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// output directory (train) or file (report, bench)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// worker threads; defaults to all cores
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check kernels and binarizers against direct evaluation
    Verify {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Staged training; writes checkpoints and a metrics stream
    Train,
    /// Accuracy of a frozen weight file on the test split
    Eval,
    /// Parameter size and FLOPs accounting
    Report {
        /// one JSON record per line instead of a table
        #[arg(long)]
        jsonl: bool,
        /// points per cloud (defaults to the model's)
        #[arg(long)]
        points: Option<usize>,
    },
    /// Packed versus naive float GEMM throughput
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![256, 1024, 4096])]
        sizes: Vec<usize>,
        /// timing budget per measurement in milliseconds
        #[arg(long, default_value_t = 300)]
        budget_ms: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    Failure = 1,
    Usage = 2,
}

/// Error carrying the exit code it maps to.
#[derive(Debug)]
struct CmdError {
    code: ExitCode,
    err: anyhow::Error,
}

fn usage(err: impl Into<anyhow::Error>) -> CmdError {
    CmdError {
        code: ExitCode::Usage,
        err: err.into(),
    }
}

fn failure(err: impl Into<anyhow::Error>) -> CmdError {
    CmdError {
        code: ExitCode::Failure,
        err: err.into(),
    }
}

type CmdResult = Result<ExitCode, CmdError>;

/// Parse `args` (program name first) and run. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ExitCode::Usage } else { ExitCode::Success };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code as i32;
        }
    };
    let result = match cli.threads {
        Some(0) => Err(usage(anyhow::anyhow!("--threads must be positive"))),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli, out)),
            Err(e) => Err(failure(e)),
        },
        None => dispatch(&cli, out),
    };
    match result {
        Ok(code) => code as i32,
        Err(e) => {
            let _ = writeln!(err, "error: {:#}", e.err);
            e.code as i32
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    match &cli.command {
        Command::Verify { inject_fault } => cmd_verify(cli.seed.unwrap_or(0), *inject_fault, out),
        Command::Train => cmd_train(cli, out),
        Command::Eval => cmd_eval(cli, out),
        Command::Report { jsonl, points } => cmd_report(cli, *jsonl, *points, out),
        Command::Bench { sizes, budget_ms } => cmd_bench(sizes, Duration::from_millis(*budget_ms), cli.out.as_deref(), out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CmdError> {
    out.write_all(text.as_bytes()).map_err(failure)
}

fn load_config(cli: &Cli) -> Result<RunConfig, CmdError> {
    let path = cli.config.as_ref().ok_or_else(|| usage(anyhow::anyhow!("--config is required")))?;
    let cfg = RunConfig::load(path).map_err(usage)?;
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset), CmdError> {
    let mc = cfg.model_config().map_err(|e| usage(anyhow::anyhow!(e)))?;
    let d = &cfg.data;
    match &d.dir {
        Some(dir) => pointio::load_dataset_dir(dir, mc.num_points).map_err(usage),
        None => {
            let train = synth_dataset(d.train_seed, d.train_per_class, mc.num_points, d.noise).map_err(usage)?;
            let test = synth_dataset(d.test_seed, d.test_per_class, mc.num_points, d.noise).map_err(usage)?;
            if train.classes != mc.classes {
                return Err(usage(anyhow::anyhow!(
                    "the synthetic dataset has {} classes, the model {}",
                    train.classes,
                    mc.classes
                )));
            }
            Ok((train, test))
        }
    }
}

fn weight_error(e: WeightError) -> CmdError {
    match e {
        WeightError::Model(_) | WeightError::Io(_) => failure(e),
        _ => usage(e),
    }
}

/// Load a frozen weight file into the configured architecture.
pub fn load_frozen(cfg: &RunConfig, path: &Path) -> anyhow::Result<Model> {
    let wf = WeightFile::load(path)?;
    if !wf.is_frozen() {
        return Err(WeightError::NotFrozen.into());
    }
    Ok(wf.apply(cfg.build_model()?)?)
}

fn accuracy_line(oa: f64, macc: f64) -> String {
    format!("oa {oa:.6} macc {macc:.6}\n")
}

fn cmd_verify(seed: u64, inject_fault: bool, out: &mut dyn Write) -> CmdResult {
    let report = verify(seed, inject_fault);
    emit(out, &report.render())?;
    Ok(if report.ok() { ExitCode::Success } else { ExitCode::Failure })
}

fn cmd_train(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    let cfg = load_config(cli)?;
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.paths.checkpoint_dir.clone())
        .ok_or_else(|| usage(anyhow::anyhow!("no output directory: pass --out or set paths.checkpoint_dir")))?;
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(failure)?;
    let (train, test) = datasets(&cfg)?;
    let model = cfg.build_model().map_err(usage)?;
    let mut metrics = std::fs::File::create(dir.join("metrics.jsonl")).map_err(failure)?;
    let mut t = Trainer::new(model, &train, &test, cfg.train.clone()).map_err(failure)?;
    let mut logged = 0;
    let mut flush = |t: &Trainer, metrics: &mut std::fs::File| -> Result<(), CmdError> {
        for r in &t.history[logged..] {
            writeln!(metrics, "{}", r.to_json_line()).map_err(failure)?;
        }
        logged = t.history.len();
        Ok(())
    };
    for (stage, epochs, file) in [
        (Stage::S1NonTransformer, cfg.train.stage1_epochs, "stage1.fbpt"),
        (Stage::S2TransformerWeights, cfg.train.stage2_epochs, "stage2.fbpt"),
    ] {
        t.begin(stage).map_err(failure)?;
        t.run_epochs(epochs).map_err(failure)?;
        flush(&t, &mut metrics)?;
        WeightFile::from_model(&t.model, false).save(&dir.join(file)).map_err(failure)?;
        if let Some(r) = t.history.last() {
            emit(out, &format!("{} done: loss {:.4} oa {:.4}\n", stage.label(), r.loss, r.oa))?;
        }
    }
    t.finish().map_err(failure)?;
    flush(&t, &mut metrics)?;

    // the recorded final accuracy is that of the stored weights
    let wf = WeightFile::from_model(&t.model, true);
    let path = dir.join("model.fbpt");
    wf.save(&path).map_err(failure)?;
    let stored = wf.apply(cfg.build_model().map_err(usage)?).map_err(failure)?;
    let ev = evaluate_detailed(&stored, &test).map_err(failure)?;
    let rec = EpochRecord {
        stage: "final".into(),
        epoch: 0,
        loss: ev.loss,
        oa: ev.oa,
        macc: ev.macc,
        attn_entropy: ev.attn_entropy,
    };
    writeln!(metrics, "{}", rec.to_json_line()).map_err(failure)?;
    emit(out, &format!("wrote {}\n", path.display()))?;
    emit(out, &accuracy_line(ev.oa, ev.macc))?;
    Ok(ExitCode::Success)
}

fn cmd_eval(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    let cfg = load_config(cli)?;
    let path = cli.weights.as_ref().ok_or_else(|| usage(anyhow::anyhow!("--weights is required")))?;
    let wf = WeightFile::load(path).map_err(weight_error)?;
    if !wf.is_frozen() {
        return Err(usage(WeightError::NotFrozen));
    }
    let model = wf.apply(cfg.build_model().map_err(usage)?).map_err(weight_error)?;
    let (_, test) = datasets(&cfg)?;
    let ev = evaluate_detailed(&model, &test).map_err(failure)?;
    emit(out, &accuracy_line(ev.oa, ev.macc))?;
    Ok(ExitCode::Success)
}

fn cmd_report(cli: &Cli, jsonl: bool, points: Option<usize>, out: &mut dyn Write) -> CmdResult {
    let cfg = load_config(cli)?;
    let model = match &cli.weights {
        Some(p) => WeightFile::load(p)
            .and_then(|wf| wf.apply(cfg.build_model().map_err(|e| WeightError::Io(e.to_string()))?))
            .map_err(weight_error)?,
        None => {
            let mut m = cfg.build_model().map_err(usage)?;
            m.flags = BinFlags::ALL;
            m
        }
    };
    let n = points.unwrap_or(model.config.num_points);
    if n < model.config.stages.first().map_or(1, |s| s.samples.max(s.neighbors)) {
        return Err(usage(anyhow::anyhow!("{n} points is fewer than the first stage samples")));
    }
    let report = cost::report_with(&model, n, cfg.cost);
    let text = if jsonl { report.render_jsonl() } else { report.render_text() };
    match cli.out.clone().or_else(|| cfg.paths.report.clone()) {
        Some(p) => {
            write_file(&p, text.as_bytes())?;
            emit(out, &format!("wrote {}\n", p.display()))?;
        }
        None => emit(out, &text)?,
    }
    Ok(ExitCode::Success)
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<(), CmdError> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string()).map_err(failure)?;
    }
    std::fs::write(p, bytes).with_context(|| p.display().to_string()).map_err(failure)
}

/// Output rows timed at size `n`: enough for a stable rate without the
/// float side taking seconds.
pub fn bench_rows(n: usize) -> usize {
    ((1usize << 28) / (n * n).max(1)).clamp(1, n)
}

fn cmd_bench(sizes: &[usize], budget: Duration, out_file: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    if sizes.is_empty() || sizes.contains(&0) || sizes.iter().any(|&n| n > 16384) {
        return Err(usage(anyhow::anyhow!("sizes must be in 1..=16384")));
    }
    let mut text = format!("{:>6} {:>6} {:>14} {:>15} {:>8}\n", "n", "rows", "float GMAC/s", "packed GMAC/s", "ratio");
    let mut json = String::new();
    for &n in sizes {
        let b = gemm_throughput(n, bench_rows(n), 0, budget).map_err(failure)?;
        text += &format!(
            "{:>6} {:>6} {:>14.3} {:>15.3} {:>7.1}x\n",
            b.n,
            b.rows,
            b.float_macs_per_s / 1e9,
            b.packed_macs_per_s / 1e9,
            b.ratio
        );
        json += &serde_json::to_string(&b).map_err(failure)?;
        json.push('\n');
    }
    text += "single thread, one MAC per bit product; XNOR-Net reports up to 58x for binary convolutions\n";
    emit(out, &text)?;
    if let Some(p) = out_file {
        write_file(p, json.as_bytes())?;
    }
    Ok(ExitCode::Success)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_rows_are_bounded() {
        assert_eq!(bench_rows(4096), 16);
        assert_eq!(bench_rows(256), 256);
        assert_eq!(bench_rows(1), 1);
    }

    #[test]
    fn usage_errors_exit_two() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["fbpt", "frobnicate"], &mut o, &mut e), 2);
        assert_eq!(run(["fbpt", "train"], &mut o, &mut e), 2);
        assert_eq!(run(["fbpt", "--threads", "0", "verify"], &mut o, &mut e), 2);
        assert_eq!(run(["fbpt", "bench", "--sizes", "0"], &mut o, &mut e), 2);
        assert_eq!(run(["fbpt", "--help"], &mut o, &mut e), 0);
    }
}
