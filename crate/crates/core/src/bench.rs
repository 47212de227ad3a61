//! Latency, peak memory and multiply counts of the two attention kinds over
//! a sweep of sequence lengths, with power-law fits.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_flops, init_attention, AttentionKind};
use crate::error::{Error, Result};
use crate::numerics::{meter, CounterRng, Tensor};

/// Fits with a lower r² are treated as too noisy to support a conclusion.
pub const MIN_R2: f64 = 0.95;
pub const CSV_HEADER: [&str; 6] = ["kind", "N", "batch", "wall_time_ms", "peak_bytes", "flops"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchDims {
    pub in_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub batch: usize,
}

impl Default for BenchDims {
    fn default() -> Self {
        Self {
            in_dim: 64,
            dim: 64,
            heads: 1,
            batch: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub warmups: usize,
    pub repeats: usize,
    /// Budget for live tensor bytes during one forward pass; a point that
    /// exceeds it ends the sweep.
    pub memory_budget: Option<usize>,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            warmups: 2,
            repeats: 5,
            memory_budget: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub kind: AttentionKind,
    #[serde(rename = "N")]
    pub n: usize,
    pub batch: usize,
    /// Median over the timed repeats.
    pub wall_time_ms: f64,
    /// Peak live tensor bytes above the inputs and weights.
    pub peak_bytes: usize,
    /// Analytic multiplications for one sample.
    pub flops: u64,
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub points: Vec<BenchPoint>,
    /// Set when a point ran out of memory; later points were skipped.
    pub truncated: Option<String>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    }
}

/// Measure one attention kind at every `N` in `n_list` (ascending, ≥ 4).
pub fn sweep(kind: AttentionKind, n_list: &[usize], dims: BenchDims, opts: &SweepOptions) -> Result<Sweep> {
    if n_list.len() < 4 {
        return Err(Error::Usage(format!("a sweep needs at least 4 sizes, got {}", n_list.len())));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) || n_list[0] == 0 {
        return Err(Error::Usage(format!("sweep sizes must be positive and ascending: {n_list:?}")));
    }
    if opts.repeats < 5 {
        return Err(Error::Usage("latency is a median of at least 5 timed runs".into()));
    }
    let (layer, store) = init_attention::<f32>(kind, dims.in_dim, dims.dim, dims.heads, opts.seed)?;
    let rng = CounterRng::new(opts.seed).stream("bench/inputs");
    let mut points = Vec::new();
    let mut truncated = None;
    for &n in n_list {
        let flops = attention_flops(kind, n, dims.in_dim, dims.dim, dims.heads)?;
        let x: Tensor<f32> = rng.stream(&n.to_string()).normal(&[dims.batch, n, dims.in_dim], 1.0)?;

        meter::reset();
        meter::set_limit(opts.memory_budget.map(|b| meter::live_bytes() + b));
        let measured = layer.infer(&store, &x).map(|_| meter::snapshot().peak_bytes);
        meter::set_limit(None);
        let peak_bytes = match measured {
            Ok(p) => p,
            Err(e @ Error::OutOfMemory { .. }) => {
                truncated = Some(format!("{kind} sweep stopped at N = {n}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };

        for _ in 0..opts.warmups {
            layer.infer(&store, &x)?;
        }
        let mut times = Vec::with_capacity(opts.repeats);
        for _ in 0..opts.repeats {
            let start = Instant::now();
            let y = layer.infer(&store, &x)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            drop(y);
        }
        points.push(BenchPoint {
            kind,
            n,
            batch: dims.batch,
            wall_time_ms: (median(times) * 1e6).round().max(1.0) / 1e6,
            peak_bytes,
            flops,
        });
    }
    Ok(Sweep { points, truncated })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    WallTimeMs,
    PeakBytes,
    Flops,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::WallTimeMs, Metric::PeakBytes, Metric::Flops];

    pub fn of(self, p: &BenchPoint) -> f64 {
        match self {
            Metric::WallTimeMs => p.wall_time_ms,
            Metric::PeakBytes => p.peak_bytes as f64,
            Metric::Flops => p.flops as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// Slope of the least-squares line through `(ln N, ln metric)`.
    pub exponent: f64,
    pub intercept: f64,
    pub r2: f64,
}

impl ScalingFit {
    pub fn is_reliable(&self) -> bool {
        self.r2 >= MIN_R2
    }
}

/// Least-squares power law `y = e^intercept · x^exponent`.
pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<ScalingFit> {
    if xs.len() != ys.len() {
        return Err(Error::Data(format!("{} sizes but {} measurements", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Data("a power-law fit needs at least two points".into()));
    }
    if let Some(bad) = xs.iter().chain(ys).find(|v| v.is_nan() || **v <= 0.0 || v.is_infinite()) {
        return Err(Error::Data(format!("power-law fit needs positive finite values, got {bad}")));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Data("power-law fit needs at least two distinct sizes".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(ScalingFit { exponent, intercept, r2 })
}

/// Power-law fit of one metric against `N` (at least 4 points).
pub fn fit_scaling(points: &[BenchPoint], metric: Metric) -> Result<ScalingFit> {
    if points.len() < 4 {
        return Err(Error::Data(format!("scaling fit needs at least 4 points, got {}", points.len())));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| metric.of(p)).collect();
    fit_power_law(&xs, &ys)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub kind: AttentionKind,
    pub metric: Metric,
    #[serde(flatten)]
    pub fit: ScalingFit,
    pub reliable: bool,
}

/// Every (kind, metric) fit over `points`, in first-seen kind order.
pub fn fit_all(points: &[BenchPoint]) -> Result<Vec<FitRecord>> {
    let mut kinds: Vec<AttentionKind> = Vec::new();
    for p in points {
        if !kinds.contains(&p.kind) {
            kinds.push(p.kind);
        }
    }
    let mut out = Vec::new();
    for kind in kinds {
        let mine: Vec<BenchPoint> = points.iter().filter(|p| p.kind == kind).cloned().collect();
        for metric in Metric::ALL {
            let fit = fit_scaling(&mine, metric)?;
            out.push(FitRecord {
                kind,
                metric,
                fit,
                reliable: fit.is_reliable(),
            });
        }
    }
    Ok(out)
}

/// Path of the JSON fit summary written next to a CSV report.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut name = csv.file_stem().unwrap_or_default().to_os_string();
    name.push(".fits.json");
    csv.with_file_name(name)
}

/// Write the CSV report and its fit summary sidecar.
pub fn emit_report(points: &[BenchPoint], fits: &[FitRecord], path: &Path) -> Result<PathBuf> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for p in points {
        w.serialize(p).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    fs::write(path, bytes)?;
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(fits).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&sidecar, json + "\n")?;
    Ok(sidecar)
}

/// Parse a CSV report written by [`emit_report`].
pub fn read_report(path: &Path) -> Result<Vec<BenchPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(Error::Data(format!("unexpected report header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Data(format!("{other:?}")),
        }
    } else {
        Error::Data(e.to_string())
    }
}
