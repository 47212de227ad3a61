use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use linglo_core::attention::AttentionKind;
use linglo_core::backbone::config::parse_layout;
use linglo_core::backbone::{synthetic_patterns, toy_train, Backbone, BackboneConfig, TrainConfig, Variant};
use linglo_core::bench::{self, BenchDims, BenchPoint, SweepOptions};
use linglo_core::numerics::{container, gradcheck as fd_check, CounterRng, GradcheckConfig, Tensor};
use linglo_core::verify::{self, Scope};
use linglo_core::Error;

use crate::ModelArgs;

/// A check ran to completion and its result is out of tolerance.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

/// 1 for failed checks and failed training, 2 for bad input of any kind.
pub fn exit_status(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Training { .. } | Error::Numeric(_) | Error::OutOfMemory { .. } | Error::State(_)) => 1,
        _ => 2,
    }
}

fn load_config(args: &ModelArgs) -> Result<BackboneConfig> {
    let path = Path::new(&args.config);
    let cfg = if path.exists() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        BackboneConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?
    } else if let Ok(variant) = args.config.parse::<Variant>() {
        BackboneConfig::from_variant(variant)?
    } else {
        return Err(Error::Usage(format!("`{}` is neither a config file nor a preset (b0, b1, b2, micro)", args.config)).into());
    };
    match &args.layout {
        Some(layout) => Ok(cfg.with_layout(&parse_layout(layout)?)?),
        None => Ok(cfg),
    }
}

fn echo_config(cfg: &BackboneConfig) {
    println!("# resolved config");
    for line in cfg.to_toml().lines() {
        println!("#   {line}");
    }
}

pub fn params(args: &ModelArgs) -> Result<()> {
    let cfg = load_config(args)?;
    echo_config(&cfg);
    let model = Backbone::new(cfg)?;
    let train = model.param_breakdown(false);
    let merged = model.param_breakdown(true);
    println!("{:<28} {:>12} {:>12}", "module", "train", "merged");
    for (group, n) in &train {
        println!("{group:<28} {n:>12} {:>12}", merged.get(group).copied().unwrap_or(0));
    }
    println!("{:<28} {:>12} {:>12}", "total", model.param_count(), model.merged_param_count());
    println!("layout={}", model.config.layout());
    println!("total_params={}", model.param_count());
    println!("merged_params={}", model.merged_param_count());
    Ok(())
}

pub fn gradcheck(scope: Scope, filter: Option<&str>, fault: Option<&str>, tolerance: f64, seed: u64) -> Result<()> {
    let cases: Vec<_> = verify::gradient_cases(scope, seed)?
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .collect();
    if cases.is_empty() {
        return Err(Error::Usage(format!("no {scope} case matches `{}`", filter.unwrap_or(""))).into());
    }
    if let Some(name) = fault {
        if !cases.iter().any(|c| c.params.contains(name)) {
            return Err(Error::Usage(format!("no selected case has a tensor named `{name}`")).into());
        }
    }

    let mut worst: Option<(String, f64)> = None;
    let mut failed = 0;
    for case in &cases {
        let cfg = GradcheckConfig {
            tolerance,
            seed,
            corrupt: fault.filter(|n| case.params.contains(n)).map(str::to_string),
            ..Default::default()
        };
        let report = fd_check(&case.params, &case.loss, &cfg)?;
        for t in &report.tensors {
            let ok = t.max_rel_err <= tolerance;
            failed += usize::from(!ok);
            let label = format!("{scope}/{}:{}", case.name, t.name);
            println!(
                "{} {label:<56} elements={:<5} max_rel_err={:.3e}",
                if ok { "pass" } else { "FAIL" },
                t.checked,
                t.max_rel_err
            );
            if worst.as_ref().is_none_or(|(_, e)| t.max_rel_err > *e) {
                worst = Some((label, t.max_rel_err));
            }
        }
    }
    let (worst_name, worst_err) = worst.expect("at least one tensor");
    println!("worst_tensor={worst_name}");
    println!("worst_rel_err={worst_err:.3e}");
    println!("gradcheck={}", if failed == 0 { "pass" } else { "fail" });
    if failed > 0 {
        return Err(VerificationFailed(format!(
            "{failed} tensor(s) above {tolerance:e}; worst is {worst_name} at {worst_err:.3e}"
        ))
        .into());
    }
    Ok(())
}

pub fn oracle_check(instances: usize, tolerance: f64, seed: u64) -> Result<()> {
    let mut bad = Vec::new();
    for kind in [AttentionKind::KeyOnly, AttentionKind::DotProduct] {
        let r = verify::oracle_check(kind, instances, seed)?;
        let ok = r.max_abs_diff <= tolerance;
        println!(
            "{} kind={kind} instances={} max_abs_diff={:.3e}",
            if ok { "pass" } else { "FAIL" },
            r.instances,
            r.max_abs_diff
        );
        if !ok {
            bad.push(kind.to_string());
        }
    }
    println!("oracle_check={}", if bad.is_empty() { "pass" } else { "fail" });
    if !bad.is_empty() {
        return Err(VerificationFailed(format!("{} disagree with the oracle beyond {tolerance:e}", bad.join(", "))).into());
    }
    Ok(())
}

pub fn init(args: &ModelArgs, out: &Path, seed: u64) -> Result<()> {
    let cfg = load_config(args)?;
    echo_config(&cfg);
    let model = Backbone::new(cfg)?;
    let store = model.init::<f32>(seed)?;
    container::save(&store, out).with_context(|| format!("writing {}", out.display()))?;
    println!("total_params={}", store.numel());
    println!("weights={}", out.display());
    Ok(())
}

pub fn merge(weights: &Path, out: &Path, input: Option<usize>, samples: usize, tolerance: f64, seed: u64) -> Result<()> {
    let store = container::load::<f32>(weights).with_context(|| format!("reading {}", weights.display()))?;
    let model = Backbone::from_store(&store)?;
    let mut merged = store.clone();
    model.merge_store(&mut merged)?;

    let size = input.or(model.config.image_size).unwrap_or(2 * model.config.input_multiple());
    let images: Tensor<f32> = CounterRng::new(seed).stream("merge-check").normal(&[samples.max(1), 3, size, size], 1.0)?;
    let before = model.predict(&store, &images)?;
    let after = model.predict(&merged, &images)?;
    let diff = before.max_abs_diff(&after)?;

    println!("scalars_before={}", store.numel());
    println!("scalars_after={}", merged.numel());
    println!("scalars_removed={}", store.numel() - merged.numel());
    println!("verify_inputs={} input={size}x{size}", samples.max(1));
    println!("max_logit_diff={diff:.3e}");
    if diff > tolerance || !diff.is_finite() {
        println!("merge=fail");
        return Err(VerificationFailed(format!("merged logits differ by {diff:.3e} (tolerance {tolerance:e}); nothing written")).into());
    }
    container::save(&merged, out).with_context(|| format!("writing {}", out.display()))?;
    println!("merge=pass");
    println!("weights={}", out.display());
    Ok(())
}

pub struct BenchArgs {
    pub kinds: Vec<AttentionKind>,
    pub n: Vec<usize>,
    pub dims: BenchDims,
    pub options: SweepOptions,
    pub out: PathBuf,
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let mut points: Vec<BenchPoint> = Vec::new();
    for &kind in &args.kinds {
        let sweep = bench::sweep(kind, &args.n, args.dims, &args.options)?;
        if let Some(reason) = &sweep.truncated {
            eprintln!("warning: {kind} sweep truncated: {reason}");
        }
        points.extend(sweep.points);
    }
    // A truncated sweep may be too short to fit; report what was measured.
    let fits = match bench::fit_all(&points) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("warning: no scaling fits: {e}");
            Vec::new()
        }
    };
    let sidecar = bench::emit_report(&points, &fits, &args.out)?;
    print!("{}", fs::read_to_string(&args.out)?);
    for f in &fits {
        let metric = serde_metric(f.metric);
        println!(
            "exponent kind={} metric={metric} value={:.3} r2={:.4} reliable={}",
            f.kind, f.fit.exponent, f.fit.r2, f.reliable
        );
    }
    println!("report={}", args.out.display());
    println!("fits={}", sidecar.display());
    Ok(())
}

fn serde_metric(m: bench::Metric) -> &'static str {
    match m {
        bench::Metric::WallTimeMs => "wall_time_ms",
        bench::Metric::PeakBytes => "peak_bytes",
        bench::Metric::Flops => "flops",
    }
}

pub fn shapes(args: &ModelArgs, input: usize, batch: usize, seed: u64) -> Result<()> {
    let cfg = load_config(args)?;
    echo_config(&cfg);
    let model = Backbone::new(cfg)?;
    let store = model.init::<f32>(seed)?;
    let images: Tensor<f32> = CounterRng::new(seed).stream("images").normal(&[batch.max(1), 3, input, input], 1.0)?;
    let pyramid = model.features(&store, &images)?;
    for (i, (map, stride)) in pyramid.maps.iter().zip(&pyramid.strides).enumerate() {
        let s = map.shape();
        println!("stage{}: {}x{}x{} (stride {stride})", i + 1, s[2], s[3], s[1]);
    }
    for (i, map) in pyramid.maps.iter().enumerate() {
        let dims: Vec<String> = map.shape().iter().map(|d| d.to_string()).collect();
        println!("stage{}_shape={}", i + 1, dims.join("x"));
    }
    Ok(())
}

pub struct TrainArgs {
    pub model: ModelArgs,
    pub steps: usize,
    pub overfit: usize,
    pub image_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub batch: Option<usize>,
    pub target_loss: f64,
    pub log_every: usize,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

pub fn train_toy(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.model)?;
    echo_config(&cfg);
    let classes = cfg.num_classes.min(linglo_core::backbone::train::PATTERN_CLASSES);
    let model = Backbone::new(cfg)?;
    let mut store = model.init::<f32>(args.seed)?;
    let (images, labels) = synthetic_patterns::<f32>(args.overfit, classes, args.image_size, args.seed)?;
    let train_cfg = TrainConfig {
        steps: args.steps,
        lr: args.lr,
        warmup: args.warmup,
        batch_size: args.batch,
        seed: args.seed,
        ..Default::default()
    };
    let losses = toy_train(&model, &mut store, &images, &labels, &train_cfg)?;
    for (step, loss) in losses.iter().enumerate() {
        if args.log_every > 0 && (step % args.log_every == 0 || step + 1 == losses.len()) {
            println!("step={step} loss={loss:.5}");
        }
    }
    let last = losses.last().copied().unwrap_or(f64::NAN);
    if let Some(out) = &args.out {
        container::save(&store, out).with_context(|| format!("writing {}", out.display()))?;
        println!("weights={}", out.display());
    }
    println!("final_loss={last:.5}");
    if last.is_nan() || last >= args.target_loss {
        return Err(VerificationFailed(format!("final loss {last:.5} is not below {}", args.target_loss)).into());
    }
    Ok(())
}
