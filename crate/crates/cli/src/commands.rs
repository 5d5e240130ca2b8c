use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use omniguide::report::{
    emit_traces, extract_choice, grade, load_traces, render_attribution, tabulate, trace_histogram,
    RenderFormat, TraceHeader,
};
use omniguide::server::{serve_on_device, LatencyModel, SimulatedDevice};
use omniguide::source::remote::RemoteSource;
use omniguide::{
    bench as run_bench, decode as run_decode, BenchJob, DecodeError, DecodeJob, DecodeResult,
    LogitSource, SamplingMode, SourceError, Strategy,
};

use crate::config::{
    build_job, detokenize, eval_jobs, load_toy, parse_strategy, RunConfig, SourceConfig, Sources,
};
use crate::{BenchFormat, CliError, RenderKind, RunArgs};

/// Load the config file and apply environment and flag overrides.
pub fn effective_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(ep) = &args.base_endpoint {
        cfg.base = SourceConfig { toy: None, endpoint: Some(ep.clone()) };
    }
    if let Some(ep) = &args.guide_endpoint {
        cfg.guide = Some(SourceConfig { toy: None, endpoint: Some(ep.clone()) });
    }
    if let Some(s) = &args.strategy {
        cfg.guidance = parse_strategy(s, &cfg.guidance)?;
    }
    let g = &mut cfg.guidance;
    if let Some(a) = args.alpha {
        g.alpha = a;
    }
    if let Some(w) = args.warmup_steps {
        g.warmup_steps = w;
    }
    if let Some(w) = args.warmup_slope {
        g.warmup_slope = w;
    }
    let s = &mut cfg.sampler;
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.temperature {
        s.temperature = v;
    }
    if let Some(v) = args.top_p {
        s.top_p = v;
    }
    if let Some(v) = args.repetition_penalty {
        s.repetition_penalty = v;
    }
    if args.greedy {
        s.mode = SamplingMode::Greedy;
    }
    if let Some(n) = args.max_new_tokens {
        cfg.max_new_tokens = n;
    }
    if let Some(p) = &args.trace_out {
        cfg.output.trace = Some(std::path::absolute(p).unwrap_or_else(|_| p.clone()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn decode_error(e: DecodeError) -> CliError {
    match e {
        DecodeError::Incompatible(m) => CliError::Handshake(m.to_string()),
        DecodeError::Source { source: SourceError::Transport { .. } | SourceError::Protocol { .. }, .. }
        | DecodeError::JobFailed { .. } => CliError::Runtime(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, format!("{text}\n")).map_err(|e| io_error(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

/// `trace.jsonl` → `trace.<tag>.jsonl`.
fn tagged(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{tag}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

fn write_trace(path: &Path, cfg: &RunConfig, result: &DecodeResult) -> Result<(), CliError> {
    let header = TraceHeader::new(result, cfg.guidance.strategy.as_str(), cfg.sampler.seed, cfg.to_json());
    emit_traces(result, &header, path).map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn decode(args: &RunArgs) -> Result<(), CliError> {
    let cfg = effective_config(args)?;
    let sources = Sources::build(&cfg)?;
    let job = build_job(&cfg, &sources)?;
    let result = run_decode(&job).map_err(decode_error)?;
    write_output(cfg.output.text.as_deref(), &detokenize(sources.base.vocabulary(), &result.tokens))?;
    if let Some(p) = &cfg.output.trace {
        write_trace(p, &cfg, &result)?;
    }
    match result.error {
        Some(e) => Err(CliError::Runtime(e)),
        None => Ok(()),
    }
}

struct CompareRow {
    label: String,
    cfg: RunConfig,
    results: Vec<DecodeResult>,
}

pub fn compare(args: &RunArgs, strategies: &[String]) -> Result<(), CliError> {
    let cfg = effective_config(args)?;
    let specs: Vec<String> = if strategies.is_empty() {
        vec![cfg.guidance.strategy.as_str().to_string()]
    } else {
        strategies.to_vec()
    };
    let mut variants = Vec::with_capacity(specs.len());
    for s in &specs {
        let mut c = cfg.clone();
        c.guidance = parse_strategy(s, &cfg.guidance)?;
        c.validate()?;
        variants.push((s.clone(), c));
    }
    let sources = Sources::build(&cfg)?;
    let stops = build_job(&cfg, &sources)?.stop_tokens;
    let mut planned: Vec<(String, RunConfig, Vec<DecodeJob>)> = Vec::new();
    for (label, c) in variants {
        let jobs = if c.eval.is_empty() {
            vec![build_job(&c, &sources)?]
        } else {
            eval_jobs(&c, &sources)?
        };
        planned.push((label, c, jobs));
    }

    // independent jobs with their own seeds, so running them side by side
    // does not change any output
    let outcomes: Vec<Result<Vec<DecodeResult>, DecodeError>> = thread::scope(|s| {
        let handles: Vec<_> = planned
            .iter()
            .map(|(_, _, jobs)| s.spawn(move || jobs.iter().map(run_decode).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("compare worker panicked")).collect()
    });
    let mut rows = Vec::with_capacity(planned.len());
    for ((label, c, _), out) in planned.into_iter().zip(outcomes) {
        rows.push(CompareRow { label, cfg: c, results: out.map_err(decode_error)? });
    }

    let vocab = sources.base.vocabulary();
    let mut failed = None;
    for (i, row) in rows.iter().enumerate() {
        for (j, r) in row.results.iter().enumerate() {
            if let Some(trace) = &cfg.output.trace {
                let tag = if row.results.len() == 1 {
                    format!("{i}-{}", row.cfg.guidance.strategy)
                } else {
                    format!("{i}-{}-{j}", row.cfg.guidance.strategy)
                };
                write_trace(&tagged(trace, &tag), &row.cfg, r)?;
            }
            if let (Some(e), None) = (&r.error, &failed) {
                failed = Some(format!("{}: {e}", row.label));
            }
        }
    }

    let mut out = String::new();
    out.push_str(&format!(
        "{:<3} {:<22} {:>6} {:<13} {:>6} {:>10} {:>12} {:>9} {:<7} {}\n",
        "#", "strategy", "alpha", "finish", "tokens", "prefill_s", "gen_s/token", "accuracy", "same_as", "output"
    ));
    for (i, row) in rows.iter().enumerate() {
        let tokens: Vec<_> = row.results.iter().map(|r| &r.tokens).collect();
        let same = rows[..i]
            .iter()
            .position(|r| r.results.iter().map(|x| &x.tokens).collect::<Vec<_>>() == tokens)
            .map_or("-".to_string(), |k| format!("#{k}"));
        let accuracy = if cfg.eval.is_empty() {
            "-".to_string()
        } else {
            let mut graded = Vec::with_capacity(cfg.eval.len());
            for (r, item) in row.results.iter().zip(&cfg.eval) {
                let answer: Vec<_> = r.tokens.iter().copied().filter(|t| !stops.contains(t)).collect();
                let predicted = extract_choice(&detokenize(vocab, &answer), &item.options);
                graded.extend(
                    grade(&item.split, &[predicted], std::slice::from_ref(&item.gold))
                        .map_err(|e| CliError::Runtime(e.to_string()))?,
                );
            }
            let (correct, total) = tabulate(&graded)
                .values()
                .fold((0, 0), |(c, t), a| (c + a.correct, t + a.total));
            format!("{correct}/{total}")
        };
        let n = row.results.len() as f64;
        let prefill = row.results.iter().map(|r| r.timings.prefill_s).sum::<f64>() / n;
        let gen = row.results.iter().map(|r| r.timings.generate_mean_s).sum::<f64>() / n;
        let finish = row.results.last().map_or("-", |r| r.finish_reason.as_str());
        let alpha = if row.cfg.guidance.strategy.uses_fixed_alpha() {
            format!("{}", row.cfg.guidance.alpha)
        } else {
            "-".into()
        };
        let text = if row.results.len() == 1 {
            detokenize(vocab, &row.results[0].tokens)
        } else {
            format!("({} items)", row.results.len())
        };
        out.push_str(&format!(
            "{:<3} {:<22} {:>6} {:<13} {:>6} {:>10.4} {:>12.5} {:>9} {:<7} {}\n",
            i,
            row.cfg.guidance.strategy.as_str(),
            alpha,
            finish,
            row.results.iter().map(|r| r.tokens.len()).sum::<usize>(),
            prefill,
            gen,
            accuracy,
            same,
            text
        ));
    }
    print!("{out}");
    match failed {
        Some(e) => Err(CliError::Runtime(e)),
        None => Ok(()),
    }
}

/// Toy sources are hosted on local mock servers sharing one simulated device
/// so that branch latencies add up as on a single accelerator.
fn bench_sources(
    cfg: &RunConfig,
    latency: LatencyModel,
) -> Result<(Sources, Vec<omniguide::server::ServerHandle>), CliError> {
    let device = SimulatedDevice::new();
    let mut servers = Vec::new();
    let mut host = |s: &SourceConfig| -> Result<Arc<dyn LogitSource>, CliError> {
        match &s.toy {
            Some(path) => {
                let handle = serve_on_device(load_toy(path)?, latency, device.clone(), "127.0.0.1:0")
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                let remote = RemoteSource::connect(&handle.endpoint())
                    .map_err(|e| CliError::Handshake(e.to_string()))?;
                servers.push(handle);
                Ok(Arc::new(remote))
            }
            None => {
                let ep = s.endpoint.as_deref().unwrap_or_default();
                RemoteSource::connect(ep)
                    .map(|r| Arc::new(r) as Arc<dyn LogitSource>)
                    .map_err(|e| CliError::Handshake(format!("{ep}: {e}")))
            }
        }
    };
    let base = host(&cfg.base)?;
    let guide = cfg.guide.as_ref().map(&mut host).transpose()?;
    if let Some(g) = &guide {
        omniguide::check_compatibility(base.vocabulary(), g.vocabulary())
            .map_err(|e| CliError::Handshake(e.to_string()))?;
    }
    Ok((Sources { base, guide }, servers))
}

pub fn bench(args: &RunArgs, reps: Option<usize>, format: BenchFormat) -> Result<(), CliError> {
    let cfg = effective_config(args)?;
    let repetitions = reps.unwrap_or(cfg.bench.repetitions);
    if repetitions == 0 {
        return Err(CliError::Config("repetitions must be >= 1".into()));
    }
    let entries = if cfg.bench.jobs.is_empty() {
        let mut v = vec![crate::config::BenchEntry {
            label: "baseline".into(),
            strategy: "none".into(),
            negative_input: Default::default(),
        }];
        if cfg.guidance.strategy != Strategy::None {
            v.push(crate::config::BenchEntry {
                label: cfg.guidance.strategy.as_str().into(),
                strategy: cfg.guidance.strategy.as_str().into(),
                negative_input: cfg.negative_input,
            });
        }
        v
    } else {
        cfg.bench.jobs.clone()
    };
    let (sources, servers) = bench_sources(&cfg, cfg.bench.latency.model()?)?;
    let mut jobs = Vec::with_capacity(entries.len());
    for e in &entries {
        let mut c = cfg.clone();
        c.guidance = parse_strategy(&e.strategy, &cfg.guidance)?;
        c.negative_input = e.negative_input;
        c.validate()?;
        jobs.push(BenchJob { label: e.label.clone(), job: build_job(&c, &sources)? });
    }
    let report = run_bench(&jobs, repetitions).map_err(decode_error)?;
    drop(sources);
    for s in servers {
        s.shutdown();
    }
    match format {
        BenchFormat::Table => print!("{}", report.to_table()),
        BenchFormat::Json => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
    }
    Ok(())
}

pub fn render(trace: &Path, kind: RenderKind, bins: usize, out: Option<&Path>) -> Result<(), CliError> {
    let (_, traces) = load_traces(trace).map_err(|e| CliError::Config(e.to_string()))?;
    let text = match kind {
        RenderKind::Terminal | RenderKind::Html => {
            let format = if matches!(kind, RenderKind::Html) { RenderFormat::Html } else { RenderFormat::Terminal };
            let r = render_attribution(&traces, format);
            if r.missing_tokens > 0 {
                log::warn!("{} tokens have no string; rendered by id", r.missing_tokens);
            }
            r.output
        }
        RenderKind::Histogram => {
            let counts = trace_histogram(&traces, bins).map_err(|e| CliError::Config(e.to_string()))?;
            let mut s = String::from("bin_lo,bin_hi,count\n");
            for (i, c) in counts.iter().enumerate() {
                s.push_str(&format!(
                    "{:.4},{:.4},{c}\n",
                    i as f64 / bins as f64,
                    (i + 1) as f64 / bins as f64
                ));
            }
            s
        }
    };
    match out {
        Some(p) => fs::write(p, text).map_err(|e| io_error(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn serve(spec: &Path, addr: &str, latency_ms: [f64; 3]) -> Result<(), CliError> {
    let model = load_toy(spec)?;
    let [p, s, o] = latency_ms;
    let latency = LatencyModel::new(p / 1e3, s / 1e3, o / 1e3).map_err(|e| CliError::Config(e.to_string()))?;
    let handle = serve_on_device(model, latency, SimulatedDevice::new(), addr)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let stop = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGINT, signal_hook::consts::SIGTERM] {
        signal_hook::flag::register(sig, Arc::clone(&stop)).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    println!("listening on {}", handle.endpoint());
    std::io::stdout().flush().ok();
    while !stop.load(Ordering::Relaxed) {
        thread::sleep(Duration::from_millis(20));
    }
    let drained = handle.shutdown();
    eprintln!("shut down, drained {drained} live sessions");
    Ok(())
}

pub fn show_config(args: &RunArgs) -> Result<(), CliError> {
    let cfg = effective_config(args)?;
    println!("{}", serde_json::to_string_pretty(&cfg.to_json()).expect("config serializes"));
    Ok(())
}
