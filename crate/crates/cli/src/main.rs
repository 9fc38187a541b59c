//! `tla` — run scripts across localities and drive the forward-pass scaling
//! benchmark. The same script runs unmodified on any number of localities,
//! in-process or as one process per locality over sockets; distribution is
//! controlled entirely by flags.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;

use tla_core::comm::FusionConfig;
use tla_core::exec::{calibrate_grain, Scheduler, SchedulerConfig, DEFAULT_GRAIN};
use tla_core::resilience::FaultPolicy;
use tla_core::runtime::{
    bench_scaling, rows_to_csv, run_source, run_source_socket_locality, RunError, RunSettings,
    TransportKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum TransportArg {
    Inproc,
    Socket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum BenchKind {
    Cnn4,
}

/// Distributed array-processing runtime: futurized script execution over
/// tiled arrays, plus the CNN forward-pass scaling benchmark.
#[derive(Parser, Debug)]
#[command(name = "tla", version, about)]
struct Args {
    /// Script to run (`.tla`); omit when using --bench.
    script: Option<PathBuf>,

    /// Number of localities P in the job.
    #[arg(long, default_value_t = 1)]
    localities: usize,

    /// How localities are hosted: threads in one process, or one process
    /// per locality over TCP.
    #[arg(long, value_enum, default_value_t = TransportArg::Inproc)]
    transport: TransportArg,

    /// Worker threads per locality (default: 2 for scripts, 1 in bench mode
    /// so scaling comes from the locality count).
    #[arg(long)]
    threads: Option<usize>,

    /// Grain threshold in elements, or `auto` to calibrate at startup.
    #[arg(long, default_value = "4096")]
    grain: String,

    /// Coalescing threshold in bytes (0 disables fusion).
    #[arg(long, default_value_t = 65536)]
    fusion_bytes: usize,

    /// Coalescing flush interval in milliseconds.
    #[arg(long, default_value_t = 2)]
    fusion_ms: u64,

    /// RNG seed; fixed seed means fully reproducible outputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Resilience policy: `replay:N` or `replicate:K:checksum`.
    #[arg(long)]
    resilience: Option<String>,

    /// Write the merged performance-counter CSV here.
    #[arg(long)]
    counters: Option<PathBuf>,

    /// Run the named benchmark instead of a script.
    #[arg(long, value_enum)]
    bench: Option<BenchKind>,

    /// Benchmark batch size (samples).
    #[arg(long, default_value_t = 8000)]
    batch: usize,

    /// Benchmark world sizes, comma-separated.
    #[arg(long, default_value = "1,2,4,8")]
    plist: String,

    /// Benchmark timed repeats per world size (after one warm-up).
    #[arg(long, default_value_t = 5)]
    repeats: usize,

    /// Write the benchmark CSV here (also printed to stdout).
    #[arg(long)]
    bench_out: Option<PathBuf>,

    /// Socket transport: base TCP port (locality i listens on port + i).
    #[arg(long, default_value_t = 7700)]
    port: u16,

    /// Socket transport: rank of this process (set for worker processes).
    #[arg(long)]
    rank: Option<usize>,

    /// Socket transport: spawn the peer processes locally from rank 0.
    #[arg(long, default_value_t = false)]
    spawn_local: bool,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let args = Args::parse();

    let threads = args.threads.unwrap_or(if args.bench.is_some() { 1 } else { 2 }).max(1);

    let grain = match args.grain.as_str() {
        "auto" => {
            let sched = Scheduler::new(SchedulerConfig::new(threads, DEFAULT_GRAIN));
            let chosen = calibrate_grain(&sched);
            sched.shutdown();
            eprintln!("calibrated grain threshold: {chosen}");
            chosen
        }
        text => match text.parse::<usize>() {
            Ok(g) if g >= 1 => g,
            _ => {
                return fail(
                    2,
                    format!("--grain must be a positive integer or `auto`, got `{text}`"),
                )
            }
        },
    };

    let resilience = match &args.resilience {
        None => None,
        Some(text) => match FaultPolicy::parse(text) {
            Ok(p) => Some(p),
            Err(e) => return fail(2, e),
        },
    };

    if args.localities < 1 {
        return fail(2, "--localities must be at least 1");
    }

    let settings = RunSettings {
        localities: args.localities,
        worker_threads: threads,
        grain_threshold: grain,
        fusion: FusionConfig {
            threshold_bytes: args.fusion_bytes,
            flush_interval: Duration::from_millis(args.fusion_ms),
        },
        seed: args.seed,
        resilience,
    };

    if let Some(bench) = args.bench {
        return run_bench(bench, &args, &settings);
    }

    let script = match &args.script {
        Some(p) => p,
        None => return fail(2, "a script path is required unless --bench is given"),
    };
    let source = match std::fs::read_to_string(script) {
        Ok(s) => s,
        Err(e) => return fail(2, format!("cannot read {}: {e}", script.display())),
    };

    match args.transport {
        TransportArg::Inproc => run_inproc(&source, &args, &settings),
        TransportArg::Socket => run_socket(&source, &args, &settings),
    }
}

fn exit_for(err: &RunError) -> u8 {
    match err {
        RunError::Frontend(_) => 2,
        RunError::Runtime(_) => 3,
    }
}

fn run_inproc(source: &str, args: &Args, settings: &RunSettings) -> ExitCode {
    match run_source(source, settings, TransportKind::InProc) {
        Ok(outcomes) => {
            println!("{}", outcomes[0].value);
            if let Some(path) = &args.counters {
                if let Err(e) = outcomes[0].report.write_file(path) {
                    return fail(3, e);
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(exit_for(&e), e),
    }
}

fn run_socket(source: &str, args: &Args, settings: &RunSettings) -> ExitCode {
    let world = args.localities;
    let addrs: Vec<SocketAddr> = (0..world)
        .map(|i| SocketAddr::from(([127, 0, 0, 1], args.port + i as u16)))
        .collect();

    if let Some(rank) = args.rank {
        // One locality of an externally launched job.
        if rank >= world {
            return fail(2, format!("--rank {rank} outside world {world}"));
        }
        return match run_source_socket_locality(source, rank, world, &addrs, settings) {
            Ok(outcome) => {
                if rank == 0 {
                    println!("{}", outcome.value);
                    if let Some(path) = &args.counters {
                        if let Err(e) = outcome.report.write_file(path) {
                            return fail(3, e);
                        }
                    }
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(exit_for(&e), e),
        };
    }

    if !args.spawn_local {
        return fail(2, "socket transport needs --rank (externally launched) or --spawn-local");
    }

    // Launcher: spawn ranks 1..P as child processes, run rank 0 here.
    let exe = match std::env::current_exe() {
        Ok(p) => p,
        Err(e) => return fail(3, format!("cannot locate executable: {e}")),
    };
    let script = args.script.as_ref().expect("script checked by caller");
    let mut children = Vec::new();
    for rank in 1..world {
        let mut cmd = std::process::Command::new(&exe);
        cmd.arg(script)
            .arg("--localities")
            .arg(world.to_string())
            .arg("--transport")
            .arg("socket")
            .arg("--threads")
            .arg(settings.worker_threads.to_string())
            .arg("--grain")
            .arg(settings.grain_threshold.to_string())
            .arg("--fusion-bytes")
            .arg(settings.fusion.threshold_bytes.to_string())
            .arg("--fusion-ms")
            .arg(settings.fusion.flush_interval.as_millis().to_string())
            .arg("--seed")
            .arg(settings.seed.to_string())
            .arg("--port")
            .arg(args.port.to_string())
            .arg("--rank")
            .arg(rank.to_string());
        if let Some(r) = &args.resilience {
            cmd.arg("--resilience").arg(r);
        }
        match cmd.spawn() {
            Ok(c) => children.push(c),
            Err(e) => return fail(3, format!("cannot spawn rank {rank}: {e}")),
        }
    }

    let mine = run_source_socket_locality(source, 0, world, &addrs, settings);
    let mut status = match mine {
        Ok(outcome) => {
            println!("{}", outcome.value);
            if let Some(path) = &args.counters {
                if let Err(e) = outcome.report.write_file(path) {
                    return fail(3, e);
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(exit_for(&e), e),
    };
    for mut child in children {
        match child.wait() {
            Ok(s) if s.success() => {}
            Ok(s) => status = ExitCode::from(s.code().unwrap_or(3) as u8),
            Err(e) => status = fail(3, format!("child wait: {e}")),
        }
    }
    status
}

fn run_bench(kind: BenchKind, args: &Args, settings: &RunSettings) -> ExitCode {
    let BenchKind::Cnn4 = kind;
    if args.transport == TransportArg::Socket {
        return fail(2, "the benchmark hosts localities as threads (--transport inproc)");
    }
    let p_list: Vec<usize> = match args
        .plist
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
    {
        Ok(v) if !v.is_empty() && v.iter().all(|&p| p >= 1) => v,
        _ => return fail(2, format!("bad --plist `{}`", args.plist)),
    };
    let threads = settings.worker_threads;
    eprintln!(
        "benchmark: reference CNN forward pass, batch {}, plist {:?}, {} repeats, {} thread(s)/locality",
        args.batch, p_list, args.repeats, threads
    );
    match bench_scaling(args.batch, &p_list, args.repeats, args.seed, threads) {
        Ok(rows) => {
            let csv = rows_to_csv(&rows);
            print!("{csv}");
            if let Some(path) = &args.bench_out {
                if let Err(e) = std::fs::write(path, &csv) {
                    return fail(3, format!("write {}: {e}", path.display()));
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(3, e),
    }
}
