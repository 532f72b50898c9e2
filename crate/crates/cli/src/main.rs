//! Command-line front end: key generation, outsourced solves, the worker
//! daemon, and the timing benchmark.
//!
//! Exit codes: 0 the result was verified and accepted; 1 the worker's result
//! failed verification (Rejected); 2 the run aborted before verification
//! (transport failure, malformed responses, iteration cap); 3 usage or IO
//! errors.

use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rand::{rngs::OsRng, Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use eigencloud::bench::{format_speedup_table, run_benchmark, summarize, write_report, BenchConfig};
use eigencloud::client::{drive, AbortReason, ProtocolConfig, SolveOutcome, Verdict};
use eigencloud::linalg::DenseMatrix;
use eigencloud::paillier::{Keypair, PublicKey};
use eigencloud::transport::{TcpChannel, TransportError, DEFAULT_PORT};
use eigencloud::worker::{
    run_session, serve_tcp, spawn_in_process, AdversaryPolicy, WorkerState, SESSION_IDLE_TIMEOUT,
};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Parser)]
#[command(
    name = "eigencloud",
    version,
    about = "Outsource dominant-eigenpair computation to an untrusted worker \
             over Paillier-encrypted matrices"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Paillier keypair: private key at OUT, public key at OUT.pub.
    Keygen {
        /// Modulus size in bits (minimum 16; use 2048+ for real deployments).
        #[arg(long, default_value_t = 2048)]
        bits: u64,
        /// Private key file path; the public key lands next to it as OUT.pub.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite existing key files.
        #[arg(long)]
        force: bool,
    },
    /// Solve for the dominant eigenpair of a matrix via an untrusted worker.
    Solve {
        /// Matrix file: first line n, then n rows of n reals.
        #[arg(long)]
        matrix: PathBuf,
        /// Private key file (from keygen).
        #[arg(long)]
        key: PathBuf,
        /// Convergence threshold on the iterate step.
        #[arg(long, default_value_t = 1e-9)]
        eps: f64,
        /// Iteration cap; default 10n+1000.
        #[arg(long)]
        omega: Option<u64>,
        /// Multiply each outgoing query by a fresh random scalar.
        #[arg(long, value_parser = parse_on_off, action = clap::ArgAction::Set, value_name = "on|off", default_value = "on")]
        scaling: bool,
        /// Worker to use: "inproc" or "tcp:HOST:PORT".
        #[arg(long, default_value = "inproc")]
        worker: String,
        /// Emit the outcome as JSON instead of human-readable text.
        #[arg(long)]
        json: bool,
        /// Fractional bits of the fixed-point encoding.
        #[arg(long, default_value_t = 40)]
        frac_bits: u32,
        /// Bit width of each additive mask component.
        #[arg(long, default_value_t = 128)]
        mask_bits: u32,
        /// Relative tolerance of the final residual check.
        #[arg(long, default_value_t = 1e-6)]
        verify_tol: f64,
        /// Seed for all client randomness (default: OS entropy).
        #[arg(long)]
        seed: Option<u64>,
        /// Allow masks shorter than 128 bits (testing only).
        #[arg(long)]
        insecure: bool,
    },
    /// Serve worker sessions over TCP until interrupted.
    Worker {
        /// Port to listen on (binds 127.0.0.1).
        #[arg(long, default_value_t = DEFAULT_PORT)]
        listen: u16,
        /// Public key file. A private key file is refused: the worker must
        /// never hold decryption capability.
        #[arg(long)]
        pubkey: PathBuf,
        /// honest | tamper:RHO:DELTA | arbitrary | lazy
        #[arg(long, default_value = "honest")]
        policy: String,
        /// Exit after this many sessions (default: serve forever).
        #[arg(long)]
        max_sessions: Option<u64>,
        /// Seed for adversarial randomness (default: OS entropy).
        #[arg(long)]
        seed: Option<u64>,
        /// Fixed-point fractional bits assumed by the tamper policy.
        #[arg(long, default_value_t = 40)]
        frac_bits: u32,
    },
    /// Time local vs outsourced solves over planted matrices.
    Bench {
        /// Comma-separated matrix sizes, e.g. 50,100,200.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        /// Timed trials per size (medians are reported).
        #[arg(long, default_value_t = 5)]
        trials: u64,
        /// CSV report path; a JSON sidecar lands next to it as OUT with a
        /// .json extension. Without --out only the table is printed.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        key_bits: u64,
        /// Dominance ratio of the planted matrices.
        #[arg(long, default_value_t = 3.0)]
        dominance: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-9)]
        eps: f64,
        #[arg(long, default_value_t = 40)]
        frac_bits: u32,
        #[arg(long, default_value_t = 128)]
        mask_bits: u32,
        #[arg(long, value_parser = parse_on_off, action = clap::ArgAction::Set, value_name = "on|off", default_value = "on")]
        scaling: bool,
        #[arg(long, default_value_t = 1e-6)]
        verify_tol: f64,
        /// Allow masks shorter than 128 bits (testing only).
        #[arg(long)]
        insecure: bool,
        /// Skip the unrecorded warm-up trial per size.
        #[arg(long)]
        no_warmup: bool,
    },
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected \"on\" or \"off\", got {other:?}")),
    }
}

fn main() {
    let code = match Cli::try_parse() {
        Ok(cli) => run(cli),
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = err.print();
            code
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> i32 {
    let result = match cli.cmd {
        Command::Keygen { bits, out, force } => cmd_keygen(bits, &out, force),
        Command::Solve {
            matrix,
            key,
            eps,
            omega,
            scaling,
            worker,
            json,
            frac_bits,
            mask_bits,
            verify_tol,
            seed,
            insecure,
        } => cmd_solve(SolveArgs {
            matrix,
            key,
            eps,
            omega,
            scaling,
            worker,
            json,
            frac_bits,
            mask_bits,
            verify_tol,
            seed,
            insecure,
        }),
        Command::Worker {
            listen,
            pubkey,
            policy,
            max_sessions,
            seed,
            frac_bits,
        } => cmd_worker(listen, &pubkey, &policy, max_sessions, seed, frac_bits),
        Command::Bench {
            sizes,
            trials,
            out,
            key_bits,
            dominance,
            seed,
            eps,
            frac_bits,
            mask_bits,
            scaling,
            verify_tol,
            insecure,
            no_warmup,
        } => cmd_bench(BenchArgs {
            sizes,
            trials,
            out,
            key_bits,
            dominance,
            seed,
            eps,
            frac_bits,
            mask_bits,
            scaling,
            verify_tol,
            insecure,
            no_warmup,
        }),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            3
        }
    }
}

fn client_rng(seed: Option<u64>) -> ChaCha20Rng {
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::seed_from_u64(OsRng.gen()),
    }
}

fn cmd_keygen(bits: u64, out: &Path, force: bool) -> Result<i32, String> {
    let pub_path = PathBuf::from(format!("{}.pub", out.display()));
    if !force {
        for p in [out, pub_path.as_path()] {
            if p.exists() {
                return Err(format!(
                    "refusing to overwrite {}; pass --force to replace it",
                    p.display()
                ));
            }
        }
    }
    let mut rng = ChaCha20Rng::from_rng(OsRng).map_err(|e| e.to_string())?;
    let keypair = Keypair::generate(bits, &mut rng).map_err(|e| e.to_string())?;

    std::fs::write(out, keypair.to_json()).map_err(|e| format!("{}: {e}", out.display()))?;
    restrict_permissions(out)?;
    std::fs::write(&pub_path, keypair.public.to_json())
        .map_err(|e| format!("{}: {e}", pub_path.display()))?;

    // Sanity: one encrypt/decrypt roundtrip with the freshly minted key.
    let probe = num_bigint::BigUint::from(0x5a5au32) % keypair.public.n();
    let ct = keypair
        .public
        .encrypt(&probe, &mut rng)
        .map_err(|e| e.to_string())?;
    let back = keypair.decrypt(&ct).map_err(|e| e.to_string())?;
    if back != probe {
        return Err("encrypt/decrypt roundtrip failed on the new key".into());
    }

    let mut stdout = std::io::stdout();
    writeln!(
        stdout,
        "private key: {}\npublic key: {}\nsanity check: encrypt/decrypt roundtrip ok ({}-bit modulus)",
        out.display(),
        pub_path.display(),
        keypair.public.n().bits()
    )
    .map_err(|e| e.to_string())?;
    Ok(0)
}

#[cfg(unix)]
fn restrict_permissions(path: &Path) -> Result<(), String> {
    use std::os::unix::fs::PermissionsExt;
    std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600))
        .map_err(|e| format!("{}: {e}", path.display()))
}

#[cfg(not(unix))]
fn restrict_permissions(_path: &Path) -> Result<(), String> {
    Ok(())
}

struct SolveArgs {
    matrix: PathBuf,
    key: PathBuf,
    eps: f64,
    omega: Option<u64>,
    scaling: bool,
    worker: String,
    json: bool,
    frac_bits: u32,
    mask_bits: u32,
    verify_tol: f64,
    seed: Option<u64>,
    insecure: bool,
}

fn cmd_solve(args: SolveArgs) -> Result<i32, String> {
    let matrix = DenseMatrix::read_text_file(&args.matrix)
        .map_err(|e| format!("{}: {e}", args.matrix.display()))?;
    let key_text = std::fs::read_to_string(&args.key)
        .map_err(|e| format!("{}: {e}", args.key.display()))?;
    let keypair = Keypair::from_json(&key_text).map_err(|e| {
        format!(
            "{}: {e} (solve needs the private key file; the .pub file only works for the worker)",
            args.key.display()
        )
    })?;
    let cfg = ProtocolConfig {
        eps: args.eps,
        omega: args.omega,
        mask_bits: args.mask_bits,
        use_scaling: args.scaling,
        verify_tol: args.verify_tol,
        key_bits: keypair.public.n().bits(),
        frac_bits: args.frac_bits,
        secure_profile: !args.insecure,
    };
    let x0 = vec![1.0; matrix.dim()];
    let mut rng = client_rng(args.seed);

    let outcome = if args.worker == "inproc" {
        let (mut channel, handle) = spawn_in_process(
            keypair.public.clone(),
            AdversaryPolicy::Honest,
            args.seed.unwrap_or(0) ^ 0x10ca1,
        );
        let outcome = drive(matrix, &x0, cfg, keypair, &mut channel, &mut rng)
            .map_err(|e| e.to_string())?;
        drop(channel);
        let _ = handle.join();
        outcome
    } else if let Some(addr) = args.worker.strip_prefix("tcp:") {
        match TcpChannel::connect(addr, CONNECT_TIMEOUT) {
            Ok(mut channel) => drive(matrix, &x0, cfg, keypair, &mut channel, &mut rng)
                .map_err(|e| e.to_string())?,
            Err(err) => return report_connect_failure(err, args.json),
        }
    } else {
        return Err(format!(
            "unknown worker {:?}: expected \"inproc\" or \"tcp:HOST:PORT\"",
            args.worker
        ));
    };

    let mut stdout = std::io::stdout();
    if args.json {
        writeln!(
            stdout,
            "{}",
            serde_json::to_string_pretty(&outcome).map_err(|e| e.to_string())?
        )
        .map_err(|e| e.to_string())?;
    } else {
        writeln!(stdout, "{}", render_outcome(&outcome)).map_err(|e| e.to_string())?;
    }
    Ok(exit_code(&outcome.verdict))
}

fn report_connect_failure(err: TransportError, json: bool) -> Result<i32, String> {
    let verdict = Verdict::Aborted(AbortReason::Transport(err));
    let mut stdout = std::io::stdout();
    if json {
        let body = serde_json::json!({ "verdict": verdict });
        writeln!(
            stdout,
            "{}",
            serde_json::to_string_pretty(&body).map_err(|e| e.to_string())?
        )
        .map_err(|e| e.to_string())?;
    } else {
        writeln!(stdout, "verdict: {}", describe_verdict(&verdict)).map_err(|e| e.to_string())?;
    }
    Ok(2)
}

fn exit_code(verdict: &Verdict) -> i32 {
    match verdict {
        Verdict::Accepted => 0,
        Verdict::Rejected => 1,
        Verdict::Aborted(_) => 2,
    }
}

fn describe_verdict(verdict: &Verdict) -> String {
    match verdict {
        Verdict::Accepted => "accepted".into(),
        Verdict::Rejected => "rejected (the worker's result failed verification)".into(),
        Verdict::Aborted(reason) => format!("aborted ({reason})"),
    }
}

/// Ten significant digits: full precision lives in --json.
fn sig10(x: f64) -> String {
    format!("{x:.9e}")
}

fn render_outcome(outcome: &SolveOutcome) -> String {
    let vector = outcome
        .result
        .eigenvector
        .iter()
        .map(|v| sig10(*v))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        "verdict: {}\neigenvalue: {}\neigenvector: [{}]\niterations: {}\nrounds: {}\ntranscript: {}",
        describe_verdict(&outcome.verdict),
        sig10(outcome.result.eigenvalue),
        vector,
        outcome.result.iterations,
        outcome.rounds,
        outcome.transcript_digest,
    )
}

fn parse_policy(s: &str, frac_bits: u32) -> Result<AdversaryPolicy, String> {
    match s {
        "honest" => Ok(AdversaryPolicy::Honest),
        "arbitrary" => Ok(AdversaryPolicy::Arbitrary),
        "lazy" => Ok(AdversaryPolicy::Lazy),
        other => {
            let rest = other
                .strip_prefix("tamper:")
                .ok_or_else(|| format!("unknown policy {other:?}"))?;
            let (rho_s, delta_s) = rest
                .split_once(':')
                .ok_or_else(|| "tamper policy needs tamper:RHO:DELTA".to_string())?;
            let rho: f64 = rho_s
                .parse()
                .map_err(|e| format!("bad tamper probability {rho_s:?}: {e}"))?;
            let delta: f64 = delta_s
                .parse()
                .map_err(|e| format!("bad tamper magnitude {delta_s:?}: {e}"))?;
            if !(0.0..=1.0).contains(&rho) {
                return Err(format!("tamper probability must be in [0,1], got {rho}"));
            }
            if !delta.is_finite() || delta <= 0.0 {
                return Err(format!("tamper magnitude must be positive, got {delta}"));
            }
            Ok(AdversaryPolicy::Tamper {
                rho,
                delta,
                frac_bits,
            })
        }
    }
}

fn cmd_worker(
    listen: u16,
    pubkey: &Path,
    policy: &str,
    max_sessions: Option<u64>,
    seed: Option<u64>,
    frac_bits: u32,
) -> Result<i32, String> {
    let key_text =
        std::fs::read_to_string(pubkey).map_err(|e| format!("{}: {e}", pubkey.display()))?;
    if Keypair::from_json(&key_text).is_ok() {
        return Err(format!(
            "{} contains a PRIVATE key; the worker only ever takes the public half (.pub file)",
            pubkey.display()
        ));
    }
    let pk = PublicKey::from_json(&key_text).map_err(|e| format!("{}: {e}", pubkey.display()))?;
    let policy = parse_policy(policy, frac_bits)?;
    let listener = TcpListener::bind(("127.0.0.1", listen))
        .map_err(|e| format!("cannot listen on 127.0.0.1:{listen}: {e}"))?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;

    // The line is load-bearing for scripts that wait for readiness, so flush
    // past the pipe buffering.
    let mut stdout = std::io::stdout();
    writeln!(stdout, "listening on {addr} (policy: {policy:?})").map_err(|e| e.to_string())?;
    stdout.flush().map_err(|e| e.to_string())?;

    match seed {
        None => serve_tcp(listener, pk, policy, max_sessions, true).map_err(|e| e.to_string())?,
        Some(seed) => {
            serve_tcp_seeded(listener, pk, policy, max_sessions, seed).map_err(|e| e.to_string())?
        }
    }
    Ok(0)
}

/// Like [`serve_tcp`] but with per-session worker randomness derived from a
/// base seed, so adversarial behaviour is reproducible across runs.
fn serve_tcp_seeded(
    listener: TcpListener,
    pk: PublicKey,
    policy: AdversaryPolicy,
    max_sessions: Option<u64>,
    seed: u64,
) -> std::io::Result<()> {
    let mut accepted = 0u64;
    let mut handles = Vec::new();
    for conn in listener.incoming() {
        let stream = conn?;
        let peer = stream
            .peer_addr()
            .map(|a| a.to_string())
            .unwrap_or_else(|_| "unknown peer".into());
        let pk = pk.clone();
        let policy = policy.clone();
        let session_seed = seed.wrapping_add(accepted.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        handles.push(std::thread::spawn(move || {
            let mut channel = TcpChannel::from_stream(stream);
            let mut state = WorkerState::with_seed(pk, policy, session_seed);
            match run_session(&mut channel, &mut state, SESSION_IDLE_TIMEOUT) {
                Ok(stats) => eprintln!(
                    "session {} ({peer}): {} rounds served",
                    stats.session_id.as_deref().unwrap_or("(no messages)"),
                    stats.rounds
                ),
                Err(e) => eprintln!("session ({peer}) aborted: {e}"),
            }
        }));
        accepted += 1;
        if max_sessions.is_some_and(|max| accepted >= max) {
            break;
        }
    }
    for handle in handles {
        let _ = handle.join();
    }
    Ok(())
}

struct BenchArgs {
    sizes: Vec<usize>,
    trials: u64,
    out: Option<PathBuf>,
    key_bits: u64,
    dominance: f64,
    seed: u64,
    eps: f64,
    frac_bits: u32,
    mask_bits: u32,
    scaling: bool,
    verify_tol: f64,
    insecure: bool,
    no_warmup: bool,
}

fn cmd_bench(args: BenchArgs) -> Result<i32, String> {
    let cfg = BenchConfig {
        protocol: ProtocolConfig {
            eps: args.eps,
            omega: None,
            mask_bits: args.mask_bits,
            use_scaling: args.scaling,
            verify_tol: args.verify_tol,
            key_bits: args.key_bits,
            frac_bits: args.frac_bits,
            secure_profile: !args.insecure,
        },
        dominance: args.dominance,
        warmup: !args.no_warmup,
    };
    let records = run_benchmark(&args.sizes, args.trials, &cfg, args.seed)
        .map_err(|e| e.to_string())?;
    let mut stdout = std::io::stdout();
    write!(stdout, "{}", format_speedup_table(&summarize(&records)))
        .map_err(|e| e.to_string())?;
    if let Some(path) = &args.out {
        write_report(&records, &cfg, path).map_err(|e| format!("{}: {e}", path.display()))?;
        writeln!(
            stdout,
            "report: {} (sidecar: {})",
            path.display(),
            path.with_extension("json").display()
        )
        .map_err(|e| e.to_string())?;
    }
    stdout.flush().map_err(|e| e.to_string())?;
    Ok(0)
}
