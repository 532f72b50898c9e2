//! Timing harness comparing a local plaintext solve against the outsourced
//! protocol, split into client-side and worker-side buckets.
//!
//! Each trial times four things separately: the plaintext power iteration
//! (`t_original`), the client's one-time setup (encrypt the matrix, draw the
//! mask, precompute the offset), the client's per-round work (decrypt,
//! unmask, renormalize, build the next query), and the worker's homomorphic
//! folding. Worker and client run in the same process and exchange messages
//! by direct call, so serialization and transport never pollute either
//! bucket. Speedups are always recomputed from the recorded times.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::client::{ClientSession, ProtocolConfig, ProtocolError, RoundOutcome, Verdict};
use crate::linalg::{local_power_iteration, make_test_matrix};
use crate::paillier::Keypair;
use crate::transport::ProtocolMessage;
use crate::worker::{AdversaryPolicy, WorkerState};

/// Parameters of a benchmark campaign.
#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub protocol: ProtocolConfig,
    /// Dominance ratio of the planted matrices (dominant eigenvalue over the
    /// next one); fixed so every size converges in about the same number of
    /// rounds.
    pub dominance: f64,
    /// Run one unrecorded trial per size before measuring.
    pub warmup: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            protocol: ProtocolConfig {
                key_bits: 512,
                ..ProtocolConfig::default()
            },
            dominance: 3.0,
            warmup: true,
        }
    }
}

/// One timed trial. All durations are in seconds of wall-clock time on the
/// monotonic clock; speedups are derived, never stored.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRecord {
    pub n: usize,
    pub trial: u64,
    pub seed: u64,
    /// Plaintext power iteration, start to convergence.
    pub t_original: f64,
    /// Client one-time setup: encode+encrypt the matrix, mask, offset.
    pub setup_s: f64,
    /// Worker handling of the matrix upload (validation and storage).
    pub store_s: f64,
    /// Client per-round work summed over all rounds.
    pub iter_client_s: f64,
    /// Worker per-round homomorphic folding summed over all rounds.
    pub iter_cloud_s: f64,
    /// Final residual check.
    pub verify_s: f64,
    pub iterations: usize,
    /// False when the run ended in anything but Accepted; invalid records are
    /// excluded from medians.
    pub valid: bool,
}

impl BenchRecord {
    /// Total client-side compute: setup + per-round work + verification.
    pub fn t_client(&self) -> f64 {
        self.setup_s + self.iter_client_s + self.verify_s
    }

    /// Total worker-side compute: upload handling + per-round folding.
    pub fn t_cloud(&self) -> f64 {
        self.store_s + self.iter_cloud_s
    }

    /// Local time over client time.
    pub fn speedup_paper(&self) -> f64 {
        self.t_original / self.t_client()
    }

    /// Local time over end-to-end outsourced compute time.
    pub fn speedup_total(&self) -> f64 {
        self.t_original / (self.t_client() + self.t_cloud())
    }

    /// Client-side seconds per round, setup excluded.
    pub fn client_per_round(&self) -> f64 {
        self.iter_client_s / self.iterations.max(1) as f64
    }

    /// Worker-side seconds per round, upload handling excluded.
    pub fn cloud_per_round(&self) -> f64 {
        self.iter_cloud_s / self.iterations.max(1) as f64
    }
}

/// Medians over the valid trials of one matrix size.
#[derive(Debug, Clone, Serialize)]
pub struct SizeSummary {
    pub n: usize,
    pub trials: usize,
    pub invalid: usize,
    pub t_original: f64,
    pub t_client: f64,
    pub t_cloud: f64,
    pub setup_s: f64,
    pub client_per_round: f64,
    pub cloud_per_round: f64,
    pub speedup_paper: f64,
    pub speedup_total: f64,
}

fn run_seed(base: u64, n: usize, trial: u64) -> u64 {
    // splitmix-style spreading so every (size, trial) pair gets its own
    // well-separated stream.
    let mut z = base
        .wrapping_add((n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(trial.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn run_one_trial(
    n: usize,
    trial: u64,
    seed: u64,
    cfg: &BenchConfig,
    keypair: &Keypair,
) -> Result<BenchRecord, ProtocolError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let planted = make_test_matrix(n, cfg.dominance, &mut rng)?;
    let x0 = vec![1.0; n];
    let omega = cfg.protocol.effective_omega(n) as usize;

    let start = Instant::now();
    let local = local_power_iteration(&planted.matrix, &x0, cfg.protocol.eps, omega)?;
    let t_original = start.elapsed().as_secs_f64();

    let mut worker = WorkerState::with_seed(
        keypair.public.clone(),
        AdversaryPolicy::Honest,
        seed ^ 0x5eed,
    );
    let mut record = BenchRecord {
        n,
        trial,
        seed,
        t_original,
        setup_s: 0.0,
        store_s: 0.0,
        iter_client_s: 0.0,
        iter_cloud_s: 0.0,
        verify_s: 0.0,
        iterations: local.iterations,
        valid: false,
    };

    let start = Instant::now();
    let (mut session, store, mut request) = ClientSession::setup(
        planted.matrix,
        &x0,
        cfg.protocol.clone(),
        keypair.clone(),
        &mut rng,
    )?;
    record.setup_s = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let ack = worker.handle(&store);
    record.store_s = start.elapsed().as_secs_f64();
    if !matches!(ack, ProtocolMessage::Ack { .. }) {
        return Ok(record);
    }

    loop {
        let start = Instant::now();
        let reply = worker.handle(&request);
        record.iter_cloud_s += start.elapsed().as_secs_f64();

        let start = Instant::now();
        let outcome = session.ingest_round(&reply)?;
        record.iter_client_s += start.elapsed().as_secs_f64();
        match outcome {
            RoundOutcome::NextRequest(next) => request = next,
            RoundOutcome::ConvergedWith(result) => {
                let start = Instant::now();
                let verdict = session.verify(&result)?;
                record.verify_s = start.elapsed().as_secs_f64();
                record.iterations = result.iterations;
                record.valid = verdict == Verdict::Accepted;
                return Ok(record);
            }
            RoundOutcome::Abort(_) => {
                record.iterations = session.rounds_completed() as usize;
                return Ok(record);
            }
        }
    }
}

/// Runs `trials` timed trials for every size, with one key generated per size
/// outside all timers. Trials are sequential; the worker runs in the same
/// thread as the client.
pub fn run_benchmark(
    sizes: &[usize],
    trials: u64,
    cfg: &BenchConfig,
    base_seed: u64,
) -> Result<Vec<BenchRecord>, ProtocolError> {
    if sizes.is_empty() {
        return Err(ProtocolError::InvalidConfig(
            "benchmark needs at least one matrix size".into(),
        ));
    }
    if trials == 0 {
        return Err(ProtocolError::InvalidConfig(
            "benchmark needs at least one trial".into(),
        ));
    }
    cfg.protocol.validate()?;
    let mut records = Vec::with_capacity(sizes.len() * trials as usize);
    for &n in sizes {
        let mut key_rng = ChaCha20Rng::seed_from_u64(run_seed(base_seed, n, u64::MAX));
        let keypair = Keypair::generate(cfg.protocol.key_bits, &mut key_rng)?;
        if cfg.warmup {
            run_one_trial(n, u64::MAX, run_seed(base_seed, n, u64::MAX - 1), cfg, &keypair)?;
        }
        for trial in 0..trials {
            let seed = run_seed(base_seed, n, trial);
            records.push(run_one_trial(n, trial, seed, cfg, &keypair)?);
        }
    }
    Ok(records)
}

fn median(values: &mut Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("times are finite"));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

/// Per-size medians over the valid records; invalid runs are counted but
/// excluded from every median.
pub fn summarize(records: &[BenchRecord]) -> Vec<SizeSummary> {
    let mut by_size: BTreeMap<usize, Vec<&BenchRecord>> = BTreeMap::new();
    for r in records {
        by_size.entry(r.n).or_default().push(r);
    }
    by_size
        .into_iter()
        .map(|(n, rs)| {
            let valid: Vec<&BenchRecord> = rs.iter().filter(|r| r.valid).copied().collect();
            let med = |f: &dyn Fn(&BenchRecord) -> f64| {
                let mut values: Vec<f64> = valid.iter().map(|r| f(r)).collect();
                median(&mut values)
            };
            SizeSummary {
                n,
                trials: rs.len(),
                invalid: rs.len() - valid.len(),
                t_original: med(&|r| r.t_original),
                t_client: med(&|r| r.t_client()),
                t_cloud: med(&|r| r.t_cloud()),
                setup_s: med(&|r| r.setup_s),
                client_per_round: med(&|r| r.client_per_round()),
                cloud_per_round: med(&|r| r.cloud_per_round()),
                speedup_paper: med(&|r| r.speedup_paper()),
                speedup_total: med(&|r| r.speedup_total()),
            }
        })
        .collect()
}

/// Least-squares slope of `ln(y)` against `ln(x)`: the fitted exponent of a
/// power law through the points.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> f64 {
    assert!(points.len() >= 2, "need at least two points to fit a slope");
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let sx: f64 = logs.iter().map(|p| p.0).sum();
    let sy: f64 = logs.iter().map(|p| p.1).sum();
    let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
    (k * sxy - sx * sy) / (k * sxx - sx * sx)
}

const CSV_HEADER: &str = "n,trial,t_original,t_cloud,t_client,speedup_paper,speedup_total,\
                          iterations,seed,setup_s,store_s,iter_client_s,iter_cloud_s,verify_s,valid";

/// Renders the records as CSV. Floats use the shortest representation that
/// parses back to the identical value.
pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.n,
            r.trial,
            r.t_original,
            r.t_cloud(),
            r.t_client(),
            r.speedup_paper(),
            r.speedup_total(),
            r.iterations,
            r.seed,
            r.setup_s,
            r.store_s,
            r.iter_client_s,
            r.iter_cloud_s,
            r.verify_s,
            r.valid,
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Writes the CSV to `path` and a JSON sidecar (config, environment, and the
/// full records) to `path` with its extension replaced by `.json`.
pub fn write_report(
    records: &[BenchRecord],
    cfg: &BenchConfig,
    path: &Path,
) -> std::io::Result<()> {
    std::fs::write(path, to_csv(records))?;
    let sidecar = serde_json::json!({
        "config": cfg,
        "environment": {
            "os": std::env::consts::OS,
            "arch": std::env::consts::ARCH,
        },
        "records": records,
        "summaries": summarize(records),
    });
    let json_path = path.with_extension("json");
    std::fs::write(
        json_path,
        serde_json::to_string_pretty(&sidecar).expect("report serializes"),
    )
}

/// Plain-text speedup table, one row per size.
pub fn format_speedup_table(summaries: &[SizeSummary]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:>6}  {:>12}  {:>12}  {:>12}  {:>14}",
        "Data", "t_original", "t_cloud", "t_client", "Client Speedup"
    )
    .expect("writing to a String cannot fail");
    for s in summaries {
        writeln!(
            out,
            "{:>6}  {:>12.6}  {:>12.6}  {:>12.6}  {:>14.4}",
            s.n, s.t_original, s.t_cloud, s.t_client, s.speedup_paper
        )
        .expect("writing to a String cannot fail");
    }
    out
}
