use std::io::{BufRead, BufReader};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};

use bbm92_core::harness::{
    compare_schemes, comparison_csv, run_characterization, run_experiment, simulate_streams, sweep_csv, write_file,
    ExperimentConfig,
};
use bbm92_core::protocol::message::pack_bits;
use bbm92_core::protocol::{alice_session, bob_session, AbortReason, Link, SessionOutcome, TcpTransport};
use bbm92_core::sourcesim::{Party, Scheme};
use bbm92_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ABORT: u8 = 3;
const EXIT_RECONCILIATION: u8 = 4;

#[derive(Parser)]
#[command(name = "bbm92", version, about = "Entanglement-based QKD simulator and key generator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pump-power sweep; writes sweep.csv.
    Run(Common),
    /// Sweep every configured scheme and compare against the conventional
    /// one; writes sweep.csv and comparison.csv.
    Compare(Common),
    /// Fringe, CHSH and tomography runs on one source; writes
    /// characterization.json.
    Characterize(Common),
    /// End-to-end key generation between two processes over TCP; writes
    /// <role>.key and <role>.report.txt per party.
    Keys(KeysArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides [experiment].output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<Scheme>,
    /// Run a single pump power instead of the configured sweep.
    #[arg(long)]
    pump_mw: Option<f64>,
    #[arg(long)]
    duration_s: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Role {
    Alice,
    Bob,
}

#[derive(Args)]
struct KeysArgs {
    #[command(flatten)]
    common: Common,
    /// Run one side only. Without it, both sides are spawned as child
    /// processes.
    #[arg(long, value_enum)]
    role: Option<Role>,
    /// Alice listens here, Bob connects here.
    #[arg(long, default_value = "127.0.0.1:0")]
    addr: String,
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidInput(_) => EXIT_CONFIG,
            Error::ReconciliationFailed(_) => EXIT_RECONCILIATION,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| fail(EXIT_CONFIG, e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.experiment.seeds = vec![seed];
    }
    if let Some(scheme) = common.scheme {
        cfg.experiment.schemes = vec![scheme];
    }
    if let Some(pump) = common.pump_mw {
        cfg.sweep.start_mw = pump;
        cfg.sweep.stop_mw = pump;
    }
    if let Some(d) = common.duration_s {
        cfg.experiment.duration_s = d;
    }
    cfg.validate()?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.experiment.output_dir));
    Ok((cfg, out))
}

fn cmd_run(common: &Common) -> Result<(), Failure> {
    let (cfg, out) = load(common)?;
    let rows = run_experiment(&cfg)?;
    let path = out.join("sweep.csv");
    write_file(&path, &sweep_csv(&cfg, &rows))?;
    println!("{} rows -> {}", rows.len(), path.display());
    Ok(())
}

fn cmd_compare(common: &Common) -> Result<(), Failure> {
    let (cfg, out) = load(common)?;
    let (rows, cmp) = compare_schemes(&cfg)?;
    write_file(out.join("sweep.csv"), &sweep_csv(&cfg, &rows))?;
    write_file(out.join("comparison.csv"), &comparison_csv(&cfg, &cmp))?;
    for p in &cmp.points {
        println!(
            "{:>6.2} mW  {:<12} rate ratio {:.3}  Z:X {:.3} vs {:.3}",
            p.pump_mw, p.scheme, p.ratio, p.balance, p.baseline_balance
        );
    }
    for f in &cmp.fits {
        println!(
            "{:<12} R_sif slope {:.1} ± {:.1} bps/mW",
            f.scheme, f.rate_vs_pump.slope, f.rate_vs_pump.stderr
        );
    }
    println!("-> {}", out.display());
    Ok(())
}

fn cmd_characterize(common: &Common) -> Result<(), Failure> {
    let (cfg, out) = load(common)?;
    let seed = cfg.experiment.seeds[0];
    let rep = run_characterization(&cfg, seed)?;
    let path = out.join("characterization.json");
    let json = serde_json::to_string_pretty(&rep).map_err(|e| fail(EXIT_FAILURE, e.to_string()))?;
    write_file(&path, &(json + "\n"))?;
    for v in &rep.visibilities {
        println!("V_{} = {:.4}", v.basis, v.fit.visibility);
    }
    println!("S = {:.4} ± {:.4}", rep.chsh.s, rep.chsh.stderr);
    println!("F = {:.4}", rep.fidelity);
    println!("-> {}", path.display());
    Ok(())
}

fn report_text(role: Role, cfg: &ExperimentConfig, seed: u64, outcome: &SessionOutcome) -> String {
    let r = &outcome.report;
    let mut lines = vec![
        format!("role = {}", if role == Role::Alice { "alice" } else { "bob" }),
        format!("session_id = {}", r.session_id),
        format!("seed = {seed}"),
        format!("config_sha256 = {}", cfg.hash()),
        format!("sifted_bits = {}", r.sifted_bits),
        format!("sample_bits = {}", r.sample_bits),
        format!("n = {}", r.reconciled_bits),
        format!("q_est = {}", r.qber_estimate),
        format!("leak_bits = {}", r.leak_ec),
        format!("margin_bits = {}", cfg.protocol.margin_bits),
        format!("rate_formula = {}", cfg.experiment.rate_formula),
        format!("l = {}", r.final_key_bits),
        format!("cascade_seed = {}", r.session_id),
        format!(
            "pa_seed = {}",
            r.pa_seed.map(|s| s.to_string()).unwrap_or_default()
        ),
        format!(
            "aborted = {}",
            r.aborted.map(|a| a.as_str()).unwrap_or("")
        ),
    ];
    if let Some(raw) = r.raw_coincidences {
        lines.insert(4, format!("raw_coincidences = {raw}"));
    }
    lines.join("\n") + "\n"
}

fn connect_with_retry(addr: &str) -> Result<TcpStream, Failure> {
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => {
                return Err(fail(EXIT_FAILURE, format!("connecting to {addr}: {e}")))
            }
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    }
}

fn run_role(role: Role, common: &Common, addr: &str) -> Result<(), Failure> {
    let (cfg, out) = load(common)?;
    let seed = cfg.experiment.seeds[0];
    let scheme = cfg.experiment.schemes[0];
    let pump = cfg.sweep.start_mw;
    let streams = simulate_streams(&cfg, scheme, pump, seed)?;
    let params = cfg.session_params(seed);
    let outcome = match role {
        Role::Alice => {
            let listener =
                TcpListener::bind(addr).map_err(|e| fail(EXIT_FAILURE, format!("binding {addr}: {e}")))?;
            let local = listener
                .local_addr()
                .map_err(|e| fail(EXIT_FAILURE, e.to_string()))?;
            // The parent process reads this line to learn the port.
            println!("listening {local}");
            let (stream, _) = listener
                .accept()
                .map_err(|e| fail(EXIT_FAILURE, format!("accept: {e}")))?;
            let mut link = Link::new(TcpTransport::new(stream)?, params.session_id);
            alice_session(&mut link, &streams.timetags(Party::Alice), &params)?
        }
        Role::Bob => {
            let stream = connect_with_retry(addr)?;
            let mut link = Link::new(TcpTransport::new(stream)?, params.session_id);
            bob_session(&mut link, &streams.timetags(Party::Bob))?
        }
    };
    let name = if role == Role::Alice { "alice" } else { "bob" };
    write_key(&out.join(format!("{name}.key")), &outcome.final_key)?;
    write_file(out.join(format!("{name}.report.txt")), &report_text(role, &cfg, seed, &outcome))?;
    println!(
        "{name}: {} final key bits, q_est {:.4}",
        outcome.report.final_key_bits, outcome.report.qber_estimate
    );
    match outcome.report.aborted {
        None => Ok(()),
        Some(AbortReason::ReconciliationFailed) => Err(fail(EXIT_RECONCILIATION, "reconciliation failed")),
        Some(reason) => Err(fail(EXIT_ABORT, format!("session aborted: {}", reason.as_str()))),
    }
}

fn write_key(path: &Path, bits: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, pack_bits(bits)).map_err(|e| Error::io(path, e).into())
}

/// Spawns Alice, learns her port, spawns Bob, and waits for both.
fn cmd_keys_pair(args: &KeysArgs) -> Result<(), Failure> {
    // Surface config errors before spawning anything.
    let (_, out) = load(&args.common)?;
    let exe = std::env::current_exe().map_err(|e| fail(EXIT_FAILURE, e.to_string()))?;
    let mut forwarded: Vec<String> = Vec::new();
    let c = &args.common;
    if let Some(p) = &c.config {
        forwarded.extend(["--config".into(), p.display().to_string()]);
    }
    if let Some(s) = c.seed {
        forwarded.extend(["--seed".into(), s.to_string()]);
    }
    forwarded.extend(["--out".into(), out.display().to_string()]);
    if let Some(s) = c.scheme {
        forwarded.extend(["--scheme".into(), s.to_string()]);
    }
    if let Some(p) = c.pump_mw {
        forwarded.extend(["--pump-mw".into(), p.to_string()]);
    }
    if let Some(d) = c.duration_s {
        forwarded.extend(["--duration-s".into(), d.to_string()]);
    }

    let spawn_err = |e: std::io::Error| fail(EXIT_FAILURE, format!("spawning {}: {e}", exe.display()));
    let mut alice = Command::new(&exe)
        .arg("keys")
        .args(&forwarded)
        .args(["--role", "alice", "--addr", &args.addr])
        .stdout(Stdio::piped())
        .spawn()
        .map_err(spawn_err)?;
    let mut lines = BufReader::new(alice.stdout.take().expect("piped stdout")).lines();
    let addr = match lines.next() {
        Some(Ok(line)) if line.starts_with("listening ") => line["listening ".len()..].to_owned(),
        _ => {
            let status = alice.wait().map_err(spawn_err)?;
            return Err(fail(
                status.code().map_or(EXIT_FAILURE, |c| c as u8),
                "Alice exited before listening",
            ));
        }
    };
    let relay = thread::spawn(move || {
        for line in lines.map_while(Result::ok) {
            println!("{line}");
        }
    });
    let bob = Command::new(&exe)
        .arg("keys")
        .args(&forwarded)
        .args(["--role", "bob", "--addr", &addr])
        .status()
        .map_err(spawn_err)?;
    let alice = alice.wait().map_err(spawn_err)?;
    relay.join().ok();
    for (name, status) in [("alice", alice), ("bob", bob)] {
        if !status.success() {
            let code = status.code().map_or(EXIT_FAILURE, |c| c as u8);
            return Err(fail(code, format!("{name} exited with status {code}")));
        }
    }
    let a = std::fs::read(out.join("alice.key")).map_err(|e| Error::io(out.join("alice.key"), e))?;
    let b = std::fs::read(out.join("bob.key")).map_err(|e| Error::io(out.join("bob.key"), e))?;
    if a != b {
        return Err(fail(EXIT_RECONCILIATION, "final keys differ"));
    }
    println!("keys match ({} bytes) -> {}", a.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Run(c) => cmd_run(c),
        Cmd::Compare(c) => cmd_compare(c),
        Cmd::Characterize(c) => cmd_characterize(c),
        Cmd::Keys(k) => match k.role {
            Some(role) => run_role(role, &k.common, &k.addr),
            None => cmd_keys_pair(k),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("bbm92: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
