use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use sha2::{Digest, Sha256};

use cmm_core::config::{ClockSource, PipelineConfig};
use cmm_core::detect::DetectorBackend;
use cmm_core::eval::{
    format_report_kv, format_report_text, latency_report, parse_counts, ClockDomains, StageTimings,
};
use cmm_core::geoloc::{
    estimate_ecef_transform, format_gcps, read_gcps, EcefPos, GcpCorrespondence,
};
use cmm_core::geometry::RigidTransform;
use cmm_core::onboard::{emit_render, reconstruct_frame, EgoGpsSimulator};
use cmm_core::pipeline::{wall_clock, EdgePipeline};
use cmm_core::scene::{read_frames, read_truth, simulate, write_frames, write_truth, TruthFrame};
use cmm_core::wire::relay::{start_relay, Publisher, RelayConfig, Subscriber};
use cmm_core::wire::{decode_frame, read_frame_bytes, stamp_phase, Phase, PhaseStamps, WireError};

#[derive(Parser, Debug)]
#[command(name = "cmm", version, about = "Roadside perception, relay and onboard reconstruction")]
struct Cli {
    /// Pipeline config file (TOML); defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Appends every perception message as one JSON object per line.
    #[arg(long, global = true)]
    tap: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClockArg {
    Wall,
    Frame,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Oracle,
    Cluster,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a scenario; writes frames.cmmf, truth.cmmg and gcps.txt.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Overrides scene.duration, seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Run the edge pipeline over a frame file.
    Perceive {
        #[arg(long)]
        frames: PathBuf,
        /// Ground-truth file; required by the oracle detector.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Publish frames to this relay endpoint.
        #[arg(long)]
        relay: Option<String>,
        /// Write encoded frames back to back into this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        clock: Option<ClockArg>,
        #[arg(long, value_enum)]
        detector: Option<BackendArg>,
        /// Pause this long between frames, seconds.
        #[arg(long, default_value_t = 0.0)]
        interval: f64,
    },
    /// Serve the frame relay until killed.
    Relay {
        /// Overrides relay.bind.
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        max_subscribers: Option<usize>,
    },
    /// Subscribe to the relay and write one render document per frame.
    Onboard {
        #[arg(long)]
        out: PathBuf,
        /// Overrides onboard.connect.
        #[arg(long)]
        connect: Option<String>,
        /// Exit after this many frames.
        #[arg(long)]
        max_frames: Option<u64>,
        /// Exit when no frame arrives for this many seconds.
        #[arg(long)]
        idle_timeout: Option<f64>,
    },
    /// Score a run against ground truth, or report from tabulated counts.
    Eval {
        #[arg(long, required_unless_present = "counts")]
        truth: Option<PathBuf>,
        /// Encoded frame file written by `perceive --out`.
        #[arg(long, required_unless_present = "counts")]
        results: Option<PathBuf>,
        /// `tp`, `fp` and `gt` as key = value lines.
        #[arg(long, conflicts_with_all = ["truth", "results"])]
        counts: Option<PathBuf>,
        /// Also write the key-value report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Time the cluster pipeline on synthetic dense frames.
    Bench {
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 20_000)]
        points: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let name = subcommand_name(&cli.command);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cmm {name}: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate { .. } => "simulate",
        Command::Perceive { .. } => "perceive",
        Command::Relay { .. } => "relay",
        Command::Onboard { .. } => "onboard",
        Command::Eval { .. } => "eval",
        Command::Bench { .. } => "bench",
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let mut tap = match &cli.tap {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating tap file {}", p.display()))?,
        )),
        None => None,
    };
    match cli.command {
        Command::Simulate { out, duration } => {
            if let Some(d) = duration {
                cfg.scene.duration = d;
            }
            cfg.validate()?;
            cmd_simulate(&cfg, &out)
        }
        Command::Perceive {
            frames,
            truth,
            relay,
            out,
            clock,
            detector,
            interval,
        } => {
            if let Some(c) = clock {
                cfg.perceive.clock = match c {
                    ClockArg::Wall => ClockSource::Wall,
                    ClockArg::Frame => ClockSource::Frame,
                };
            }
            if let Some(b) = detector {
                cfg.detector.backend = match b {
                    BackendArg::Oracle => DetectorBackend::Oracle,
                    BackendArg::Cluster => DetectorBackend::Cluster,
                };
            }
            let source = PerceiveSource { frames, truth };
            let sink = PerceiveSink { relay, out, interval };
            cmd_perceive(&cfg, &source, &sink, tap.as_mut())
        }
        Command::Relay { bind, max_subscribers } => {
            if let Some(b) = bind {
                cfg.relay.bind = b;
            }
            if let Some(m) = max_subscribers {
                cfg.relay.max_subscribers = m;
            }
            cfg.validate()?;
            cmd_relay(&cfg)
        }
        Command::Onboard {
            out,
            connect,
            max_frames,
            idle_timeout,
        } => {
            if let Some(c) = connect {
                cfg.onboard.connect = c;
            }
            cmd_onboard(&cfg, &out, max_frames, idle_timeout, tap.as_mut())
        }
        Command::Eval {
            truth,
            results,
            counts,
            report,
        } => cmd_eval(&cfg, truth, results, counts, report),
        Command::Bench { frames, points, report } => cmd_bench(&cfg, frames, points, report),
    }
}

/// Ground-level and elevated survey points around the sensor, in world ENU.
fn survey_points() -> Vec<Vector3<f64>> {
    let mut pts = Vec::new();
    for &(x, y) in &[(-40.0, -40.0), (40.0, -40.0), (40.0, 40.0), (-40.0, 40.0), (0.0, 25.0), (-25.0, 0.0)] {
        pts.push(Vector3::new(x, y, 0.0));
    }
    pts.push(Vector3::new(15.0, 15.0, 6.0));
    pts.push(Vector3::new(-15.0, 30.0, 3.0));
    pts
}

fn surveyed_gcps(cfg: &PipelineConfig) -> Vec<GcpCorrespondence> {
    let to_l = cfg.scene.sensor.pose();
    let to_ecef = cfg.world_to_ecef();
    survey_points()
        .iter()
        .map(|p| GcpCorrespondence {
            lidar_point: to_l.apply_point(p),
            ecef_point: EcefPos::from_vector(&to_ecef.apply_point(p)),
        })
        .collect()
}

fn cmd_simulate(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let truth = simulate(&cfg.scenario()?).context("scene")?;
    let frames: Vec<_> = truth.iter().map(|t| t.frame.clone()).collect();
    write_frames(&frames, out.join("frames.cmmf")).context("writing frames")?;
    write_truth(&truth, out.join("truth.cmmg")).context("writing ground truth")?;
    let gcps = format!(
        "# lidar x y z, ecef X Y Z\n{}",
        format_gcps(&surveyed_gcps(cfg))
    );
    fs::write(out.join("gcps.txt"), gcps).context("writing gcps")?;
    println!(
        "simulated {} frames, {} agents, {} points",
        truth.len(),
        cfg.scene.agents.len(),
        frames.iter().map(|f| f.len()).sum::<usize>()
    );
    Ok(())
}

struct PerceiveSource {
    frames: PathBuf,
    truth: Option<PathBuf>,
}

struct PerceiveSink {
    relay: Option<String>,
    out: Option<PathBuf>,
    interval: f64,
}

fn sensor_to_ecef(cfg: &PipelineConfig) -> Result<RigidTransform> {
    if cfg.geoloc.gcp_file.is_empty() {
        return Ok(cfg.surveyed_sensor_to_ecef());
    }
    let gcps = read_gcps(&cfg.geoloc.gcp_file).context("geolocalization: reading GCP file")?;
    let fit = estimate_ecef_transform(&gcps).context("geolocalization: GCP fit")?;
    log::info!("GCP fit over {} points, rms {:.4} m", gcps.len(), fit.rms);
    Ok(fit.transform)
}

fn write_tap(tap: Option<&mut BufWriter<File>>, msgs: &[cmm_core::wire::PerceptionMessage]) -> Result<()> {
    if let Some(w) = tap {
        for m in msgs {
            writeln!(w, "{}", m.to_json_line()).context("writing tap")?;
        }
    }
    Ok(())
}

fn cmd_perceive(
    cfg: &PipelineConfig,
    source: &PerceiveSource,
    sink: &PerceiveSink,
    mut tap: Option<&mut BufWriter<File>>,
) -> Result<()> {
    cfg.validate()?;
    let frames = read_frames(&source.frames)
        .with_context(|| format!("reading frames {}", source.frames.display()))?;
    let truth: Option<Vec<TruthFrame>> = match &source.truth {
        Some(p) => Some(read_truth(p).with_context(|| format!("reading ground truth {}", p.display()))?),
        None => None,
    };
    if cfg.detector.backend == DetectorBackend::Oracle && truth.is_none() && !frames.is_empty() {
        bail!("detection: the oracle backend needs --truth");
    }
    let mut publisher = match &sink.relay {
        Some(addr) => Some(Publisher::connect(addr.as_str()).with_context(|| format!("connecting to relay {addr}"))?),
        None => None,
    };
    let mut out = match &sink.out {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let mut pipe = EdgePipeline::new(cfg, sensor_to_ecef(cfg)?)?;
    let mut stamps = Vec::with_capacity(frames.len());
    let mut timings = Vec::with_capacity(frames.len());
    for (k, frame) in frames.iter().enumerate() {
        let t_sensor = cmm_core::pipeline::clock_now(cfg.perceive.clock, frame.t);
        let agents = match &truth {
            Some(tf) => {
                let f = tf
                    .get(k)
                    .filter(|f| f.frame.t == frame.t)
                    .with_context(|| format!("ground truth has no frame at t = {}", frame.t))?;
                Some(f.agents.as_slice())
            }
            None => None,
        };
        let result = pipe
            .process(frame, agents, t_sensor)
            .with_context(|| format!("frame {k} (t = {})", frame.t))?;
        if let Some(p) = publisher.as_mut() {
            p.send(&result.bytes).context("publishing to relay")?;
        }
        if let Some(w) = out.as_mut() {
            w.write_all(&result.bytes).context("writing frames")?;
        }
        write_tap(tap.as_deref_mut(), &result.messages)?;
        stamps.push(result.stamps);
        timings.push(result.timings);
        if sink.interval > 0.0 {
            thread::sleep(Duration::from_secs_f64(sink.interval));
        }
    }
    if let Some(mut w) = out {
        w.flush().context("writing frames")?;
    }
    if let Some(w) = tap {
        w.flush().context("writing tap")?;
    }
    println!("perceived {} frames", frames.len());
    if !stamps.is_empty() {
        let r = latency_report(&stamps, &timings, ClockDomains::single())?;
        print!("{}", format_report_text(None, Some(&r), None));
    }
    Ok(())
}

fn cmd_relay(cfg: &PipelineConfig) -> Result<()> {
    let handle = start_relay(
        cfg.relay.bind.as_str(),
        RelayConfig {
            max_subscribers: cfg.relay.max_subscribers,
            queue_len: cfg.relay.queue_len,
        },
    )
    .with_context(|| format!("binding {}", cfg.relay.bind))?;
    println!("relay listening on {}", handle.local_addr());
    std::io::stdout().flush().ok();
    let mut last = 0;
    loop {
        thread::sleep(Duration::from_millis(200));
        let n = handle.frames_relayed();
        if n != last {
            log::info!("relay: {n} frames, {} subscribers", handle.subscriber_count());
            last = n;
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_onboard(
    cfg: &PipelineConfig,
    out: &Path,
    max_frames: Option<u64>,
    idle_timeout: Option<f64>,
    mut tap: Option<&mut BufWriter<File>>,
) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let map = cfg.pixel_map()?;
    let ego_sim = EgoGpsSimulator::new(
        cfg.scenario()?,
        cfg.onboard.ego_agent,
        cfg.scene.origin.geodetic(),
        cfg.onboard.gps_sigma,
        cfg.seed,
    )?;
    let mut sub = Subscriber::connect(cfg.onboard.connect.as_str())
        .with_context(|| format!("connecting to relay {}", cfg.onboard.connect))?;
    if let Some(s) = idle_timeout {
        sub.set_timeout(Some(Duration::from_secs_f64(s)))?;
    }
    println!("onboard subscribed to {}", cfg.onboard.connect);
    std::io::stdout().flush().ok();
    let mut digests = BufWriter::new(File::create(out.join("received.sha256")).context("creating digest log")?);
    let mut stamps = Vec::new();
    let mut received = 0u64;
    while max_frames.is_none_or(|m| received < m) {
        let bytes = match sub.recv() {
            Ok(Some(b)) => b,
            Ok(None) => break,
            Err(WireError::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
            {
                log::info!("onboard: idle timeout");
                break;
            }
            Err(e) => return Err(e).context("receiving from relay"),
        };
        let t_onboard = wall_clock();
        let frame = decode_frame(&bytes).context("decoding frame")?;
        stamps.push(stamp_phase(frame.stamps, Phase::Onboard, t_onboard).unwrap_or(frame.stamps));
        writeln!(digests, "{}", hex(&Sha256::digest(&bytes))).context("writing digest log")?;
        write_tap(tap.as_deref_mut(), &frame.messages)?;
        let ego = ego_sim.latest_at(frame.t_frame)?;
        let mut render = reconstruct_frame(&frame.messages, &ego, &map, &cfg.onboard.viewport);
        render.t = frame.t_frame;
        emit_render(
            &render,
            &map,
            &cfg.onboard.viewport,
            out.join(format!("render_{received:06}.svg")),
        )
        .context("writing render document")?;
        received += 1;
    }
    digests.flush().context("writing digest log")?;
    if let Some(w) = tap {
        w.flush().context("writing tap")?;
    }
    if !stamps.is_empty() {
        let r = latency_report(&stamps, &[], ClockDomains::default())?;
        fs::write(out.join("latency.toml"), format_report_kv(None, Some(&r), None)).context("writing latency report")?;
    }
    println!("onboard received {received} frames");
    Ok(())
}

fn read_wire_frames(path: &Path) -> Result<Vec<cmm_core::wire::WireFrame>> {
    let mut f = std::io::BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    while let Some(bytes) = read_frame_bytes(&mut f).with_context(|| format!("reading {}", path.display()))? {
        out.push(decode_frame(&bytes).with_context(|| format!("frame {} of {}", out.len(), path.display()))?);
    }
    Ok(out)
}

fn cmd_eval(
    cfg: &PipelineConfig,
    truth: Option<PathBuf>,
    results: Option<PathBuf>,
    counts: Option<PathBuf>,
    report: Option<PathBuf>,
) -> Result<()> {
    let (c, switches, latency) = if let Some(p) = counts {
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        (parse_counts(&text)?, None, None)
    } else {
        cfg.validate()?;
        let (tp, rp) = (truth.expect("clap enforces"), results.expect("clap enforces"));
        let gt = read_truth(&tp).with_context(|| format!("reading ground truth {}", tp.display()))?;
        let frames = read_wire_frames(&rp)?;
        let ev = cmm_core::pipeline::evaluate_run(cfg, &gt, &frames)?;
        let stamps: Vec<PhaseStamps> = frames.iter().map(|f| f.stamps).collect();
        let latency = if stamps.is_empty() {
            None
        } else {
            Some(latency_report(&stamps, &[], ClockDomains::single())?)
        };
        (ev.counts, Some(ev.id_switches), latency)
    };
    print!("{}", format_report_text(Some(&c), latency.as_ref(), switches));
    if let Some(p) = report {
        fs::write(&p, format_report_kv(Some(&c), latency.as_ref(), switches))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_bench(cfg: &PipelineConfig, n_frames: usize, points: usize, report: Option<PathBuf>) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.detector.backend = DetectorBackend::Cluster;
    cfg.perceive.clock = ClockSource::Wall;
    cfg.scene.duration = n_frames as f64 * cfg.scene.tick;
    // Size the ground returns so frames carry about `points` points.
    cfg.scene.ground_point_density = 0.0;
    let probe = simulate(&cfg.scenario()?).context("scene")?;
    let agent_pts = probe.first().map_or(0, |f| f.frame.len());
    let side = 2.0 * cmm_core::scene::AREA_HALF_SIDE;
    cfg.scene.ground_point_density = points.saturating_sub(agent_pts) as f64 / (side * side);
    let frames = simulate(&cfg.scenario()?).context("scene")?;
    let mean_pts = frames.iter().map(|f| f.frame.len()).sum::<usize>() as f64 / frames.len().max(1) as f64;

    let relay = start_relay("127.0.0.1:0", RelayConfig::default()).context("starting loopback relay")?;
    let mut sub = Subscriber::connect(relay.local_addr()).context("subscribing")?;
    sub.set_timeout(Some(Duration::from_secs(10)))?;
    let (tx, rx) = mpsc::channel();
    let expected = frames.len();
    let receiver = thread::spawn(move || {
        for _ in 0..expected {
            match sub.recv() {
                Ok(Some(b)) => {
                    let t = wall_clock();
                    if let Ok(f) = decode_frame(&b) {
                        let _ = tx.send(stamp_phase(f.stamps, Phase::Onboard, t).unwrap_or(f.stamps));
                    }
                }
                _ => break,
            }
        }
    });
    let mut publisher = Publisher::connect(relay.local_addr()).context("publishing")?;
    let mut pipe = EdgePipeline::new(&cfg, cfg.surveyed_sensor_to_ecef())?;
    let mut timings: Vec<StageTimings> = Vec::with_capacity(frames.len());
    let start = Instant::now();
    for tf in &frames {
        let out = pipe.process(&tf.frame, None, wall_clock())?;
        publisher.send(&out.bytes).context("publishing")?;
        timings.push(out.timings);
    }
    let elapsed = start.elapsed().as_secs_f64();
    receiver.join().ok();
    let stamps: Vec<PhaseStamps> = rx.try_iter().collect();
    let r = latency_report(&stamps, &timings, ClockDomains::single())?;
    println!(
        "bench: {} frames, {:.0} points/frame mean, {:.3} s, {:.2} Hz sustained",
        frames.len(),
        mean_pts,
        elapsed,
        frames.len() as f64 / elapsed
    );
    print!("{}", format_report_text(None, Some(&r), None));
    if let Some(p) = report {
        let mut kv = format_report_kv(None, Some(&r), None);
        kv.push_str(&format!(
            "[bench]\nframes = {}\nmean_points = {mean_pts:.1}\nelapsed_s = {elapsed:.6}\nsustained_hz = {:.3}\n",
            frames.len(),
            frames.len() as f64 / elapsed
        ));
        fs::write(&p, kv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
