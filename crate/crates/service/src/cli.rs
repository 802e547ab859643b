//! `dprt` command line: offline renders, rank visualization, benchmarks and the service.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use dprt_core::engine::{
    render_frame, render_on_ranks, EngineError, RankScene, RenderOptions, RenderStats, ShadeMode,
};
use dprt_core::geom::CameraSpec;
use dprt_core::image::FloatImage;
use dprt_core::scene::{
    generate_uneven_cloud, parse_scene_file, partition_scene, FileStepLoader, FnStepLoader,
    PartitionStrategy, SceneDesc, SceneError, StepLoader, TimestepCache,
};
use dprt_core::transport::{
    connect_socket_rank, init_ranks, Backend, RankEndpoint, TransportConfig,
};

use crate::serve::{run_worker, serve_root, spawn_service, ServeOptions};

#[derive(Debug, Parser)]
#[command(
    name = "dprt",
    version,
    about = "Data-parallel ray tracer with ray queue cycling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render one frame (or one per time step) to a binary PPM.
    Render(RenderArgs),
    /// Render with every hit colored by the rank that owns the triangle.
    Rankviz(RenderArgs),
    /// Render repeatedly for several rank counts and emit per-round records.
    Bench(BenchArgs),
    /// Serve frames to a thin client over TCP or websocket.
    Serve(ServeArgs),
}

/// `seed:n:clusters` for the procedural cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CloudSpec {
    pub seed: u64,
    pub n: usize,
    pub clusters: usize,
}

fn parse_cloud(s: &str) -> Result<CloudSpec, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [seed, n, clusters] = parts[..] else {
        return Err("expected seed:n:clusters".into());
    };
    let num = |v: &str| v.trim().parse::<u64>().map_err(|e| format!("{v:?}: {e}"));
    let spec = CloudSpec {
        seed: num(seed)?,
        n: num(n)? as usize,
        clusters: num(clusters)? as usize,
    };
    if spec.clusters == 0 {
        return Err("clusters must be at least 1".into());
    }
    Ok(spec)
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Scene document (JSON).
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Procedural cloud `seed:n:clusters`.
    #[arg(long, value_parser = parse_cloud)]
    cloud: Option<CloudSpec>,
}

impl Source {
    fn load(&self) -> Result<SceneDesc, SceneError> {
        match (&self.scene, self.cloud) {
            (Some(path), _) => parse_scene_file(path),
            (None, Some(c)) => Ok(generate_uneven_cloud(c.seed, c.n, c.clusters)),
            (None, None) => unreachable!("clap requires a source"),
        }
    }
}

#[derive(Debug, Args)]
struct RankArgs {
    /// Number of ranks.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..=1024))]
    ranks: u32,
    #[arg(long, default_value = "inproc")]
    backend: Backend,
    #[arg(long, default_value = "roundrobin")]
    partition: PartitionStrategy,
    /// Run only this rank in this process (socket backend, with --peers).
    #[arg(long, requires = "peers")]
    rank_id: Option<u32>,
    /// Listen address of every rank, in rank order.
    #[arg(long, value_delimiter = ',', requires = "rank_id")]
    peers: Vec<SocketAddr>,
}

#[derive(Debug, Args)]
struct FrameArgs {
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u32).range(1..=16384))]
    width: u32,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u32).range(1..=16384))]
    height: u32,
    #[arg(long, default_value_t = 1)]
    max_depth: u32,
    #[arg(long, default_value = "shaded")]
    mode: ShadeMode,
    /// Debug: trace each wave on its own rank only.
    #[arg(long)]
    disable_cycling: bool,
}

impl FrameArgs {
    fn options(&self, mode: ShadeMode) -> RenderOptions {
        RenderOptions {
            max_depth: self.max_depth,
            mode,
            disable_cycling: self.disable_cycling,
            record_shadows: false,
        }
    }
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    ranks: RankArgs,
    #[command(flatten)]
    frame: FrameArgs,
    /// Output PPM. With several steps, `{step}` is replaced by the step index.
    #[arg(long)]
    out: PathBuf,
    /// Time steps to render, in order.
    #[arg(long, value_delimiter = ',')]
    steps: Vec<usize>,
    /// Resident time steps.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..))]
    timestep_cache: u32,
    /// Append per-round records here.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    source: Source,
    /// Rank counts to compare.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4",
          value_parser = clap::value_parser!(u32).range(1..=1024))]
    ranks: Vec<u32>,
    #[arg(long, default_value = "inproc")]
    backend: Backend,
    #[arg(long, default_value = "roundrobin")]
    partition: PartitionStrategy,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    frames: u32,
    #[command(flatten)]
    frame: FrameArgs,
    /// Write per-round records here instead of standard output.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    ranks: RankArgs,
    #[arg(long, default_value_t = 7878)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    #[arg(long, default_value_t = 1)]
    max_depth: u32,
    #[arg(long, default_value = "shaded")]
    mode: ShadeMode,
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Pace frames to at least this many milliseconds.
    #[arg(long, default_value_t = 0)]
    min_frame_millis: u64,
    /// Exit after this many client sessions.
    #[arg(long)]
    sessions: Option<usize>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.to_string())
    }
}

/// Runs the command line and returns the process exit code: 0 on success, 2 for usage
/// errors, 1 for anything that fails at run time.
pub fn run_cli<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(sink, "{text}");
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Render(a) => {
            let mode = a.frame.mode;
            render(&a, mode, out)
        }
        Command::Rankviz(a) => render(&a, ShadeMode::RankColor, out),
        Command::Bench(a) => bench(&a, out),
        Command::Serve(a) => serve(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
        Err(Failure::Run(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}

/// The ranks this process drives: all of them, or one of a multi-process socket session.
enum Group {
    Local(Vec<RankEndpoint>),
    Single(RankEndpoint),
}

impl Group {
    fn start(args: &RankArgs, config: &TransportConfig) -> Result<Group, Failure> {
        let ranks = args.ranks as usize;
        let Some(id) = args.rank_id else {
            return Ok(Group::Local(init_ranks(ranks, args.backend, config)?));
        };
        let id = id as usize;
        if args.backend != Backend::Socket {
            return Err(Failure::Usage("--rank-id needs --backend socket".into()));
        }
        if args.peers.len() != ranks {
            return Err(Failure::Usage(format!(
                "--peers lists {} addresses for {ranks} ranks",
                args.peers.len()
            )));
        }
        if id >= ranks {
            return Err(Failure::Usage(format!("--rank-id {id} with {ranks} ranks")));
        }
        let listener = TcpListener::bind(args.peers[id])?;
        Ok(Group::Single(connect_socket_rank(
            id,
            listener,
            &args.peers,
            config,
        )?))
    }

    fn is_root(&self) -> bool {
        match self {
            Group::Local(_) => true,
            Group::Single(ep) => ep.is_root(),
        }
    }

    /// Renders one frame; the image is present on the process that holds rank 0.
    fn render(
        &mut self,
        scene: &SceneDesc,
        strategy: PartitionStrategy,
        cam: &CameraSpec,
        (w, h): (u32, u32),
        opts: &RenderOptions,
    ) -> Result<(Option<FloatImage>, Vec<RenderStats>), EngineError> {
        match self {
            Group::Local(eps) => {
                let partition = partition_scene(scene, eps.len(), strategy)?;
                let scenes = RankScene::split(scene, &partition);
                let (outs, back) = render_on_ranks(std::mem::take(eps), &scenes, cam, w, h, opts)?;
                *eps = back;
                let stats = outs.iter().map(|o| o.stats.clone()).collect();
                Ok((outs.into_iter().next().and_then(|o| o.image), stats))
            }
            Group::Single(ep) => {
                let partition = partition_scene(scene, ep.size(), strategy)?;
                let table = Arc::new(dprt_core::engine::ShadingTable::from_scene(
                    scene, &partition,
                ));
                let rs = RankScene::from_partition(scene, &partition, ep.rank(), table);
                let out = render_frame(ep, &rs, cam, w, h, opts)?;
                Ok((out.image, vec![out.stats]))
            }
        }
    }
}

fn step_path(out: &Path, step: usize) -> PathBuf {
    PathBuf::from(out.to_string_lossy().replace("{step}", &step.to_string()))
}

fn render(a: &RenderArgs, mode: ShadeMode, out: &mut dyn Write) -> Result<(), Failure> {
    if a.steps.len() > 1 && !a.out.to_string_lossy().contains("{step}") {
        return Err(Failure::Usage(
            "--out needs a {step} placeholder when several --steps are given".into(),
        ));
    }
    let base = a.source.load()?;
    let opts = a.frame.options(mode);
    let size = (a.frame.width, a.frame.height);
    let config = TransportConfig::from_env();
    let mut group = Group::start(&a.ranks, &config)?;
    let mut stats_log = a
        .stats
        .as_ref()
        .map(|p| {
            File::options()
                .create(true)
                .append(true)
                .open(p)
                .map(BufWriter::new)
        })
        .transpose()?;

    let mut draw = |scene: &SceneDesc, path: &Path, frame: u64| -> Result<(), Failure> {
        let cam = scene.default_camera(size.0 as f64 / size.1 as f64);
        let (image, stats) = group.render(scene, a.ranks.partition, &cam, size, &opts)?;
        if let Some(log) = &mut stats_log {
            for (rank, s) in stats.iter().enumerate() {
                for r in &s.rounds {
                    writeln!(log, "{}", r.to_line(frame, rank))?;
                }
            }
            log.flush()?;
        }
        if let Some(img) = image {
            img.to_rgb8().write_ppm(path)?;
            writeln!(out, "wrote {} ({})", path.display(), stats[0])?;
        }
        Ok(())
    };

    if a.steps.is_empty() {
        return draw(&base, &a.out, 0);
    }
    let loader: Box<dyn StepLoader> = if !base.time_steps.is_empty() {
        Box::new(FileStepLoader::new(base.time_steps.clone()))
    } else if let Some(c) = a.source.cloud {
        let count = a.steps.iter().max().map_or(0, |m| m + 1);
        Box::new(FnStepLoader::new(count, move |i| {
            Ok(generate_uneven_cloud(c.seed + i as u64, c.n, c.clusters))
        }))
    } else {
        return Err(Failure::Run("scene declares no timeSteps".into()));
    };
    let mut cache = TimestepCache::new(a.timestep_cache as usize, loader);
    for (frame, &step) in a.steps.iter().enumerate() {
        let scene = cache.fetch(step)?;
        draw(&scene, &step_path(&a.out, step), frame as u64)?;
    }
    if group.is_root() {
        let s = cache.stats();
        writeln!(
            out,
            "timestep cache: capacity={} hits={} misses={} evictions={} resident={:?}",
            cache.capacity(),
            s.hits,
            s.misses,
            s.evictions,
            cache.residents()
        )?;
    }
    Ok(())
}

/// Per rank count totals from a bench run.
#[derive(Debug, Clone, PartialEq)]
struct BenchRow {
    ranks: usize,
    rays_per_frame: u64,
    bytes_per_frame: u64,
    millis_per_frame: f64,
}

fn bench(a: &BenchArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let scene = a.source.load()?;
    let opts = a.frame.options(a.frame.mode);
    let (w, h) = (a.frame.width, a.frame.height);
    let cam = scene.default_camera(w as f64 / h as f64);
    let config = TransportConfig::from_env();
    let mut records: Box<dyn Write + '_> = match &a.records {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(&mut *out),
    };
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    for &ranks in &a.ranks {
        let ranks = ranks as usize;
        let partition = partition_scene(&scene, ranks, a.partition)?;
        let scenes = RankScene::split(&scene, &partition);
        let mut eps = init_ranks(ranks, a.backend, &config)?;
        let (mut rays, mut bytes, mut micros) = (0u64, 0u64, 0u64);
        for frame in 0..a.frames as u64 {
            let (outs, back) = render_on_ranks(eps, &scenes, &cam, w, h, &opts)?;
            eps = back;
            let primary: u64 = outs.iter().map(|o| o.stats.primary_nearest_calls()).sum();
            let want = w as u64 * h as u64 * ranks as u64;
            if primary != want {
                violations.push(format!(
                    "R={ranks} frame {frame}: {primary} primary intersections, expected {want}"
                ));
            }
            for (rank, o) in outs.iter().enumerate() {
                let rounds = o.stats.rounds.iter().filter(|r| r.wave == 0).count();
                let want = if opts.disable_cycling { 1 } else { ranks };
                if rounds != want {
                    violations.push(format!(
                        "R={ranks} rank {rank}: primary wave took {rounds} rounds"
                    ));
                }
                for r in &o.stats.rounds {
                    writeln!(records, "ranks={ranks} {}", r.to_line(frame, rank))?;
                }
                rays += o.stats.rays_traced();
                bytes += o.stats.bytes_exchanged();
            }
            micros += outs.iter().map(|o| o.stats.total_micros).max().unwrap_or(0);
        }
        let frames = a.frames as u64;
        rows.push(BenchRow {
            ranks,
            rays_per_frame: rays / frames,
            bytes_per_frame: bytes / frames,
            millis_per_frame: micros as f64 / 1000.0 / frames as f64,
        });
    }
    records.flush()?;
    drop(records);

    for r in &rows {
        writeln!(
            out,
            "summary ranks={} raysPerFrame={} raysPerFramePerRank={} bytesPerFrame={} millisPerFrame={:.3}",
            r.ranks,
            r.rays_per_frame,
            r.rays_per_frame / r.ranks as u64,
            r.bytes_per_frame,
            r.millis_per_frame
        )?;
    }
    if !opts.disable_cycling {
        for pair in rows.windows(2) {
            let (x, y) = (&pair[0], &pair[1]);
            if x.rays_per_frame * y.ranks as u64 != y.rays_per_frame * x.ranks as u64 {
                violations.push(format!(
                    "rays per frame per rank changed from R={} to R={}",
                    x.ranks, y.ranks
                ));
            }
            if y.ranks > x.ranks && y.bytes_per_frame <= x.bytes_per_frame {
                violations.push(format!(
                    "bytes exchanged did not grow from R={} to R={}",
                    x.ranks, y.ranks
                ));
            }
        }
    }
    writeln!(out, "{}", scaling_report(&rows))?;
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::Run(format!(
            "work accounting failed: {}",
            violations.join("; ")
        )))
    }
}

/// Report-only line on how per-frame wall time moves with the rank count.
fn scaling_report(rows: &[BenchRow]) -> String {
    const NOISE: f64 = 0.10;
    let series: Vec<String> = rows
        .iter()
        .map(|r| format!("R={}:{:.3}ms", r.ranks, r.millis_per_frame))
        .collect();
    let non_decreasing = rows
        .windows(2)
        .all(|p| p[1].millis_per_frame >= p[0].millis_per_frame * (1.0 - NOISE));
    format!(
        "scaling millisPerFrame {} nonDecreasingWithinNoise={non_decreasing} (report only)",
        series.join(" ")
    )
}

fn serve(a: &ServeArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let scene = a.source.load()?;
    let opts = ServeOptions {
        render: RenderOptions {
            max_depth: a.max_depth,
            mode: a.mode,
            ..RenderOptions::default()
        },
        stats_log: a.stats.clone(),
        min_frame_millis: a.min_frame_millis,
        max_sessions: a.sessions,
    };
    let config = TransportConfig::from_env();
    let ranks = a.ranks.ranks as usize;

    if a.ranks.rank_id.is_some() {
        let Group::Single(mut ep) = Group::start(&a.ranks, &config)? else {
            unreachable!("rank id selects a single endpoint")
        };
        let partition = partition_scene(&scene, ranks, a.ranks.partition)?;
        let table = Arc::new(dprt_core::engine::ShadingTable::from_scene(
            &scene, &partition,
        ));
        let rs = RankScene::from_partition(&scene, &partition, ep.rank(), table);
        if ep.is_root() {
            let listener = bind(&a.bind, a.port)?;
            writeln!(out, "serving on {}", listener.local_addr()?)?;
            out.flush()?;
            let report = serve_root(
                listener,
                &mut ep,
                &rs,
                &opts,
                Arc::new(AtomicBool::new(false)),
            )?;
            writeln!(out, "{report:?}")?;
        } else {
            let frames = run_worker(&mut ep, &rs, &opts.render)?;
            writeln!(out, "rank {} rendered {frames} frames", ep.rank())?;
        }
        return Ok(());
    }

    let listener = bind(&a.bind, a.port)?;
    writeln!(out, "serving on {}", listener.local_addr()?)?;
    out.flush()?;
    let handle = spawn_service(
        listener,
        &scene,
        ranks,
        a.ranks.backend,
        a.ranks.partition,
        &config,
        opts,
    )?;
    let report = handle.join()?;
    writeln!(
        out,
        "served {} sessions, {} frames, refused {}",
        report.sessions, report.frames, report.refused
    )?;
    Ok(())
}

fn bind(host: &str, port: u16) -> io::Result<TcpListener> {
    TcpListener::bind((host, port))
}
