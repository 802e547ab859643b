use std::collections::BTreeSet;
use std::path::Path;

use dprt_core::image::Rgb8Image;
use dprt_core::scene::{generate_uneven_cloud, serialize_scene};
use dprt_service::run_cli;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run_cli(
        std::iter::once("dprt").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn one_and_four_ranks_write_identical_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.json");
    std::fs::write(&scene, serialize_scene(&generate_uneven_cloud(6, 700, 3))).unwrap();
    let mut files = Vec::new();
    for (ranks, backend, partition) in [
        ("1", "inproc", "roundrobin"),
        ("4", "inproc", "slab"),
        ("4", "socket", "roundrobin"),
    ] {
        let out = dir
            .path()
            .join(format!("r{ranks}-{backend}-{partition}.ppm"));
        let (code, _, err) = run(&[
            "render",
            "--scene",
            p(&scene),
            "--ranks",
            ranks,
            "--backend",
            backend,
            "--partition",
            partition,
            "--width",
            "40",
            "--height",
            "30",
            "--out",
            p(&out),
        ]);
        assert_eq!(code, 0, "{err}");
        files.push(std::fs::read(out).unwrap());
    }
    assert!(files[0].starts_with(b"P6\n40 30\n255\n"));
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0], files[2]);
}

#[test]
fn rankviz_uses_at_most_one_color_per_rank() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ranks.ppm");
    let (code, _, err) = run(&[
        "rankviz",
        "--cloud",
        "3:900:4",
        "--ranks",
        "3",
        "--partition",
        "roundrobin",
        "--width",
        "48",
        "--height",
        "48",
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 0, "{err}");
    let img = Rgb8Image::decode_ppm(&std::fs::read(out).unwrap()).unwrap();
    let background = generate_uneven_cloud(3, 900, 4).background;
    let bg = background.to_array().map(dprt_core::image::tone_map);
    let colors: BTreeSet<[u8; 3]> = img
        .data
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .filter(|c| *c != bg)
        .collect();
    assert!(!colors.is_empty() && colors.len() <= 3, "{colors:?}");
}

#[test]
fn bench_records_scale_bytes_but_not_rays_per_rank() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.txt");
    let (code, out, err) = run(&[
        "bench",
        "--cloud",
        "2:500:3",
        "--ranks",
        "1,2,4",
        "--frames",
        "2",
        "--width",
        "24",
        "--height",
        "16",
        "--records",
        p(&records),
    ]);
    assert_eq!(code, 0, "{err}");
    let text = std::fs::read_to_string(records).unwrap();
    assert!(text
        .lines()
        .all(|l| l.contains("raysTraced=") && l.contains("bytesExchanged=")));
    assert!(text
        .lines()
        .any(|l| l.starts_with("ranks=4 frame=1 rank=3")));

    let summary: Vec<(u64, u64, u64)> = out
        .lines()
        .filter(|l| l.starts_with("summary"))
        .map(|l| {
            let field = |k: &str| {
                l.split_whitespace()
                    .find_map(|f| f.strip_prefix(k))
                    .unwrap()
                    .parse::<f64>()
                    .unwrap() as u64
            };
            (
                field("ranks="),
                field("raysPerFrame="),
                field("bytesPerFrame="),
            )
        })
        .collect();
    assert_eq!(summary.len(), 3, "{out}");
    let per_rank = summary[0].1;
    for &(r, rays, _) in &summary {
        assert_eq!(rays, per_rank * r);
    }
    assert_eq!(summary[0].2, 0);
    assert!(summary[1].2 > 0 && summary[2].2 > summary[1].2);
    assert!(out.contains("nonDecreasingWithinNoise="), "{out}");
}

#[test]
fn time_steps_go_through_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("step{step}.ppm");
    let (code, stdout, err) = run(&[
        "render",
        "--cloud",
        "5:200:2",
        "--steps",
        "0,1,0,2,1",
        "--timestep-cache",
        "2",
        "--width",
        "16",
        "--height",
        "16",
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 0, "{err}");
    for s in 0..3 {
        assert!(dir.path().join(format!("step{s}.ppm")).exists());
    }
    assert!(
        stdout.contains("hits=1 misses=4 evictions=2 resident=[2, 1]"),
        "{stdout}"
    );
}

#[test]
fn bad_flags_exit_with_usage_code() {
    let cases: &[&[&str]] = &[
        &[],
        &["explode"],
        &["render", "--out", "x.ppm"],
        &[
            "render", "--cloud", "1:10:2", "--scene", "a.json", "--out", "x.ppm",
        ],
        &["render", "--cloud", "1:10", "--out", "x.ppm"],
        &[
            "render", "--cloud", "1:10:2", "--ranks", "0", "--out", "x.ppm",
        ],
        &[
            "render",
            "--cloud",
            "1:10:2",
            "--backend",
            "mpi",
            "--out",
            "x.ppm",
        ],
        &[
            "render",
            "--cloud",
            "1:10:2",
            "--partition",
            "zigzag",
            "--out",
            "x.ppm",
        ],
        &[
            "render", "--cloud", "1:10:2", "--mode", "glossy", "--out", "x.ppm",
        ],
        &[
            "render", "--cloud", "1:10:2", "--steps", "0,1", "--out", "x.ppm",
        ],
        &["bench", "--cloud", "1:10:2", "--ranks", "1,x"],
        &["serve", "--cloud", "1:10:2", "--port", "99999"],
    ];
    for args in cases {
        let (code, _, err) = run(args);
        assert_eq!(code, 2, "{args:?}: {err}");
        assert!(!err.is_empty(), "{args:?}");
    }
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&[
        "render",
        "--scene",
        p(&dir.path().join("missing.json")),
        "--out",
        p(&dir.path().join("x.ppm")),
    ]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn help_is_not_an_error() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    for sub in ["render", "rankviz", "bench", "serve"] {
        assert!(out.contains(sub), "{out}");
    }
}

#[test]
fn separate_processes_render_the_same_image() {
    let dir = tempfile::tempdir().unwrap();
    let single = dir.path().join("single.ppm");
    let (code, _, err) = run(&[
        "render",
        "--cloud",
        "8:600:3",
        "--width",
        "32",
        "--height",
        "24",
        "--out",
        p(&single),
    ]);
    assert_eq!(code, 0, "{err}");

    let ports: Vec<_> = (0..3)
        .map(|_| std::net::TcpListener::bind("127.0.0.1:0").unwrap())
        .collect();
    let peers = ports
        .iter()
        .map(|l| l.local_addr().unwrap().to_string())
        .collect::<Vec<_>>()
        .join(",");
    drop(ports);
    let multi = dir.path().join("multi.ppm");
    let children: Vec<_> = (0..3)
        .map(|rank| {
            std::process::Command::new(env!("CARGO_BIN_EXE_dprt"))
                .args([
                    "render",
                    "--cloud",
                    "8:600:3",
                    "--width",
                    "32",
                    "--height",
                    "24",
                    "--ranks",
                    "3",
                    "--backend",
                    "socket",
                    "--partition",
                    "slab",
                    "--rank-id",
                    &rank.to_string(),
                    "--peers",
                    &peers,
                    "--out",
                    p(&multi),
                ])
                .env("RUST_LOG", "warn")
                .env("DPRT_TIMEOUT_SECS", "20")
                .stdout(std::process::Stdio::piped())
                .stderr(std::process::Stdio::piped())
                .spawn()
                .unwrap()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|c| c.wait_with_output().unwrap())
        .collect::<Vec<_>>();
    for c in &children {
        assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    }
    assert_eq!(
        std::fs::read(single).unwrap(),
        std::fs::read(multi).unwrap()
    );
}
