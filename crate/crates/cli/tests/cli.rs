//! End-to-end tests driving the `lattix` binary as a subprocess.

use std::path::Path;
use std::process::{Command, Output};

use lattix_core::lattice::Lattice;

fn lattix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lattix"))
        .args(args)
        .output()
        .expect("spawn lattix")
}

fn assert_code(out: &Output, want: i32) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_corpus(dir: &Path, utts: u32, seed: u64) {
    let out = lattix(&[
        "generate",
        "--states", "12",
        "--arcs", "40",
        "--epsilon-frac", "0.2",
        "--frames", "8",
        "--utts", &utts.to_string(),
        "--seed", &seed.to_string(),
        "--out", dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
}

fn read_sorted_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn generate_is_deterministic_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen_corpus(&a, 3, 11);
    gen_corpus(&b, 3, 11);
    let ea = read_sorted_dir(&a);
    assert_eq!(ea, read_sorted_dir(&b), "same seed must give identical bytes");
    let names: Vec<&str> = ea.iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.contains(&"graph.fst"));
    assert!(names.contains(&"refs.txt"));
    assert!(names.contains(&"manifest.txt"));
    assert!(names.contains(&"utt000.post"));
    assert!(names.contains(&"utt002.post"));
}

#[test]
fn bad_generate_flags_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("c");
    let out = lattix(&[
        "generate",
        "--states", "0",
        "--arcs", "40",
        "--frames", "8",
        "--utts", "1",
        "--out", dir.to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    // Arc budget too small for the mandatory emitting cycle: spec error, also 2.
    let out = lattix(&[
        "generate",
        "--states", "12",
        "--arcs", "2",
        "--frames", "8",
        "--utts", "1",
        "--out", dir.to_str().unwrap(),
    ]);
    assert_code(&out, 2);
}

#[test]
fn decode_manifest_reproduces_references_and_valid_lattices() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen_corpus(&corpus, 3, 5);
    let outdir = tmp.path().join("decoded");
    let metrics = tmp.path().join("metrics.csv");
    let out = lattix(&[
        "decode",
        "--graph", corpus.join("graph.fst").to_str().unwrap(),
        "--list", corpus.join("manifest.txt").to_str().unwrap(),
        "--out", outdir.to_str().unwrap(),
        "--refs", corpus.join("refs.txt").to_str().unwrap(),
        "--metrics", metrics.to_str().unwrap(),
    ]);
    assert_code(&out, 0);

    // Transcripts must match the planted references word for word.
    let transcripts = std::fs::read_to_string(outdir.join("transcripts.txt")).unwrap();
    let refs = std::fs::read_to_string(corpus.join("refs.txt")).unwrap();
    let norm = |s: &str| {
        let mut lines: Vec<&str> = s.lines().collect();
        lines.sort();
        lines.join("\n")
    };
    assert_eq!(norm(&transcripts), norm(&refs));

    // Every utterance gets a parseable lattice with a final state.
    for u in 0..3 {
        let text = std::fs::read_to_string(outdir.join(format!("utt{u:03}.lat"))).unwrap();
        let lat = Lattice::parse_text(text.as_bytes()).unwrap();
        assert!(lat.num_nodes > 0);
        assert!(!lat.finals.is_empty());
    }

    // Metrics: header plus one all-correct row per utterance.
    let metrics = std::fs::read_to_string(&metrics).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("utt_id,wer,ower,density,best_cost"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 5);
        assert_eq!(cols[1].parse::<f64>().unwrap(), 0.0, "wer in {row}");
        assert_eq!(cols[2].parse::<f64>().unwrap(), 0.0, "ower in {row}");
        assert!(cols[3].parse::<f64>().unwrap() >= 1.0, "density in {row}");
        assert!(cols[4].parse::<f64>().is_ok(), "best_cost in {row}");
    }
}

#[test]
fn serial_and_parallel_engines_agree_at_wide_beam() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen_corpus(&corpus, 2, 9);
    let graph = corpus.join("graph.fst");
    let run = |engine: &str, outdir: &Path| {
        let out = lattix(&[
            "decode",
            "--graph", graph.to_str().unwrap(),
            "--list", corpus.join("manifest.txt").to_str().unwrap(),
            "--engine", engine,
            "--beam", "inf",
            "--max-active", "100000",
            "--out", outdir.to_str().unwrap(),
        ]);
        assert_code(&out, 0);
        std::fs::read_to_string(outdir.join("transcripts.txt")).unwrap()
    };
    let par = run("parallel", &tmp.path().join("par"));
    let ser = run("serial", &tmp.path().join("ser"));
    assert_eq!(par, ser);
    // The serial engine is one-best only: no lattice files.
    assert!(!tmp.path().join("ser").join("utt000.lat").exists());
}

#[test]
fn metric_flag_combinations_are_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen_corpus(&corpus, 1, 1);
    let graph = corpus.join("graph.fst");
    let list = corpus.join("manifest.txt");
    let outdir = tmp.path().join("o");
    let base = |extra: &[&str]| {
        let mut args: Vec<&str> = vec![
            "decode",
            "--graph", graph.to_str().unwrap(),
            "--list", list.to_str().unwrap(),
            "--out", outdir.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        lattix(&args)
    };
    let metrics = tmp.path().join("m.csv");
    let m = metrics.to_str().unwrap();
    assert_code(&base(&["--metrics", m]), 2); // no --refs
    let refs = corpus.join("refs.txt");
    let r = refs.to_str().unwrap();
    assert_code(&base(&["--metrics", m, "--refs", r, "--engine", "serial"]), 2);
    // Beam must be positive: config validation also exits 2.
    assert_code(&base(&["--beam", "-1"]), 2);
}

#[test]
fn missing_inputs_are_runtime_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen_corpus(&corpus, 1, 2);
    // Missing graph file: runtime failure, named in stderr.
    let out = lattix(&[
        "decode",
        "--graph", "/nonexistent/graph.fst",
        "--list", corpus.join("manifest.txt").to_str().unwrap(),
        "--out", tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_code(&out, 1);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("/nonexistent/graph.fst"),
        "stderr must name the missing file"
    );
    // One unreadable posterior file fails that utterance but the run continues.
    let out = lattix(&[
        "decode",
        "--graph", corpus.join("graph.fst").to_str().unwrap(),
        corpus.join("utt000.post").to_str().unwrap(),
        "/nonexistent/utt999.post",
        "--out", tmp.path().join("p").to_str().unwrap(),
    ]);
    assert_code(&out, 1);
    let transcripts =
        std::fs::read_to_string(tmp.path().join("p").join("transcripts.txt")).unwrap();
    assert!(transcripts.starts_with("utt000 "), "good utterance still decoded");
    assert_eq!(transcripts.lines().count(), 1);
    // No inputs at all, or both styles at once: usage errors.
    let out = lattix(&[
        "decode",
        "--graph", corpus.join("graph.fst").to_str().unwrap(),
        "--out", tmp.path().join("q").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    let out = lattix(&[
        "decode",
        "--graph", corpus.join("graph.fst").to_str().unwrap(),
        corpus.join("utt000.post").to_str().unwrap(),
        "--list", corpus.join("manifest.txt").to_str().unwrap(),
        "--out", tmp.path().join("q").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
}

#[test]
fn bench_subcommands_emit_parseable_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    gen_corpus(&corpus, 2, 4);
    let out = lattix(&[
        "bench", "throughput",
        "--corpus", corpus.to_str().unwrap(),
        "--grid", "1x2,2x2",
    ]);
    assert_code(&out, 0);
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "config,wall_clock,xrtf");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("nl1_nc2,"));
    assert!(lines[2].starts_with("nl2_nc2,"));
    for row in &lines[1..] {
        let cols: Vec<&str> = row.split(',').collect();
        assert!(cols[1].parse::<f64>().unwrap() > 0.0);
        assert!(cols[2].parse::<f64>().unwrap() > 0.0);
    }

    let sweep_out = tmp.path().join("sweep.csv");
    let out = lattix(&[
        "bench", "beam-sweep",
        "--corpus", corpus.to_str().unwrap(),
        "--beams", "8,15",
        "--out", sweep_out.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let csv = std::fs::read_to_string(&sweep_out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "beam,wall_clock,wer");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("8,"));
    assert!(lines[2].starts_with("15,"));
    // At the widest beam the planted references come back exactly.
    let cols: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(cols[2].parse::<f64>().unwrap(), 0.0);

    // Malformed grid: usage error.
    let out = lattix(&[
        "bench", "throughput",
        "--corpus", corpus.to_str().unwrap(),
        "--grid", "nonsense",
    ]);
    assert_code(&out, 2);
}
