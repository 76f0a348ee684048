use std::path::Path;
use std::process::{Command, Output};

use rankuda::image::{write_pnm, Image};

fn rankuda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rankuda"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn scores_csv(rows: &[(&str, f64)]) -> String {
    let mut out = String::from("image_id,score\n");
    for (id, v) in rows {
        out.push_str(&format!("{id},{v}\n"));
    }
    out
}

#[test]
fn eval_of_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<(String, f64)> = (0..12).map(|i| (format!("a{i}.ppm"), (i as f64 * 0.7).exp())).collect();
    let rows: Vec<(&str, f64)> = rows.iter().map(|(a, b)| (a.as_str(), *b)).collect();
    let (pred, truth, out) = (dir.path().join("p.csv"), dir.path().join("t.csv"), dir.path().join("r.csv"));
    write(&pred, &scores_csv(&rows));
    write(&truth, &scores_csv(&rows));
    let o = rankuda(&["eval", "--pred", s(&pred), "--truth", s(&truth), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("SRCC  1.0000"), "{text}");
    let csv = std::fs::read_to_string(&out).unwrap();
    let values: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(values[0].parse::<f64>().unwrap(), 1.0);
    assert_eq!(values[1].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn eval_rejects_a_swapped_header() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, truth) = (dir.path().join("p.csv"), dir.path().join("t.csv"));
    write(&pred, "score,image_id\n1,a\n2,b\n");
    write(&truth, &scores_csv(&[("a", 1.0), ("b", 2.0)]));
    let o = rankuda(&["eval", "--pred", s(&pred), "--truth", s(&truth)]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error code=parse msg="), "{}", stderr(&o));
}

#[test]
fn eval_rejects_unknown_logistic_form() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.csv");
    write(&p, &scores_csv(&[("a", 1.0), ("b", 2.0)]));
    let o = rankuda(&["eval", "--pred", s(&p), "--truth", s(&p), "--logistic", "cubic"]);
    assert!(stderr(&o).starts_with("error code=config"), "{}", stderr(&o));
}

#[test]
fn naturalness_of_a_constant_image_is_one_bin() {
    let dir = tempfile::tempdir().unwrap();
    write_pnm(&dir.path().join("flat.ppm"), &Image::filled(3, 20, 20, 0.5)).unwrap();
    let manifest = dir.path().join("m.csv");
    write(&manifest, "image_id,score\nflat.ppm,\n");
    let out = dir.path().join("hist/h.csv");
    let o = rankuda(&["naturalness", "--manifest", s(&manifest), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("moments unavailable"));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("bin_center,density\n"));
    let nonzero: Vec<(f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (c, d) = l.split_once(',').unwrap();
            (c.parse().unwrap(), d.parse().unwrap())
        })
        .filter(|(_, d): &(f64, f64)| *d > 0.0)
        .collect();
    assert_eq!(nonzero.len(), 1, "{nonzero:?}");
}

#[test]
fn pairs_with_full_threshold_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.csv");
    write(&manifest, &scores_csv(&[("a", 1.0), ("b", 2.0), ("c", 3.0)]));
    let out = dir.path().join("pairs.csv");
    let o = rankuda(&["pairs", "--manifest", s(&manifest), "--out", s(&out), "--set", "tau_source=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "first_id,second_id,label\n");
}

#[test]
fn bad_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.csv");
    write(&manifest, &scores_csv(&[("a", 1.0), ("b", 2.0)]));
    let out = dir.path().join("pairs.csv");
    for bad in ["tau", "no_such_key=1", "tau_source=abc"] {
        let o = rankuda(&["pairs", "--manifest", s(&manifest), "--out", s(&out), "--set", bad]);
        assert!(stderr(&o).starts_with("error code=config msg="), "{bad}: {}", stderr(&o));
    }
}

#[test]
fn locked_output_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    std::fs::create_dir_all(&out).unwrap();
    write(&out.join(".rankuda.lock"), "");
    let o = rankuda(&["synth", "--out", s(&out), "--images", "2", "--size", "16"]);
    assert!(stderr(&o).starts_with("error code=locked msg="), "{}", stderr(&o));
    assert!(!out.join("source.csv").exists());
}

#[test]
fn train_refuses_a_directory_with_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    std::fs::create_dir_all(&out).unwrap();
    write(&out.join("config.txt"), "seed = 99\n");
    let missing = dir.path().join("missing.csv");
    let o = rankuda(&[
        "train", "--source", s(&missing), "--target", s(&missing), "--pseudo", s(&missing), "--out", s(&out),
    ]);
    assert!(stderr(&o).starts_with("error code=config msg="), "{}", stderr(&o));
    assert!(!out.join(".rankuda.lock").exists());
}

#[test]
fn synth_writes_the_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = rankuda(&["synth", "--out", s(&out), "--images", "4", "--size", "16", "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["source.csv", "target.csv", "target_truth.csv", "pseudo.csv"] {
        let text = std::fs::read_to_string(out.join(f)).unwrap();
        assert!(text.starts_with("image_id,score\n"), "{f}");
        assert_eq!(text.lines().count(), 5, "{f}");
    }
    let target = std::fs::read_to_string(out.join("target.csv")).unwrap();
    assert!(target.lines().skip(1).all(|l| l.ends_with(',')));
    assert!(!out.join(".rankuda.lock").exists());
}
