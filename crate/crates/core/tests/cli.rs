use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use mmn::data::{load_tsv, SyntheticSpec};
use mmn::model::{MmnModel, ModelConfig, ParamGroup};

fn mmn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL_SPEC: &str = "num_types = 3\nnum_scenarios = 2\ntype_offsets = -1, 0, 1\nscenario_offsets = -0.5, 0.5\n\
    num_fields = 3\nvocab_size = 12\ncvr_feature_scale = 0.8\nctr_feature_scale = 0.5\ninstances = 3000\nseed = 11\n";

const RUN: &str = "data_path = log.tsv\nseed = 3\nepochs = 2\nlayer_units = 8, 4\nnum_slots = 1024\n\
    batch_size = 128\ncheckpoint_path = model.ckpt\nlog_path = train.log\nreport_path = report.kv\n";

fn trained_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "spec.conf", SMALL_SPEC);
    write(dir.path(), "run.conf", RUN);
    assert!(mmn(&["gen-data", "spec.conf", "log.tsv"], dir.path()).status.success());
    let out = mmn(&["train", "run.conf"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn gen_data_minimal_spec_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "min.conf", "num_types = 1\nnum_scenarios = 1\ninstances = 100\nseed = 5\n");
    assert!(mmn(&["gen-data", "min.conf", "a.tsv"], dir.path()).status.success());
    assert!(mmn(&["gen-data", "min.conf", "b.tsv"], dir.path()).status.success());
    let a = std::fs::read_to_string(dir.path().join("a.tsv")).unwrap();
    assert_eq!(data_lines(&a).len(), 100);
    assert_eq!(a, std::fs::read_to_string(dir.path().join("b.tsv")).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("a.tsv.truth")).unwrap(),
        std::fs::read(dir.path().join("b.tsv.truth")).unwrap()
    );
}

#[test]
fn gen_data_wide_cvr_range_hits_configured_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "nf.conf",
        "num_types = 19\nnum_scenarios = 8\ntype_cvr_range = 0.0005, 0.276\ncvr_intercept = -2\ninstances = 500\nseed = 1\n",
    );
    assert!(mmn(&["gen-data", "nf.conf", "nf.tsv", "--truth", "nf.truth"], dir.path()).status.success());
    let truth = std::fs::read_to_string(dir.path().join("nf.truth")).unwrap();
    let type_cvrs: Vec<f64> = truth
        .lines()
        .filter(|l| l.starts_with("type\t"))
        .map(|l| l.split('\t').nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(type_cvrs.len(), 19);
    let lo = type_cvrs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = type_cvrs.iter().cloned().fold(0.0, f64::max);
    assert!((lo - 0.0005).abs() < 5e-7, "{lo}");
    assert!((hi - 0.276).abs() < 5e-7, "{hi}");
}

#[test]
fn invalid_spec_and_missing_files_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.conf", "num_types = 2\nbogus_key = 1\n");
    assert_eq!(mmn(&["gen-data", "bad.conf", "x.tsv"], dir.path()).status.code(), Some(2));
    assert_eq!(mmn(&["gen-data", "absent.conf", "x.tsv"], dir.path()).status.code(), Some(2));
    write(dir.path(), "in.tsv", "");
    assert_eq!(mmn(&["predict", "none.ckpt", "in.tsv", "out.tsv"], dir.path()).status.code(), Some(2));
    assert_eq!(mmn(&["serve", "none.ckpt"], dir.path()).status.code(), Some(2));
    assert_eq!(mmn(&["frobnicate"], dir.path()).status.code(), Some(2));
}

#[test]
fn train_writes_checkpoint_log_and_report() {
    let dir = trained_dir();
    let log = std::fs::read_to_string(dir.path().join("train.log")).unwrap();
    assert!(log.contains("datasets_opened=1"));
    let report = std::fs::read_to_string(dir.path().join("report.kv")).unwrap();
    assert!(report.contains("parameter_set_count = 6"));
    assert!(report.contains("dataset_count = 1"));
    let model = MmnModel::load(&dir.path().join("model.ckpt")).unwrap();
    assert!(model.step() > 0);
}

#[test]
fn predict_reproduces_logged_probe_and_is_deterministic() {
    let dir = trained_dir();
    let p = dir.path();
    let text = std::fs::read_to_string(p.join("log.tsv")).unwrap();
    let header = text.lines().next().unwrap();
    let first = data_lines(&text)[0];
    let unknown = first.replacen("\tt0\t", "\tt7\t", 1).replacen("\tt1\t", "\tt7\t", 1).replacen("\tt2\t", "\tt7\t", 1);
    write(p, "in.tsv", &format!("{header}\n{first}\n{unknown}\n{first}\n"));
    assert!(mmn(&["predict", "model.ckpt", "in.tsv", "out1.tsv"], p).status.success());
    assert!(mmn(&["predict", "model.ckpt", "in.tsv", "out2.tsv"], p).status.success());
    let out = std::fs::read_to_string(p.join("out1.tsv")).unwrap();
    assert_eq!(out, std::fs::read_to_string(p.join("out2.tsv")).unwrap());
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].ends_with("\tp_ctr\tp_cvr"));
    assert!(lines[2].contains("\tERR\t"), "{}", lines[2]);
    assert_eq!(lines[1], lines[3]);

    let cols: Vec<&str> = lines[1].rsplitn(3, '\t').collect();
    let (p_cvr, p_ctr) = (cols[0], cols[1]);
    let log = std::fs::read_to_string(p.join("train.log")).unwrap();
    let probe = log.lines().find(|l| l.starts_with("probe ")).unwrap();
    assert_eq!(probe, format!("probe record=1 p_ctr={p_ctr} p_cvr={p_cvr}"));
}

fn constant_checkpoint(dir: &Path) -> PathBuf {
    let mut spec = SyntheticSpec::neutral(3, 2, 10, 1);
    spec.num_fields = 3;
    let config = ModelConfig {
        layer_units: vec![4],
        num_slots: 128,
        ..ModelConfig::default()
    };
    let mut model = MmnModel::new(&config, spec.schema(), spec.registry()).unwrap();
    for s in model.params_mut(ParamGroup::Base).unwrap().slices_mut() {
        s.fill(0.0);
    }
    let path = dir.join("const.ckpt");
    model.save(&path).unwrap();
    path
}

#[test]
fn eval_of_constant_checkpoint_gives_half_auc() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write(p, "spec.conf", SMALL_SPEC);
    assert!(mmn(&["gen-data", "spec.conf", "log.tsv"], p).status.success());
    constant_checkpoint(p);
    let out = mmn(&["eval", "const.ckpt", "log.tsv", "--report", "r.kv"], p);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let kv = std::fs::read_to_string(p.join("r.kv")).unwrap();
    let aucs: Vec<&str> = kv
        .lines()
        .filter(|l| l.contains(".auc = ") && !l.contains("ctcvr"))
        .map(|l| l.split(" = ").nth(1).unwrap())
        .collect();
    assert!(!aucs.is_empty());
    assert!(aucs.iter().all(|&a| a == "0.5" || a == "NA"), "{aucs:?}");
    assert!(kv.contains("average_auc = 0.5\n"));
}

#[test]
fn serve_answers_requests_and_reports_latency() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = constant_checkpoint(dir.path());
    let mut child = Command::new(env!("CARGO_BIN_EXE_mmn"))
        .args(["serve", ckpt.to_str().unwrap(), "--workers", "2"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut first = String::new();
    stdout.read_line(&mut first).unwrap();
    let addr = first.trim().strip_prefix("listening on ").unwrap().to_string();

    let mut conn = TcpStream::connect(&addr).unwrap();
    conn.write_all(b"q1\tt0\ts1\ta\tb\tc\nq2\tzz\ts1\ta\tb\tc\nq3\tt2\ts0\ta\tb\n").unwrap();
    conn.shutdown(std::net::Shutdown::Write).unwrap();
    let mut resp = String::new();
    conn.read_to_string(&mut resp).unwrap();
    let lines: Vec<&str> = resp.lines().collect();
    assert_eq!(lines.len(), 3);
    let q1: Vec<&str> = lines[0].split('\t').collect();
    assert_eq!(q1[0], "q1");
    assert_eq!(q1[2], "0.5");
    assert!(lines[1].starts_with("q2\tERR\t"));
    assert!(lines[2].starts_with("q3\tERR\t"));

    TcpStream::connect(&addr).unwrap().write_all(b"#shutdown\n").unwrap();
    let status = child.wait().unwrap();
    assert!(status.success());
    let mut rest = String::new();
    stdout.read_to_string(&mut rest).unwrap();
    assert!(rest.contains("shutdown requests=3 p50_us="), "{rest}");
}

#[test]
fn ablation_command_prints_deltas() {
    let dir = trained_dir();
    let out = mmn(&["ablation", "run.conf", "--modes", "mmn,mmn", "--out", "abl.txt"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("abl.txt")).unwrap();
    assert!(text.contains("delta mmn - mmn"));
    assert!(text.lines().filter(|l| l.trim_start().starts_with("type")).all(|l| l.ends_with("+0.0000")));
    // The generated log round-trips through the loader.
    assert_eq!(load_tsv(&dir.path().join("log.tsv"), None).unwrap().len(), 3000);
}
