use std::path::Path;
use std::process::{Command, Output};

fn fedkseed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedkseed")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "\
# small enough for a debug build
input_dim = 6
classes = 3
instances = 600
clients = 8
participation = 0.25
tau = 5
rounds = 3
K = 16
";

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn bytes_reports_closed_form_counts() {
    let o = fedkseed(&["bytes", "--K", "4096", "--tau", "200"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "down=16388 up=1600 total=17988");
    let o = fedkseed(&["bytes", "--K", "1024", "--tau", "200", "--pro"]);
    assert_eq!(stdout(&o).trim(), "down=8196 up=1600 total=9796");
}

#[test]
fn cost_reports_unbounded_and_pooled_replay() {
    assert_eq!(stdout(&fedkseed(&["cost", "--m", "50", "--tau", "200", "--rounds", "30"])).trim(), "300000");
    assert_eq!(stdout(&fedkseed(&["cost", "--m", "50", "--tau", "200", "--rounds", "30", "--K", "4096"])).trim(), "4096");
    assert_eq!(stdout(&fedkseed(&["cost", "--m", "50", "--tau", "200", "--rounds", "0"])).trim(), "0");
}

#[test]
fn verify_passes_on_shipped_fixtures() {
    let o = fedkseed(&["verify"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("4 checks, 0 failed"));
}

#[test]
fn verify_names_a_corrupted_fixture_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures");
    std::fs::copy(fixtures.join("perturb_golden.txt"), dir.path().join("perturb_golden.txt")).unwrap();
    let wire = std::fs::read_to_string(fixtures.join("wire_golden.txt")).unwrap();
    std::fs::write(dir.path().join("wire_golden.txt"), wire.replace("downlink 04", "downlink 05")).unwrap();
    let o = fedkseed(&["verify", "--fixtures", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL wire_golden.txt"), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS perturb_golden.txt"));
}

#[test]
fn config_errors_exit_1() {
    assert_eq!(fedkseed(&["run", "--mode", "sideways"]).status.code(), Some(1));
    assert_eq!(fedkseed(&["run", "--config", "/nonexistent/x.cfg"]).status.code(), Some(1));
    assert_eq!(fedkseed(&["run", "--set", "no_such_key=1"]).status.code(), Some(1));
    assert_eq!(fedkseed(&["run", "--set", "novalue"]).status.code(), Some(1));
    assert_eq!(fedkseed(&["run", "--K", "0"]).status.code(), Some(1));
    assert_eq!(fedkseed(&["bytes", "--K", "0", "--tau", "1"]).status.code(), Some(1));
    assert_eq!(fedkseed(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let out = blocker.join("sub");
    let o = fedkseed(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

fn without_wall_ms(csv: &str) -> String {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0).collect::<Vec<_>>().join("\n")
}

#[test]
fn run_writes_reproducible_csvs_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = fedkseed(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--mode", "fedkseed-pro"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("summary.json").exists());
        csvs.push(std::fs::read_to_string(out.join("fedkseed-pro_K16_rep0.csv")).unwrap());
    }
    assert_eq!(without_wall_ms(&csvs[0]), without_wall_ms(&csvs[1]));
    let lines: Vec<&str> = csvs[0].lines().collect();
    assert_eq!(lines[0], "round,mode,K,alpha,test_loss,test_accuracy,bytes_down,bytes_up,sync_steps,wall_ms");
    assert_eq!(lines.len(), 4);
    let row: Vec<&str> = lines[1].split(',').collect();
    // K = 16 with probabilities, tau = 5
    assert_eq!(&row[6..8], ["132", "40"]);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("o");
    let o = fedkseed(&[
        "run", "--config", &cfg, "--out", out.to_str().unwrap(), "--mode", "k-sweep", "--set", "k_values=4,8",
        "--reps", "2", "--rounds", "2", "--tau", "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for k in [4, 8] {
        for rep in 0..2 {
            let csv = std::fs::read_to_string(out.join(format!("k-sweep_K{k}_rep{rep}.csv"))).unwrap();
            assert_eq!(csv.lines().count(), 3);
            let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
            assert_eq!(row[2], k.to_string());
            assert_eq!(row[6].parse::<usize>().unwrap(), 4 + 4 * k);
            assert_eq!(row[7], "24");
        }
    }
    let summary = std::fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"mode\": \"k-sweep\""));
}

#[test]
fn cost_model_mode_writes_its_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let o = fedkseed(&[
        "run", "--mode", "cost-model", "--out", out.to_str().unwrap(), "--tau", "200", "--rounds", "30",
        "--set", "cost_m=50",
    ]);
    assert!(o.status.success());
    let table = std::fs::read_to_string(out.join("cost_model.csv")).unwrap();
    assert_eq!(table.lines().last().unwrap(), "30,300000,4096");
}
