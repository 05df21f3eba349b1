use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_seqfa");

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("seqfa-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn seqfa(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn small_config(dir: &Path, out: &str) -> PathBuf {
    let text = format!(
        r#"
seed = 11
output_dir = "{out}"
[data]
scenario = "continuous1"
n = 40
[[models]]
preset = "EZ"
k = 2
[[models]]
preset = "EFA1"
[engine]
particles = 60
n_init = 10
is_samples = 1000
batch_adapt_steps = 300
"#
    );
    let path = dir.join(format!("{out}.toml"));
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn simulate_writes_data_and_truth() {
    let dir = scratch("sim");
    let csv = dir.join("b.csv");
    let o = seqfa(&["simulate", "--scenario", "binary1", "--seed", "5", "--out", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 6);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().flat_map(|r| r.split(',')).all(|c| c == "0" || c == "1"));
    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("b.csv.truth.json")).unwrap()).unwrap();
    // nalgebra vectors serialize as [data, rows, cols]
    let alpha = &truth["theta"]["alpha"];
    assert_eq!(alpha[0].as_array().unwrap().len(), 6);
    assert_eq!(alpha[1], 6);
}

#[test]
fn run_report_and_thread_determinism() {
    let dir = scratch("run");
    let one = small_config(&dir, "one");
    let two = small_config(&dir, "two");
    let o = seqfa(&["run", one.to_str().unwrap(), "--threads", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = seqfa(&["run", two.to_str().unwrap(), "--threads", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let ev = fs::read_to_string(dir.join("one/evidence.csv")).unwrap();
    let mut lines = ev.lines();
    assert_eq!(lines.next().unwrap(), "replicate,index,EZ,EFA1");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 30);
    assert!(rows[0].starts_with("1,11,"));
    assert!(rows[29].starts_with("1,40,"));

    for f in ["evidence.csv", "lbf_trajectories.csv", "triggers.csv", "posterior_draws_EZ.csv"] {
        assert_eq!(
            fs::read(dir.join("one").join(f)).unwrap(),
            fs::read(dir.join("two").join(f)).unwrap(),
            "{f} depends on the thread count"
        );
    }

    let o = seqfa(&["report", dir.join("one").to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("log evidence"));
    assert!(text.contains("Trajectory check"));
    assert!(text.contains(": ok,"));
    assert_eq!(text, fs::read_to_string(dir.join("one/summary.txt")).unwrap());
}

#[test]
fn interrupted_run_resumes_to_identical_output() {
    let dir = scratch("resume");
    let full = small_config(&dir, "full");
    let cut = small_config(&dir, "cut");
    let o = seqfa(&["run", full.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // stop the second run once some checkpoint exists
    let mut child = Command::new(BIN).args(["run", cut.to_str().unwrap()]).spawn().unwrap();
    let cps = dir.join("cut/checkpoints");
    let t0 = Instant::now();
    loop {
        if child.try_wait().unwrap().is_some() {
            break;
        }
        let any = fs::read_dir(&cps).map(|mut d| d.next().is_some()).unwrap_or(false);
        if any || t0.elapsed() > Duration::from_secs(120) {
            child.kill().ok();
            child.wait().unwrap();
            break;
        }
        std::thread::sleep(Duration::from_millis(20));
    }

    let o = seqfa(&["run", cut.to_str().unwrap(), "--resume"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["evidence.csv", "lbf_trajectories.csv", "triggers.csv", "posterior_draws_EFA1.csv"] {
        assert_eq!(
            fs::read(dir.join("full").join(f)).unwrap(),
            fs::read(dir.join("cut").join(f)).unwrap(),
            "{f} differs after resuming"
        );
    }
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = scratch("badcfg");
    let path = dir.join("bad.toml");
    fs::write(&path, "seed = 1\noutput_dir = \"o\"\nbogus = 3\n[data]\nscenario = \"binary1\"\n[[models]]\npreset = \"EFA1\"\n").unwrap();
    let o = seqfa(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn bad_data_exits_with_code_3() {
    let dir = scratch("baddata");
    fs::write(dir.join("d.csv"), "a,b,c\n1,2,3\n4,x,6\n").unwrap();
    let path = dir.join("c.toml");
    fs::write(&path, "seed = 1\noutput_dir = \"o\"\n[data]\npath = \"d.csv\"\n[[models]]\npreset = \"EFA1\"\n").unwrap();
    let o = seqfa(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}
