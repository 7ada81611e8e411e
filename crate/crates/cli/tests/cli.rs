use std::path::Path;
use std::process::{Command, Output};

use lowrank_bn::network::BayesNet;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowrank-bn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, n: &str, seed: &str) -> std::path::PathBuf {
    let net = dir.join("net.json");
    let out = bin(&["generate", "--n", n, "--k", "3", "--seed", seed, "--out", p(&net)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    net
}

fn edges(text: &str) -> Vec<(usize, usize)> {
    text.lines()
        .skip(1)
        .take_while(|l| !l.starts_with("unresolved"))
        .map(|l| {
            let mut it = l.split_whitespace().map(|x| x.parse().unwrap());
            (it.next().unwrap(), it.next().unwrap())
        })
        .collect()
}

#[test]
fn exact_learning_recovers_the_generated_edges() {
    let dir = tempfile::tempdir().unwrap();
    let net = generate(dir.path(), "8", "2");
    let bn = BayesNet::load(&net).unwrap();
    let out = bin(&["learn", "--network", p(&net), "--exact"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let last = text.lines().last().unwrap();
    let unresolved: Vec<usize> = last
        .trim_start_matches("unresolved [")
        .trim_end_matches(']')
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().unwrap())
        .collect();
    let mut got = edges(&text);
    let mut want: Vec<(usize, usize)> = bn
        .dag()
        .edges()
        .into_iter()
        .filter(|(_, c)| !unresolved.contains(c))
        .collect();
    got.sort();
    want.sort();
    assert_eq!(got, want);
}

#[test]
fn blanket_assisted_learning_runs() {
    let dir = tempfile::tempdir().unwrap();
    let net = generate(dir.path(), "8", "5");
    let log = dir.path().join("log.txt");
    let out = bin(&["learn", "--network", p(&net), "--exact", "--exact-blankets", "--log", p(&log)]);
    assert!(out.status.success());
    assert!(std::fs::read_to_string(&log).unwrap().contains("round 1"));
}

#[test]
fn blankets_from_network_and_from_samples() {
    let dir = tempfile::tempdir().unwrap();
    let net = generate(dir.path(), "7", "3");
    let out = bin(&["mb", "--network", p(&net)]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 7);

    let data = dir.path().join("data.txt");
    assert!(bin(&["sample", "--network", p(&net), "--count", "500", "--out", p(&data)]).status.success());
    let out = bin(&["mb", "--data", p(&data), "--largest-gap", "--eps", "0.05"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().all(|l| l.contains("eta=") && !l.contains("eta=na")));
}

#[test]
fn failures_print_a_parsable_error_line() {
    let out = bin(&["learn", "--network", "/definitely/not/here.json"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let line = err.lines().last().unwrap();
    let fields: Vec<&str> = line.split('\t').collect();
    assert_eq!(fields[0], "error");
    assert_eq!(fields[1], "kind=network");
    assert!(fields[2].starts_with("message="));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seeds = []\n").unwrap();
    let out = bin(&["sweep", "--config", p(&cfg), "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("kind=experiment"));
}

#[test]
fn sweep_tables_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    std::fs::write(
        &cfg,
        "seed = 3\nseeds = [1, 2]\nn = 7\nk = 3\nc_grid = [-1.0, 0.0]\nregime = \"with_observational\"\n",
    )
    .unwrap();
    let mut tables = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = bin(&["sweep", "--config", p(&cfg), "--out", p(&out_dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        tables.push(std::fs::read(out_dir.join("results.tsv")).unwrap());
        for name in ["f1_vs_c.tsv", "mb_recall_vs_c.tsv", "timings.tsv", "averages.tsv"] {
            assert!(out_dir.join(name).exists(), "{name}");
        }
    }
    assert_eq!(tables[0], tables[1]);
}
