use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

const MONDAY: &str = "2024-06-03T10:00:00Z";
const SATURDAY: &str = "2024-06-01T10:00:00Z";

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn chap(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chap"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env_remove("CHAP_SERVER")
        .env_remove("CHAP_STORE")
        .output()
        .expect("running chap")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

const BOOKMARKS: &[&str] = &[
    "--cluster",
    "api",
    "--point",
    "rpc_client:bookmarks",
    "--duration-secs",
    "120",
];

fn with(base: &[&str], rest: &[&str]) -> Vec<String> {
    base.iter().chain(rest).map(|s| s.to_string()).collect()
}

fn run(config: &Path, args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    chap(config, &refs)
}

#[test]
fn run_passes_with_a_fallback() {
    let cfg = configs().join("platform.toml");
    let out = run(&cfg, with(&["--at", MONDAY, "--json", "run"], BOOKMARKS));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let exp = json(&out);
    assert_eq!(exp["state"], "Completed");
    assert_eq!(exp["verdict"]["overall"], "pass");
    assert_eq!(exp["clusters"]["size"], 2);
}

/// Bookmarks topology with the fallback removed and its result required.
fn without_fallback(dir: &Path) -> PathBuf {
    let topo = std::fs::read_to_string(configs().join("bookmarks.toml")).unwrap();
    let topo = topo
        .replacen("has_fallback = true", "has_fallback = false", 1)
        .replacen(
            "criticality_of_result = \"optional\"",
            "criticality_of_result = \"required\"",
            1,
        );
    std::fs::write(dir.join("topology.toml"), topo).unwrap();
    let cfg = dir.join("platform.toml");
    std::fs::write(&cfg, "seed = 2\ntopology_path = \"topology.toml\"\n[workload]\nusers = 100000\nrequest_rate = 500.0\n")
        .unwrap();
    cfg
}

#[test]
fn run_without_fallback_exits_not_passed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = without_fallback(dir.path());
    let out = run(&cfg, with(&["--at", MONDAY, "--json", "run"], BOOKMARKS));
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
    let exp = json(&out);
    assert!(
        exp["state"] == "Aborted" || exp["verdict"]["overall"] == "fail",
        "{exp}"
    );
}

#[test]
fn exit_codes_for_bad_input_and_safety() {
    let cfg = configs().join("platform.toml");
    let bad_point = run(
        &cfg,
        with(
            &["--at", MONDAY, "run"],
            &["--cluster", "api", "--point", "rpc:bookmarks"],
        ),
    );
    assert_eq!(code(&bad_point), 2);
    let missing = chap(&configs().join("nope.toml"), &["report"]);
    assert_eq!(code(&missing), 2);
    let bad_clock = chap(&cfg, &["--at", "yesterday", "report"]);
    assert_eq!(code(&bad_clock), 2);
    let invalid = run(
        &cfg,
        with(
            &["--at", MONDAY, "run"],
            &["--cluster", "api", "--point", "rpc_client:nothing"],
        ),
    );
    assert_eq!(
        code(&invalid),
        2,
        "{}",
        String::from_utf8_lossy(&invalid.stderr)
    );
    let weekend = run(&cfg, with(&["--at", SATURDAY, "run"], BOOKMARKS));
    assert_eq!(code(&weekend), 3);
    assert!(String::from_utf8_lossy(&weekend.stderr).contains("business hours"));
    let greedy = run(
        &cfg,
        with(&["--at", MONDAY, "run", "--sampling-pct", "3"], BOOKMARKS),
    );
    assert_eq!(code(&greedy), 3);
}

#[test]
fn store_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().to_str().unwrap();
    let cfg = configs().join("platform.toml");
    let created = run(
        &cfg,
        with(
            &["--store", store, "--at", MONDAY, "--json", "create"],
            BOOKMARKS,
        ),
    );
    assert_eq!(
        code(&created),
        0,
        "{}",
        String::from_utf8_lossy(&created.stderr)
    );
    let id = json(&created)["id"].as_str().unwrap().to_string();
    assert_eq!(json(&created)["state"], "Created");

    let report = chap(&cfg, &["--store", store, "--json", "report", &id]);
    assert_eq!(json(&report)["state"], "Created");
    // abort only applies to a running experiment
    assert_eq!(code(&chap(&cfg, &["--store", store, "abort", &id])), 4);
    assert_eq!(
        code(&chap(&cfg, &["--store", store, "report", "exp-999999"])),
        4
    );

    let ran = chap(
        &cfg,
        &["--store", store, "--at", MONDAY, "--json", "run", &id],
    );
    assert_eq!(code(&ran), 0, "{}", String::from_utf8_lossy(&ran.stderr));
    assert_eq!(json(&ran)["state"], "Completed");
    // a finished experiment cannot run again
    assert_eq!(
        code(&chap(&cfg, &["--store", store, "--at", MONDAY, "run", &id])),
        4
    );

    let all = chap(&cfg, &["--store", store, "--json", "report"]);
    let list = json(&all);
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["verdict"]["overall"], "pass");
    let text = stdout(&chap(&cfg, &["--store", store, "report"]));
    assert!(text.contains(&id) && text.contains("Completed"), "{text}");
}

#[test]
fn plan_lists_generated_experiments_and_warnings() {
    let cfg = configs().join("platform.toml");
    let out = chap(
        &cfg,
        &["--at", MONDAY, "--json", "plan", "api", "--warmup", "120"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v[0]["cluster"], "api");
    let keys: Vec<&str> = v[0]["experiments"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["key"].as_str().unwrap())
        .collect();
    assert!(
        keys.contains(&"api/rpc_client:bookmarks/failure"),
        "{keys:?}"
    );
    let codes: Vec<&str> = v[0]["warnings"]
        .as_array()
        .unwrap()
        .iter()
        .map(|w| w["code"].as_str().unwrap())
        .collect();
    assert!(!codes.is_empty());
    assert_eq!(
        code(&chap(
            &cfg,
            &["--at", MONDAY, "plan", "nowhere", "--warmup", "0"]
        )),
        4
    );
}

#[test]
fn auto_runs_the_best_scheduled_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().to_str().unwrap();
    let cfg = configs().join("platform.toml");
    let out = chap(
        &cfg,
        &[
            "--store",
            store,
            "--at",
            MONDAY,
            "--json",
            "auto",
            "--warmup",
            "120",
            "--duration-secs",
            "60",
        ],
    );
    let v = json(&out);
    assert_eq!(v["started"].as_array().unwrap().len(), 1, "{v}");
    let exp = &v["experiments"][0];
    assert!(exp["state"].as_str().unwrap().ends_with("ed"), "{exp}");
    let passed = exp["verdict"]["overall"] == "pass" && exp["state"] == "Completed";
    assert_eq!(code(&out), if passed { 0 } else { 5 });
    // the run is recorded against the generated experiment
    let history = std::fs::read_dir(dir.path()).unwrap().count();
    assert!(history >= 2);
}

struct Server(Child, String);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn serve(config: &Path, store: &Path) -> Server {
    let mut child = Command::new(env!("CARGO_BIN_EXE_chap"))
        .arg("--config")
        .arg(config)
        .arg("--store")
        .arg(store)
        .args([
            "--at",
            MONDAY,
            "serve",
            "--bind",
            "127.0.0.1:0",
            "--accel",
            "2000",
            "--warmup",
            "120",
        ])
        .stdout(Stdio::piped())
        .spawn()
        .expect("spawning chap serve");
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let url = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"));
    Server(child, url.to_string())
}

#[test]
fn remote_commands_mirror_the_api() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("platform.toml");
    let server = serve(&cfg, dir.path());
    let remote = |args: &[&str]| {
        let mut all = vec!["--server", server.1.as_str()];
        all.extend_from_slice(args);
        chap(&cfg, &all)
    };

    let ran = remote(
        &with(&["--json", "run"], BOOKMARKS)
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    assert_eq!(code(&ran), 0, "{}", String::from_utf8_lossy(&ran.stderr));
    let id = json(&ran)["id"].as_str().unwrap().to_string();
    assert_eq!(json(&ran)["verdict"]["overall"], "pass");

    let list = json(&remote(&["--json", "report"]));
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(code(&remote(&["abort", &id])), 4);
    assert_eq!(code(&remote(&["report", "exp-424242"])), 4);

    let started = remote(
        &with(
            &["--json", "create", "--start", "--duration-secs", "600"],
            &BOOKMARKS[..4],
        )
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>(),
    );
    assert_eq!(
        code(&started),
        0,
        "{}",
        String::from_utf8_lossy(&started.stderr)
    );
    let live = json(&started)["id"].as_str().unwrap().to_string();
    // one experiment per cluster
    let second = remote(
        &with(&["create", "--start"], BOOKMARKS)
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    assert_eq!(code(&second), 4);
    let aborted = remote(&["--json", "abort", &live]);
    assert_eq!(
        code(&aborted),
        0,
        "{}",
        String::from_utf8_lossy(&aborted.stderr)
    );
    let bad = remote(&[
        "create",
        "--cluster",
        "api",
        "--point",
        "rpc_client:bookmarks",
        "--sampling-pct",
        "60",
    ]);
    assert_eq!(code(&bad), 2);

    let plan = json(&remote(&["--json", "plan", "api"]));
    assert!(!plan[0]["experiments"].as_array().unwrap().is_empty());
    let queue = remote(&["--json", "plan", "--queue"]);
    assert_eq!(code(&queue), 0);
}
