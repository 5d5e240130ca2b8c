use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::Duration;

use omniguide::report::load_traces;
use omniguide::source::remote::RemoteSource;
use omniguide::LogitSource;

fn demo(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo").join(file)
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_omniguide"));
    c.env_remove("OMNIGUIDE_SEED")
        .env_remove("OMNIGUIDE_BASE_ENDPOINT")
        .env_remove("OMNIGUIDE_GUIDE_ENDPOINT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config() -> String {
    demo("run.toml").to_string_lossy().into_owned()
}

/// Write a config into `dir`, pointing at the demo tables.
fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("c.toml");
    let text = body
        .replace("@BASE", &demo("base.toy").to_string_lossy())
        .replace("@GUIDE", &demo("guide.toy").to_string_lossy());
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn decode_writes_text_and_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("t.jsonl");
    let o = run(&["decode", "--config", &config(), "--greedy", "--trace-out", trace.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "v2 m2 C EOS");
    let (header, traces) = load_traces(&trace).unwrap();
    assert_eq!(header.tokens, 4);
    assert_eq!(header.finish_reason, "stop_token");
    assert_eq!(header.strategy, "stepwise");
    assert_eq!(traces.len(), 4);
}

#[test]
fn text_output_goes_to_configured_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "stop = [\"EOS\"]\nthink_tag = [\"THINK\"]\n[base]\ntoy = \"@BASE\"\n[guide]\ntoy = \"@GUIDE\"\n[prompt]\ntext = \"Q2\"\n[sampler]\nmode = \"greedy\"\n[output]\ntext = \"out.txt\"\n",
    );
    let o = run(&["decode", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    // no payload: the base cannot see a fact, the guide's prior picks v0
    let text = fs::read_to_string(tmp.path().join("out.txt")).unwrap();
    assert!(text.starts_with("v0"), "{text}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&["decode"])), 2);
    assert_eq!(code(&run(&["decode", "--config", "/nonexistent/run.toml"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn config_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = write_config(tmp.path(), "[base]\ntoy = \"@BASE\"\ncolour = \"red\"\n");
    let o = run(&["decode", "--config", &unknown]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));

    assert_eq!(code(&run(&["decode", "--config", &config(), "--strategy", "guide_only"])), 3);
    assert_eq!(code(&run(&["decode", "--config", &config(), "--temperature", "0"])), 3);
    assert_eq!(code(&run(&["decode", "--config", &config(), "--max-new-tokens", "0"])), 3);

    let no_guide = write_config(tmp.path(), "[base]\ntoy = \"@BASE\"\n[prompt]\ntext = \"Q1\"\n");
    let o = run(&["decode", "--config", &no_guide]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("guide"));

    let bad_token = write_config(tmp.path(), "[base]\ntoy = \"@BASE\"\n[prompt]\ntext = \"Q9\"\n");
    assert_eq!(code(&run(&["decode", "--config", &bad_token, "--strategy", "none"])), 3);
}

#[test]
fn vocabulary_mismatch_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let other = tmp.path().join("other.toy");
    fs::write(&other, "@vocab Q1 Q2 THINK\nQ1 | Q2 | 1\n").unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("[base]\ntoy = \"@BASE\"\n[guide]\ntoy = {:?}\n[prompt]\ntext = \"Q1\"\n", other.to_str().unwrap()),
    );
    let o = run(&["decode", "--config", &cfg]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("handshake"), "{}", stderr(&o));
}

#[test]
fn unreachable_endpoint_exits_4() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let o = bin()
        .args(["decode", "--config", &config()])
        .env("OMNIGUIDE_BASE_ENDPOINT", port.to_string())
        .output()
        .unwrap();
    assert_eq!(code(&o), 4);
}

struct Server {
    child: Option<Child>,
    endpoint: String,
}

impl Server {
    fn start(spec: &Path, extra: &[&str]) -> Self {
        let mut child = bin()
            .args(["serve", "--spec", spec.to_str().unwrap(), "--addr", "127.0.0.1:0"])
            .args(extra)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let endpoint = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
        Self { child: Some(child), endpoint }
    }

    fn terminate(mut self) -> Output {
        let child = self.child.take().unwrap();
        Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
        child.wait_with_output().unwrap()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            child.kill().ok();
            child.wait().ok();
        }
    }
}

#[test]
fn serve_answers_handshake_and_drains_on_sigterm() {
    let server = Server::start(&demo("base.toy"), &[]);
    let remote = RemoteSource::connect(&server.endpoint).unwrap();
    assert_eq!(remote.vocabulary().size(), 17);
    assert_eq!(remote.vocabulary().token_str(0), Some("Q1"));
    let (session, _) = omniguide::prefill(&remote, &omniguide::PromptInput::text(vec![0])).unwrap();
    let out = server.terminate();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("drained 1 live sessions"));
    drop(session);
}

#[test]
fn serve_rejects_invalid_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toy");
    fs::write(&bad, "@vocab a b\na | zzz | 1\n").unwrap();
    assert_eq!(code(&run(&["serve", "--spec", bad.to_str().unwrap(), "--addr", "127.0.0.1:0"])), 3);
    assert_eq!(code(&run(&["serve", "--spec", "/nonexistent.toy"])), 3);
}

#[test]
fn remote_sources_match_local_ones() {
    let base = Server::start(&demo("base.toy"), &[]);
    let guide = Server::start(&demo("guide.toy"), &[]);
    let remote = bin()
        .args(["decode", "--config", &config(), "--seed", "4", "--temperature", "1.5"])
        .env("OMNIGUIDE_BASE_ENDPOINT", &base.endpoint)
        .env("OMNIGUIDE_GUIDE_ENDPOINT", &guide.endpoint)
        .output()
        .unwrap();
    let local = run(&["decode", "--config", &config(), "--seed", "4", "--temperature", "1.5"]);
    assert_eq!(code(&remote), 0, "{}", stderr(&remote));
    assert_eq!(remote.stdout, local.stdout);
}

#[test]
fn server_loss_mid_decode_exits_5() {
    let base = Server::start(&demo("base.toy"), &["--per-step-ms", "20"]);
    let guide = Server::start(&demo("guide.toy"), &[]);
    // no stop tokens, so the decode outlives the base server
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[base]\ntoy = \"@BASE\"\n[guide]\ntoy = \"@GUIDE\"\n[prompt]\ntext = \"Q1\"\nomni_payload = \"@PAYLOAD\"\n",
    );
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap().replace("@PAYLOAD", &demo("fact1.img").to_string_lossy())).unwrap();
    let trace = tmp.path().join("t.jsonl");
    let child = bin()
        .args(["decode", "--config", &cfg, "--max-new-tokens", "500", "--trace-out", trace.to_str().unwrap()])
        .env("OMNIGUIDE_BASE_ENDPOINT", &base.endpoint)
        .env("OMNIGUIDE_GUIDE_ENDPOINT", &guide.endpoint)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    thread::sleep(Duration::from_millis(400));
    drop(base);
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, traces) = load_traces(&trace).unwrap();
    assert_eq!(header.finish_reason, "error");
    assert!(header.error.is_some());
    assert!(!traces.is_empty() && traces.len() < 500);
}

#[test]
fn compare_flags_identical_outputs() {
    let o = run(&["compare", "--config", &config(), "--greedy", "--strategies", "none,lrm_guide_fixed:0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains(" none ") && lines[1].contains("0/8"));
    assert!(lines[2].contains("lrm_guide_fixed") && lines[2].contains("#0"), "{}", lines[2]);

    let single = run(&["compare", "--config", &config(), "--greedy", "--strategies", "stepwise"]);
    let out = stdout(&single);
    assert_eq!(out.lines().count(), 2);
    assert!(out.contains("8/8"));

    assert_eq!(code(&run(&["compare", "--config", &config(), "--strategies", "none,bogus"])), 3);
}

#[test]
fn compare_writes_one_trace_per_strategy_and_item() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("c.jsonl");
    let o = run(&[
        "compare", "--config", &config(), "--greedy", "--strategies", "none,stepwise", "--trace-out",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let n = fs::read_dir(tmp.path()).unwrap().count();
    assert_eq!(n, 2 * 8);
    assert!(tmp.path().join("c.1-stepwise-0.jsonl").exists());
}

#[test]
fn bench_reports_ratios() {
    let o = run(&["bench", "--config", &config(), "--greedy", "--reps", "1", "--max-new-tokens", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let baseline = out.lines().find(|l| l.starts_with("baseline")).unwrap();
    assert_eq!(baseline.matches("(1.00×)").count(), 2);
    assert!(out.contains("vcd-duplicate-omni"));
    assert_eq!(code(&run(&["bench", "--config", &config(), "--reps", "0"])), 3);

    let json = run(&["bench", "--config", &config(), "--greedy", "--reps", "1", "--max-new-tokens", "2", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn render_formats() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("t.jsonl");
    assert_eq!(code(&run(&["decode", "--config", &config(), "--greedy", "--trace-out", trace.to_str().unwrap()])), 0);
    let t = trace.to_str().unwrap();

    let term = stdout(&run(&["render", t]));
    assert!(term.contains("\u{1b}[") && term.contains("m2"));

    let html_path = tmp.path().join("a.html");
    assert_eq!(code(&run(&["render", t, "--format", "html", "--out", html_path.to_str().unwrap()])), 0);
    let html = fs::read_to_string(html_path).unwrap();
    assert!(html.contains("<html") && !html.contains("http"));

    let hist = stdout(&run(&["render", t, "--format", "histogram", "--bins", "4"]));
    let lines: Vec<&str> = hist.lines().collect();
    assert_eq!(lines[0], "bin_lo,bin_hi,count");
    let total: usize = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!((lines.len() - 1, total), (4, 4));

    assert_eq!(code(&run(&["render", t, "--format", "histogram", "--bins", "0"])), 3);
    assert_eq!(code(&run(&["render", "/nonexistent.jsonl"])), 3);
}

#[test]
fn seed_flag_beats_environment() {
    let seed_of = |o: &Output| -> u64 {
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v["sampler"]["seed"].as_u64().unwrap()
    };
    let env = bin().args(["show-config", "--config", &config()]).env("OMNIGUIDE_SEED", "9").output().unwrap();
    assert_eq!(seed_of(&env), 9);
    let flag = bin()
        .args(["show-config", "--config", &config(), "--seed", "3"])
        .env("OMNIGUIDE_SEED", "9")
        .output()
        .unwrap();
    assert_eq!(seed_of(&flag), 3);
}

#[test]
fn overrides_are_echoed() {
    let o = run(&[
        "show-config", "--config", &config(), "--strategy", "lrm_guide_fixed:0.7", "--top-p", "0.5",
        "--repetition-penalty", "1.2", "--warmup-steps", "2", "--warmup-slope", "0.3",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["guidance"]["strategy"], "lrm_guide_fixed");
    assert_eq!(v["guidance"]["alpha"], 0.7);
    assert_eq!(v["guidance"]["warmup_steps"], 2);
    assert_eq!(v["guidance"]["warmup_slope"], 0.3);
    assert_eq!(v["sampler"]["top_p"], 0.5);
    assert_eq!(v["sampler"]["repetition_penalty"], 1.2);
}
