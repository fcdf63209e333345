use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use cowrite::clock::SystemClock;
use cowrite::gateway::{Gateway, MockScript};
use cowrite::hub::Hub;
use cowrite_server::{router, AppState};
use serde_json::Value;

fn simcli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simcli")).args(args).env_remove("ADMIN_TOKEN").output().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/scenarios").join(name).display().to_string()
}

#[test]
fn in_process_admin_commands() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().to_str().unwrap();
    let created = json(&simcli(&["create-doc", "--in-process", "--data-dir", data, "--goal", "a travel guide"]));
    assert_eq!(created["doc_id"], "d1");
    assert_eq!(created["join_code"].as_str().unwrap().len(), 8);
    json(&simcli(&["create-doc", "--data-dir", data]));

    let listed = json(&simcli(&["list-docs", "--data-dir", data]));
    let ids: Vec<&str> = listed.as_array().unwrap().iter().map(|d| d["doc_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["d1", "d2"]);

    let dump = json(&simcli(&["dump-doc", "d1", "--data-dir", data]));
    assert_eq!(dump["snapshot"]["text"], "");
    assert_eq!(dump["snapshot"]["goal_text"], "a travel guide");
    assert_eq!(dump["snapshot"]["state"]["agents"]["agents"].as_object().map(|a| a.len()), Some(1));

    let doc_dir = dir.path().join("documents/d1");
    let replayed = json(&simcli(&["replay-log", doc_dir.to_str().unwrap()]));
    assert_eq!(replayed["state_hash"], dump["state_hash"]);
    let by_file = json(&simcli(&["replay-log", doc_dir.join("log.jsonl").to_str().unwrap()]));
    assert_eq!(by_file["state_hash"], dump["state_hash"]);

    let missing = simcli(&["dump-doc", "d9", "--data-dir", data]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn run_writes_a_report_and_sets_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let out = simcli(&["run", &fixture("comment_flow.scn"), "--report", report.to_str().unwrap()]);
    let printed = json(&out);
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(printed, written);
    assert_eq!(printed["passed"], true);

    let failing = dir.path().join("failing.scn");
    std::fs::write(&failing, "doc\nat 0:00 a join\nat 0:01 expect online 2\n").unwrap();
    let out = simcli(&["run", failing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":3 "));

    let broken = dir.path().join("broken.scn");
    std::fs::write(&broken, "doc\nat 0:00 a join\nat x a save\n").unwrap();
    let out = simcli(&["run", broken.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let remote = simcli(&["run", &fixture("empty.scn"), "--server", "http://127.0.0.1:9"]);
    assert_eq!(remote.status.code(), Some(2));
}

#[test]
fn suite_command_reports_json() {
    let out = json(&simcli(&["suite", "contracts", "--sequential"]));
    assert_eq!(out["contracts"]["titles"]["generations"], 100);
}

fn serve(admin: &str) -> String {
    let hub = Hub::in_memory(Arc::new(Gateway::mock(MockScript::default())), Arc::new(SystemClock));
    let app = router(AppState { hub, admin_token: Some(admin.to_owned()) });
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

#[test]
fn server_admin_commands_and_exit_codes() {
    let url = serve("sekrit");
    let denied = simcli(&["create-doc", "--server", &url]);
    assert_eq!(denied.status.code(), Some(4));
    let wrong = simcli(&["create-doc", "--server", &url, "--token", "nope"]);
    assert_eq!(wrong.status.code(), Some(4));

    let created = json(&simcli(&["create-doc", "--server", &url, "--token", "sekrit", "--goal", "notes"]));
    let doc = created["doc_id"].as_str().unwrap();
    let listed = json(&simcli(&["list-docs", "--server", &url]));
    assert_eq!(listed.as_array().unwrap().len(), 1);
    let dump = json(&simcli(&["dump-doc", doc, "--server", &url]));
    assert_eq!(dump["snapshot"]["goal_text"], "notes");
    assert_eq!(dump["state_hash"].as_str().unwrap().len(), 64);

    let missing = simcli(&["dump-doc", "d42", "--server", &url]);
    assert_eq!(missing.status.code(), Some(1));

    let closed = simcli(&["list-docs", "--server", "http://127.0.0.1:9"]);
    assert_eq!(closed.status.code(), Some(3));
}
