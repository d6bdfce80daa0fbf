use std::process::Command;

use langarm_gateway::{spawn, ServeConfig};

fn langarm(server: &str, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_langarm"))
        .arg("--server")
        .arg(server)
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn commands_go_through_the_gateway() {
    let dir = tempfile::tempdir().unwrap();
    let addr = spawn(ServeConfig {
        addr: "127.0.0.1:0".parse().unwrap(),
        episode_dir: dir.path().join("episodes"),
        ..ServeConfig::default()
    })
    .unwrap();
    let server = format!("http://{addr}");

    let out = langarm(&server, &["vocab"]);
    assert!(out.status.success());
    let vocab: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(vocab.as_array().unwrap().len(), 58);

    let demos = dir.path().join("demos");
    let out = langarm(
        &server,
        &["collect", "--tasks", "point", "--episodes", "2", "--out", demos.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["episodes"], 2);

    let csv = dir.path().join("q.csv");
    let out = langarm(
        &server,
        &["quantize", "--data", demos.to_str().unwrap(), "--ks", "1,2", "--csv", csv.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().count(), 3);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "tasks = 5").unwrap();
    let out = langarm(&server, &["bench", bad.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn unreachable_server_is_an_error() {
    let out = langarm("http://127.0.0.1:1", &["vocab"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
