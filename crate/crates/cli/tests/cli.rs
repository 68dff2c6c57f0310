use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use cloudnet_core::codec::write_graph_file;
use cloudnet_core::scenario::{compaction_request, compaction_spec, pip_substrate, star13_spec, star_request, Federation, PipSpec};
use cloudnet_core::wire::Envelope;

fn cloudnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cloudnet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// An address nothing listens on.
fn dead_addr() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

#[test]
fn scenarios_pass() {
    let o = cloudnet(&["scenario", "all"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("star13: PASS"));
    assert!(out.contains("compaction20: PASS"));
    assert!(!out.contains("FAIL"));
    assert_eq!(code(&cloudnet(&["scenario", "nope"])), 1);
}

#[test]
fn malformed_request_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("bad.cng");
    std::fs::write(&f, "not a graph\n").unwrap();
    let o = cloudnet(&["submit", f.to_str().unwrap(), "--vnp", &dead_addr()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
    assert_eq!(code(&cloudnet(&["submit", "/no/such/file.cng", "--vnp", "127.0.0.1:1"])), 2);
    assert_eq!(code(&cloudnet(&["status", "cn-0001"])), 2, "no broker address");
}

#[test]
fn broker_down_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("star.cng");
    write_graph_file(&f, &star_request(2, 256.0, 10.0)).unwrap();
    let addr = dead_addr();
    assert_eq!(code(&cloudnet(&["submit", f.to_str().unwrap(), "--vnp", &addr])), 3);
    assert_eq!(code(&cloudnet(&["status", "cn-0001", "--vnp", &addr])), 3);
}

#[test]
fn broker_round_trip() {
    let fed = Federation::start(&star13_spec()).unwrap();
    let vnp = fed.vnp_addr.to_string();
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("star13.cng");
    write_graph_file(&graph, &star_request(12, 512.0, 10.0)).unwrap();
    let reply = dir.path().join("reply.env");

    let o = cloudnet(&["submit", graph.to_str().unwrap(), "--vnp", &vnp, "--output", reply.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("placement pip1=12 pip2=1"), "{}", stdout(&o));
    let env = Envelope::decode(&std::fs::read(&reply).unwrap()).unwrap();
    let id = env.require("id").unwrap().to_string();
    assert_eq!(env.prefixed("token.").count(), 13);

    let o = cloudnet(&["status", &id, "--vnp", &vnp]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.starts_with(&format!("{id} confirmed")), "{out}");
    assert!(out.contains("vlan 2000"), "{out}");

    assert_eq!(code(&cloudnet(&["delete", &id, "--vnp", &vnp])), 0);
    assert_eq!(fed.live_contracts(), 0);
    let o = cloudnet(&["delete", &id, "--vnp", &vnp]);
    assert_eq!(code(&o), 4);
    assert_eq!(code(&cloudnet(&["status", "cn-4242", "--vnp", &vnp])), 4);
    fed.shutdown();
}

#[test]
fn migrate_analyze_reports_a_plan() {
    let fed = Federation::start(&compaction_spec()).unwrap();
    let out = fed.vnp.submit_cloudnet(&compaction_request()).unwrap();
    let vnp = fed.vnp_addr.to_string();
    let o = cloudnet(&["migrate-analyze", &out.id, "--vnp", &vnp]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("analysis"), "{}", stdout(&o));
    assert!(stdout(&o).contains("freed ram=2048"), "{}", stdout(&o));
    assert_eq!(code(&cloudnet(&["migrate-analyze", &out.id, "--vnp", &vnp, "--objective", "bogus"])), 2);
    let o = cloudnet(&["migrate-analyze", &out.id, "--vnp", &vnp, "--apply"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("applied"));
    fed.shutdown();
}

struct Daemon(Child);

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts a daemon on an ephemeral port and returns it with its address.
fn daemon(kind: &str, config: &Path) -> (Daemon, String) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_cloudnet"))
        .args([kind, "--config", config.to_str().unwrap(), "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("{line:?}")).to_string();
    (Daemon(child), addr)
}

#[test]
fn daemons_from_config_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_graph_file(&p.join("pip1.cng"), &pip_substrate(&PipSpec::uniform("pip1", 2, 2048.0, 4.0))).unwrap();
    std::fs::write(p.join("pipd.toml"), "id = \"pip1\"\nsubstrate = \"pip1.cng\"\njournal = \"pip1-journal\"\n").unwrap();
    let (_pip, pip_addr) = daemon("pipd", &p.join("pipd.toml"));

    write_graph_file(
        &p.join("transit.cng"),
        &cloudnet_core::scenario::transit_graph(&["pip1"], &[]),
    )
    .unwrap();
    std::fs::write(
        p.join("vnpd.toml"),
        format!("transit = \"transit.cng\"\njournal = \"vnp-journal\"\n[pips]\npip1 = \"{pip_addr}\"\n"),
    )
    .unwrap();
    let (_vnp, vnp_addr) = daemon("vnpd", &p.join("vnpd.toml"));

    write_graph_file(&p.join("req.cng"), &star_request(3, 256.0, 10.0)).unwrap();
    let o = cloudnet(&["submit", p.join("req.cng").to_str().unwrap(), "--vnp", &vnp_addr]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("placement pip1=4"), "{}", stdout(&o));
    assert!(p.join("pip1-journal").is_dir());
    assert!(p.join("vnp-journal").is_dir());
}
