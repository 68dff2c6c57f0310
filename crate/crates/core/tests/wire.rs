use std::io::Write;
use std::net::TcpStream;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use cloudnet_core::wire::{
    call, decode, decode_prefix, encode_frame, read_frame, write_frame, CallError, Envelope, FrameError, Handler,
    Message, RemoteFailure, Server,
};
use proptest::prelude::*;

const T: Duration = Duration::from_secs(5);

struct Echo;

impl Handler for Echo {
    fn serves(&self, method: &str) -> bool {
        method != "cloudnet_delete"
    }

    fn handle(&self, method: &str, body: &[u8]) -> Result<Vec<u8>, RemoteFailure> {
        match method {
            "negotiate_confirm" => Err(RemoteFailure::new("not_preliminary", "too late")),
            "provision_stop" => {
                thread::sleep(Duration::from_millis(400));
                Ok(Vec::new())
            }
            _ => {
                let env = Envelope::decode(body).map_err(RemoteFailure::bad_request)?;
                Ok(env.field("echo", method).encode())
            }
        }
    }
}

fn server() -> Server {
    Server::bind("127.0.0.1:0", Arc::new(Echo)).unwrap()
}

#[test]
fn request_and_remote_errors() {
    let s = server();
    let addr = s.local_addr().to_string();
    let body = call(&addr, "sync_resources", Envelope::new().field("x", 1).encode(), T).unwrap();
    let env = Envelope::decode(&body).unwrap();
    assert_eq!(env.get("echo"), Some("sync_resources"));
    assert_eq!(env.get("x"), Some("1"));

    match call(&addr, "negotiate_confirm", Vec::new(), T) {
        Err(CallError::Remote { code, message }) => {
            assert_eq!(code, "not_preliminary");
            assert_eq!(message, "too late");
        }
        other => panic!("{other:?}"),
    }
    for m in ["no_such_method", "cloudnet_delete"] {
        let e = call(&addr, m, Vec::new(), T).unwrap_err();
        assert_eq!(e.code(), "unknown_method", "{m}");
        assert!(!e.is_transport());
    }
    let e = call(&addr, "console_lookup", b"@doc 99\nx".to_vec(), T).unwrap_err();
    assert_eq!(e.code(), "bad_request");
    s.shutdown();
}

#[test]
fn one_connection_carries_many_requests() {
    let s = server();
    let mut stream = TcpStream::connect(s.local_addr()).unwrap();
    for id in [5u64, 6, 900] {
        write_frame(&mut stream, &Message::request(id, "console_lookup", Envelope::new().encode())).unwrap();
    }
    for id in [5u64, 6, 900] {
        let r = read_frame(&mut stream).unwrap();
        assert_eq!(r.correlation_id, id);
        assert_eq!(r.status(), Some("ok"));
    }
    s.shutdown();
}

#[test]
fn concurrent_clients() {
    let s = server();
    let addr = s.local_addr().to_string();
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let addr = addr.clone();
            thread::spawn(move || {
                for j in 0..20 {
                    let body = call(&addr, "console_lookup", Envelope::new().field("n", i * 100 + j).encode(), T).unwrap();
                    assert_eq!(Envelope::decode(&body).unwrap().get("n"), Some((i * 100 + j).to_string().as_str()));
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    s.shutdown();
}

#[test]
fn slow_handler_times_out() {
    let s = server();
    let e = call(&s.local_addr().to_string(), "provision_stop", Vec::new(), Duration::from_millis(100)).unwrap_err();
    assert!(matches!(e, CallError::Timeout), "{e:?}");
    assert!(e.is_transport());
    s.shutdown();
}

#[test]
fn closed_port_is_refused() {
    let s = server();
    let addr = s.local_addr().to_string();
    s.shutdown();
    let e = call(&addr, "sync_resources", Vec::new(), T).unwrap_err();
    assert!(matches!(e, CallError::ConnectionRefused(_)), "{e:?}");
    assert_eq!(e.code(), "connection_refused");
}

#[test]
fn garbage_does_not_kill_the_server() {
    let s = server();
    let mut raw = TcpStream::connect(s.local_addr()).unwrap();
    raw.write_all(&[0, 0, 0, 5, b'H', b'E', b'L', b'L', b'O']).unwrap();
    drop(raw);
    let mut half = TcpStream::connect(s.local_addr()).unwrap();
    half.write_all(&[0, 0, 1]).unwrap();
    drop(half);
    assert!(call(&s.local_addr().to_string(), "sync_resources", Vec::new(), T).is_ok());
    s.shutdown();
}

#[test]
fn decode_rejects_bad_frames() {
    let good = encode_frame(&Message::request(1, "sync_resources", b"abc".to_vec())).unwrap();
    let mut long = good.clone();
    long.push(0);
    assert!(matches!(decode(&long), Err(FrameError::TrailingBytes(1))));
    let (m, used) = decode_prefix(&long).unwrap();
    assert_eq!(used, good.len());
    assert_eq!(m.body, b"abc");
    let mut bad = good.clone();
    bad[4] = b'X';
    assert!(matches!(decode(&bad), Err(FrameError::BadHeader(_))));
}

fn text() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[a-z0-9;=@\\\\\n\r .é-]{0,12}").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn envelopes_round_trip(
        fields in proptest::collection::btree_map("[a-z][a-z0-9.;=_-]{0,8}", text(), 0..6),
        docs in proptest::collection::btree_map("[a-z][a-z0-9._-]{0,8}", proptest::collection::vec(any::<u8>(), 0..64), 0..4),
    ) {
        let mut env = Envelope::new();
        for (k, v) in &fields {
            env = env.field(k.clone(), v);
        }
        for (k, d) in &docs {
            env = env.doc(k.clone(), d.clone());
        }
        let back = Envelope::decode(&env.encode()).unwrap();
        prop_assert_eq!(&back, &env);
        for (k, v) in &fields {
            prop_assert_eq!(back.get(k), Some(v.as_str()));
        }
    }

    #[test]
    fn frames_round_trip(id in any::<u64>(), req in any::<bool>(), body in proptest::collection::vec(any::<u8>(), 0..256)) {
        let m = if req { Message::request(id, "negotiate_modify", body) } else { Message::response(id, "vlan_conflict", body) };
        prop_assert_eq!(decode(&encode_frame(&m).unwrap()).unwrap(), m);
    }
}
