use std::io::{Read, Write};
use std::net::TcpStream;
use std::thread;

use depthkit::depth_api::{
    read_frame, Client, DepthServer, DepthStore, Request, Response, ResponseKind, ServerConfig, MAX_FRAME_LEN,
};
use depthkit::depth_codec::DepthMap;
use depthkit::raster;

fn store() -> DepthStore {
    let s = DepthStore::in_memory();
    s.insert("flat", DepthMap::filled(8, 8, 2500).unwrap());
    s
}

#[test]
fn malformed_requests_get_error_responses() {
    let server = DepthServer::bind_with_store("127.0.0.1:0", store(), 4).unwrap().spawn().unwrap();
    let mut raw = TcpStream::connect(server.local_addr()).unwrap();
    let body = br#"{"op":"dance"}"#;
    raw.write_all(&(body.len() as u32).to_le_bytes()).unwrap();
    raw.write_all(body).unwrap();
    let resp: Response = read_frame(&mut raw).unwrap().unwrap();
    assert!(!resp.ok);
    assert!(resp.text.starts_with("bad_request: "), "{}", resp.text);

    // The connection stays usable after a bad request.
    let mut c = Client::connect(server.local_addr()).unwrap();
    assert_eq!(c.step("s99", "Depth(0,0)").unwrap().text, "unknown_session: s99");
    assert_eq!(c.close("s99").unwrap().text, "unknown_session: s99");

    // An oversized length prefix drops the connection.
    let mut big = TcpStream::connect(server.local_addr()).unwrap();
    big.write_all(&(MAX_FRAME_LEN as u32 + 1).to_le_bytes()).unwrap();
    let mut buf = [0u8; 1];
    assert_eq!(big.read(&mut buf).unwrap_or(0), 0);
    server.shutdown();
}

#[test]
fn per_session_turn_limit_override() {
    let server = DepthServer::bind_with_store("127.0.0.1:0", store(), 4).unwrap().spawn().unwrap();
    let mut c = Client::connect(server.local_addr()).unwrap();
    let r = c
        .request(&Request::Open {
            depth_map: "flat".into(),
            max_turns: Some(1),
        })
        .unwrap();
    let s = r.session.unwrap();
    assert_eq!(c.step(&s, "Depth(1,1)").unwrap().text, "Depth(1,1)=2500mm");
    assert_eq!(c.step(&s, "Depth(1,1)").unwrap().kind, ResponseKind::Final);
    server.shutdown();
}

#[test]
fn many_concurrent_clients() {
    let server = DepthServer::bind_with_store("127.0.0.1:0", store(), 3).unwrap().spawn().unwrap();
    let addr = server.local_addr();
    let handles: Vec<_> = (0..8)
        .map(|i| {
            thread::spawn(move || {
                let mut c = Client::connect(addr).unwrap();
                let s = c.open("flat").unwrap().session.unwrap();
                let mut kinds = Vec::new();
                for _ in 0..4 {
                    kinds.push(c.step(&s, &format!("Depth({i},{i})")).unwrap().kind);
                }
                assert_eq!(c.close(&s).unwrap().kind, ResponseKind::Closed);
                kinds
            })
        })
        .collect();
    for h in handles {
        let kinds = h.join().unwrap();
        assert_eq!(kinds.iter().filter(|k| **k == ResponseKind::ToolResponse).count(), 3);
        assert_eq!(kinds.last(), Some(&ResponseKind::Final));
    }
    assert_eq!(server.open_sessions(), 0);
    server.shutdown();
}

#[test]
fn file_backed_store_and_config() {
    let dir = tempfile::tempdir().unwrap();
    raster::write_sbd1(&dir.path().join("room.sbd"), &DepthMap::filled(2, 3, 4321).unwrap()).unwrap();
    let config: ServerConfig = serde_json::from_value(serde_json::json!({
        "listen": "127.0.0.1:0",
        "store_root": dir.path(),
    }))
    .unwrap();
    assert_eq!(config.max_turns, 4);
    let server = DepthServer::bind(&config).unwrap().spawn().unwrap();
    let mut c = Client::connect(server.local_addr()).unwrap();
    let s = c.open("room").unwrap().session.unwrap();
    assert_eq!(c.step(&s, "Depth(2,1)").unwrap().text, "Depth(2,1)=4321mm");
    assert!(!c.open("../room").unwrap().ok);
    server.shutdown();

    let bad = ServerConfig {
        store_root: dir.path().join("missing"),
        ..config
    };
    assert!(DepthServer::bind(&bad).is_err());
}
