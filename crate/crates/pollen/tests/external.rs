use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::thread;
use std::time::{Duration, Instant};

use pollen::external::{Endpoint, ExternalEmbedder};
use pollen::Error;
use pollen_core::embed::Embedder;
use pollen_core::prep::NormalizedCrop;

fn crop() -> NormalizedCrop {
    NormalizedCrop::new(4, (0..48).map(|i| i as f32 * 0.25).collect()).unwrap()
}

/// Serves one connection, answering every request line with `reply(request)`.
fn serve(reply: impl Fn(&serde_json::Value) -> Option<String> + Send + 'static) -> Endpoint {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut w = stream.try_clone().unwrap();
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { break };
            let req: serde_json::Value = serde_json::from_str(&line).unwrap();
            match reply(&req) {
                Some(r) => {
                    if writeln!(w, "{r}").is_err() {
                        break;
                    }
                }
                None => thread::sleep(Duration::from_secs(2)),
            }
        }
    });
    Endpoint::Tcp(addr.to_string())
}

fn unit(dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[dim - 1] = 1.0;
    v
}

#[test]
fn echo_server_returns_its_vector() {
    let ep = serve(|req| {
        let id = req["id"].as_u64().unwrap();
        assert_eq!(req["shape"], serde_json::json!([3, 4, 4]));
        Some(serde_json::json!({"id": id, "embedding": unit(128)}).to_string())
    });
    let e = ExternalEmbedder::connect(&ep, 128, 4, Duration::from_secs(5)).unwrap();
    assert_eq!(e.dim(), 128);
    assert_eq!(e.request(&crop()).unwrap().values(), unit(128).as_slice());
    assert_eq!(e.embed(&crop()).unwrap().values(), unit(128).as_slice());
}

#[test]
fn payload_is_base64_little_endian_f32() {
    let ep = serve(|req| {
        use base64::Engine as _;
        let bytes = base64::engine::general_purpose::STANDARD.decode(req["data"].as_str().unwrap()).unwrap();
        let vals: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let emb: Vec<f64> = vals[..8].iter().map(|&v| f64::from(v) + 1.0).collect();
        Some(serde_json::json!({"id": req["id"], "embedding": emb}).to_string())
    });
    let e = ExternalEmbedder::connect(&ep, 8, 4, Duration::from_secs(5)).unwrap();
    let got = e.request(&crop()).unwrap();
    let raw: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 + 1.0).collect();
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (g, r) in got.values().iter().zip(&raw) {
        assert!((g - r / n).abs() < 1e-12, "re-normalised");
    }
}

#[test]
fn wrong_dimension_is_its_own_error() {
    let ep = serve(|req| Some(serde_json::json!({"id": req["id"], "embedding": unit(64)}).to_string()));
    let e = ExternalEmbedder::connect(&ep, 128, 4, Duration::from_secs(5)).unwrap();
    assert!(matches!(e.request(&crop()), Err(Error::EmbeddingDimension { expected: 128, got: 64 })));
}

#[test]
fn silence_times_out() {
    let ep = serve(|_| None);
    let e = ExternalEmbedder::connect(&ep, 128, 4, Duration::from_millis(200)).unwrap();
    let start = Instant::now();
    let r = e.request(&crop());
    assert!(matches!(r, Err(Error::Timeout(d)) if d == Duration::from_millis(200)), "{r:?}");
    assert!(start.elapsed() < Duration::from_secs(2));
    let mapped = e.embed(&crop()).unwrap_err();
    assert!(matches!(mapped, pollen_core::Error::Embedder(_)));
}

#[test]
fn malformed_reply_is_a_protocol_error() {
    let ep = serve(|_| Some("{\"nope\": true}".into()));
    let e = ExternalEmbedder::connect(&ep, 128, 4, Duration::from_secs(5)).unwrap();
    assert!(matches!(e.request(&crop()), Err(Error::Protocol(_))));
}

#[test]
fn closed_connection_is_a_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || drop(listener.accept().unwrap()));
    let e = ExternalEmbedder::connect(&Endpoint::Tcp(addr.to_string()), 128, 4, Duration::from_secs(5)).unwrap();
    assert!(matches!(e.request(&crop()), Err(Error::Transport(_))));
}

#[test]
fn stdio_child_speaks_the_same_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("echo.py");
    std::fs::write(
        &script,
        "import sys, json\n\
         for line in sys.stdin:\n\
         \x20   req = json.loads(line)\n\
         \x20   print(json.dumps({'id': req['id'], 'embedding': [3.0, 4.0]}), flush=True)\n",
    )
    .unwrap();
    let ep: Endpoint = format!("stdio:python3 {}", script.display()).parse().unwrap();
    let e = ExternalEmbedder::connect(&ep, 2, 4, Duration::from_secs(10)).unwrap();
    assert_eq!(e.request(&crop()).unwrap().values(), &[0.6, 0.8]);
    assert_eq!(e.request(&crop()).unwrap().values(), &[0.6, 0.8]);
}

#[test]
fn endpoints_parse() {
    assert_eq!("tcp://localhost:9000".parse::<Endpoint>().unwrap(), Endpoint::Tcp("localhost:9000".into()));
    assert_eq!("stdio:a b".parse::<Endpoint>().unwrap(), Endpoint::Stdio(vec!["a".into(), "b".into()]));
    assert!(matches!("http://x".parse::<Endpoint>(), Err(Error::Config(_))));
}
