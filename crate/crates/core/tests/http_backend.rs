//! The HTTP compensation client against a local mock of the service.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{Rgb, RgbImage};
use serde_json::{json, Value};

use dc3_core::compensator::{
    compensate, Backend, CompensateError, CompensationRequest, HttpBackend, HueFamily, HuePrompt,
    RetryPolicy,
};
use dc3_core::pipeline::{self, BackendConfig, PipelineConfig};
use dc3_core::raster;
use dc3_core::synthetic::{write_dataset, SynthSpec};

#[derive(Debug, Clone)]
struct Recorded {
    method: String,
    path: String,
    body: String,
}

type Handler = dyn Fn(&Recorded, usize) -> (u16, String) + Send + Sync;

struct MockServer {
    url: String,
    log: Arc<Mutex<Vec<Recorded>>>,
}

impl MockServer {
    fn start(handler: impl Fn(&Recorded, usize) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let log = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let shared = Arc::clone(&log);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let log = Arc::clone(&shared);
                let handler = Arc::clone(&handler);
                thread::spawn(move || serve(stream, &log, handler.as_ref()));
            }
        });
        Self { url, log }
    }

    fn requests(&self) -> Vec<Recorded> {
        self.log.lock().unwrap().clone()
    }

    fn backend(&self) -> HttpBackend {
        HttpBackend::with_retry(&self.url, RetryPolicy { retries: 2, base_backoff: Duration::from_millis(1) })
    }
}

fn serve(stream: TcpStream, log: &Mutex<Vec<Recorded>>, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut length = 0usize;
    loop {
        let mut header = String::new();
        reader.read_line(&mut header).unwrap();
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((k, v)) = header.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    let req = Recorded { method, path, body: String::from_utf8(body).unwrap() };
    let index = {
        let mut log = log.lock().unwrap();
        log.push(req.clone());
        log.len() - 1
    };
    let (status, body) = handler(&req, index);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.flush();
}

fn healthy(req: &Recorded) -> Option<(u16, String)> {
    (req.path == "/v1/health").then(|| (200, r#"{"status":"ok","model_ids":["m"]}"#.to_string()))
}

fn fixture() -> Value {
    serde_json::from_str(include_str!("fixtures/compensate_rainy.json")).unwrap()
}

fn decode_b64_png(s: &str) -> RgbImage {
    raster::decode_rgb(&STANDARD.decode(s).unwrap()).unwrap()
}

fn request(image: &RgbImage) -> CompensationRequest<'_> {
    CompensationRequest {
        image,
        prompt: HuePrompt::new("rainy", HueFamily::Cool),
        seed: 1234567,
        guidance_scale: 4.0,
    }
}

#[test]
fn replays_recorded_fixture() {
    let fx = fixture();
    let response = fx["response"].to_string();
    let server = MockServer::start(move |req, _| healthy(req).unwrap_or((200, response.clone())));
    let source = decode_b64_png(fx["request"]["image"].as_str().unwrap());
    let backend = server.backend();
    backend.health_check().unwrap();
    let out = compensate(&request(&source), &backend).unwrap();

    let want: Vec<u8> = fx["response_pixels"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|p| p.as_array().unwrap().iter().map(|c| c.as_u64().unwrap() as u8))
        .collect();
    assert_eq!(out.image.dimensions(), (fx["width"].as_u64().unwrap() as u32, fx["height"].as_u64().unwrap() as u32));
    assert_eq!(out.image.as_raw(), &want);
    let echo = out.service.unwrap();
    assert_eq!(echo.model_id.as_deref(), Some("ldm-img2img-v1"));
    assert_eq!(echo.steps, Some(json!(50)));
    assert_eq!(echo.strength, Some(json!(0.35)));
}

#[test]
fn request_body_matches_wire_schema() {
    let fx = fixture();
    let response = fx["response"].to_string();
    let server = MockServer::start(move |req, _| healthy(req).unwrap_or((200, response.clone())));
    let source = decode_b64_png(fx["request"]["image"].as_str().unwrap());
    compensate(&request(&source), &server.backend()).unwrap();

    let reqs = server.requests();
    assert_eq!(reqs.len(), 1);
    assert_eq!((reqs[0].method.as_str(), reqs[0].path.as_str()), ("POST", "/v1/compensate"));
    let body: Value = serde_json::from_str(&reqs[0].body).unwrap();
    let mut keys: Vec<_> = body.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["guidance_scale", "image", "prompt", "seed"]);
    for k in ["prompt", "seed", "guidance_scale"] {
        assert_eq!(body[k], fx["request"][k], "{k}");
    }
    assert_eq!(decode_b64_png(body["image"].as_str().unwrap()), source);
}

#[test]
fn client_errors_are_not_retried() {
    let server = MockServer::start(|_, _| (400, r#"{"detail":"bad prompt"}"#.into()));
    let img = RgbImage::new(4, 4);
    let err = compensate(&request(&img), &server.backend()).unwrap_err();
    match err {
        CompensateError::BackendError { status, body } => {
            assert_eq!(status, 400);
            assert!(body.contains("bad prompt"));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn server_errors_are_retried() {
    let img = RgbImage::from_pixel(3, 2, Rgb([10, 20, 30]));
    let reply = json!({"image": STANDARD.encode(raster::encode_png(&img).unwrap())}).to_string();
    let server = MockServer::start(move |_, i| if i < 2 { (503, "loading".into()) } else { (200, reply.clone()) });
    let out = compensate(&request(&img), &server.backend()).unwrap();
    assert_eq!(out.image, img);
    assert_eq!(server.requests().len(), 3);

    let down = MockServer::start(|_, _| (503, "loading".into()));
    let err = compensate(&request(&img), &down.backend()).unwrap_err();
    assert!(matches!(err, CompensateError::BackendError { status: 503, .. }), "{err:?}");
    assert_eq!(down.requests().len(), 3);
}

#[test]
fn health_check_requires_ok_status() {
    let loading = MockServer::start(|_, _| (503, "{}".into()));
    assert!(matches!(loading.backend().health_check(), Err(CompensateError::BackendError { status: 503, .. })));
    let wrong = MockServer::start(|_, _| (200, r#"{"status":"warming"}"#.into()));
    assert!(wrong.backend().health_check().is_err());
    let fine = MockServer::start(|req, _| healthy(req).unwrap());
    fine.backend().health_check().unwrap();
    assert_eq!(fine.requests()[0].method, "GET");
}

#[test]
fn unreachable_endpoint() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let backend = HttpBackend::with_retry(&url, RetryPolicy { retries: 1, base_backoff: Duration::from_millis(1) });
    assert!(matches!(backend.health_check(), Err(CompensateError::BackendUnreachable(u)) if u == url));
}

#[test]
fn wrong_size_or_garbage_responses_rejected() {
    let small = RgbImage::new(2, 2);
    let reply = json!({"image": STANDARD.encode(raster::encode_png(&small).unwrap())}).to_string();
    let server = MockServer::start(move |_, _| (200, reply.clone()));
    let img = RgbImage::new(4, 4);
    let err = compensate(&request(&img), &server.backend()).unwrap_err();
    assert!(matches!(err, CompensateError::DimensionMismatch { want_w: 4, got_w: 2, .. }), "{err:?}");

    let garbage = MockServer::start(|_, _| (200, r#"{"image":"***"}"#.into()));
    let err = compensate(&request(&img), &garbage.backend()).unwrap_err();
    assert!(matches!(err, CompensateError::MalformedResponse(_)), "{err:?}");
}

#[test]
fn pipeline_runs_through_http_service() {
    let server = MockServer::start(|req, _| {
        if let Some(h) = healthy(req) {
            return h;
        }
        let body: Value = serde_json::from_str(&req.body).unwrap();
        let mut img = decode_b64_png(body["image"].as_str().unwrap());
        for p in img.pixels_mut() {
            p.0[2] = p.0[2].saturating_add(40);
        }
        let png = raster::encode_png(&img).unwrap();
        (200, json!({"image": STANDARD.encode(png), "model_id": "mock", "steps": 4}).to_string())
    });
    let data = tempfile::tempdir().unwrap();
    write_dataset(&SynthSpec { classes: 2, per_class: 5, width: 6, height: 6, ..Default::default() }, data.path())
        .unwrap();
    let root = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::new(2);
    cfg.backend = BackendConfig::Http { endpoint: server.url.clone() };
    let manifest = pipeline::run(&cfg, data.path(), &root.path().join("out")).unwrap();
    assert_eq!(manifest.images.len(), 4);
    for img in &manifest.images {
        let p = &img.compensation[0];
        assert_eq!(p.backend, "http");
        assert_eq!(p.service.as_ref().unwrap().model_id.as_deref(), Some("mock"));
    }
    let posts = server.requests().iter().filter(|r| r.path == "/v1/compensate").count();
    assert_eq!(posts, 8);
}
