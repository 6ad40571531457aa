use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use base64::Engine;
use cirrus::attack::{attack, AttackConfig};
use cirrus::de::DeConfig;
use cirrus::imaging::Image;
use cirrus::models::{Concurrency, ModelError, RemoteConfig, RemoteModel, TargetModel};
use cirrus::pggn::GeneratorWeights;
use tiny_http::{Header, Response, Server};

const LABELS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

struct Reply {
    status: u16,
    content_type: &'static str,
    body: String,
    delay: Duration,
}

impl Reply {
    fn json(body: serde_json::Value) -> Self {
        Reply { status: 200, content_type: "application/json", body: body.to_string(), delay: Duration::ZERO }
    }
}

/// Serves `/health` and `/labels` normally and `/classify` with `handler`,
/// which receives the decoded image.
struct Mock {
    server: Arc<Server>,
    classify_calls: Arc<AtomicUsize>,
    worker: Option<thread::JoinHandle<()>>,
}

impl Mock {
    fn start(handler: impl Fn(&Image) -> Reply + Send + Sync + 'static) -> Self {
        let server = Arc::new(Server::http("127.0.0.1:0").unwrap());
        let classify_calls = Arc::new(AtomicUsize::new(0));
        let handler = Arc::new(handler);
        let (srv, calls) = (server.clone(), classify_calls.clone());
        let worker = thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                let handler = handler.clone();
                let calls = calls.clone();
                thread::spawn(move || {
                    let reply = match req.url() {
                        "/health" => Reply::json(serde_json::json!({"status": "ok"})),
                        "/labels" => Reply::json(serde_json::json!({ "labels": LABELS })),
                        "/classify" => {
                            calls.fetch_add(1, Ordering::SeqCst);
                            let mut body = String::new();
                            req.as_reader().read_to_string(&mut body).unwrap();
                            let v: serde_json::Value = serde_json::from_str(&body).unwrap();
                            let png = base64::engine::general_purpose::STANDARD
                                .decode(v["image_png_b64"].as_str().unwrap())
                                .unwrap();
                            handler(&Image::decode_png(&png).unwrap())
                        }
                        _ => Reply { status: 404, content_type: "text/plain", body: "no".into(), delay: Duration::ZERO },
                    };
                    thread::sleep(reply.delay);
                    let header = Header::from_bytes("Content-Type", reply.content_type).unwrap();
                    let resp = Response::from_string(reply.body).with_status_code(reply.status).with_header(header);
                    let _ = req.respond(resp);
                });
            }
        });
        Mock { server, classify_calls, worker: Some(worker) }
    }

    fn url(&self) -> String {
        format!("http://{}", self.server.server_addr().to_ip().unwrap())
    }

    fn connect(&self) -> RemoteModel {
        RemoteModel::connect(&RemoteConfig::new(self.url())).unwrap()
    }

    fn calls(&self) -> usize {
        self.classify_calls.load(Ordering::SeqCst)
    }
}

impl Drop for Mock {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn probs(p: &[f64]) -> Reply {
    let label = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
    Reply::json(serde_json::json!({ "probs": p, "label": label }))
}

fn gray() -> Image {
    Image::filled(8, 8, 3, 0.5)
}

#[test]
fn well_formed_response_is_parsed() {
    let mock = Mock::start(|_| probs(&[0.1, 0.6, 0.1, 0.1, 0.05, 0.05]));
    let model = mock.connect();
    assert_eq!(model.label_count(), 6);
    assert_eq!(model.labels().unwrap(), LABELS);
    let p = model.classify(&gray()).unwrap();
    assert_eq!(p.argmax(), 1);
    assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(mock.calls(), 1);
}

#[test]
fn image_survives_the_wire() {
    let img = Image::from_fn(5, 7, 3, |y, x, c| ((y * 7 + x) * 3 + c) as f64 / 105.0).quantized();
    let expected = img.clone();
    let mock = Mock::start(move |got| {
        assert_eq!(got, &expected);
        probs(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    });
    assert_eq!(mock.connect().classify(&img).unwrap().argmax(), 0);
}

#[test]
fn short_probability_vector_is_rejected() {
    let mock = Mock::start(|_| probs(&[0.25, 0.25, 0.25, 0.25]));
    let err = mock.connect().classify(&gray()).unwrap_err();
    assert!(matches!(err, ModelError::LengthMismatch { expected: 6, got: 4 }), "{err}");
    assert!(err.is_protocol_violation());
}

#[test]
fn probabilities_off_the_simplex_are_rejected() {
    let mock = Mock::start(|_| probs(&[0.5, 0.5, 0.5, 0.0, 0.0, 0.0]));
    let err = mock.connect().classify(&gray()).unwrap_err();
    assert!(matches!(err, ModelError::ProbabilitySum { .. }), "{err}");

    let mock = Mock::start(|_| probs(&[1.2, -0.2, 0.0, 0.0, 0.0, 0.0]));
    let err = mock.connect().classify(&gray()).unwrap_err();
    assert!(matches!(err, ModelError::ProbabilityOutOfRange { .. }), "{err}");
}

#[test]
fn small_sum_error_is_renormalized() {
    let mock = Mock::start(|_| probs(&[0.5004, 0.5, 0.0, 0.0, 0.0, 0.0]));
    let p = mock.connect().classify(&gray()).unwrap();
    assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn bad_status_carries_body() {
    let mock = Mock::start(|_| Reply { status: 503, content_type: "text/plain", body: "busy".into(), delay: Duration::ZERO });
    let err = mock.connect().classify(&gray()).unwrap_err();
    assert!(matches!(&err, ModelError::BadStatus { status: 503, body } if body == "busy"), "{err}");
    assert!(err.is_retryable());

    let mock = Mock::start(|_| Reply { status: 400, content_type: "text/plain", body: "bad".into(), delay: Duration::ZERO });
    let err = mock.connect().classify(&gray()).unwrap_err();
    assert!(!err.is_retryable());
}

#[test]
fn malformed_bodies_are_rejected() {
    let mock = Mock::start(|_| Reply { status: 200, content_type: "application/json", body: "{\"probs\": [0.1,".into(), delay: Duration::ZERO });
    assert!(matches!(mock.connect().classify(&gray()), Err(ModelError::MalformedBody(_))));

    let mock = Mock::start(|_| Reply { status: 200, content_type: "text/html", body: "{}".into(), delay: Duration::ZERO });
    assert!(matches!(mock.connect().classify(&gray()), Err(ModelError::MalformedBody(_))));

    let mock = Mock::start(|_| Reply::json(serde_json::json!({"probs": [1.0, 0, 0, 0, 0, 0], "label": 9})));
    assert!(matches!(mock.connect().classify(&gray()), Err(ModelError::MalformedBody(_))));
}

#[test]
fn slow_server_times_out() {
    let mock = Mock::start(|_| Reply { delay: Duration::from_millis(1500), ..probs(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]) });
    let cfg = RemoteConfig { timeout_secs: 0.3, ..RemoteConfig::new(mock.url()) };
    let err = RemoteModel::connect(&cfg).unwrap().classify(&gray()).unwrap_err();
    assert!(matches!(err, ModelError::Timeout(_)), "{err}");
    assert!(err.is_retryable());
}

#[test]
fn unreachable_server_is_a_network_error() {
    let addr = {
        let probe = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        probe.local_addr().unwrap()
    };
    let err = RemoteModel::connect(&RemoteConfig::new(format!("http://{addr}"))).unwrap_err();
    assert!(matches!(err, ModelError::Network(_)), "{err}");
}

#[test]
fn concurrent_clients_are_all_counted() {
    let mock = Mock::start(|_| probs(&[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]));
    let model = Arc::new(mock.connect());
    let (threads, per_thread) = (4, 5);
    let handles: Vec<_> = (0..threads)
        .map(|_| {
            let model = model.clone();
            thread::spawn(move || {
                for _ in 0..per_thread {
                    assert_eq!(model.classify(&gray()).unwrap().argmax(), 2);
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(mock.calls(), threads * per_thread);
}

#[test]
fn attack_query_count_matches_server_log() {
    // Class 1 once the image brightens past a threshold.
    let mock = Mock::start(|img| {
        let mean = img.data().iter().sum::<f64>() / img.len() as f64;
        if mean > 0.56 {
            probs(&[0.2, 0.8, 0.0, 0.0, 0.0, 0.0])
        } else {
            probs(&[0.9, 0.1, 0.0, 0.0, 0.0, 0.0])
        }
    });
    let cfg = RemoteConfig { concurrency: Concurrency::Safe, ..RemoteConfig::new(mock.url()) };
    let model = RemoteModel::connect(&cfg).unwrap();
    let clear = Image::filled(16, 16, 3, 0.5);
    let gen = GeneratorWeights::random(8, 1);
    let acfg = AttackConfig {
        de: DeConfig { np: 6, max_evals: 30, concurrent: true, ..DeConfig::default() },
        resolution: None,
        ..AttackConfig::default()
    };
    let result = attack(&clear, 0, &model, &gen, &acfg).unwrap();
    assert_eq!(result.queries as usize, mock.calls());
    assert!(result.queries as usize <= 30 + 6);
}
