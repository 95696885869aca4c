use blursplat::image::Image;
use blursplat::lie::{PoseSE3, TangentSE3};
use blursplat::priors::{
    DeblurRequest, GroundTruthOracle, NoisyOracle, PriorProvider, ProviderError, RepairRequest,
};
use blursplat::rng::SceneRng;
use blursplat::scene::{generate_scene, SceneLayout, SceneRecipe};
use blursplat::splat::CameraIntrinsics;
use blursplat_service::{LocalServer, RemoteConfig, RemoteProvider, ServeOptions};
use nalgebra::{Vector3, Vector6};
use std::sync::Arc;
use std::time::Duration;

fn oracle() -> GroundTruthOracle {
    let scene = Arc::new(generate_scene(&SceneRecipe::new(5, 80, SceneLayout::ClusterField)).unwrap());
    let k = CameraIntrinsics::from_fov(32, 24, 50.0).unwrap();
    let frames = (0..4).map(pose_at).collect();
    GroundTruthOracle::new(scene, k, frames)
}

fn pose_at(i: usize) -> PoseSE3 {
    let a = 0.2 * i as f64 - 0.3;
    PoseSE3::look_at(
        Vector3::new(4.5 * a.sin(), -0.5, -4.5 * a.cos()),
        Vector3::new(0.0, 0.0, 0.3),
        Vector3::new(0.0, -1.0, 0.0),
    )
}

fn random_pose(rng: &mut SceneRng) -> PoseSE3 {
    let d = Vector6::from_fn(|_, _| rng.uniform(-0.1, 0.1));
    pose_at(rng.below(4)).retract_left(&TangentSE3::from_vector(&d))
}

fn random_image(rng: &mut SceneRng) -> Image {
    Image::from_fn(32, 24, 3, |_, _, _| rng.uniform(0.0, 1.0)).quantize_u16()
}

fn start(opts: ServeOptions) -> LocalServer {
    LocalServer::start(oracle(), opts, "127.0.0.1:0".parse().unwrap()).unwrap()
}

fn client(server: &LocalServer) -> RemoteProvider {
    RemoteProvider::connect(RemoteConfig {
        base_url: server.url(),
        retries: 1,
        backoff_ms: 10,
        ..Default::default()
    })
    .unwrap()
}

enum Req {
    Deblur(DeblurRequest),
    Repair(RepairRequest),
}

fn requests(n: usize, seed: u64) -> Vec<Req> {
    let mut rng = SceneRng::new(seed);
    (0..n)
        .map(|i| {
            if i % 2 == 0 {
                let frame = (i % 4 == 0).then(|| rng.below(4));
                Req::Deblur(DeblurRequest {
                    image: random_image(&mut rng),
                    frame,
                    pose: Some(random_pose(&mut rng)),
                })
            } else {
                let mut r = RepairRequest::new(random_image(&mut rng), random_image(&mut rng), random_pose(&mut rng));
                r.t0 = rng.below(1000) as u32;
                Req::Repair(r)
            }
        })
        .collect()
}

fn run(p: &dyn PriorProvider, r: &Req) -> Image {
    match r {
        Req::Deblur(d) => p.deblur(d).unwrap(),
        Req::Repair(q) => p.repair(q).unwrap(),
    }
}

#[test]
fn capabilities_round_trip() {
    let server = start(ServeOptions::default());
    let c = client(&server).capabilities();
    assert!(c.deblur && c.repair && !c.features);
}

#[test]
fn loopback_matches_in_process_bit_for_bit() {
    let server = start(ServeOptions::default());
    let remote = client(&server);
    let local = oracle();
    for r in &requests(50, 1) {
        assert_eq!(run(&remote, r), run(&local, r));
    }
}

#[test]
fn noisy_loopback_matches_in_process() {
    let opts = ServeOptions {
        seed: 42,
        ..Default::default()
    };
    let server = start(opts);
    let remote = RemoteProvider::connect(RemoteConfig {
        base_url: server.url(),
        sigma: Some(0.05),
        ..Default::default()
    })
    .unwrap();
    let local = NoisyOracle::new(oracle(), 0.05, 42).unwrap();
    for r in &requests(10, 2) {
        assert_eq!(run(&remote, r), run(&local, r));
    }
}

#[test]
fn sixteen_way_burst_gives_independent_correct_answers() {
    let server = start(ServeOptions::default());
    let remote = Arc::new(RemoteProvider::connect(RemoteConfig {
        base_url: server.url(),
        max_in_flight: 16,
        ..Default::default()
    })
    .unwrap());
    let reqs = Arc::new(requests(16, 3));
    let local = oracle();
    let expected: Vec<Image> = reqs.iter().map(|r| run(&local, r)).collect();
    let handles: Vec<_> = (0..16)
        .map(|i| {
            let (remote, reqs) = (remote.clone(), reqs.clone());
            std::thread::spawn(move || run(remote.as_ref(), &reqs[i]))
        })
        .collect();
    for (h, e) in handles.into_iter().zip(expected) {
        assert_eq!(h.join().unwrap(), e);
    }
}

fn post(url: &str, body: &str) -> (u16, serde_json::Value) {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let mut resp = agent
        .post(url)
        .header("content-type", "application/json")
        .send(body)
        .unwrap();
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().unwrap();
    (status, serde_json::from_str(&text).unwrap_or(serde_json::Value::Null))
}

#[test]
fn malformed_requests_name_the_field() {
    let server = start(ServeOptions::default());
    let base = server.url();
    let (s, b) = post(&format!("{base}/v1/repair"), r#"{"image": "AAAA", "reference": "AAAA", "t0": "high", "pose": null}"#);
    assert_eq!(s, 422);
    assert_eq!(b["code"], "malformed_request");
    assert!(b["message"].as_str().unwrap().starts_with("t0"), "{b}");

    let (s, b) = post(&format!("{base}/v1/deblur"), r#"{"image": "not base64!"}"#);
    assert_eq!(s, 422);
    assert!(b["message"].as_str().unwrap().starts_with("image"), "{b}");

    let (s, b) = post(&format!("{base}/v1/deblur"), r#"{"image": "", "pose": {"rotation": 3}}"#);
    assert_eq!(s, 422);
    assert!(b["message"].as_str().unwrap().starts_with("pose"), "{b}");

    let (s, b) = post(&format!("{base}/v1/deblur"), r#"{"imag": ""}"#);
    assert_eq!(s, 422, "{b}");

    let (s, b) = post(&format!("{base}/v1/deblur?sigma=-1"), r#"{"image": ""}"#);
    assert_eq!(s, 422, "{b}");
}

#[test]
fn unknown_route_is_404() {
    let server = start(ServeOptions::default());
    let (s, b) = post(&format!("{}/v2/anything", server.url()), "{}");
    assert_eq!(s, 404);
    assert_eq!(b["code"], "not_found");
}

#[test]
fn client_does_not_retry_rejections() {
    let server = start(ServeOptions::default());
    let remote = client(&server);
    // a deblur without frame or pose is rejected by the oracle
    let req = DeblurRequest {
        image: Image::new(32, 24, 3),
        frame: None,
        pose: None,
    };
    let t = std::time::Instant::now();
    let e = remote.deblur(&req).unwrap_err();
    assert!(matches!(e, ProviderError::InvalidRequest(_)), "{e:?}");
    assert!(!e.is_retryable());
    assert!(t.elapsed() < Duration::from_millis(500));
}

#[test]
fn oracle_deadline_maps_to_timeout() {
    let server = start(ServeOptions {
        deadline: Duration::ZERO,
        ..Default::default()
    });
    let remote = client(&server);
    let req = RepairRequest::new(Image::new(32, 24, 3), Image::new(32, 24, 3), pose_at(0));
    let r = remote.repair(&req);
    assert!(matches!(r, Err(ProviderError::Timeout)), "{r:?}");
}

#[test]
fn unreachable_service_is_a_retryable_transport_error() {
    let addr = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let e = RemoteProvider::connect(RemoteConfig {
        base_url: format!("http://{addr}"),
        retries: 1,
        backoff_ms: 1,
        timeout_ms: 2000,
        ..Default::default()
    })
    .err()
    .unwrap();
    assert!(e.is_retryable(), "{e:?}");
}
