//! HTTP client for an external landmark detector.
//!
//! The request body is `{"image_base64": <png>}` with a bearer credential.
//! The response is `{"faces": [{"landmarks": {name: {"x": f, "y": f}, ..}}]}`;
//! the first face is used. Dense landmark names are reduced to the six
//! named points through a [`NameMapping`].

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geometry::{LandmarkName, LandmarkSet, LandmarkSource, Point2D};
use crate::image::Image;

pub const ENV_ENDPOINT: &str = "DETECTOR_ENDPOINT";
pub const ENV_KEY: &str = "DETECTOR_KEY";

/// Outcome of a single HTTP exchange.
#[derive(Debug)]
pub enum TransportError {
    TimedOut,
    Failed(String),
}

pub trait Transport: Send + Sync {
    /// POST `body` and return `(status, response body)`. Must give up within
    /// `timeout`.
    fn post(
        &self,
        url: &str,
        key: &str,
        body: &str,
        timeout: Duration,
    ) -> std::result::Result<(u16, String), TransportError>;
}

pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post(
        &self,
        url: &str,
        key: &str,
        body: &str,
        timeout: Duration,
    ) -> std::result::Result<(u16, String), TransportError> {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        let res = agent
            .post(url)
            .set("Authorization", &format!("Bearer {key}"))
            .set("Content-Type", "application/json")
            .send_string(body);
        let resp = match res {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                let timed_out = msg.contains("timed out")
                    || msg.contains("timeout")
                    || matches!(t.kind(), ureq::ErrorKind::Io);
                return Err(if timed_out {
                    TransportError::TimedOut
                } else {
                    TransportError::Failed(msg)
                });
            }
        };
        let status = resp.status();
        let text = resp
            .into_string()
            .map_err(|e| TransportError::Failed(e.to_string()))?;
        Ok((status, text))
    }
}

/// Dense detector name → named landmark.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(transparent)]
pub struct NameMapping(pub BTreeMap<String, LandmarkName>);

impl Default for NameMapping {
    fn default() -> Self {
        let pairs = [
            ("left_eye_center", LandmarkName::LeftEye),
            ("right_eye_center", LandmarkName::RightEye),
            ("nose_tip", LandmarkName::NoseTop),
            ("mouth_left_corner", LandmarkName::MouthLeft),
            ("mouth_right_corner", LandmarkName::MouthRight),
            ("ear_point", LandmarkName::EarPoint),
        ];
        NameMapping(pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }
}

impl NameMapping {
    /// Load a JSON object `{dense_name: landmark_name}`.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug)]
pub struct DetectorConfig {
    pub endpoint: String,
    pub key: String,
    /// Overall budget for one `fetch_landmarks` call, retries included.
    pub timeout: Duration,
    pub retries: u32,
    pub backoff_base: Duration,
    pub max_in_flight: usize,
    pub mapping: NameMapping,
}

impl DetectorConfig {
    pub fn new(endpoint: impl Into<String>, key: impl Into<String>) -> Self {
        DetectorConfig {
            endpoint: endpoint.into(),
            key: key.into(),
            timeout: Duration::from_secs(10),
            retries: 3,
            backoff_base: Duration::from_millis(200),
            max_in_flight: 4,
            mapping: NameMapping::default(),
        }
    }

    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .map_err(|_| Error::ConfigInvalid(format!("{ENV_ENDPOINT} is not set")))?;
        let key = std::env::var(ENV_KEY)
            .map_err(|_| Error::ConfigInvalid(format!("{ENV_KEY} is not set")))?;
        Ok(Self::new(endpoint, key))
    }
}

struct Semaphore {
    count: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    /// Wait for a permit until `deadline`; false on expiry.
    fn acquire(&self, limit: usize, deadline: Instant) -> bool {
        let mut n = self.count.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= limit {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            n = self
                .cv
                .wait_timeout(n, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
        *n += 1;
        true
    }

    fn release(&self) {
        let mut n = self.count.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.cv.notify_one();
    }
}

pub struct DetectorClient {
    config: DetectorConfig,
    transport: Box<dyn Transport>,
    in_flight: Semaphore,
}

#[derive(Deserialize)]
struct Response {
    #[serde(default)]
    faces: Vec<FaceEntry>,
}

#[derive(Deserialize)]
struct FaceEntry {
    landmarks: BTreeMap<String, XY>,
}

#[derive(Deserialize)]
struct XY {
    x: f64,
    y: f64,
}

impl DetectorClient {
    pub fn new(config: DetectorConfig) -> Self {
        Self::with_transport(config, Box::new(UreqTransport))
    }

    pub fn with_transport(config: DetectorConfig, transport: Box<dyn Transport>) -> Self {
        DetectorClient {
            config,
            transport,
            in_flight: Semaphore {
                count: Mutex::new(0),
                cv: Condvar::new(),
            },
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    fn attempt(&self, body: &str, budget: Duration) -> Result<LandmarkSet> {
        let (status, text) = match self
            .transport
            .post(&self.config.endpoint, &self.config.key, body, budget)
        {
            Ok(r) => r,
            Err(TransportError::TimedOut) => return Err(Error::Timeout(self.config.timeout)),
            Err(TransportError::Failed(m)) => return Err(Error::Detector(m)),
        };
        match status {
            200..=299 => {}
            401 | 403 => return Err(Error::AuthFailure(status)),
            _ => return Err(Error::Detector(format!("HTTP {status}"))),
        }
        let resp: Response = serde_json::from_str(&text)
            .map_err(|e| Error::Detector(format!("malformed response: {e}")))?;
        let face = resp.faces.first().ok_or(Error::DetectorMiss)?;
        self.reduce(face)
    }

    /// Keep only mapped points; reject anything short of a full frontal set
    /// or a full profile triplet.
    fn reduce(&self, face: &FaceEntry) -> Result<LandmarkSet> {
        let mut set = LandmarkSet::new(LandmarkSource::Detector);
        for (dense, p) in &face.landmarks {
            if let Some(name) = self.config.mapping.0.get(dense) {
                if !(p.x.is_finite() && p.y.is_finite()) {
                    return Err(Error::Detector(format!("non-finite landmark `{dense}`")));
                }
                set.points.insert(*name, Point2D::new(p.x, p.y));
            }
        }
        let frontal = LandmarkName::FRONTAL.iter().all(|n| set.contains(*n));
        let profile = set.contains(LandmarkName::NoseTop)
            && set.contains(LandmarkName::EarPoint)
            && (set.contains(LandmarkName::MouthLeft) || set.contains(LandmarkName::MouthRight));
        if frontal || profile {
            Ok(set)
        } else {
            Err(Error::DetectorMiss)
        }
    }
}

/// Detect landmarks in `image`. Retriable failures are retried with
/// exponential backoff; the whole call never exceeds the configured timeout.
pub fn fetch_landmarks(client: &DetectorClient, image: &Image) -> Result<LandmarkSet> {
    let png = image.encode_png()?;
    let body = serde_json::json!({
        "image_base64": base64::engine::general_purpose::STANDARD.encode(png),
    })
    .to_string();

    let cfg = &client.config;
    let deadline = Instant::now() + cfg.timeout;
    if !client.in_flight.acquire(cfg.max_in_flight.max(1), deadline) {
        return Err(Error::Timeout(cfg.timeout));
    }
    let result = (|| {
        let mut backoff = cfg.backoff_base;
        let mut attempt = 0;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Err(Error::Timeout(cfg.timeout));
            }
            match client.attempt(&body, remaining) {
                Err(e) if e.is_retriable() && attempt < cfg.retries => {
                    attempt += 1;
                    let remaining = deadline.saturating_duration_since(Instant::now());
                    if backoff >= remaining {
                        return Err(Error::Timeout(cfg.timeout));
                    }
                    thread::sleep(backoff);
                    backoff *= 2;
                }
                other => return other,
            }
        }
    })();
    client.in_flight.release();
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Stub<F: Fn(usize) -> std::result::Result<(u16, String), TransportError> + Send + Sync> {
        calls: Arc<AtomicUsize>,
        f: F,
    }

    impl<F> Transport for Stub<F>
    where
        F: Fn(usize) -> std::result::Result<(u16, String), TransportError> + Send + Sync,
    {
        fn post(
            &self,
            _url: &str,
            _key: &str,
            _body: &str,
            _timeout: Duration,
        ) -> std::result::Result<(u16, String), TransportError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            (self.f)(n)
        }
    }

    fn client<F>(f: F) -> (DetectorClient, Arc<AtomicUsize>)
    where
        F: Fn(usize) -> std::result::Result<(u16, String), TransportError> + Send + Sync + 'static,
    {
        let calls = Arc::new(AtomicUsize::new(0));
        let mut cfg = DetectorConfig::new("http://stub", "k");
        cfg.backoff_base = Duration::from_millis(1);
        let c = DetectorClient::with_transport(
            cfg,
            Box::new(Stub {
                calls: calls.clone(),
                f,
            }),
        );
        (c, calls)
    }

    const FIVE: &str = r#"{"faces":[{"landmarks":{
        "left_eye_center":{"x":38.0,"y":51.0},"right_eye_center":{"x":73.0,"y":51.0},
        "nose_tip":{"x":56.0,"y":71.0},"mouth_left_corner":{"x":41.0,"y":92.0},
        "mouth_right_corner":{"x":70.0,"y":92.0},"contour_chin":{"x":56.0,"y":110.0}}}]}"#;

    fn img() -> Image {
        Image::zeros(8, 8, 3)
    }

    #[test]
    fn fixed_json_gives_five_points() {
        let (c, _) = client(|_| Ok((200, FIVE.to_string())));
        let set = fetch_landmarks(&c, &img()).unwrap();
        assert_eq!(set.points.len(), 5);
        assert_eq!(set.source, LandmarkSource::Detector);
        assert_eq!(set.get(LandmarkName::NoseTop).unwrap(), Point2D::new(56.0, 71.0));
    }

    #[test]
    fn unauthorized_is_auth_failure_without_retry() {
        let (c, calls) = client(|_| Ok((401, String::new())));
        assert!(matches!(fetch_landmarks(&c, &img()), Err(Error::AuthFailure(401))));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn zero_faces_is_miss() {
        let (c, _) = client(|_| Ok((200, r#"{"faces":[]}"#.to_string())));
        assert!(matches!(fetch_landmarks(&c, &img()), Err(Error::DetectorMiss)));
    }

    #[test]
    fn partial_landmarks_are_rejected() {
        let (c, _) = client(|_| {
            Ok((
                200,
                r#"{"faces":[{"landmarks":{"nose_tip":{"x":1,"y":2}}}]}"#.to_string(),
            ))
        });
        assert!(matches!(fetch_landmarks(&c, &img()), Err(Error::DetectorMiss)));
    }

    #[test]
    fn server_errors_retry_three_times() {
        let (c, calls) = client(|n| {
            if n < 3 {
                Ok((503, String::new()))
            } else {
                Ok((200, FIVE.to_string()))
            }
        });
        assert!(fetch_landmarks(&c, &img()).is_ok());
        assert_eq!(calls.load(Ordering::SeqCst), 4);

        let (c, calls) = client(|_| Err(TransportError::TimedOut));
        let e = fetch_landmarks(&c, &img()).unwrap_err();
        assert!(matches!(e, Error::Timeout(_)) && e.is_retriable());
        assert_eq!(calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn custom_mapping_is_applied() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.json");
        std::fs::write(
            &p,
            r#"{"p1":"nose_top","p2":"mouth_left","p3":"ear_point"}"#,
        )
        .unwrap();
        let mapping = NameMapping::load(&p).unwrap();
        let calls = Arc::new(AtomicUsize::new(0));
        let mut cfg = DetectorConfig::new("http://stub", "k");
        cfg.mapping = mapping;
        let c = DetectorClient::with_transport(
            cfg,
            Box::new(Stub {
                calls,
                f: |_| {
                    Ok((
                        200,
                        r#"{"faces":[{"landmarks":{"p1":{"x":80,"y":70},"p2":{"x":70,"y":95},"p3":{"x":30,"y":60}}}]}"#.to_string(),
                    ))
                },
            }),
        );
        let set = fetch_landmarks(&c, &img()).unwrap();
        assert_eq!(set.points.len(), 3);
        assert!(set.contains(LandmarkName::EarPoint));
    }
}
