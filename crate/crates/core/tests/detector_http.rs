use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;
use std::time::{Duration, Instant};

use defront::data::{fetch_landmarks, DetectorClient, DetectorConfig};
use defront::geometry::{LandmarkName, Point2D};
use defront::image::Image;
use defront::Error;

fn image() -> Image {
    Image::zeros(8, 8, 3)
}

/// Reads one HTTP request (headers plus Content-Length body).
fn read_request(stream: &mut std::net::TcpStream) -> String {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut head = String::new();
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
        head.push_str(&line);
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    head + &String::from_utf8(body).unwrap()
}

#[test]
fn silent_server_times_out_within_budget() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    // Accepts and holds connections without ever answering.
    thread::spawn(move || {
        let mut held = Vec::new();
        for s in listener.incoming() {
            held.push(s);
        }
    });
    let mut cfg = DetectorConfig::new(format!("http://{addr}/detect"), "k");
    cfg.timeout = Duration::from_millis(600);
    cfg.backoff_base = Duration::from_millis(50);
    let client = DetectorClient::new(cfg);
    let start = Instant::now();
    let res = fetch_landmarks(&client, &image());
    let elapsed = start.elapsed();
    assert!(matches!(res, Err(Error::Timeout(_))), "{res:?}");
    assert!(elapsed < Duration::from_millis(1500), "{elapsed:?}");
}

#[test]
fn real_http_exchange_maps_dense_names() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let req = read_request(&mut s);
        let body = r#"{"faces":[{"landmarks":{
            "left_eye_center":{"x":38.3,"y":51.7},"right_eye_center":{"x":73.5,"y":51.5},
            "nose_tip":{"x":56.0,"y":71.7},"mouth_left_corner":{"x":41.5,"y":92.4},
            "mouth_right_corner":{"x":70.7,"y":92.2},"jaw_17":{"x":1.0,"y":2.0}}}]}"#;
        write!(
            s,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
        req
    });
    let client = DetectorClient::new(DetectorConfig::new(format!("http://{addr}/detect"), "secret"));
    let set = fetch_landmarks(&client, &image()).unwrap();
    assert_eq!(set.points.len(), 5);
    assert_eq!(set.get(LandmarkName::NoseTop).unwrap(), Point2D::new(56.0, 71.7));
    let req = server.join().unwrap();
    assert!(req.starts_with("POST /detect"));
    assert!(req.to_ascii_lowercase().contains("authorization: bearer secret"));
    assert!(req.contains("\"image_base64\""));
}

#[test]
fn forbidden_is_not_retried() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        read_request(&mut s);
        s.write_all(b"HTTP/1.1 403 Forbidden\r\nContent-Length: 0\r\nConnection: close\r\n\r\n").unwrap();
        listener.set_nonblocking(true).unwrap();
        thread::sleep(Duration::from_millis(300));
        listener.accept().is_err()
    });
    let client = DetectorClient::new(DetectorConfig::new(format!("http://{addr}/detect"), "bad"));
    assert!(matches!(fetch_landmarks(&client, &image()), Err(Error::AuthFailure(403))));
    assert!(server.join().unwrap(), "a second request was made");
}
