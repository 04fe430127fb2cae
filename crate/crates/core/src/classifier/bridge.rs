//! Line-delimited JSON bridge to a classifier living in another process.
//!
//! Each request and response is one JSON object on its own line. Pixel and
//! gradient buffers are base64 of little-endian `f32`, row-major with the
//! three channels interleaved per pixel.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{softmax_cross_entropy, Classifier, ClassifierOutput};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeRequest {
    pub op: String,
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    pub pixels: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BridgeResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn encode_pixels(image: &Image) -> String {
    let bytes: Vec<u8> = image
        .to_interleaved()
        .into_iter()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect();
    B64.encode(bytes)
}

pub fn decode_pixels(text: &str, height: usize, width: usize) -> Result<Image> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::Bridge(format!("bad base64 payload: {e}")))?;
    let expected = 4 * CHANNELS * height * width;
    if bytes.len() != expected {
        return Err(Error::Bridge(format!(
            "payload has {} bytes, expected {expected} for {height}x{width}x{CHANNELS}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("bridge payload".into()));
    }
    Image::from_interleaved(height, width, &values)
}

struct Connection {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

/// A classifier served by a child process speaking the bridge protocol.
pub struct BridgeClassifier {
    conn: Mutex<Connection>,
    height: usize,
    width: usize,
    labels: Vec<String>,
    timeout: Duration,
}

impl BridgeClassifier {
    /// Starts `command` through the shell and probes it once with a gray
    /// image to learn the class count. Missing labels become `class_<i>`.
    pub fn spawn(command: &str, height: usize, width: usize, labels: Option<Vec<String>>, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Bridge(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut bridge = Self {
            conn: Mutex::new(Connection {
                child,
                stdin,
                lines: rx,
            }),
            height,
            width,
            labels: Vec::new(),
            timeout,
        };
        let probe = bridge.call("forward", &Image::filled(height, width, 0.5), None)?;
        let k = probe.logits.map(|l| l.len()).unwrap_or(0);
        if k == 0 {
            return Err(Error::Bridge("probe response carried no logits".into()));
        }
        bridge.labels = match labels {
            Some(l) if l.len() == k => l,
            Some(l) => {
                return Err(Error::Bridge(format!("{} labels given but the model reports {k} classes", l.len())))
            }
            None => (0..k).map(|i| format!("class_{i}")).collect(),
        };
        Ok(bridge)
    }

    fn call(&self, op: &str, image: &Image, target: Option<usize>) -> Result<BridgeResponse> {
        if image.dims() != (self.height, self.width) {
            return Err(Error::shape(format!(
                "bridge expects {}x{} input, got {:?}",
                self.height,
                self.width,
                image.dims()
            )));
        }
        let request = BridgeRequest {
            op: op.to_string(),
            height: self.height,
            width: self.width,
            target,
            pixels: encode_pixels(image),
        };
        let mut line = serde_json::to_string(&request)?;
        line.push('\n');
        let mut conn = self.conn.lock().map_err(|_| Error::Bridge("connection poisoned".into()))?;
        conn.stdin
            .write_all(line.as_bytes())
            .and_then(|_| conn.stdin.flush())
            .map_err(|e| Error::Bridge(format!("write failed: {e}")))?;
        let reply = match conn.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => return Err(Error::Bridge(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::Bridge(format!("no response within {:?}", self.timeout)))
            }
            Err(RecvTimeoutError::Disconnected) => return Err(Error::Bridge("child closed its output".into())),
        };
        let response: BridgeResponse = serde_json::from_str(&reply)
            .map_err(|e| Error::Bridge(format!("malformed response {reply:?}: {e}")))?;
        if let Some(err) = response.error {
            return Err(Error::Bridge(format!("child reported: {err}")));
        }
        if response.logits.is_none() {
            return Err(Error::Bridge("response has neither logits nor error".into()));
        }
        Ok(response)
    }
}

impl Drop for BridgeClassifier {
    fn drop(&mut self) {
        if let Ok(conn) = self.conn.get_mut() {
            let _ = conn.child.kill();
            let _ = conn.child.wait();
        }
    }
}

impl Classifier for BridgeClassifier {
    fn num_classes(&self) -> usize {
        self.labels.len()
    }

    fn labels(&self) -> Vec<String> {
        self.labels.clone()
    }

    fn forward(&self, image: &Image) -> Result<ClassifierOutput> {
        let r = self.call("forward", image, None)?;
        let logits = r.logits.expect("checked in call");
        if logits.len() != self.labels.len() {
            return Err(Error::Bridge(format!("{} logits for {} classes", logits.len(), self.labels.len())));
        }
        ClassifierOutput::from_logits(logits)
    }

    fn loss_and_input_gradient(&self, image: &Image, target: usize) -> Result<(f64, Image)> {
        let k = self.labels.len();
        if target >= k {
            return Err(Error::InvalidClass { index: target, classes: k });
        }
        let r = self.call("gradient", image, Some(target))?;
        let logits = r.logits.expect("checked in call");
        if logits.len() != k {
            return Err(Error::Bridge(format!("{} logits for {k} classes", logits.len())));
        }
        let out = ClassifierOutput::from_logits(logits)?;
        let (loss, _) = softmax_cross_entropy(&out.logits, target);
        let grad = r
            .grad
            .ok_or_else(|| Error::Bridge("gradient response without grad".into()))?;
        Ok((loss, decode_pixels(&grad, self.height, self.width)?))
    }
}

/// Serves `classifier` over the bridge protocol until `input` ends.
/// Per-request failures are answered with an error object.
pub fn serve_bridge<C: Classifier + ?Sized>(classifier: &C, input: impl BufRead, mut output: impl Write) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match handle(classifier, &line) {
            Ok(r) => r,
            Err(e) => BridgeResponse {
                error: Some(e.to_string()),
                ..BridgeResponse::default()
            },
        };
        serde_json::to_writer(&mut output, &response)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

fn handle<C: Classifier + ?Sized>(classifier: &C, line: &str) -> Result<BridgeResponse> {
    let req: BridgeRequest = serde_json::from_str(line).map_err(|e| Error::Bridge(format!("malformed request: {e}")))?;
    let image = decode_pixels(&req.pixels, req.height, req.width)?;
    match req.op.as_str() {
        "forward" => Ok(BridgeResponse {
            logits: Some(classifier.forward(&image)?.logits),
            ..BridgeResponse::default()
        }),
        "gradient" => {
            let target = req.target.ok_or_else(|| Error::Bridge("gradient request without target".into()))?;
            let logits = classifier.forward(&image)?.logits;
            let (_, grad) = classifier.loss_and_input_gradient(&image, target)?;
            Ok(BridgeResponse {
                logits: Some(logits),
                grad: Some(encode_pixels(&grad)),
                error: None,
            })
        }
        other => Err(Error::Bridge(format!("unknown op {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Model;

    fn stub(reply: &str) -> String {
        format!("while read line; do echo '{reply}'; done")
    }

    #[test]
    fn pixel_codec_round_trips_f32_values() {
        let img = Image::from_planar(2, 3, (0..18).map(|i| i as f64 / 32.0).collect()).unwrap();
        assert_eq!(decode_pixels(&encode_pixels(&img), 2, 3).unwrap(), img);
        assert!(decode_pixels(&encode_pixels(&img), 3, 3).is_err());
    }

    #[test]
    fn echo_stub_logits_are_parsed() {
        let b = BridgeClassifier::spawn(&stub(r#"{"logits":[0.5,2.0,-1.0]}"#), 4, 4, None, Duration::from_secs(5)).unwrap();
        assert_eq!(b.num_classes(), 3);
        let out = b.forward(&Image::zeros(4, 4)).unwrap();
        assert_eq!(out.logits, vec![0.5, 2.0, -1.0]);
        assert_eq!(out.strict_argmax(), Some(1));
        assert_eq!(b.label(2), "class_2");
    }

    #[test]
    fn stub_errors_and_protocol_violations_surface() {
        let b = BridgeClassifier::spawn(&stub(r#"{"logits":[1.0,2.0]}"#), 2, 2, None, Duration::from_secs(5)).unwrap();
        assert!(matches!(b.loss_and_input_gradient(&Image::zeros(2, 2), 0), Err(Error::Bridge(_))));
        assert!(matches!(b.loss_and_input_gradient(&Image::zeros(2, 2), 5), Err(Error::InvalidClass { .. })));
        assert!(BridgeClassifier::spawn(&stub(r#"{"error":"boom"}"#), 2, 2, None, Duration::from_secs(5)).is_err());
        assert!(BridgeClassifier::spawn(&stub("not json"), 2, 2, None, Duration::from_secs(5)).is_err());
        assert!(BridgeClassifier::spawn("true", 2, 2, None, Duration::from_secs(5)).is_err());
    }

    #[test]
    fn silent_child_times_out() {
        let r = BridgeClassifier::spawn("sleep 5", 2, 2, None, Duration::from_millis(200));
        assert!(matches!(r, Err(Error::Bridge(msg)) if msg.contains("no response")));
    }

    #[test]
    fn in_process_server_matches_direct_calls() {
        let model = Model::reference_with_widths(16, 16, vec!["a".into(), "b".into(), "c".into()], [2, 2], 4, 9).unwrap();
        let img = Image::from_planar(16, 16, (0..768).map(|i| (i % 256) as f64 / 256.0).collect()).unwrap();
        let req = BridgeRequest {
            op: "gradient".into(),
            height: 16,
            width: 16,
            target: Some(1),
            pixels: encode_pixels(&img),
        };
        let input = format!("{}\n{{\"op\":\"nope\"}}\n", serde_json::to_string(&req).unwrap());
        let mut out = Vec::new();
        serve_bridge(&model, input.as_bytes(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let r: BridgeResponse = serde_json::from_str(lines[0]).unwrap();
        let direct = model.forward(&img).unwrap();
        for (a, b) in r.logits.unwrap().iter().zip(&direct.logits) {
            assert!((a - b).abs() < 1e-9);
        }
        let (_, g) = model.loss_and_input_gradient(&img, 1).unwrap();
        let remote = decode_pixels(&r.grad.unwrap(), 16, 16).unwrap();
        for (a, b) in remote.data().iter().zip(g.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3));
        }
        let r: BridgeResponse = serde_json::from_str(lines[1]).unwrap();
        assert!(r.error.is_some());
    }
}
