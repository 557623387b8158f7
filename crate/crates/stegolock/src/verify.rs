//! Ownership verification and culprit tracing: white-box key tracing from
//! intercepted authorized images, black-box behavioral verification of a
//! suspect model behind an endpoint, and the aggregate success metrics.

use std::io::{BufRead, Write};

use base64::Engine;
use candle_core::Device;

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::key::{KeyRegistry, TraceMatch};
use crate::nn::backbone::TappedClassifier;
use crate::stego::{batch_to_tensor, StegoCodec};

/// Default Hamming tolerance for key tracing.
pub const DEFAULT_EPS3: u32 = 1;
/// Accuracy-gap (percentage points) below which a model looks independent.
pub const DEFAULT_EPS1: f64 = 5.0;
/// Accuracy-gap above which a model is behaviorally bound to a key.
pub const DEFAULT_EPS2: f64 = 30.0;

/// Outcome of tracing a batch of intercepted stego images.
#[derive(Debug, Clone)]
pub struct TraceReport {
    pub total: usize,
    /// Images traced unambiguously to the expected user within eps3.
    pub correct: usize,
    /// Trace success rate, `correct / total`.
    pub tsr: f64,
    pub matches: Vec<Option<TraceMatch>>,
}

/// Extract a key from every intercepted image and look it up in the
/// registry. When `expected_user` is given, TSR counts only unambiguous
/// matches to that user.
pub fn trace_intercepted(
    codec: &StegoCodec,
    registry: &KeyRegistry,
    images: &[Vec<f32>],
    expected_user: Option<&str>,
    eps3: u32,
) -> Result<TraceReport> {
    if images.is_empty() {
        return Err(Error::invalid("no intercepted images to trace"));
    }
    if registry.is_empty() {
        return Err(Error::Precondition("registry is empty".into()));
    }
    let mut matches = Vec::with_capacity(images.len());
    let mut correct = 0usize;
    for img in images {
        let extracted = codec.extract_key(img)?;
        let m = registry.trace_key(&extracted, eps3)?;
        if let Some(ref tm) = m {
            let hit = !tm.ambiguous
                && match expected_user {
                    Some(u) => tm.user_id == u,
                    None => true,
                };
            if hit {
                correct += 1;
            }
        }
        matches.push(m);
    }
    Ok(TraceReport {
        total: images.len(),
        correct,
        tsr: correct as f64 / images.len() as f64,
        matches,
    })
}

/// A suspect classifier reachable only through label queries.
pub trait ModelEndpoint {
    fn classify(&mut self, images: &[Vec<f32>], height: usize, width: usize) -> Result<Vec<u32>>;
}

/// Endpoint over a network held in this process.
pub struct InProcessEndpoint<'a> {
    pub net: &'a TappedClassifier,
    pub device: Device,
}

impl ModelEndpoint for InProcessEndpoint<'_> {
    fn classify(&mut self, images: &[Vec<f32>], height: usize, width: usize) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = batch_to_tensor(chunk, 3, height, width, &self.device)?;
            let labels = self.net.forward(&x)?.argmax(1)?.to_dtype(candle_core::DType::U32)?;
            out.extend(labels.to_vec1::<u32>()?);
        }
        Ok(out)
    }
}

/// Line protocol shared by [`StdioEndpoint`] and [`serve_stdio`]: one request
/// per line, `{height} {width} {base64 of little-endian f32 pixels}`; one
/// response per line, the decimal label.
pub fn encode_request(image: &[f32], height: usize, width: usize) -> String {
    let bytes: Vec<u8> = image.iter().flat_map(|v| v.to_le_bytes()).collect();
    format!("{height} {width} {}", base64::engine::general_purpose::STANDARD.encode(bytes))
}

pub fn decode_request(line: &str) -> Result<(Vec<f32>, usize, usize)> {
    let mut parts = line.split_whitespace();
    let bad = || Error::Format(format!("bad endpoint request {line:?}"));
    let height: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let width: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(parts.next().ok_or_else(bad)?)
        .map_err(|_| bad())?;
    if bytes.len() != 3 * height * width * 4 {
        return Err(bad());
    }
    let img = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((img, height, width))
}

/// Serve classification requests over the line protocol until EOF.
pub fn serve_stdio(
    net: &TappedClassifier,
    dev: &Device,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (img, h, w) = decode_request(&line)?;
        let x = batch_to_tensor(std::slice::from_ref(&img), 3, h, w, dev)?;
        let label = net.forward(&x)?.argmax(1)?.to_dtype(candle_core::DType::U32)?.to_vec1::<u32>()?[0];
        writeln!(output, "{label}")?;
        output.flush()?;
    }
    Ok(())
}

/// Endpoint over a spawned subprocess speaking the line protocol.
pub struct StdioEndpoint {
    child: std::process::Child,
    stdin: std::process::ChildStdin,
    stdout: std::io::BufReader<std::process::ChildStdout>,
}

impl StdioEndpoint {
    pub fn spawn(program: &str, args: &[&str]) -> Result<Self> {
        let mut child = std::process::Command::new(program)
            .args(args)
            .stdin(std::process::Stdio::piped())
            .stdout(std::process::Stdio::piped())
            .spawn()
            .map_err(|e| Error::Endpoint(format!("failed to spawn {program}: {e}")))?;
        let stdin = child.stdin.take().ok_or_else(|| Error::Endpoint("no stdin".into()))?;
        let stdout = std::io::BufReader::new(
            child.stdout.take().ok_or_else(|| Error::Endpoint("no stdout".into()))?,
        );
        Ok(StdioEndpoint { child, stdin, stdout })
    }
}

impl ModelEndpoint for StdioEndpoint {
    fn classify(&mut self, images: &[Vec<f32>], height: usize, width: usize) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(images.len());
        for img in images {
            writeln!(self.stdin, "{}", encode_request(img, height, width))?;
            self.stdin.flush()?;
            let mut line = String::new();
            if self.stdout.read_line(&mut line)? == 0 {
                return Err(Error::Endpoint("endpoint closed its stream".into()));
            }
            out.push(
                line.trim()
                    .parse()
                    .map_err(|_| Error::Endpoint(format!("bad endpoint reply {line:?}")))?,
            );
        }
        Ok(out)
    }
}

impl Drop for StdioEndpoint {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    /// No registered key explains the model's behavior.
    Innocent,
    /// Behavior is bound to exactly one registered user's key.
    Pirated { user_id: String, margin_pp: f64 },
    /// Between thresholds, or several keys fit (collusion).
    Inconclusive { reason: String },
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    /// Innocence threshold, percentage points.
    pub eps1: f64,
    /// Piracy threshold, percentage points.
    pub eps2: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { eps1: DEFAULT_EPS1, eps2: DEFAULT_EPS2 }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub benign_accuracy: f64,
    /// Per candidate user: authorized-probe accuracy and the gap over benign.
    pub per_user: Vec<(String, f64, f64)>,
    pub verdict: Verdict,
}

fn endpoint_accuracy(
    endpoint: &mut dyn ModelEndpoint,
    ds: &ImageDataset,
) -> Result<f64> {
    let preds = endpoint.classify(&ds.images, ds.height, ds.width)?;
    if preds.len() != ds.len() {
        return Err(Error::Endpoint("endpoint returned the wrong number of labels".into()));
    }
    let correct = preds.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Black-box verification: probe the suspect with benign covers and with
/// each candidate user's authorized encodings of the same covers. A model
/// protected for user j answers well on A_j and at chance elsewhere, so the
/// accuracy gap in percentage points drives the verdict:
/// all gaps <= eps1 -> innocent; exactly one gap >= eps2 -> pirated by that
/// user; several gaps >= eps2 (collusion) or anything between -> inconclusive.
pub fn blackbox_verify(
    endpoint: &mut dyn ModelEndpoint,
    benign_probes: &ImageDataset,
    authorized_probes: &[(String, ImageDataset)],
    cfg: &VerifyConfig,
) -> Result<VerifyReport> {
    if authorized_probes.is_empty() {
        return Err(Error::invalid("no candidate users to verify against"));
    }
    if cfg.eps1 >= cfg.eps2 {
        return Err(Error::invalid("eps1 must be below eps2"));
    }
    let benign_acc = endpoint_accuracy(endpoint, benign_probes)?;
    let mut per_user = Vec::with_capacity(authorized_probes.len());
    for (user, probes) in authorized_probes {
        let acc = endpoint_accuracy(endpoint, probes)?;
        per_user.push((user.clone(), acc, 100.0 * (acc - benign_acc)));
    }
    let mut above: Vec<&(String, f64, f64)> = per_user.iter().filter(|(_, _, g)| *g >= cfg.eps2).collect();
    above.sort_by(|a, b| b.2.total_cmp(&a.2));
    let verdict = if above.len() == 1 {
        Verdict::Pirated { user_id: above[0].0.clone(), margin_pp: above[0].2 }
    } else if above.len() > 1 {
        Verdict::Inconclusive {
            reason: format!(
                "{} keys all fit the behavior (possible collusion): {}",
                above.len(),
                above.iter().map(|e| e.0.as_str()).collect::<Vec<_>>().join(", ")
            ),
        }
    } else if per_user.iter().all(|(_, _, g)| *g <= cfg.eps1) {
        Verdict::Innocent
    } else {
        let worst = per_user.iter().map(|e| e.2).fold(f64::NEG_INFINITY, f64::max);
        Verdict::Inconclusive {
            reason: format!("largest accuracy gap {worst:.1}pp sits between eps1 and eps2"),
        }
    };
    Ok(VerifyReport { benign_accuracy: benign_acc, per_user, verdict })
}

/// Tracing accuracy over a set of verification outcomes: `None` ground truth
/// means the suspect is genuinely independent. A suspect counts as correctly
/// classified when an independent model is ruled innocent or a pirated model
/// is attributed to its true licensee.
pub fn tracing_accuracy(outcomes: &[(Option<String>, Verdict)]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::invalid("tracing accuracy over no outcomes"));
    }
    let hits = outcomes
        .iter()
        .filter(|(truth, v)| match (truth, v) {
            (None, Verdict::Innocent) => true,
            (Some(t), Verdict::Pirated { user_id, .. }) => user_id == t,
            _ => false,
        })
        .count();
    Ok(hits as f64 / outcomes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_dataset;
    use crate::nn::backbone::BackboneConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    struct FixedEndpoint {
        answers: Vec<Vec<u32>>,
        cursor: usize,
    }

    impl ModelEndpoint for FixedEndpoint {
        fn classify(&mut self, _images: &[Vec<f32>], _h: usize, _w: usize) -> Result<Vec<u32>> {
            let a = self.answers[self.cursor].clone();
            self.cursor += 1;
            Ok(a)
        }
    }

    fn probes(n: usize) -> ImageDataset {
        synthetic_dataset(n, 16, 16, 5, 0).unwrap()
    }

    #[test]
    fn verdict_thresholds() {
        let b = probes(20);
        let a = probes(20);
        let all_right = b.labels.clone();
        let all_wrong: Vec<u32> = b.labels.iter().map(|&l| (l + 1) % 5).collect();
        // benign at chance-ish (25% right), authorized perfect -> pirated
        let mixed: Vec<u32> = b.labels.iter().enumerate().map(|(i, &l)| if i % 4 == 0 { l } else { (l + 1) % 5 }).collect();
        let mut ep = FixedEndpoint { answers: vec![mixed.clone(), all_right.clone()], cursor: 0 };
        let rep = blackbox_verify(&mut ep, &b, &[("alice".into(), a.clone())], &VerifyConfig::default()).unwrap();
        match rep.verdict {
            Verdict::Pirated { ref user_id, margin_pp } => {
                assert_eq!(user_id, "alice");
                assert!(margin_pp >= 30.0);
            }
            ref v => panic!("expected pirated, got {v:?}"),
        }
        // identical behavior on both probe sets -> innocent
        let mut ep = FixedEndpoint { answers: vec![all_wrong.clone(), all_wrong.clone()], cursor: 0 };
        let rep = blackbox_verify(&mut ep, &b, &[("alice".into(), a.clone())], &VerifyConfig::default()).unwrap();
        assert_eq!(rep.verdict, Verdict::Innocent);
        // a gap between eps1 and eps2 -> inconclusive (benign 20%, authorized 40%)
        let partial: Vec<u32> = b.labels.iter().enumerate().map(|(i, &l)| if i % 5 == 0 { l } else { (l + 1) % 5 }).collect();
        let better: Vec<u32> = b.labels.iter().enumerate().map(|(i, &l)| if i % 5 < 2 { l } else { (l + 1) % 5 }).collect();
        let mut ep = FixedEndpoint { answers: vec![partial, better], cursor: 0 };
        let rep = blackbox_verify(&mut ep, &b, &[("alice".into(), a.clone())], &VerifyConfig::default()).unwrap();
        assert!(matches!(rep.verdict, Verdict::Inconclusive { .. }), "{:?}", rep.verdict);
        // two users both above eps2 -> collusion, inconclusive
        let mut ep = FixedEndpoint {
            answers: vec![all_wrong.clone(), all_right.clone(), all_right.clone()],
            cursor: 0,
        };
        let rep = blackbox_verify(
            &mut ep,
            &b,
            &[("alice".into(), a.clone()), ("bob".into(), a.clone())],
            &VerifyConfig::default(),
        )
        .unwrap();
        match rep.verdict {
            Verdict::Inconclusive { ref reason } => assert!(reason.contains("collusion"), "{reason}"),
            ref v => panic!("expected inconclusive, got {v:?}"),
        }
        // bad thresholds rejected
        let mut ep = FixedEndpoint { answers: vec![all_wrong.clone(), all_wrong], cursor: 0 };
        assert!(blackbox_verify(&mut ep, &b, &[("a".into(), a)], &VerifyConfig { eps1: 40.0, eps2: 30.0 }).is_err());
    }

    #[test]
    fn tracing_accuracy_counts_correct_culprits() {
        let o = vec![
            (Some("alice".to_string()), Verdict::Pirated { user_id: "alice".into(), margin_pp: 50.0 }),
            (Some("bob".to_string()), Verdict::Pirated { user_id: "carol".into(), margin_pp: 50.0 }),
            (Some("dave".to_string()), Verdict::Innocent),
            (None, Verdict::Innocent),
            (None, Verdict::Pirated { user_id: "erin".into(), margin_pp: 40.0 }),
            (Some("erin".to_string()), Verdict::Pirated { user_id: "erin".into(), margin_pp: 40.0 }),
        ];
        assert!((tracing_accuracy(&o).unwrap() - 0.5).abs() < 1e-12);
        assert!(tracing_accuracy(&[]).is_err());
    }

    #[test]
    fn line_protocol_roundtrip_and_serving() {
        let img: Vec<f32> = (0..3 * 16 * 16).map(|i| i as f32 / 1000.0).collect();
        let line = encode_request(&img, 16, 16);
        let (back, h, w) = decode_request(&line).unwrap();
        assert_eq!((h, w), (16, 16));
        assert_eq!(back, img);
        assert!(decode_request("16 16 notbase64!").is_err());
        assert!(decode_request("16").is_err());

        // serve two requests through in-memory pipes
        let dev = Device::Cpu;
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let net = TappedClassifier::new(&mut rng, &BackboneConfig::new([8, 8, 8, 8], 5), &dev).unwrap();
        let input = format!("{}\n{}\n", encode_request(&img, 16, 16), encode_request(&img, 16, 16));
        let mut out = Vec::new();
        serve_stdio(&net, &dev, std::io::Cursor::new(input), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let labels: Vec<u32> = text.lines().map(|l| l.parse().unwrap()).collect();
        assert_eq!(labels.len(), 2);
        assert_eq!(labels[0], labels[1]);
        assert!(labels[0] < 5);
    }

    #[test]
    fn stdio_endpoint_talks_to_a_subprocess() {
        let mut ep = StdioEndpoint::spawn("sh", &["-c", "while read line; do echo 3; done"]).unwrap();
        let ds = probes(4);
        let preds = ep.classify(&ds.images, 16, 16).unwrap();
        assert_eq!(preds, vec![3, 3, 3, 3]);
    }

    #[test]
    fn in_process_endpoint_matches_direct_eval() {
        let dev = Device::Cpu;
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let net = TappedClassifier::new(&mut rng, &BackboneConfig::new([8, 8, 8, 8], 5), &dev).unwrap();
        let ds = probes(6);
        let mut ep = InProcessEndpoint { net: &net, device: dev.clone() };
        let preds = ep.classify(&ds.images, 16, 16).unwrap();
        let direct = crate::stego::batch_to_tensor(&ds.images, 3, 16, 16, &dev).unwrap();
        let expect = net.forward(&direct).unwrap().argmax(1).unwrap().to_dtype(candle_core::DType::U32).unwrap().to_vec1::<u32>().unwrap();
        assert_eq!(preds, expect);
    }
}
