// Scratch harness for sizing desk-scale hyperparameters. Not part of the
// pipeline; run as `cargo run --release --example tune -- <what> [args]`.

use candle_core::Device;
use stegolock::data::synthetic_dataset;
use stegolock::experts::{evaluate, train_baseline, ExpertTrainConfig};
use stegolock::key;
use stegolock::nn::backbone::BackboneConfig;
use stegolock::stego::{train_codec, CodecGeometry, CodecTrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let what = args.first().map(String::as_str).unwrap_or("baseline");
    let dev = Device::Cpu;
    match what {
        "baseline" => {
            // args: n_train epochs lr width_scale
            let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(80);
            let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6);
            let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.05);
            let size: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(16);
            let classes: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(5);
            let ds = synthetic_dataset(n + 40, size, size, classes, 1).unwrap();
            let (train, test) = ds.split(n).unwrap();
            let widths = match args.get(6).map(String::as_str) {
                Some("small") => [8, 8, 16, 16],
                Some("mid") => [16, 16, 32, 32],
                Some("big") => [16, 32, 64, 128],
                _ => {
                    if size >= 32 {
                        [16, 32, 64, 128]
                    } else {
                        [8, 8, 16, 16]
                    }
                }
            };
            let bb = BackboneConfig::new(widths, classes);
            let cfg = ExpertTrainConfig { epochs, batch_size: 20, lr, ..Default::default() };
            let t0 = std::time::Instant::now();
            let net = train_baseline(&bb, &train, &cfg, &dev, |s| {
                println!("epoch {} loss {:.4} acc {:.3} ({:.1}s)", s.epoch, s.loss, s.accuracy, t0.elapsed().as_secs_f64());
            })
            .unwrap();
            println!("test acc {:.3}", evaluate(&net, &test, &dev).unwrap());
        }
        "codec" => {
            // args: n epochs lr net_width size r
            let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
            let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
            let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
            let w: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(16);
            let size: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(32);
            let r: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(16);
            let ds = synthetic_dataset(n + 100, size, size, 10, 2).unwrap();
            let (train, test) = ds.split(n).unwrap();
            let geo = CodecGeometry { height: size, width: size, key_channels: 1, key_side: r };
            let cfg = CodecTrainConfig { epochs, batch_size: 32, lr, seed: 0, ..Default::default() };
            let t0 = std::time::Instant::now();
            let codec = train_codec(&train.images, geo, w, &cfg, &dev, None, |s| {
                println!(
                    "epoch {} dec {:.4} sim {:.5} real {:+.4} bits {:.4} ({:.1}s)",
                    s.epoch, s.decode_loss, s.similarity_loss, s.realness_loss, s.bit_accuracy, t0.elapsed().as_secs_f64()
                );
            })
            .unwrap();
            // held-out key extraction quality
            let mut ok = 0;
            let total = test.len();
            let k = key::generate_key("probe", r, 1, 7).unwrap();
            let ek = key::expand_key(&k, size, size).unwrap();
            let stego = codec.encode_images(&test.images, &ek).unwrap();
            for s in &stego {
                let got = codec.extract_key(s).unwrap();
                let mut hd = 0;
                for (a, b) in got.bits.iter().zip(&k.bits) {
                    if a != b {
                        hd += 1;
                    }
                }
                if hd <= 1 {
                    ok += 1;
                }
            }
            let rep = stegolock::iqa::iqa(&test.images, &stego, 3, size, size).unwrap();
            println!(
                "held-out: {}/{} images with HD<=1; ssim {:.3} psnr {:.1} ({:.1}s total)",
                ok, total, rep.ssim_mean, rep.psnr_mean, t0.elapsed().as_secs_f64()
            );
        }
        other => eprintln!("unknown experiment {other}"),
    }
}
