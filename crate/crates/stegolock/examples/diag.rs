// Scratch diagnostic for the protect stage: loads a run directory, scores
// the stored experts per domain, then tries short distillation runs at
// several attention weights. Usage:
//   cargo run --release --example diag -- <out_dir> <user> [epochs]

use candle_core::Device;
use stegolock::data::{Domain, DomainTriple};
use stegolock::distill::{distill_student, DistillConfig, ProtectedModel};
use stegolock::experts::{evaluate, ExpertEnsemble};
use stegolock::nn::backbone::LayerSelection;
use stegolock::pipeline::{stage_seed, RunContext};
use stegolock::config::PipelineConfig;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = std::path::PathBuf::from(args.first().expect("out dir"));
    let user = args.get(1).map(String::as_str).unwrap_or("alice");
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let dev = Device::Cpu;

    let cfg = PipelineConfig::load(std::path::Path::new("configs/desk.toml")).unwrap();
    let ctx = RunContext::from_config(cfg, 1, &out).unwrap();
    let (train, test) = ctx.ensure_dataset().unwrap();
    let codec = ctx.ensure_codec().unwrap();
    let baseline = ctx.ensure_baseline().unwrap();

    let key = ctx.user_key(user).unwrap();
    let tri = DomainTriple::build(train.clone(), key.clone(), stage_seed(1, &format!("domains/{user}"))).unwrap();
    tri.materialize(&codec).unwrap();
    let benign = tri.domain_dataset(&codec, Domain::Benign).unwrap();
    let auth = tri.domain_dataset(&codec, Domain::Authorized).unwrap();
    let noise = tri.domain_dataset(&codec, Domain::Noise).unwrap();

    let ens = ExpertEnsemble::load(out.join(format!("experts/{user}.ckpt")), &dev).unwrap();
    println!("baseline:   benign {:.3}", evaluate(&baseline, &benign, &dev).unwrap());
    println!("baseline:   auth   {:.3}", evaluate(&baseline, &auth, &dev).unwrap());
    println!("real:       auth   {:.3}", evaluate(&ens.real, &auth, &dev).unwrap());
    println!("real:       benign {:.3}", evaluate(&ens.real, &benign, &dev).unwrap());
    println!("fake_ben:   benign {:.3}", evaluate(&ens.fake_benign, &benign, &dev).unwrap());
    println!("fake_noise: noise  {:.3}", evaluate(&ens.fake_noise, &noise, &dev).unwrap());

    if let Ok(pm) = ProtectedModel::load(out.join(format!("protected/{user}.ckpt")), &dev) {
        println!("stored student: benign {:.3} auth {:.3} noise {:.3}",
            evaluate(&pm.student, &benign, &dev).unwrap(),
            evaluate(&pm.student, &auth, &dev).unwrap(),
            evaluate(&pm.student, &noise, &dev).unwrap());
    }

    let domains = vec![
        (Domain::Benign, benign.clone()),
        (Domain::Authorized, auth.clone()),
        (Domain::Noise, noise.clone()),
    ];
    for (seed, tau, lam_at, lam_crd, lr, layers) in [
        (1u64, 1.0, 1.0, 0.1, 1e-3, vec![2usize, 3]),
        (0xdead_beef, 1.0, 1.0, 0.1, 1e-3, vec![2, 3]),
        (7, 1.0, 1.0, 0.1, 1e-3, vec![2, 3]),
    ] {
        let dcfg = DistillConfig {
            epochs,
            batch_size: 32,
            lr,
            tau,
            lambda_at: lam_at,
            lambda_crd: lam_crd,
            selection: LayerSelection(layers.clone()),
            seed,
            ..Default::default()
        };
        let t0 = std::time::Instant::now();
        let student = distill_student(&ens, &domains, &dcfg, &dev, |s, net| {
            println!(
                "  seed {seed} tau {tau} at {lam_at} crd {lam_crd} epoch {} kl {:.4} at {:.4} crd {:.2} | b {:.2} a {:.2} n {:.2}",
                s.epoch, s.kl, s.at, s.crd,
                evaluate(net, &benign, &dev).unwrap(),
                evaluate(net, &auth, &dev).unwrap(),
                evaluate(net, &noise, &dev).unwrap()
            );
            true
        })
        .unwrap();
        println!(
            "seed {seed} tau {tau} at {lam_at} crd {lam_crd}: benign {:.3} auth {:.3} noise {:.3} ({:.0}s)",
            evaluate(&student, &benign, &dev).unwrap(),
            evaluate(&student, &auth, &dev).unwrap(),
            evaluate(&student, &noise, &dev).unwrap(),
            t0.elapsed().as_secs_f64()
        );
    }
}
