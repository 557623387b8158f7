// Scratch check: do the stored experts/student generalize from the training
// covers to held-out covers? Usage: evalgen <out_dir> <user>

use candle_core::Device;
use stegolock::config::PipelineConfig;
use stegolock::data::{Domain, DomainTriple};
use stegolock::distill::ProtectedModel;
use stegolock::experts::{evaluate, ExpertEnsemble};
use stegolock::pipeline::{stage_seed, RunContext};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = std::path::PathBuf::from(args.first().expect("out dir"));
    let user = args.get(1).map(String::as_str).unwrap_or("alice");
    let dev = Device::Cpu;

    let cfg = PipelineConfig::load(std::path::Path::new("configs/desk.toml")).unwrap();
    let ctx = RunContext::from_config(cfg, 1, &out).unwrap();
    let (train, test) = ctx.ensure_dataset().unwrap();
    let codec = ctx.ensure_codec().unwrap();
    let key = ctx.user_key(user).unwrap();

    let ens = ExpertEnsemble::load(out.join(format!("experts/{user}.ckpt")), &dev).unwrap();
    let student = ProtectedModel::load(out.join(format!("protected/{user}.ckpt")), &dev)
        .ok()
        .map(|pm| pm.student);

    for (name, base) in [("train", &train), ("test", &test)] {
        let tri = DomainTriple::build(
            base.clone(),
            key.clone(),
            stage_seed(1, &format!("evalgen/{name}/{user}")),
        )
        .unwrap();
        tri.materialize(&codec).unwrap();
        let auth = tri.domain_dataset(&codec, Domain::Authorized).unwrap();
        let noise = tri.domain_dataset(&codec, Domain::Noise).unwrap();
        println!(
            "{name}: real auth {:.3} | real benign {:.3} | fake_b benign {:.3}",
            evaluate(&ens.real, &auth, &dev).unwrap(),
            evaluate(&ens.real, base, &dev).unwrap(),
            evaluate(&ens.fake_benign, base, &dev).unwrap(),
        );
        if let Some(s) = &student {
            println!(
                "{name}: student benign {:.3} auth {:.3} noise {:.3}",
                evaluate(s, base, &dev).unwrap(),
                evaluate(s, &auth, &dev).unwrap(),
                evaluate(s, &noise, &dev).unwrap(),
            );
        }
    }
}
