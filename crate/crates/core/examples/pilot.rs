//! Pilot runs used to fix hyperparameters and thresholds of the
//! training-based checks. `cargo run --release --example pilot -- <name>`.

use std::time::Instant;

use mdts_core::analysis::analyze_domain;
use mdts_core::checkpoint::Checkpoint;
use mdts_core::corpus::{synth_corpus, SignalKind, SynthConfig, SynthDomain};
use mdts_core::corpus::{LayoutConfig, LayoutField, LayoutShape};
use mdts_core::finetune::{evaluate_samples, finetune, FinetuneConfig, TaskSpec};
use mdts_core::losses::masked_region_mse;
use mdts_core::masking::random_mask;
use mdts_core::model::{Model, ModelConfig};
use mdts_core::training::{TrainConfig, Trainer};
use mdts_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn overfit(lr: f64, seed: u64, views: usize) -> Result<()> {
    let start = Instant::now();
    let cfg = SynthConfig {
        domains: vec![SynthDomain {
            name: "osc".into(),
            variates: 2,
            samples: 1,
            length: 192,
            min_length: None,
            frequency_hz: 100.0,
            noise: 0.0,
            signal: SignalKind::Oscillatory { min_period: 12.0, max_period: 60.0 },
            layout: None,
        }],
    };
    let mut corpus = synth_corpus(&cfg, seed)?.normalized();
    let one = corpus.samples[0].clone();
    corpus.samples = vec![one; views];
    let mut mc = ModelConfig::tiny();
    mc.context_length = 192;
    let mut model = Model::new(mc, seed)?;
    model.register_domain((*corpus.domains[0]).clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let tc = TrainConfig { epochs: 200, batch_size: views, lr, val_fraction: 0.0, seed, ..Default::default() };
    let mut t = Trainer::new(model, tc)?;
    t.run(&corpus, None)?;
    let s = mdts_core::corpus::crop_at(&corpus.samples[0], 192, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut acc = 0.0;
    for _ in 0..20 {
        let plan = random_mask(2, 8, 0.75, &mut rng)?;
        let pred = t.model.forward_reconstruct(&s, "osc", &[0, 1], &plan)?;
        acc += masked_region_mse(&s.values, &pred, &vec![true; 384], &plan.visible, 24)? / 20.0;
    }
    let l = &t.state.step_losses;
    println!(
        "overfit lr={lr} views={views} seed={seed}: first {:.4} last {:.4} masked-mse {acc:.5} ({:.1}s)",
        l[0].total,
        l[l.len() - 1].total,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn dom(name: &str, variates: usize, samples: usize, length: usize, signal: SignalKind) -> SynthDomain {
    SynthDomain {
        name: name.into(),
        variates,
        samples,
        length,
        min_length: None,
        frequency_hz: 100.0,
        noise: 0.0,
        signal,
        layout: None,
    }
}

fn pretrained(corpus: &mdts_core::corpus::Corpus, context: usize, tc: TrainConfig) -> Result<Checkpoint> {
    let mut mc = ModelConfig::tiny();
    mc.context_length = context;
    let mut model = Model::new(mc, tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed + 1);
    for d in &corpus.domains {
        model.register_domain((**d).clone(), &mut rng)?;
    }
    let mut t = Trainer::new(model, tc)?;
    t.run(&corpus.normalized(), None)?;
    let l = &t.state.step_losses;
    println!("  pretrain steps {} first {:.4} last {:.4}", l.len(), l[0].total, l[l.len() - 1].total);
    Ok(t.checkpoint())
}

fn classification(seed: u64, pre_epochs: usize, ft_epochs: usize, lr: f64) -> Result<()> {
    let start = Instant::now();
    let cfg = SynthConfig {
        domains: vec![
            dom("cls", 2, 96, 192, SignalKind::Classes { periods: vec![8.0, 30.0] }),
            dom("osc", 3, 32, 192, SignalKind::Oscillatory { min_period: 10.0, max_period: 80.0 }),
        ],
    };
    let corpus = synth_corpus(&cfg, seed)?;
    let ckpt = pretrained(
        &corpus,
        192,
        TrainConfig { epochs: pre_epochs, batch_size: 16, lr: 3e-3, seed, ..Default::default() },
    )?;
    let task = TaskSpec::Classification { num_classes: 2 };
    let fc = FinetuneConfig { epochs: ft_epochs, batch_size: 8, lr, seed, ..Default::default() };
    let out = finetune(&ckpt, &corpus, Some("cls"), &task, &fc)?;
    let test = synth_corpus(&cfg, seed + 1000)?;
    let ts: Vec<_> = test.samples.iter().filter(|s| s.domain.name == "cls").collect();
    let rep = evaluate_samples(&out.checkpoint.model, &task, &ts, seed)?;
    println!(
        "cls seed={seed} pre={pre_epochs} ft={ft_epochs} lr={lr}: val {:?} test {:?} ({:.1}s)",
        out.report[0].value,
        rep[0].value,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn forecasting(seed: u64, pre_epochs: usize, ft_epochs: usize, lr: f64, n: usize, plr: f64) -> Result<()> {
    let start = Instant::now();
    let cfg = SynthConfig { domains: vec![dom("per", 1, n, 600, SignalKind::Periodic { period: 48.0 })] };
    let corpus = synth_corpus(&cfg, seed)?;
    let ckpt = pretrained(
        &corpus,
        432,
        TrainConfig { epochs: pre_epochs, batch_size: 16, lr: plr, seed, ..Default::default() },
    )?;
    let task = TaskSpec::Forecasting { context: 336, horizon: 96 };
    let fc = FinetuneConfig { epochs: ft_epochs, batch_size: 8, lr, seed, ..Default::default() };
    let out = finetune(&ckpt, &corpus, None, &task, &fc)?;
    let test = synth_corpus(&cfg, seed + 1000)?;
    let ts: Vec<_> = test.samples.iter().collect();
    let rep = evaluate_samples(&out.checkpoint.model, &task, &ts, seed)?;
    println!("fcst seed={seed} pre={pre_epochs} ft={ft_epochs} lr={lr} n={n} plr={plr}: test mse {:.4} persistence {:.4} ({:.1}s)", rep[0].value, rep[1].value, start.elapsed().as_secs_f64());
    Ok(())
}

fn layout(seed: u64, epochs: usize, samples: usize, lr: f64, scale: f64, speed: Option<f64>) -> Result<()> {
    let start = Instant::now();
    let mut d = dom(
        "eeg",
        19,
        samples,
        192,
        SignalKind::Oscillatory { min_period: envf("PILOT_PMIN", 8.0), max_period: envf("PILOT_PMAX", 64.0) },
    );
    d.noise = envf("PILOT_NOISE", d.noise);
    d.layout = Some(LayoutConfig {
        dims: 2,
        sources: envf("PILOT_SOURCES", 6.0) as usize,
        length_scale: scale,
        source_extent: envf("PILOT_EXTENT", 1.2),
        field: if std::env::var("PILOT_WAVES").is_ok() { LayoutField::Waves } else { LayoutField::Sources },
        shape: if std::env::var("PILOT_RING").is_ok() { LayoutShape::Closed } else { LayoutShape::Filled },
        speed,
    });
    let cfg = SynthConfig { domains: vec![d] };
    let corpus = synth_corpus(&cfg, seed)?;
    let ckpt = pretrained(&corpus, 192, TrainConfig { epochs, batch_size: 16, lr, seed, ..Default::default() })?;
    let emb = ckpt.model.variate_embeddings("eeg")?;
    let rep = analyze_domain("eeg", emb, corpus.layouts.get("eeg"), 1000, seed)?;
    println!("layout seed={seed} epochs={epochs} n={samples} lr={lr} scale={scale} speed={speed:?}: ev {:?} r2 {:?} axis {:?} p {:?} ({:.1}s)",
        rep.explained_variance, rep.r_squared, rep.r_squared_per_axis, rep.p_value, start.elapsed().as_secs_f64());
    if std::env::var("PILOT_DUMP").is_ok() {
        let l = &corpus.layouts["eeg"];
        for v in 0..l.rows() {
            println!(
                "  v{v:02} layout {:+.3} {:+.3} pca {:+.4} {:+.4} {:+.4}",
                l.get(v, 0),
                l.get(v, 1),
                rep.projection[v][0],
                rep.projection[v][1],
                rep.projection[v][2]
            );
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    match args.get(1).map(String::as_str) {
        Some("overfit") => {
            for views in [1, 8] {
                for lr in [1e-2, 2e-2, 5e-2] {
                    for seed in 0..3 {
                        overfit(lr, seed, views)?;
                    }
                }
            }
        }
        Some("cls") => {
            for seed in 0..3 {
                classification(seed, 30, 10, 1e-3)?;
            }
        }
        Some("fcst") => {
            let pre: usize = args.get(2).map_or(30, |s| s.parse().unwrap());
            let ft: usize = args.get(3).map_or(10, |s| s.parse().unwrap());
            let lr: f64 = args.get(4).map_or(1e-3, |s| s.parse().unwrap());
            let n: usize = args.get(5).map_or(64, |s| s.parse().unwrap());
            let plr: f64 = args.get(6).map_or(3e-3, |s| s.parse().unwrap());
            for seed in 0..2 {
                forecasting(seed, pre, ft, lr, n, plr)?;
            }
        }
        Some("layout") => {
            let epochs: usize = args.get(2).map_or(30, |s| s.parse().unwrap());
            let n: usize = args.get(3).map_or(256, |s| s.parse().unwrap());
            let lr: f64 = args.get(4).map_or(3e-3, |s| s.parse().unwrap());
            let scale: f64 = args.get(5).map_or(0.45, |s| s.parse().unwrap());
            let speed: Option<f64> = args.get(6).and_then(|s| s.parse().ok()).filter(|v: &f64| *v > 0.0);
            let seeds: u64 = args.get(7).map_or(2, |s| s.parse().unwrap());
            for seed in 0..seeds {
                layout(seed, epochs, n, lr, scale, speed)?;
            }
        }
        _ => eprintln!("usage: pilot overfit|cls|fcst|layout"),
    }
    Ok(())
}

fn envf(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
