// Scratch harness for hyperparameter probing. Not part of the deliverable
// surface; run with: cargo run --release -p condensa --example tune -- <mode>

use condensa::datagen::{generate_dataset, SynthSpec};
use condensa::incremental::{evaluate_cnn, StageRunner, TaskSplit, TrainConfig};
use condensa::condenser::CondenseConfig;
use condensa::memory::MemoryConfig;
use condensa::model::DEFAULT_SHIFT_FOLD;
use std::time::Instant;

fn single_task(lr: f64, epochs: usize, seed: u64) -> (f64, f64) {
    let (acc, t, _) = single_task_verbose(lr, epochs, seed);
    (acc, t)
}

fn single_task_verbose(lr: f64, epochs: usize, seed: u64) -> (f64, f64, Vec<f64>) {
    single_task_full(lr, epochs, seed, 8, 6.0)
}

fn single_task_full(lr: f64, epochs: usize, seed: u64, batch: usize, noise: f64) -> (f64, f64, Vec<f64>) {
    let spec = SynthSpec { noise_std: noise, ..SynthSpec::default() };
    let ds = generate_dataset(&spec).unwrap();
    let split = TaskSplit { stages: vec![(0..8).collect()] };
    let mut runner = StageRunner::new(
        3,
        DEFAULT_SHIFT_FOLD,
        split,
        MemoryConfig { frames_per_exemplar: 1, videos_per_class: 0 },
        seed,
    )
    .unwrap();
    let cfg = TrainConfig { epochs, batch_size: batch, lr_initial: lr, lr_incremental: lr, distillation: false };
    let ccfg = CondenseConfig { iterations: 0, ..CondenseConfig::default() };
    let t0 = Instant::now();
    let report = runner.run_stage(1, &ds, &cfg, &ccfg).unwrap();
    (report.acc_cnn, t0.elapsed().as_secs_f64(), report.epoch_losses)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("single");
    match mode {
        "single" => {
            for lr in [0.15, 0.25, 0.4] {
                for epochs in [16, 24] {
                    let mut accs = Vec::new();
                    let mut secs = 0.0;
                    for seed in 0..3u64 {
                        let (a, t) = single_task(lr, epochs, seed);
                        accs.push(a);
                        secs += t;
                    }
                    println!(
                        "lr={:<5} epochs={:<3} accs={:?} mean={:.3} ({:.1}s/run)",
                        lr,
                        epochs,
                        accs,
                        accs.iter().sum::<f64>() / accs.len() as f64,
                        secs / 3.0
                    );
                }
            }
        }
        "scenario" => {
            // full 4+2+2 desk scenario; args: lr_inc epochs condense_iters videos
            let lr_inc: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.01);
            let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(24);
            let iters: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(30);
            let videos: u32 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(3);
            let strategy: String = args.get(6).cloned().unwrap_or_else(|| "condensed".into());
            let spec = SynthSpec::default();
            let ds = generate_dataset(&spec).unwrap();
            let split = TaskSplit { stages: vec![vec![0, 1, 2, 3], vec![4, 5], vec![6, 7]] };
            for seed in 0..3u64 {
                let t0 = Instant::now();
                let mut runner = StageRunner::new(
                    3,
                    DEFAULT_SHIFT_FOLD,
                    split.clone(),
                    MemoryConfig { frames_per_exemplar: 1, videos_per_class: videos },
                    seed,
                )
                .unwrap();
                let cfg = TrainConfig {
                    epochs,
                    batch_size: 8,
                    lr_initial: 0.2,
                    lr_incremental: lr_inc,
                    distillation: true,
                };
                let strat = match strategy.as_str() {
                    "random" => condensa::condenser::Strategy::Random,
                    "average" => condensa::condenser::Strategy::Average,
                    "all" => condensa::condenser::Strategy::All,
                    _ => condensa::condenser::Strategy::Condensed,
                };
                let prompt = match args.get(7).map(String::as_str) {
                    Some("off") => condensa::condenser::PromptMode::Disabled,
                    _ => condensa::condenser::PromptMode::Instance,
                };
                let ccfg = CondenseConfig { iterations: iters, strategy: strat, prompt_mode: prompt, ..CondenseConfig::default() };
                let mut accs = Vec::new();
                let mut failed = None;
                for k in 1..=3 {
                    match runner.run_stage(k, &ds, &cfg, &ccfg) {
                        Ok(r) => accs.push((r.acc_cnn, r.acc_nme)),
                        Err(e) => {
                            failed = Some(format!("stage {}: {}", k, e));
                            break;
                        }
                    }
                }
                match failed {
                    Some(msg) => println!("seed {}: DIVERGED {}", seed, msg),
                    None => {
                        let avg: f64 = accs.iter().map(|a| a.0).sum::<f64>() / accs.len() as f64;
                        println!(
                            "seed {}: stages {:?} avg_cnn {:.3} ({:.0}s)",
                            seed,
                            accs.iter().map(|a| format!("{:.2}/{:.2}", a.0, a.1)).collect::<Vec<_>>(),
                            avg,
                            t0.elapsed().as_secs_f64()
                        );
                    }
                }
            }
        }
        "distillmag" => {
            use condensa::incremental::{distill_flat, distill_spatial};
            let lr_inc: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.0001);
            let spec = SynthSpec::default();
            let ds = generate_dataset(&spec).unwrap();
            let split = TaskSplit { stages: vec![vec![0, 1, 2, 3], vec![4, 5], vec![6, 7]] };
            let mut runner = StageRunner::new(
                3,
                DEFAULT_SHIFT_FOLD,
                split,
                MemoryConfig { frames_per_exemplar: 1, videos_per_class: 2 },
                0,
            )
            .unwrap();
            let cfg = TrainConfig { epochs: 20, batch_size: 8, lr_initial: 0.2, lr_incremental: lr_inc, distillation: true };
            let ccfg = CondenseConfig { iterations: 0, ..CondenseConfig::default() };
            runner.run_stage(1, &ds, &cfg, &ccfg).unwrap();
            let snap = runner.model.snapshot();
            // drift-free distill on one replay exemplar
            let ex = runner.bank.exemplars().next().unwrap();
            let input = ex.to_replay_tensor();
            let b_new = condensa::model::extract_features(&runner.model, &input).unwrap();
            let b_old = condensa::model::extract_features(snap.params(), &input).unwrap();
            println!(
                "at stage-2 start: spatial {} flat {}",
                distill_spatial(&b_new.stage_maps, &b_old.stage_maps).unwrap(),
                distill_flat(&b_new.embedding, &b_old.embedding).unwrap()
            );
            let m0: f64 = b_new.stage_maps[0].data.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let m1: f64 = b_new.stage_maps[1].data.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let me: f64 = b_new.embedding.data.iter().map(|v| v.abs()).fold(0.0, f64::max);
            println!("map magnitudes: stage1 max {:.3} stage2 max {:.3} embed max {:.3}", m0, m1, me);
            // one stage-2 epoch at the given lr, then re-measure
            let cfg2 = TrainConfig { epochs: 1, ..cfg };
            match runner.run_stage(2, &ds, &cfg2, &ccfg) {
                Ok(r) => {
                    let b_new = condensa::model::extract_features(&runner.model, &input).unwrap();
                    println!(
                        "after 1 epoch at lr {}: spatial {:.3e} flat {:.3e} (acc {:.2})",
                        lr_inc,
                        distill_spatial(&b_new.stage_maps, &b_old.stage_maps).unwrap(),
                        distill_flat(&b_new.embedding, &b_old.embedding).unwrap(),
                        r.acc_cnn
                    );
                }
                Err(e) => println!("after 1 epoch at lr {}: {}", lr_inc, e),
            }
        }
        "confusion" => {
            let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.25);
            let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(32);
            let noise: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(3.0);
            let spec = SynthSpec { noise_std: noise, ..SynthSpec::default() };
            let ds = generate_dataset(&spec).unwrap();
            let split = TaskSplit { stages: vec![(0..8).collect()] };
            let mut runner = StageRunner::new(
                3,
                DEFAULT_SHIFT_FOLD,
                split,
                MemoryConfig { frames_per_exemplar: 1, videos_per_class: 0 },
                0,
            )
            .unwrap();
            let cfg = TrainConfig { epochs, batch_size: 8, lr_initial: lr, lr_incremental: lr, distillation: false };
            let ccfg = CondenseConfig { iterations: 0, ..CondenseConfig::default() };
            runner.run_stage(1, &ds, &cfg, &ccfg).unwrap();
            let mut matrix = vec![vec![0usize; 8]; 8];
            for clip in &ds.test {
                let b = condensa::model::extract_features(&runner.model, &clip.to_tensor()).unwrap();
                let logits = condensa::model::classify(&runner.model, &b).unwrap();
                let pred = logits
                    .data
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                matrix[clip.label as usize][pred] += 1;
            }
            println!("true\\pred  0  1  2  3  4  5  6  7   (0-2 linear, 3-5 circ, 6-7 zig; shape=id%3)");
            for (t, row) in matrix.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|c| format!("{:>2}", c)).collect();
                println!("   {}     {}", t, cells.join(" "));
            }
        }
        "one" => {
            let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.25);
            let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(24);
            let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(8);
            let noise: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(6.0);
            let mut accs = Vec::new();
            for seed in 0..3u64 {
                let (a, t, losses) = single_task_full(lr, epochs, seed, batch, noise);
                println!("seed {}: acc {:.3} in {:.0}s (loss {:.3} -> {:.3})", seed, a, t, losses[0], losses[losses.len()-1]);
                accs.push(a);
            }
            println!("mean {:.3}", accs.iter().sum::<f64>() / 3.0);
        }
        "stability" => {
            let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.1);
            let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(12);
            for seed in 0..12u64 {
                let (a, t) = single_task(lr, epochs, seed);
                println!("seed={} acc={:.3} ({:.1}s)", seed, a, t);
            }
        }
        "loss" => {
            let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.1);
            let (acc, t, losses) = single_task_verbose(lr, 10, 0);
            println!("acc={:.3} in {:.1}s", acc, t);
            for (e, l) in losses.iter().enumerate() {
                println!("  epoch {:>2}: loss {:.4}", e, l);
            }
        }
        "embed" => {
            let spec = SynthSpec::default();
            let ds = generate_dataset(&spec).unwrap();
            let params = condensa::model::ModelParams::init(3, 8, DEFAULT_SHIFT_FOLD, 0).unwrap();
            for class in 0..4u32 {
                let clip = ds.train.iter().find(|c| c.label == class).unwrap();
                let b = condensa::model::extract_features(&params, &clip.to_tensor()).unwrap();
                let e: Vec<String> = b.embedding.data.iter().map(|v| format!("{:.3}", v)).collect();
                println!("class {}: [{}]", class, e.join(", "));
            }
        }
        "probe_head" => {
            // Ceiling of frozen random features: logistic regression on
            // clip embeddings.
            let spec = SynthSpec::default();
            let ds = generate_dataset(&spec).unwrap();
            let params = condensa::model::ModelParams::init(3, 8, DEFAULT_SHIFT_FOLD, 0).unwrap();
            let embed = |clips: &[condensa::datagen::VideoClip]| -> Vec<(Vec<f64>, usize)> {
                clips
                    .iter()
                    .map(|c| {
                        let b = condensa::model::extract_features(&params, &c.to_tensor()).unwrap();
                        (b.embedding.data.clone(), c.label as usize)
                    })
                    .collect()
            };
            let train = embed(&ds.train);
            let test = embed(&ds.test);
            let (k, d) = (8usize, 16usize);
            let mut w = vec![0.0f64; k * d];
            let mut b = vec![0.0f64; k];
            let lr = 0.5;
            for step in 0..4000 {
                let mut gw = vec![0.0; k * d];
                let mut gb = vec![0.0; k];
                let mut loss = 0.0;
                for (e, y) in &train {
                    let logits: Vec<f64> = (0..k)
                        .map(|r| b[r] + (0..d).map(|j| w[r * d + j] * e[j]).sum::<f64>())
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    loss += z.ln() + m - logits[*y];
                    for r in 0..k {
                        let p = exps[r] / z - if r == *y { 1.0 } else { 0.0 };
                        gb[r] += p;
                        for j in 0..d {
                            gw[r * d + j] += p * e[j];
                        }
                    }
                }
                let n = train.len() as f64;
                for (wv, gv) in w.iter_mut().zip(&gw) {
                    *wv -= lr * gv / n;
                }
                for (bv, gv) in b.iter_mut().zip(&gb) {
                    *bv -= lr * gv / n;
                }
                if step % 800 == 0 {
                    println!("  step {:>4}: loss {:.4}", step, loss / n);
                }
            }
            let acc = |set: &[(Vec<f64>, usize)]| {
                let mut c = 0;
                for (e, y) in set {
                    let logits: Vec<f64> = (0..k)
                        .map(|r| b[r] + (0..d).map(|j| w[r * d + j] * e[j]).sum::<f64>())
                        .collect();
                    let argmax = logits
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    if argmax == *y {
                        c += 1;
                    }
                }
                c as f64 / set.len() as f64
            };
            println!("frozen-feature head: train acc {:.3}, test acc {:.3}", acc(&train), acc(&test));
        }
        "condense_speed" => {
            let iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(400);
            let spec = SynthSpec::default();
            let ds = generate_dataset(&spec).unwrap();
            let params = condensa::model::ModelParams::init(3, 8, DEFAULT_SHIFT_FOLD, 0).unwrap();
            let clip = &ds.train[0];
            let cfg = CondenseConfig { iterations: iters, ..CondenseConfig::default() };
            let t0 = Instant::now();
            let ex = condensa::condenser::optimize_exemplar(clip, 0, &params, &cfg, 1).unwrap();
            let a = ex.loss_audit.unwrap();
            println!(
                "{} iters (joint) in {:.1}s; total {:.4} -> {:.4}; l_p_f {:.4} -> {:.4}",
                iters,
                t0.elapsed().as_secs_f64(),
                a.initial.total,
                a.last.total,
                a.initial.l_p_f,
                a.last.l_p_f
            );
            let cfg2 = CondenseConfig { iterations: iters, prompt_mode: condensa::condenser::PromptMode::Disabled, ..cfg };
            let t0 = Instant::now();
            let _ = condensa::condenser::optimize_exemplar(clip, 0, &params, &cfg2, 1).unwrap();
            println!("{} iters (weights only) in {:.1}s", iters, t0.elapsed().as_secs_f64());
        }
        "eval_speed" => {
            let spec = SynthSpec::default();
            let ds = generate_dataset(&spec).unwrap();
            let params = condensa::model::ModelParams::init(3, 8, DEFAULT_SHIFT_FOLD, 0).unwrap();
            let clips: Vec<&condensa::datagen::VideoClip> = ds.test.iter().collect();
            let t0 = Instant::now();
            let acc = evaluate_cnn(&params, &clips).unwrap();
            println!("eval {} clips in {:.2}s (acc {:.3})", clips.len(), t0.elapsed().as_secs_f64(), acc);
        }
        other => panic!("unknown mode {}", other),
    }
}
