// Calibration probe for the synthetic acceptance experiments: baseline vs
// full objective, ablation ordering, nonuniform robustness, and timings.
use std::time::Instant;

use tpvae::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let episodes: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let sep: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3.0);
    let dim: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let sigma: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let pre: Preprocess = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(Preprocess::CenterL2);

    let ds = gen_synthetic(&SynthSpec::new(20, dim, 40, sep, 7).unwrap());
    let spec = EpisodeSpec::uniform(5, 1, 15, pre).unwrap();
    let cfg = SolverConfig { lr, sigma_enc: sigma, ..SolverConfig::default() };
    println!(
        "episodes {episodes} sep {sep} dim {dim} lr {lr} sigma {sigma} pre {pre} tau {} iters {}",
        cfg.tau, cfg.max_iters
    );

    let t0 = Instant::now();
    let base = evaluate_baseline(&ds, &spec, &cfg, episodes, 0).unwrap();
    println!(
        "baseline           mean {:.4} ci {:.4}  [{} ms]",
        base.summary.mean,
        base.summary.ci95,
        t0.elapsed().as_millis()
    );

    let t0 = Instant::now();
    let table = ablate(&ds, &spec, &cfg, episodes, 0).unwrap();
    for arm in &table.arms {
        println!(
            "arm {:9} mean {:.4} ci {:.4} entropy {:.4} iters~{:.0}",
            arm.name,
            arm.run.summary.mean,
            arm.run.summary.ci95,
            arm.marginal_entropy,
            arm.run.records.iter().map(|r| r.iters_run as f64).sum::<f64>()
                / arm.run.records.len() as f64,
        );
    }
    println!("ablation took {} ms", t0.elapsed().as_millis());

    let extreme = EpisodeSpec::new(5, 1, vec![19, 19, 18, 18, 1], pre).unwrap();
    let t0 = Instant::now();
    let ext = evaluate(&ds, &extreme, &cfg, episodes, 0).unwrap();
    println!(
        "extreme-nonuniform mean {:.4} ci {:.4}  [{} ms]",
        ext.summary.mean,
        ext.summary.ci95,
        t0.elapsed().as_millis()
    );
    let uniform_full = table.arm("ce+tp+re");
    println!(
        "uniform-vs-extreme gap: {:+.4}",
        ext.summary.mean - uniform_full.run.summary.mean
    );
}
