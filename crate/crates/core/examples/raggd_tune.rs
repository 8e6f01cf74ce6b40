//! Scratch probe for the amortized-adaptation pipeline constants.

use raglab_core::raggd::*;
use std::time::Instant;

fn main() {
    if std::env::var("SCAN").is_ok() {
        for seed in [42u64, 7, 123, 2024] {
            for alpha in [0.95f64, 1.05, 1.15] {
                let (steps, decay) = (4000usize, 0.25);
                let cfg = ToyConfig { x_alpha: alpha, ..ToyConfig::default() };
                let gen = ToyGenerator::new(cfg.clone(), seed).unwrap();
                let world = ToyWorld::new(cfg.clone(), seed).unwrap();
                let lr = 3.5e-3 * (1.2 / alpha).powi(2);
                let bcfg =
                    BaseTrainConfig { seed, steps, lr, lr_decay: decay, ..BaseTrainConfig::default() };
                let (base, curve) = match train_base(&gen, &world, &bcfg) {
                    Ok(x) => x,
                    Err(e) => {
                        println!("seed={seed} alpha={alpha}: {e}");
                        continue;
                    }
                };
                let eps = world.episodes(seed + 1, 200, false);
                let pred_untrained = Predictor::new(&cfg, seed + 2);
                let mut gains = Vec::new();
                let mut worst5 = f64::INFINITY;
                let eff0 = gen.effective(&base, None);
                for ep in &eps {
                    let b = gen.query_loss(&eff0, &ep.query_x, &ep.query_y, &ep.ctx.docs);
                    let ad = inner_sgd(&gen, &base, &ep.ctx, cfg.inner_eta, 5).unwrap();
                    let t = gen.query_loss(
                        &gen.effective(&ad, None),
                        &ep.query_x,
                        &ep.query_y,
                        &ep.ctx.docs,
                    );
                    worst5 = worst5.min(b - t);
                }
                for k in [1, 5, 10] {
                    let rows =
                        evaluate_suite(&gen, &base, &pred_untrained, &eps, cfg.inner_eta, k).unwrap();
                    gains.push(rows[0].eval_loss - rows[1].eval_loss);
                }
                println!(
                    "seed={seed} alpha={alpha}: train_last={:.4} gains K1={:.4} K5={:.4} K10={:.4} K1/K5={:.1}% worst5={:+.3}",
                    curve.last().unwrap().train_loss,
                    gains[0],
                    gains[1],
                    gains[2],
                    100.0 * gains[0] / gains[1],
                    worst5
                );
            }
        }
        return;
    }

    if std::env::var("DIAG").is_ok() {
        let seed: u64 = std::env::var("SEED").map(|s| s.parse().unwrap()).unwrap_or(2024);
        let cfg = ToyConfig::default();
        let gen = ToyGenerator::new(cfg.clone(), seed).unwrap();
        let world = ToyWorld::new(cfg.clone(), seed).unwrap();
        let bcfg = BaseTrainConfig { seed, steps: 3000, lr_decay: 0.3, ..Default::default() };
        let (base, curve) = train_base(&gen, &world, &bcfg).unwrap();
        println!("train_last={:.4}", curve.last().unwrap().train_loss);
        let eff0 = gen.effective(&base, None);
        let eps = world.episodes(seed + 1, 200, false);
        // Per-episode K=5 delta, bucketed per family.
        let mut per_fam: std::collections::BTreeMap<usize, (f64, f64, usize)> = Default::default();
        let mut worst = (0usize, f64::INFINITY);
        for (i, ep) in eps.iter().enumerate() {
            let base_l = gen.query_loss(&eff0, &ep.query_x, &ep.query_y, &ep.ctx.docs);
            let adapted = inner_sgd(&gen, &base, &ep.ctx, cfg.inner_eta, 5).unwrap();
            let eff5 = gen.effective(&adapted, None);
            let tt_l = gen.query_loss(&eff5, &ep.query_x, &ep.query_y, &ep.ctx.docs);
            let d = base_l - tt_l;
            let e = per_fam.entry(ep.family).or_insert((0.0, 0.0, 0));
            e.0 += d;
            e.1 += base_l;
            e.2 += 1;
            if d < worst.1 {
                worst = (i, d);
            }
        }
        for (f, (d, b, n)) in &per_fam {
            println!(
                "family {f}: mean_delta={:+.4} mean_base={:.4} n={n}",
                d / *n as f64,
                b / *n as f64
            );
        }
        println!("worst episode {} delta={:+.4}", worst.0, worst.1);
        // Demo-loss and query-loss trajectory on the worst episode.
        let ep = &eps[worst.0];
        for k in 0..=10usize {
            let ad = inner_sgd(&gen, &base, &ep.ctx, cfg.inner_eta, k).unwrap();
            let eff = gen.effective(&ad, None);
            println!(
                "  k={k:2} demo={:.6} query={:.6}",
                gen.demo_loss(&eff, &ep.ctx),
                gen.query_loss(&eff, &ep.query_x, &ep.query_y, &ep.ctx.docs)
            );
        }
        return;
    }

    let cfg = ToyConfig::default();
    let seed: u64 = std::env::var("SEED").map(|s| s.parse().unwrap()).unwrap_or(42);
    let envf = |k: &str, d: f64| std::env::var(k).map(|s| s.parse().unwrap()).unwrap_or(d);
    let gen = ToyGenerator::new(cfg.clone(), seed).unwrap();
    let world = ToyWorld::new(cfg.clone(), seed).unwrap();

    let t0 = Instant::now();
    let bcfg = BaseTrainConfig {
        seed,
        steps: envf("B1STEPS", 8000.0) as usize,
        lr: envf("B1LR", 4.5e-3),
        lr_decay: envf("B1DECAY", 0.25),
        ..BaseTrainConfig::default()
    };
    let (base, curve) = train_base(&gen, &world, &bcfg).unwrap();
    println!(
        "base train: {:?} steps={} first={:.4} last={:.4}",
        t0.elapsed(),
        bcfg.steps,
        curve.first().unwrap().train_loss,
        curve.last().unwrap().train_loss
    );

    // Held-out source episodes: base vs TT-SGD at several K.
    let eps = world.episodes(seed + 1, 200, false);
    let pred_untrained = Predictor::new(&cfg, seed + 2);
    for k in [1, 5, 10] {
        let t1 = Instant::now();
        let rows = evaluate_suite(&gen, &base, &pred_untrained, &eps, cfg.inner_eta, k).unwrap();
        println!(
            "eta={} K={k}: base={:.4} tt={:.4} (gain {:.4}) amort(untrained)={:.4}  [{:?}]",
            cfg.inner_eta,
            rows[0].eval_loss,
            rows[1].eval_loss,
            rows[0].eval_loss - rows[1].eval_loss,
            rows[2].eval_loss,
            t1.elapsed()
        );
    }

    // Matching loss: untrained baseline, then trained predictors at K=1,5.
    let n_eval = 64;
    let mu = matching_eval(&gen, &base, &pred_untrained, &world, seed, n_eval, cfg.inner_eta, 1).unwrap();
    println!("matching untrained (K=1 targets): {mu:.4}");

    for k in [1usize, 5, 10] {
        let t2 = Instant::now();
        let mut pred = Predictor::new(&cfg, seed + 3);
        let pcfg = PredictorTrainConfig {
            seed,
            steps: envf("B2STEPS", 10000.0) as usize,
            lr: envf("B2LR", 1e-3),
            lr_decay: envf("B2DECAY", 0.2),
            inner_eta: cfg.inner_eta,
            inner_k: k,
            ..Default::default()
        };
        let curve = train_predictor(&gen, &base, &world, &mut pred, &pcfg).unwrap();
        let m = matching_eval(&gen, &base, &pred, &world, seed, n_eval, cfg.inner_eta, k).unwrap();

        // Per-block decomposition on a few held-out contexts.
        let eff = gen.effective(&base, None);
        let (mut cs, mut ls, mut nb) = (0.0, 0.0, 0);
        for i in 0..16u64 {
            let ctx = world.heldout_context(seed, i);
            let target = gd_target(&gen, &base, &ctx, cfg.inner_eta, k).unwrap();
            let out = pred.forward(&gen.encode(&eff, &ctx)).dense_blocks();
            for (p, t) in out.iter().zip(&target.blocks) {
                let (np, nt) = (p.frob_norm(), t.frob_norm());
                if np > 0.0 && nt > 0.0 {
                    cs += p.frob_dot(t) / (np * nt);
                    ls += (np / nt).ln().abs();
                    nb += 1;
                }
            }
        }
        println!("K={k} diag: mean_cos={:.4} mean_absln={:.4}", cs / nb as f64, ls / nb as f64);
        println!(
            "K={k}: matching train first={:.4} last={:.4} heldout={:.4} ratio_vs_untrained={:.2} [{:?}]",
            curve.first().unwrap().train_loss,
            curve.last().unwrap().train_loss,
            m,
            mu / m,
            t2.elapsed()
        );
        let rows = evaluate_suite(&gen, &base, &pred, &eps, cfg.inner_eta, 5).unwrap();
        let gain_tt = rows[0].eval_loss - rows[1].eval_loss;
        let gain_am = rows[0].eval_loss - rows[2].eval_loss;
        println!(
            "K={k}: base={:.4} tt5={:.4} amort={:.4} tt_gain={:.4} am_gain={:.4} recovery={:.2}%",
            rows[0].eval_loss,
            rows[1].eval_loss,
            rows[2].eval_loss,
            gain_tt,
            gain_am,
            100.0 * gain_am / gain_tt
        );
        let rows_t = match evaluate_suite(&gen, &base, &pred, &world.episodes(seed + 9, 200, true), cfg.inner_eta, 5) {
            Ok(r) => r,
            Err(e) => {
                println!("K={k} transfer: {e}");
                continue;
            }
        };
        println!(
            "K={k} transfer: base={:.4} tt5={:.4} amort={:.4}",
            rows_t[0].eval_loss,
            rows_t[1].eval_loss,
            rows_t[2].eval_loss
        );
    }
}
