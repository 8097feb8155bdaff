//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::path::PathBuf;
use std::time::Instant;

use cdrnp::autodiff::{ParamStore, Tape};
use cdrnp::checkpoint::Checkpoint;
use cdrnp::config::RunConfig;
use cdrnp::data::{load_ratings, split_cold_start, DomainTag};
use cdrnp::eval::evaluate;
use cdrnp::model::{sample_latent, Cdrnp, GaussianLatent, LatentMode, ModelConfig};
use cdrnp::pipeline::{prepare, train_and_evaluate, RunOutcome};
use cdrnp::synth::{generate_synthetic, oracle_noise_mae, ORACLE_DRAWS};
use cdrnp::tasks::{Phase, Task, TaskPool};
use cdrnp::training::{check_model_gradients, init_rng, kl_divergence, train, vocab_of, LossWeights};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path).expect("config loads")
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let cfg = config("tiny.toml");
    let run = prepare(&cfg).unwrap();
    let pool = run.pool(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let task = pool.training_task(&mut rng).unwrap();
    let aux: Vec<_> = run.data.source.ratings()[..4].iter().map(|r| (r.user, r.item, r.rating)).collect();
    let mut model = Cdrnp::init(cfg.model, vocab_of(&run.data), &mut init_rng(0)).unwrap();
    let weights = LossWeights::from(&cfg.training());
    let report = check_model_gradients(&mut model, weights, &task, &aux, 1e-5, 0, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = report.worst().map(|p| p.name.clone()).unwrap_or_default();
    verdict(
        report.max_rel_error <= 1e-4 && secs < 60.0 && cfg.model.d == 4 && task.support.len() == 3 && task.query.len() == 2,
        format!(
            "max rel error {:.2e} (worst `{worst}`), {} kink coordinates skipped, {secs:.1} s",
            report.max_rel_error, report.skipped
        ),
    )
}

fn kl_correctness() -> Verdict {
    let g = |mu: f64, sigma: f64| GaussianLatent {
        mu: vec![mu],
        log_sigma: vec![sigma.ln()],
    };
    let cases = [
        (GaussianLatent { mu: vec![0.0; 3], log_sigma: vec![0.0; 3] }, GaussianLatent { mu: vec![0.0; 3], log_sigma: vec![0.0; 3] }, 0.0),
        (g(1.0, 1.0), g(0.0, 1.0), 0.5),
        (g(0.0, 2.0), g(0.0, 1.0), 1.5 - 2f64.ln()),
    ];
    let worst_closed = cases
        .iter()
        .map(|(q, p, e)| (kl_divergence(q, p).unwrap() - e).abs())
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut min_kl = f64::INFINITY;
    for _ in 0..10_000 {
        let dim = rng.random_range(1..6);
        let mut draw = |lo: f64, hi: f64| (0..dim).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
        let q = GaussianLatent { mu: draw(-5.0, 5.0), log_sigma: draw(-3.0, 3.0) };
        let p = GaussianLatent { mu: draw(-5.0, 5.0), log_sigma: draw(-3.0, 3.0) };
        min_kl = min_kl.min(kl_divergence(&q, &p).unwrap());
    }
    verdict(
        worst_closed <= 1e-12 && min_kl >= 0.0,
        format!("closed-form error {worst_closed:.1e}, min KL over 10^4 pairs {min_kl:.3e}"),
    )
}

fn exchangeability() -> Verdict {
    let cfg = config("tiny.toml");
    let run = prepare(&cfg).unwrap();
    let pool = run.pool(&cfg).unwrap();
    let model_cfg = ModelConfig { init_std: 0.5, ..cfg.model };
    let model = Cdrnp::init(model_cfg, vocab_of(&run.data), &mut init_rng(0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut latent_dev, mut pred_dev) = (0.0f64, 0.0f64);
    for t in 0..100 {
        let task = pool.training_task(&mut rng).unwrap();
        let mut perm_s: Vec<usize> = (0..task.support.len()).collect();
        let mut perm_q: Vec<usize> = (0..task.query.len()).collect();
        perm_s.shuffle(&mut rng);
        perm_q.shuffle(&mut rng);
        let permuted = Task {
            support: perm_s.iter().map(|&i| task.support[i].clone()).collect(),
            query: perm_q.iter().map(|&i| task.query[i].clone()).collect(),
            ..task.clone()
        };
        let run_one = |task: &Task| {
            let mut tape = Tape::new(&model.store);
            let out = model
                .forward_task(&mut tape, task, Phase::Training, &mut ChaCha8Rng::seed_from_u64(t))
                .unwrap();
            let l = out.latents;
            let post = l.posterior.unwrap();
            let latents: Vec<f64> = [l.prior.mu, l.prior.log_sigma, post.mu, post.log_sigma, l.h]
                .iter()
                .flat_map(|&v| tape.value(v).data().to_vec())
                .collect();
            let preds: Vec<f64> = out.predictions.iter().map(|&p| tape.scalar(p)).collect();
            (latents, preds)
        };
        let (la, pa) = run_one(&task);
        let (lb, pb) = run_one(&permuted);
        latent_dev = la.iter().zip(&lb).map(|(a, b)| (a - b).abs()).fold(latent_dev, f64::max);
        for (k, &i) in perm_q.iter().enumerate() {
            pred_dev = pred_dev.max((pb[k] - pa[i]).abs());
        }
    }
    verdict(
        latent_dev <= 1e-9 && pred_dev <= 1e-7,
        format!("max latent deviation {latent_dev:.1e}, max prediction deviation {pred_dev:.1e} over 100 tasks"),
    )
}

fn reparameterization() -> Verdict {
    let mu = [0.5, -1.0, 2.0];
    let sigma = [0.3, 1.0, 2.0];
    let n = 100_000;
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut sum = [0.0; 3];
    let mut sum_sq = [0.0; 3];
    let g = GaussianLatent {
        mu: mu.to_vec(),
        log_sigma: sigma.iter().map(|s: &f64| s.ln()).collect(),
    };
    for _ in 0..n {
        let mut tape = Tape::new(&store);
        let nodes = g.record(&mut tape).unwrap();
        let (z, _) = sample_latent(&mut tape, nodes, &mut rng, LatentMode::Sample).unwrap();
        for (j, v) in tape.value(z).data().iter().enumerate() {
            sum[j] += v;
            sum_sq[j] += v * v;
        }
    }
    let mut worst = 0.0f64;
    for j in 0..3 {
        let m = sum[j] / n as f64;
        let var = sum_sq[j] / n as f64 - m * m;
        worst = worst.max(((m - mu[j]) / mu[j]).abs());
        worst = worst.max(((var - sigma[j] * sigma[j]) / (sigma[j] * sigma[j])).abs());
    }
    verdict(worst <= 0.02, format!("max relative deviation of mean/variance {worst:.4}"))
}

fn no_leakage() -> Verdict {
    let cfg = config("tiny.toml");
    let run = prepare(&cfg).unwrap();
    let pool = run.pool(&cfg).unwrap();
    let model_cfg = ModelConfig { init_std: 0.5, ..cfg.model };
    let model = Cdrnp::init(model_cfg, vocab_of(&run.data), &mut init_rng(0)).unwrap();

    let mut altered_target = run.data.target.to_interactions();
    for r in &mut altered_target {
        if run.split.test_users.binary_search(&r.user_id).is_ok() {
            r.rating = 5.0 - r.rating;
        }
    }
    let target = cdrnp::data::DomainDataset::from_interactions(DomainTag::Target, altered_target, 1).unwrap();
    let altered = cdrnp::data::CrossDomain::new(run.data.source.clone(), target);
    let altered_pool = TaskPool::new(&altered, &run.split, cfg.training().task_config()).unwrap();

    let mut identical = true;
    let mut checked = 0;
    for (i, user) in pool.test_users().iter().enumerate() {
        let a = pool.testing_task(user, &mut ChaCha8Rng::seed_from_u64(i as u64)).unwrap();
        let b = altered_pool.testing_task(user, &mut ChaCha8Rng::seed_from_u64(i as u64)).unwrap();
        let (Some(a), Some(mut b)) = (a, b) else { continue };
        b.hidden.iter_mut().for_each(|h| *h = -*h);
        let pa = model.predict(&a, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let pb = model.predict(&b, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        identical &= pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()) && a.hidden != b.hidden;
        checked += 1;
    }
    verdict(identical && checked > 0, format!("{checked} testing tasks, predictions bit-identical: {identical}"))
}

struct Benchmark {
    full: RunOutcome,
    no_prm: f64,
    no_both: f64,
    oracle: f64,
    oracle_se: f64,
    full_seconds: f64,
}

fn benchmark() -> Benchmark {
    let cfg = config("synthetic.toml");
    let run = prepare(&cfg).unwrap();
    let start = Instant::now();
    let full = train_and_evaluate(&cfg, &run).unwrap();
    let full_seconds = start.elapsed().as_secs_f64();
    let ablated = |prm: bool, acp: bool| {
        let mut c = cfg.clone();
        c.model.ablations.prm = prm;
        c.model.ablations.acp = acp;
        train_and_evaluate(&c, &run).unwrap().report.mae
    };
    let no_prm = ablated(true, false);
    let no_both = ablated(true, true);
    let o = oracle_noise_mae(cfg.synth.as_ref().unwrap(), ORACLE_DRAWS, 0);
    Benchmark {
        full,
        no_prm,
        no_both,
        oracle: o.monte_carlo,
        oracle_se: o.std_error,
        full_seconds,
    }
}

fn transfer(b: &Benchmark) -> Verdict {
    let mae = b.full.report.mae;
    let base = b.full.baseline.mae;
    verdict(
        mae <= 0.8 * base && mae <= 2.0 * b.oracle && b.full_seconds < 300.0,
        format!(
            "MAE {mae:.4} vs baseline {base:.4} (ratio {:.3}), oracle {:.4} ± {:.4} (ratio {:.3}), train+eval {:.0} s",
            mae / base,
            b.oracle,
            b.oracle_se,
            mae / b.oracle,
            b.full_seconds
        ),
    )
}

fn ablation_order(b: &Benchmark) -> Verdict {
    let full = b.full.report.mae;
    verdict(
        full <= b.no_prm && b.no_prm <= b.no_both + 0.02,
        format!("MAE full {full:.4}, w/o PRM {:.4}, w/o PRM+ACP {:.4}", b.no_prm, b.no_both),
    )
}

fn monotonicity(b: &Benchmark) -> Verdict {
    let r = &b.full.log.records;
    verdict(
        r.len() >= 3 && r[2].rec < r[0].rec,
        format!("epoch-1 L_rec {:.4}, epoch-3 L_rec {:.4}", r[0].rec, r[2].rec),
    )
}

fn determinism() -> Verdict {
    let cfg = config("tiny.toml");
    let once = || {
        let run = prepare(&cfg).unwrap();
        let (model, _) = train(cfg.model, cfg.training(), &run.data, &run.split).unwrap();
        let pool = run.pool(&cfg).unwrap();
        let report = evaluate(&model, &pool, cfg.seed, &cfg.hash(), 1).unwrap();
        let ck = Checkpoint {
            model,
            optimizer: None,
            epoch: cfg.train.epochs,
            config_hash: cfg.hash(),
        };
        (ck.to_bytes(), serde_json::to_vec(&report).unwrap())
    };
    let (a, b) = (once(), once());
    verdict(
        a.0 == b.0 && a.1 == b.1,
        format!("checkpoints equal: {} ({} bytes), reports equal: {}", a.0 == b.0, a.0.len(), a.1 == b.1),
    )
}

fn data_plumbing() -> Verdict {
    let cfg = config("synthetic.toml");
    let (src, tgt, _) = generate_synthetic(cfg.synth.as_ref().unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut lossless = true;
    for (d, tag, name) in [(&src, DomainTag::Source, "s.csv"), (&tgt, DomainTag::Target, "t.csv")] {
        let path = dir.path().join(name);
        d.write_csv(&path).unwrap();
        let back = load_ratings(&path, tag, 1).unwrap();
        lossless &= back.to_interactions() == d.to_interactions();
    }

    let overlap = cdrnp::data::compute_overlap(&src, &tgt).0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut split_ok = true;
    for _ in 0..1000 {
        let alpha = rng.random_range(0.01..0.99);
        let seed: u64 = rng.random();
        let s = split_cold_start(&overlap, alpha, seed).unwrap();
        let n_test = (alpha * overlap.len() as f64).floor() as usize;
        let mut union: Vec<_> = s.train_users.iter().chain(&s.test_users).cloned().collect();
        union.sort();
        split_ok &= s.test_users.len() == n_test
            && s.train_users.len() == overlap.len() - n_test
            && union == overlap
            && s.test_users.iter().all(|u| s.train_users.binary_search(u).is_err());
    }
    verdict(
        lossless && split_ok,
        format!("CSV round-trip lossless: {lossless}, 1000 splits partition with floor sizing: {split_ok}"),
    )
}

fn main() {
    let bench = benchmark();
    let results = [
        ("gradient correctness", gradient_correctness()),
        ("KL correctness", kl_correctness()),
        ("exchangeability", exchangeability()),
        ("reparameterization statistics", reparameterization()),
        ("no leakage", no_leakage()),
        ("synthetic cold-start transfer", transfer(&bench)),
        ("ablation ordering", ablation_order(&bench)),
        ("training monotonicity", monotonicity(&bench)),
        ("determinism", determinism()),
        ("data plumbing", data_plumbing()),
    ];
    let mut failed = 0;
    for (i, (name, v)) in results.iter().enumerate() {
        println!("criterion {:>2} {:<32} {} | {}", i + 1, name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
