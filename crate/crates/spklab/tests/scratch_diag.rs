//! Scratch scan - not part of the suite.
use spklab::*;
use std::time::Instant;

fn bench_corpus(seed: u64) -> CorpusConfig {
    CorpusConfig {
        dim: 3,
        n_target_speakers: 50,
        n_unknown_test_speakers: 25,
        n_synthetic_unknown_speakers: 50,
        enroll_per_target: 40,
        test_per_speaker: 40,
        aug_per_target: 5,
        cluster_separation: 2.0,
        within_noise: 1.0,
        aug_noise: None,
        synthetic_per_speaker: Some(20),
        seed,
    }
}

fn bench_train(base_seed: u64, n_candidates: usize, anchor_count: usize) -> TrainConfig {
    let mut t = TrainConfig::default();
    t.epochs = 35;
    t.batch_size = 48;
    t.learning_rate = 0.013;
    t.hidden_dim = 32;
    t.output_dim = Some(6);
    t.anchor_count = anchor_count;
    t.flags.adaptive_anchors = anchor_count > 0;
    t.n_candidates = n_candidates;
    t.base_seed = base_seed;
    t
}

fn eer_of(sheet: &ScoreSheet) -> f64 {
    metrics_report(sheet, &MetricParams::default()).unwrap().eer
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[order[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let num: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den = (rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>()
        * ry.iter().map(|b| (b - my).powi(2)).sum::<f64>())
    .sqrt();
    if den == 0.0 { 0.0 } else { num / den }
}

#[test]
#[ignore]
fn scan_cand0_seeds() {
    // Candidate-0 mean EER per seed (pool of 1 trains exactly candidate 0).
    for seed in 0..20u64 {
        let t0 = Instant::now();
        let records = generate_corpus(&bench_corpus(seed)).unwrap();
        let plans = make_splits(&records, 10, 5, seed.wrapping_add(1)).unwrap();
        let train = bench_train(seed.wrapping_add(2).wrapping_mul(1000), 1, 50);
        let mut eers = Vec::new();
        for plan in &plans {
            let trials = build_trials(&records, plan);
            let set = TrainingSet::from_split(&records, plan, &train.flags).unwrap();
            let pool = train_pool(&train, &set).unwrap();
            let sheet = score_trials(&pool[0].0, &trials, plan.target_ids.len(), HeadKind::Mean, ScoreSource::Candidate(0)).unwrap();
            eers.push(eer_of(&sheet));
        }
        println!(
            "cand0 seed {seed:2}: {:.4} [{:.0}s]",
            eers.iter().sum::<f64>() / eers.len() as f64,
            t0.elapsed().as_secs_f64()
        );
    }
}

#[test]
#[ignore]
fn scan_benchmark_seeds() {
    for seed in 20..50u64 {
        let t0 = Instant::now();
        let records = generate_corpus(&bench_corpus(seed)).unwrap();
        let plans = make_splits(&records, 10, 5, seed.wrapping_add(1)).unwrap();
        let train = bench_train(seed.wrapping_add(2).wrapping_mul(1000), 30, 50);
        let mut base_eers = Vec::new();
        let mut cand_means = Vec::new();
        let mut naive_eers = Vec::new();
        let mut sel_eers = Vec::new();
        let mut viol = 0usize;
        let mut worst = f64::INFINITY;
        let mut min_kept = usize::MAX;
        let mut rho0 = 0.0;
        let mut cand0_eers = Vec::new();
        for (k, plan) in plans.iter().enumerate() {
            let trials = build_trials(&records, plan);
            let cents = enroll_centroids(&records, plan, false).unwrap();
            base_eers.push(eer_of(&baseline_score_trials(&cents, &trials, ScoreSource::Baseline).unwrap()));
            let set = TrainingSet::from_split(&records, plan, &train.flags).unwrap();
            let pool = train_pool(&train, &set).unwrap();
            let sheets: Vec<ScoreSheet> = pool
                .iter()
                .enumerate()
                .map(|(i, (m, _))| {
                    score_trials(m, &trials, plan.target_ids.len(), HeadKind::Mean, ScoreSource::Candidate(i)).unwrap()
                })
                .collect();
            let eers: Vec<f64> = sheets.iter().map(eer_of).collect();
            cand0_eers.push(eers[0]);
            cand_means.push(eers.iter().sum::<f64>() / eers.len() as f64);
            let diags: Vec<SpectralDiagnostics> = pool
                .iter()
                .map(|(m, _)| diagnose_candidate(m, false).unwrap())
                .collect();
            if k == 0 {
                let var_rp: Vec<f64> = diags.iter().map(|d| d.var_rp).collect();
                let oscr: Vec<f64> = sheets
                    .iter()
                    .map(|s| metrics_report(s, &MetricParams::default()).unwrap().oscr)
                    .collect();
                rho0 = spearman(&var_rp, &oscr);
            }
            let sel = select_candidates(&diags, 1.0 / 3.0).unwrap();
            min_kept = min_kept.min(sel.kept.len());
            let all: Vec<usize> = (0..sheets.len()).collect();
            naive_eers.push(eer_of(&fuse_scores(&sheets, &all, ScoreSource::FusedNaive).unwrap()));
            let fsel = eer_of(&fuse_scores(&sheets, &sel.kept, ScoreSource::FusedSelected).unwrap());
            sel_eers.push(fsel);
            let mut sorted = eers.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = (sorted[14] + sorted[15]) / 2.0;
            if fsel > med {
                viol += 1;
            }
            worst = worst.min(med - fsel);
        }
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "seed {seed:2}: base {:.4} cand {:.4} cand0 {:.4} naive {:.4} sel {:.4} viol {viol} worstmargin {worst:+.4} kept>={min_kept} rho0 {rho0:+.3} [{:.0}s]",
            m(&base_eers), m(&cand_means), m(&cand0_eers), m(&naive_eers), m(&sel_eers), t0.elapsed().as_secs_f64()
        );
    }
}

#[test]
#[ignore]
fn scan_anchor_sweep_seeds() {
    let counts = [0usize, 10, 20, 30, 40, 50];
    for seed in [0u64; 0] {
        let t0 = Instant::now();
        let records = generate_corpus(&bench_corpus(seed)).unwrap();
        let plans = make_splits(&records, 10, 5, seed.wrapping_add(1)).unwrap();
        let mut row = format!("sweep seed {seed}:");
        for &a in &counts {
            let train = bench_train(seed.wrapping_add(2).wrapping_mul(1000), 4, a);
            let mut eers = Vec::new();
            for plan in &plans {
                let trials = build_trials(&records, plan);
                let set = TrainingSet::from_split(&records, plan, &train.flags).unwrap();
                let pool = train_pool(&train, &set).unwrap();
                for (i, (m, _)) in pool.iter().enumerate() {
                    let sheet = score_trials(m, &trials, plan.target_ids.len(), HeadKind::Mean, ScoreSource::Candidate(i)).unwrap();
                    eers.push(eer_of(&sheet));
                }
            }
            row += &format!(" {:.4}", eers.iter().sum::<f64>() / eers.len() as f64);
        }
        println!("{row} [{:.0}s]", t0.elapsed().as_secs_f64());
    }
}
