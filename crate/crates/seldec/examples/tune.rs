use seldec::backbone::DiversityConfig;
use seldec::config::RunConfig;
use seldec::data::Partition;
use seldec::ensemble::predict_set;
use seldec::metrics::{accuracy, ece};
use seldec::pipeline::{evaluate_members, run_in_memory};

fn main() {
    // args: snr variants(e.g. 8x4,16x1) lr epochs holdout [seeds]
    let a: Vec<String> = std::env::args().skip(1).collect();
    let snr: f64 = a[0].parse().unwrap();
    let variants: Vec<(usize, usize)> = a[1]
        .split(',')
        .map(|v| {
            let (s, w) = v.split_once('x').unwrap();
            (s.parse().unwrap(), w.parse().unwrap())
        })
        .collect();
    let lr: f64 = a[2].parse().unwrap();
    let epochs: usize = a[3].parse().unwrap();
    let holdout: f64 = a[4].parse().unwrap();
    let n_seeds: u64 = a.get(5).map(|x| x.parse().unwrap()).unwrap_or(5);
    let mut e8s = vec![];
    let mut e1s = vec![];
    let mut accs = vec![];
    let mut gains = vec![];
    let mut acc_half = vec![];
    let mut aurc8 = vec![];
    let mut aurc1 = vec![];
    let t0 = std::time::Instant::now();
    for seed in 1..=n_seeds {
        let mut cfg = RunConfig::desk();
        cfg.synth.snr = snr;
        cfg.master_seed = seed;
        cfg.train.learning_rate = lr;
        cfg.train.epochs_max = epochs;
        cfg.train.patience = (epochs / 5).max(8);
        cfg.train.holdout_fraction = holdout;
        cfg.diversity = DiversityConfig {
            bootstrap: std::env::var("BOOT").is_ok(),
            channel_dropout_p: 0.0,
            max_time_shift: 0,
            time_mask_fraction: 0.0,
            hyper_variants: variants.clone(),
        };
        let run = run_in_memory(&cfg).unwrap();
        let test_idx = run.split.trials(&run.data, Partition::Test);
        let test_labels: Vec<usize> = test_idx.iter().map(|&i| run.data.label(i)).collect();
        let art8 = evaluate_members(&run.data, &run.split, &run.members, &cfg.selective, 15, seed).unwrap();
        let art1 = evaluate_members(&run.data, &run.split, &run.members[..1], &cfg.selective, 15, seed).unwrap();
        let p1 = predict_set(&run.members[..1], &run.data, &test_idx, false).unwrap();
        let mut macc = vec![];
        for m in &run.members {
            let p = predict_set(std::slice::from_ref(m), &run.data, &test_idx, false).unwrap();
            macc.push(accuracy(&p, &test_labels).unwrap());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        e8s.push(art8.report.full_coverage.ece);
        e1s.push(ece(&p1, &test_labels, 15).unwrap());
        accs.push(art8.report.full_coverage.acc);
        gains.push(art8.report.full_coverage.acc - mean(&macc));
        acc_half.push(1.0 - art8.curve.risk_at_coverage(0.5).unwrap());
        aurc8.push(art8.report.aurc);
        aurc1.push(art1.report.aurc);
        eprintln!(
            "  seed={seed}: ece8={:.3} ece1={:.3} acc={:.3} acc@.5={:.3} aurc8={:.3} aurc1={:.3}",
            e8s.last().unwrap(),
            e1s.last().unwrap(),
            accs.last().unwrap(),
            acc_half.last().unwrap(),
            aurc8.last().unwrap(),
            aurc1.last().unwrap()
        );
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("snr={snr} variants={:?} lr={lr} ep={epochs} hold={holdout}: acc={:.3} acc@.5={:.3} gain={:.3} | ece8={:.3} ece1={:.3} | aurc8={:.3} aurc1={:.3} [{:.0}s]",
        variants, mean(&accs), mean(&acc_half), mean(&gains), mean(&e8s), mean(&e1s), mean(&aurc8), mean(&aurc1), t0.elapsed().as_secs_f64());
}
