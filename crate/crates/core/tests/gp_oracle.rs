use planeval::gp::{gp_minimize, MinimizeOptions};
use planeval::seeding::substream;
use rand::Rng;

const OPTIMUM: [f64; 4] = [0.3, 0.3, 0.3, 0.3];

fn bowl(p: &[f64]) -> f64 {
    p.iter().zip(OPTIMUM).map(|(x, o)| (x - o).powi(2)).sum()
}

/// Best of 10⁴ seeded uniform draws.
fn random_search(seed: u64) -> (Vec<f64>, f64) {
    let mut rng = substream(seed, "oracle");
    (0..10_000)
        .map(|_| {
            let p: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let l = bowl(&p);
            (p, l)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

#[test]
fn bowl_matches_random_search_oracle() {
    let (_, oracle) = random_search(1);
    for seed in [1, 2, 3] {
        let opts = MinimizeOptions { n_calls: 40, seed, ..MinimizeOptions::default() };
        let trace = gp_minimize(4, |p| Ok(bowl(p)), &opts).unwrap();
        let best = trace.best();
        let dist = bowl(&best.point).sqrt();
        eprintln!("seed {seed}: gp {:.3e} (dist {dist:.4}), oracle {oracle:.3e}", best.loss);
        assert!(dist <= 0.1, "seed {seed}: {:?}", best.point);
        assert!(best.loss <= oracle, "seed {seed}");
    }
}

#[test]
fn trace_invariants() {
    let opts = MinimizeOptions { n_calls: 30, seed: 9, ..MinimizeOptions::default() };
    let mut calls = 0;
    let trace = gp_minimize(
        4,
        |p| {
            calls += 1;
            Ok(bowl(p))
        },
        &opts,
    )
    .unwrap();
    assert_eq!(calls, 30);
    assert_eq!(trace.evaluations.len(), 30);
    let mut running = f64::INFINITY;
    let prefix_best: Vec<f64> = trace
        .evaluations
        .iter()
        .map(|e| {
            running = running.min(e.loss);
            running
        })
        .collect();
    assert!(prefix_best.windows(2).all(|w| w[1] <= w[0]));
    let init_best = prefix_best[opts.n_init - 1];
    assert!(trace.best().loss <= init_best);
    assert!(trace
        .evaluations
        .iter()
        .all(|e| e.point.iter().all(|x| (0.0..=1.0).contains(x))));
}
