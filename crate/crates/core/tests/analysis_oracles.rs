use ncg_core::analysis::{
    coarse_predictive_information, empirical_ntic, eval_envelope_correlation, ntic, pearson, predictive_information,
    transition_graph, ClassProbabilities, DiscreteProcess, TransitionGraph,
};
use ncg_core::autodiff::Tensor;
use ncg_core::loss::ClassDistributionSeries;
use ncg_core::model::{ModelSpec, ModelState};
use ncg_core::rng::{SeedSource, StreamRng};
use ncg_core::signals::{MixtureConfig, Signal};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

/// Emits the true envelope as class 0 (it was told the period).
struct Oracle {
    tau: f64,
}

impl ClassProbabilities for Oracle {
    fn class_probabilities(&self, channels: &[&[f64]]) -> ncg_core::Result<ClassDistributionSeries<f64>> {
        let n = channels[0].len();
        let psi: Vec<f64> = (0..n).map(|t| ncg_core::signals::envelope(t as f64, self.tau)).collect();
        let mut data = psi.clone();
        data.extend(psi.iter().map(|p| 1.0 - p));
        ClassDistributionSeries::new(Tensor::new(vec![1, 2, n], data)?, 0)
    }
}

fn signal(n: usize, seed: u64) -> Signal {
    MixtureConfig {
        n,
        ..MixtureConfig::default()
    }
    .generate(seed)
    .unwrap()
}

fn random_chain(rng: &mut StreamRng, x: usize, y: usize) -> DiscreteProcess {
    let kernel: Vec<Vec<f64>> = (0..x)
        .map(|_| {
            // occasional zeros exercise the 0 ln 0 convention
            let raw: Vec<f64> = (0..x).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() + 1e-3 }).collect();
            let total: f64 = raw.iter().sum();
            if total == 0.0 {
                (0..x).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect()
            } else {
                let mut row: Vec<f64> = raw.iter().map(|v| v / total).collect();
                // absorb rounding into the largest entry so the row sums to 1
                let big = (0..x).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                row[big] = 0.0;
                row[big] = 1.0 - row.iter().sum::<f64>();
                row
            }
        })
        .collect();
    let map = (0..x).map(|_| rng.random_range(0..y)).collect();
    DiscreteProcess::new(kernel, map, y).unwrap()
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum()
}

/// `H(Y') - H(Y'|Y)` by enumerating `(x, x')` pairs.
fn coarse_oracle(p: &DiscreteProcess) -> f64 {
    let ny = p.y_size;
    let mut joint = vec![vec![0.0; ny]; ny];
    for (x, row) in p.kernel.iter().enumerate() {
        for (x2, &k) in row.iter().enumerate() {
            joint[p.map[x]][p.map[x2]] += p.stationary[x] * k;
        }
    }
    let py: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let py2: Vec<f64> = (0..ny).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let h_cond: f64 = joint
        .iter()
        .zip(&py)
        .map(|(r, &m)| if m > 0.0 { m * entropy(&r.iter().map(|v| v / m).collect::<Vec<_>>()) } else { 0.0 })
        .sum();
    entropy(&py2) - h_cond
}

#[test]
fn pearson_examples() {
    let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
    assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
    assert!(pearson(&a, &vec![2.0; 50]).is_err());
    let mut rng = SeedSource::new(1).stream("indep");
    let x: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
    assert!(pearson(&x, &y).unwrap().abs() < 0.02);
}

#[test]
fn oracle_model_correlates_perfectly() {
    let sig = signal(20_000, 3);
    let c = eval_envelope_correlation(&Oracle { tau: 2000.0 }, &sig).unwrap();
    assert!((c.best - 1.0).abs() < 1e-12, "{}", c.best);
}

#[test]
fn untrained_model_is_uncorrelated_and_relabeling_invariant() {
    let mut low = 0;
    for seed in 0..3 {
        let src = SeedSource::new(seed);
        let mut model = ModelState::<f64>::build(ModelSpec::noise_default(), &mut src.stream("init")).unwrap();
        let train = signal(5000, seed + 10);
        let window = Tensor::new(vec![5, 1, 1000], train.samples).unwrap();
        model.calibrate(&window, &mut src.stream("calibrate")).unwrap();
        let test = signal(20_000, seed + 20);
        let c = eval_envelope_correlation(&model, &test).unwrap();
        eprintln!("untrained seed {seed}: |r| = {:.4}", c.best);
        low += usize::from(c.best < 0.1);
        let mut flipped = model.clone();
        flipped.permute_classes(&[1, 0]).unwrap();
        let cf = eval_envelope_correlation(&flipped, &test).unwrap();
        assert!((c.best - cf.best).abs() < 1e-12);
        assert_eq!(c.best_class, 1 - cf.best_class);
    }
    // a random filter bank can pick up the variance envelope by chance
    assert!(low >= 2, "only {low} of 3 untrained seeds below 0.1");
}

#[test]
fn simple_chains() {
    // iid: every row is the same distribution
    let row = vec![0.2, 0.5, 0.3];
    let iid = DiscreteProcess::new(vec![row.clone(), row.clone(), row], vec![0, 1, 2], 3).unwrap();
    assert!(predictive_information(&iid).abs() < 1e-12);
    let flip = DiscreteProcess::new(vec![vec![0.9, 0.1], vec![0.1, 0.9]], vec![0, 1], 2).unwrap();
    let hb = -(0.1f64 * 0.1f64.ln() + 0.9 * 0.9f64.ln());
    assert!((predictive_information(&flip) - (std::f64::consts::LN_2 - hb)).abs() < 1e-12);
    assert!((predictive_information(&flip) - 0.368064).abs() < 1e-6);
    let constant = DiscreteProcess::new(flip.kernel.clone(), vec![0, 0], 1).unwrap();
    assert!(ntic(&constant).abs() < 1e-12);
}

#[test]
fn transition_graph_shapes() {
    let cyc: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let g = TransitionGraph::from_sequence(&cyc, 3, 0.2).unwrap();
    for i in 0..3 {
        assert_eq!(g.matrix[i][(i + 1) % 3], 1.0);
    }
    assert_eq!(g.edges().len(), 3);
    let g = TransitionGraph::from_sequence(&[1; 50], 2, 0.2).unwrap();
    let edges = g.edges();
    assert_eq!(edges.len(), 1);
    assert_eq!((edges[0].from, edges[0].to), (1, 1));
    assert_eq!(edges[0].probability, 1.0);
}

#[test]
fn empirical_ntic_of_iid_coin_is_tiny() {
    let mut rng = SeedSource::new(2).stream("coin");
    let seq: Vec<usize> = (0..1_000_000).map(|_| rng.random_range(0..2)).collect();
    assert!(empirical_ntic(&seq).unwrap() < 0.001);
    assert_eq!(empirical_ntic(&[3; 100]).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn chain_identities(seed in any::<u64>(), x in 1usize..=5, y in 1usize..=5) {
        let mut rng = SeedSource::new(seed).stream("chain");
        let p = random_chain(&mut rng, x, y);
        // stationarity
        for j in 0..x {
            let next: f64 = (0..x).map(|i| p.stationary[i] * p.kernel[i][j]).sum();
            prop_assert!((next - p.stationary[j]).abs() < 1e-10);
        }
        prop_assert!((p.stationary.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let pi = predictive_information(&p);
        prop_assert!(pi >= -1e-12);
        // separate summation paths; equal up to rounding
        prop_assert!((ntic(&p.with_identity_map()) - pi).abs() < 1e-12);
        let oracle = coarse_oracle(&p);
        prop_assert!((ntic(&p) - oracle).abs() < 1e-10, "{} vs {}", ntic(&p), oracle);
        prop_assert!((coarse_predictive_information(&p) - oracle).abs() < 1e-10);
    }

    #[test]
    fn transition_rows_are_stochastic(seed in any::<u64>(), k in 2usize..6, thr in 0.0f64..0.9) {
        let mut rng = SeedSource::new(seed).stream("seq");
        let t = 200;
        let mut data = vec![0.0; k * t];
        for ti in 0..t {
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            for ki in 0..k {
                data[ki * t + ti] = raw[ki] / total;
            }
        }
        let s = ClassDistributionSeries::new(Tensor::new(vec![1, k, t], data).unwrap(), 0).unwrap();
        let g = transition_graph(&s, thr).unwrap();
        let edges = g.edges();
        for (i, row) in g.matrix.iter().enumerate() {
            let total: f64 = row.iter().sum();
            let occurs = g.counts[i].iter().sum::<u64>() > 0;
            if occurs {
                prop_assert!((total - 1.0).abs() < 1e-9);
                let (best, &p) = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
                if p > thr {
                    prop_assert!(edges.iter().any(|e| e.from == i && e.to == best));
                }
            }
        }
    }
}
