//! Brute-force and exhaustive oracles for the ADMM projections, the penalty
//! gradient, the dual update identity and convergence on a quadratic toy.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbprune_core::admm::{
    admm_penalty, admm_run_with, project_quantization, project_sparsity, structure_count, AdmmConfig, AdmmPhase,
    AdmmState, QuantScheme, SparsityConstraint,
};
use xbprune_core::network::Linear;
use xbprune_core::{Granularity, Layer, LayerMask, Network, Shape3, WeightTensor};

fn dist_sq(a: &WeightTensor<f64>, b: &WeightTensor<f64>) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn structure_of(shape: &[usize], g: Granularity, idx: usize) -> usize {
    let cols: usize = shape[1..].iter().product();
    let (r, c) = (idx / cols, idx % cols);
    match g {
        Granularity::Filter => r,
        Granularity::Column => c,
        Granularity::Channel => c / (shape[2] * shape[3]),
    }
}

/// Every subset of exactly `alpha` structures; keeping fewer can never be closer.
fn brute_force_min(w: &WeightTensor<f64>, g: Granularity, alpha: usize) -> f64 {
    let count = structure_count(w, g).unwrap();
    let mut best = f64::INFINITY;
    for subset in 0u32..(1 << count) {
        if subset.count_ones() as usize != alpha {
            continue;
        }
        let mut cand = w.clone();
        for (i, v) in cand.values.iter_mut().enumerate() {
            if subset & (1 << structure_of(&w.shape, g, i)) == 0 {
                *v = 0.0;
            }
        }
        best = best.min(dist_sq(w, &cand));
    }
    best
}

fn weight_strategy() -> impl Strategy<Value = (WeightTensor<f64>, Granularity, usize)> {
    let fc = (1usize..=4, 1usize..=8).prop_flat_map(|(r, c)| {
        (prop::collection::vec(-2.0f64..2.0, r * c), prop_oneof![Just(Granularity::Column), Just(Granularity::Filter)])
            .prop_map(move |(v, g)| (vec![r, c], v, g))
    });
    let conv = (1usize..=3, 1usize..=4, 1usize..=2).prop_flat_map(|(n, m, k)| {
        (
            prop::collection::vec(-2.0f64..2.0, n * m * k * k),
            prop_oneof![Just(Granularity::Channel), Just(Granularity::Filter), Just(Granularity::Column)],
        )
            .prop_map(move |(v, g)| (vec![n, m, k, k], v, g))
    });
    prop_oneof![fc, conv]
        .prop_filter("at most 8 structures", |(shape, _, g)| {
            let w = WeightTensor::<f64>::zeros(shape.clone(), 0);
            structure_count(&w, *g).unwrap() <= 8
        })
        .prop_flat_map(|(shape, values, g)| {
            let w = WeightTensor::new(shape, values, 0).unwrap();
            let count = structure_count(&w, g).unwrap();
            (Just(w), Just(g), 1..=count)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn sparsity_projection_matches_brute_force((w, g, alpha) in weight_strategy()) {
        let c = SparsityConstraint { layer: 0, granularity: g, alpha };
        let p = project_sparsity(&w, &c).unwrap();
        prop_assert_eq!(dist_sq(&w, &p), brute_force_min(&w, g, alpha));
        prop_assert_eq!(project_sparsity(&p, &c).unwrap(), p.clone());
        // kept structures are copied bit for bit
        for (a, b) in w.values.iter().zip(&p.values) {
            prop_assert!(*b == 0.0 || a.to_bits() == b.to_bits());
        }
    }

    #[test]
    fn quantization_projection_is_idempotent(bits in 1u32..=8, max in 0.01f64..4.0, seed in any::<u64>()) {
        let q = QuantScheme::memristor(bits, max, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f32> = (0..64).map(|_| rng.random_range(-1.5 * max as f32..1.5 * max as f32)).collect();
        let w = WeightTensor::new(vec![8, 8], values, 0).unwrap();
        let m = LayerMask::dense(8, 8);
        let p = project_quantization(&w, &q, &m).unwrap();
        prop_assert_eq!(project_quantization(&p, &q, &m).unwrap(), p.clone());
        prop_assert!(p.values.iter().all(|v| q.contains(*v as f64)));
    }
}

#[test]
fn quantization_matches_exhaustive_scan_on_ten_thousand_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let q = QuantScheme::memristor(8, 0.37, 10.0).unwrap();
    let values: Vec<f32> = (0..10_000).map(|_| rng.random_range(-0.5f32..0.5)).collect();
    let w = WeightTensor::new(vec![100, 100], values, 0).unwrap();
    let p = project_quantization(&w, &q, &LayerMask::dense(100, 100)).unwrap();
    for (x, y) in w.values.iter().zip(&p.values) {
        let (x, y) = (*x as f64, *y as f64);
        let best = q.levels.iter().map(|l| (x - l).abs()).fold(f64::INFINITY, f64::min);
        assert!(q.contains(y));
        assert_eq!((x - y).abs(), best, "weight {x} snapped to {y}");
    }
}

#[test]
fn exact_midpoints_resolve_to_the_larger_magnitude() {
    let q = QuantScheme::memristor(4, 1.0, 10.0).unwrap();
    for pair in q.levels.windows(2) {
        let mid = 0.5 * (pair[0] + pair[1]);
        if mid - pair[0] != pair[1] - mid {
            continue; // not an exact binary midpoint
        }
        let want = if pair[0].abs() > pair[1].abs() { pair[0] } else { pair[1] };
        let scan: Vec<f64> = q
            .levels
            .iter()
            .copied()
            .filter(|l| (mid - l).abs() == (mid - pair[0]).abs())
            .collect();
        assert_eq!(scan.len(), 2, "both neighbours are nearest");
        assert_eq!(q.nearest(mid), want);
    }
}

fn fc_net(rows: usize, cols: usize, values: Vec<f64>) -> Network<f64> {
    let layers = vec![
        Layer::Flatten,
        Layer::Fc(Linear { weight: WeightTensor::new(vec![rows, cols], values, 0).unwrap(), bias: vec![0.0; rows] }),
    ];
    Network::new(Shape3::new(cols, 1, 1), layers).unwrap()
}

#[test]
fn penalty_gradient_matches_finite_differences_over_20_seeds() {
    const EPS: f64 = 1e-6;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (rng.random_range(1..=5), rng.random_range(1..=6));
        let mut net = fc_net(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut state = AdmmState::new(&net, rng.random_range(0.1..3.0));
        for s in state.layers.iter_mut() {
            s.sparsity = true;
            s.quantization = seed % 3 != 0;
            for v in [&mut s.y, &mut s.z, &mut s.u, &mut s.v] {
                v.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
            }
        }
        let (_, grads) = admm_penalty(&net, &state).unwrap();
        for i in 0..r * c {
            let orig = net.weight(0).values[i];
            net.weight_mut(0).values[i] = orig + EPS;
            let up = admm_penalty(&net, &state).unwrap().0;
            net.weight_mut(0).values[i] = orig - EPS;
            let down = admm_penalty(&net, &state).unwrap().0;
            net.weight_mut(0).values[i] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = grads.weights[0][i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-6, "seed {seed} weight {i}: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn dual_update_is_the_exact_residual_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let values: Vec<f32> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
    let layers = vec![
        Layer::Flatten,
        Layer::Fc(Linear { weight: WeightTensor::new(vec![4, 6], values, 0).unwrap(), bias: vec![0.0; 4] }),
    ];
    let mut net = Network::new(Shape3::new(6, 1, 1), layers).unwrap();
    let schemes = vec![QuantScheme::memristor(3, 1.0, 10.0).unwrap()];
    let constraints = [SparsityConstraint { layer: 0, granularity: Granularity::Column, alpha: 3 }];
    let cfg = AdmmConfig { rounds: 8, phase: AdmmPhase::Joint, ..Default::default() };
    let mut snaps: Vec<(Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>)> = Vec::new();
    let mut noise = ChaCha8Rng::seed_from_u64(10);
    let outcome = admm_run_with(&mut net, &constraints, Some(&schemes), &cfg, None, |net, state, _| {
        let s = &state.layers[0];
        snaps.push((net.weight(0).values.clone(), s.y.clone(), s.u.clone(), s.z.clone(), s.v.clone()));
        for v in net.weight_mut(0).values.iter_mut() {
            *v += noise.random_range(-0.1f32..0.1);
        }
        Ok(vec![])
    })
    .unwrap();
    let last = &outcome.state.layers[0];
    snaps.push((net.weight(0).values.clone(), last.y.clone(), last.u.clone(), last.z.clone(), last.v.clone()));
    for k in 1..snaps.len() {
        let (w, y, u, z, v) = &snaps[k];
        let (_, _, u_prev, _, v_prev) = &snaps[k - 1];
        for i in 0..w.len() {
            assert_eq!((u_prev[i] + (w[i] - y[i])).to_bits(), u[i].to_bits());
            assert_eq!((v_prev[i] + (w[i] - z[i])).to_bits(), v[i].to_bits());
        }
    }
}

#[test]
fn quadratic_toy_residual_settles_below_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (r, c) = (4, 6);
    let target: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut net = fc_net(r, c, target.clone());
    let constraints = [SparsityConstraint { layer: 0, granularity: Granularity::Column, alpha: 3 }];
    let cfg = AdmmConfig { rounds: 30, rho_init: 1.0, rho_growth: 1.5, rho_every: Some(1), ..Default::default() };
    // f(W) = |W - W*|^2: the W-update is the exact proximal step
    // W = (2 W* + rho (Y - U)) / (2 + rho).
    let outcome = admm_run_with(&mut net, &constraints, None, &cfg, None, |net, state, _| {
        let s = &state.layers[0];
        let w = net.weight_mut(0);
        for i in 0..w.len() {
            w.values[i] = (2.0 * target[i] + s.rho * (s.y[i] - s.u[i])) / (2.0 + s.rho);
        }
        Ok(vec![])
    })
    .unwrap();
    let res = outcome.total_sparsity_residuals();
    assert_eq!(res.len(), 30);
    let tail = &res[res.len() / 2..];
    assert!(tail.windows(2).all(|p| p[1] <= p[0]), "{tail:?}");
    assert!(*res.last().unwrap() < 1e-3, "{res:?}");
}

#[test]
fn zero_rounds_leave_the_network_untouched() {
    let mut net = fc_net(2, 3, vec![0.5, -0.1, 0.2, 0.3, 0.0, -0.7]);
    let before = net.clone();
    let constraints = [SparsityConstraint { layer: 0, granularity: Granularity::Column, alpha: 1 }];
    let cfg = AdmmConfig { rounds: 0, ..Default::default() };
    let out = admm_run_with(&mut net, &constraints, None, &cfg, None, |_, _, _| unreachable!()).unwrap();
    assert_eq!(net, before);
    assert!(out.history.is_empty());
}
