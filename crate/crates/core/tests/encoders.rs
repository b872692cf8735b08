use daff_pinn::features::{rectangle_eigenvalue, DaffBank, Edge, Encoder, RffBank};
use daff_pinn::model::Model;
use daff_pinn::network::init_params;
use daff_pinn::problems::{boundary_max_abs, Problem, EDGES};
use daff_pinn::Jet;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kirchhoff() -> Problem {
    Problem::Kirchhoff(Default::default())
}

fn daff_model(problem: Problem, comps: &[u8], mn: &[i32], seed: u64) -> Model {
    let bank = problem.daff_bank(comps, mn).unwrap();
    let net = init_params(3, 32, bank.dim(), seed, false, vec![(1, 2), (1, 3)]).unwrap();
    Model {
        problem,
        encoder: Encoder::Daff(bank),
        net,
    }
}

/// Max |u| and max |moment residual| over `n` random boundary points.
fn boundary_extremes(model: &Model, n: usize, seed: u64) -> (f64, f64) {
    let d = model.problem.domain();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut u_max, mut m_max) = (0.0f64, 0.0f64);
    for k in 0..n {
        let edge = EDGES[k % 4];
        let p = d.edge_point(edge, rng.random());
        let jet = model.output_jet(p[0], p[1], 2).unwrap();
        u_max = u_max.max(jet.value().abs());
        let r = model.problem.boundary_residuals(&jet, p, edge).unwrap();
        m_max = m_max.max(r[1].abs());
    }
    (u_max, m_max)
}

#[test]
fn untrained_biasless_comp1_network_satisfies_plate_conditions() {
    for seed in 0..3 {
        let m = daff_model(kirchhoff(), &[1], &[1, 2, 3], seed);
        let (u, mom) = boundary_extremes(&m, 1000, seed + 100);
        assert!(u <= 1e-12, "seed {seed}: |u| {u:e}");
        assert!(mom <= 1e-10, "seed {seed}: moment {mom:e}");
    }
}

#[test]
fn biased_network_loses_boundary_exactness() {
    let p = kirchhoff();
    let bank = p.daff_bank(&[1], &[1]).unwrap();
    let mut net = init_params(2, 8, bank.dim(), 1, true, vec![(1, 2)]).unwrap();
    for b in net.biases.as_mut().unwrap() {
        b.fill(0.3);
    }
    let m = Model {
        problem: p,
        encoder: Encoder::Daff(bank),
        net,
    };
    assert!(boundary_max_abs(&m, &m.problem, 50).unwrap() > 1e-6);
}

#[test]
fn helmholtz_comp1_features_vanish_on_the_square_edges() {
    let m = daff_model(Problem::Helmholtz(Default::default()), &[1], &[2, 8], 7);
    assert!(boundary_max_abs(&m, &m.problem, 250).unwrap() <= 1e-12);
}

#[test]
fn comp_types_meet_their_edge_conditions() {
    // (x factor is sin, y factor is sin) per comp type.
    for (comp, sx, sy) in [(1u8, true, true), (2, true, false), (3, false, true), (4, false, false)] {
        let bank = DaffBank::build(&[comp], &[1, 2], (2.0, 3.0)).unwrap();
        assert_eq!(bank.dim(), 4);
        for e in Edge::ALL {
            let sine = if e.normal_is_x() { sx } else { sy };
            for k in 0..=4 {
                if (k % 2 == 0) == sine {
                    let d = bank.derivative_check(k, e).unwrap();
                    assert!(d < 1e-12, "comp {comp} order {k} edge {e:?}: {d:e}");
                } else {
                    assert!(bank.derivative_check(k, e).unwrap() > 1e-3, "comp {comp} order {k} edge {e:?}");
                }
            }
        }
    }
    let bank = DaffBank::build(&[1], &[1], (1.0, 1.0)).unwrap();
    assert!(bank.derivative_check(5, Edge::Left).is_err());
}

#[test]
fn daff_features_are_laplace_eigenfunctions() {
    let (a, b) = (2.0, 3.0);
    let bank = DaffBank::build(&[1, 2, 3, 4], &[1, 3], (a, b)).unwrap();
    let (x, y) = Jet::seed(0.7, 1.9, 4).unwrap();
    let enc = bank.encode(&x, &y).unwrap();
    for (e, j) in bank.entries.iter().zip(&enc.jets) {
        let lam = rectangle_eigenvalue(e.m, e.n, a, b);
        assert!((j.laplacian() + lam * j.value()).abs() < 1e-10 * lam.max(1.0));
    }
}

#[test]
fn unknown_comp_type_is_rejected() {
    assert!(DaffBank::build(&[5], &[1], (1.0, 1.0)).is_err());
    assert!(DaffBank::build(&[1], &[], (1.0, 1.0)).is_err());
}

#[test]
fn rff_bank_is_seed_deterministic_with_cos_then_sin() {
    let a = RffBank::sample(&[1.0, 10.0], 8, 2, 42).unwrap();
    let b = RffBank::sample(&[1.0, 10.0], 8, 2, 42).unwrap();
    let c = RffBank::sample(&[1.0, 10.0], 8, 2, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.dim(), 32);
    let e = Encoder::Rff(a.clone());
    let v = e.encode_values(0.2, -0.4).unwrap();
    for i in 0..a.features() {
        let z = a.rows[[i, 0]] * 0.2 + a.rows[[i, 1]] * -0.4;
        assert!((v[i] - z.cos()).abs() < 1e-14);
        assert!((v[i + a.features()] - z.sin()).abs() < 1e-14);
    }
}

#[test]
fn rff_rejects_nonpositive_variance() {
    assert!(RffBank::sample(&[0.0], 4, 2, 1).is_err());
    assert!(RffBank::sample(&[-1.0], 4, 2, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn comp1_encodings_are_zero_on_every_edge(t in 0.0f64..1.0, m in 1i32..6, n in 1i32..6) {
        let p = kirchhoff();
        let bank = p.daff_bank(&[1], &[m, n]).unwrap();
        let d = p.domain();
        for edge in EDGES {
            let q = d.edge_point(edge, t);
            let enc = Encoder::Daff(bank.clone()).encode_values(q[0], q[1]).unwrap();
            prop_assert!(enc.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn value_encoding_matches_jet_value(x in -1.0f64..1.0, y in -1.0f64..1.0) {
        let e = Encoder::Rff(RffBank::sample(&[1.0, 4.0], 3, 2, 8).unwrap());
        let (xj, yj) = Jet::seed(x, y, 4).unwrap();
        let jets = e.encode(&xj, &yj).unwrap();
        prop_assert_eq!(jets.values, e.encode_values(x, y).unwrap());
    }
}
