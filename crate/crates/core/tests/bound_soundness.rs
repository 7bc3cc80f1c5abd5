use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use psrl_core::bounds::{composite_feature_bounds, crown_bounds, crown_ibp_bounds, ibp_bounds};
use psrl_core::policy::{cert_action_set, q_bounds_from_feature_box};
use psrl_core::{BoxBounds, CertConfig, Mlp, PsrlPolicy};

const SAMPLES: usize = 10_000;
// containment is checked up to float rounding of the forward pass
const SLACK: f64 = 1e-9;

fn random_net(rng: &mut ChaCha8Rng) -> Mlp {
    let depth = rng.random_range(1..4);
    let mut dims = vec![rng.random_range(1..5)];
    for _ in 0..depth {
        dims.push(rng.random_range(2..9));
    }
    dims.push(rng.random_range(1..4));
    let mut net = Mlp::random(&dims, rng);
    for layer in net.layers_mut() {
        for b in &mut layer.biases {
            *b = rng.random_range(-0.3..0.3);
        }
    }
    net
}

fn sample_in<R: Rng>(b: &BoxBounds, rng: &mut R) -> Vec<f64> {
    b.lower().iter().zip(b.upper()).map(|(l, u)| if l < u { rng.random_range(*l..=*u) } else { *l }).collect()
}

fn escapes(bounds: &BoxBounds, y: &[f64]) -> bool {
    y.iter().zip(bounds.lower().iter().zip(bounds.upper())).any(|(v, (l, u))| *v < l - SLACK || *v > u + SLACK)
}

#[test]
fn ibp_and_crown_contain_monte_carlo_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut ibp_escapes, mut crown_escapes) = (0, 0);
    for _ in 0..100 {
        let net = random_net(&mut rng);
        let c: Vec<f64> = (0..net.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rng.random_range(0.001..0.5);
        let input = BoxBounds::new(c.iter().map(|v| v - r).collect(), c.iter().map(|v| v + r).collect()).unwrap();
        let ibp = ibp_bounds(&net, &input).unwrap();
        let crown = crown_bounds(&net, &input).unwrap();
        let both = crown_ibp_bounds(&net, &input).unwrap();
        for (w_both, w_ibp) in both.widths().iter().zip(ibp.widths()) {
            assert!(*w_both <= w_ibp + 1e-12);
        }
        for i in 0..SAMPLES {
            // include the corners, where bounds are most often tight
            let x = if i < 2 {
                if i == 0 { input.lower().to_vec() } else { input.upper().to_vec() }
            } else {
                sample_in(&input, &mut rng)
            };
            let y = net.forward(&x).unwrap();
            ibp_escapes += usize::from(escapes(&ibp, &y));
            crown_escapes += usize::from(escapes(&crown, &y));
        }
    }
    assert_eq!((ibp_escapes, crown_escapes), (0, 0));
}

#[test]
fn crown_is_exact_on_affine_nets() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let net = Mlp::random(&[3, 4], &mut rng);
    let input = BoxBounds::new(vec![0.0, 0.1, 0.2], vec![0.3, 0.2, 0.9]).unwrap();
    let a = crown_bounds(&net, &input).unwrap();
    let b = ibp_bounds(&net, &input).unwrap();
    for i in 0..4 {
        assert!((a.lower()[i] - b.lower()[i]).abs() < 1e-12);
        assert!((a.upper()[i] - b.upper()[i]).abs() < 1e-12);
    }
}

#[test]
fn composite_q_bounds_contain_perturbed_q_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..30 {
        let g = Mlp::random(&[6, 10, 4], &mut rng);
        let q = Mlp::random(&[4, 8, 3], &mut rng);
        let p = PsrlPolicy::new(g, q).unwrap();
        let o: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let eps = rng.random_range(0.0..0.05);
        let feat = composite_feature_bounds(&p.g, &o, eps).unwrap();
        let qb = q_bounds_from_feature_box(&p.q, &feat).unwrap();
        let set = cert_action_set(&p, &o, eps, &CertConfig::linf()).unwrap();
        let region = BoxBounds::around_clipped(&o, eps, 0.0, 1.0).unwrap();
        for _ in 0..2000 {
            let x = sample_in(&region, &mut rng);
            let qv = p.q_values(&x).unwrap();
            for (a, v) in qv.iter().enumerate() {
                assert!(*v >= qb.lower[a] - SLACK && *v <= qb.upper[a] + SLACK);
            }
            assert!(set.contains(p.act(&x).unwrap()));
        }
    }
}
