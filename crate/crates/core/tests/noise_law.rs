use bolton::linalg;
use bolton::noise::{laplace_ball_tail_bound, sample_laplace_ball};
use bolton::rng::{seeded, Stream};
use statrs::distribution::{ContinuousCDF, Gamma};

const D: usize = 10;
const DELTA2: f64 = 0.2;
const EPS: f64 = 1.0;
const N: usize = 100_000;

fn samples(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed, Stream::OutputNoise);
    (0..N).map(|_| sample_laplace_ball(D, DELTA2, EPS, &mut rng).unwrap()).collect()
}

#[test]
fn radial_law_is_gamma() {
    let mut norms: Vec<f64> = samples(1).iter().map(|k| linalg::norm(k)).collect();
    let mean = norms.iter().sum::<f64>() / N as f64;
    assert!((mean / 2.0 - 1.0).abs() < 0.02, "mean {mean}");

    norms.sort_by(f64::total_cmp);
    let law = Gamma::new(D as f64, EPS / DELTA2).unwrap();
    let ks = norms
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = law.cdf(x);
            (f - i as f64 / N as f64).abs().max((i + 1) as f64 / N as f64 - f)
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.01, "KS {ks}");

    let level = laplace_ball_tail_bound(D, DELTA2, EPS, 0.1);
    let tail = norms.iter().filter(|&&x| x > level).count() as f64 / N as f64;
    assert!(tail <= 0.1, "tail mass {tail}");
}

#[test]
fn directions_are_isotropic() {
    let all = samples(2);
    let mut mean = vec![0.0; D];
    let mut second = vec![0.0; D];
    for k in &all {
        let n = linalg::norm(k);
        for j in 0..D {
            let u = k[j] / n;
            mean[j] += u / N as f64;
            second[j] += u * u / N as f64;
        }
    }
    assert!(linalg::norm(&mean) < 0.02, "{mean:?}");
    for s in second {
        assert!((s - 1.0 / D as f64).abs() < 0.02, "{s}");
    }
}

#[test]
fn scale_equivariance() {
    for seed in 0..200 {
        let a = sample_laplace_ball(D, DELTA2, EPS, &mut seeded(seed, Stream::OutputNoise)).unwrap();
        let b = sample_laplace_ball(D, 2.0 * DELTA2, EPS, &mut seeded(seed, Stream::OutputNoise)).unwrap();
        let c = sample_laplace_ball(D, DELTA2, EPS / 2.0, &mut seeded(seed, Stream::OutputNoise)).unwrap();
        for j in 0..D {
            assert!((b[j] - 2.0 * a[j]).abs() <= 1e-12 * a[j].abs().max(1.0));
            assert!((c[j] - 2.0 * a[j]).abs() <= 1e-12 * a[j].abs().max(1.0));
        }
    }
}
