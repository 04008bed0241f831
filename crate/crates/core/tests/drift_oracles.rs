use daisi::drift::{gmm_drift, Drift, GmmPrior};
use daisi::interpolant::{denoiser_mean_from_drift, score_from_drift, NormStats, Schedule};
use daisi::rng::stream;
use daisi::Result;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

const S: Schedule = Schedule::Linear;

fn phi(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Composite Simpson rule on [lo, hi] with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

/// `E[F(z1, z0) | z_t = z]` by integrating over all `(z0, z1)` pairs on the
/// line `alpha z1 + beta z0 = z`, parametrised by `z1`.
fn conditional(prior: &GmmPrior, t: f64, z: f64, f: impl Fn(f64, f64) -> f64) -> f64 {
    let (a, b) = (S.alpha(t), S.beta(t));
    let joint = |z1: f64| {
        let z0 = (z - a * z1) / b;
        prior.density(z1) * phi(z0) / b
    };
    let n = 40_000;
    let num = simpson(|z1| joint(z1) * f(z1, (z - a * z1) / b), -12.0, 12.0, n);
    let den = simpson(joint, -12.0, 12.0, n);
    num / den
}

fn marginal_density(prior: &GmmPrior, t: f64, z: f64) -> f64 {
    let (a, b) = (S.alpha(t), S.beta(t));
    simpson(|z1| prior.density(z1) * phi((z - a * z1) / b) / b, -12.0, 12.0, 40_000)
}

fn grid() -> Vec<(f64, f64)> {
    let ts = [0.05, 0.25, 0.5, 0.75, 0.95];
    let mut pts = Vec::new();
    for &t in &ts {
        for k in 0..10 {
            pts.push((t, -4.0 + k as f64));
        }
    }
    pts
}

#[test]
fn drift_matches_quadrature_on_grid() {
    let prior = GmmPrior::testbed();
    let mut worst: f64 = 0.0;
    for (t, z) in grid() {
        let exact = conditional(&prior, t, z, |z1, z0| S.dalpha(t) * z1 + S.dbeta(t) * z0);
        let got = gmm_drift(&prior, z, t, S).unwrap();
        worst = worst.max((exact - got).abs());
    }
    assert!(worst < 1e-6, "worst deviation {worst}");
}

#[test]
fn drift_at_half_matches_quadrature() {
    let prior = GmmPrior::testbed();
    let exact = conditional(&prior, 0.5, 0.0, |z1, z0| z1 - z0);
    assert!((gmm_drift(&prior, 0.0, 0.5, S).unwrap() - exact).abs() < 1e-6);
}

#[test]
fn score_from_drift_matches_mixture_score() {
    let prior = GmmPrior::testbed();
    for (t, z) in grid() {
        let b = gmm_drift(&prior, z, t, S).unwrap();
        let s = score_from_drift(&[b], &[z], t, S).unwrap()[0];
        let analytic = prior.marginal_score(z, t, S);
        assert!((s - analytic).abs() < 1e-8, "t={t} z={z}: {s} vs {analytic}");
        // Independent check against the quadrature density.
        let h = 1e-4;
        let fd = (marginal_density(&prior, t, z + h).ln() - marginal_density(&prior, t, z - h).ln()) / (2.0 * h);
        assert!((s - fd).abs() < 1e-5 * (1.0 + fd.abs()), "t={t} z={z}: {s} vs fd {fd}");
    }
}

#[test]
fn denoiser_matches_quadrature_posterior_mean() {
    let prior = GmmPrior::testbed();
    for &(t, z) in &[(0.3, -1.0), (0.6, 2.0), (0.9, 0.4)] {
        let exact = conditional(&prior, t, z, |z1, _| z1);
        let got = prior.denoiser_mean(t, &[z]).unwrap()[0];
        assert!((got - exact).abs() < 1e-6);
    }
}

#[test]
fn endpoint_limit_is_finite() {
    let prior = GmmPrior::testbed();
    let t = 1.0 - 1e-6;
    for &z in &[-3.0, 0.0, 2.5] {
        let b = gmm_drift(&prior, z, t, S).unwrap();
        assert!(b.is_finite());
        let e = denoiser_mean_from_drift(&[b], &[z], t, S).unwrap()[0];
        assert!((e - z).abs() < 1e-4);
    }
}

/// The mixture with its analytic JVP hidden, so the trait's finite-difference
/// default is used.
struct FdOnly(GmmPrior, NormStats);

impl Drift for FdOnly {
    fn dim(&self) -> usize {
        1
    }
    fn stats(&self) -> &NormStats {
        &self.1
    }
    fn drift_batch(&self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
        self.0.drift_batch(t, z, out)
    }
}

#[test]
fn analytic_jvp_matches_finite_differences() {
    let prior = GmmPrior::testbed();
    let fd = FdOnly(prior.clone(), NormStats::identity(1));
    for (t, z) in grid() {
        let a = prior.denoiser_jvp(t, &[z], &[1.0]).unwrap()[0];
        let f = fd.denoiser_jvp(t, &[z], &[1.0]).unwrap()[0];
        assert!((a - f).abs() <= 1e-4 * a.abs().max(1e-3), "t={t} z={z}: {a} vs {f}");
    }
}

#[test]
fn drift_agrees_with_conditioned_monte_carlo() {
    // Kernel-weighted average of the interpolant velocity z1 - z0 over draws
    // whose z_t lands near z.
    let prior = GmmPrior::testbed();
    let mut r = stream(2024, &[]);
    let (t, h) = (0.5, 0.05);
    let probes = [-1.0, 0.5, 2.0];
    let mut num = [0.0; 3];
    let mut den = [0.0; 3];
    for _ in 0..1_000_000 {
        let z1 = prior.sample(&mut r);
        let z0: f64 = r.sample(StandardNormal);
        let zt = t * z1 + (1.0 - t) * z0;
        for (k, &p) in probes.iter().enumerate() {
            let u = (zt - p) / h;
            if u.abs() < 4.0 {
                let w = (-0.5 * u * u).exp();
                num[k] += w * (z1 - z0);
                den[k] += w;
            }
        }
    }
    for (k, &p) in probes.iter().enumerate() {
        let mc = num[k] / den[k];
        let exact = gmm_drift(&prior, p, t, S).unwrap();
        assert!((mc - exact).abs() < 0.05, "z={p}: mc {mc} vs {exact}");
    }
}

proptest! {
    #[test]
    fn jvp_is_linear(z in -4.0f64..5.0, t in 0.05f64..0.95, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let prior = GmmPrior::testbed();
        let fd = FdOnly(prior.clone(), NormStats::identity(1));
        for m in [&prior as &dyn Drift, &fd as &dyn Drift] {
            let jv = m.denoiser_jvp(t, &[z], &[1.0]).unwrap()[0];
            let jw = m.denoiser_jvp(t, &[z], &[-0.5]).unwrap()[0];
            let comb = m.denoiser_jvp(t, &[z], &[a - 0.5 * b]).unwrap()[0];
            prop_assert!((comb - (a * jv + b * jw)).abs() < 1e-6 * (1.0 + jv.abs()) * (1.0 + a.abs() + b.abs()));
        }
    }

    #[test]
    fn drift_is_finite_everywhere(z in -1e3f64..1e3, t in 0.0f64..1.0) {
        prop_assert!(gmm_drift(&GmmPrior::testbed(), z, t, S).unwrap().is_finite());
    }
}
