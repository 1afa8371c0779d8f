//! Quick numerical self-checks run by `semadv selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::models::{ClassifierArch, ClassifierParams, EnergyArch, EnergyNetParams, Network};
use crate::samplers::{run_sampler, separable, InitLaw, SamplerConfig, Start};
use crate::tensor::gradcheck::{numeric_gradient, relative_error};
use crate::tensor::{Graph, Tensor};
use crate::warp::{tps_apply, tps_fit, ControlGrid, TpsParams};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Stationary variance of LMC on `x²/2` against `1/(1 − ε²/4)` at ε = 0.1,
/// pooled over 64 chains, 2% tolerance.
pub fn lmc_variance(seed: u64) -> SuiteResult {
    let eps = 0.1;
    let (chains, steps, burn) = (64usize, 100_000usize, 2_000usize);
    let energy = separable::<f64>(|v| 0.5 * v * v, |v| v);
    let cfg = SamplerConfig {
        step_size: eps,
        steps,
        init: InitLaw::FixedPoint,
        project: false,
        seed,
        thin: 0,
    };
    let start = Tensor::zeros(&[chains, 1]);
    let (mut sum, mut sum2, mut count) = (0.0f64, 0.0f64, 0usize);
    let run = run_sampler(&energy, &cfg, Start::At(&start), 0, &mut |step, x| {
        if step > burn {
            for &v in x.data() {
                sum += v;
                sum2 += v * v;
            }
            count += x.len();
        }
    });
    let target = 1.0 / (1.0 - eps * eps / 4.0);
    match run {
        Ok(_) => {
            let mean = sum / count as f64;
            let var = sum2 / count as f64 - mean * mean;
            let rel = (var - target).abs() / target;
            SuiteResult {
                name: "lmc-variance",
                passed: rel < 0.02,
                detail: format!("variance {var:.4} vs {target:.4} (rel {rel:.4})"),
            }
        }
        Err(e) => SuiteResult {
            name: "lmc-variance",
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Zero-jitter identity, exact interpolation at λ = 0 and vanishing radial
/// weights for an affine target.
pub fn tps_interpolation(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Tensor::<f64>::zeros(&[1, 28, 28]);
    for v in image.data_mut() {
        *v = rng.gen();
    }
    let lattice = ControlGrid::lattice(28, 28);
    let identity_ok = lattice
        .fit(0.0)
        .and_then(|p| tps_apply(&image, &p))
        .map(|w| w == image)
        .unwrap_or(false)
        && tps_apply(&image, &TpsParams::identity(lattice.source().to_vec())).map(|w| w == image).unwrap_or(false);
    let jittered = ControlGrid::jittered(28, 28, 1.5, &mut rng);
    let interp_err = tps_fit(jittered.source(), jittered.target(), 0.0)
        .map(|p| {
            jittered
                .source()
                .iter()
                .zip(jittered.target())
                .map(|(s, t)| {
                    let m = p.map(*s);
                    (m[0] - t[0]).abs().max((m[1] - t[1]).abs())
                })
                .fold(0.0, f64::max)
        })
        .unwrap_or(f64::INFINITY);
    let affine: Vec<[f64; 2]> = lattice
        .source()
        .iter()
        .map(|p| [1.1 * p[0] - 0.2 * p[1] + 0.7, 0.3 * p[0] + 0.9 * p[1] - 1.2])
        .collect();
    let w_max = tps_fit(lattice.source(), &affine, 0.0)
        .map(|p| p.weights().iter().flat_map(|w| w.iter()).fold(0.0f64, |a, v| a.max(v.abs())))
        .unwrap_or(f64::INFINITY);
    SuiteResult {
        name: "tps-interpolation",
        passed: identity_ok && interp_err <= 1e-4 && w_max < 1e-6,
        detail: format!("identity exact {identity_ok}, max target error {interp_err:.2e}, affine |w|∞ {w_max:.2e}"),
    }
}

fn network_input_check(net: &dyn Network<f64>, x: &Tensor<f64>, weights: &Tensor<f64>, coords: &[usize]) -> f64 {
    let eval = |x: &Tensor<f64>, grad: bool| {
        let mut g = Graph::new();
        let xv = if grad { g.input(x.clone()) } else { g.constant(x.clone()) };
        let p = net.params().bind(&mut g, false);
        let out = net.forward(&mut g, xv, &p).expect("forward");
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).expect("matching shapes");
        let total = g.sum(prod).expect("sum");
        let value = g.value(total).data()[0];
        let dx = grad.then(|| g.backward(total).expect("backward").take(xv).expect("input grad"));
        (value, dx)
    };
    let analytic = eval(x, true).1.expect("requested");
    let picked: Vec<f64> = coords.iter().map(|&i| analytic.data()[i]).collect();
    let numeric = numeric_gradient(&mut |t| eval(t, false).0, x, 1e-6, Some(coords));
    relative_error(&picked, &numeric)
}

/// Input gradients of both networks in double precision against central differences.
pub fn gradient_check(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clf = ClassifierParams::<f64>::init(ClassifierArch::compact(), &mut rng).expect("valid arch");
    let ebm = EnergyNetParams::<f64>::init(EnergyArch::compact(), &mut rng).expect("valid arch");
    let mut x = Tensor::<f64>::zeros(&[2, 1, 28, 28]);
    for v in x.data_mut() {
        *v = rng.gen();
    }
    let coords: Vec<usize> = (0..24).map(|_| rng.gen_range(0..x.len())).collect();
    let mut w_clf = Tensor::<f64>::zeros(&[2, 10]);
    for v in w_clf.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let w_ebm = Tensor::from_vec(vec![0.7, -1.3]);
    let e_clf = network_input_check(&clf, &x, &w_clf, &coords);
    let e_ebm = network_input_check(&ebm, &x, &w_ebm, &coords);
    SuiteResult {
        name: "gradient-check",
        passed: e_clf < 1e-5 && e_ebm < 1e-5,
        detail: format!("classifier rel {e_clf:.2e}, energy net rel {e_ebm:.2e}"),
    }
}

pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    vec![lmc_variance(seed), tps_interpolation(seed), gradient_check(seed)]
}
