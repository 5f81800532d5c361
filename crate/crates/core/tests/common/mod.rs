#![allow(dead_code)]

use dcacrn::tensor::{Tape, Tensor, Var};
use dcacrn::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so that gradients which are
/// zero up to rounding compare on an absolute 1e-10 scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite-difference check of `build` with respect to every input.
///
/// `build` maps input leaves to an arbitrary-shaped output, which is reduced
/// to a scalar by a fixed random weighting so that every output element
/// contributes a distinct coefficient. Returns the worst relative error.
pub fn grad_check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.shape(out).to_vec()
    };
    let weights = random_tensor(&probe_shape, &mut rng(0xfeed));

    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Direct two-pass evaluation of the correlation of columns `j` and `k`.
pub fn brute_force_pearson(window: &[f64], length: usize, regions: usize, j: usize, k: usize) -> f64 {
    let xj: Vec<f64> = (0..length).map(|r| window[r * regions + j]).collect();
    let xk: Vec<f64> = (0..length).map(|r| window[r * regions + k]).collect();
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let (mj, mk) = (mean(&xj), mean(&xk));
    let mut cov = 0.0;
    let mut vj = 0.0;
    let mut vk = 0.0;
    for r in 0..length {
        cov += (xj[r] - mj) * (xk[r] - mk);
        vj += (xj[r] - mj).powi(2);
        vk += (xk[r] - mk).powi(2);
    }
    let l = length as f64;
    (cov / l) / ((vj / l).sqrt() * (vk / l).sqrt())
}

/// Fraction of (positive, negative) pairs ordered correctly, ties ½.
pub fn pair_count_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let mut good = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                good += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    good / pairs
}

/// Two-sided Student t tail by Simpson quadrature. Substituting
/// `t = √ν·tan θ` turns the density into `cos^(ν−1) θ` on `[0, π/2)`, so
/// `p = ∫_{θ0}^{π/2} cos^(ν−1) / ∫_0^{π/2} cos^(ν−1)` with `θ0 = atan(|t|/√ν)`.
pub fn quadrature_p(t: f64, df: f64) -> f64 {
    let f = |theta: f64| theta.cos().powf(df - 1.0);
    let simpson = |a: f64, b: f64| {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    let theta0 = (t.abs() / df.sqrt()).atan();
    simpson(theta0, half_pi) / simpson(0.0, half_pi)
}
