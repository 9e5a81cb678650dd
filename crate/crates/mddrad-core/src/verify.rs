//! Randomized property suites behind the `verify` command: the margin-loss
//! bounding chain, reduction identities, and gradient checks. Each suite
//! returns a report listing counterexample inputs instead of panicking, so
//! the CLI can print them and exit nonzero.

use crate::error::{MddError, Result};
use crate::losses::{
    adversarial_loss, generalized_hinge, lse_loss, margin_indicator, margin_loss_empirical,
    margin_shifted, score_margin, sm_adversarial, sm_cross_entropy, sm_softmax, softmax_slice,
    Margin,
};
use crate::rng::Xoshiro256;
use crate::tensor::{grad_check, Tape};

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn random_case(rng: &mut Xoshiro256) -> (Vec<f64>, usize, f64) {
    let k = 2 + rng.next_usize(5);
    let f: Vec<f64> = (0..k).map(|_| rng.uniform(-4.0, 4.0)).collect();
    let y = 1 + rng.next_usize(k);
    let rho = rng.uniform(0.05, 3.0);
    (f, y, rho)
}

/// Margin-loss bounding chain with an injectable ramp, so a deliberately
/// broken ramp can demonstrate that the suite actually detects violations.
pub fn lemma_suite_with(
    seed: u64,
    trials: usize,
    ramp: &dyn Fn(f64, Margin) -> f64,
) -> SuiteReport {
    let mut rng = Xoshiro256::derive(seed, 0x6C656D);
    let mut failures = Vec::new();
    for trial in 0..trials {
        let (f, y, rho) = random_case(&mut rng);
        let margin = Margin::new(rho).unwrap();
        let case = || format!("trial {trial}: f={f:?} y={y} rho={rho}");

        let phi = score_margin(&f, y).unwrap();
        let ramp_value = ramp(phi, margin);
        let hinge = generalized_hinge(&f, y, 2.0 * rho).unwrap();
        let ce = sm_cross_entropy(&f, y, 2.0 * rho).unwrap();

        // hinge identity: max_j(f_j - f_y + 2rho [j!=y]) == 2rho max(0, 1 - phi/rho)
        let plus = (1.0 - phi / rho).max(0.0);
        let closed = 2.0 * rho * plus;
        if (hinge - closed).abs() > 1e-9 {
            failures.push(format!("hinge identity violated ({}): {hinge} vs {closed}", case()));
        }
        // ramp dominated by the positive part (exact: the ramp is its clamp)
        if ramp_value > plus {
            failures.push(format!(
                "ramp exceeds hinge bound ({}): {ramp_value} > {plus}",
                case()
            ));
        }
        // hinge dominated by soft-margin cross-entropy (exact)
        if hinge > ce {
            failures.push(format!("hinge exceeds cross-entropy ({}): {hinge} > {ce}", case()));
        }
        // ramp stays a proper loss surrogate of the 0-1 indicator
        let zero_one = if phi <= 0.0 { 1.0 } else { 0.0 };
        if ramp_value + 1e-15 < zero_one {
            failures.push(format!("ramp below 0-1 indicator ({})", case()));
        }
    }

    // dataset-level chain on batches of random rows (exact)
    for trial in 0..trials / 10 {
        let n = 1 + rng.next_usize(8);
        let k = 2 + rng.next_usize(4);
        let rho = rng.uniform(0.1, 2.5);
        let margin = Margin::new(rho).unwrap();
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.uniform(-4.0, 4.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| 1 + rng.next_usize(k)).collect();
        let err = margin_loss_empirical(&scores, &labels, margin).unwrap();
        let mean_hinge: f64 = scores
            .iter()
            .zip(&labels)
            .map(|(f, &y)| generalized_hinge(f, y, 2.0 * rho).unwrap())
            .sum::<f64>()
            / n as f64;
        let mean_ce: f64 = scores
            .iter()
            .zip(&labels)
            .map(|(f, &y)| sm_cross_entropy(f, y, 2.0 * rho).unwrap())
            .sum::<f64>()
            / n as f64;
        if err > mean_hinge / (2.0 * rho) + 0.0 || mean_hinge > mean_ce {
            failures.push(format!(
                "dataset chain violated (batch trial {trial}): err={err} hinge={mean_hinge} ce={mean_ce} rho={rho}"
            ));
        }
    }

    SuiteReport {
        name: "lemma".into(),
        trials,
        failures,
    }
}

pub fn lemma_suite(seed: u64, trials: usize) -> SuiteReport {
    lemma_suite_with(seed, trials, &margin_indicator)
}

/// Reduction identities: soft-margin forms at rho=0 collapse to the plain
/// forms, and the shifted-score closed forms agree with direct evaluation.
pub fn identities_suite(seed: u64, trials: usize) -> SuiteReport {
    let mut rng = Xoshiro256::derive(seed, 0x6964656E);
    let mut failures = Vec::new();
    for trial in 0..trials {
        let (f, y, rho) = random_case(&mut rng);
        let case = || format!("trial {trial}: f={f:?} y={y} rho={rho}");

        // sm_softmax at rho = 0 is the plain softmax entry
        let plain = softmax_slice(&f)[y - 1];
        let zero = sm_softmax(&f, y, 0.0).unwrap();
        if (plain - zero).abs() > 1e-12 {
            failures.push(format!("sm_softmax(0) != softmax ({}): {zero} vs {plain}", case()));
        }
        if (sm_cross_entropy(&f, y, 0.0).unwrap() - lse_loss(&f, y).unwrap()).abs() > 1e-12 {
            failures.push(format!("sm_cross_entropy(0) != lse ({})", case()));
        }
        if (sm_adversarial(&f, y, 0.0).unwrap() - adversarial_loss(&f, y).unwrap()).abs() > 1e-12 {
            failures.push(format!("sm_adversarial(0) != adversarial ({})", case()));
        }

        // closed forms through the shifted scores
        let g = margin_shifted(&f, y, rho);
        let direct_ce = sm_cross_entropy(&f, y, rho).unwrap();
        let via_shift = lse_loss(&g, y).unwrap();
        if (direct_ce - via_shift).abs() > 1e-9 {
            failures.push(format!(
                "cross-entropy closed forms disagree ({}): {direct_ce} vs {via_shift}",
                case()
            ));
        }
        let direct_adv = sm_adversarial(&f, y, rho).unwrap();
        let via_shift_adv = adversarial_loss(&g, y).unwrap();
        if (direct_adv - via_shift_adv).abs() > 1e-9 {
            failures.push(format!(
                "adversarial closed forms disagree ({}): {direct_adv} vs {via_shift_adv}",
                case()
            ));
        }

        // soft-margin softmax sums to 1 over the shifted rows
        let total: f64 = (1..=f.len())
            .map(|j| softmax_slice(&margin_shifted(&f, y, rho))[j - 1])
            .sum();
        if (total - 1.0).abs() > 1e-12 {
            failures.push(format!("shifted softmax not normalized ({})", case()));
        }
    }
    SuiteReport {
        name: "identities".into(),
        trials,
        failures,
    }
}

/// Finite-difference gradient checks on the differentiable losses at
/// random points away from the clamp boundary.
pub fn gradients_suite(seed: u64, trials: usize) -> SuiteReport {
    let mut rng = Xoshiro256::derive(seed, 0x67726164);
    let mut failures = Vec::new();
    let tol = 1e-4;
    for trial in 0..trials {
        let k = 2 + rng.next_usize(4);
        let n = 1 + rng.next_usize(3);
        let point: Vec<f64> = (0..n * k).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| 1 + rng.next_usize(k)).collect();
        let rho = rng.uniform(0.0, 2.0);
        let case = |what: &str, err: f64| {
            format!("trial {trial} {what}: rel err {err:.2e} at point={point:?} labels={labels:?} rho={rho}")
        };

        let run = |use_adv: bool| -> Result<f64> {
            let labels = labels.clone();
            grad_check(
                move |t: &mut Tape, x| {
                    let mut off = vec![rho; labels.len() * k];
                    for (i, &y) in labels.iter().enumerate() {
                        off[i * k + y - 1] = 0.0;
                    }
                    let off = t.leaf(off, &[labels.len(), k], false)?;
                    let shifted = t.add(x, off)?;
                    let vec = if use_adv {
                        t.adv_loss(shifted, &labels)?
                    } else {
                        t.lse_loss(shifted, &labels)?
                    };
                    t.mean_axis(vec, 0)
                },
                &point,
                &[n, k],
                1e-5,
            )
        };

        match run(false) {
            Ok(err) if err > tol => failures.push(case("soft-margin cross-entropy", err)),
            Err(e) => failures.push(format!("trial {trial} cross-entropy: {e}")),
            _ => {}
        }
        // skip adversarial checks where sigma_y ~ 1 puts us at the clamp
        let shifted_rows: Vec<Vec<f64>> = point
            .chunks_exact(k)
            .zip(&labels)
            .map(|(row, &y)| margin_shifted(row, y, rho))
            .collect();
        let near_clamp = shifted_rows
            .iter()
            .zip(&labels)
            .any(|(row, &y)| 1.0 - softmax_slice(row)[y - 1] < 1e-6);
        if !near_clamp {
            match run(true) {
                Ok(err) if err > tol => failures.push(case("soft-margin adversarial", err)),
                Err(e) => failures.push(format!("trial {trial} adversarial: {e}")),
                _ => {}
            }
        }
    }
    SuiteReport {
        name: "gradients".into(),
        trials,
        failures,
    }
}

/// Dispatch by suite name; "all" runs everything.
pub fn run_suites(suite: &str, seed: u64, trials: usize) -> Result<Vec<SuiteReport>> {
    if trials == 0 {
        return Err(MddError::contract("verify: trials must be >= 1"));
    }
    match suite {
        "lemma" => Ok(vec![lemma_suite(seed, trials)]),
        "identities" => Ok(vec![identities_suite(seed, trials)]),
        "gradients" => Ok(vec![gradients_suite(seed, trials)]),
        "all" => Ok(vec![
            lemma_suite(seed, trials),
            identities_suite(seed, trials),
            gradients_suite(seed, trials.min(50)),
        ]),
        other => Err(MddError::contract(format!("unknown suite '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lemma_suite_passes_thousand_trials() {
        let report = lemma_suite(1, 1000);
        assert!(report.passed(), "{:?}", report.failures.first());
    }

    #[test]
    fn identities_suite_passes() {
        let report = identities_suite(2, 500);
        assert!(report.passed(), "{:?}", report.failures.first());
    }

    #[test]
    fn gradients_suite_passes() {
        let report = gradients_suite(3, 40);
        assert!(report.passed(), "{:?}", report.failures.first());
    }

    #[test]
    fn broken_ramp_is_caught_with_counterexample() {
        // flipped branch: returns 0 below zero where it must return 1
        let broken = |x: f64, rho: Margin| -> f64 {
            let rho = rho.get();
            if x >= rho {
                1.0
            } else if x <= 0.0 {
                0.0
            } else {
                1.0 - x / rho
            }
        };
        let report = lemma_suite_with(1, 200, &broken);
        assert!(!report.passed());
        assert!(report.failures.iter().any(|f| f.contains("f=")));
    }

    #[test]
    fn unknown_suite_and_zero_trials_rejected() {
        assert!(run_suites("bogus", 1, 10).is_err());
        assert!(run_suites("lemma", 1, 0).is_err());
        assert_eq!(run_suites("all", 1, 10).unwrap().len(), 3);
    }
}
