//! Finite-difference gradient checks: every differentiable tape primitive
//! and the full adversarial batch objective through the feature extractor,
//! at seeded random points away from kinks and clamp boundaries.

use mddrad_core::mdd::{batch_objective, ObjectiveConfig};
use mddrad_core::model::ConvSpec;
use mddrad_core::synthdata::{make_domain_pair, preset};
use mddrad_core::tensor::grad_check;
use mddrad_core::{MddNetwork, ModelConfig, Part, Tape, Variant, Xoshiro256, DEFAULT_RHO};

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn random_point(rng: &mut Xoshiro256, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

/// Checks a scalar-valued tape program at `trials` random points.
fn check_many<F>(name: &str, seed: u64, trials: usize, shape: &[usize], lo: f64, hi: f64, f: F)
where
    F: Fn(&mut Tape, mddrad_core::Var) -> mddrad_core::Result<mddrad_core::Var> + Copy,
{
    let mut rng = Xoshiro256::derive(seed, 0x67726164);
    let n: usize = shape.iter().product();
    for trial in 0..trials {
        let point = random_point(&mut rng, n, lo, hi);
        let err = grad_check(f, &point, shape, STEP).unwrap();
        assert!(
            err <= TOL,
            "{name} trial {trial}: rel err {err:.2e} at {point:?}"
        );
    }
}

#[test]
fn elementwise_primitives() {
    // add/sub/mul of x with a function of x, reduced by sum
    check_many("add", 1, 8, &[3, 4], -2.0, 2.0, |t, x| {
        let y = t.mul(x, x)?;
        let z = t.add(x, y)?;
        Ok(t.sum(z))
    });
    check_many("sub", 2, 8, &[3, 4], -2.0, 2.0, |t, x| {
        let y = t.mul(x, x)?;
        let z = t.sub(y, x)?;
        Ok(t.sum(z))
    });
    check_many("mul+scale", 3, 8, &[2, 5], -2.0, 2.0, |t, x| {
        let y = t.mul(x, x)?;
        let z = t.scale(y, -0.7);
        Ok(t.sum(z))
    });
    // relu away from the kink at 0
    check_many("relu", 4, 8, &[6], 0.2, 2.0, |t, x| {
        let y = t.relu(x);
        Ok(t.sum(y))
    });
    check_many("relu-negative", 5, 8, &[6], -2.0, -0.2, |t, x| {
        let y = t.relu(x);
        Ok(t.sum(y))
    });
    check_many("exp", 6, 8, &[4], -1.5, 1.5, |t, x| {
        let y = t.exp(x);
        Ok(t.sum(y))
    });
    check_many("log", 7, 8, &[4], 0.3, 3.0, |t, x| {
        let y = t.log(x);
        Ok(t.sum(y))
    });
}

#[test]
fn linear_algebra_primitives() {
    // matmul: treat x as a [2,3] matrix times a fixed [3,2]
    check_many("matmul", 8, 8, &[2, 3], -2.0, 2.0, |t, x| {
        let b = t.leaf(vec![0.5, -1.0, 2.0, 0.3, -0.2, 1.1], &[3, 2], false)?;
        let y = t.matmul(x, b)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    check_many("matmul-rhs", 9, 8, &[3, 2], -2.0, 2.0, |t, x| {
        let a = t.leaf(vec![0.4, -0.6, 1.2, 0.9, -1.3, 0.2], &[2, 3], false)?;
        let y = t.matmul(a, x)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    check_many("add_row", 10, 8, &[4], -2.0, 2.0, |t, x| {
        let m = t.leaf(vec![0.1; 12], &[3, 4], false)?;
        let y = t.add_row(m, x)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    check_many("conv2d-input", 11, 4, &[1, 1, 5, 6], -1.5, 1.5, |t, x| {
        let w = t.leaf(
            vec![0.3, -0.5, 0.2, 0.8, -0.1, 0.4, 0.6, -0.7, 0.9],
            &[1, 1, 3, 3],
            false,
        )?;
        let y = t.conv2d(x, w, 1)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    check_many("conv2d-kernel", 12, 4, &[2, 1, 3, 3], -1.5, 1.5, |t, x| {
        let inp: Vec<f64> = (0..30).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect();
        let xi = t.leaf(inp, &[1, 1, 5, 6], false)?;
        let y = t.conv2d(xi, x, 2)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
    check_many("add_chan", 13, 8, &[2], -1.0, 1.0, |t, x| {
        let inp: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| (i as f64 * 0.31).sin()).collect();
        let xi = t.leaf(inp, &[2, 2, 3, 3], false)?;
        let y = t.add_chan(xi, x)?;
        let sq = t.mul(y, y)?;
        Ok(t.sum(sq))
    });
}

#[test]
fn reduction_and_shape_primitives() {
    check_many("mean_axis", 14, 8, &[3, 4], -2.0, 2.0, |t, x| {
        let m = t.mean_axis(x, 0)?;
        let sq = t.mul(m, m)?;
        Ok(t.sum(sq))
    });
    // max_axis away from ties: strictly increasing offsets break them
    check_many("max_axis", 15, 8, &[2, 4], -0.2, 0.2, |t, x| {
        let off = t.leaf(vec![0.0, 1.0, 2.0, 3.0, 3.0, 2.0, 1.0, 0.0], &[2, 4], false)?;
        let y = t.add(x, off)?;
        let m = t.max_axis(y, 1)?;
        let sq = t.mul(m, m)?;
        Ok(t.sum(sq))
    });
    check_many("reshape+flatten+concat", 16, 8, &[2, 3], -2.0, 2.0, |t, x| {
        let r = t.reshape(x, &[3, 2])?;
        let f = t.flatten(r);
        let f = t.reshape(f, &[1, 6])?;
        let c = t.concat(&[f, f], 1)?;
        let sq = t.mul(c, c)?;
        Ok(t.sum(sq))
    });
    check_many("logsumexp", 17, 8, &[5], -2.0, 2.0, |t, x| t.logsumexp(x));
}

/// The reversal layer is not a smooth function, so it cannot be checked
/// against finite differences of its own forward value; instead its tape
/// gradient must equal -eta times the plain gradient.
#[test]
fn grad_reverse_scales_and_negates_the_plain_gradient() {
    let mut rng = Xoshiro256::derive(18, 0x67726164);
    for _ in 0..8 {
        let point = random_point(&mut rng, 4, -2.0, 2.0);
        let eta = rng.uniform(0.1, 1.0);

        let run = |reversed: bool| -> Vec<f64> {
            let mut t = Tape::new();
            let x = t.leaf(point.clone(), &[4], true).unwrap();
            let sq = t.mul(x, x).unwrap();
            let sq = if reversed { t.grad_reverse(sq, eta) } else { sq };
            let s = t.sum(sq);
            t.backward(s).unwrap();
            t.grad(x).unwrap().to_vec()
        };

        let plain = run(false);
        let reversed = run(true);
        for (p, r) in plain.iter().zip(&reversed) {
            assert!((r + eta * p).abs() <= 1e-12, "eta {eta}: {r} vs {}", -eta * p);
        }
    }
}

#[test]
fn loss_primitives() {
    let labels = [1usize, 3, 2];
    check_many("lse_loss", 19, 8, &[3, 3], -2.0, 2.0, move |t, x| {
        let v = t.lse_loss(x, &labels)?;
        t.mean_axis(v, 0)
    });
    check_many("adv_loss", 20, 8, &[3, 3], -2.0, 2.0, move |t, x| {
        let v = t.adv_loss(x, &labels)?;
        t.mean_axis(v, 0)
    });
}

/// The full minimax objective, differentiated through the feature
/// extractor, classifier and adversary of a toy network: central
/// differences over a sample of parameter coordinates must agree with the
/// tape gradients.
#[test]
fn batch_objective_through_feature_extractor() {
    let cfg = preset("I").unwrap();
    let pair = make_domain_pair(&cfg, &preset("III").unwrap(), 4, 3, 3, 11, 6, 8).unwrap();
    let model = ModelConfig {
        input_h: 6,
        input_w: 8,
        branch: vec![ConvSpec { out_channels: 2, kernel: 3, stride: 2 }],
        bottleneck: 8,
        head_hidden: 6,
        num_classes: 3,
    };
    let obj_cfg = ObjectiveConfig {
        variant: Variant::SoftMargin,
        gamma: 1.0,
        rho: DEFAULT_RHO,
        grl_eta: 0.6,
    };
    let net = MddNetwork::new(model, 11);
    let s_batch: Vec<_> = pair.s_train.samples.iter().collect();
    let labels: Vec<usize> = s_batch.iter().map(|s| s.label.unwrap()).collect();
    let t_batch: Vec<_> = pair.t_train.samples.iter().take(3).collect();

    // the reversal layer makes the tape gradient of each part equal the
    // derivative of a part-specific effective objective:
    //   psi:   classification + eta * transfer   (GRL re-signs the game)
    //   f:     classification                    (pseudo-labels are detached)
    //   f':    -transfer                         (the adversary ascends it)
    let effective_value = |net: &MddNetwork, part: Part| -> f64 {
        let mut tape = Tape::new();
        let out =
            batch_objective(&mut tape, net, &s_batch, &labels, &t_batch, &obj_cfg, |_| true)
                .unwrap();
        let cls = tape.data(out.classification)[0];
        let transfer = tape.data(out.transfer)[0];
        match part {
            Part::Psi => cls + obj_cfg.grl_eta * transfer,
            Part::F => cls,
            Part::FAdv => -transfer,
        }
    };

    // analytic gradients for every parameter tensor
    let mut tape = Tape::new();
    let out = batch_objective(&mut tape, &net, &s_batch, &labels, &t_batch, &obj_cfg, |_| true)
        .unwrap();
    tape.backward(out.total).unwrap();
    let grads: Vec<Vec<f64>> = out
        .bound
        .vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    // sample coordinates across all tensors and compare central differences
    let mut rng = Xoshiro256::derive(21, 0x67726164);
    let n_tensors = net.params().len();
    let diff = |ti: usize, ci: usize, h: f64| -> f64 {
        let part = net.part_of(ti);
        let mut plus = net.clone();
        plus.params_mut()[ti][ci] += h;
        let mut minus = net.clone();
        minus.params_mut()[ti][ci] -= h;
        (effective_value(&plus, part) - effective_value(&minus, part)) / (2.0 * h)
    };
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 60 {
        attempts += 1;
        assert!(attempts < 400, "too few smooth coordinates ({checked} checked)");
        let ti = rng.next_usize(n_tensors);
        let len = net.params()[ti].len();
        let ci = rng.next_usize(len);
        let analytic = grads[ti][ci];

        // skip coordinates where the objective is locally non-smooth (a
        // relu kink or pseudo-label flip inside the stencil): the two
        // stencil widths must agree before the estimate is trusted
        let numeric = diff(ti, ci, STEP);
        let numeric_wide = diff(ti, ci, 2.0 * STEP);
        let stencil_dev =
            (numeric - numeric_wide).abs() / numeric.abs().max(numeric_wide.abs()).max(1e-8);
        if stencil_dev > 1e-5 {
            continue;
        }

        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(
            rel <= TOL,
            "objective grad mismatch at tensor {ti} coord {ci}: analytic {analytic:.6e} numeric {numeric:.6e} rel {rel:.2e}"
        );
        checked += 1;
    }
}
