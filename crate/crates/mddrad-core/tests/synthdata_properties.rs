//! Dataset-level properties of the synthetic generator: classes must be
//! separable within a configuration, and the configuration change must
//! produce a real domain shift.

use mddrad_core::synthdata::{make_domain_pair, preset, DomainDataset};

fn centroids(ds: &DomainDataset) -> Vec<(usize, Vec<f64>)> {
    let dim = 2 * ds.samples[0].x_r.len();
    let mut sums: Vec<(usize, Vec<f64>)> = (1..=ds.k).map(|_| (0, vec![0.0; dim])).collect();
    for s in &ds.samples {
        let y = s.label.unwrap();
        let entry = &mut sums[y - 1];
        entry.0 += 1;
        for (i, v) in s.x_r.iter().chain(&s.x_d).enumerate() {
            entry.1[i] += v;
        }
    }
    for (n, c) in sums.iter_mut() {
        for v in c.iter_mut() {
            *v /= *n as f64;
        }
    }
    sums
}

fn nearest_centroid_accuracy(train: &DomainDataset, test: &DomainDataset) -> f64 {
    let cents = centroids(train);
    let mut correct = 0;
    for s in &test.samples {
        let x: Vec<f64> = s.x_r.iter().chain(&s.x_d).cloned().collect();
        let mut best = (f64::INFINITY, 0usize);
        for (c, (_, cent)) in cents.iter().enumerate() {
            let d: f64 = x.iter().zip(cent).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, c + 1);
            }
        }
        if best.1 == s.label.unwrap() {
            correct += 1;
        }
    }
    correct as f64 / test.samples.len() as f64
}

#[test]
fn classes_separable_within_config_and_shifted_across() {
    let cfg_s = preset("I").unwrap();
    let cfg_t = preset("III").unwrap();
    let pair = make_domain_pair(&cfg_s, &cfg_t, 100, 50, 5, 42, 16, 32).unwrap();
    // recover the round-robin labels for measurement only
    let hidden = mddrad_core::synthdata::recover_train_labels(&pair.t_train);
    let mut t_train_labeled = pair.t_train.clone();
    for (s, y) in t_train_labeled.samples.iter_mut().zip(hidden) {
        s.label = Some(y);
    }
    t_train_labeled.labeled = true;

    let within_source = nearest_centroid_accuracy(&pair.s_train, &pair.s_test);
    let cross = nearest_centroid_accuracy(&pair.s_train, &pair.t_test);
    let within_target = nearest_centroid_accuracy(&t_train_labeled, &pair.t_test);

    eprintln!("within-source {within_source:.3} cross {cross:.3} within-target {within_target:.3}");
    assert!(
        within_source >= 0.90,
        "source classes not separable: {within_source:.3}"
    );
    // looser than the source floor: the target domain is noisier by design,
    // it only has to stay learnable
    assert!(
        within_target >= 0.80,
        "target classes not separable: {within_target:.3}"
    );
    assert!(
        cross <= within_source - 0.15,
        "domain shift too weak: cross {cross:.3} vs within {within_source:.3}"
    );
}

#[test]
fn null_shift_pair_has_no_gap() {
    let cfg = preset("I").unwrap();
    let pair = make_domain_pair(&cfg, &cfg, 80, 40, 5, 7, 16, 32).unwrap();
    let within = nearest_centroid_accuracy(&pair.s_train, &pair.s_test);
    let cross = nearest_centroid_accuracy(&pair.s_train, &pair.t_test);
    eprintln!("null-shift within {within:.3} cross {cross:.3}");
    assert!((within - cross).abs() <= 0.10);
}
