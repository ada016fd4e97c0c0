use dar_demo::{alignment, dar_demo, latency};

#[test]
fn alignment_rows_plus_residual_sum_to_one_at_first_step() {
    let out = alignment(4, 6, 1.0, 1.0, 2.0).unwrap();
    let (alpha, residual) = out.split_at(24);
    let first: f64 = alpha[..6].iter().sum();
    assert!((first + residual[0] - 1.0).abs() < 1e-12);
    assert!(alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
    assert!(alignment(0, 3, 0.0, 1.0, 1.0).is_err());
}

#[test]
fn latency_of_wait_three() {
    let r = latency("3, 4 5 6 7 8 9 10 10 10", 10.0).unwrap();
    assert_eq!(r[0], 3.0);
    assert!(latency("1, x", 4.0).is_err());
    assert!(latency("", 4.0).is_err());
}

#[test]
fn noiseless_repeats_score_better_than_noisy_ones() {
    let clean = dar_demo(5, 4, 2, 0.0, 1).unwrap();
    let noisy = dar_demo(5, 4, 2, 3.0, 1).unwrap();
    assert_eq!(clean.len(), 1 + 8 * 4);
    assert!(clean[0] < noisy[0]);
    assert!(clean[1..].iter().all(|s| s.abs() <= 1.0 + 1e-12));
    let identical = dar_demo(5, 4, 1, 0.0, 2).unwrap();
    assert!(identical[0].abs() < 1e-12);
}
