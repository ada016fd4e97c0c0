use dar_core::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Walks every read/write path of a hard monotonic decoder: step `i` starts
/// where step `i−1` wrote and scans right, writing at `j` with probability
/// `p[i][j]`. A step that scans past the end ends the path.
fn enumerate(p: &[Vec<f64>], i: usize, start: usize, mass: f64, alpha: &mut [Vec<f64>]) {
    if i == p.len() || mass == 0.0 {
        return;
    }
    let mut stay = mass;
    for j in start..p[i].len() {
        let w = stay * p[i][j];
        alpha[i][j] += w;
        enumerate(p, i + 1, j, w, alpha);
        stay *= 1.0 - p[i][j];
    }
}

fn path_alignment(p: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut alpha = vec![vec![0.0; p[0].len()]; p.len()];
    enumerate(p, 0, 0, 1.0, &mut alpha);
    alpha
}

fn tape_alignment(p: &[Vec<f64>]) -> Vec<f64> {
    let (i_len, j_len) = (p.len(), p[0].len());
    let mut t = Tape::new();
    let v = t.constant(&[i_len, j_len], p.concat()).unwrap();
    let a = t.monotonic_alignment(v).unwrap();
    t.value(a).to_vec()
}

#[test]
fn matches_path_enumeration_on_random_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (i_len, j_len, heads) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=2));
        for _ in 0..heads {
            let p: Vec<Vec<f64>> = (0..i_len).map(|_| (0..j_len).map(|_| rng.gen::<f64>()).collect()).collect();
            let want = path_alignment(&p).concat();
            let got = tape_alignment(&p);
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst <= 1e-12, "max abs err {worst:e}");
}

#[test]
fn extreme_probabilities() {
    let always = vec![vec![1.0; 4]; 3];
    let got = tape_alignment(&always);
    assert_eq!(got, path_alignment(&always).concat());
    for row in got.chunks(4) {
        assert_eq!(row, &[1.0, 0.0, 0.0, 0.0]);
    }
    let never = vec![vec![0.0; 4]; 3];
    assert!(tape_alignment(&never).iter().all(|&x| x == 0.0));
}

#[test]
fn row_mass_never_exceeds_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let p: Vec<Vec<f64>> = (0..6).map(|_| (0..8).map(|_| rng.gen::<f64>()).collect()).collect();
        let a = tape_alignment(&p);
        let mut prev = 1.0 + 1e-12;
        for row in a.chunks(8) {
            let m: f64 = row.iter().sum();
            assert!(m <= prev + 1e-12);
            assert!(row.iter().all(|&x| x >= 0.0));
            prev = m;
        }
    }
}
