use lsk_core::lsk::{svd, svd_factorize, Matrix};
use lsk_core::Rng;
use nalgebra::DMatrix;

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap()
}

fn oracle_singular_values(m: &Matrix) -> Vec<f64> {
    let d = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let mut sv: Vec<f64> = d.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

#[test]
fn singular_values_agree_with_nalgebra() {
    let mut rng = Rng::new(41);
    for &(r, c) in &[(3, 3), (5, 5), (9, 9), (4, 7), (12, 5), (27, 18)] {
        for _ in 0..5 {
            let m = random_matrix(&mut rng, r, c);
            let ours = svd(&m).singular_values;
            let theirs = oracle_singular_values(&m);
            assert_eq!(ours.len(), theirs.len());
            for (a, b) in ours.iter().zip(&theirs) {
                assert!((a - b).abs() < 1e-9 * theirs[0].max(1.0), "{r}x{c}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn factors_reconstruct_input() {
    let mut rng = Rng::new(42);
    for n in [3, 5, 9] {
        let m = random_matrix(&mut rng, n, n);
        let f = svd_factorize(&m, n).unwrap();
        let back = f.reconstruct(n);
        assert!(back.sub(&m).unwrap().frobenius_norm() < 1e-10 * m.frobenius_norm());
    }
}

#[test]
fn truncation_residual_is_tail_energy() {
    // Eckart–Young: the rank-r residual is the norm of the dropped singular values
    let mut rng = Rng::new(43);
    for n in [3, 5, 9] {
        let m = random_matrix(&mut rng, n, n);
        let sv = oracle_singular_values(&m);
        for r in 1..=n {
            let tail = sv[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
            let res = svd_factorize(&m, r).unwrap().residual_norm;
            assert!((res - tail).abs() < 1e-9 * sv[0], "n={n} r={r}: {res} vs {tail}");
        }
    }
}
