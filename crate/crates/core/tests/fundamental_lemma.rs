use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urbanflow_core::lti::{build_hankel, StateSpaceModel, Trajectory};

fn rank(m: &DMatrix<f64>) -> usize {
    let sv = m.singular_values();
    let tol = sv.max() * m.nrows().max(m.ncols()) as f64 * 1e-10;
    sv.iter().filter(|&&s| s > tol).count()
}

fn controllability(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (a.nrows(), b.ncols());
    let mut out = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for i in 0..n {
        out.view_mut((0, i * m), (n, m)).copy_from(&block);
        block = a * &block;
    }
    out
}

/// Random stable system with a reachable and observable realization.
fn random_minimal<R: Rng>(rng: &mut R) -> StateSpaceModel {
    loop {
        let n = rng.gen_range(1..=4);
        let m = rng.gen_range(1..=2);
        let p = rng.gen_range(1..=2);
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let radius = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        if radius > 1e-6 {
            a *= rng.gen_range(0.3..0.95) / radius;
        }
        let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
        let c = DMatrix::from_fn(p, n, |_, _| rng.gen_range(-1.0..1.0));
        let d = DMatrix::from_fn(p, m, |_, _| rng.gen_range(-1.0..1.0));
        let model = StateSpaceModel::new(a, b, c, d).unwrap();
        let obs = model.observability(n);
        if rank(&controllability(&model.a, &model.b)) == n && rank(&obs) == n {
            return model;
        }
    }
}

fn lag(model: &StateSpaceModel) -> usize {
    (1..=model.order()).find(|&l| rank(&model.observability(l)) == model.order()).unwrap()
}

fn trajectory<R: Rng>(model: &StateSpaceModel, len: usize, rng: &mut R) -> Trajectory {
    let u = DMatrix::from_fn(model.inputs(), len, |_, _| rng.gen_range(-1.0..1.0));
    let x0 = DVector::from_fn(model.order(), |_, _| rng.gen_range(-1.0..1.0));
    let y = model.simulate(&x0, &u).unwrap();
    Trajectory::from_parts(&u, &y).unwrap()
}

/// Stacks the window column-wise as `col(w_0, ..., w_{L-1})`.
fn stacked(w: &Trajectory) -> DVector<f64> {
    let q = w.signal_dim();
    DVector::from_fn(q * w.len(), |i, _| w.values()[(i % q, i / q)])
}

/// Distance from `w` to the span of the leading `r` left singular vectors.
fn image_residual(h: &DMatrix<f64>, r: usize, w: &DVector<f64>) -> f64 {
    let svd = h.clone().svd(true, false);
    let u = svd.u.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut rest = w.clone();
    for &i in &order[..r] {
        let col = u.column(i);
        rest -= col * col.dot(w);
    }
    rest.amax()
}

#[test]
fn hankel_rank_and_image_on_random_systems() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let model = random_minimal(&mut rng);
        let (n, m) = (model.order(), model.inputs());
        let ell = lag(&model);
        assert_eq!(model.lag(), Some(ell), "system {k}");
        let depth = ell + rng.gen_range(1..=3);
        let len = (m + 1) * (depth + n) + 20;
        let data = trajectory(&model, len, &mut rng);
        let h = build_hankel(&data, depth).unwrap();
        assert_eq!(h.rank(), m * depth + n, "system {k}: n={n} m={m} L={depth}");
        assert_eq!(rank(h.matrix()), m * depth + n, "system {k}");

        let fresh = stacked(&trajectory(&model, depth, &mut rng));
        let residual = image_residual(h.matrix(), m * depth + n, &fresh);
        worst = worst.max(residual);
        assert!(residual <= 1e-8, "system {k}: residual {residual:e}");
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed <= 30.0, "suite took {elapsed:.1} s");
    eprintln!("worst image residual {worst:e}");
}
