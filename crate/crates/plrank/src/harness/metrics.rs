//! Geometry and retrieval metrics computed on fused embeddings.

use crate::error::{Error, Result};
use crate::numerics::matrix::{cosine, Matrix};
use crate::numerics::solve_psd;

/// Fraction of rows whose matched pair ranks first, averaged over the
/// image-to-text and text-to-image directions. Ties on the diagonal count
/// as misses unless the diagonal strictly dominates.
pub fn retrieval_top1(sim_vt: &Matrix) -> f64 {
    let n = sim_vt.rows();
    let mut hits = 0usize;
    for i in 0..n {
        let row = sim_vt.row(i);
        if row
            .iter()
            .enumerate()
            .all(|(j, &v)| j == i || v < row[i])
        {
            hits += 1;
        }
        let col: Vec<f64> = (0..n).map(|r| sim_vt.get(r, i)).collect();
        if col
            .iter()
            .enumerate()
            .all(|(j, &v)| j == i || v < col[i])
        {
            hits += 1;
        }
    }
    hits as f64 / (2 * n) as f64
}

/// Angle in degrees between the renormalised mean image embedding and mean
/// text embedding.
pub fn cone_separation(image: &Matrix, text: &Matrix) -> Result<f64> {
    if image.rows() != text.rows() || image.cols() != text.cols() {
        return Err(Error::Shape {
            op: "cone_separation",
            left: format!("{}x{}", image.rows(), image.cols()),
            right: format!("{}x{}", text.rows(), text.cols()),
        });
    }
    let mi = image.mean_rows();
    let mt = text.mean_rows();
    let ni = mi.norm();
    let nt = mt.norm();
    if ni == 0.0 || nt == 0.0 {
        return Err(Error::UndefinedAngle("mean embedding has zero norm"));
    }
    let cos = mi
        .row(0)
        .iter()
        .zip(mt.row(0))
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / (ni * nt);
    Ok(cos.clamp(-1.0, 1.0).acos().to_degrees())
}

/// Histogram of per-item cosines between mapped student class tokens and
/// teacher class tokens. The map is the least-squares linear fit from the
/// student space to the teacher space, computed once over all rows.
pub struct FidelityHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean_cosine: f64,
}

pub fn gram_fidelity_histogram(
    student_cls: &Matrix,
    teacher_cls: &Matrix,
    bins: usize,
) -> Result<FidelityHistogram> {
    if student_cls.rows() != teacher_cls.rows() {
        return Err(Error::Shape {
            op: "gram_fidelity_histogram",
            left: format!("{} rows", student_cls.rows()),
            right: format!("{} rows", teacher_cls.rows()),
        });
    }
    if bins == 0 {
        return Err(Error::InvalidParameter("histogram needs at least one bin".into()));
    }
    // Least-squares W: student * W ~ teacher, with a small ridge.
    let st_s = student_cls.transpose().matmul(student_cls)?;
    let mut ridged = st_s.clone();
    let scale = (0..ridged.rows())
        .map(|i| ridged.get(i, i))
        .fold(0.0f64, f64::max)
        .max(1.0);
    for i in 0..ridged.rows() {
        let v = ridged.get(i, i) + 1e-8 * scale;
        ridged.set(i, i, v);
    }
    let st_t = student_cls.transpose().matmul(teacher_cls)?;
    let w = solve_psd(&ridged, &st_t)?;
    let mapped = student_cls.matmul(&w)?;

    let mut counts = vec![0usize; bins];
    let mut total_cos = 0.0;
    for i in 0..mapped.rows() {
        let c = cosine(mapped.row(i), teacher_cls.row(i));
        let c = if c.is_finite() { c } else { 0.0 };
        total_cos += c;
        let pos = (((c + 1.0) / 2.0) * bins as f64).floor() as usize;
        counts[pos.min(bins - 1)] += 1;
    }
    let edges = (0..=bins)
        .map(|b| -1.0 + 2.0 * b as f64 / bins as f64)
        .collect();
    Ok(FidelityHistogram {
        edges,
        counts,
        mean_cosine: total_cos / mapped.rows() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn top1_on_identity_dominant_matrix() {
        let mut sim = Matrix::zeros(4, 4);
        for i in 0..4 {
            sim.set(i, i, 1.0);
        }
        assert_eq!(retrieval_top1(&sim), 1.0);
    }

    #[test]
    fn top1_counts_misses() {
        let mut sim = Matrix::zeros(2, 2);
        sim.set(0, 1, 2.0);
        sim.set(1, 0, 2.0);
        assert_eq!(retrieval_top1(&sim), 0.0);
    }

    #[test]
    fn cone_identical_batches_is_zero() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.8, 0.6]]);
        let deg = cone_separation(&m, &m).unwrap();
        assert!(deg.abs() < 1e-9);
    }

    #[test]
    fn cone_orthogonal_means_is_ninety() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]);
        let deg = cone_separation(&a, &b).unwrap();
        assert!((deg - 90.0).abs() < 1e-9);
    }

    #[test]
    fn cone_zero_mean_errors() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]);
        assert!(matches!(
            cone_separation(&a, &b),
            Err(Error::UndefinedAngle(_))
        ));
    }

    #[test]
    fn planted_cones_recover_known_angle() {
        // Two cones of noisy unit vectors around centroids 30 degrees apart.
        let angle = 30.0f64.to_radians();
        let mut estimates = Vec::new();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = 16;
            let mut c1 = vec![0.0; dim];
            c1[0] = 1.0;
            let mut c2 = vec![0.0; dim];
            c2[0] = angle.cos();
            c2[1] = angle.sin();
            let draw = |c: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
                let mut v: Vec<f64> = c
                    .iter()
                    .map(|&x| x + 0.15 * rng.random_range(-1.0..1.0))
                    .collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                for x in &mut v {
                    *x /= n;
                }
                v
            };
            let a = Matrix::from_rows(&(0..200).map(|_| draw(&c1, &mut rng)).collect::<Vec<_>>());
            let b = Matrix::from_rows(&(0..200).map(|_| draw(&c2, &mut rng)).collect::<Vec<_>>());
            estimates.push(cone_separation(&a, &b).unwrap());
        }
        for deg in estimates {
            assert!((deg - 30.0).abs() < 2.0, "estimate {deg}");
        }
    }

    #[test]
    fn fidelity_identical_spaces_all_top_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Matrix::new(
            12,
            4,
            (0..48).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let hist = gram_fidelity_histogram(&m, &m, 20).unwrap();
        assert_eq!(hist.counts.iter().sum::<usize>(), 12);
        assert_eq!(*hist.counts.last().unwrap(), 12);
        assert!(hist.mean_cosine > 0.999);
    }

    #[test]
    fn fidelity_unrelated_features_concentrate_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 60;
        let s = Matrix::new(
            n,
            3,
            (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let t = Matrix::new(
            n,
            24,
            (0..n * 24).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let hist = gram_fidelity_histogram(&s, &t, 20).unwrap();
        assert_eq!(hist.counts.iter().sum::<usize>(), n);
        // A rank-3 map into 24 random dims leaves most cosines small.
        assert!(hist.mean_cosine.abs() < 0.6, "mean {}", hist.mean_cosine);
    }
}
