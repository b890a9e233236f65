//! Teacher-to-student structural losses and the synthetic frozen teacher.
//!
//! Two losses transfer structure rather than coordinates: a batch-mean
//! squared Frobenius distance between row-normalised patch-token Gram
//! matrices, and a relational term that matches the angles formed by triples
//! of class-token embeddings. Both are invariant to the transformations the
//! teacher's geometry should survive (orthogonal rotations for the Gram
//! loss, similarity transforms for the angles).
//!
//! The teacher is a deterministic random-feature generator with planted part
//! structure: token positions are grouped into contiguous parts and tokens
//! cluster around per-part directions, so each item's Gram matrix shows the
//! block pattern a dense self-supervised teacher would. Features are
//! generated once, reduced with a PCA basis fitted on the whole corpus, and
//! cached to disk in a versioned binary format. Teacher weights never
//! receive gradients.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::pca::{fit_pca, PcaBasis};
use crate::numerics::tape::{Tape, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{Read, Write};
use std::path::Path;

/// Norm below which a difference vector counts as degenerate in the
/// relational loss.
pub const DEGENERATE_TOL: f64 = 1e-12;

/// Row-normalised Gram matrix of a token matrix: G = V V^T with each row
/// divided by its Euclidean norm; all-zero rows stay zero. Returns the zero
/// row count alongside.
pub fn gram_normalised(tokens: &Matrix) -> Result<(Matrix, usize)> {
    let g = tokens.matmul(&tokens.transpose())?;
    let (normed, zeros) = g.unit_rows(0.0);
    Ok((normed, zeros))
}

/// Tape version of [`gram_normalised`].
pub fn gram_normalised_tape(tape: &mut Tape, tokens: Var) -> Result<Var> {
    let t = tape.transpose(tokens);
    let g = tape.matmul(tokens, t)?;
    Ok(tape.unit_rows(g, 0.0))
}

/// Batch-mean squared Frobenius distance between row-normalised Grams.
pub fn gram_loss_plain(student: &[Matrix], teacher: &[Matrix]) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::Shape {
            op: "gram_loss",
            left: format!("batch {}", student.len()),
            right: format!("batch {}", teacher.len()),
        });
    }
    let mut total = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        let (gs, _) = gram_normalised(s)?;
        if gs.shape() != t.shape() {
            return Err(Error::Shape {
                op: "gram_loss",
                left: format!("{}x{}", gs.rows(), gs.cols()),
                right: format!("{}x{}", t.rows(), t.cols()),
            });
        }
        total += gs.sub(t)?.frobenius_sq();
    }
    Ok(total / student.len() as f64)
}

/// Tape version of the Gram loss. `teacher_grams` are constants.
pub fn gram_loss_tape(tape: &mut Tape, student_tokens: &[Var], teacher_grams: &[Matrix]) -> Result<Var> {
    if student_tokens.len() != teacher_grams.len() {
        return Err(Error::Shape {
            op: "gram_loss",
            left: format!("batch {}", student_tokens.len()),
            right: format!("batch {}", teacher_grams.len()),
        });
    }
    let b = student_tokens.len();
    let mut total = tape.scalar(0.0);
    for (&tok, tg) in student_tokens.iter().zip(teacher_grams) {
        let gs = gram_normalised_tape(tape, tok)?;
        let tgv = tape.var(tg.clone());
        let diff = tape.sub(gs, tgv)?;
        let sq = tape.frobenius_sq(diff);
        total = tape.add(total, sq)?;
    }
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Cosine of the angle at vertex j between (i - j) and (k - j). `None` when
/// either difference is degenerate.
pub fn triple_angle_cos(points: &Matrix, i: usize, j: usize, k: usize) -> Option<f64> {
    let d = points.cols();
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    for c in 0..d {
        a[c] = points.get(i, c) - points.get(j, c);
        b[c] = points.get(k, c) - points.get(j, c);
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= DEGENERATE_TOL || nb <= DEGENERATE_TOL {
        return None;
    }
    Some(a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// All ordered triples of distinct indices.
pub fn all_ordered_triples(batch: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for i in 0..batch {
        for j in 0..batch {
            for k in 0..batch {
                if i != j && j != k && i != k {
                    out.push((i, j, k));
                }
            }
        }
    }
    out
}

/// Triple selection: exhaustive for small batches, 4*B seeded uniform draws
/// beyond that.
pub fn triples_for_batch(batch: usize, rng: &mut impl Rng) -> Vec<(usize, usize, usize)> {
    if batch <= 8 {
        return all_ordered_triples(batch);
    }
    let want = 4 * batch;
    let mut out = Vec::with_capacity(want);
    while out.len() < want {
        let i = rng.random_range(0..batch);
        let j = rng.random_range(0..batch);
        let k = rng.random_range(0..batch);
        if i != j && j != k && i != k {
            out.push((i, j, k));
        }
    }
    out
}

/// Mean squared difference of triple-angle cosines between the student and
/// teacher embeddings. Degenerate triples (on either side) are skipped and
/// counted.
pub fn relational_loss_plain(
    student: &Matrix,
    teacher: &Matrix,
    triples: &[(usize, usize, usize)],
) -> Result<(f64, usize)> {
    if student.rows() != teacher.rows() {
        return Err(Error::Shape {
            op: "relational_loss",
            left: format!("batch {}", student.rows()),
            right: format!("batch {}", teacher.rows()),
        });
    }
    if student.rows() < 3 {
        return Err(Error::InvalidParameter(
            "relational loss needs a batch of at least 3".into(),
        ));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for &(i, j, k) in triples {
        match (
            triple_angle_cos(student, i, j, k),
            triple_angle_cos(teacher, i, j, k),
        ) {
            (Some(cs), Some(ct)) => {
                total += (cs - ct) * (cs - ct);
                used += 1;
            }
            _ => skipped += 1,
        }
    }
    if used == 0 {
        return Ok((0.0, skipped));
    }
    Ok((total / used as f64, skipped))
}

/// Tape version of the relational loss: student angles carry gradient,
/// teacher angles are constants.
pub fn relational_loss_tape(
    tape: &mut Tape,
    student_cls: Var,
    teacher_cls: &Matrix,
    triples: &[(usize, usize, usize)],
) -> Result<(Var, usize)> {
    let b = tape.value(student_cls).rows();
    if b != teacher_cls.rows() {
        return Err(Error::Shape {
            op: "relational_loss",
            left: format!("batch {}", b),
            right: format!("batch {}", teacher_cls.rows()),
        });
    }
    if b < 3 {
        return Err(Error::InvalidParameter(
            "relational loss needs a batch of at least 3".into(),
        ));
    }
    let mut terms = Vec::new();
    let mut skipped = 0usize;
    for &(i, j, k) in triples {
        let Some(ct) = triple_angle_cos(teacher_cls, i, j, k) else {
            skipped += 1;
            continue;
        };
        // Degeneracy on the student side is checked on values before any
        // node is recorded for the triple.
        let sv = tape.value(student_cls);
        let norm_of = |x: usize, y: usize| -> f64 {
            (0..sv.cols())
                .map(|c| {
                    let d = sv.get(x, c) - sv.get(y, c);
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        };
        if norm_of(i, j) <= DEGENERATE_TOL || norm_of(k, j) <= DEGENERATE_TOL {
            skipped += 1;
            continue;
        }
        let vi = tape.gather_rows(student_cls, &[i]);
        let vj = tape.gather_rows(student_cls, &[j]);
        let vk = tape.gather_rows(student_cls, &[k]);
        let a = tape.sub(vi, vj)?;
        let bb = tape.sub(vk, vj)?;
        let ua = tape.unit_rows(a, DEGENERATE_TOL);
        let ub = tape.unit_rows(bb, DEGENERATE_TOL);
        let cs = tape.dot(ua, ub)?;
        let ctv = tape.scalar(ct);
        let diff = tape.sub(cs, ctv)?;
        let sq = tape.mul_elem(diff, diff)?;
        terms.push(sq);
    }
    if terms.is_empty() {
        return Ok((tape.scalar(0.0), skipped));
    }
    let mut total = tape.scalar(0.0);
    let n = terms.len();
    for t in terms {
        total = tape.add(total, t)?;
    }
    Ok((tape.scale(total, 1.0 / n as f64), skipped))
}

/// Configuration for the synthetic frozen teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub seed: u64,
    pub corpus_size: usize,
    /// Token positions per item (L).
    pub tokens_per_item: usize,
    /// Feature dimension before PCA reduction.
    pub raw_dim: usize,
    /// Feature dimension after PCA reduction (d_T).
    pub reduced_dim: usize,
    /// Planted part count; token positions split into this many contiguous
    /// blocks.
    pub parts: usize,
    pub part_scale: f64,
    pub noise: f64,
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.parts < 2 || self.parts > self.tokens_per_item {
            return Err(Error::InvalidParameter(format!(
                "teacher parts {} must be in 2..=L ({})",
                self.parts, self.tokens_per_item
            )));
        }
        if self.reduced_dim > self.raw_dim {
            return Err(Error::InvalidParameter(format!(
                "reduced_dim {} exceeds raw_dim {}",
                self.reduced_dim, self.raw_dim
            )));
        }
        if self.corpus_size == 0 {
            return Err(Error::InvalidParameter("teacher corpus_size is zero".into()));
        }
        Ok(())
    }
}

/// Frozen features for one modality: per-item reduced tokens, class tokens,
/// and precomputed row-normalised Grams.
#[derive(Debug, Clone)]
pub struct TeacherFeatures {
    pub tokens: Vec<Matrix>,
    pub cls: Matrix,
    pub gram: Vec<Matrix>,
    pub zero_gram_rows: usize,
}

impl TeacherFeatures {
    fn from_tokens(tokens: Vec<Matrix>) -> Result<Self> {
        let d = tokens[0].cols();
        let mut cls = Matrix::zeros(tokens.len(), d);
        let mut gram = Vec::with_capacity(tokens.len());
        let mut zero_rows = 0usize;
        for (i, t) in tokens.iter().enumerate() {
            let mean = t.mean_rows();
            cls.row_mut(i).copy_from_slice(mean.row(0));
            let (g, z) = gram_normalised(t)?;
            zero_rows += z;
            gram.push(g);
        }
        Ok(TeacherFeatures {
            tokens,
            cls,
            gram,
            zero_gram_rows: zero_rows,
        })
    }
}

/// The full frozen teacher: image features, text-aligned features (a fixed
/// random linear map of the image features), and the PCA bases used for
/// reduction.
pub struct TeacherCorpus {
    pub config: TeacherConfig,
    pub image: TeacherFeatures,
    pub text: TeacherFeatures,
    pub image_basis: PcaBasis,
    pub text_basis: PcaBasis,
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data: Vec<f64> = (0..rows * cols).map(|_| standard_normal(rng)).collect();
    Matrix::new(rows, cols, data)
}

/// Raw (pre-PCA) image-side teacher tokens for the whole corpus.
fn raw_teacher_tokens(config: &TeacherConfig, rng: &mut impl Rng) -> Vec<Matrix> {
    let parts = crate::fusion::even_partition(config.tokens_per_item, config.parts);
    let mut part_dirs = normal_matrix(config.parts, config.raw_dim, rng);
    let (unit, _) = part_dirs.unit_rows(0.0);
    part_dirs = unit.scale(config.part_scale);

    let mut out = Vec::with_capacity(config.corpus_size);
    for _ in 0..config.corpus_size {
        // Items differ by a mixture over the part directions, so the token
        // spectrum stays concentrated in the planted span.
        let coeffs = normal_matrix(1, config.parts, rng).scale(0.5);
        let item_offset = coeffs
            .matmul(&part_dirs)
            .expect("coeff/part shape fixed by construction");
        let mut tokens = Matrix::zeros(config.tokens_per_item, config.raw_dim);
        for (p, range) in parts.iter().enumerate() {
            for pos in range.clone() {
                for c in 0..config.raw_dim {
                    let v = part_dirs.get(p, c)
                        + item_offset.get(0, c)
                        + config.noise * standard_normal(rng);
                    tokens.set(pos, c, v);
                }
            }
        }
        out.push(tokens);
    }
    out
}

/// Generates the frozen teacher corpus: deterministic in the seed, PCA
/// fitted once on all tokens, text branch derived through a fixed random
/// linear map.
pub fn synthetic_teacher(config: &TeacherConfig) -> Result<TeacherCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let image_raw = raw_teacher_tokens(config, &mut rng);
    let text_map = normal_matrix(config.raw_dim, config.raw_dim, &mut rng)
        .scale(1.0 / (config.raw_dim as f64).sqrt());
    let text_raw: Vec<Matrix> = image_raw
        .iter()
        .map(|t| t.matmul(&text_map.transpose()))
        .collect::<Result<_>>()?;

    let reduce = |raw: &[Matrix]| -> Result<(Vec<Matrix>, PcaBasis)> {
        let mut stacked_rows = Vec::new();
        for t in raw {
            for r in 0..t.rows() {
                stacked_rows.push(t.row(r).to_vec());
            }
        }
        let stacked = Matrix::from_rows(&stacked_rows);
        let basis = fit_pca(&stacked, config.reduced_dim)?;
        let reduced = raw
            .iter()
            .map(|t| basis.project(t))
            .collect::<Result<Vec<_>>>()?;
        Ok((reduced, basis))
    };

    let (image_tokens, image_basis) = reduce(&image_raw)?;
    let (text_tokens, text_basis) = reduce(&text_raw)?;
    Ok(TeacherCorpus {
        config: config.clone(),
        image: TeacherFeatures::from_tokens(image_tokens)?,
        text: TeacherFeatures::from_tokens(text_tokens)?,
        image_basis,
        text_basis,
    })
}

const CACHE_MAGIC: &[u8; 8] = b"PLTCACHE";
const CACHE_VERSION: u32 = 1;

fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for &v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read) -> Result<Matrix> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let mut data = vec![0.0; rows * cols];
    for v in &mut data {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(Matrix::new(rows, cols, data))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

/// Writes the teacher cache: magic header, version, generation parameters,
/// PCA bases, and per-item tokens for both branches. Grams are recomputed on
/// load.
pub fn write_teacher_cache(path: &Path, corpus: &TeacherCorpus) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    let c = &corpus.config;
    w.write_all(&c.seed.to_le_bytes())?;
    for v in [
        c.corpus_size as u64,
        c.tokens_per_item as u64,
        c.raw_dim as u64,
        c.reduced_dim as u64,
        c.parts as u64,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&c.part_scale.to_le_bytes())?;
    w.write_all(&c.noise.to_le_bytes())?;
    write_matrix(&mut w, &corpus.image_basis.components)?;
    write_matrix(&mut w, &corpus.text_basis.components)?;
    for feats in [&corpus.image, &corpus.text] {
        for t in &feats.tokens {
            write_matrix(&mut w, t)?;
        }
    }
    Ok(())
}

/// Reads a teacher cache written by [`write_teacher_cache`].
pub fn read_teacher_cache(path: &Path) -> Result<TeacherCorpus> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::CacheFormat("bad magic header".into()));
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)?;
    let version = u32::from_le_bytes(vbuf);
    if version != CACHE_VERSION {
        return Err(Error::CacheFormat(format!(
            "unsupported cache version {version} (expected {CACHE_VERSION})"
        )));
    }
    let seed = read_u64(&mut r)?;
    let corpus_size = read_u64(&mut r)? as usize;
    let tokens_per_item = read_u64(&mut r)? as usize;
    let raw_dim = read_u64(&mut r)? as usize;
    let reduced_dim = read_u64(&mut r)? as usize;
    let parts = read_u64(&mut r)? as usize;
    let part_scale = read_f64(&mut r)?;
    let noise = read_f64(&mut r)?;
    let config = TeacherConfig {
        seed,
        corpus_size,
        tokens_per_item,
        raw_dim,
        reduced_dim,
        parts,
        part_scale,
        noise,
    };
    let image_components = read_matrix(&mut r)?;
    let text_components = read_matrix(&mut r)?;
    let image_tokens: Vec<Matrix> = (0..corpus_size)
        .map(|_| read_matrix(&mut r))
        .collect::<Result<_>>()?;
    let text_tokens: Vec<Matrix> = (0..corpus_size)
        .map(|_| read_matrix(&mut r))
        .collect::<Result<_>>()?;
    Ok(TeacherCorpus {
        config,
        image: TeacherFeatures::from_tokens(image_tokens)?,
        text: TeacherFeatures::from_tokens(text_tokens)?,
        image_basis: PcaBasis {
            components: image_components,
            eigenvalues: Vec::new(),
        },
        text_basis: PcaBasis {
            components: text_components,
            eigenvalues: Vec::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transitions::xavier_uniform;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_rotation(n: usize, seed: u64) -> Matrix {
        // Gram-Schmidt on a random square matrix.
        let mut r = rng(seed);
        let raw = normal_matrix(n, n, &mut r);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..n {
            let mut v = raw.row(i).to_vec();
            for u in &q {
                let dot: f64 = v.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(u.iter()) {
                    *x -= dot * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut v {
                *x /= norm;
            }
            q.push(v);
        }
        Matrix::from_rows(&q)
    }

    #[test]
    fn orthonormal_rows_give_identity_gram() {
        let rot = random_rotation(4, 3);
        let (g, zeros) = gram_normalised(&rot).unwrap();
        assert_eq!(zeros, 0);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((g.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_unit_rows_give_uniform_gram() {
        let l = 5;
        let row = vec![0.6, 0.8];
        let tokens = Matrix::from_rows(&vec![row; l]);
        let (g, _) = gram_normalised(&tokens).unwrap();
        let expect = 1.0 / (l as f64).sqrt();
        for i in 0..l {
            for j in 0..l {
                assert!((g.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gram_invariant_under_right_rotation() {
        let mut r = rng(4);
        let tokens = xavier_uniform(6, 5, &mut r);
        let rot = random_rotation(5, 9);
        let rotated = tokens.matmul(&rot).unwrap();
        let (g0, _) = gram_normalised(&tokens).unwrap();
        let (g1, _) = gram_normalised(&rotated).unwrap();
        assert!(g0.sub(&g1).unwrap().norm() < 1e-9);
    }

    #[test]
    fn gram_loss_zero_for_identical_and_rotated_tokens() {
        let mut r = rng(5);
        let tokens = xavier_uniform(6, 3, &mut r);
        let (gt, _) = gram_normalised(&tokens).unwrap();
        assert!(gram_loss_plain(&[tokens.clone()], &[gt.clone()]).unwrap() < 1e-24);
        let rot = random_rotation(3, 11);
        let rotated = tokens.matmul(&rot).unwrap();
        assert!(gram_loss_plain(&[rotated], &[gt]).unwrap() < 1e-18);
    }

    #[test]
    fn gram_loss_matches_elementwise_recomputation() {
        let mut r = rng(6);
        let s = xavier_uniform(6, 3, &mut r);
        let t = xavier_uniform(6, 3, &mut r);
        let (gt, _) = gram_normalised(&t).unwrap();
        let loss = gram_loss_plain(&[s.clone()], &[gt.clone()]).unwrap();
        let (gs, _) = gram_normalised(&s).unwrap();
        let mut expect = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                let d = gs.get(i, j) - gt.get(i, j);
                expect += d * d;
            }
        }
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn relational_zero_under_similarity_transform() {
        let mut r = rng(7);
        let teacher = xavier_uniform(6, 4, &mut r);
        // student = rotation + translation + uniform scale of teacher.
        let rot = random_rotation(4, 13);
        let mut student = teacher.matmul(&rot).unwrap().scale(2.7);
        for i in 0..student.rows() {
            for (c, off) in [0.3, -1.1, 0.7, 0.2].iter().enumerate() {
                let v = student.get(i, c) + off;
                student.set(i, c, v);
            }
        }
        let triples = all_ordered_triples(6);
        let (loss, skipped) = relational_loss_plain(&student, &teacher, &triples).unwrap();
        assert_eq!(skipped, 0);
        assert!(loss < 1e-18, "loss {loss}");
    }

    #[test]
    fn planted_right_angle_vs_sixty_degrees() {
        // Teacher: equilateral triangle, 60 degrees at vertex 1.
        // Student: right angle at vertex 1. Cosine gap (0 - 0.5)^2 = 0.25.
        let teacher = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.5, (3.0f64).sqrt() / 2.0],
        ]);
        let student = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]]);
        let cs = triple_angle_cos(&student, 0, 1, 2).unwrap();
        let ct = triple_angle_cos(&teacher, 0, 1, 2).unwrap();
        assert!((cs - 0.0).abs() < 1e-12);
        assert!((ct - 0.5).abs() < 1e-12);
        assert!(((cs - ct).powi(2) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn degenerate_triples_are_skipped_and_counted() {
        let student = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]]);
        let teacher = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let triples = all_ordered_triples(3);
        let (_, skipped) = relational_loss_plain(&student, &teacher, &triples).unwrap();
        assert!(skipped > 0);
    }

    #[test]
    fn teacher_is_deterministic_in_seed() {
        let config = TeacherConfig {
            seed: 99,
            corpus_size: 4,
            tokens_per_item: 9,
            raw_dim: 6,
            reduced_dim: 4,
            parts: 3,
            part_scale: 1.0,
            noise: 0.05,
        };
        let a = synthetic_teacher(&config).unwrap();
        let b = synthetic_teacher(&config).unwrap();
        for (x, y) in a.image.tokens.iter().zip(&b.image.tokens) {
            assert_eq!(x, y);
        }
        for (x, y) in a.text.tokens.iter().zip(&b.text.tokens) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn planted_blocks_show_in_gram() {
        let config = TeacherConfig {
            seed: 5,
            corpus_size: 6,
            tokens_per_item: 12,
            raw_dim: 8,
            reduced_dim: 6,
            parts: 3,
            part_scale: 1.0,
            noise: 0.08,
        };
        let corpus = synthetic_teacher(&config).unwrap();
        let parts = crate::fusion::even_partition(12, 3);
        let mut within = Vec::new();
        let mut across = Vec::new();
        for g in &corpus.image.gram {
            for i in 0..12 {
                for j in 0..12 {
                    if i == j {
                        continue;
                    }
                    let same = parts.iter().any(|r| r.contains(&i) && r.contains(&j));
                    if same {
                        within.push(g.get(i, j));
                    } else {
                        across.push(g.get(i, j));
                    }
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&within) > mean(&across),
            "within {} vs across {}",
            mean(&within),
            mean(&across)
        );
    }

    #[test]
    fn cache_round_trip_is_bit_identical() {
        let config = TeacherConfig {
            seed: 7,
            corpus_size: 3,
            tokens_per_item: 9,
            raw_dim: 6,
            reduced_dim: 4,
            parts: 3,
            part_scale: 1.0,
            noise: 0.05,
        };
        let corpus = synthetic_teacher(&config).unwrap();
        let dir = std::env::temp_dir().join("plrank_cache_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("teacher.cache");
        write_teacher_cache(&path, &corpus).unwrap();
        let loaded = read_teacher_cache(&path).unwrap();
        assert_eq!(loaded.config, config);
        for (a, b) in corpus.image.tokens.iter().zip(&loaded.image.tokens) {
            assert_eq!(a, b);
        }
        for (a, b) in corpus.text.cls.data().iter().zip(loaded.text.cls.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("plrank_cache_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bogus.cache");
        std::fs::write(&path, b"NOTACACHE_PADDING").unwrap();
        assert!(matches!(
            read_teacher_cache(&path),
            Err(Error::CacheFormat(_))
        ));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn pca_reduction_preserves_gram_loss_at_high_variance_capture() {
        let config = TeacherConfig {
            seed: 21,
            corpus_size: 8,
            tokens_per_item: 12,
            raw_dim: 10,
            reduced_dim: 10,
            parts: 3,
            part_scale: 1.0,
            noise: 0.02,
        };
        config.validate().unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(config.seed);
        let raw = raw_teacher_tokens(&config, &mut r);
        let mut stacked_rows = Vec::new();
        for t in &raw {
            for row in 0..t.rows() {
                stacked_rows.push(t.row(row).to_vec());
            }
        }
        let stacked = Matrix::from_rows(&stacked_rows);
        let full = fit_pca(&stacked, config.raw_dim).unwrap();
        let total: f64 = full.eigenvalues.iter().sum();
        let mut k = 0;
        let mut acc = 0.0;
        for &l in &full.eigenvalues {
            acc += l;
            k += 1;
            if acc / total >= 0.99 {
                break;
            }
        }
        let basis = fit_pca(&stacked, k).unwrap();

        // Same student measured against the unreduced cache and the reduced
        // cache; the Gram matrices are L x L either way.
        let mut rr = rng(31);
        let students: Vec<Matrix> = raw
            .iter()
            .map(|t| {
                t.add(&normal_matrix(t.rows(), t.cols(), &mut rr).scale(0.1))
                    .unwrap()
            })
            .collect();
        let teacher_raw_grams: Vec<Matrix> = raw
            .iter()
            .map(|t| gram_normalised(t).unwrap().0)
            .collect();
        let loss_raw = gram_loss_plain(&students, &teacher_raw_grams).unwrap();

        let teacher_red_grams: Vec<Matrix> = raw
            .iter()
            .map(|t| gram_normalised(&basis.project(t).unwrap()).unwrap().0)
            .collect();
        let loss_red = gram_loss_plain(&students, &teacher_red_grams).unwrap();

        let rel = (loss_red - loss_raw).abs() / loss_raw;
        assert!(rel <= 0.05, "relative drift {rel} (raw {loss_raw}, reduced {loss_red})");
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let mut r = rng(17);
        let student_tokens_val = xavier_uniform(5, 3, &mut r);
        let teacher_tokens = xavier_uniform(5, 3, &mut r);
        let (tg, _) = gram_normalised(&teacher_tokens).unwrap();
        let mut tape = Tape::new();
        let s = tape.var(student_tokens_val);
        let loss = gram_loss_tape(&mut tape, &[s], std::slice::from_ref(&tg)).unwrap();
        let grads = tape.backward(loss);
        assert!(grads.touched(s));
        // The teacher gram entered as a fresh constant node inside the loss;
        // nothing outside the tape can observe it, so the frozen contract is
        // that only the student leaf carries gradient.
        let gs = grads.grad(s);
        assert!(gs.data().iter().any(|&v| v != 0.0));
    }
}
