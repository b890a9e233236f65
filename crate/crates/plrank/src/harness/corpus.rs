//! Synthetic paired corpus with planted high-order transition structure.
//!
//! Items live in clusters whose centroids sit on the unit sphere. Ordered
//! cluster chains (first -> middle -> end) are planted in pairs that share a
//! middle cluster, and batch assembly co-samples whole chain instances so
//! the structure shows up inside batches.
//!
//! The text side carries two leak terms that create direction-asymmetric
//! ranking structure:
//!
//! * first-cluster items lean toward their chain's middle centroid, so
//!   middle items systematically follow first items in text-side rankings
//!   (signal a pairwise transition head can capture);
//! * end-cluster items lean back toward their chain's *first* centroid, so
//!   which end cluster follows the shared middle depends on how the list got
//!   there. Middle items themselves are chain-neutral, which makes this
//!   signal invisible to any per-item or pairwise score and resolvable only
//!   with pair-conditioned history.
//!
//! With zero noise an item's two sides differ by exactly the fixed modality
//! offset (plus its planted leaks).

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::numerics::matrix::Matrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// One planted chain of cluster ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chain {
    pub first: usize,
    pub middle: usize,
    pub end: usize,
}

/// The generated corpus: aligned image/text raw vectors plus the planted
/// cluster labels and transition graph.
pub struct SyntheticCorpus {
    pub seed: u64,
    pub image: Matrix,
    pub text: Matrix,
    pub cluster: Vec<usize>,
    pub chains: Vec<Chain>,
    pub centroids: Matrix,
    pub train_items: usize,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.cluster.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cluster.is_empty()
    }

    pub fn heldout_items(&self) -> usize {
        self.len() - self.train_items
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn unit_normal_row(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Chains paired around shared middles: chain 2j and 2j+1 both run through
/// middle j. Ends are all distinct clusters.
pub fn plant_chains(clusters: usize, chains: usize) -> Result<Vec<Chain>> {
    let middles = chains.div_ceil(2);
    let needed = middles + 2 * chains;
    if needed > clusters {
        return Err(Error::Config(format!(
            "{chains} chains need {needed} clusters, got {clusters}"
        )));
    }
    let mut out = Vec::with_capacity(chains);
    let mut next_free = middles;
    for c in 0..chains {
        let middle = c / 2;
        let first = next_free;
        let end = next_free + 1;
        next_free += 2;
        out.push(Chain { first, middle, end });
    }
    Ok(out)
}

/// Deterministic sub-seed derivation.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 round on seed ^ (stream * golden ratio).
    let mut z = seed ^ stream.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn generate_corpus(config: &RunConfig, seed: u64) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
    let dim = config.raw_dim;
    let chains = plant_chains(config.clusters, config.chains)?;

    // Cluster centroids, then chain neighbours pulled together so the chain
    // path is geometrically coherent.
    let mut centroids = Matrix::from_rows(
        &(0..config.clusters)
            .map(|_| unit_normal_row(dim, &mut rng))
            .collect::<Vec<_>>(),
    );
    let pull = config.geometry_pull;
    if pull > 0.0 {
        let snapshot = centroids.clone();
        let mut pulled = vec![Vec::new(); config.clusters];
        for chain in &chains {
            pulled[chain.first].push(chain.middle);
            pulled[chain.end].push(chain.middle);
        }
        for (c, towards) in pulled.iter().enumerate() {
            if towards.is_empty() {
                continue;
            }
            let mut row = snapshot.row(c).to_vec();
            for &m in towards {
                for (x, &y) in row.iter_mut().zip(snapshot.row(m)) {
                    *x += pull * y;
                }
            }
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut row {
                *x /= norm;
            }
            centroids.row_mut(c).copy_from_slice(&row);
        }
    }

    // Fixed global modality offset.
    let offset: Vec<f64> = unit_normal_row(dim, &mut rng)
        .into_iter()
        .map(|x| 0.3 * x)
        .collect();

    // Which chain role does each cluster play, if any.
    let mut leak_next_target = vec![None; config.clusters]; // first -> middle centroid
    let mut leak_back_target = vec![None; config.clusters]; // end -> first centroid
    for chain in &chains {
        leak_next_target[chain.first] = Some(chain.middle);
        leak_back_target[chain.end] = Some(chain.first);
    }

    let n = config.corpus_size;
    let mut image = Matrix::zeros(n, dim);
    let mut text = Matrix::zeros(n, dim);
    let mut cluster = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % config.clusters;
        cluster.push(c);
        let mut latent = centroids.row(c).to_vec();
        for x in &mut latent {
            *x += config.noise * standard_normal(&mut rng);
        }
        let mut txt = latent.clone();
        for (t, &o) in txt.iter_mut().zip(&offset) {
            *t += o;
        }
        if let Some(m) = leak_next_target[c] {
            for (t, &v) in txt.iter_mut().zip(centroids.row(m)) {
                *t += config.leak_next * v;
            }
        }
        if let Some(f) = leak_back_target[c] {
            for (t, &v) in txt.iter_mut().zip(centroids.row(f)) {
                *t += config.leak_back * v;
            }
        }
        for t in &mut txt {
            *t += config.noise * standard_normal(&mut rng);
        }
        image.row_mut(i).copy_from_slice(&latent);
        text.row_mut(i).copy_from_slice(&txt);
    }

    Ok(SyntheticCorpus {
        seed,
        image,
        text,
        cluster,
        chains,
        centroids,
        train_items: n - config.heldout_size,
    })
}

/// Item pool of one split, bucketed by cluster for chain co-sampling.
pub struct SplitPool {
    pub items: Vec<usize>,
    by_cluster: Vec<Vec<usize>>,
    /// Items whose cluster is not a chain middle (the random-fill pool).
    non_middle: Vec<usize>,
}

impl SplitPool {
    pub fn new(corpus: &SyntheticCorpus, heldout: bool, clusters: usize) -> Self {
        let range = if heldout {
            corpus.train_items..corpus.len()
        } else {
            0..corpus.train_items
        };
        let items: Vec<usize> = range.collect();
        let mut by_cluster = vec![Vec::new(); clusters];
        for &i in &items {
            by_cluster[corpus.cluster[i]].push(i);
        }
        let middles: Vec<usize> = corpus.chains.iter().map(|c| c.middle).collect();
        let non_middle = items
            .iter()
            .copied()
            .filter(|&i| !middles.contains(&corpus.cluster[i]))
            .collect();
        SplitPool {
            items,
            by_cluster,
            non_middle,
        }
    }

    fn pick(&self, pool: &[usize], rng: &mut impl Rng) -> usize {
        pool[rng.random_range(0..pool.len())]
    }
}

/// Assembles one batch of item indices. With probability `chain_prob` a
/// chain instance (two first-cluster items, one middle, one end) is planted;
/// the rest of the batch is uniform fill from non-middle clusters, so the
/// only route into a middle cluster is through its chain.
pub fn assemble_batch(
    corpus: &SyntheticCorpus,
    pool: &SplitPool,
    batch_size: usize,
    rng: &mut impl Rng,
    chain_prob: f64,
) -> Vec<usize> {
    let mut batch = Vec::with_capacity(batch_size);
    if !corpus.chains.is_empty() && batch_size >= 5 && rng.random_range(0.0..1.0) < chain_prob {
        let chain = corpus.chains[rng.random_range(0..corpus.chains.len())];
        let firsts = &pool.by_cluster[chain.first];
        let middles = &pool.by_cluster[chain.middle];
        let ends = &pool.by_cluster[chain.end];
        if !firsts.is_empty() && !middles.is_empty() && !ends.is_empty() {
            batch.push(pool.pick(firsts, rng));
            batch.push(pool.pick(firsts, rng));
            batch.push(pool.pick(middles, rng));
            batch.push(pool.pick(ends, rng));
        }
    }
    while batch.len() < batch_size {
        batch.push(pool.pick(&pool.non_middle, rng));
    }
    batch
}

/// Gathers the raw rows of a batch.
pub fn batch_rows(m: &Matrix, batch: &[usize]) -> Matrix {
    let rows: Vec<Vec<f64>> = batch.iter().map(|&i| m.row(i).to_vec()).collect();
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.corpus_size = 200;
        c.heldout_size = 40;
        c.raw_dim = 16;
        c
    }

    #[test]
    fn corpus_is_deterministic() {
        let config = small_config();
        let a = generate_corpus(&config, 7).unwrap();
        let b = generate_corpus(&config, 7).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.text, b.text);
        assert_eq!(a.cluster, b.cluster);
    }

    #[test]
    fn zero_noise_pairs_differ_by_offset_and_leaks() {
        let mut config = small_config();
        config.noise = 0.0;
        config.leak_next = 0.0;
        config.leak_back = 0.0;
        let corpus = generate_corpus(&config, 3).unwrap();
        // With all leaks off, text - image is the same fixed offset for
        // every item.
        let d0: Vec<f64> = corpus
            .text
            .row(0)
            .iter()
            .zip(corpus.image.row(0))
            .map(|(t, i)| t - i)
            .collect();
        for i in 1..corpus.len() {
            for (c, &expect) in d0.iter().enumerate() {
                let diff = corpus.text.get(i, c) - corpus.image.get(i, c);
                assert!((diff - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chains_share_middles_pairwise() {
        let chains = plant_chains(8, 2).unwrap();
        assert_eq!(chains.len(), 2);
        assert_eq!(chains[0].middle, chains[1].middle);
        let mut ends = vec![
            chains[0].first,
            chains[0].end,
            chains[1].first,
            chains[1].end,
        ];
        ends.sort_unstable();
        ends.dedup();
        assert_eq!(ends.len(), 4, "chain ends must be distinct clusters");
    }

    #[test]
    fn too_many_chains_rejected() {
        assert!(plant_chains(4, 2).is_err());
    }

    #[test]
    fn planted_triples_co_occur_above_chance() {
        let config = small_config();
        let corpus = generate_corpus(&config, 5).unwrap();
        let pool = SplitPool::new(&corpus, false, config.clusters);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let chain = corpus.chains[0];
        let batches = 400;
        let mut hits = 0;
        for _ in 0..batches {
            let batch = assemble_batch(&corpus, &pool, config.batch_size, &mut rng, 0.75);
            let has = |cl: usize| batch.iter().any(|&i| corpus.cluster[i] == cl);
            if has(chain.first) && has(chain.middle) && has(chain.end) {
                hits += 1;
            }
        }
        let rate = hits as f64 / batches as f64;
        // Chance under pure uniform fill is zero for middles (they are
        // excluded from the fill pool), so any co-occurrence is planted. Two
        // chains at 0.75 co-sample probability puts the expected rate near
        // 0.375.
        assert!(rate > 0.2, "co-occurrence rate {rate}");
    }

    #[test]
    fn middles_only_enter_via_chains() {
        let config = small_config();
        let corpus = generate_corpus(&config, 5).unwrap();
        let pool = SplitPool::new(&corpus, false, config.clusters);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let middles: Vec<usize> = corpus.chains.iter().map(|c| c.middle).collect();
        for _ in 0..100 {
            let batch = assemble_batch(&corpus, &pool, config.batch_size, &mut rng, 0.0);
            assert!(batch
                .iter()
                .all(|&i| !middles.contains(&corpus.cluster[i])));
        }
    }

    #[test]
    fn chain_geometry_is_coherent() {
        let config = small_config();
        let corpus = generate_corpus(&config, 9).unwrap();
        let chain = corpus.chains[0];
        let dot = |a: usize, b: usize| -> f64 {
            corpus
                .centroids
                .row(a)
                .iter()
                .zip(corpus.centroids.row(b))
                .map(|(x, y)| x * y)
                .sum()
        };
        // First and end both sit closer to the middle than a generic
        // unrelated pair of clusters does on average.
        let fm = dot(chain.first, chain.middle);
        let em = dot(chain.end, chain.middle);
        let mut unrelated = Vec::new();
        for a in 0..config.clusters {
            for b in (a + 1)..config.clusters {
                let in_chain = corpus.chains.iter().any(|c| {
                    let trio = [c.first, c.middle, c.end];
                    trio.contains(&a) && trio.contains(&b)
                });
                if !in_chain {
                    unrelated.push(dot(a, b));
                }
            }
        }
        let base = unrelated.iter().sum::<f64>() / unrelated.len() as f64;
        assert!(fm > base, "first-middle {fm} vs base {base}");
        assert!(em > base, "end-middle {em} vs base {base}");
    }

    #[test]
    fn split_pools_are_disjoint_and_complete() {
        let config = small_config();
        let corpus = generate_corpus(&config, 5).unwrap();
        let train = SplitPool::new(&corpus, false, config.clusters);
        let heldout = SplitPool::new(&corpus, true, config.clusters);
        assert_eq!(train.items.len(), corpus.train_items);
        assert_eq!(heldout.items.len(), config.heldout_size);
        assert!(train.items.iter().all(|i| !heldout.items.contains(i)));
    }
}
