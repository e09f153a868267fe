//! Open-set metrics on held-out identities: pair verification by cosine
//! threshold sweep and rank-1 gallery identification.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LatseError, Result};
use crate::rng;

pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same_identity: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
    pub balanced: bool,
}

/// Draws `same` genuine and `different` impostor pairs over samples with the
/// given identities.
pub fn make_pairs(ids: &[usize], same: usize, different: usize, seed: u64) -> Result<PairSet> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        groups.entry(id).or_default().push(i);
    }
    let multi: Vec<&Vec<usize>> = groups.values().filter(|g| g.len() >= 2).collect();
    if same > 0 && multi.is_empty() {
        return Err(LatseError::Empty("no identity has two samples".into()));
    }
    if different > 0 && groups.len() < 2 {
        return Err(LatseError::Empty("impostor pairs need two identities".into()));
    }
    let mut r = rng::rng(seed);
    let mut pairs = Vec::with_capacity(same + different);
    for _ in 0..same {
        let g = multi[r.gen_range(0..multi.len())];
        let x = r.gen_range(0..g.len());
        let mut y = r.gen_range(0..g.len() - 1);
        if y >= x {
            y += 1;
        }
        pairs.push(Pair {
            a: g[x],
            b: g[y],
            same_identity: true,
        });
    }
    for _ in 0..different {
        loop {
            let a = r.gen_range(0..ids.len());
            let b = r.gen_range(0..ids.len());
            if ids[a] != ids[b] {
                pairs.push(Pair {
                    a,
                    b,
                    same_identity: false,
                });
                break;
            }
        }
    }
    Ok(PairSet {
        pairs,
        balanced: same == different,
    })
}

/// Best threshold accuracy where a pair is declared genuine iff
/// `similarity >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verification {
    pub accuracy: f64,
    pub threshold: f64,
}

/// Sweeps every observed similarity, the midpoints between neighbours, and one
/// value above the maximum. Ties keep the lowest threshold.
pub fn verification_accuracy(embeddings: &Array2<f64>, set: &PairSet) -> Result<Verification> {
    if set.pairs.is_empty() {
        return Err(LatseError::Empty("pair set".into()));
    }
    let mut scored: Vec<(f64, bool)> = set
        .pairs
        .iter()
        .map(|p| {
            (
                cosine_similarity(embeddings.row(p.a), embeddings.row(p.b)),
                p.same_identity,
            )
        })
        .collect();
    Ok(sweep(&mut scored))
}

/// Threshold sweep over `(similarity, genuine)` scores.
pub fn sweep(scored: &mut [(f64, bool)]) -> Verification {
    scored.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap_or(Ordering::Equal));
    let n = scored.len();
    let total_genuine = scored.iter().filter(|s| s.1).count();

    let mut candidates: Vec<f64> = Vec::with_capacity(2 * n + 1);
    for (i, s) in scored.iter().enumerate() {
        if i > 0 && scored[i - 1].0 == s.0 {
            continue;
        }
        if i > 0 {
            candidates.push(0.5 * (scored[i - 1].0 + s.0));
        }
        candidates.push(s.0);
    }
    let top = scored[n - 1].0;
    candidates.push(top + 1.0_f64.max(top.abs()));

    // Pointer walk: `below` counts pairs with similarity < t.
    let mut below = 0;
    let mut genuine_below = 0;
    let mut best = Verification {
        accuracy: -1.0,
        threshold: 0.0,
    };
    for &t in &candidates {
        while below < n && scored[below].0 < t {
            genuine_below += scored[below].1 as usize;
            below += 1;
        }
        let impostor_below = below - genuine_below;
        let genuine_above = total_genuine - genuine_below;
        let accuracy = (impostor_below + genuine_above) as f64 / n as f64;
        if accuracy > best.accuracy {
            best = Verification {
                accuracy,
                threshold: t,
            };
        }
    }
    best
}

/// Fraction of probes whose most similar gallery entry has their identity.
/// Ties go to the lower gallery index.
pub fn identification_rank1(
    probes: &Array2<f64>,
    probe_ids: &[usize],
    gallery: &Array2<f64>,
    gallery_ids: &[usize],
) -> Result<f64> {
    if probes.nrows() != probe_ids.len() || gallery.nrows() != gallery_ids.len() {
        return Err(LatseError::Shape("embedding/id count mismatch".into()));
    }
    if probes.nrows() == 0 {
        return Err(LatseError::Empty("no probes".into()));
    }
    if let Some(missing) = probe_ids.iter().find(|id| !gallery_ids.contains(id)) {
        return Err(LatseError::Empty(format!(
            "probe identity {missing} has no gallery entry"
        )));
    }
    let hits = probes
        .rows()
        .into_iter()
        .zip(probe_ids)
        .filter(|(p, &id)| {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (g, row) in gallery.rows().into_iter().enumerate() {
                let s = cosine_similarity(*p, row);
                if s > best_sim {
                    best_sim = s;
                    best = g;
                }
            }
            gallery_ids[best] == id
        })
        .count();
    Ok(hits as f64 / probes.nrows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub same_pairs: usize,
    pub different_pairs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            same_pairs: 500,
            different_pairs: 500,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub verification: Verification,
    pub rank1: f64,
}

/// Verification over sampled pairs plus rank-1 identification with the first
/// sample of every identity as gallery and the rest as probes.
pub fn evaluate(embeddings: &Array2<f64>, ids: &[usize], cfg: &EvalConfig) -> Result<EvalReport> {
    let pairs = make_pairs(ids, cfg.same_pairs, cfg.different_pairs, cfg.seed)?;
    let verification = verification_accuracy(embeddings, &pairs)?;
    let mut seen = BTreeMap::new();
    let (mut gallery_rows, mut probe_rows) = (Vec::new(), Vec::new());
    for (i, &id) in ids.iter().enumerate() {
        if seen.insert(id, i).is_none() {
            gallery_rows.push(i);
        } else {
            probe_rows.push(i);
        }
    }
    let pick = |rows: &[usize]| embeddings.select(ndarray::Axis(0), rows);
    let g_ids: Vec<usize> = gallery_rows.iter().map(|&i| ids[i]).collect();
    let p_ids: Vec<usize> = probe_rows.iter().map(|&i| ids[i]).collect();
    let rank1 = if probe_rows.is_empty() {
        1.0
    } else {
        identification_rank1(&pick(&probe_rows), &p_ids, &pick(&gallery_rows), &g_ids)?
    };
    Ok(EvalReport {
        verification,
        rank1,
    })
}

impl EvalReport {
    pub fn to_csv(&self, seed: u64, config_hash: &str) -> String {
        format!(
            "metric,value,threshold,seed,config_hash\n\
             verification_accuracy,{:.9},{:.9},{seed},{config_hash}\n\
             rank1,{:.9},,{seed},{config_hash}\n",
            self.verification.accuracy, self.verification.threshold, self.rank1
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    /// Tries every candidate threshold independently.
    fn brute_force(scored: &[(f64, bool)]) -> Verification {
        let mut cands: Vec<f64> = scored.iter().map(|s| s.0).collect();
        for x in scored {
            for y in scored {
                if x.0 < y.0 && !scored.iter().any(|z| x.0 < z.0 && z.0 < y.0) {
                    cands.push(0.5 * (x.0 + y.0));
                }
            }
        }
        let top = scored.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        cands.push(top + 1.0_f64.max(top.abs()));
        cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cands.dedup();
        let mut best = Verification {
            accuracy: -1.0,
            threshold: 0.0,
        };
        for t in cands {
            let correct = scored.iter().filter(|(s, g)| (*s >= t) == *g).count();
            let acc = correct as f64 / scored.len() as f64;
            if acc > best.accuracy {
                best = Verification {
                    accuracy: acc,
                    threshold: t,
                };
            }
        }
        best
    }

    #[test]
    fn separable_pairs() {
        let emb = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let set = PairSet {
            pairs: vec![
                Pair { a: 0, b: 1, same_identity: true },
                Pair { a: 0, b: 2, same_identity: false },
            ],
            balanced: true,
        };
        let v = verification_accuracy(&emb, &set).unwrap();
        assert_eq!(v.accuracy, 1.0);
        assert_eq!(v.threshold, 0.5);
    }

    #[test]
    fn identical_embeddings_give_half() {
        let emb = Array2::from_elem((4, 3), 0.5);
        let set = make_pairs(&[0, 0, 1, 1], 10, 10, 3).unwrap();
        let v = verification_accuracy(&emb, &set).unwrap();
        assert_eq!(v.accuracy, 0.5);
    }

    #[test]
    fn empty_pairs_error() {
        let set = PairSet {
            pairs: vec![],
            balanced: true,
        };
        assert!(verification_accuracy(&Array2::zeros((1, 1)), &set).is_err());
    }

    #[test]
    fn sweep_matches_brute_force() {
        for seed in 0..20 {
            let mut r = rng::rng(seed);
            let emb = Array2::from_shape_simple_fn((40, 4), || r.gen_range(-1.0..1.0));
            let ids: Vec<usize> = (0..40).map(|i| i / 4).collect();
            let set = make_pairs(&ids, 50, 50, seed).unwrap();
            let fast = verification_accuracy(&emb, &set).unwrap();
            let scored: Vec<(f64, bool)> = set
                .pairs
                .iter()
                .map(|p| (cosine_similarity(emb.row(p.a), emb.row(p.b)), p.same_identity))
                .collect();
            assert_eq!(fast, brute_force(&scored), "seed {seed}");
            assert!(fast.accuracy >= 0.5);
        }
    }

    #[test]
    fn scale_invariance() {
        let mut r = rng::rng(4);
        let emb = Array2::from_shape_simple_fn((30, 5), || r.gen_range(-1.0..1.0));
        let ids: Vec<usize> = (0..30).map(|i| i / 3).collect();
        let set = make_pairs(&ids, 40, 40, 1).unwrap();
        let a = verification_accuracy(&emb, &set).unwrap();
        let b = verification_accuracy(&(&emb * 4.0), &set).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        let ra = evaluate(&emb, &ids, &EvalConfig::default()).unwrap();
        let rb = evaluate(&(&emb * 0.25), &ids, &EvalConfig::default()).unwrap();
        assert_eq!(ra.rank1, rb.rank1);
    }

    #[test]
    fn pairs_are_balanced_and_labelled() {
        let ids = [0, 0, 0, 1, 1, 2];
        let set = make_pairs(&ids, 5, 5, 9).unwrap();
        assert!(set.balanced);
        for p in &set.pairs {
            assert_ne!(p.a, p.b);
            assert_eq!(ids[p.a] == ids[p.b], p.same_identity);
        }
    }

    #[test]
    fn rank1_examples() {
        let g = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(identification_rank1(&g, &[3, 4], &g, &[3, 4]).unwrap(), 1.0);
        let probe = array![[1.0, 0.1]];
        let gallery = array![[0.0, 1.0], [1.0, 0.0]];
        // impostor (id 9) is strictly closer
        assert_eq!(identification_rank1(&probe, &[5], &gallery, &[5, 9]).unwrap(), 0.0);
        assert!(identification_rank1(&probe, &[6], &gallery, &[5, 9]).is_err());
    }

    #[test]
    fn rank1_matches_exhaustive_oracle() {
        let mut r = rng::rng(12);
        let gallery = Array2::from_shape_simple_fn((10, 3), || r.gen_range(-1.0..1.0));
        let probes = Array2::from_shape_simple_fn((25, 3), || r.gen_range(-1.0..1.0));
        let g_ids: Vec<usize> = (0..10).map(|i| i % 5).collect();
        let p_ids: Vec<usize> = (0..25).map(|i| i % 5).collect();
        let mut hits = 0;
        for (i, p) in probes.rows().into_iter().enumerate() {
            let sims: Vec<f64> = gallery.rows().into_iter().map(|g| cosine_similarity(p, g)).collect();
            let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let first = sims.iter().position(|&s| s == max).unwrap();
            hits += (g_ids[first] == p_ids[i]) as usize;
        }
        let rate = identification_rank1(&probes, &p_ids, &gallery, &g_ids).unwrap();
        assert_eq!(rate, hits as f64 / 25.0);
    }

    #[test]
    fn similarity_symmetric() {
        let a = array![0.3, -0.2, 0.9];
        let b = array![0.1, 0.5, -0.4];
        assert!((cosine_similarity(a.view(), b.view()) - cosine_similarity(b.view(), a.view())).abs() < 1e-12);
    }
}
