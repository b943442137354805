//! Seeded k-means and centroid-nearest selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EmbeddingVector;
use crate::error::IclError;

pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Cluster of each input vector.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Sum of squared distances to assigned centroids after each iteration.
    pub objective_history: Vec<f64>,
}

impl Clustering {
    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(0.0)
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments.iter().enumerate().filter(move |(_, &a)| a == cluster).map(|(i, _)| i)
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check(vectors: &[EmbeddingVector], k: usize) -> Result<(), IclError> {
    if vectors.is_empty() {
        return Err(IclError::EmptyCorpus);
    }
    if k == 0 || k > vectors.len() {
        return Err(IclError::InvalidK { k, n: vectors.len() });
    }
    let dim = vectors[0].values.len();
    for v in vectors {
        if v.values.len() != dim {
            return Err(IclError::DimensionMismatch { expected: dim, got: v.values.len(), document: v.document_id.clone() });
        }
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(IclError::NonFinite(v.document_id.clone()));
        }
    }
    Ok(())
}

/// k-means++ seeding: first centre uniform, later ones drawn with
/// probability proportional to squared distance from the nearest centre.
fn seed_centroids(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut nearest: Vec<f64> = points.iter().map(|p| squared_distance(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, d) in nearest.iter().enumerate() {
                if *d > 0.0 {
                    pick = Some(i);
                    if target < *d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // every point coincides with a centre: take any unchosen one
            let free: Vec<usize> = (0..points.len()).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(squared_distance(p, points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].to_vec()).collect()
}

fn objective(points: &[&[f64]], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(assignments).map(|(p, &a)| squared_distance(p, &centroids[a])).sum()
}

/// Lloyd iterations from a k-means++ start, Euclidean metric. Stops at an
/// assignment fixpoint or after [`MAX_ITERATIONS`]. A cluster left empty
/// takes the point farthest from its own centroid.
pub fn kmeans(vectors: &[EmbeddingVector], k: usize, seed: u64) -> Result<Clustering, IclError> {
    check(vectors, k)?;
    let points: Vec<&[f64]> = vectors.iter().map(|v| v.values.as_slice()).collect();
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(&points, k, &mut rng);
    let mut assignments: Vec<usize> = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = assignments[i];
            let mut best_d = if best == usize::MAX { f64::INFINITY } else { squared_distance(p, &centroids[best]) };
            for (j, c) in centroids.iter().enumerate() {
                let d = squared_distance(p, c);
                // keep the current cluster on ties so assignments cannot cycle
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            if best != assignments[i] {
                assignments[i] = best;
                changed = true;
            }
        }

        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        for empty in 0..k {
            if sizes[empty] != 0 {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| sizes[assignments[i]] > 1)
                .max_by(|&a, &b| {
                    let da = squared_distance(points[a], &centroids[assignments[a]]);
                    let db = squared_distance(points[b], &centroids[assignments[b]]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("k <= n leaves a cluster with two members");
            sizes[assignments[far]] -= 1;
            assignments[far] = empty;
            sizes[empty] = 1;
            centroids[empty] = points[far].to_vec();
            changed = true;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(&assignments) {
            for (s, x) in sums[a].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for (j, sum) in sums.into_iter().enumerate() {
            centroids[j] = sum.into_iter().map(|s| s / sizes[j] as f64).collect();
        }
        history.push(objective(&points, &assignments, &centroids));
        if !changed {
            break;
        }
    }
    Ok(Clustering { assignments, centroids, iterations, objective_history: history })
}

/// Result of centroid-nearest selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// One document id per cluster, in cluster order.
    pub ids: Vec<String>,
    pub clustering: Clustering,
}

/// Clusters the vectors into `k` groups and picks, per cluster, the member
/// nearest its centroid; equal distances go to the smallest document id.
pub fn select_candidates(vectors: &[EmbeddingVector], k: usize, seed: u64) -> Result<Selection, IclError> {
    let clustering = kmeans(vectors, k, seed)?;
    let ids = (0..k)
        .map(|cluster| {
            clustering
                .members(cluster)
                .min_by(|&a, &b| {
                    let da = squared_distance(&vectors[a].values, &clustering.centroids[cluster]);
                    let db = squared_distance(&vectors[b].values, &clustering.centroids[cluster]);
                    da.total_cmp(&db).then_with(|| vectors[a].document_id.cmp(&vectors[b].document_id))
                })
                .map(|i| vectors[i].document_id.clone())
                .expect("clusters are never empty")
        })
        .collect();
    Ok(Selection { ids, clustering })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(id: &str, values: &[f64]) -> EmbeddingVector {
        EmbeddingVector { document_id: id.into(), values: values.to_vec() }
    }

    #[test]
    fn separable_groups() {
        let vs = vec![v("a", &[0.0, 0.0]), v("b", &[0.1, 0.0]), v("c", &[10.0, 10.0]), v("d", &[10.1, 10.0])];
        let c = kmeans(&vs, 2, 7).unwrap();
        assert_eq!(c.assignments[0], c.assignments[1]);
        assert_eq!(c.assignments[2], c.assignments[3]);
        assert_ne!(c.assignments[0], c.assignments[2]);
    }

    #[test]
    fn k_equals_n() {
        let vs = vec![v("a", &[0.0]), v("b", &[1.0]), v("c", &[5.0])];
        let c = kmeans(&vs, 3, 1).unwrap();
        let mut seen = c.assignments.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2]);
        for (i, a) in c.assignments.iter().enumerate() {
            assert_eq!(c.centroids[*a], vs[i].values);
        }
        assert_eq!(c.objective(), 0.0);
    }

    #[test]
    fn duplicates_still_fill_k_clusters() {
        let vs = vec![v("a", &[1.0]), v("b", &[1.0]), v("c", &[1.0])];
        let c = kmeans(&vs, 2, 3).unwrap();
        assert_eq!(c.members(0).count() + c.members(1).count(), 3);
        assert!(c.members(0).count() > 0 && c.members(1).count() > 0);
    }

    #[test]
    fn tie_goes_to_smaller_id() {
        let vs = vec![v("z", &[-1.0]), v("m", &[1.0])];
        let s = select_candidates(&vs, 1, 0).unwrap();
        assert_eq!(s.ids, vec!["m"]);
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(kmeans(&[], 1, 0), Err(IclError::EmptyCorpus)));
        let vs = vec![v("a", &[0.0])];
        assert!(matches!(kmeans(&vs, 2, 0), Err(IclError::InvalidK { k: 2, n: 1 })));
        let vs = vec![v("a", &[0.0]), v("b", &[f64::NAN])];
        assert!(matches!(kmeans(&vs, 1, 0), Err(IclError::NonFinite(_))));
        let vs = vec![v("a", &[0.0]), v("b", &[0.0, 1.0])];
        assert!(matches!(kmeans(&vs, 1, 0), Err(IclError::DimensionMismatch { .. })));
    }
}
