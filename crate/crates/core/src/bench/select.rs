//! Joint-space diversity selection by k-means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kinematics::JointConfig;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pick `k` configurations: cluster the pool with k-means (k-means++ seeding,
/// Lloyd iterations) and keep, per cluster, the member nearest its centroid.
/// Returns sorted pool indices, all distinct.
pub fn select_diverse_configs(pool: &[JointConfig], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > pool.len() {
        return Err(Error::Precondition(format!("cannot select {k} of {} configurations", pool.len())));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let dim = pool[0].len();
    if pool.iter().any(|q| q.len() != dim) {
        return Err(Error::Precondition("configurations differ in dimension".into()));
    }
    let pts: Vec<&[f64]> = pool.iter().map(|q| q.0.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vec<f64>> = vec![pts[rng.random_range(0..pts.len())].to_vec()];
    let mut d2: Vec<f64> = pts.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..pts.len())
        };
        centroids.push(pts[next].to_vec());
        for (d, p) in d2.iter_mut().zip(&pts) {
            *d = d.min(dist2(p, centroids.last().unwrap()));
        }
    }

    let mut assign = vec![usize::MAX; pts.len()];
    for _ in 0..300 {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let c = (0..k)
                .min_by(|&a, &b| dist2(p, &centroids[a]).total_cmp(&dist2(p, &centroids[b])))
                .unwrap();
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in pts.iter().zip(&assign) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // re-seed an empty cluster at the point worst served by its centroid
                let far = (0..pts.len())
                    .max_by(|&a, &b| {
                        dist2(pts[a], &centroids[assign[a]]).total_cmp(&dist2(pts[b], &centroids[assign[b]]))
                    })
                    .unwrap();
                centroids[c] = pts[far].to_vec();
            }
        }
    }

    let mut taken = vec![false; pts.len()];
    let mut out = Vec::with_capacity(k);
    for (c, centroid) in centroids.iter().enumerate() {
        // members first, then any remaining point, so degenerate clusters still yield distinct indices
        let best = (0..pts.len())
            .filter(|&i| !taken[i])
            .min_by(|&a, &b| {
                let key = |i: usize| (assign[i] != c, dist2(pts[i], centroid));
                let (ma, da) = key(a);
                let (mb, db) = key(b);
                ma.cmp(&mb).then(da.total_cmp(&db)).then(a.cmp(&b))
            })
            .expect("k <= pool size");
        taken[best] = true;
        out.push(best);
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_clusters() {
        let mut pool = Vec::new();
        for i in 0..10 {
            pool.push(JointConfig(vec![0.01 * i as f64, 0.0]));
            pool.push(JointConfig(vec![5.0 + 0.01 * i as f64, 5.0]));
        }
        let sel = select_diverse_configs(&pool, 2, 3).unwrap();
        let sides: Vec<bool> = sel.iter().map(|&i| pool[i].0[0] > 2.0).collect();
        assert_ne!(sides[0], sides[1]);
    }

    #[test]
    fn duplicates_give_distinct_indices() {
        let pool = vec![JointConfig(vec![0.3, 0.3]); 6];
        let sel = select_diverse_configs(&pool, 6, 0).unwrap();
        assert_eq!(sel, vec![0, 1, 2, 3, 4, 5]);
        assert!(select_diverse_configs(&pool, 7, 0).is_err());
    }

    #[test]
    fn deterministic() {
        let pool: Vec<JointConfig> = (0..40)
            .map(|i| JointConfig(vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos(), i as f64 * 0.01]))
            .collect();
        assert_eq!(select_diverse_configs(&pool, 9, 5).unwrap(), select_diverse_configs(&pool, 9, 5).unwrap());
    }
}
