//! Farthest point sampling and k-nearest-neighbour grouping.
//!
//! Both are pure functions of the coordinates, so a cloud's sampling and
//! grouping indices are computed once ([`CloudPlan`]) and reused by every
//! forward pass over that cloud.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::ModelConfig;

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy max-min sampling of `m` point indices. Starts from index 0; ties
/// go to the lowest index.
pub fn fps(points: &Tensor, m: usize) -> Result<Vec<usize>> {
    let n = points.rows();
    if m > n {
        return Err(Error::InvalidArgument(format!("cannot sample {m} of {n} points")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = Vec::with_capacity(m);
    let mut nearest = vec![f64::INFINITY; n];
    let mut cur = 0;
    for _ in 0..m {
        chosen.push(cur);
        let p = points.row(cur);
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist2(points.row(i), p));
            if *d > best.0 {
                best = (*d, i);
            }
        }
        cur = best.1;
    }
    Ok(chosen)
}

/// Indices of the `k` nearest points to each center, center-major, ordered
/// by distance with the lower index first on ties. A center is its own
/// nearest neighbour.
pub fn knn(points: &Tensor, centers: &[usize], k: usize) -> Result<Vec<usize>> {
    let n = points.rows();
    if k > n {
        return Err(Error::InvalidArgument(format!("cannot take {k} neighbours of {n} points")));
    }
    let mut out = Vec::with_capacity(centers.len() * k);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &c in centers {
        let p = points.row(c);
        order.clear();
        order.extend((0..n).map(|i| (dist2(points.row(i), p), i)));
        if k < n {
            order.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        let nearest = &mut order[..k];
        nearest.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(nearest.iter().map(|&(_, i)| i));
    }
    Ok(out)
}

/// Edge features `[neighbour - center, center]` for each center's `k`
/// nearest points: an `(m * k) x 2C` tensor, center-major.
pub fn knn_group(points: &Tensor, features: &Tensor, centers: &[usize], k: usize) -> Result<Tensor> {
    if points.rows() != features.rows() {
        return Err(Error::LengthMismatch {
            left: points.rows(),
            right: features.rows(),
        });
    }
    let nbr = knn(points, centers, k)?;
    let rep: Vec<usize> = centers.iter().flat_map(|&c| std::iter::repeat_n(c, k)).collect();
    let ctr = features.gather_rows(&rep);
    let diff = features.gather_rows(&nbr).sub(&ctr)?;
    Tensor::concat_cols(&[&diff, &ctr])
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    /// sampled centers, indices into the previous level's points
    pub centers: Vec<usize>,
    /// `m * k` neighbour indices, center-major
    pub neighbors: Vec<usize>,
    /// each center repeated `k` times, aligned with `neighbors`
    pub centers_rep: Vec<usize>,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CloudPlan {
    pub stages: Vec<StagePlan>,
}

impl CloudPlan {
    pub fn build(config: &ModelConfig, points: &Tensor) -> Result<Self> {
        let mut coords = points.clone();
        let mut stages = Vec::with_capacity(config.stages.len());
        for st in &config.stages {
            let centers = fps(&coords, st.samples)?;
            let neighbors = knn(&coords, &centers, st.neighbors)?;
            let centers_rep = centers.iter().flat_map(|&c| std::iter::repeat_n(c, st.neighbors)).collect();
            coords = coords.gather_rows(&centers);
            stages.push(StagePlan {
                centers,
                neighbors,
                centers_rep,
                k: st.neighbors,
            });
        }
        Ok(Self { stages })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn fps_reference(points: &Tensor, m: usize) -> Vec<usize> {
        let mut chosen = vec![0];
        while chosen.len() < m {
            let mut best = (-1.0, 0);
            for i in 0..points.rows() {
                let d = chosen.iter().map(|&c| dist2(points.row(i), points.row(c))).fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            chosen.push(best.1);
        }
        chosen
    }

    #[test]
    fn fps_full_is_permutation() {
        let p = cloud(20, 1);
        let mut idx = fps(&p, 20).unwrap();
        idx.sort();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
        assert!(fps(&p, 21).is_err());
    }

    #[test]
    fn fps_square_picks_opposite_corner() {
        let sq = Tensor::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0],
        ]);
        assert_eq!(fps(&sq, 2).unwrap(), vec![0, 2]);
    }

    #[test]
    fn fps_matches_reference() {
        for seed in 0..5 {
            let p = cloud(100, seed);
            assert_eq!(fps(&p, 16).unwrap(), fps_reference(&p, 16));
        }
    }

    #[test]
    fn knn_self_and_collinear() {
        let line = Tensor::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![3.0, 0.0, 0.0],
            vec![7.0, 0.0, 0.0],
        ]);
        assert_eq!(knn(&line, &[0, 3], 1).unwrap(), vec![0, 3]);
        assert_eq!(knn(&line, &[2], 4).unwrap(), vec![2, 1, 0, 3]);
        assert_eq!(knn(&line, &[3], 3).unwrap(), vec![3, 2, 1]);
        assert!(knn(&line, &[0], 5).is_err());
    }

    #[test]
    fn knn_matches_sort_oracle() {
        let p = cloud(60, 9);
        let centers = [0, 5, 17];
        let got = knn(&p, &centers, 7).unwrap();
        for (ci, &c) in centers.iter().enumerate() {
            let mut all: Vec<(f64, usize)> = (0..60).map(|i| (dist2(p.row(i), p.row(c)), i)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all[..7].iter().map(|x| x.1).collect();
            assert_eq!(&got[ci * 7..(ci + 1) * 7], &want[..]);
        }
    }

    #[test]
    fn group_shape_and_self_neighbour() {
        let p = cloud(30, 4);
        let f = cloud(30, 5);
        let g = knn_group(&p, &f, &[1, 2, 3], 1).unwrap();
        assert_eq!(g.shape(), (3, 6));
        for r in 0..3 {
            assert_eq!(&g.row(r)[..3], &[0.0, 0.0, 0.0]);
            assert_eq!(&g.row(r)[3..], f.row(r + 1));
        }
        assert_eq!(knn_group(&p, &f, &[0, 1], 4).unwrap().shape(), (8, 6));
    }
}
