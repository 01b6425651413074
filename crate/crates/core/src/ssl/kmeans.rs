use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, SslError};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    /// Row-major `[k, dim]`.
    pub centroids: Vec<f64>,
    pub k: usize,
    pub dim: usize,
    /// Total within-cluster squared distance after each Lloyd iteration.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, d] => Ok((n, d)),
        _ => Err(SslError::Invalid(format!(
            "points must be [N, D], got {:?}",
            t.shape()
        ))),
    }
}

impl KMeansModel {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Nearest centroid and its squared distance; ties go to the lower index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.k {
            let d = sq_dist(x, self.centroid(j));
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    pub fn distortion(&self, points: &Tensor) -> f64 {
        points
            .data()
            .chunks(self.dim)
            .map(|x| self.nearest(x).1)
            .sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::with_dtype(&[self.k, self.dim], self.centroids.clone(), DType::F64)
            .expect("length matches")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (k, dim) = rows(t)?;
        Ok(KMeansModel {
            centroids: t.data().to_vec(),
            k,
            dim,
            history: Vec::new(),
        })
    }
}

/// Lloyd's algorithm from k-means++ seeding. An empty cluster is moved to
/// the point currently farthest from its centroid.
pub fn kmeans_fit(points: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<KMeansModel> {
    let (n, dim) = rows(points)?;
    if k == 0 || n < k {
        return Err(SslError::TooFewPoints { n, k });
    }
    let x = |i: usize| &points.data()[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(x(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(&mut rng),
            Err(_) => rng.random_range(0..n),
        };
        let c = x(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x(i), &c));
        }
        centroids.extend(c);
    }
    let mut model = KMeansModel {
        centroids,
        k,
        dim,
        history: Vec::new(),
    };

    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (j, d) = model.nearest(x(i));
            changed |= labels[i] != j;
            labels[i] = j;
            dist[i] = d;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i] * dim..(labels[i] + 1) * dim]
                .iter_mut()
                .zip(x(i))
            {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for c in 0..dim {
                    model.centroids[j * dim + c] = sums[j * dim + c] / counts[j] as f64;
                }
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("n >= k >= 1");
                model.centroids[j * dim..(j + 1) * dim].copy_from_slice(x(far));
                dist[far] = 0.0;
                labels[far] = j;
                changed = true;
            }
        }
        model.history.push(model.distortion(points));
        if !changed {
            break;
        }
    }
    Ok(model)
}

pub fn kmeans_assign(model: &KMeansModel, frames: &Tensor) -> Result<Vec<usize>> {
    let (_, dim) = rows(frames)?;
    if dim != model.dim {
        return Err(SslError::Invalid(format!(
            "frames have dim {dim}, centroids {}",
            model.dim
        )));
    }
    Ok(frames
        .data()
        .chunks(dim)
        .map(|f| model.nearest(f).0)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn two_clear_clusters() {
        let pts = Tensor::new(&[4, 1], vec![0.0, 0.1, 10.0, 10.1]).unwrap();
        for seed in 0..10 {
            let m = kmeans_fit(&pts, 2, 20, seed).unwrap();
            let mut c = m.centroids.clone();
            c.sort_by(f64::total_cmp);
            assert!(
                (c[0] - 0.05).abs() < 1e-12 && (c[1] - 10.05).abs() < 1e-12,
                "{c:?}"
            );
        }
    }

    #[test]
    fn k_equals_n() {
        let pts = Tensor::new(&[3, 2], vec![0., 0., 1., 5., -2., 3.]).unwrap();
        let m = kmeans_fit(&pts, 3, 10, 4).unwrap();
        assert_eq!(m.distortion(&pts), 0.0);
        let labels = kmeans_assign(&m, &pts).unwrap();
        let mut sorted = labels.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn centroid_maps_to_itself() {
        let pts = Tensor::new(&[6, 1], vec![0., 1., 2., 10., 11., 12.]).unwrap();
        let m = kmeans_fit(&pts, 2, 10, 0).unwrap();
        for j in 0..2 {
            let c = Tensor::new(&[1, 1], m.centroid(j).to_vec()).unwrap();
            assert_eq!(kmeans_assign(&m, &c).unwrap(), vec![j]);
        }
    }

    #[test]
    fn distortion_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let data: Vec<f64> = (0..400 * 3).map(|_| normal.sample(&mut rng)).collect();
        let pts = Tensor::new(&[400, 3], data).unwrap();
        for seed in 0..5 {
            let m = kmeans_fit(&pts, 8, 50, seed).unwrap();
            for w in m.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", m.history);
            }
        }
    }

    #[test]
    fn duplicates_and_errors() {
        let pts = Tensor::new(&[4, 1], vec![1.0; 4]).unwrap();
        let m = kmeans_fit(&pts, 3, 10, 0).unwrap();
        assert_eq!(m.distortion(&pts), 0.0);
        assert!(matches!(
            kmeans_fit(&pts, 5, 10, 0),
            Err(SslError::TooFewPoints { n: 4, k: 5 })
        ));
    }

    #[test]
    fn stable_under_seed() {
        let pts = Tensor::new(&[5, 1], vec![0., 3., 4., 9., 1.]).unwrap();
        assert_eq!(
            kmeans_fit(&pts, 2, 10, 7).unwrap(),
            kmeans_fit(&pts, 2, 10, 7).unwrap()
        );
    }
}
