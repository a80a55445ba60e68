//! Synthetic separable binary classification data.
//!
//! Each class is a mixture of truncated Gaussian clusters placed on its own
//! side of a hidden hyperplane through the origin. Cluster centers sit at
//! `±(margin/2 + 3σ)` along a random unit direction `u` of the informative
//! subspace (plus an orthogonal offset per cluster), and every draw is
//! rejected until `y·⟨u, x⟩ ≥ margin/2`. The hyperplane `⟨u, x⟩ = 0`
//! therefore classifies every point correctly and the two class supports are
//! at least `margin` apart, so the Bayes risk is zero.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub n_features: usize,
    pub n_informative: usize,
    /// Minimum distance between the two class supports.
    pub margin: f64,
    /// Probability of label `+1`.
    pub class_balance: f64,
    /// Per-coordinate standard deviation of each cluster in the informative subspace.
    pub cluster_std: f64,
    pub clusters_per_class: usize,
    /// Distance of the cluster centers beyond the margin, in units of `cluster_std`.
    pub center_sigmas: f64,
    /// Length of the offset of each cluster center orthogonal to `u`.
    pub cluster_spread: f64,
    /// Standard deviation of the uninformative coordinates.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            n_features: 20,
            n_informative: 10,
            margin: 1.0,
            class_balance: 0.5,
            cluster_std: 0.25,
            clusters_per_class: 2,
            center_sigmas: 3.0,
            cluster_spread: 1.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.n_informative == 0 {
            return config_err("n_features and n_informative must be positive");
        }
        if self.n_informative > self.n_features {
            return config_err(format!(
                "n_informative ({}) exceeds n_features ({})",
                self.n_informative, self.n_features
            ));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return config_err(format!("margin must be positive, got {}", self.margin));
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return config_err(format!(
                "class_balance must lie in (0,1), got {}",
                self.class_balance
            ));
        }
        if !(self.cluster_std > 0.0 && self.cluster_std.is_finite()) {
            return config_err("cluster_std must be positive");
        }
        if self.clusters_per_class == 0 {
            return config_err("clusters_per_class must be positive");
        }
        if !(self.center_sigmas >= 0.0 && self.cluster_spread >= 0.0 && self.noise_std >= 0.0) {
            return config_err("cluster_spread and noise_std must be non-negative");
        }
        Ok(())
    }

    /// The fixed geometry behind this spec: separating direction and cluster centers.
    pub fn geometry(&self) -> Result<Geometry> {
        self.validate()?;
        let k = self.n_informative;
        let mut rng = rng::seeded(rng::derive(self.seed, Stream::Geometry, 0));
        let direction = random_unit(&mut rng, k, &[]);
        let along = self.margin / 2.0 + self.center_sigmas * self.cluster_std;
        let mut centers = Vec::with_capacity(2 * self.clusters_per_class);
        for y in [1.0, -1.0] {
            for _ in 0..self.clusters_per_class {
                let offset = if k > 1 {
                    random_unit(&mut rng, k, std::slice::from_ref(&direction))
                } else {
                    vec![0.0; k]
                };
                let center: Vec<f64> = direction
                    .iter()
                    .zip(&offset)
                    .map(|(u, v)| y * along * u + self.cluster_spread * v)
                    .collect();
                centers.push(center);
            }
        }
        Ok(Geometry {
            direction,
            centers,
        })
    }
}

/// Draw a unit vector of dimension `dim` orthogonal to every vector in `against`.
fn random_unit<R: Rng>(rng: &mut R, dim: usize, against: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for a in against {
            let dot: f64 = v.iter().zip(a).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(a).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Geometry {
    /// Unit normal of the separating hyperplane, in informative coordinates.
    pub direction: Vec<f64>,
    /// Cluster centers: the first half belong to class `+1`.
    pub centers: Vec<Vec<f64>>,
}

impl Geometry {
    /// Signed score of the generator's own separating rule.
    pub fn separator_score(&self, x: ArrayView1<f64>) -> f64 {
        self.direction.iter().zip(x.iter()).map(|(u, v)| u * v).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    /// Labels in `{-1.0, +1.0}`.
    pub labels: Array1<f64>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Array1<f64>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Domain(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::Domain("labels must be -1 or +1".into()));
        }
        Ok(Dataset { features, labels })
    }

    pub fn empty(n_features: usize) -> Self {
        Dataset {
            features: Array2::zeros((0, n_features)),
            labels: Array1::zeros(0),
        }
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            labels: self.labels.select(Axis(0), rows),
        }
    }

    /// Write the dataset as CSV with header `f0,...,f{d-1},label`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.n_features()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (row, y) in self.features.rows().into_iter().zip(self.labels.iter()) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(format!("{}", *y as i64));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Draw `count` labelled points from the distribution described by `spec`.
pub fn generate(spec: &DataSpec, count: usize, draw_seed: u64) -> Result<Dataset> {
    let geo = spec.geometry()?;
    Ok(generate_with(spec, &geo, count, draw_seed))
}

/// Like [`generate`] but reuses an already computed geometry.
pub fn generate_with(spec: &DataSpec, geo: &Geometry, count: usize, draw_seed: u64) -> Dataset {
    let d = spec.n_features;
    let k = spec.n_informative;
    let half_margin = spec.margin / 2.0;
    let mut rng = rng::seeded(rng::derive(draw_seed, Stream::Draw, spec.seed));
    let mut features = Array2::<f64>::zeros((count, d));
    let mut labels = Array1::<f64>::zeros(count);
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        let positive = rng.gen::<f64>() < spec.class_balance;
        let y = if positive { 1.0 } else { -1.0 };
        let cluster = rng.gen_range(0..spec.clusters_per_class);
        let center = &geo.centers[if positive { 0 } else { spec.clusters_per_class } + cluster];
        loop {
            let mut proj = 0.0;
            for j in 0..k {
                let z: f64 = rng.sample(StandardNormal);
                let v = center[j] + spec.cluster_std * z;
                row[j] = v;
                proj += geo.direction[j] * v;
            }
            if y * proj >= half_margin {
                break;
            }
        }
        for j in k..d {
            let z: f64 = rng.sample(StandardNormal);
            row[j] = spec.noise_std * z;
        }
        labels[i] = y;
    }
    Dataset { features, labels }
}

/// Seeded permutation split into disjoint index sets of sizes `m` and `mu`.
pub fn split_indices(count: usize, m: usize, mu: usize, split_seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if m == 0 || mu == 0 {
        return config_err("m and mu must be positive");
    }
    if m + mu > count {
        return Err(Error::Size {
            requested: m + mu,
            available: count,
        });
    }
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut rng::seeded(rng::derive(split_seed, Stream::Split, 0)));
    let validation = idx[m..m + mu].to_vec();
    idx.truncate(m);
    Ok((idx, validation))
}

pub fn split(data: &Dataset, m: usize, mu: usize, split_seed: u64) -> Result<(Dataset, Dataset)> {
    let (tr, va) = split_indices(data.count(), m, mu, split_seed)?;
    Ok((data.select(&tr), data.select(&va)))
}
