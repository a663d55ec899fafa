//! Residual cluster encoding: a learned bank of cluster centers with
//! per-cluster smoothing turns a descriptor z into soft assignment weights,
//! per-cluster residuals z − q_υ, and their weighted average (the cumulative
//! residual), which is L2-normalized into the representation used by the
//! contrastive loss. The argmax assignment doubles as a visual word index.

use rand::Rng;

use crate::error::{Error, Result};
use crate::num::{Real, Tensor};
use crate::rng;

/// Cumulative residuals shorter than this are treated as degenerate and map
/// to the zero vector instead of being normalized.
pub const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct ClusterBank<T = f32> {
    /// Cluster centers, one row per cluster: [Υ, D].
    pub centers: Tensor<T>,
    /// Per-cluster smoothing stored as log s so s stays positive: [Υ].
    pub log_smoothing: Tensor<T>,
}

impl<T: Real> ClusterBank<T> {
    pub fn from_parts(centers: Tensor<T>, log_smoothing: Tensor<T>) -> Result<Self> {
        let (clusters, _) = centers.dims2()?;
        if log_smoothing.shape() != [clusters] {
            return Err(Error::data(format!(
                "smoothing has shape {:?}, expected [{clusters}]",
                log_smoothing.shape()
            )));
        }
        if !centers.all_finite() || !log_smoothing.all_finite() {
            return Err(Error::numerical("cluster bank contains non-finite values"));
        }
        Ok(Self { centers, log_smoothing })
    }

    pub fn clusters(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("clusters.centers".into(), &self.centers),
            ("clusters.log_smoothing".into(), &self.log_smoothing),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("clusters.centers".into(), &mut self.centers),
            ("clusters.log_smoothing".into(), &mut self.log_smoothing),
        ]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            centers: Tensor::zeros(self.centers.shape().to_vec()),
            log_smoothing: Tensor::zeros(self.log_smoothing.shape().to_vec()),
        }
    }

    pub fn accumulate(&mut self, other: &Self) {
        self.centers.axpy(T::one(), &other.centers);
        self.log_smoothing.axpy(T::one(), &other.log_smoothing);
    }

    pub fn convert<U: Real>(&self) -> ClusterBank<U> {
        ClusterBank {
            centers: self.centers.convert(),
            log_smoothing: self.log_smoothing.convert(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.centers.all_finite() && self.log_smoothing.all_finite()
    }
}

/// Centers drawn uniform in [−1/√D, 1/√D], smoothing started at 1 (log 0),
/// seed-deterministic.
pub fn init_bank(clusters: usize, dim: usize, seed: u64) -> Result<ClusterBank<f32>> {
    if clusters == 0 || dim == 0 {
        return Err(Error::data("cluster bank needs clusters >= 1 and dim >= 1"));
    }
    let mut rng = rng::bank_init(seed);
    let bound = 1.0 / (dim as f32).sqrt();
    let data = (0..clusters * dim).map(|_| rng.gen_range(-bound..bound)).collect();
    ClusterBank::from_parts(
        Tensor::new(vec![clusters, dim], data)?,
        Tensor::zeros(vec![clusters]),
    )
}

fn check_dims<T: Real>(z: &Tensor<T>, bank: &ClusterBank<T>) -> Result<(usize, usize)> {
    let d = z.len();
    if z.rank() != 1 || d != bank.dim() {
        return Err(Error::data(format!(
            "descriptor shape {:?} does not match bank dim {}",
            z.shape(),
            bank.dim()
        )));
    }
    Ok((bank.clusters(), d))
}

/// Row υ is z − q_υ.
pub fn residuals<T: Real>(z: &Tensor<T>, bank: &ClusterBank<T>) -> Result<Tensor<T>> {
    let (clusters, d) = check_dims(z, bank)?;
    let mut out = Vec::with_capacity(clusters * d);
    for u in 0..clusters {
        let q = &bank.centers.data()[u * d..(u + 1) * d];
        for j in 0..d {
            out.push(z.data()[j] - q[j]);
        }
    }
    Tensor::new(vec![clusters, d], out)
}

fn logits<T: Real>(z: &Tensor<T>, bank: &ClusterBank<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
    let clusters = bank.clusters();
    let d = bank.dim();
    let mut dist_sq = Vec::with_capacity(clusters);
    let mut smoothing = Vec::with_capacity(clusters);
    let mut l = Vec::with_capacity(clusters);
    for u in 0..clusters {
        let q = &bank.centers.data()[u * d..(u + 1) * d];
        let mut acc = T::zero();
        for j in 0..d {
            let r = z.data()[j] - q[j];
            acc += r * r;
        }
        let s = bank.log_smoothing.data()[u].exp();
        dist_sq.push(acc);
        smoothing.push(s);
        l.push(-s * acc);
    }
    (l, dist_sq, smoothing)
}

fn softmax<T: Real>(l: &[T]) -> Vec<T> {
    let max = l.iter().copied().fold(l[0], |a, b| if b > a { b } else { a });
    let exps: Vec<T> = l.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// θ_υ = softmax_υ(−s_υ · ‖z − q_υ‖²).
pub fn affinity_weights<T: Real>(z: &Tensor<T>, bank: &ClusterBank<T>) -> Result<Tensor<T>> {
    let (clusters, _) = check_dims(z, bank)?;
    let (l, _, _) = logits(z, bank);
    Tensor::new(vec![clusters], softmax(&l))
}

/// Index of the largest affinity weight; ties go to the lowest index.
/// Softmax is monotone in its logits, so this equals the argmin of the
/// smoothing-scaled squared distance.
pub fn word_assign<T: Real>(z: &Tensor<T>, bank: &ClusterBank<T>) -> Result<usize> {
    check_dims(z, bank)?;
    let (l, _, _) = logits(z, bank);
    let mut best = 0usize;
    for (u, &v) in l.iter().enumerate() {
        if v > l[best] {
            best = u;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug)]
pub struct ResidualDescriptor<T = f32> {
    /// Per-cluster residuals z − q_υ: [Υ, D].
    pub per_cluster: Tensor<T>,
    /// Soft assignment weights θ: [Υ].
    pub weights: Tensor<T>,
    /// r = (1/Υ) Σ_υ θ_υ (z − q_υ): [D].
    pub cumulative: Tensor<T>,
    /// r/‖r‖, or zero when degenerate: [D].
    pub f: Tensor<T>,
    /// Visual word: argmax θ, lowest index on ties.
    pub word: usize,
    pub degenerate: bool,
}

/// Full forward pass of the encoder for one descriptor.
pub fn cumulative_residual<T: Real>(z: &Tensor<T>, bank: &ClusterBank<T>) -> Result<ResidualDescriptor<T>> {
    let (clusters, d) = check_dims(z, bank)?;
    let per_cluster = residuals(z, bank)?;
    let (l, _, _) = logits(z, bank);
    let theta = softmax(&l);

    let inv = T::one() / T::from_f64(clusters as f64);
    let mut cumulative = vec![T::zero(); d];
    for u in 0..clusters {
        let row = &per_cluster.data()[u * d..(u + 1) * d];
        for j in 0..d {
            cumulative[j] += theta[u] * row[j];
        }
    }
    for v in &mut cumulative {
        *v *= inv;
    }

    let norm = cumulative.iter().map(|&v| v * v).sum::<T>().sqrt();
    let degenerate = norm.to_f64() < DEGENERATE_NORM;
    let f = if degenerate {
        vec![T::zero(); d]
    } else {
        cumulative.iter().map(|&v| v / norm).collect()
    };

    let mut word = 0usize;
    for (u, &v) in l.iter().enumerate() {
        if v > l[word] {
            word = u;
        }
    }

    Ok(ResidualDescriptor {
        per_cluster,
        weights: Tensor::new(vec![clusters], theta)?,
        cumulative: Tensor::new(vec![d], cumulative)?,
        f: Tensor::new(vec![d], f)?,
        word,
        degenerate,
    })
}

/// Gradients of a scalar loss through the encoder given dL/df.
#[derive(Clone, Debug)]
pub struct ResidualBackward<T = f32> {
    pub grad_z: Tensor<T>,
    pub grad_centers: Tensor<T>,
    pub grad_log_smoothing: Tensor<T>,
}

/// Backward pass matching `cumulative_residual`. Degenerate descriptors are
/// locally constant (f ≡ 0), so everything gets zero gradient.
pub fn residual_backward<T: Real>(
    z: &Tensor<T>,
    bank: &ClusterBank<T>,
    grad_f: &Tensor<T>,
) -> Result<ResidualBackward<T>> {
    let (clusters, d) = check_dims(z, bank)?;
    if grad_f.shape() != [d] {
        return Err(Error::data("gradient shape does not match descriptor dim"));
    }

    let (l, dist_sq, smoothing) = logits(z, bank);
    let theta = softmax(&l);
    let inv = T::one() / T::from_f64(clusters as f64);

    let mut r = vec![T::zero(); d];
    for u in 0..clusters {
        let q = &bank.centers.data()[u * d..(u + 1) * d];
        for j in 0..d {
            r[j] += theta[u] * (z.data()[j] - q[j]);
        }
    }
    for v in &mut r {
        *v *= inv;
    }
    let norm = r.iter().map(|&v| v * v).sum::<T>().sqrt();

    if norm.to_f64() < DEGENERATE_NORM {
        return Ok(ResidualBackward {
            grad_z: Tensor::zeros(vec![d]),
            grad_centers: Tensor::zeros(vec![clusters, d]),
            grad_log_smoothing: Tensor::zeros(vec![clusters]),
        });
    }

    // f = r/‖r‖: dL/dr = (g − f·⟨f, g⟩)/‖r‖.
    let f: Vec<T> = r.iter().map(|&v| v / norm).collect();
    let fg = f.iter().zip(grad_f.data()).map(|(&a, &b)| a * b).sum::<T>();
    let grad_r: Vec<T> = f
        .iter()
        .zip(grad_f.data())
        .map(|(&fi, &gi)| (gi - fi * fg) / norm)
        .collect();

    // a_υ = ⟨dL/dr, z − q_υ⟩/Υ is the direct sensitivity of the loss to θ_υ.
    let mut a = vec![T::zero(); clusters];
    for u in 0..clusters {
        let q = &bank.centers.data()[u * d..(u + 1) * d];
        let mut acc = T::zero();
        for j in 0..d {
            acc += grad_r[j] * (z.data()[j] - q[j]);
        }
        a[u] = acc * inv;
    }
    let abar: T = theta.iter().zip(&a).map(|(&t, &av)| t * av).sum();
    // Softmax backward: dL/dl_υ = θ_υ (a_υ − Σ_μ θ_μ a_μ).
    let grad_l: Vec<T> = theta.iter().zip(&a).map(|(&t, &av)| t * (av - abar)).collect();

    let two = T::from_f64(2.0);
    let mut grad_z = vec![T::zero(); d];
    for j in 0..d {
        grad_z[j] = grad_r[j] * inv;
    }
    let mut grad_centers = vec![T::zero(); clusters * d];
    let mut grad_log_s = vec![T::zero(); clusters];
    for u in 0..clusters {
        let q = &bank.centers.data()[u * d..(u + 1) * d];
        let tw = theta[u] * inv;
        for j in 0..d {
            let resid = z.data()[j] - q[j];
            // l_υ = −s_υ‖z − q_υ‖²: dl/dz = −2s(z−q), dl/dq = +2s(z−q).
            grad_z[j] += grad_l[u] * (-two * smoothing[u] * resid);
            grad_centers[u * d + j] = -tw * grad_r[j] + grad_l[u] * two * smoothing[u] * resid;
        }
        grad_log_s[u] = -grad_l[u] * dist_sq[u] * smoothing[u];
    }

    Ok(ResidualBackward {
        grad_z: Tensor::new(vec![d], grad_z)?,
        grad_centers: Tensor::new(vec![clusters, d], grad_centers)?,
        grad_log_smoothing: Tensor::new(vec![clusters], grad_log_s)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::{finite_diff_check, DEFAULT_EPS};
    use crate::rng::substream;
    use rand::Rng;

    fn random_bank(clusters: usize, dim: usize, name: &str) -> ClusterBank<f64> {
        let mut rng = substream(61, name);
        let centers = Tensor::new(
            vec![clusters, dim],
            (0..clusters * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let log_s = Tensor::new(
            vec![clusters],
            (0..clusters).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        ClusterBank::from_parts(centers, log_s).unwrap()
    }

    fn random_z(dim: usize, name: &str) -> Tensor<f64> {
        let mut rng = substream(67, name);
        Tensor::new(vec![dim], (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn residuals_subtract_centers_exactly() {
        let bank = random_bank(4, 3, "res.bank");
        let z = random_z(3, "res.z");
        let r = residuals(&z, &bank).unwrap();
        for u in 0..4 {
            for j in 0..3 {
                let expect = z.data()[j] - bank.centers.data()[u * 3 + j];
                assert_eq!(r.data()[u * 3 + j], expect);
            }
        }
    }

    #[test]
    fn zero_centers_make_residuals_equal_z() {
        let bank = ClusterBank::from_parts(Tensor::zeros(vec![3, 4]), Tensor::zeros(vec![3])).unwrap();
        let z = random_z(4, "res.zero");
        let r = residuals(&z, &bank).unwrap();
        for u in 0..3 {
            assert_eq!(&r.data()[u * 4..(u + 1) * 4], z.data());
        }
    }

    #[test]
    fn single_center_at_z_gives_zero_row() {
        let z = random_z(5, "res.single");
        let bank = ClusterBank::from_parts(
            Tensor::new(vec![1, 5], z.data().to_vec()).unwrap(),
            Tensor::zeros(vec![1]),
        )
        .unwrap();
        let r = residuals(&z, &bank).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equidistant_centers_share_weight() {
        let bank = ClusterBank::from_parts(
            Tensor::new(vec![2, 2], vec![1.0f64, 0.0, -1.0, 0.0]).unwrap(),
            Tensor::zeros(vec![2]),
        )
        .unwrap();
        let z = Tensor::new(vec![2], vec![0.0f64, 0.5]).unwrap();
        let theta = affinity_weights(&z, &bank).unwrap();
        assert!((theta.data()[0] - 0.5).abs() < 1e-12);
        assert!((theta.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sharp_smoothing_on_the_matching_center_dominates() {
        let mut centers = vec![5.0f64; 4 * 3];
        centers[2 * 3..3 * 3].copy_from_slice(&[0.1, 0.2, 0.3]);
        let bank = ClusterBank::from_parts(
            Tensor::new(vec![4, 3], centers).unwrap(),
            Tensor::new(vec![4], vec![0.0, 0.0, 3.0, 0.0]).unwrap(),
        )
        .unwrap();
        let z = Tensor::new(vec![3], vec![0.1f64, 0.2, 0.3]).unwrap();
        let theta = affinity_weights(&z, &bank).unwrap();
        assert!(theta.data()[2] > 0.99, "theta {:?}", theta.data());
        assert_eq!(word_assign(&z, &bank).unwrap(), 2);
    }

    #[test]
    fn affinity_matches_direct_softmax_oracle() {
        let bank = random_bank(6, 4, "aff.bank");
        let z = random_z(4, "aff.z");
        let theta = affinity_weights(&z, &bank).unwrap();

        // Direct restatement: exponentiate the scaled negative distances and
        // normalize, without the max-shift trick.
        let mut raw = Vec::new();
        for u in 0..6 {
            let mut dist = 0.0f64;
            for j in 0..4 {
                dist += (z.data()[j] - bank.centers.data()[u * 4 + j]).powi(2);
            }
            raw.push((-bank.log_smoothing.data()[u].exp() * dist).exp());
        }
        let sum: f64 = raw.iter().sum();
        for u in 0..6 {
            assert!((theta.data()[u] - raw[u] / sum).abs() < 1e-6);
        }
    }

    #[test]
    fn weights_always_form_a_distribution() {
        for i in 0..20 {
            let bank = random_bank(8, 5, &format!("dist.bank.{i}"));
            let z = random_z(5, &format!("dist.z.{i}"));
            let theta = affinity_weights(&z, &bank).unwrap();
            let sum: f64 = theta.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(theta.data().iter().all(|&t| t > 0.0 && t < 1.0));
        }
    }

    #[test]
    fn symmetric_cancellation_is_degenerate() {
        let bank = ClusterBank::from_parts(
            Tensor::new(vec![2, 1], vec![0.0f64, 2.0]).unwrap(),
            Tensor::zeros(vec![2]),
        )
        .unwrap();
        let z = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let desc = cumulative_residual(&z, &bank).unwrap();
        assert!(desc.degenerate);
        assert_eq!(desc.f.data(), &[0.0]);
        assert!((desc.per_cluster.data()[0] - 1.0).abs() < 1e-12);
        assert!((desc.per_cluster.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_centers_reduce_to_scaled_residual() {
        let q = [0.3f64, -0.2, 0.7];
        let mut centers = Vec::new();
        for _ in 0..4 {
            centers.extend_from_slice(&q);
        }
        let bank = ClusterBank::from_parts(
            Tensor::new(vec![4, 3], centers).unwrap(),
            Tensor::new(vec![4], vec![0.3, -0.1, 0.8, 0.0]).unwrap(),
        )
        .unwrap();
        let z = random_z(3, "same.z");
        let desc = cumulative_residual(&z, &bank).unwrap();
        for j in 0..3 {
            let expect = (z.data()[j] - q[j]) / 4.0;
            assert!((desc.cumulative.data()[j] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn cumulative_matches_formula_oracle() {
        let bank = random_bank(5, 4, "cum.bank");
        let z = random_z(4, "cum.z");
        let desc = cumulative_residual(&z, &bank).unwrap();

        let theta = affinity_weights(&z, &bank).unwrap();
        let mut r = vec![0.0f64; 4];
        for u in 0..5 {
            for j in 0..4 {
                r[j] += theta.data()[u] * (z.data()[j] - bank.centers.data()[u * 4 + j]) / 5.0;
            }
        }
        let norm: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..4 {
            assert!((desc.cumulative.data()[j] - r[j]).abs() < 1e-6);
            assert!((desc.f.data()[j] - r[j] / norm).abs() < 1e-6);
        }
        let fnorm: f64 = desc.f.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((fnorm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let bank = random_bank(5, 4, "fd.bank");
        let z = random_z(4, "fd.z");
        let mut rng = substream(71, "fd.head");
        let head: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad_f = Tensor::new(vec![4], head.clone()).unwrap();
        let grads = residual_backward(&z, &bank, &grad_f).unwrap();

        let loss_z = |x: &Tensor<f64>| -> crate::Result<f64> {
            let desc = cumulative_residual(x, &bank)?;
            Ok(desc.f.data().iter().zip(&head).map(|(a, b)| a * b).sum())
        };
        let worst = finite_diff_check(loss_z, &z, &grads.grad_z, DEFAULT_EPS).unwrap();
        assert!(worst <= 1e-3, "grad_z worst {worst}");

        let loss_centers = |x: &Tensor<f64>| -> crate::Result<f64> {
            let b = ClusterBank::from_parts(x.clone(), bank.log_smoothing.clone())?;
            let desc = cumulative_residual(&z, &b)?;
            Ok(desc.f.data().iter().zip(&head).map(|(a, b)| a * b).sum())
        };
        let worst = finite_diff_check(loss_centers, &bank.centers, &grads.grad_centers, DEFAULT_EPS).unwrap();
        assert!(worst <= 1e-3, "grad_centers worst {worst}");

        let loss_log_s = |x: &Tensor<f64>| -> crate::Result<f64> {
            let b = ClusterBank::from_parts(bank.centers.clone(), x.clone())?;
            let desc = cumulative_residual(&z, &b)?;
            Ok(desc.f.data().iter().zip(&head).map(|(a, b)| a * b).sum())
        };
        let worst =
            finite_diff_check(loss_log_s, &bank.log_smoothing, &grads.grad_log_smoothing, DEFAULT_EPS).unwrap();
        assert!(worst <= 1e-3, "grad_log_smoothing worst {worst}");
    }

    #[test]
    fn degenerate_descriptor_gets_zero_gradients() {
        let bank = ClusterBank::from_parts(
            Tensor::new(vec![2, 1], vec![0.0f64, 2.0]).unwrap(),
            Tensor::zeros(vec![2]),
        )
        .unwrap();
        let z = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let grads = residual_backward(&z, &bank, &Tensor::new(vec![1], vec![0.7]).unwrap()).unwrap();
        assert!(grads.grad_z.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_centers.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_log_smoothing.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn word_assignment_equals_scaled_distance_argmin() {
        for i in 0..20 {
            let bank = random_bank(7, 3, &format!("word.bank.{i}"));
            let z = random_z(3, &format!("word.z.{i}"));
            let word = word_assign(&z, &bank).unwrap();

            let mut best = 0usize;
            let mut best_val = f64::INFINITY;
            for u in 0..7 {
                let mut dist = 0.0f64;
                for j in 0..3 {
                    dist += (z.data()[j] - bank.centers.data()[u * 3 + j]).powi(2);
                }
                let scaled = bank.log_smoothing.data()[u].exp() * dist;
                if scaled < best_val {
                    best_val = scaled;
                    best = u;
                }
            }
            assert_eq!(word, best, "case {i}");
        }
    }

    #[test]
    fn exact_tie_breaks_to_the_lowest_index() {
        let bank = ClusterBank::from_parts(
            Tensor::new(vec![3, 1], vec![-1.0f64, 1.0, 9.0]).unwrap(),
            Tensor::zeros(vec![3]),
        )
        .unwrap();
        let z = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        assert_eq!(word_assign(&z, &bank).unwrap(), 0);
    }

    #[test]
    fn init_bank_is_seed_deterministic_and_bounded() {
        let a = init_bank(64, 64, 5).unwrap();
        let b = init_bank(64, 64, 5).unwrap();
        let c = init_bank(64, 64, 6).unwrap();
        assert_eq!(a.centers.data(), b.centers.data());
        assert_ne!(a.centers.data(), c.centers.data());
        let bound = 1.0 / 8.0;
        assert!(a.centers.data().iter().all(|&v| v >= -bound && v < bound));
        assert!(a.log_smoothing.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let bank = random_bank(3, 4, "dim.bank");
        let z = random_z(5, "dim.z");
        assert!(residuals(&z, &bank).is_err());
        assert!(affinity_weights(&z, &bank).is_err());
        assert!(cumulative_residual(&z, &bank).is_err());
    }
}
