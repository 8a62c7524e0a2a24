use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Image;
use crate::error::{Error, Result};
use crate::nn::Conv2d;

/// Smallest image set accepted by [`frechet_proxy`].
pub const MIN_FRECHET_SET: usize = 64;
/// Eigenvalues below this are treated as zero in matrix square roots.
pub const SQRT_EPS: f64 = 1e-6;
pub const FEATURE_DIM: usize = 128;

/// Untrained convolutional features: three stride-2 3x3 conv + ReLU stages
/// (32, 64, 128 channels) and global average pooling. Weights depend only on
/// the seed.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub seed: u64,
    stages: Vec<Conv2d<f32>>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut c_in = 3;
        for c_out in [32, 64, FEATURE_DIM] {
            let mut conv = Conv2d::new(c_in, c_out, 3, 2, 1, &mut rng);
            // He-style gain so activations keep their scale through the ReLUs
            conv.weight.value.iter_mut().for_each(|w| *w *= 6f32.sqrt());
            stages.push(conv);
            c_in = c_out;
        }
        Self { seed, stages }
    }

    /// One `FEATURE_DIM` vector per image.
    pub fn features(&self, images: &[Image]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut x = Image::batch(&chunk.iter().collect::<Vec<_>>());
            for conv in &self.stages {
                x = conv.forward(&x).map(|v| v.max(0.0));
            }
            let (n, c, h, w) = x.dims4();
            for i in 0..n {
                let item = x.item(i);
                out.push(
                    (0..c)
                        .map(|ch| item[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64)
                        .collect(),
                );
            }
        }
        out
    }
}

fn moments(features: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len();
    let d = features[0].len();
    let mut mu = DVector::zeros(d);
    for f in features {
        mu += DVector::from_column_slice(f);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1).max(1) as f64;
    (mu, cov)
}

/// Square root of a symmetric positive semi-definite matrix.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| if l < SQRT_EPS { 0.0 } else { l.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between `N(mu1, cov1)` and `N(mu2, cov2)`:
/// `|mu1 - mu2|^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2))`.
pub fn frechet_gaussian(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> f64 {
    let s1 = sqrt_psd(cov1);
    // tr((cov1 cov2)^(1/2)) = tr((s1 cov2 s1)^(1/2)), and the latter is symmetric.
    // Its eigenvalues are squared-scale, so only rounding negatives are clipped.
    let inner = &s1 * cov2 * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    let dmu = mu1 - mu2;
    (dmu.dot(&dmu) + cov1.trace() + cov2.trace() - 2.0 * tr_sqrt).max(0.0)
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Eval("Fréchet distance needs at least two samples per set".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|f| f.len() != d) {
        return Err(Error::ShapeMismatch("feature vectors differ in length".into()));
    }
    if a.iter().chain(b).flatten().any(|v| !v.is_finite()) {
        return Err(Error::Eval("non-finite features".into()));
    }
    let (mu1, cov1) = moments(a);
    let (mu2, cov2) = moments(b);
    Ok(frechet_gaussian(&mu1, &cov1, &mu2, &cov2))
}

/// Fréchet distance on extractor features of two image sets of at least
/// [`MIN_FRECHET_SET`] images each.
pub fn frechet_proxy(generated: &[Image], reference: &[Image], extractor: &FeatureExtractor) -> Result<f64> {
    if generated.len() < MIN_FRECHET_SET || reference.len() < MIN_FRECHET_SET {
        return Err(Error::Eval(format!(
            "Fréchet proxy needs at least {MIN_FRECHET_SET} images per set, got {} and {}",
            generated.len(),
            reference.len()
        )));
    }
    frechet_distance(&extractor.features(generated), &extractor.features(reference))
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::corpus::{render_scene, SceneSpec};

    #[test]
    fn one_dimensional_closed_form() {
        let d = frechet_gaussian(
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_element(1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
        );
        assert!((d - 1.0).abs() < 1e-12, "{d}");
        // variances 1 and 4: (1 - 2)^2
        let d = frechet_gaussian(
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 4.0),
        );
        assert!((d - 1.0).abs() < 1e-12, "{d}");
    }

    #[test]
    fn identical_image_sets_are_at_distance_zero() {
        let images: Vec<Image> = (0..80).map(|s| render_scene(&SceneSpec::random(s, 32)).unwrap()).collect();
        let ex = FeatureExtractor::new(11);
        let d = frechet_proxy(&images, &images, &ex).unwrap();
        assert!(d.abs() < 1e-6, "{d}");
        assert!(frechet_proxy(&images[..10], &images, &ex).is_err());
        let other: Vec<Image> = (100..180).map(|s| render_scene(&SceneSpec::random(s, 32)).unwrap()).collect();
        assert!(frechet_proxy(&images, &other, &ex).unwrap() > 0.0);
    }

    #[test]
    fn same_distribution_is_much_closer_than_a_one_sigma_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 4;
        let mut draw = |shift: f64| -> Vec<Vec<f64>> {
            (0..10_000)
                .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect())
                .collect()
        };
        let a = draw(0.0);
        let b = draw(0.0);
        let c = draw(1.0);
        let same = frechet_distance(&a, &b).unwrap();
        let shifted = frechet_distance(&a, &c).unwrap();
        assert!(same < 0.05 * shifted, "{same} vs {shifted}");
        assert!((shifted - d as f64).abs() < 0.2, "{shifted}");
    }

    #[test]
    fn extractor_is_fixed_by_its_seed() {
        let images: Vec<Image> = (0..3).map(|s| render_scene(&SceneSpec::random(s, 32)).unwrap()).collect();
        let a = FeatureExtractor::new(1).features(&images);
        assert_eq!(a, FeatureExtractor::new(1).features(&images));
        assert_ne!(a, FeatureExtractor::new(2).features(&images));
        assert_eq!(a[0].len(), FEATURE_DIM);
        assert!(a.iter().flatten().any(|&v| v > 0.0));
    }
}
