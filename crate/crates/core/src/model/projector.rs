//! The trainable connector: one hidden layer, ReLU, regression layer.
//! Maps downsampled audio features into the LM input embedding space.

use crate::error::{Error, Result};
use crate::features::DownsampledFeatures;
use crate::rng::substream;
use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};

/// Projector outputs: one row per speech token, in LM embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechTokenEmbeddings {
    pub embeddings: Array2<f64>,
}

impl SpeechTokenEmbeddings {
    pub fn n_tokens(&self) -> usize {
        self.embeddings.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    /// `d_z x h`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `h x d_llm`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// Set by the training pipeline; analysis refuses untrained projectors.
    pub trained: bool,
}

impl Projector {
    pub fn init(d_z: usize, hidden: usize, d_llm: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "projector-init");
        let n1 = Normal::new(0.0, (2.0 / d_z as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).unwrap();
        Self {
            w1: Array2::from_shape_fn((d_z, hidden), |_| n1.sample(&mut rng)),
            b1: Array1::zeros(hidden),
            w2: Array2::from_shape_fn((hidden, d_llm), |_| n2.sample(&mut rng)),
            b2: Array1::zeros(d_llm),
            trained: false,
        }
    }

    pub fn d_z(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn d_llm(&self) -> usize {
        self.w2.ncols()
    }

    pub fn block_names() -> Vec<String> {
        ["w1", "b1", "w2", "b2"].map(String::from).to_vec()
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }
}

fn check_width(p: &Projector, z: &Array2<f64>) -> Result<()> {
    if z.ncols() != p.d_z() {
        return Err(Error::ShapeMismatch(format!(
            "feature width {} != projector d_z {}",
            z.ncols(),
            p.d_z()
        )));
    }
    Ok(())
}

/// Row-wise `E_i = W2 . relu(W1 . Z_i + b1) + b2`.
pub fn projector_forward(p: &Projector, z: &DownsampledFeatures) -> Result<SpeechTokenEmbeddings> {
    let (e, _) = projector_forward_cached(p, &z.features)?;
    Ok(e)
}

/// Hidden pre-activations, kept for the backward pass.
pub struct ProjectorCache {
    pub h_pre: Array2<f64>,
}

pub fn projector_forward_cached(
    p: &Projector,
    z: &Array2<f64>,
) -> Result<(SpeechTokenEmbeddings, ProjectorCache)> {
    check_width(p, z)?;
    let h_pre = z.dot(&p.w1) + &p.b1;
    let h = h_pre.mapv(|v| v.max(0.0));
    let e = h.dot(&p.w2) + &p.b2;
    Ok((
        SpeechTokenEmbeddings { embeddings: e },
        ProjectorCache { h_pre },
    ))
}

pub struct ProjectorGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ProjectorGrads {
    pub fn zeros(p: &Projector) -> Self {
        Self {
            w1: Array2::zeros(p.w1.dim()),
            b1: Array1::zeros(p.b1.len()),
            w2: Array2::zeros(p.w2.dim()),
            b2: Array1::zeros(p.b2.len()),
        }
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }

    pub fn accumulate(&mut self, other: &ProjectorGrads) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }

    pub fn scale(&mut self, f: f64) {
        self.w1 *= f;
        self.b1 *= f;
        self.w2 *= f;
        self.b2 *= f;
    }
}

/// Backprop from dL/dE to the projector parameters.
pub fn projector_backward(
    p: &Projector,
    z: &Array2<f64>,
    cache: &ProjectorCache,
    d_e: &Array2<f64>,
) -> Result<ProjectorGrads> {
    check_width(p, z)?;
    let h = cache.h_pre.mapv(|v| v.max(0.0));
    let w2_g = h.t().dot(d_e);
    let b2_g = d_e.sum_axis(ndarray::Axis(0));
    let mut dh = d_e.dot(&p.w2.t());
    ndarray::Zip::from(&mut dh).and(&cache.h_pre).for_each(|g, &pre| {
        if pre <= 0.0 {
            *g = 0.0;
        }
    });
    let w1_g = z.t().dot(&dh);
    let b1_g = dh.sum_axis(ndarray::Axis(0));
    Ok(ProjectorGrads {
        w1: w1_g,
        b1: b1_g,
        w2: w2_g,
        b2: b2_g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn z_of(m: Array2<f64>, k: usize) -> DownsampledFeatures {
        DownsampledFeatures {
            features: m,
            k,
            token_rate: 10.0,
        }
    }

    #[test]
    fn all_zero_parameters_give_zero_output() {
        let p = Projector {
            w1: Array2::zeros((3, 4)),
            b1: Array1::zeros(4),
            w2: Array2::zeros((4, 2)),
            b2: Array1::zeros(2),
            trained: false,
        };
        let z = z_of(arr2(&[[1.0, -2.0, 3.0]]), 1);
        let e = projector_forward(&p, &z).unwrap();
        assert_eq!(e.embeddings, Array2::zeros((1, 2)));
    }

    #[test]
    fn hand_evaluated_scalar_case() {
        let p = Projector {
            w1: arr2(&[[2.0]]),
            b1: ndarray::arr1(&[-1.0]),
            w2: arr2(&[[3.0]]),
            b2: ndarray::arr1(&[0.0]),
            trained: false,
        };
        let z = z_of(arr2(&[[1.0]]), 1);
        let e = projector_forward(&p, &z).unwrap();
        assert_eq!(e.embeddings[[0, 0]], 3.0);
    }

    #[test]
    fn zero_bias_positive_homogeneity() {
        let mut p = Projector::init(4, 8, 3, 5);
        p.b1.fill(0.0);
        p.b2.fill(0.0);
        let z = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - 1.0) * (j as f64 + 0.5));
        let alpha = 2.5;
        let e1 = projector_forward(&p, &z_of(z.clone(), 1)).unwrap();
        let e2 = projector_forward(&p, &z_of(z.mapv(|v| v * alpha), 1)).unwrap();
        for (a, b) in e1.embeddings.iter().zip(e2.embeddings.iter()) {
            assert!((a * alpha - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_row_per_input_row() {
        let p = Projector::init(4, 8, 3, 5);
        let z = Array2::zeros((7, 4));
        let e = projector_forward(&p, &z_of(z, 1)).unwrap();
        assert_eq!(e.n_tokens(), 7);
    }

    #[test]
    fn width_mismatch_rejected() {
        let p = Projector::init(4, 8, 3, 5);
        let z = Array2::zeros((2, 5));
        assert!(projector_forward(&p, &z_of(z, 1)).is_err());
    }
}
