//! Light multi-scale feature extractor built from atrous convolution banks.
//!
//! Level 0 applies a stride-1 3×3 stem to the (padded) image; every further
//! level applies a stride-2 3×3 stem to the previous level. Each stem output
//! passes through ReLU and then three parallel 3×3 convolutions with
//! dilations 1, 2 and 4 whose sum is rectified again.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{conv2d, pad_to_multiple, relu, ConvSpec, ConvWeights, FeatureMap};

pub const MIN_INPUT_SIDE: usize = 64;
pub const PAD_MULTIPLE: usize = 16;
pub const DILATIONS: [usize; 3] = [1, 2, 4];
pub const DEFAULT_CHANNELS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct LevelWeights {
    pub stem: ConvWeights,
    pub atrous: [ConvWeights; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub levels: Vec<LevelWeights>,
}

impl BackboneParams {
    pub fn from_store(store: &ParamStore, modality: &str, scales: usize) -> Result<Self> {
        let levels = (0..scales)
            .map(|s| {
                let stem = store.conv(&format!("backbone.{modality}.stem.{s}"))?;
                let atrous = DILATIONS.map(|d| store.conv(&format!("backbone.{modality}.atrous{d}.{s}")));
                let [a, b, c] = atrous;
                Ok(LevelWeights {
                    stem,
                    atrous: [a?, b?, c?],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }

    pub fn insert_into(&self, store: &mut ParamStore, modality: &str) -> Result<()> {
        for (s, level) in self.levels.iter().enumerate() {
            store.insert_conv(&format!("backbone.{modality}.stem.{s}"), level.stem.clone())?;
            for (d, w) in DILATIONS.iter().zip(&level.atrous) {
                store.insert_conv(&format!("backbone.{modality}.atrous{d}.{s}"), w.clone())?;
            }
        }
        Ok(())
    }
}

/// Feature maps at successive halvings of the padded input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidFeatures {
    pub levels: Vec<FeatureMap>,
}

impl PyramidFeatures {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Input dimensions after padding up to a multiple of 16.
pub fn padded_dims(height: usize, width: usize) -> (usize, usize) {
    (height.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE, width.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE)
}

pub fn check_input_size(height: usize, width: usize) -> Result<()> {
    if height < MIN_INPUT_SIDE || width < MIN_INPUT_SIDE {
        return Err(Error::InvalidArgument(format!(
            "input is {height}x{width}; at least {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE} is required"
        )));
    }
    Ok(())
}

pub fn extract_features(image: &FeatureMap, params: &BackboneParams) -> Result<PyramidFeatures> {
    check_input_size(image.height(), image.width())?;
    let padded = pad_to_multiple(image, PAD_MULTIPLE);
    let mut levels = Vec::with_capacity(params.levels.len());
    let mut prev = padded;
    for (s, level) in params.levels.iter().enumerate() {
        let stride = if s == 0 { 1 } else { 2 };
        let stem = conv2d(&prev, &level.stem, ConvSpec::default().with_stride(stride))?.map(relu);
        let mut sum: Option<FeatureMap> = None;
        for (d, w) in DILATIONS.iter().zip(&level.atrous) {
            let branch = conv2d(&stem, w, ConvSpec::default().with_dilation(*d))?;
            sum = Some(match sum {
                None => branch,
                Some(acc) => acc.add(&branch)?,
            });
        }
        let out = sum.expect("three dilation branches").map(relu).with_scale(s);
        prev = out.clone();
        levels.push(out);
    }
    Ok(PyramidFeatures { levels })
}

/// ITU-R BT.601 luma of a three-channel image.
pub fn luma(image: &FeatureMap) -> Result<FeatureMap> {
    if image.channels() != 3 {
        return Err(Error::shape("luma", "3 channels", image.channels()));
    }
    let data = image
        .data()
        .chunks_exact(3)
        .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
        .collect();
    Ok(FeatureMap::new(image.height(), image.width(), 1, data)?.with_scale(image.scale_index()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64Star;

    fn passthrough(cin: usize, cout: usize) -> ConvWeights {
        let mut w = ConvWeights::zeros(3, 3, cin, cout);
        for c in 0..cin.min(cout) {
            let i = w.index(1, 1, c, c);
            w.weights[i] = 1.0;
        }
        w
    }

    fn identity_params(scales: usize) -> BackboneParams {
        BackboneParams {
            levels: (0..scales)
                .map(|_| LevelWeights {
                    stem: passthrough(1, 1),
                    atrous: [passthrough(1, 1), ConvWeights::zeros(3, 3, 1, 1), ConvWeights::zeros(3, 3, 1, 1)],
                })
                .collect(),
        }
    }

    fn random_conv(cin: usize, cout: usize, rng: &mut XorShift64Star) -> ConvWeights {
        let w = (0..9 * cin * cout).map(|_| rng.uniform(-0.3, 0.3) as f32).collect();
        let b = (0..cout).map(|_| rng.uniform(-0.1, 0.1) as f32).collect();
        ConvWeights::new(3, 3, cin, cout, w, b).unwrap()
    }

    fn random_params(cin: usize, c: usize, scales: usize, seed: u64) -> BackboneParams {
        let mut rng = XorShift64Star::new(seed);
        BackboneParams {
            levels: (0..scales)
                .map(|s| LevelWeights {
                    stem: random_conv(if s == 0 { cin } else { c }, c, &mut rng),
                    atrous: [random_conv(c, c, &mut rng), random_conv(c, c, &mut rng), random_conv(c, c, &mut rng)],
                })
                .collect(),
        }
    }

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = XorShift64Star::new(seed);
        FeatureMap::from_fn(h, w, c, |_, _, _| rng.next_f64() as f32)
    }

    #[test]
    fn identity_weights_keep_a_constant_image() {
        let img = FeatureMap::filled(64, 80, 1, 0.4);
        let pyr = extract_features(&img, &identity_params(4)).unwrap();
        assert_eq!(pyr.len(), 4);
        for (s, level) in pyr.levels.iter().enumerate() {
            assert_eq!((level.height(), level.width()), (64 >> s, 80 >> s));
            assert!(level.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        }
    }

    #[test]
    fn zero_weights_give_zero_pyramid() {
        let zero = BackboneParams {
            levels: (0..4)
                .map(|s| LevelWeights {
                    stem: ConvWeights::zeros(3, 3, if s == 0 { 3 } else { 4 }, 4),
                    atrous: [ConvWeights::zeros(3, 3, 4, 4), ConvWeights::zeros(3, 3, 4, 4), ConvWeights::zeros(3, 3, 4, 4)],
                })
                .collect(),
        };
        let pyr = extract_features(&random_image(64, 64, 3, 1), &zero).unwrap();
        assert!(pyr.levels.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn dims_halve_after_padding() {
        let pyr = extract_features(&random_image(70, 100, 1, 2), &random_params(1, 3, 4, 3)).unwrap();
        let (ph, pw) = padded_dims(70, 100);
        assert_eq!((ph, pw), (80, 112));
        for (s, l) in pyr.levels.iter().enumerate() {
            assert_eq!((l.height(), l.width(), l.scale_index()), (ph >> s, pw >> s, s));
        }
    }

    #[test]
    fn rejects_small_inputs() {
        assert!(extract_features(&random_image(63, 64, 1, 4), &random_params(1, 2, 4, 5)).is_err());
    }

    #[test]
    fn level_zero_is_translation_covariant() {
        let params = random_params(1, 4, 1, 6);
        let base = random_image(64, 64, 1, 7);
        let shifted = FeatureMap::from_fn(64, 64, 1, |y, x, c| base.get(y, x.saturating_sub(2), c));
        let a = &extract_features(&base, &params).unwrap().levels[0];
        let b = &extract_features(&shifted, &params).unwrap().levels[0];
        for y in 8..56 {
            for x in 10..56 {
                for c in 0..4 {
                    assert!((b.get(y, x, c) - a.get(y, x - 2, c)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn luma_examples() {
        let img = FeatureMap::new(1, 3, 3, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.25, 0.25, 0.25]).unwrap();
        let l = luma(&img).unwrap();
        assert!((l.data()[0] - 1.0).abs() < 1e-6);
        assert!((l.data()[1] - 0.299).abs() < 1e-7);
        assert!((l.data()[2] - 0.25).abs() < 1e-7);
        assert!(luma(&FeatureMap::zeros(2, 2, 1)).is_err());
    }
}
