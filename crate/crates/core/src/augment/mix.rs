use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{DomainSample, Image, LabelMap, IGNORE_LABEL};

/// Cross-domain mix: pixels of the selected source classes pasted onto a
/// target image.
#[derive(Clone, Debug, PartialEq)]
pub struct MixResult<T> {
    pub image: Image<T>,
    pub label: LabelMap,
    /// `true` where the pixel was taken from the source.
    pub mask: Vec<bool>,
    /// Source classes that were pasted.
    pub classes: Vec<u8>,
}

impl<T> MixResult<T> {
    pub fn source_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
        }
    }
}

/// Picks `ceil(k / 2)` of the `k` valid classes present in `label`.
pub fn select_mix_classes<R: Rng>(label: &LabelMap, rng: &mut R) -> Vec<u8> {
    let present: Vec<u8> = label.classes_present().into_iter().filter(|&c| c != IGNORE_LABEL).collect();
    let take = present.len().div_ceil(2);
    let mut chosen: Vec<u8> = present.choose_multiple(rng, take).copied().collect();
    chosen.sort_unstable();
    chosen
}

/// Mixes with an explicit class selection.
pub fn class_mix_with<T: Scalar>(
    source_image: &Image<T>,
    source_label: &LabelMap,
    target_image: &Image<T>,
    target_pseudo: &LabelMap,
    classes: &[u8],
) -> Result<MixResult<T>> {
    let (h, w) = (source_image.height, source_image.width);
    if !source_image.same_shape(target_image)
        || (source_label.height, source_label.width) != (h, w)
        || (target_pseudo.height, target_pseudo.width) != (h, w)
    {
        return Err(Error::Shape("class mix inputs differ in shape".into()));
    }
    let mut selected = [false; 256];
    for &c in classes {
        selected[c as usize] = true;
    }
    let mask: Vec<bool> = source_label.data.iter().map(|&l| l != IGNORE_LABEL && selected[l as usize]).collect();
    let hw = h * w;
    let mut image = target_image.clone();
    for c in 0..image.channels {
        let src = source_image.plane(c);
        for (j, v) in image.plane_mut(c).iter_mut().enumerate() {
            if mask[j] {
                *v = src[j];
            }
        }
    }
    let data = (0..hw)
        .map(|j| if mask[j] { source_label.data[j] } else { target_pseudo.data[j] })
        .collect();
    Ok(MixResult {
        image,
        label: LabelMap::new(h, w, data)?,
        mask,
        classes: classes.to_vec(),
    })
}

/// Class mix with a random selection of half the source classes.
pub fn class_mix<T: Scalar, R: Rng>(
    source: &DomainSample<T>,
    target_image: &Image<T>,
    target_pseudo: &LabelMap,
    rng: &mut R,
) -> Result<MixResult<T>> {
    let label = source.label.as_ref().ok_or_else(|| Error::Unlabeled(source.id.clone()))?;
    let classes = select_mix_classes(label, rng);
    class_mix_with(&source.image, label, target_image, target_pseudo, &classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::DomainTag;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, h: usize, w: usize) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(3, h, w, (0..3 * h * w).map(|_| rng.gen()).collect()).unwrap()
    }

    fn labels(seed: u64, h: usize, w: usize, k: u8) -> LabelMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..k)).collect()).unwrap()
    }

    fn sample(img: Image<f64>, label: LabelMap) -> DomainSample<f64> {
        DomainSample::new("s", DomainTag::Source, img, Some(label)).unwrap()
    }

    #[test]
    fn single_class_source_takes_everything() {
        let src = sample(image(0, 4, 4), LabelMap::filled(4, 4, 2));
        let tgt = image(1, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = class_mix(&src, &tgt, &labels(2, 4, 4, 3), &mut rng).unwrap();
        assert!(m.mask.iter().all(|&b| b));
        assert_eq!(m.image, src.image);
        assert_eq!(&m.label, src.label.as_ref().unwrap());
    }

    #[test]
    fn all_ignore_source_returns_target() {
        let src = sample(image(0, 3, 3), LabelMap::filled(3, 3, IGNORE_LABEL));
        let tgt = image(1, 3, 3);
        let pseudo = labels(2, 3, 3, 2);
        let m = class_mix(&src, &tgt, &pseudo, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(m.mask.iter().all(|&b| !b));
        assert_eq!(m.image, tgt);
        assert_eq!(m.label, pseudo);
    }

    #[test]
    fn four_classes_select_two_and_mask_matches() {
        let l = labels(3, 8, 8, 4);
        assert_eq!(l.classes_present(), vec![0, 1, 2, 3]);
        let src = sample(image(4, 8, 8), l.clone());
        let m = class_mix(&src, &image(5, 8, 8), &labels(6, 8, 8, 4), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(m.classes.len(), 2);
        for j in 0..64 {
            assert_eq!(m.mask[j], m.classes.contains(&l.data[j]));
        }
    }

    proptest! {
        #[test]
        fn mixing_identity(seed in 0u64..500, k in 1u8..6) {
            let (h, w) = (5, 6);
            let src = sample(image(seed, h, w), labels(seed + 1, h, w, k));
            let tgt = image(seed + 2, h, w);
            let pseudo = labels(seed + 3, h, w, k);
            let m = class_mix(&src, &tgt, &pseudo, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let sl = src.label.as_ref().unwrap();
            for j in 0..h * w {
                prop_assert_eq!(m.mask[j], m.classes.contains(&sl.data[j]));
                for c in 0..3 {
                    let want = if m.mask[j] { src.image.plane(c)[j] } else { tgt.plane(c)[j] };
                    prop_assert_eq!(m.image.plane(c)[j], want);
                }
                let want = if m.mask[j] { sl.data[j] } else { pseudo.data[j] };
                prop_assert_eq!(m.label.data[j], want);
            }
        }
    }
}
