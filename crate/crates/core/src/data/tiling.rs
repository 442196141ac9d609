use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square crop window and the step between window origins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilingSpec {
    pub crop: usize,
    pub stride: usize,
}

impl TilingSpec {
    pub fn new(crop: usize, stride: usize) -> Result<Self> {
        let s = Self { crop, stride };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.stride == 0 {
            return Err(Error::Config("crop and stride must be positive".into()));
        }
        if self.stride > self.crop {
            log::warn!("stride {} exceeds crop {}; pixels between tiles are skipped", self.stride, self.crop);
        }
        Ok(())
    }

    /// Window positions along one axis of length `len`.
    pub fn count_along(&self, len: usize) -> usize {
        if len < self.crop {
            0
        } else {
            (len - self.crop) / self.stride + 1
        }
    }
}

/// Origins `(row, col)` of every window that fits inside the image, in
/// row-major order. Windows that would overrun an edge are dropped.
pub fn tile_image(height: usize, width: usize, spec: &TilingSpec) -> Result<Vec<(usize, usize)>> {
    tile_named("image", height, width, spec)
}

pub(crate) fn tile_named(name: &str, height: usize, width: usize, spec: &TilingSpec) -> Result<Vec<(usize, usize)>> {
    spec.validate()?;
    for (dimension, size) in [("height", height), ("width", width)] {
        if size < spec.crop {
            return Err(Error::TooSmall {
                image: name.to_string(),
                dimension,
                size,
                crop: spec.crop,
            });
        }
    }
    let rows = spec.count_along(height);
    let cols = spec.count_along(width);
    Ok((0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r * spec.stride, c * spec.stride)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(tile_image(6000, 6000, &TilingSpec::new(512, 512).unwrap()).unwrap().len(), 121);
        assert_eq!(tile_image(512, 512, &TilingSpec::new(512, 512).unwrap()).unwrap(), vec![(0, 0)]);
        assert_eq!(
            tile_image(1024, 512, &TilingSpec::new(512, 256).unwrap()).unwrap(),
            vec![(0, 0), (256, 0), (512, 0)]
        );
    }

    #[test]
    fn too_small_names_dimension() {
        let err = tile_image(600, 300, &TilingSpec::new(512, 512).unwrap()).unwrap_err();
        assert!(matches!(err, Error::TooSmall { dimension: "width", size: 300, .. }));
    }

    fn brute_force(h: usize, w: usize, crop: usize, stride: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut r = 0;
        while r + crop <= h {
            let mut c = 0;
            while c + crop <= w {
                out.push((r, c));
                c += stride;
            }
            r += stride;
        }
        out
    }

    proptest! {
        #[test]
        fn matches_window_enumeration(crop in 1usize..64, stride in 1usize..80, dh in 0usize..200, dw in 0usize..200) {
            let (h, w) = (crop + dh, crop + dw);
            let spec = TilingSpec { crop, stride };
            prop_assert_eq!(tile_image(h, w, &spec).unwrap(), brute_force(h, w, crop, stride));
        }
    }
}
