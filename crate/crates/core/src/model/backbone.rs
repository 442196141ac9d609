//! Feature-pyramid encoders and the name registry the trainer resolves them
//! through.
//!
//! A new architecture plugs in by implementing [`Backbone`] and adding a match
//! arm to [`backbone_by_name`]. The decode head only needs the four stage
//! widths, and the stage outputs must sit at strides 4, 8, 16 and 32.

use std::fmt::Debug;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::params::{Bound, Init, ParamStore, Session};

pub trait Backbone<T: Scalar>: Debug + Send + Sync {
    fn name(&self) -> &str;

    /// Output channels of the four stages.
    fn widths(&self) -> [usize; 4];

    /// Adds parameters (under `backbone.`) and buffers for this encoder.
    fn init(&self, init: &mut Init<'_>, params: &mut ParamStore<T>, buffers: &mut ParamStore<T>);

    /// Features at strides 4, 8, 16, 32.
    fn forward(&self, s: &mut Session<T>, b: &Bound, buffers: &ParamStore<T>, x: Var) -> Result<[Var; 4]>;
}

/// Resolves an encoder by registry name.
pub fn backbone_by_name<T: Scalar>(name: &str, in_channels: usize, widths: [usize; 4]) -> Result<Box<dyn Backbone<T>>> {
    match name {
        "tiny" => Ok(Box::new(TinyBackbone::new(in_channels, widths)?)),
        n if n.starts_with("mit-b") => Err(Error::Unsupported(format!(
            "backbone {n} is reserved but not built into this crate"
        ))),
        n => Err(Error::Config(format!("unknown backbone {n:?}"))),
    }
}

/// Four convolutional stages. Each stage is a strided patch embedding
/// followed by channel normalization and a residual depthwise/pointwise
/// block.
#[derive(Clone, Debug)]
pub struct TinyBackbone {
    in_channels: usize,
    widths: [usize; 4],
}

impl TinyBackbone {
    pub fn new(in_channels: usize, widths: [usize; 4]) -> Result<Self> {
        if in_channels == 0 || widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        Ok(Self { in_channels, widths })
    }

    fn kernel(stage: usize) -> (usize, usize, usize) {
        // (kernel, stride, pad)
        if stage == 0 {
            (4, 4, 0)
        } else {
            (3, 2, 1)
        }
    }
}

impl<T: Scalar> Backbone<T> for TinyBackbone {
    fn name(&self) -> &str {
        "tiny"
    }

    fn widths(&self) -> [usize; 4] {
        self.widths
    }

    fn init(&self, init: &mut Init<'_>, params: &mut ParamStore<T>, _buffers: &mut ParamStore<T>) {
        let mut cin = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            let (k, _, _) = Self::kernel(i);
            let p = format!("backbone.stage{}", i + 1);
            init.conv(params, &format!("{p}.embed"), w, cin, k, true);
            Init::norm(params, &format!("{p}.norm"), w);
            init.depthwise(params, &format!("{p}.dw"), w, 3);
            init.conv(params, &format!("{p}.pw"), w, w, 1, true);
            cin = w;
        }
    }

    fn forward(&self, s: &mut Session<T>, b: &Bound, _buffers: &ParamStore<T>, x: Var) -> Result<[Var; 4]> {
        let mut h = x;
        let mut out = [x; 4];
        for (i, slot) in out.iter_mut().enumerate() {
            let (_, stride, pad) = Self::kernel(i);
            let p = format!("backbone.stage{}", i + 1);
            h = s.conv(b, &format!("{p}.embed"), h, stride, pad, true)?;
            h = s.channel_norm(b, &format!("{p}.norm"), h)?;
            let r = s.depthwise(b, &format!("{p}.dw"), h, 1)?;
            let r = s.graph.relu(r);
            let r = s.conv(b, &format!("{p}.pw"), r, 1, 0, true)?;
            h = s.graph.add(h, r)?;
            *slot = h;
        }
        Ok(out)
    }
}
