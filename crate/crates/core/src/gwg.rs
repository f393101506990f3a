//! Global window generation.
//!
//! A stack of convolutional halving blocks turns a stage's feature map into a
//! single window-sized map carrying image-wide context. Each block is
//!
//! ```text
//! x1  = conv3x3_b(gelu(conv3x3_a(conv1x1_a(f))))       C -> C/2
//! cat = concat(x1, conv1x1_b(f))                        C/2 + C/2 = C
//! out = avg_pool_2x2(conv1x1_c(cat) + f)                C
//! ```

use crate::error::{dim_err, Error, Result};
use crate::tensor::{avg_pool_2x2, concat_last, conv2d, gelu, ParamInit, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GwgBlockWeights {
    pub conv1x1_a: Tensor,
    pub conv3x3_a: Tensor,
    pub conv3x3_b: Tensor,
    pub conv1x1_b: Tensor,
    pub conv1x1_c: Tensor,
}

impl GwgBlockWeights {
    pub fn init(channels: usize, init: &mut ParamInit) -> Self {
        let half = channels / 2;
        Self {
            conv1x1_a: init.kernel(1, 1, channels, half),
            conv3x3_a: init.kernel(3, 3, half, half),
            conv3x3_b: init.kernel(3, 3, half, half),
            conv1x1_b: init.kernel(1, 1, channels, half),
            conv1x1_c: init.kernel(1, 1, channels, channels),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        let half = channels / 2;
        Self {
            conv1x1_a: Tensor::zeros(&[1, 1, channels, half]),
            conv3x3_a: Tensor::zeros(&[3, 3, half, half]),
            conv3x3_b: Tensor::zeros(&[3, 3, half, half]),
            conv1x1_b: Tensor::zeros(&[1, 1, channels, half]),
            conv1x1_c: Tensor::zeros(&[1, 1, channels, channels]),
        }
    }

    fn check(&self, c: usize) -> Result<()> {
        let half = c / 2;
        let expected: [(&Tensor, [usize; 4], &str); 5] = [
            (&self.conv1x1_a, [1, 1, c, half], "conv1x1_a"),
            (&self.conv3x3_a, [3, 3, half, half], "conv3x3_a"),
            (&self.conv3x3_b, [3, 3, half, half], "conv3x3_b"),
            (&self.conv1x1_b, [1, 1, c, half], "conv1x1_b"),
            (&self.conv1x1_c, [1, 1, c, c], "conv1x1_c"),
        ];
        for (t, shape, name) in expected {
            if t.shape() != shape {
                return dim_err(format!(
                    "gwg {name}: kernel {:?} does not fit {c} channels (want {shape:?})",
                    t.shape()
                ));
            }
        }
        Ok(())
    }
}

/// One halving block: H×W×C → (H/2)×(W/2)×C.
pub fn gwg_block(f: &Tensor, w: &GwgBlockWeights) -> Result<Tensor> {
    f.expect_rank(3, "gwg_block")?;
    let (h, wd, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    if h % 2 != 0 || wd % 2 != 0 || c % 2 != 0 {
        return dim_err(format!(
            "gwg_block: input {h}×{wd}×{c} needs even extents and channels"
        ));
    }
    w.check(c)?;
    let reduced = conv2d(f, &w.conv1x1_a, 1, 0)?;
    let x1 = conv2d(
        &gelu(&conv2d(&reduced, &w.conv3x3_a, 1, 1)?),
        &w.conv3x3_b,
        1,
        1,
    )?;
    let cat = concat_last(&x1, &conv2d(f, &w.conv1x1_b, 1, 0)?)?;
    let mut mixed = conv2d(&cat, &w.conv1x1_c, 1, 0)?;
    mixed.add_assign(f)?;
    avg_pool_2x2(&mixed)
}

/// Number of halving blocks needed to bring an `extent`-sized map down to `win`.
pub fn gwg_depth(extent: usize, win: usize) -> Result<usize> {
    if win == 0 || !extent.is_multiple_of(win) || !(extent / win).is_power_of_two() {
        return Err(Error::Config(format!(
            "global window: stage extent {extent} is not a power-of-two multiple of window {win}"
        )));
    }
    Ok((extent / win).trailing_zeros() as usize)
}

/// Apply `log2(H / win)` blocks so the result has window extents.
pub fn gwg_stack(f: &Tensor, win: usize, weights: &[GwgBlockWeights]) -> Result<Tensor> {
    f.expect_rank(3, "gwg_stack")?;
    let (h, w) = (f.shape()[0], f.shape()[1]);
    if h != w {
        return dim_err(format!("gwg_stack: input {h}×{w} must be square"));
    }
    let depth = gwg_depth(h, win)?;
    if weights.len() != depth {
        return Err(Error::Config(format!(
            "gwg_stack: {h}×{w} input with window {win} needs {depth} blocks, got {} weight sets",
            weights.len()
        )));
    }
    let mut x = f.clone();
    for w in weights {
        x = gwg_block(&x, w)?;
    }
    Ok(x)
}
