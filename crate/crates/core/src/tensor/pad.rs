use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Surrounds both spatial axes with a constant border of width `margin`.
pub fn pad2d<T: Scalar>(input: &Tensor<T>, margin: usize, value: T) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if margin == 0 {
        return Ok(input.clone());
    }
    let (ph, pw) = (h + 2 * margin, w + 2 * margin);
    let mut out = Tensor::filled(&[n, c, ph, pw], value);
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for y in 0..h {
            let s = (plane * h + y) * w;
            let d = (plane * ph + y + margin) * pw + margin;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    Ok(out)
}

/// Removes a border of width `margin` from both spatial axes.
pub fn center_crop<T: Scalar>(input: &Tensor<T>, margin: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if 2 * margin >= h || 2 * margin >= w {
        return Err(Error::invalid(format!("cannot crop {margin} from a {h}x{w} map")));
    }
    let (oh, ow) = (h - 2 * margin, w - 2 * margin);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for y in 0..oh {
            let s = (plane * h + y + margin) * w + margin;
            let d = (plane * oh + y) * ow;
            dst[d..d + ow].copy_from_slice(&src[s..s + ow]);
        }
    }
    Ok(out)
}
