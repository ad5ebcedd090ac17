//! Gather index maps for layout operations.
//!
//! Every map has one entry per output element holding the flat source index,
//! or [`ZERO`] when the output element is a constant zero (padding). Layout ops
//! (permute, crop, pad, roll, pixel shuffle, window partition) are all gathers,
//! so they share one forward kernel and one scatter-add backward.

use crate::error::{shape_err, Result};
use crate::tensor::strides_of;

/// Sentinel source index producing a zero.
pub const ZERO: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct IndexMap {
    pub out_shape: Vec<usize>,
    pub src: Vec<u32>,
}

fn check_len(n: usize) -> Result<()> {
    if n >= ZERO as usize {
        return shape_err(format!("tensor with {n} elements exceeds gather index range"));
    }
    Ok(())
}

/// Axis permutation: output axis `i` is input axis `axes[i]`.
pub fn permute(shape: &[usize], axes: &[usize]) -> Result<IndexMap> {
    if axes.len() != shape.len() {
        return shape_err(format!("permute axes {axes:?} do not match rank of {shape:?}"));
    }
    let mut seen = vec![false; axes.len()];
    for &a in axes {
        if a >= axes.len() || seen[a] {
            return shape_err(format!("invalid permutation {axes:?}"));
        }
        seen[a] = true;
    }
    let n: usize = shape.iter().product();
    check_len(n)?;
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut src = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        src.push(offset as u32);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    Ok(IndexMap { out_shape, src })
}

/// Contiguous sub-range `[start, start + len)` along `axis`.
pub fn narrow(shape: &[usize], axis: usize, start: usize, len: usize) -> Result<IndexMap> {
    if axis >= shape.len() || start + len > shape[axis] {
        return shape_err(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}"));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut src = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for a in start..start + len {
            let base = (o * shape[axis] + a) * inner;
            src.extend((base..base + inner).map(|i| i as u32));
        }
    }
    Ok(IndexMap { out_shape, src })
}

/// Crop the two trailing axes of an `[B, C, H, W]` tensor to `h × w`, with a
/// separate `(row, col)` origin per batch item.
pub fn crop2d(shape: &[usize], h: usize, w: usize, origins: &[(usize, usize)]) -> Result<IndexMap> {
    let [b, c, ih, iw] = nchw(shape)?;
    if origins.len() != b {
        return shape_err(format!("crop2d needs {b} origins, got {}", origins.len()));
    }
    let mut src = Vec::with_capacity(b * c * h * w);
    for (bi, &(r0, c0)) in origins.iter().enumerate() {
        if r0 + h > ih || c0 + w > iw {
            return shape_err(format!(
                "crop {h}x{w} at ({r0},{c0}) exceeds {ih}x{iw}"
            ));
        }
        for ci in 0..c {
            let plane = (bi * c + ci) * ih * iw;
            for r in 0..h {
                let row = plane + (r0 + r) * iw + c0;
                src.extend((row..row + w).map(|i| i as u32));
            }
        }
    }
    Ok(IndexMap { out_shape: vec![b, c, h, w], src })
}

/// Zero-pad the trailing two axes of `[B, C, H, W]`.
pub fn pad2d(shape: &[usize], top: usize, bottom: usize, left: usize, right: usize) -> Result<IndexMap> {
    let [b, c, ih, iw] = nchw(shape)?;
    let (oh, ow) = (ih + top + bottom, iw + left + right);
    check_len(b * c * ih * iw)?;
    let mut src = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        for r in 0..oh {
            for col in 0..ow {
                if r < top || r >= top + ih || col < left || col >= left + iw {
                    src.push(ZERO);
                } else {
                    src.push((plane * ih * iw + (r - top) * iw + (col - left)) as u32);
                }
            }
        }
    }
    Ok(IndexMap { out_shape: vec![b, c, oh, ow], src })
}

/// `out[c, h·r + i, w·r + j] = in[c·r² + i·r + j, h, w]` on `[B, C·r², H, W]`.
pub fn pixel_shuffle(shape: &[usize], r: usize) -> Result<IndexMap> {
    let [b, c, h, w] = nchw(shape)?;
    if r == 0 || c % (r * r) != 0 {
        return shape_err(format!("pixel_shuffle: {c} channels not divisible by {r}²"));
    }
    check_len(b * c * h * w)?;
    let oc = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut src = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for co in 0..oc {
            for y in 0..oh {
                let (hh, i) = (y / r, y % r);
                for x in 0..ow {
                    let (ww, j) = (x / r, x % r);
                    let ci = co * r * r + i * r + j;
                    src.push((((bi * c + ci) * h + hh) * w + ww) as u32);
                }
            }
        }
    }
    Ok(IndexMap { out_shape: vec![b, oc, oh, ow], src })
}

/// Inverse of [`pixel_shuffle`]: `[B, C, H·r, W·r]` to `[B, C·r², H, W]`.
pub fn pixel_unshuffle(shape: &[usize], r: usize) -> Result<IndexMap> {
    let [b, c, h, w] = nchw(shape)?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return shape_err(format!("pixel_unshuffle: {h}x{w} not divisible by {r}"));
    }
    check_len(b * c * h * w)?;
    let (oh, ow, oc) = (h / r, w / r, c * r * r);
    let mut src = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for co in 0..oc {
            let (ci, i, j) = (co / (r * r), (co % (r * r)) / r, co % r);
            for y in 0..oh {
                for x in 0..ow {
                    src.push((((bi * c + ci) * h + y * r + i) * w + x * r + j) as u32);
                }
            }
        }
    }
    Ok(IndexMap { out_shape: vec![b, oc, oh, ow], src })
}

/// Partition channels-last `[B, H, W, C]` into `[B·nW, w·w, C]` windows in
/// row-major window order, after a cyclic shift of `-shift` on both spatial
/// axes (`shift = 0` for regular windows).
pub fn window_partition(shape: &[usize], w: usize, shift: usize) -> Result<IndexMap> {
    let [b, h, wd, c] = bhwc(shape)?;
    if w == 0 || h % w != 0 || wd % w != 0 {
        return shape_err(format!("window {w} does not divide {h}x{wd}"));
    }
    check_len(b * h * wd * c)?;
    let (nh, nw) = (h / w, wd / w);
    let mut src = Vec::with_capacity(b * h * wd * c);
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                for ty in 0..w {
                    for tx in 0..w {
                        // shifted[y][x] = in[(y + shift) % h][(x + shift) % w]
                        let y = (wy * w + ty + shift) % h;
                        let x = (wx * w + tx + shift) % wd;
                        let base = ((bi * h + y) * wd + x) * c;
                        src.extend((base..base + c).map(|i| i as u32));
                    }
                }
            }
        }
    }
    Ok(IndexMap { out_shape: vec![b * nh * nw, w * w, c], src })
}

/// Inverse of [`window_partition`] with the same `shift`, producing `[B, H, W, C]`.
pub fn window_reverse(shape: &[usize], w: usize, h: usize, wd: usize, shift: usize) -> Result<IndexMap> {
    if shape.len() != 3 || w == 0 || shape[1] != w * w || h % w != 0 || wd % w != 0 {
        return shape_err(format!("window_reverse: bad input {shape:?} for {h}x{wd} window {w}"));
    }
    let (nh, nw) = (h / w, wd / w);
    if shape[0] % (nh * nw) != 0 {
        return shape_err(format!("window_reverse: {} windows not a multiple of {}", shape[0], nh * nw));
    }
    let (b, c) = (shape[0] / (nh * nw), shape[2]);
    check_len(b * h * wd * c)?;
    let mut src = Vec::with_capacity(b * h * wd * c);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..wd {
                let sy = (y + h - shift % h) % h;
                let sx = (x + wd - shift % wd) % wd;
                let win = (bi * nh + sy / w) * nw + sx / w;
                let tok = (sy % w) * w + sx % w;
                let base = (win * w * w + tok) * c;
                src.extend((base..base + c).map(|i| i as u32));
            }
        }
    }
    Ok(IndexMap { out_shape: vec![b, h, wd, c], src })
}

/// Cyclic shift of channels-last `[B, H, W, C]`: `out[y][x] = in[y - dy][x - dx]`.
pub fn roll2d(shape: &[usize], dy: isize, dx: isize) -> Result<IndexMap> {
    let [b, h, wd, c] = bhwc(shape)?;
    check_len(b * h * wd * c)?;
    let mut src = Vec::with_capacity(b * h * wd * c);
    for bi in 0..b {
        for y in 0..h {
            let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
            for x in 0..wd {
                let sx = (x as isize - dx).rem_euclid(wd as isize) as usize;
                let base = ((bi * h + sy) * wd + sx) * c;
                src.extend((base..base + c).map(|i| i as u32));
            }
        }
    }
    Ok(IndexMap { out_shape: vec![b, h, wd, c], src })
}

fn nchw(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[b, c, h, w] => Ok([b, c, h, w]),
        _ => shape_err(format!("expected a rank-4 NCHW tensor, got {shape:?}")),
    }
}

fn bhwc(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[b, h, w, c] => Ok([b, h, w, c]),
        _ => shape_err(format!("expected a rank-4 channels-last tensor, got {shape:?}")),
    }
}
