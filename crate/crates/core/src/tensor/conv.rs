//! 3D convolution and transposed convolution kernels.
//!
//! Both lower to a column buffer and one GEMM per sample. The column row
//! index is `((c·k + kx)·k + ky)·k + kz`, the same order as the kernel's
//! storage, so each output element sums over `c_in`, then `kx`, `ky`, `kz`
//! in a fixed order. Padding is zero padding; there is no kernel flip.

use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Output extent of a strided convolution along one axis.
pub fn conv_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::invalid("kernel and stride must be positive"));
    }
    if kernel > input + 2 * pad {
        return Err(Error::shape(format!(
            "kernel {kernel} exceeds padded extent {}",
            input + 2 * pad
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn transposed_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::invalid("kernel and stride must be positive"));
    }
    let out = (input as i64 - 1) * stride as i64 - 2 * pad as i64 + kernel as i64;
    if out < 1 {
        return Err(Error::shape(format!(
            "transposed conv of extent {input} (k={kernel}, s={stride}, p={pad}) gives {out}"
        )));
    }
    Ok(out as usize)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
    /// spatial grid of the "image" side (conv input / transposed-conv output)
    image: [usize; 3],
    /// spatial grid of the "column" side (conv output / transposed-conv input)
    grid: [usize; 3],
}

impl Geometry {
    fn image_len(&self) -> usize {
        self.image.iter().product()
    }

    fn grid_len(&self) -> usize {
        self.grid.iter().product()
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    /// For tap offset `t` along an axis, the range of grid positions whose
    /// source coordinate `o·stride − pad + t` lands inside `[0, n)`.
    fn valid_range(&self, t: usize, n: usize, g: usize) -> (usize, usize) {
        let (s, p) = (self.stride as i64, self.pad as i64);
        let t = t as i64;
        let lo = ((p - t).max(0) + s - 1) / s;
        let hi = ((n as i64 - 1 + p - t).div_euclid(s) + 1).clamp(0, g as i64);
        (lo.min(hi) as usize, hi as usize)
    }
}

/// Grid x-planes per column chunk, sized so a chunk's column buffer stays
/// around 1 MiB of `f32`.
fn planes_per_chunk(rows: usize, plane: usize) -> usize {
    (262_144 / (rows * plane).max(1)).max(1)
}

/// Chunks `[p0, p1)` of the grid's x-planes.
fn plane_chunks(geo: &Geometry, rows: usize) -> impl Iterator<Item = (usize, usize)> {
    let gx = geo.grid[0];
    let step = planes_per_chunk(rows, geo.grid[1] * geo.grid[2]);
    (0..gx).step_by(step).map(move |p0| (p0, (p0 + step).min(gx)))
}

/// Gathers `image: [C, image grid]` into `cols: [C·k³, planes]`, where
/// `planes` is the grid slab of x-planes `[p0, p1)`.
fn im2col<T: Real>(image: &[T], channels: usize, geo: &Geometry, (p0, p1): (usize, usize), cols: &mut [T]) {
    let [ix, iy, iz] = geo.image;
    let [gx, gy, gz] = geo.grid;
    let n = (p1 - p0) * gy * gz;
    let (s, p) = (geo.stride, geo.pad);
    cols[..channels * geo.taps() * n].fill(T::zero());
    for c in 0..channels {
        let img = &image[c * geo.image_len()..(c + 1) * geo.image_len()];
        for kx in 0..geo.k {
            let (x0, x1) = geo.valid_range(kx, ix, gx);
            let (x0, x1) = (x0.max(p0), x1.min(p1));
            for ky in 0..geo.k {
                let (y0, y1) = geo.valid_range(ky, iy, gy);
                for kz in 0..geo.k {
                    let (z0, z1) = geo.valid_range(kz, iz, gz);
                    let row = ((c * geo.k + kx) * geo.k + ky) * geo.k + kz;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for ox in x0..x1 {
                        let sx = ox * s + kx - p;
                        for oy in y0..y1 {
                            let sy = oy * s + ky - p;
                            let src = (sx * iy + sy) * iz;
                            let dst_row = ((ox - p0) * gy + oy) * gz;
                            if s == 1 {
                                let sz0 = z0 + kz - p;
                                dst[dst_row + z0..dst_row + z1]
                                    .copy_from_slice(&img[src + sz0..src + sz0 + (z1 - z0)]);
                            } else {
                                for oz in z0..z1 {
                                    dst[dst_row + oz] = img[src + oz * s + kz - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols: [C·k³, planes]` (x-planes `[p0, p1)` of the grid)
/// into `image: [C, image grid]`.
fn col2im<T: Real>(cols: &[T], channels: usize, geo: &Geometry, (p0, p1): (usize, usize), image: &mut [T]) {
    let [ix, iy, iz] = geo.image;
    let [gx, gy, gz] = geo.grid;
    let n = (p1 - p0) * gy * gz;
    let (s, p) = (geo.stride, geo.pad);
    for c in 0..channels {
        let img = &mut image[c * geo.image_len()..(c + 1) * geo.image_len()];
        for kx in 0..geo.k {
            let (x0, x1) = geo.valid_range(kx, ix, gx);
            let (x0, x1) = (x0.max(p0), x1.min(p1));
            for ky in 0..geo.k {
                let (y0, y1) = geo.valid_range(ky, iy, gy);
                for kz in 0..geo.k {
                    let (z0, z1) = geo.valid_range(kz, iz, gz);
                    let row = ((c * geo.k + kx) * geo.k + ky) * geo.k + kz;
                    let src = &cols[row * n..(row + 1) * n];
                    for ox in x0..x1 {
                        let sx = ox * s + kx - p;
                        for oy in y0..y1 {
                            let sy = oy * s + ky - p;
                            let dst = (sx * iy + sy) * iz;
                            let src_row = ((ox - p0) * gy + oy) * gz;
                            for oz in z0..z1 {
                                img[dst + oz * s + kz - p] =
                                    img[dst + oz * s + kz - p] + src[src_row + oz];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(batch, channels, spatial)` of a rank-4 or rank-5 activation.
fn split_activation(shape: &[usize]) -> Result<(usize, usize, [usize; 3], bool)> {
    match shape.len() {
        4 => Ok((1, shape[0], [shape[1], shape[2], shape[3]], false)),
        5 => Ok((shape[0], shape[1], [shape[2], shape[3], shape[4]], true)),
        _ => Err(Error::shape(format!(
            "expected [C,X,Y,Z] or [B,C,X,Y,Z], got {shape:?}"
        ))),
    }
}

fn activation_shape(batch: usize, channels: usize, spatial: [usize; 3], batched: bool) -> Vec<usize> {
    let mut shape = Vec::with_capacity(5);
    if batched {
        shape.push(batch);
    }
    shape.push(channels);
    shape.extend_from_slice(&spatial);
    shape
}

/// Validated layout of one convolution call.
#[derive(Clone, Copy, Debug)]
struct ConvPlan {
    batch: usize,
    batched: bool,
    c_in: usize,
    c_out: usize,
    geo: Geometry,
}

fn kernel_extent(kernel: &[usize]) -> Result<usize> {
    if kernel.len() != 5 || kernel[2] != kernel[3] || kernel[3] != kernel[4] {
        return Err(Error::shape(format!(
            "kernel must be [A,B,k,k,k], got {kernel:?}"
        )));
    }
    Ok(kernel[2])
}

fn check_bias(bias: &[usize], c_out: usize) -> Result<()> {
    if bias != [c_out] {
        return Err(Error::shape(format!("bias {bias:?} for {c_out} output channels")));
    }
    Ok(())
}

fn plan_conv(input: &[usize], kernel: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<ConvPlan> {
    let (batch, c_in, spatial, batched) = split_activation(input)?;
    let k = kernel_extent(kernel)?;
    if kernel[1] != c_in {
        return Err(Error::shape(format!(
            "input has {c_in} channels but kernel expects {}",
            kernel[1]
        )));
    }
    let c_out = kernel[0];
    check_bias(bias, c_out)?;
    let mut grid = [0; 3];
    for (g, &n) in grid.iter_mut().zip(&spatial) {
        *g = conv_extent(n, k, stride, pad)?;
    }
    Ok(ConvPlan {
        batch,
        batched,
        c_in,
        c_out,
        geo: Geometry {
            k,
            stride,
            pad,
            image: spatial,
            grid,
        },
    })
}

fn plan_transposed(input: &[usize], kernel: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<ConvPlan> {
    let (batch, c_in, spatial, batched) = split_activation(input)?;
    let k = kernel_extent(kernel)?;
    if kernel[0] != c_in {
        return Err(Error::shape(format!(
            "input has {c_in} channels but transposed kernel expects {}",
            kernel[0]
        )));
    }
    let c_out = kernel[1];
    check_bias(bias, c_out)?;
    let mut image = [0; 3];
    for (g, &n) in image.iter_mut().zip(&spatial) {
        *g = transposed_extent(n, k, stride, pad)?;
    }
    Ok(ConvPlan {
        batch,
        batched,
        c_in,
        c_out,
        geo: Geometry {
            k,
            stride,
            pad,
            image,
            grid: spatial,
        },
    })
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], len: usize) {
    for (chunk, &b) in out.chunks_mut(len).zip(bias) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

fn bias_grad<T: Real>(grad_out: &[T], c_out: usize, len: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); c_out];
    for sample in grad_out.chunks(c_out * len) {
        for (g, chunk) in gb.iter_mut().zip(sample.chunks(len)) {
            *g = chunk.iter().fold(*g, |acc, &v| acc + v);
        }
    }
    gb
}

fn sum_partials<T: Real>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t = *t + p;
        }
    }
    total
}

/// Cross-correlation of `input: [B?,C_in,X,Y,Z]` with `kernel: [C_out,C_in,k,k,k]`.
pub fn conv3d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let plan = plan_conv(input.shape(), kernel.shape(), bias.shape(), stride, pad)?;
    let geo = plan.geo;
    let (n_in, n_out) = (geo.image_len(), geo.grid_len());
    let rows = plan.c_in * geo.taps();
    let mut out = vec![T::zero(); plan.batch * plan.c_out * n_out];
    out.par_chunks_mut(plan.c_out * n_out)
        .zip(input.data().par_chunks(plan.c_in * n_in))
        .for_each(|(out_b, in_b)| {
            let plane = geo.grid[1] * geo.grid[2];
            let mut cols = vec![T::zero(); rows * plane * planes_per_chunk(rows, plane).min(geo.grid[0])];
            for (p0, p1) in plane_chunks(&geo, rows) {
                let m = (p1 - p0) * plane;
                im2col(in_b, plan.c_in, &geo, (p0, p1), &mut cols);
                T::gemm_ld(
                    plan.c_out,
                    rows,
                    m,
                    kernel.data(),
                    rows,
                    false,
                    &cols,
                    m,
                    false,
                    T::zero(),
                    &mut out_b[p0 * plane..],
                    n_out,
                );
            }
            add_bias(out_b, bias.data(), n_out);
        });
    Tensor::new(
        activation_shape(plan.batch, plan.c_out, geo.grid, plan.batched),
        out,
    )
}

/// Gradients of [`conv3d`] with respect to input, kernel and bias.
pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    pad: usize,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let bias_shape = [kernel.shape()[0]];
    let plan = plan_conv(input.shape(), kernel.shape(), &bias_shape, stride, pad)?;
    let geo = plan.geo;
    let (n_in, n_out) = (geo.image_len(), geo.grid_len());
    let rows = plan.c_in * geo.taps();
    let mut grad_in = vec![T::zero(); input.numel()];
    let partials: Vec<Vec<T>> = grad_in
        .par_chunks_mut(plan.c_in * n_in)
        .zip(input.data().par_chunks(plan.c_in * n_in))
        .zip(grad_out.par_chunks(plan.c_out * n_out))
        .map(|((gin_b, in_b), gout_b)| {
            let plane = geo.grid[1] * geo.grid[2];
            let len = rows * plane * planes_per_chunk(rows, plane).min(geo.grid[0]);
            let (mut cols, mut dcols) = (vec![T::zero(); len], vec![T::zero(); len]);
            let mut gk = vec![T::zero(); plan.c_out * rows];
            for (p0, p1) in plane_chunks(&geo, rows) {
                let m = (p1 - p0) * plane;
                let g = &gout_b[p0 * plane..];
                im2col(in_b, plan.c_in, &geo, (p0, p1), &mut cols);
                T::gemm_ld(plan.c_out, m, rows, g, n_out, false, &cols, m, true, T::one(), &mut gk, rows);
                T::gemm_ld(rows, plan.c_out, m, kernel.data(), rows, true, g, n_out, false, T::zero(), &mut dcols, m);
                col2im(&dcols, plan.c_in, &geo, (p0, p1), gin_b);
            }
            gk
        })
        .collect();
    let grad_kernel = sum_partials(partials, kernel.numel());
    let grad_bias = bias_grad(grad_out, plan.c_out, n_out);
    Ok((grad_in, grad_kernel, grad_bias))
}

/// Transposed convolution of `input: [B?,C_in,X,Y,Z]` with
/// `kernel: [C_in,C_out,k,k,k]`: the adjoint of [`conv3d`] with the same
/// kernel, stride and padding, plus bias.
pub fn transposed_conv3d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let plan = plan_transposed(input.shape(), kernel.shape(), bias.shape(), stride, pad)?;
    let geo = plan.geo;
    let (n_in, n_out) = (geo.grid_len(), geo.image_len());
    let rows = plan.c_out * geo.taps();
    let mut out = vec![T::zero(); plan.batch * plan.c_out * n_out];
    out.par_chunks_mut(plan.c_out * n_out)
        .zip(input.data().par_chunks(plan.c_in * n_in))
        .for_each(|(out_b, in_b)| {
            let plane = geo.grid[1] * geo.grid[2];
            let mut cols = vec![T::zero(); rows * plane * planes_per_chunk(rows, plane).min(geo.grid[0])];
            for (p0, p1) in plane_chunks(&geo, rows) {
                let m = (p1 - p0) * plane;
                T::gemm_ld(
                    rows,
                    plan.c_in,
                    m,
                    kernel.data(),
                    rows,
                    true,
                    &in_b[p0 * plane..],
                    n_in,
                    false,
                    T::zero(),
                    &mut cols,
                    m,
                );
                col2im(&cols, plan.c_out, &geo, (p0, p1), out_b);
            }
            add_bias(out_b, bias.data(), n_out);
        });
    Tensor::new(
        activation_shape(plan.batch, plan.c_out, geo.image, plan.batched),
        out,
    )
}

/// Gradients of [`transposed_conv3d`] with respect to input, kernel and bias.
pub fn transposed_conv3d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    pad: usize,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let bias_shape = [kernel.shape()[1]];
    let plan = plan_transposed(input.shape(), kernel.shape(), &bias_shape, stride, pad)?;
    let geo = plan.geo;
    let (n_in, n_out) = (geo.grid_len(), geo.image_len());
    let rows = plan.c_out * geo.taps();
    let mut grad_in = vec![T::zero(); input.numel()];
    let partials: Vec<Vec<T>> = grad_in
        .par_chunks_mut(plan.c_in * n_in)
        .zip(input.data().par_chunks(plan.c_in * n_in))
        .zip(grad_out.par_chunks(plan.c_out * n_out))
        .map(|((gin_b, in_b), gout_b)| {
            let plane = geo.grid[1] * geo.grid[2];
            let mut cols = vec![T::zero(); rows * plane * planes_per_chunk(rows, plane).min(geo.grid[0])];
            let mut gk = vec![T::zero(); plan.c_in * rows];
            for (p0, p1) in plane_chunks(&geo, rows) {
                let m = (p1 - p0) * plane;
                let x = &in_b[p0 * plane..];
                im2col(gout_b, plan.c_out, &geo, (p0, p1), &mut cols);
                T::gemm_ld(plan.c_in, rows, m, kernel.data(), rows, false, &cols, m, false, T::zero(), &mut gin_b[p0 * plane..], n_in);
                T::gemm_ld(plan.c_in, m, rows, x, n_in, false, &cols, m, true, T::one(), &mut gk, rows);
            }
            gk
        })
        .collect();
    let grad_kernel = sum_partials(partials, kernel.numel());
    let grad_bias = bias_grad(grad_out, plan.c_out, n_out);
    Ok((grad_in, grad_kernel, grad_bias))
}
