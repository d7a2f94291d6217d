//! Dilated 2-D cross-correlation over NHWC tensors.
//!
//! Each output pixel is computed from a `k×k` window whose taps are spaced
//! `dilation` pixels apart. Kernels are lowered to a single GEMM per sample
//! via an im2col buffer laid out as `(oh·ow) × (k·k·c_in)`, with weights
//! stored `(k, k, c_in, c_out)` so no reordering is needed on either side.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{sgemm, Trans};
use crate::tensor::Tensor;

static PERTURB_WEIGHT_GRAD: AtomicBool = AtomicBool::new(false);

/// Corrupts the weight gradient produced by every subsequent conv backward
/// pass. Exists so gradient-check tooling can prove it catches a broken
/// kernel; never enable it outside of that.
#[doc(hidden)]
pub fn set_weight_grad_fault(enabled: bool) {
    PERTURB_WEIGHT_GRAD.store(enabled, Ordering::SeqCst);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    /// Zero rows/columns added on every side.
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Stride-1 spec with "same" padding `d·(k−1)/2`.
    pub fn same(kernel: usize, dilation: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
            in_channels,
            out_channels,
        }
    }

    pub fn effective_extent(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::ConvSpec(format!("kernel size {} must be odd and >= 1", self.kernel)));
        }
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::ConvSpec(format!(
                "stride {} and dilation {} must be >= 1",
                self.stride, self.dilation
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::ConvSpec("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Output extent along one spatial axis of size `input`.
    pub fn output_size(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        let extent = self.effective_extent();
        if extent > padded {
            return Err(Error::ConvSpec(format!(
                "effective kernel extent {extent} exceeds padded input extent {padded}"
            )));
        }
        Ok((padded - extent) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.kernel, self.kernel, self.in_channels, self.out_channels]
    }

    fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

/// Geometry shared by the forward and backward passes of one call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: ConvSpec,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        if input.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input must be rank 4 (batch, height, width, channel), got {:?}", input.shape()),
            ));
        }
        let &[n, h, w, c] = input.shape() else { unreachable!() };
        if c != spec.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input channel dimension is {c} but spec expects {}", spec.in_channels),
            ));
        }
        if weights.shape() != spec.weight_shape() {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight shape {:?} does not match (kernel, kernel, in, out) = {:?}",
                    weights.shape(),
                    spec.weight_shape()
                ),
            ));
        }
        if bias.shape() != [spec.out_channels] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{}]", bias.shape(), spec.out_channels),
            ));
        }
        let oh = spec.output_size(h)?;
        let ow = spec.output_size(w)?;
        Ok(Self { n, h, w, oh, ow, spec: *spec })
    }

    fn patch_len(&self) -> usize {
        self.spec.fan_in()
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Fill `cols` with the receptive-field patches of one sample.
    fn im2col(&self, sample: &[f32], cols: &mut [f32]) {
        let ConvSpec { kernel: k, stride, dilation, padding, in_channels: c, .. } = self.spec;
        let row_len = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut cols[(oy * self.ow + ox) * row_len..][..row_len];
                for ky in 0..k {
                    let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                        let dst = &mut row[(ky * k + kx) * c..][..c];
                        if iy < 0 || ix < 0 || iy as usize >= self.h || ix as usize >= self.w {
                            dst.fill(0.0);
                        } else {
                            let src = (iy as usize * self.w + ix as usize) * c;
                            dst.copy_from_slice(&sample[src..src + c]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add patch gradients back onto one sample's input gradient.
    fn col2im(&self, cols: &[f32], sample_grad: &mut [f32]) {
        let ConvSpec { kernel: k, stride, dilation, padding, in_channels: c, .. } = self.spec;
        let row_len = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &cols[(oy * self.ow + ox) * row_len..][..row_len];
                for ky in 0..k {
                    let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                    if iy < 0 || iy as usize >= self.h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                        if ix < 0 || ix as usize >= self.w {
                            continue;
                        }
                        let dst = (iy as usize * self.w + ix as usize) * c;
                        let src = &row[(ky * k + kx) * c..][..c];
                        for (g, s) in sample_grad[dst..dst + c].iter_mut().zip(src) {
                            *g += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(geo: &ConvGeometry, input: &Tensor, weights: &Tensor, bias: &Tensor) -> Tensor {
    let co = geo.spec.out_channels;
    let (p, kk) = (geo.positions(), geo.patch_len());
    let in_stride = geo.h * geo.w * geo.spec.in_channels;
    let mut out = vec![0.0f32; geo.n * p * co];
    let mut cols = vec![0.0f32; p * kk];
    for b in 0..geo.n {
        let sample = &input.data()[b * in_stride..][..in_stride];
        geo.im2col(sample, &mut cols);
        let dst = &mut out[b * p * co..][..p * co];
        for row in dst.chunks_exact_mut(co) {
            row.copy_from_slice(bias.data());
        }
        sgemm(p, kk, co, &cols, Trans::No, weights.data(), Trans::No, 1.0, dst);
    }
    Tensor::new(vec![geo.n, geo.oh, geo.ow, co], out).expect("conv output shape")
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    geo: &ConvGeometry,
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    need: [bool; 3],
) -> ConvGrads {
    let [need_input, need_weights, need_bias] = need;
    let co = geo.spec.out_channels;
    let (p, kk) = (geo.positions(), geo.patch_len());
    let in_stride = geo.h * geo.w * geo.spec.in_channels;
    let gy = grad_out.data();

    let bias = need_bias.then(|| {
        let mut db = vec![0.0f32; co];
        for row in gy.chunks_exact(co) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        Tensor::new(vec![co], db).expect("bias grad shape")
    });

    let mut dw = need_weights.then(|| vec![0.0f32; kk * co]);
    let mut dx = need_input.then(|| vec![0.0f32; input.numel()]);
    if need_weights || need_input {
        let mut cols = vec![0.0f32; p * kk];
        for b in 0..geo.n {
            let gy_b = &gy[b * p * co..][..p * co];
            if let Some(dw) = dw.as_mut() {
                geo.im2col(&input.data()[b * in_stride..][..in_stride], &mut cols);
                sgemm(kk, p, co, &cols, Trans::Yes, gy_b, Trans::No, 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                sgemm(p, co, kk, gy_b, Trans::No, weights.data(), Trans::Yes, 0.0, &mut cols);
                geo.col2im(&cols, &mut dx[b * in_stride..][..in_stride]);
            }
        }
    }
    if let Some(dw) = dw.as_mut() {
        if PERTURB_WEIGHT_GRAD.load(Ordering::SeqCst) {
            dw.iter_mut().for_each(|g| *g *= 1.25);
        }
    }

    ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape().to_vec(), d).expect("input grad shape")),
        weights: dw.map(|d| Tensor::new(weights.shape().to_vec(), d).expect("weight grad shape")),
        bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formula() {
        let s = ConvSpec { kernel: 3, stride: 2, dilation: 1, padding: 1, in_channels: 1, out_channels: 1 };
        assert_eq!(s.output_size(16).unwrap(), 8);
        let s = ConvSpec { kernel: 3, stride: 1, dilation: 2, padding: 0, in_channels: 1, out_channels: 1 };
        assert_eq!(s.output_size(5).unwrap(), 1);
        assert!(s.output_size(4).is_err());
    }

    #[test]
    fn validate_rejects_even_kernel_and_zero_stride() {
        let mut s = ConvSpec::same(3, 1, 2, 2);
        assert!(s.validate().is_ok());
        s.kernel = 4;
        assert!(s.validate().is_err());
        s.kernel = 3;
        s.stride = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn same_padding_preserves_size() {
        for d in 1..=4 {
            let s = ConvSpec::same(3, d, 1, 1);
            assert_eq!(s.output_size(9).unwrap(), 9);
        }
    }
}
