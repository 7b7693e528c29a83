//! Fused group normalization and activations as candle custom ops.
//!
//! Composed from primitive tensor ops these build long autodiff chains whose
//! backward dominates CPU training time. Here each is a single op with a
//! closed-form gradient, evaluated in f64 per element.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Result, Shape, Tensor, WithDType};
use num_traits::Float;

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("fused op: expected a contiguous operand"),
    }
}

fn flat64(t: &Tensor) -> Result<Vec<f64>> {
    t.detach().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

fn from64(v: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())
}

fn map_storage(s: &CpuStorage, l: &Layout, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<CpuStorage> {
    fn run<T: WithDType>(x: &[T], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<T> {
        let xs: Vec<f64> = x.iter().map(|v| v.to_f64()).collect();
        f(&xs).into_iter().map(T::from_f64).collect()
    }
    Ok(match s {
        CpuStorage::F32(x) => CpuStorage::F32(run(slice(x, l)?, f)),
        CpuStorage::F64(x) => CpuStorage::F64(run(slice(x, l)?, f)),
        _ => candle_core::bail!("fused op: only f32/f64 are supported"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Mish,
    Sigmoid,
}

fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus<F: Float>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    fn value<F: Float>(self, x: F) -> F {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Mish => x * softplus(x).tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn derivative<F: Float>(self, x: F) -> F {
        let one = F::one();
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (one + x * (one - s))
            }
            Activation::Mish => {
                let t = softplus(x).tanh();
                t + x * (one - t * t) * sigmoid(x)
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (one - s)
            }
        }
    }

    fn grad<F: Float + WithDType>(self, x: &Tensor, g: &Tensor) -> Result<Tensor> {
        let xs = x.detach().flatten_all()?.to_vec1::<F>()?;
        let gs = g.detach().flatten_all()?.to_vec1::<F>()?;
        let dx: Vec<F> = xs.iter().zip(&gs).map(|(x, g)| *g * self.derivative(*x)).collect();
        Tensor::from_vec(dx, x.shape(), x.device())
    }
}

impl CustomOp1 for Activation {
    fn name(&self) -> &'static str {
        match self {
            Activation::Silu => "fused-silu",
            Activation::Mish => "fused-mish",
            Activation::Sigmoid => "fused-sigmoid",
        }
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let storage = match s {
            CpuStorage::F32(x) => CpuStorage::F32(slice(x, l)?.iter().map(|v| self.value(*v)).collect()),
            CpuStorage::F64(x) => CpuStorage::F64(slice(x, l)?.iter().map(|v| self.value(*v)).collect()),
            _ => candle_core::bail!("fused op: only f32/f64 are supported"),
        };
        Ok((storage, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let g = grad.to_dtype(arg.dtype())?;
        Ok(Some(match arg.dtype() {
            DType::F32 => self.grad::<f32>(arg, &g)?,
            _ => self.grad::<f64>(&arg.to_dtype(DType::F64)?, &g.to_dtype(DType::F64)?)?.to_dtype(arg.dtype())?,
        }))
    }
}

pub fn activate(x: &Tensor, act: Activation) -> Result<Tensor> {
    let x = x.contiguous()?;
    if x.track_op() {
        x.apply_op1(act)
    } else {
        x.apply_op1_no_bwd(&act)
    }
}

/// Group normalization over (B, C, ...) with per-channel affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct GroupNormOp {
    pub groups: usize,
    pub eps: f64,
}

struct GnDims {
    batch: usize,
    channels: usize,
    spatial: usize,
}

impl GroupNormOp {
    fn dims(&self, shape: &Shape) -> Result<GnDims> {
        let d = shape.dims();
        if d.len() < 2 || d[1] % self.groups != 0 {
            candle_core::bail!("group norm: {} groups do not divide shape {d:?}", self.groups);
        }
        Ok(GnDims { batch: d[0], channels: d[1], spatial: d[2..].iter().product() })
    }

    /// Per (batch, group): mean and 1 / sqrt(var + eps).
    fn moments(&self, x: &[f64], d: &GnDims) -> Vec<(f64, f64)> {
        let per = d.channels / self.groups * d.spatial;
        x.chunks_exact(per)
            .map(|chunk| {
                let mean = chunk.iter().sum::<f64>() / per as f64;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
                (mean, 1.0 / (var + self.eps).sqrt())
            })
            .collect()
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "fused-group-norm"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout, s3: &CpuStorage, l3: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = self.dims(l1.shape())?;
        let to64 = |s: &CpuStorage, l: &Layout| -> Result<Vec<f64>> {
            Ok(match s {
                CpuStorage::F32(v) => slice(v, l)?.iter().map(|x| *x as f64).collect(),
                CpuStorage::F64(v) => slice(v, l)?.to_vec(),
                _ => candle_core::bail!("group norm: only f32/f64 are supported"),
            })
        };
        let (w, b) = (to64(s2, l2)?, to64(s3, l3)?);
        if w.len() != d.channels || b.len() != d.channels {
            candle_core::bail!("group norm: affine parameters do not match {} channels", d.channels);
        }
        let op = *self;
        let storage = map_storage(s1, l1, |x| {
            let moments = op.moments(x, &d);
            let cpg = d.channels / op.groups;
            let mut y = vec![0.0; x.len()];
            for bi in 0..d.batch {
                for c in 0..d.channels {
                    let (mean, rstd) = moments[bi * op.groups + c / cpg];
                    let base = (bi * d.channels + c) * d.spatial;
                    for i in base..base + d.spatial {
                        y[i] = (x[i] - mean) * rstd * w[c] + b[c];
                    }
                }
            }
            y
        })?;
        Ok((storage, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let d = self.dims(x.shape())?;
        let xs = flat64(x)?;
        let ws = flat64(w)?;
        let g = flat64(grad)?;
        let moments = self.moments(&xs, &d);
        let cpg = d.channels / self.groups;
        let per = cpg * d.spatial;
        let mut dx = vec![0.0; xs.len()];
        let mut dw = vec![0.0; d.channels];
        let mut db = vec![0.0; d.channels];
        for bi in 0..d.batch {
            for gi in 0..self.groups {
                let (mean, rstd) = moments[bi * self.groups + gi];
                // Sums of dL/dxhat and dL/dxhat * xhat over the group.
                let (mut s1, mut s2) = (0.0, 0.0);
                for c in gi * cpg..(gi + 1) * cpg {
                    let base = (bi * d.channels + c) * d.spatial;
                    for i in base..base + d.spatial {
                        let xhat = (xs[i] - mean) * rstd;
                        let gh = g[i] * ws[c];
                        s1 += gh;
                        s2 += gh * xhat;
                        dw[c] += g[i] * xhat;
                        db[c] += g[i];
                    }
                }
                let (m1, m2) = (s1 / per as f64, s2 / per as f64);
                for c in gi * cpg..(gi + 1) * cpg {
                    let base = (bi * d.channels + c) * d.spatial;
                    for i in base..base + d.spatial {
                        let xhat = (xs[i] - mean) * rstd;
                        dx[i] = rstd * (g[i] * ws[c] - m1 - xhat * m2);
                    }
                }
            }
        }
        Ok((Some(from64(dx, x)?), Some(from64(dw, w)?), Some(from64(db, b)?)))
    }
}

pub fn group_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let x = x.contiguous()?;
    let op = GroupNormOp { groups, eps };
    if x.track_op() || weight.track_op() || bias.track_op() {
        x.apply_op3(weight, bias, op)
    } else {
        x.apply_op3_no_bwd(weight, bias, &op)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn group_norm_matches_composed_reference() {
        let x = Var::from_tensor(&Tensor::randn(0.3f64, 2.0, (3, 8, 5, 4), &Device::Cpu).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::randn(1f64, 0.5, 8, &Device::Cpu).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 0.5, 8, &Device::Cpu).unwrap()).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (3, 8, 5, 4), &Device::Cpu).unwrap();
        let ours = group_norm(x.as_tensor(), w.as_tensor(), b.as_tensor(), 4, 1e-5).unwrap();
        let reference = candle_nn::GroupNorm::new(w.as_tensor().clone(), b.as_tensor().clone(), 8, 4, 1e-5).unwrap();
        let theirs = candle_core::Module::forward(&reference, x.as_tensor()).unwrap();
        assert!(max_diff(&ours, &theirs) < 1e-12);
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w, &b] {
            let d = max_diff(g1.get(v.as_tensor()).unwrap(), g2.get(v.as_tensor()).unwrap());
            assert!(d < 1e-10, "{d}");
        }
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let xs = [-25.0f64, -3.0, -0.4, 0.0, 0.3, 2.5, 30.0];
        for act in [Activation::Silu, Activation::Mish, Activation::Sigmoid] {
            for &x in &xs {
                let h = 1e-6;
                let fd = (act.value(x + h) - act.value(x - h)) / (2.0 * h);
                let an: f64 = act.derivative(x);
                assert!((fd - an).abs() < 1e-7, "{act:?} at {x}: {fd} vs {an}");
            }
        }
        let t = Tensor::new(&xs, &Device::Cpu).unwrap();
        let silu = activate(&t, Activation::Silu).unwrap().to_vec1::<f64>().unwrap();
        let reference = t.silu().unwrap().to_vec1::<f64>().unwrap();
        assert!(silu.iter().zip(reference).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
