//! Building blocks of the network. Sequence tensors are `(N, L, C)`;
//! time-frequency feature maps are channel-last `(B, T, F, C)`.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Shape, Tensor, D};

use super::params::{Init, ParamStore};
use crate::error::Result;

/// Pointwise projection over the last axis. The weight is stored with the
/// shape of a `(1, 1)` 2-D convolution kernel, `(out, in, 1, 1)`, or of a
/// plain linear layer, `(out, in)`.
#[derive(Debug, Clone)]
pub struct Pointwise {
    weight: Tensor,
    bias: Tensor,
    in_dim: usize,
    out_dim: usize,
}

impl Pointwise {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        conv_shape: bool,
        init: Init,
    ) -> Result<Self> {
        let shape: &[usize] = if conv_shape {
            &[out_dim, in_dim, 1, 1]
        } else {
            &[out_dim, in_dim]
        };
        let weight = store.create(&format!("{name}.weight"), shape, init)?;
        let bias = store.create(&format!("{name}.bias"), &[out_dim], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let w = self.weight.reshape((self.out_dim, self.in_dim))?.t()?;
        let y = x
            .reshape((rows, self.in_dim))?
            .matmul(&w)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last axis with a learned scale and shift.
/// Applied to the channel vector of each time-frequency bin.
#[derive(Debug, Clone)]
pub struct BinNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl BinNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: store.create(&format!("{name}.weight"), &[dim], Init::Ones)?,
            bias: store.create(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(normalize_last(x, self.eps)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

/// Zero-mean, unit-variance over the last axis (biased variance).
pub fn normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let centered = x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// SwiGLU over `dim`: the first half is the value, the second half the gate,
/// `value * swish(gate)`.
pub fn swiglu(x: &Tensor, dim: usize) -> Result<Tensor> {
    let width = x.dim(dim)? / 2;
    let value = x.narrow(dim, 0, width)?;
    let gate = x.narrow(dim, width, width)?;
    Ok((value * gate.silu()?)?)
}

/// Numerically stable softmax over the last axis, fused into one pass with
/// a fused backward `y * (g - sum(g * y))`.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

struct SoftmaxLast;
struct SoftmaxLastGrad;

macro_rules! softmax_kernels {
    ($fwd:ident, $bwd:ident, $t:ty) => {
        fn $fwd(x: &[$t], dim: usize) -> Vec<$t> {
            let mut out = vec![0.0; x.len()];
            for (row, o) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
                let max = row.iter().copied().fold(<$t>::NEG_INFINITY, <$t>::max);
                let mut sum = 0.0;
                for (d, v) in o.iter_mut().zip(row) {
                    *d = (v - max).exp();
                    sum += *d;
                }
                let inv = 1.0 / sum;
                o.iter_mut().for_each(|d| *d *= inv);
            }
            out
        }

        fn $bwd(y: &[$t], g: &[$t], dim: usize) -> Vec<$t> {
            let mut out = vec![0.0; y.len()];
            for ((yr, gr), o) in y.chunks_exact(dim).zip(g.chunks_exact(dim)).zip(out.chunks_exact_mut(dim)) {
                let dot: $t = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, a), b) in o.iter_mut().zip(yr).zip(gr) {
                    *d = a * (b - dot);
                }
            }
            out
        }
    };
}

softmax_kernels!(softmax_fwd_f32, softmax_bwd_f32, f32);
softmax_kernels!(softmax_fwd_f64, softmax_bwd_f64, f64);

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("softmax expects contiguous tensors".into()))?;
    Ok(&v[a..b])
}

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = *l.dims().last().unwrap_or(&1);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_fwd_f32(contiguous(v, l)?, dim)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_fwd_f64(contiguous(v, l)?, dim)),
            _ => return Err(candle_core::Error::Msg("softmax supports f32 and f64".into())),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxLastGrad)?))
    }
}

impl CustomOp2 for SoftmaxLastGrad {
    fn name(&self) -> &'static str {
        "softmax-last-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = *l1.dims().last().unwrap_or(&1);
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => CpuStorage::F32(softmax_bwd_f32(contiguous(y, l1)?, contiguous(g, l2)?, dim)),
            (CpuStorage::F64(y), CpuStorage::F64(g)) => CpuStorage::F64(softmax_bwd_f64(contiguous(y, l1)?, contiguous(g, l2)?, dim)),
            _ => return Err(candle_core::Error::Msg("softmax gradient dtype mismatch".into())),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Rotary position embedding on interleaved `(even, odd)` feature pairs.
#[derive(Debug, Clone)]
pub struct Rope {
    head_dim: usize,
    base: f64,
}

impl Rope {
    pub fn new(head_dim: usize, base: f64) -> Self {
        Self { head_dim, base }
    }

    /// `(cos, sin)` tables of shape `(len, head_dim / 2, 1)`.
    pub fn tables(&self, len: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let half = self.head_dim / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for pos in 0..len {
            for i in 0..half {
                let theta = self.base.powf(-2.0 * i as f64 / self.head_dim as f64);
                let angle = pos as f64 * theta;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        let cos = Tensor::from_vec(cos, (len, half, 1), device)?.to_dtype(dtype)?;
        let sin = Tensor::from_vec(sin, (len, half, 1), device)?.to_dtype(dtype)?;
        Ok((cos, sin))
    }

    /// Rotates `x` of shape `(N, H, L, head_dim)` by position along `L`.
    pub fn apply(&self, x: &Tensor, cos: &Tensor, sin: &Tensor) -> Result<Tensor> {
        let (n, h, l, d) = x.dims4()?;
        let pairs = x.reshape((n, h, l, d / 2, 2))?;
        let even = pairs.narrow(4, 0, 1)?;
        let odd = pairs.narrow(4, 1, 1)?;
        let rot_even = (even.broadcast_mul(cos)? - odd.broadcast_mul(sin)?)?;
        let rot_odd = (even.broadcast_mul(sin)? + odd.broadcast_mul(cos)?)?;
        Ok(Tensor::cat(&[rot_even, rot_odd], 4)?.reshape((n, h, l, d))?)
    }
}

/// Multi-head self-attention with RoPE on queries and keys.
#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Pointwise,
    proj: Pointwise,
    heads: usize,
    rope: Rope,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rope_base: f64) -> Result<Self> {
        Ok(Self {
            qkv: Pointwise::new(store, &format!("{name}.qkv"), dim, 3 * dim, false, Init::TruncNormal)?,
            proj: Pointwise::new(store, &format!("{name}.proj"), dim, dim, false, Init::TruncNormal)?,
            heads,
            rope: Rope::new(dim / heads, rope_base),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l, c) = x.dims3()?;
        let d = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((n, l, 3, self.heads, d))?
            .permute((2, 0, 3, 1, 4))?;
        let (cos, sin) = self.rope.tables(l, x.dtype(), x.device())?;
        let q = (self.rope.apply(&qkv.get(0)?.contiguous()?, &cos, &sin)? / (d as f64).sqrt())?;
        let k = self.rope.apply(&qkv.get(1)?.contiguous()?, &cos, &sin)?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = q.matmul(&k.t()?.contiguous()?)?;
        let attn = softmax_last(&scores)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, l, c))?;
        self.proj.forward(&out)
    }
}

/// 1-D convolution along the sequence axis with "same" zero padding.
/// Kernel shape `(out, in, K)`.
#[derive(Debug, Clone)]
pub struct SeqConv {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl SeqConv {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            weight: store.create(&format!("{name}.weight"), &[out_dim, in_dim, kernel], Init::TruncNormal)?,
            bias: store.create(&format!("{name}.bias"), &[out_dim], Init::Zeros)?,
            kernel,
        })
    }

    /// `(N, C_in, L) -> (N, C_out, L)`.
    ///
    /// Runs as a height-1 conv2d: candle's conv1d kernel gradient is wrong
    /// for batches larger than one.
    pub fn forward_channels_first(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.kernel / 2;
        let x = x.pad_with_zeros(2, p, p)?.unsqueeze(2)?;
        let y = x.conv2d(&self.weight.unsqueeze(2)?, 0, 1, 1, 1)?.squeeze(2)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Convolution-augmented FFN: conv (C -> 2C_H), SwiGLU, conv (C_H -> C).
#[derive(Debug, Clone)]
pub struct ConvFfn {
    expand: SeqConv,
    reduce: SeqConv,
}

impl ConvFfn {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            expand: SeqConv::new(store, &format!("{name}.conv1"), dim, 2 * hidden, kernel)?,
            reduce: SeqConv::new(store, &format!("{name}.conv2"), hidden, dim, kernel)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.transpose(1, 2)?.contiguous()?;
        let h = swiglu(&self.expand.forward_channels_first(&x)?, 1)?;
        let y = self.reduce.forward_channels_first(&h)?;
        Ok(y.transpose(1, 2)?.contiguous()?)
    }
}

/// Macaron block: half-step ConvFFN, attention, half-step ConvFFN, each
/// pre-normalized and residual, followed by an output norm.
#[derive(Debug, Clone)]
pub struct MacaronBlock {
    norm_ffn1: BinNorm,
    ffn1: ConvFfn,
    norm_attn: BinNorm,
    attn: Attention,
    norm_ffn2: BinNorm,
    ffn2: ConvFfn,
    norm_out: BinNorm,
    scale: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockDims {
    pub dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub heads: usize,
    pub scale: f64,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl MacaronBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: BlockDims) -> Result<Self> {
        let norm = |store: &mut ParamStore, n: &str| BinNorm::new(store, &format!("{name}.{n}"), d.dim, d.norm_eps);
        Ok(Self {
            norm_ffn1: norm(store, "norm_ffn1")?,
            ffn1: ConvFfn::new(store, &format!("{name}.ffn1"), d.dim, d.hidden, d.kernel)?,
            norm_attn: norm(store, "norm_attn")?,
            attn: Attention::new(store, &format!("{name}.attn"), d.dim, d.heads, d.rope_base)?,
            norm_ffn2: norm(store, "norm_ffn2")?,
            ffn2: ConvFfn::new(store, &format!("{name}.ffn2"), d.dim, d.hidden, d.kernel)?,
            norm_out: norm(store, "norm_out")?,
            scale: d.scale,
        })
    }

    /// `(N, L, C) -> (N, L, C)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = (x + (self.ffn1.forward(&self.norm_ffn1.forward(x)?)? * self.scale)?)?;
        let y = (&y + self.attn.forward(&self.norm_attn.forward(&y)?)?)?;
        let y = (&y + (self.ffn2.forward(&self.norm_ffn2.forward(&y)?)? * self.scale)?)?;
        self.norm_out.forward(&y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        ParamStore::new(3, DType::F64, Device::Cpu)
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn rope_is_identity_at_position_zero() {
        let rope = Rope::new(4, 10_000.0);
        let (cos, sin) = rope.tables(3, DType::F64, &Device::Cpu).unwrap();
        let x = randn(&[1, 2, 3, 4], 1);
        let y = rope.apply(&x, &cos, &sin).unwrap();
        let a = x.get(0).unwrap().get(1).unwrap().get(0).unwrap().to_vec1::<f64>().unwrap();
        let b = y.get(0).unwrap().get(1).unwrap().get(0).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
        // rotation preserves norms at every position
        let nx = x.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let ny = y.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((nx - ny).abs() < 1e-12);
    }

    #[test]
    fn rope_scores_depend_on_relative_position() {
        let rope = Rope::new(8, 10_000.0);
        let (cos, sin) = rope.tables(6, DType::F64, &Device::Cpu).unwrap();
        let q = randn(&[1, 1, 1, 8], 2).broadcast_as((1, 1, 6, 8)).unwrap().contiguous().unwrap();
        let k = randn(&[1, 1, 1, 8], 3).broadcast_as((1, 1, 6, 8)).unwrap().contiguous().unwrap();
        let q = rope.apply(&q, &cos, &sin).unwrap();
        let k = rope.apply(&k, &cos, &sin).unwrap();
        let s = q.matmul(&k.t().unwrap()).unwrap().squeeze(0).unwrap().squeeze(0).unwrap();
        let s = s.to_vec2::<f64>().unwrap();
        for i in 0..5 {
            assert!((s[i][i + 1] - s[0][1]).abs() < 1e-12);
            assert!((s[i + 1][i] - s[1][0]).abs() < 1e-12);
            assert!((s[i][i] - s[0][0]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut st = store();
        let attn = Attention::new(&mut st, "a", 8, 2, 10_000.0).unwrap();
        let x = randn(&[3, 1, 8], 4);
        let out = attn.forward(&x).unwrap();
        // softmax over one key is 1: output = proj(v)
        let v = attn.qkv.forward(&x).unwrap().narrow(2, 16, 8).unwrap();
        let expect = attn.proj.forward(&v).unwrap();
        let diff = (out - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-14);
    }

    #[test]
    fn bin_norm_standardizes_each_vector() {
        let x = randn(&[2, 3, 4, 6], 5);
        let y = normalize_last(&x, 0.0).unwrap();
        let mean = y.mean_keepdim(D::Minus1).unwrap().abs().unwrap().max_all().unwrap();
        assert!(mean.to_scalar::<f64>().unwrap() < 1e-12);
        let var = y.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        let dev = (var - 1.0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(dev < 1e-6);
        // constant vectors stay finite thanks to eps
        let z = Tensor::zeros((2, 5), DType::F64, &Device::Cpu).unwrap();
        let n = normalize_last(&z, 1e-5).unwrap().to_vec2::<f64>().unwrap();
        assert!(n.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_ffn_keeps_shape_and_is_local() {
        let mut st = store();
        let ffn = ConvFfn::new(&mut st, "f", 8, 16, 3).unwrap();
        let x = randn(&[2, 10, 8], 6);
        let y = ffn.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 10, 8]);
        // receptive field of two K=3 convs is 5: position 9 ignores position 0
        let mut v = x.to_vec3::<f64>().unwrap();
        v[0][0] = vec![5.0; 8];
        let x2 = Tensor::new(v, &Device::Cpu).unwrap();
        let y2 = ffn.forward(&x2).unwrap();
        let a = y.get(0).unwrap().get(9).unwrap().to_vec1::<f64>().unwrap();
        let b = y2.get(0).unwrap().get(9).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seq_conv_weight_gradient_matches_direct_sum() {
        let mut st = store();
        let conv = SeqConv::new(&mut st, "c", 3, 4, 3).unwrap();
        let x = randn(&[2, 3, 7], 8);
        let r = randn(&[2, 4, 7], 9);
        let y = conv.forward_channels_first(&x).unwrap();
        let grads = y.mul(&r).unwrap().sum_all().unwrap().backward().unwrap();
        let g = grads.get(&conv.weight).unwrap().to_vec3::<f64>().unwrap();
        let xv = x.to_vec3::<f64>().unwrap();
        let rv = r.to_vec3::<f64>().unwrap();
        for o in 0..4 {
            for i in 0..3 {
                for k in 0..3 {
                    let mut s = 0.0;
                    for n in 0..2 {
                        for t in 0..7usize {
                            // input index t + k - 1, zero outside
                            if let Some(v) = (t + k).checked_sub(1).and_then(|j| xv[n][i].get(j)) {
                                s += rv[n][o][t] * v;
                            }
                        }
                    }
                    assert!((g[o][i][k] - s).abs() < 1e-12, "dW[{o},{i},{k}] {} vs {s}", g[o][i][k]);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = (randn(&[3, 7], 7) * 50.0).unwrap();
        let s = softmax_last(&x).unwrap().sum_keepdim(1).unwrap().to_vec2::<f64>().unwrap();
        for r in s {
            assert!((r[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_softmax_matches_composite_ops() {
        let x = candle_core::Var::from_tensor(&(randn(&[2, 3, 9], 8) * 4.0).unwrap()).unwrap();
        let w = randn(&[2, 3, 9], 9);
        let composite = |x: &Tensor| {
            let max = x.max_keepdim(D::Minus1).unwrap().detach();
            let e = x.broadcast_sub(&max).unwrap().exp().unwrap();
            e.broadcast_div(&e.sum_keepdim(D::Minus1).unwrap()).unwrap()
        };
        let a = softmax_last(x.as_tensor()).unwrap();
        let b = composite(x.as_tensor());
        let d = (&a - &b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-15);
        let ga = (a * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (b * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let ga = ga.get(x.as_tensor()).unwrap();
        let gb = gb.get(x.as_tensor()).unwrap();
        let d = (ga - gb).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-14, "{d}");
    }
}
