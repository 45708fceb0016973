use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Named trainable tensors, initialized from a seeded stream so that model
/// construction is reproducible on CPU.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    /// When set, layers are built from detached views of these parameters
    /// instead of fresh draws.
    replay: Option<BTreeMap<String, Var>>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
            rng: ChaCha8Rng::seed_from_u64(seed),
            replay: None,
        }
    }

    /// A store that hands out gradient-free views sharing storage with
    /// `vars`, so a network built from it always sees the current weights
    /// but records no autodiff graph.
    pub fn detached(vars: &BTreeMap<String, Var>, dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
            rng: ChaCha8Rng::seed_from_u64(0),
            replay: Some(vars.clone()),
        }
    }

    fn replayed(&self, name: &str) -> Option<Tensor> {
        let vars = self.replay.as_ref()?;
        let var = vars.get(name).unwrap_or_else(|| panic!("no parameter `{name}` to replay"));
        Some(var.as_tensor().detach())
    }

    pub fn into_vars(self) -> BTreeMap<String, Var> {
        self.vars
    }

    fn insert(&mut self, name: String, t: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let out = var.as_tensor().clone();
        let prev = self.vars.insert(name.clone(), var);
        assert!(prev.is_none(), "parameter `{name}` registered twice");
        Ok(out)
    }

    /// He-uniform weights for a rectifier layer: U(-b, b) with
    /// b = sqrt(6 / fan_in).
    pub fn kaiming_uniform(&mut self, name: String, shape: [usize; 4], fan_in: usize) -> Result<Tensor> {
        if let Some(t) = self.replayed(&name) {
            return Ok(t);
        }
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let t = Tensor::from_vec(data, shape.to_vec(), &self.device)?;
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: String, len: usize) -> Result<Tensor> {
        if let Some(t) = self.replayed(&name) {
            return Ok(t);
        }
        let t = Tensor::zeros(len, DType::F64, &self.device)?;
        self.insert(name, t)
    }

    /// 2D convolution with He-uniform weight and zero bias.
    pub fn conv2d(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, padding: usize) -> Result<Conv2d> {
        let w = self.kaiming_uniform(format!("{prefix}.weight"), [c_out, c_in, k, k], c_in * k * k)?;
        let b = self.zeros(format!("{prefix}.bias"), c_out)?;
        Ok(Conv2d::new(
            w,
            Some(b),
            Conv2dConfig {
                padding,
                ..Default::default()
            },
        ))
    }

    /// Transposed convolution. The weight is `(c_in, c_out, k, k)`; fan-in is
    /// taken from dimension 1, as in the common reference frameworks.
    pub fn conv_transpose2d(
        &mut self,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        cfg: ConvTranspose2dConfig,
    ) -> Result<ConvTranspose2d> {
        let w = self.kaiming_uniform(format!("{prefix}.weight"), [c_in, c_out, k, k], c_out * k * k)?;
        let b = self.zeros(format!("{prefix}.bias"), c_out)?;
        Ok(ConvTranspose2d::new(w, Some(b), cfg))
    }
}

/// `(out_len, in_len)` linear-interpolation matrix with half-pixel centres
/// (`align_corners = false`).
pub fn interpolation_matrix(out_len: usize, in_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - frac;
        m[o * in_len + i1] += frac;
    }
    Ok(Tensor::from_vec(m, (out_len, in_len), device)?.to_dtype(dtype)?)
}

/// Differentiable bilinear resize of a `B×C×H×W` tensor, expressed as two
/// matrix products so that it has a gradient.
#[derive(Debug, Clone)]
pub struct BilinearResize {
    rows: Tensor,
    cols_t: Tensor,
}

impl BilinearResize {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize), dtype: DType, device: &Device) -> Result<Self> {
        let rows = interpolation_matrix(out_hw.0, in_hw.0, dtype, device)?;
        let cols_t = interpolation_matrix(out_hw.1, in_hw.1, dtype, device)?.t()?.contiguous()?;
        Ok(Self { rows, cols_t })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let xs = xs.broadcast_matmul(&self.cols_t)?;
        Ok(self.rows.broadcast_matmul(&xs)?)
    }
}

/// 2×2 max pooling with stride 2 built from a reshape and two reductions.
/// candle's `max_pool2d` backward scales a unique maximum's gradient by the
/// window fraction (1/4) instead of passing it through; reductions route
/// the full gradient to the maximum.
pub fn max_pool2x2(xs: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = xs.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(crate::error::Error::Shape(format!("cannot 2×2 pool a {h}×{w} map")));
    }
    let pooled = xs
        .contiguous()?
        .reshape((b * c * h / 2, 2, w / 2, 2))?
        .max(3)?
        .max(1)?;
    Ok(pooled.reshape((b, c, h / 2, w / 2))?)
}
