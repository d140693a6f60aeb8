//! Seeded parameter storage and the handful of layers the networks share.
//!
//! Parameters are drawn from a ChaCha stream owned by the store so that two
//! models built from the same seed are bit-identical.

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub struct ParamStore {
    vars: Vec<(String, Var)>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { vars: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed), dtype, device: Device::Cpu }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn register(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if self.vars.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.push((name.to_string(), var));
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.register(name, shape, values)
    }

    /// He-uniform initialisation for a layer with the given fan-in.
    pub fn he(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        self.uniform(name, shape, (6.0 / fan_in as f64).sqrt())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.register(name, shape, vec![value; n])
    }

    /// Replaces the values of an already registered parameter.
    pub fn overwrite(&self, name: &str, values: Vec<f64>) -> Result<()> {
        let (_, var) = self
            .vars
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Config(format!("no parameter `{name}`")))?;
        let t = Tensor::from_vec(values, var.dims(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn num_params(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Flattened `f32` copies of every parameter, in registration order.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(n, v)| {
                let t = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?;
                Ok((n.clone(), v.dims().to_vec(), t.to_vec1::<f32>()?))
            })
            .collect()
    }

    /// Overwrites parameters by name; every stored parameter must be present.
    pub fn import(&self, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        for (name, var) in &self.vars {
            let (_, dims, data) = tensors
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` missing from checkpoint")))?;
            if dims.as_slice() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {dims:?}, model expects {:?}",
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(data.clone(), dims.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let weight = ps.he(&format!("{name}.weight"), &[cout, cin, kernel, kernel], cin * kernel * kernel)?;
        let bias = Some(ps.constant(&format!("{name}.bias"), &[cout], 0.0)?);
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel / (stride * stride);
        let weight = ps.he(&format!("{name}.weight"), &[cin, cout, kernel, kernel], fan_in.max(1))?;
        let bias = ps.constant(&format!("{name}.bias"), &[cout], 0.0)?;
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?;
        y.broadcast_add(&self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = ps.he(&format!("{name}.weight"), &[fan_out, fan_in], fan_in)?;
        let bias = ps.constant(&format!("{name}.bias"), &[fan_out], 0.0)?;
        Ok(Self { weight, bias })
    }

    /// Linear layer whose bias starts at `bias_init` with a narrow weight range.
    pub fn with_bias(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias_init: f64) -> Result<Self> {
        let weight = ps.uniform(&format!("{name}.weight"), &[fan_out, fan_in], (1.0 / fan_in as f64).sqrt())?;
        let bias = ps.constant(&format!("{name}.bias"), &[fan_out], bias_init)?;
        Ok(Self { weight, bias })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = match x.rank() {
            2 => x.matmul(&self.weight.t()?)?,
            _ => x.broadcast_matmul(&self.weight.t()?)?,
        };
        y.broadcast_add(&self.bias)
    }
}

pub fn leaky_relu(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::leaky_relu(x, 0.2)
}

/// Adam without weight decay.
pub fn adam(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Result<AdamW> {
    Ok(AdamW::new(vars, ParamsAdamW { lr, beta1, beta2, eps: 1e-8, weight_decay: 0.0 })?)
}

/// One optimiser step; a non-finite loss aborts with the stage name.
pub fn step(opt: &mut AdamW, loss: &Tensor, stage: &str, step: usize) -> Result<f64> {
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::Divergence { stage: stage.to_string(), step, detail: format!("loss = {value}") });
    }
    opt.backward_step(loss)?;
    Ok(value)
}

/// Euclidean norm over the last dimension.
pub fn l2_norm_last(x: &Tensor) -> candle_core::Result<Tensor> {
    x.sqr()?.sum(D::Minus1)?.sqrt()
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let build = |seed| {
            let mut ps = ParamStore::new(seed, DType::F32);
            Conv2d::new(&mut ps, "c", 3, 4, 3, 1, 1).unwrap();
            ps.export().unwrap()
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::new(0, DType::F32);
        ps.constant("a", &[2], 0.0).unwrap();
        assert!(ps.constant("a", &[2], 0.0).is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let mut a = ParamStore::new(1, DType::F32);
        Linear::new(&mut a, "l", 3, 2).unwrap();
        let mut b = ParamStore::new(2, DType::F32);
        Linear::new(&mut b, "l", 3, 2).unwrap();
        b.import(&a.export().unwrap()).unwrap();
        assert_eq!(a.export().unwrap(), b.export().unwrap());
    }

    #[test]
    fn shapes() {
        let mut ps = ParamStore::new(0, DType::F32);
        let c = Conv2d::new(&mut ps, "c", 2, 5, 4, 2, 1).unwrap();
        let x = Tensor::zeros((1, 2, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(c.forward(&x).unwrap().dims(), &[1, 5, 4, 4]);
        let t = ConvTranspose2d::new(&mut ps, "t", 5, 3, 2, 2, 0).unwrap();
        assert_eq!(t.forward(&c.forward(&x).unwrap()).unwrap().dims(), &[1, 3, 8, 8]);
        let l = Linear::new(&mut ps, "l", 4, 6).unwrap();
        let x = Tensor::zeros((2, 3, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(l.forward(&x).unwrap().dims(), &[2, 3, 6]);
    }
}
