use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Graph, Parameter, Tensor, Var};

pub(crate) fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f32, std).expect("finite std");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Low-rank update `scale · x·A·B`.
#[derive(Debug, Clone)]
pub struct Lora {
    pub a: Parameter,
    pub b: Parameter,
    pub scale: f32,
}

impl Lora {
    pub fn new<R: Rng>(rng: &mut R, prefix: &str, fan_in: usize, fan_out: usize, rank: usize, alpha: f32) -> Self {
        Lora {
            a: Parameter::new(
                format!("{prefix}.lora_a"),
                normal_tensor(rng, &[fan_in, rank], 1.0 / (fan_in as f32).sqrt()),
            ),
            b: Parameter::new(format!("{prefix}.lora_b"), Tensor::zeros(&[rank, fan_out])),
            scale: alpha / rank as f32,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.value.cols()
    }

    /// `scale · A·B`, the same shape as the adapted weight.
    pub fn delta(&self) -> Result<Tensor> {
        let mut d = crate::tensor::matmul(&self.a.value, &self.b.value)?;
        d.scale_in_place(self.scale);
        Ok(d)
    }

    /// `scale · (x·A)·B` for a batch of rows.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let xa = crate::tensor::matmul(x, &self.a.value)?;
        let mut d = crate::tensor::matmul(&xa, &self.b.value)?;
        d.scale_in_place(self.scale);
        Ok(d)
    }
}

/// Affine map `x·W + b` with an optional adapter.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
    pub lora: Option<Lora>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, name: &str, fan_in: usize, fan_out: usize, gain: f32) -> Self {
        Linear {
            weight: Parameter::new(
                format!("{name}.weight"),
                normal_tensor(rng, &[fan_in, fan_out], gain / (fan_in as f32).sqrt()),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
            lora: None,
        }
    }

    pub fn name(&self) -> &str {
        self.weight.name.strip_suffix(".weight").unwrap_or(&self.weight.name)
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let mut y = g.matmul(x, w)?;
        if let Some(l) = &self.lora {
            let a = g.param(&l.a);
            let b = g.param(&l.b);
            let xa = g.matmul(x, a)?;
            let xab = g.matmul(xa, b)?;
            let d = g.scale(xab, l.scale)?;
            y = g.add(y, d)?;
        }
        let b = g.param(&self.bias);
        g.add_row(y, b)
    }

    pub fn attach_lora<R: Rng>(&mut self, rng: &mut R, rank: usize, alpha: f32) {
        let prefix = self.name().to_string();
        self.lora = Some(Lora::new(rng, &prefix, self.fan_in(), self.fan_out(), rank, alpha));
    }

    /// Folds the adapter into the weight and removes it.
    pub fn merge_lora(&mut self) -> Result<()> {
        if let Some(l) = self.lora.take() {
            self.weight.value.add_assign(&l.delta()?);
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.weight, &self.bias];
        if let Some(l) = &self.lora {
            v.push(&l.a);
            v.push(&l.b);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.weight, &mut self.bias];
        if let Some(l) = &mut self.lora {
            v.push(&mut l.a);
            v.push(&mut l.b);
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: Parameter,
    pub bias: Parameter,
}

impl Norm {
    pub fn new(name: &str, width: usize) -> Self {
        Norm {
            gain: Parameter::new(format!("{name}.gain"), Tensor::full(&[width], 1.0)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        let gain = g.param(&self.gain);
        let bias = g.param(&self.bias);
        g.layer_norm(x, gain, bias)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.gain, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gain, &mut self.bias]
    }
}
