//! Adam with decoupled weight decay on weight tensors only.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::checkpoint::Record;
use crate::error::{Error, Result};
use crate::nn::Param;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    pub config: AdamConfig,
    params: Vec<Param>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: Vec<Param>, config: AdamConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for p in &params {
            m.insert(p.name.clone(), p.var.zeros_like()?);
            v.insert(p.name.clone(), p.var.zeros_like()?);
        }
        Ok(Self {
            config,
            params,
            m,
            v,
            step: 0,
        })
    }

    /// Names of parameters that do and do not take weight decay.
    pub fn groups(&self) -> (Vec<&str>, Vec<&str>) {
        let (d, n): (Vec<&Param>, Vec<&Param>) = self.params.iter().partition(|p| p.decay);
        (
            d.into_iter().map(|p| p.name.as_str()).collect(),
            n.into_iter().map(|p| p.name.as_str()).collect(),
        )
    }

    pub fn apply(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for p in &self.params {
            // parameters outside the graph (e.g. unused generators) keep zero gradients
            let g = match grads.get(p.var.as_tensor()) {
                Some(g) => g.clone(),
                None => p.var.zeros_like()?,
            };
            let m = self.m.get_mut(&p.name).expect("moment per param");
            *m = ((&*m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = self.v.get_mut(&p.name).expect("moment per param");
            *v = ((&*v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let mhat = (&*m / bc1)?;
            let vhat = (&*v / bc2)?;
            let mut update = (mhat / (vhat.sqrt()? + c.eps)?)?;
            if p.decay && c.weight_decay > 0.0 {
                update = (update + (p.var.as_tensor() * c.weight_decay)?)?;
            }
            let next = (p.var.as_tensor() - (update * c.lr)?)?;
            p.var.set(&next)?;
        }
        Ok(())
    }

    pub fn records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        for (kind, map) in [("m", &self.m), ("v", &self.v)] {
            for (name, t) in map {
                out.push(Record {
                    name: format!("adam.{kind}.{name}"),
                    layer: "optimizer".into(),
                    tensor: t.clone(),
                });
            }
        }
        out
    }

    pub fn load(&mut self, tensors: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        for (kind, map) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (name, t) in map.iter_mut() {
                let key = format!("adam.{kind}.{name}");
                let src = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks optimizer state '{key}'")))?;
                *t = src.to_dtype(t.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}
