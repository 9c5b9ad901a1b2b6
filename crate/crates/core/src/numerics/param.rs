use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named trainable (or frozen) tensor.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    name: String,
    value: Tensor<T>,
    requires_grad: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
            requires_grad: true,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    /// Replaces the value; the shape may not change.
    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(
                "set_value",
                self.value.shape(),
                value.shape(),
            ));
        }
        self.value = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            value: self.value.cast(),
            requires_grad: self.requires_grad,
        }
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value().numel());
        n
    }

    fn param_bytes(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value().bytes());
        n
    }

    fn set_requires_grad(&mut self, on: bool) {
        self.visit_mut(&mut |p| p.set_requires_grad(on));
    }

    /// FNV-1a over names, shapes and value bits; any change to any parameter
    /// changes it.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |b: u64| {
            for byte in b.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        self.visit(&mut |p| {
            for &c in p.name().as_bytes() {
                mix(c as u64);
            }
            for &d in p.shape() {
                mix(d as u64);
            }
            for &v in p.value().data() {
                mix(v.bits());
            }
        });
        h
    }

    fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push((p.name().to_string(), p.value().clone())));
        out
    }

    /// Loads values by name; every parameter must be present with its shape.
    fn load_named(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let mut err = None;
        self.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match tensors.iter().find(|(n, _)| n == p.name()) {
                Some((_, t)) => {
                    if let Err(e) = p.set_value(t.clone()) {
                        err = Some(e);
                    }
                }
                None => err = Some(Error::Input(format!("missing tensor `{}`", p.name()))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

impl<T: Scalar> Module<T> for Param<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(self)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(self)
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for m in self {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for m in self {
            m.visit_mut(f);
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(m) = self {
            m.visit_mut(f);
        }
    }
}
