use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors of one model, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on the tape. With `trainable == false` the
    /// leaves are constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.clear_grad();
                g.input(t.with_requires_grad(trainable))
            })
            .collect()
    }

    /// Adds the gradients computed by the last backward sweep into the
    /// stored tensors.
    pub fn accumulate_grads(&mut self, g: &Graph, vars: &[Var]) {
        assert_eq!(vars.len(), self.tensors.len(), "binding does not match store");
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Replaces the values of all tensors, keeping names and shapes.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for (i, (dst, src)) in self.tensors.iter_mut().zip(values).enumerate() {
            if dst.shape() != src.shape() {
                return Err(Error::Shape(format!(
                    "{}: shape {:?}, expected {:?}",
                    self.names[i],
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
}

/// First-order optimiser state for one parameter store (or one plain
/// tensor list). Moment buffers are indexed by parameter position.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    steps: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Adam with `beta = (0.5, 0.999)` and `eps = 1e-8`.
    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd {
            lr,
            momentum,
            weight_decay,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f64) {
        match &mut self.kind {
            OptimizerKind::Adam { lr: l, .. } | OptimizerKind::Sgd { lr: l, .. } => *l = lr,
        }
    }

    /// Applies one update from the stored gradients and clears them.
    /// Tensors without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let mut refs: Vec<&mut Tensor> = store.tensors.iter_mut().collect();
        self.step_tensors(&mut refs)
    }

    pub fn step_tensors(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer built for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for p in params.iter() {
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::divergence("non-finite gradient", Some(self.steps)));
                }
            }
        }
        self.steps += 1;
        let t = self.steps as f64;
        for (i, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    for j in 0..data.len() {
                        let g = grad[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        data[j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd {
                    lr,
                    momentum,
                    weight_decay,
                } => {
                    for j in 0..data.len() {
                        let g = grad[j] + weight_decay * data[j];
                        let d = if momentum == 0.0 {
                            g
                        } else {
                            m[j] = if self.steps == 1 { g } else { momentum * m[j] + g };
                            m[j]
                        };
                        data[j] -= lr * d;
                    }
                }
            }
            p.clear_grad();
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::divergence("non-finite parameter", Some(self.steps)));
        }
        Ok(())
    }
}
