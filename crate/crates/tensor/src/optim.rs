use crate::nn::Module;
use crate::{Scalar, Tensor, Var};

/// Adam moments for one parameter list, indexed by visitation order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<M: Module<T> + ?Sized>(module: &M, beta1: f64, beta2: f64, eps: f64) -> Self {
        let shapes: Vec<Vec<usize>> = module.parameters().iter().map(|p| p.shape().to_vec()).collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One bias-corrected update. `grads` follow the module's visit order.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, grads: &[Var<T>], lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_mut("", &mut |_, p| {
            let g = grads[idx].value().data();
            let m = ms[idx].data_mut();
            let v = vs[idx].data_mut();
            let mut value = p.value().clone();
            for (((w, &gi), mi), vi) in value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
            *p = Var::param(value);
            idx += 1;
        });
        assert_eq!(idx, grads.len(), "gradient count does not match parameters");
    }
}
