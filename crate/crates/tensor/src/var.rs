use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::{Scalar, Tensor};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

/// Whether new operations are currently being recorded for differentiation.
pub fn is_recording() -> bool {
    RECORDING.with(|r| r.get())
}

/// Restores the previous recording state on drop.
pub struct RecordGuard {
    previous: bool,
}

impl Drop for RecordGuard {
    fn drop(&mut self) {
        RECORDING.with(|r| r.set(self.previous));
    }
}

fn set_recording(on: bool) -> RecordGuard {
    let previous = RECORDING.with(|r| r.replace(on));
    RecordGuard { previous }
}

/// Runs `f` with recording switched off; every result is a constant.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = set_recording(false);
    f()
}

/// Local derivative rule of one recorded operation.
///
/// `backward` receives the upstream gradient, the operation's inputs and
/// its own output, and returns one gradient per input. It must be written
/// in terms of `Var` operations so that, when the backward pass itself is
/// recorded, the result can be differentiated again. Entries of `needs`
/// that are `false` may be answered with `None`.
pub(crate) trait Backward<T: Scalar> {
    fn backward(&self, g: &Var<T>, inputs: &[Var<T>], out: &Var<T>, needs: &[bool]) -> Vec<Option<Var<T>>>;
}

struct GradFn<T: Scalar> {
    inputs: Vec<Var<T>>,
    rule: Box<dyn Backward<T>>,
}

struct Node<T: Scalar> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// A tensor in the differentiation graph.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?}, grad={})", self.0.id, self.0.value, self.0.requires_grad)
    }
}

impl<T: Scalar> Var<T> {
    fn new_node(value: Tensor<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad_fn,
        }))
    }

    /// A trainable leaf.
    pub fn param(value: Tensor<T>) -> Self {
        Self::new_node(value, true, None)
    }

    /// A leaf that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::new_node(value, false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::constant(Tensor::full(shape, value))
    }

    pub(crate) fn from_op(value: Tensor<T>, inputs: Vec<Var<T>>, rule: impl Backward<T> + 'static) -> Self {
        if is_recording() && inputs.iter().any(|v| v.requires_grad()) {
            Self::new_node(
                value,
                true,
                Some(GradFn {
                    inputs,
                    rule: Box::new(rule),
                }),
            )
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }
}

/// Gradients of a scalar `output` with respect to each of `inputs`.
///
/// Inputs the output does not depend on get a zero gradient. With
/// `create_graph` the backward pass is recorded, so the returned gradients
/// can themselves be differentiated.
pub fn grad<T: Scalar>(output: &Var<T>, inputs: &[&Var<T>], create_graph: bool) -> Vec<Var<T>> {
    assert_eq!(
        output.value().numel(),
        1,
        "grad() needs a scalar output, got shape {:?}",
        output.shape()
    );
    let seed = Var::constant(Tensor::ones(output.shape()));
    grad_with_seed(output, &seed, inputs, create_graph)
}

/// Vector-Jacobian product: gradients of `<seed, output>`.
pub fn grad_with_seed<T: Scalar>(
    output: &Var<T>,
    seed: &Var<T>,
    inputs: &[&Var<T>],
    create_graph: bool,
) -> Vec<Var<T>> {
    assert_eq!(seed.shape(), output.shape(), "seed shape must match output");
    let wanted: HashMap<usize, usize> = inputs.iter().enumerate().map(|(i, v)| (v.id(), i)).collect();

    // Post-order DFS: inputs of a node come before the node.
    let mut order: Vec<Var<T>> = Vec::new();
    let mut visited: HashMap<usize, bool> = HashMap::new();
    if output.requires_grad() {
        let mut stack: Vec<(Var<T>, bool)> = vec![(output.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if visited.contains_key(&node.id()) {
                continue;
            }
            visited.insert(node.id(), false);
            stack.push((node.clone(), true));
            if let Some(gf) = &node.0.grad_fn {
                for inp in &gf.inputs {
                    if inp.requires_grad() && !visited.contains_key(&inp.id()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }
    }

    // A node needs a gradient when some requested input lies beneath it.
    let mut needed: HashMap<usize, bool> = HashMap::with_capacity(order.len());
    for node in &order {
        let mut need = wanted.contains_key(&node.id());
        if let Some(gf) = &node.0.grad_fn {
            need |= gf.inputs.iter().any(|i| needed.get(&i.id()).copied().unwrap_or(false));
        }
        needed.insert(node.id(), need);
    }

    let _guard = set_recording(create_graph);
    let mut grads: HashMap<usize, Var<T>> = HashMap::new();
    if output.requires_grad() {
        grads.insert(output.id(), seed.clone());
    }
    let mut result: Vec<Option<Var<T>>> = vec![None; inputs.len()];
    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else { continue };
        if let Some(&slot) = wanted.get(&node.id()) {
            result[slot] = Some(g.clone());
            // Duplicate entries in `inputs` share one gradient.
            for (j, inp) in inputs.iter().enumerate() {
                if j != slot && inp.id() == node.id() {
                    result[j] = Some(g.clone());
                }
            }
        }
        let Some(gf) = &node.0.grad_fn else { continue };
        let needs: Vec<bool> = gf
            .inputs
            .iter()
            .map(|i| i.requires_grad() && needed.get(&i.id()).copied().unwrap_or(false))
            .collect();
        if !needs.iter().any(|&n| n) {
            continue;
        }
        let local = gf.rule.backward(&g, &gf.inputs, node, &needs);
        for ((inp, lg), need) in gf.inputs.iter().zip(local).zip(&needs) {
            if !need {
                continue;
            }
            let Some(lg) = lg else { continue };
            debug_assert_eq!(lg.shape(), inp.shape(), "gradient shape mismatch");
            let acc = match grads.remove(&inp.id()) {
                Some(prev) => prev.add(&lg),
                None => lg,
            };
            grads.insert(inp.id(), acc);
        }
    }
    result
        .into_iter()
        .zip(inputs)
        .map(|(g, inp)| g.unwrap_or_else(|| Var::constant(Tensor::zeros(inp.shape()))))
        .collect()
}
