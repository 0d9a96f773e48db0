//! Learnable parameter storage shared by the model, optimizer, checkpoints
//! and the gradient checker.
//!
//! Parameters live outside any tape as plain value/grad buffers. Each forward
//! pass binds the tensors it uses onto a fresh tape ([`ParamBind`]); after
//! `backward`, the harvested leaf gradients accumulate back here.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

/// One named parameter tensor with a persistent gradient accumulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PTensor {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl PTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        PTensor {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let mut p = Self::zeros(shape);
        p.value.fill(1.0);
        p
    }

    /// Gaussian init via Box-Muller.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(shape);
        for v in p.value.iter_mut() {
            let u1: f64 = rng.gen_range(1e-300..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            *v = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
        p
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Restore the grad buffer after deserialization.
    pub fn ensure_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
    }
}

/// Anything that exposes its parameter tensors in a stable order.
pub trait ParamGroup {
    fn visit(&self, f: &mut dyn FnMut(&str, &PTensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut PTensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.numel());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_mut(&mut |_, p| p.zero_grad());
    }

    /// Flatten all values into one vector (order = visit order).
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, p| out.extend_from_slice(&p.value));
        out
    }

    /// Write a flat vector back into the tensors. Lengths must match.
    fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |_, p| {
            let n = p.numel();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
    }

    /// Flatten accumulated gradients (order = visit order).
    fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, p| out.extend_from_slice(&p.grad));
        out
    }

    /// Label for a flat coordinate, e.g. `enc.blocks.0.wq[17]`.
    fn coord_name(&self, coord: usize) -> String {
        let mut off = 0;
        let mut label = format!("coord[{coord}]");
        self.visit(&mut |name, p| {
            if coord >= off && coord < off + p.numel() {
                label = format!("{name}[{}]", coord - off);
            }
            off += p.numel();
        });
        label
    }

    /// Segments of the flat layout as (name, offset, len).
    fn segments(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut off = 0;
        self.visit(&mut |name, p| {
            out.push((name.to_string(), off, p.numel()));
            off += p.numel();
        });
        out
    }
}

/// Exponential-moving-average update: `ema <- m*ema + (1-m)*online`.
/// Shapes must match pairwise; the two groups must share a layout.
pub fn ema_update(online: &dyn ParamGroup, ema: &mut dyn ParamGroup, m: f64) -> Result<()> {
    let mut snap: Vec<(String, Vec<f64>, Vec<usize>)> = Vec::new();
    online.visit(&mut |name, p| snap.push((name.to_string(), p.value.clone(), p.shape.clone())));
    let mut i = 0usize;
    let mut err: Option<Error> = None;
    ema.visit_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        match snap.get(i) {
            Some((oname, oval, oshape)) if oname == name && *oshape == p.shape => {
                for (e, o) in p.value.iter_mut().zip(oval) {
                    *e = m * *e + (1.0 - m) * o;
                }
            }
            _ => {
                err = Some(Error::ShapeMismatch {
                    op: "ema_update",
                    left: snap.get(i).map(|s| s.2.clone()).unwrap_or_default(),
                    right: p.shape.clone(),
                });
            }
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if i != snap.len() {
        return Err(Error::contract(
            "ema_update: parameter groups have different tensor counts",
        ));
    }
    Ok(())
}

/// Records which tape leaf corresponds to which named parameter during one
/// forward pass. Binding the same name twice reuses the existing leaf, so
/// weight sharing accumulates gradients on a single node.
#[derive(Debug, Default)]
pub struct ParamBind {
    entries: Vec<(String, TensorId)>,
    by_name: HashMap<String, TensorId>,
    frozen: bool,
}

impl ParamBind {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binder whose leaves carry no gradient, for inference passes.
    pub fn frozen() -> Self {
        ParamBind {
            frozen: true,
            ..Self::default()
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, p: &PTensor) -> TensorId {
        if let Some(&id) = self.by_name.get(name) {
            return id;
        }
        let id = tape.leaf(p.value.clone(), &p.shape, !self.frozen);
        self.entries.push((name.to_string(), id));
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Accumulate tape gradients into the group's grad buffers by name.
    pub fn harvest(&self, tape: &Tape, group: &mut dyn ParamGroup) {
        let mut grads: HashMap<&str, &[f64]> = HashMap::new();
        for (name, id) in &self.entries {
            if let Some(g) = tape.grad(*id) {
                grads.insert(name.as_str(), g);
            }
        }
        group.visit_mut(&mut |name, p| {
            if let Some(g) = grads.get(name) {
                for (acc, d) in p.grad.iter_mut().zip(*g) {
                    *acc += d;
                }
            }
        });
    }

    /// Harvested gradients as a map, for accumulation outside the group.
    pub fn grad_map(&self, tape: &Tape) -> HashMap<String, Vec<f64>> {
        let mut out = HashMap::new();
        for (name, id) in &self.entries {
            if let Some(g) = tape.grad(*id) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    struct Toy {
        a: PTensor,
        b: PTensor,
    }

    impl ParamGroup for Toy {
        fn visit(&self, f: &mut dyn FnMut(&str, &PTensor)) {
            f("a", &self.a);
            f("b", &self.b);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut PTensor)) {
            f("a", &mut self.a);
            f("b", &mut self.b);
        }
    }

    #[test]
    fn flatten_roundtrip_and_coord_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut toy = Toy {
            a: PTensor::randn(&[2, 3], 1.0, &mut rng),
            b: PTensor::randn(&[4], 1.0, &mut rng),
        };
        let flat = toy.flatten();
        assert_eq!(flat.len(), 10);
        let mut flat2 = flat.clone();
        flat2[7] = 99.0;
        toy.unflatten(&flat2);
        assert_eq!(toy.b.value[1], 99.0);
        assert_eq!(toy.coord_name(7), "b[1]");
        assert_eq!(toy.coord_name(5), "a[5]");
    }

    #[test]
    fn ema_midpoint_and_endpoints() {
        let mut online = Toy {
            a: PTensor::zeros(&[2]),
            b: PTensor::zeros(&[1]),
        };
        online.a.value = vec![4.0, 4.0];
        online.b.value = vec![4.0];
        let mut ema = Toy {
            a: PTensor::zeros(&[2]),
            b: PTensor::zeros(&[1]),
        };
        ema.a.value = vec![2.0, 2.0];
        ema.b.value = vec![2.0];

        let mut mid = Toy {
            a: ema.a.clone(),
            b: ema.b.clone(),
        };
        ema_update(&online, &mut mid, 0.5).unwrap();
        assert_eq!(mid.a.value, vec![3.0, 3.0]);

        let mut frozen = Toy {
            a: ema.a.clone(),
            b: ema.b.clone(),
        };
        ema_update(&online, &mut frozen, 1.0).unwrap();
        assert_eq!(frozen.a.value, vec![2.0, 2.0]);

        ema_update(&online, &mut ema, 0.0).unwrap();
        assert_eq!(ema.a.value, vec![4.0, 4.0]);
    }

    #[test]
    fn ema_shape_mismatch_errors() {
        let online = Toy {
            a: PTensor::zeros(&[2]),
            b: PTensor::zeros(&[1]),
        };
        let mut bad = Toy {
            a: PTensor::zeros(&[3]),
            b: PTensor::zeros(&[1]),
        };
        assert!(ema_update(&online, &mut bad, 0.5).is_err());
    }

    #[test]
    fn bind_dedupes_shared_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut toy = Toy {
            a: PTensor::randn(&[2, 2], 1.0, &mut rng),
            b: PTensor::zeros(&[1]),
        };
        let mut tape = Tape::new();
        let mut bind = ParamBind::new();
        let id1 = bind.bind(&mut tape, "a", &toy.a);
        let id2 = bind.bind(&mut tape, "a", &toy.a);
        assert_eq!(id1, id2);
        // use it twice: gradient should accumulate on the single leaf
        let m = tape.matmul(id1, id2).unwrap();
        let sq = tape.mul(m, m).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        toy.zero_grads();
        bind.harvest(&tape, &mut toy);
        assert!(toy.a.grad.iter().any(|v| *v != 0.0));
        assert!(toy.b.grad.iter().all(|v| *v == 0.0));
    }
}
