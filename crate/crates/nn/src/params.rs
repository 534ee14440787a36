//! Named parameter storage, graph binding, and the Adam optimizer.
//!
//! Parameters live outside any graph; each training step binds the ones it
//! uses as leaf nodes, runs backward, and applies the collected gradients.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::graph::{Gradients, Graph, NodeId};

#[derive(Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        let prev = self.entries.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Name-sorted iteration (BTreeMap order), the canonical order for
    /// serialization and norm computations.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    // -- initializers; draw order is the caller's construction order --

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    pub fn init_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.insert(name, Array2::from_elem((rows, cols), value));
    }

    pub fn init_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        lo: f64,
        hi: f64,
        rng: &mut impl Rng,
    ) {
        let v = Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(lo..hi));
        self.insert(name, v);
    }

    /// Xavier/Glorot uniform for a (fan_in x fan_out) weight.
    pub fn init_xavier(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.init_uniform(name, rows, cols, -bound, bound, rng);
    }

    pub fn init_normal(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) {
        // Box-Muller keeps the dependency surface to `Rng` alone.
        let v = Array2::from_shape_simple_fn((rows, cols), || {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        self.insert(name, v);
    }
}

/// Records which parameters a graph bound, so gradients can be routed back.
#[derive(Default)]
pub struct Binder {
    pub bound: Vec<(String, NodeId)>,
    index: BTreeMap<String, usize>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bind a parameter as a leaf (copying its current value); repeated binds
    /// of the same name return the same node.
    pub fn bind(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> NodeId {
        if let Some(&i) = self.index.get(name) {
            return self.bound[i].1;
        }
        let id = g.leaf(store.get(name).clone());
        self.index.insert(name.to_string(), self.bound.len());
        self.bound.push((name.to_string(), id));
        id
    }

    /// Pull this binder's parameter gradients out of a backward result.
    /// Parameters the loss never touched are simply absent.
    pub fn collect_grads(&self, grads: &mut Gradients) -> Vec<(String, Array2<f64>)> {
        self.bound
            .iter()
            .filter_map(|(name, id)| grads.take(*id).map(|g| (name.clone(), g)))
            .collect()
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over the given gradients, with optional global-norm clipping.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        mut grads: Vec<(String, Array2<f64>)>,
        clip_norm: Option<f64>,
    ) {
        if grads.is_empty() {
            return;
        }
        // Sort for order-independent determinism regardless of bind order.
        grads.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(clip) = clip_norm {
            let norm = grads
                .iter()
                .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = clip / norm;
                for (_, g) in grads.iter_mut() {
                    g.mapv_inplace(|x| x * s);
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(&mut *m).and(&g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let p = store.get_mut(&name);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}
