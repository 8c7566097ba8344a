//! Parallel ReLU networks: forward pass, path regularizer, rescaling and
//! embeddings of standard and residual architectures.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Loss;
use crate::scalar::{relu, Scalar};

/// Units with path norm at or below this are treated as dead by [`ParallelNet::rescale`].
pub const DEAD_PATH: f64 = 1e-14;

/// One sub-network: hidden layers `W_1 .. W_{L-1}` and output weights `w_L`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubNet<T> {
    pub layers: Vec<Array2<T>>,
    pub output: Array1<T>,
}

impl<T: Scalar> SubNet<T> {
    pub fn new(layers: Vec<Array2<T>>, output: Array1<T>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a sub-network needs at least one hidden layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].ncols() != pair[1].nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {} has {} columns but layer {} has {} rows",
                    l + 1,
                    pair[0].ncols(),
                    l + 2,
                    pair[1].nrows()
                )));
            }
        }
        let last = layers.last().unwrap().ncols();
        if output.len() != last {
            return Err(Error::DimensionMismatch(format!(
                "output weights have {} entries, last hidden layer has {last} units",
                output.len()
            )));
        }
        Ok(Self { layers, output })
    }

    /// `[d, m_1, ..., m_{L-1}]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].nrows()];
        dims.extend(self.layers.iter().map(|w| w.ncols()));
        dims
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let layers = dims.windows(2).map(|p| Array2::zeros((p[0], p[1]))).collect();
        Self {
            layers,
            output: Array1::zeros(*dims.last().unwrap()),
        }
    }

    /// Post-activation of the last hidden layer, `n x m_{L-1}`.
    pub fn hidden(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut h = x.dot(&self.layers[0]).mapv(relu);
        for w in &self.layers[1..] {
            h = h.dot(w).mapv(relu);
        }
        h
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array1<T> {
        self.hidden(x).dot(&self.output)
    }

    /// Squared path mass into each unit of the last hidden layer:
    /// `q_j = sum over paths ending at j of |w_1j1|^2 prod w^2`.
    pub fn path_mass(&self) -> Array1<T> {
        let mut q = self.layers[0].map_axis(Axis(0), |c| c.dot(&c));
        for w in &self.layers[1..] {
            q = w.mapv(|a| a * a).t().dot(&q);
        }
        q
    }

    pub fn path_norm(&self) -> T {
        let q = self.path_mass();
        q.iter().zip(&self.output).map(|(&a, &b)| a * b * b).sum::<T>().sqrt()
    }

    pub fn weight_decay(&self) -> T {
        let layers: T = self.layers.iter().map(|w| w.iter().map(|&a| a * a).sum::<T>()).sum();
        layers + self.output.dot(&self.output)
    }
}

/// Sum of `K` sub-networks with identical layer dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelNet<T> {
    dims: Vec<usize>,
    pub subnets: Vec<SubNet<T>>,
    /// Optional `(s, l, i)` label per sub-network, set by recovery.
    pub provenance: Option<Vec<(usize, usize, usize)>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    Path,
    WeightDecay,
}

/// Training objective: `loss + beta * regularizer`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub beta: f64,
    #[serde(default)]
    pub loss: Loss,
    #[serde(default)]
    pub reg: Regularizer,
}

impl TrainSpec {
    pub fn new(beta: f64, loss: Loss, reg: Regularizer) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { beta, loss, reg })
    }
}

impl<T: Scalar> ParallelNet<T> {
    pub fn new(subnets: Vec<SubNet<T>>) -> Result<Self> {
        let first = subnets
            .first()
            .ok_or_else(|| Error::InvalidArgument("a parallel network needs at least one sub-network".into()))?;
        let dims = first.dims();
        if let Some(k) = subnets.iter().position(|s| s.dims() != dims) {
            return Err(Error::DimensionMismatch(format!(
                "sub-network {k} has dims {:?}, expected {dims:?}",
                subnets[k].dims()
            )));
        }
        Ok(Self {
            dims,
            subnets,
            provenance: None,
        })
    }

    /// Empty network with fixed dimensions (forward is identically zero).
    pub fn empty(dims: Vec<usize>) -> Self {
        Self {
            dims,
            subnets: Vec::new(),
            provenance: None,
        }
    }

    pub fn zeros(dims: &[usize], k: usize) -> Self {
        Self {
            dims: dims.to_vec(),
            subnets: (0..k).map(|_| SubNet::zeros(dims)).collect(),
            provenance: None,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    /// Number of layers `L` (hidden layers plus the output layer).
    pub fn depth(&self) -> usize {
        self.dims.len()
    }

    pub fn num_subnets(&self) -> usize {
        self.subnets.len()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array1<T>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "X has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut out = Array1::zeros(x.nrows());
        for s in &self.subnets {
            out += &s.forward(x);
        }
        Ok(out)
    }

    pub fn path_regularizer(&self) -> T {
        self.subnets.iter().map(SubNet::path_norm).sum()
    }

    pub fn weight_decay(&self) -> T {
        self.subnets.iter().map(SubNet::weight_decay).sum()
    }

    /// `sum_k |w_Lk|_2`, the regularizer of a rescaled network.
    pub fn output_norm_sum(&self) -> T {
        self.subnets.iter().map(|s| s.output.dot(&s.output).sqrt()).sum()
    }

    /// Moves every path norm into the output layer: afterwards each live
    /// unit of the last hidden layer has unit path mass and the path
    /// regularizer equals `sum_k |w_Lk|`. Dead units are zeroed and
    /// sub-networks with no live unit are dropped.
    pub fn rescale(&self) -> Self {
        let dead = T::of(DEAD_PATH);
        let mut subnets = Vec::with_capacity(self.subnets.len());
        let mut provenance = self.provenance.as_ref().map(|_| Vec::new());
        for (k, s) in self.subnets.iter().enumerate() {
            let r = s.path_mass().mapv(|q| q.sqrt());
            let mut s2 = s.clone();
            let last = s2.layers.last_mut().unwrap();
            let mut alive = false;
            for j in 0..r.len() {
                if r[j] > dead && s.output[j] != T::zero() {
                    last.column_mut(j).mapv_inplace(|a| a / r[j]);
                    s2.output[j] = s.output[j] * r[j];
                    alive = true;
                } else {
                    last.column_mut(j).fill(T::zero());
                    s2.output[j] = T::zero();
                }
            }
            if alive {
                subnets.push(s2);
                if let (Some(p), Some(src)) = (provenance.as_mut(), self.provenance.as_ref()) {
                    p.push(src[k]);
                }
            }
        }
        Self {
            dims: self.dims.clone(),
            subnets,
            provenance,
        }
    }

    /// `K` copies of one network; with `exact_sum` the output weights are
    /// divided by `K` so the sum reproduces the single network.
    pub fn embed_standard(layers: Vec<Array2<T>>, output: Array1<T>, k: usize, exact_sum: bool) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be >= 1".into()));
        }
        let mut base = SubNet::new(layers, output)?;
        if exact_sum {
            base.output.mapv_inplace(|a| a / T::of(k as f64));
        }
        Self::new(vec![base; k])
    }

    /// Two sub-networks whose sum is
    /// `relu(relu(relu(X W1) W2) W3) w4 + relu(X W3) w4` for `X >= 0`.
    /// The skip branch uses identity first and second layers, so `W1` and
    /// `W2` must be square of the input width.
    pub fn embed_resnet(w1: Array2<T>, w2: Array2<T>, w3: Array2<T>, w4: Array1<T>) -> Result<Self> {
        let d = w1.nrows();
        if w1.ncols() != d || w2.dim() != (d, d) || w3.nrows() != d {
            return Err(Error::DimensionMismatch(format!(
                "residual embedding needs W1, W2 of shape {d}x{d} and W3 with {d} rows"
            )));
        }
        let main = SubNet::new(vec![w1, w2, w3.clone()], w4.clone())?;
        let skip = SubNet::new(vec![Array2::eye(d), Array2::eye(d), w3], w4)?;
        Self::new(vec![main, skip])
    }

    pub fn objective(&self, x: ArrayView2<T>, y: ArrayView1<T>, spec: &TrainSpec) -> Result<T> {
        if y.len() != x.nrows() {
            return Err(Error::DimensionMismatch(format!("y has {} entries, X has {} rows", y.len(), x.nrows())));
        }
        let f = self.forward(x)?;
        let reg = match spec.reg {
            Regularizer::Path => self.path_regularizer(),
            Regularizer::WeightDecay => self.weight_decay(),
        };
        Ok(spec.loss.value(f.view(), y) + T::of(spec.beta) * reg)
    }

    /// Objective with `sum_k |w_Lk|` in place of the path regularizer.
    pub fn objective_rescaled(&self, x: ArrayView2<T>, y: ArrayView1<T>, spec: &TrainSpec) -> Result<T> {
        let f = self.forward(x)?;
        Ok(spec.loss.value(f.view(), y) + T::of(spec.beta) * self.output_norm_sum())
    }

    pub fn cast<U: Scalar>(&self) -> ParallelNet<U> {
        let conv2 = |a: &Array2<T>| a.mapv(|v| U::of(v.to_f64_lossy()));
        ParallelNet {
            dims: self.dims.clone(),
            subnets: self
                .subnets
                .iter()
                .map(|s| SubNet {
                    layers: s.layers.iter().map(conv2).collect(),
                    output: s.output.mapv(|v| U::of(v.to_f64_lossy())),
                })
                .collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let subnets = self
            .subnets
            .iter()
            .map(|s| {
                let mut mats: Vec<Vec<f64>> = s
                    .layers
                    .iter()
                    .map(|w| w.iter().map(|v| v.to_f64_lossy()).collect())
                    .collect();
                mats.push(s.output.iter().map(|v| v.to_f64_lossy()).collect());
                mats
            })
            .collect();
        let doc = NetDoc {
            l: self.depth(),
            k: self.num_subnets(),
            dims: self.dims.clone(),
            subnets,
            provenance: self.provenance.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetDoc = serde_json::from_str(text)?;
        if doc.dims.len() < 2 || doc.l != doc.dims.len() || doc.k != doc.subnets.len() {
            return Err(Error::InvalidArgument("inconsistent L, K or dims in network document".into()));
        }
        let mut subnets = Vec::with_capacity(doc.k);
        for mats in doc.subnets {
            if mats.len() != doc.l {
                return Err(Error::DimensionMismatch("sub-network has wrong number of layers".into()));
            }
            let mut layers = Vec::with_capacity(doc.l - 1);
            for (l, m) in mats[..doc.l - 1].iter().enumerate() {
                let shape = (doc.dims[l], doc.dims[l + 1]);
                let a = Array2::from_shape_vec(shape, m.iter().map(|&v| T::of(v)).collect())
                    .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
                layers.push(a);
            }
            let output = Array1::from_iter(mats[doc.l - 1].iter().map(|&v| T::of(v)));
            subnets.push(SubNet::new(layers, output)?);
        }
        if doc.provenance.as_ref().is_some_and(|p| p.len() != subnets.len()) {
            return Err(Error::InvalidArgument("provenance length differs from K".into()));
        }
        Ok(Self {
            dims: doc.dims,
            subnets,
            provenance: doc.provenance,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct NetDoc {
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "K")]
    k: usize,
    dims: Vec<usize>,
    subnets: Vec<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    provenance: Option<Vec<(usize, usize, usize)>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_path(w1: f64, w2: f64, w3: f64) -> ParallelNet<f64> {
        ParallelNet::new(vec![SubNet::new(vec![array![[w1]], array![[w2]]], array![w3]).unwrap()]).unwrap()
    }

    #[test]
    fn forward_kills_negative() {
        let net = ParallelNet::embed_standard(vec![Array2::eye(2), Array2::eye(2)], array![1.0, 1.0], 1, false).unwrap();
        assert_eq!(net.forward(array![[1.0, -2.0]].view()).unwrap(), array![1.0]);
        let two = ParallelNet::new(vec![net.subnets[0].clone(), net.subnets[0].clone()]).unwrap();
        assert_eq!(two.forward(array![[1.0, -2.0]].view()).unwrap(), array![2.0]);
        assert!(net.forward(array![[1.0]].view()).is_err());
    }

    #[test]
    fn scalar_path_values() {
        let net = scalar_path(2.0, 3.0, 5.0);
        assert_eq!(net.path_regularizer(), 30.0);
        let r = net.rescale();
        let s = &r.subnets[0];
        assert!((s.layers[1][[0, 0]] - 0.5).abs() < 1e-15);
        assert!((s.output[0] - 30.0).abs() < 1e-12);
        assert_eq!(r.output_norm_sum(), 30.0);
        let x = array![[1.5], [-2.0], [0.3]];
        assert_eq!(net.forward(x.view()).unwrap(), r.forward(x.view()).unwrap());
    }

    #[test]
    fn dead_subnet_pruned() {
        let live = SubNet::new(vec![array![[1.0, 2.0]], array![[1.0], [1.0]]], array![2.0]).unwrap();
        let dead = SubNet::new(vec![array![[1.0, 2.0]], array![[0.0], [0.0]]], array![2.0]).unwrap();
        let net = ParallelNet::new(vec![live, dead]).unwrap();
        let r = net.rescale();
        assert_eq!(r.num_subnets(), 1);
        let x = array![[1.0], [-1.0], [0.5]];
        assert_eq!(net.forward(x.view()).unwrap(), r.forward(x.view()).unwrap());
    }

    #[test]
    fn zero_net_objective() {
        let net = ParallelNet::<f64>::zeros(&[2, 3, 1], 4);
        let x = array![[1.0, 2.0], [0.5, -1.0]];
        let y = array![1.0, -2.0];
        let spec = TrainSpec::new(0.1, Loss::Squared, Regularizer::Path).unwrap();
        assert_eq!(net.objective(x.view(), y.view(), &spec).unwrap(), 2.5);
        assert!(TrainSpec::new(0.0, Loss::Squared, Regularizer::Path).is_err());
    }

    #[test]
    fn resnet_embedding() {
        let w1 = array![[1.0, -0.5], [0.2, 0.7]];
        let w2 = array![[0.3, 1.0], [-1.0, 0.4]];
        let w3 = array![[0.5, -0.2, 1.0], [0.1, 0.9, -0.3]];
        let w4 = array![1.0, -2.0, 0.5];
        let net = ParallelNet::embed_resnet(w1.clone(), w2.clone(), w3.clone(), w4.clone()).unwrap();
        let x = array![[0.5, 1.0], [2.0, 0.1], [0.0, 0.3]];
        let r = |a: Array2<f64>| a.mapv(|v: f64| v.max(0.0));
        let expect = r(r(r(x.dot(&w1)).dot(&w2)).dot(&w3)).dot(&w4) + r(x.dot(&w3)).dot(&w4);
        let got = net.forward(x.view()).unwrap();
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(ParallelNet::embed_resnet(w3.clone(), w2, w3, w4).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let mut net = scalar_path(0.1, 1.0 / 3.0, 5.0);
        net.provenance = Some(vec![(1, 2, 3)]);
        let back = ParallelNet::<f64>::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
    }
}
