//! Non-convex training of three-layer parallel networks by minibatch SGD
//! (with momentum) or Adam, using exact backpropagated gradients.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Loss;
use crate::network::{ParallelNet, Regularizer, SubNet, TrainSpec};
use crate::scalar::Scalar;

/// Smoothing inside the square root of the path norm.
pub const PATH_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { b1: f64, b2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub reg: Regularizer,
    pub beta: f64,
    pub init_scale: f64,
    /// Number of sub-networks.
    pub k: usize,
    #[serde(default)]
    pub loss: Loss,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.batch == 0 || self.k == 0 || !(self.beta >= 0.0) || !(self.init_scale > 0.0) {
            return Err(Error::InvalidArgument(
                "SGD config needs lr >= 0, batch >= 1, K >= 1, beta >= 0, init_scale > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn spec(&self) -> TrainSpec {
        TrainSpec {
            beta: self.beta,
            loss: self.loss,
            reg: self.reg,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub objective: f64,
    pub loss: f64,
    pub reg: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    pub init: String,
}

impl History {
    pub fn final_objective(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.objective)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Csv {
            row: 0,
            col: 0,
            msg: e.to_string(),
        };
        w.write_record(["epoch", "objective", "loss", "reg"]).map_err(err)?;
        for r in &self.rows {
            w.write_record(&[r.epoch.to_string(), r.objective.to_string(), r.loss.to_string(), r.reg.to_string()])
                .map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Gaussian initialization with standard deviation `init_scale / sqrt(fan_in)`.
pub fn init_net<T: Scalar>(dims: &[usize], k: usize, init_scale: f64, seed: u64) -> ParallelNet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize| {
        let sd = init_scale / (rows as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| { let z: f64 = StandardNormal.sample(&mut rng); T::of(sd * z) })
    };
    let subnets = (0..k)
        .map(|_| {
            let layers: Vec<Array2<T>> = dims.windows(2).map(|p| draw(p[0], p[1])).collect();
            let last = *dims.last().unwrap();
            let output = draw(last, 1).column(0).to_owned();
            SubNet { layers, output }
        })
        .collect();
    ParallelNet::new(subnets).expect("consistent dims")
}

/// Gradient of `loss + beta * reg` for an `L = 3` network, returned in the
/// shape of the network. ReLU has derivative 0 at 0; the path term uses
/// `sqrt(S + eps)` so a sub-network with zero path mass gets zero gradient.
pub fn grad_nonconvex<T: Scalar>(
    net: &ParallelNet<T>,
    x: ArrayView2<T>,
    y: ArrayView1<T>,
    spec: &TrainSpec,
) -> Result<ParallelNet<T>> {
    grad_scaled(net, x, y, spec, T::one())
}

/// As [`grad_nonconvex`] with the loss part multiplied by `loss_scale`.
fn grad_scaled<T: Scalar>(
    net: &ParallelNet<T>,
    x: ArrayView2<T>,
    y: ArrayView1<T>,
    spec: &TrainSpec,
    loss_scale: T,
) -> Result<ParallelNet<T>> {
    if net.depth() != 3 {
        return Err(Error::InvalidArgument(format!(
            "gradients are implemented for L = 3, got L = {}",
            net.depth()
        )));
    }
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch("y length differs from rows of X".into()));
    }
    let f = net.forward(x)?;
    let g = spec.loss.gradient(f.view(), y) * loss_scale;
    let beta = T::of(spec.beta);
    let eps = T::of(PATH_EPS);
    let subnets = net
        .subnets
        .iter()
        .map(|s| {
            let (w1, w2, w3) = (&s.layers[0], &s.layers[1], &s.output);
            let z1 = x.dot(w1);
            let h1 = z1.mapv(|v| v.max(T::zero()));
            let z2 = h1.dot(w2);
            let h2 = z2.mapv(|v| v.max(T::zero()));
            let gw3 = h2.t().dot(&g);
            let step = |z: T| if z > T::zero() { T::one() } else { T::zero() };
            let mut d2 = g.view().insert_axis(Axis(1)).dot(&w3.view().insert_axis(Axis(0)));
            d2.zip_mut_with(&z2, |a, &z| *a = *a * step(z));
            let gw2 = h1.t().dot(&d2);
            let mut d1 = d2.dot(&w2.t());
            d1.zip_mut_with(&z1, |a, &z| *a = *a * step(z));
            let gw1 = x.t().dot(&d1);
            let (mut gw1, mut gw2, mut gw3) = (gw1, gw2, gw3);
            match spec.reg {
                Regularizer::WeightDecay => {
                    let two = T::of(2.0) * beta;
                    gw1.scaled_add(two, w1);
                    gw2.scaled_add(two, w2);
                    gw3.scaled_add(two, w3);
                }
                Regularizer::Path => {
                    let a = w1.map_axis(Axis(0), |c| c.dot(&c));
                    let b = w2.mapv(|v| v * v);
                    let c = w3.mapv(|v| v * v);
                    let total = a.dot(&b.dot(&c));
                    let r = (total + eps).sqrt();
                    let bc = b.dot(&c);
                    let ab = b.t().dot(&a);
                    for j in 0..w1.ncols() {
                        let f = beta * bc[j] / r;
                        gw1.column_mut(j).scaled_add(f, &w1.column(j));
                    }
                    for ((j1, j2), gv) in gw2.indexed_iter_mut() {
                        *gv += beta * w2[[j1, j2]] * a[j1] * c[j2] / r;
                    }
                    for j in 0..w3.len() {
                        gw3[j] += beta * w3[j] * ab[j] / r;
                    }
                }
            }
            SubNet {
                layers: vec![gw1, gw2],
                output: gw3,
            }
        })
        .collect();
    ParallelNet::new(subnets)
}

fn for_each_param<T: Scalar>(net: &mut ParallelNet<T>, mut f: impl FnMut(usize, &mut T)) {
    let mut idx = 0;
    for s in &mut net.subnets {
        for w in &mut s.layers {
            for v in w.iter_mut() {
                f(idx, v);
                idx += 1;
            }
        }
        for v in s.output.iter_mut() {
            f(idx, v);
            idx += 1;
        }
    }
}

fn params<T: Scalar>(net: &ParallelNet<T>) -> Vec<T> {
    let mut out = Vec::new();
    let mut net = net.clone();
    for_each_param(&mut net, |_, v| out.push(*v));
    out
}

fn record<T: Scalar>(net: &ParallelNet<T>, x: ArrayView2<T>, y: ArrayView1<T>, spec: &TrainSpec, epoch: usize) -> Result<HistoryRow> {
    let f = net.forward(x)?;
    let loss = spec.loss.value(f.view(), y).to_f64_lossy();
    let reg = match spec.reg {
        Regularizer::Path => net.path_regularizer(),
        Regularizer::WeightDecay => net.weight_decay(),
    }
    .to_f64_lossy();
    let objective = loss + spec.beta * reg;
    if !objective.is_finite() {
        return Err(Error::Divergence { iter: epoch, objective });
    }
    Ok(HistoryRow {
        epoch,
        objective,
        loss,
        reg,
    })
}

/// Minibatch training from `net0`; the minibatch loss is rescaled by
/// `n / batch` so each step follows an unbiased estimate of the full
/// gradient. Row 0 of the history is the initial objective.
pub fn train_sgd<T: Scalar>(
    net0: &ParallelNet<T>,
    x: ArrayView2<T>,
    y: ArrayView1<T>,
    config: &SgdConfig,
) -> Result<(ParallelNet<T>, History)> {
    config.validate()?;
    let spec = config.spec();
    let n = x.nrows();
    let mut net = net0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = History {
        rows: vec![record(&net, x, y, &spec, 0)?],
        init: format!("gaussian sd = {} / sqrt(fan_in)", config.init_scale),
    };
    let np = params(&net).len();
    let mut m1 = vec![T::zero(); np];
    let mut m2 = vec![T::zero(); np];
    let mut t = 0i32;
    let lr = T::of(config.lr);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let scale = T::of(n as f64 / chunk.len() as f64);
            let grad = grad_scaled(&net, xb.view(), yb.view(), &spec, scale)?;
            let g = params(&grad);
            t += 1;
            match config.optimizer {
                Optimizer::Sgd { momentum } => {
                    let mom = T::of(momentum);
                    for_each_param(&mut net, |i, v| {
                        m1[i] = mom * m1[i] + g[i];
                        *v -= lr * m1[i];
                    });
                }
                Optimizer::Adam { b1, b2, eps } => {
                    let (b1t, b2t) = (T::of(b1), T::of(b2));
                    let c1 = T::one() - T::of(b1.powi(t));
                    let c2 = T::one() - T::of(b2.powi(t));
                    let e = T::of(eps);
                    for_each_param(&mut net, |i, v| {
                        m1[i] = b1t * m1[i] + (T::one() - b1t) * g[i];
                        m2[i] = b2t * m2[i] + (T::one() - b2t) * g[i] * g[i];
                        let mh = m1[i] / c1;
                        let vh = m2[i] / c2;
                        *v -= lr * mh / (vh.sqrt() + e);
                    });
                }
            }
        }
        history.rows.push(record(&net, x, y, &spec, epoch)?);
    }
    Ok((net, history))
}

/// Independent runs from `init_net(dims, K, ...)`, one per seed, in parallel.
pub fn train_seeds<T: Scalar>(
    dims: &[usize],
    x: ArrayView2<T>,
    y: ArrayView1<T>,
    config: &SgdConfig,
    seeds: &[u64],
) -> Result<Vec<(ParallelNet<T>, History)>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = SgdConfig { seed, ..config.clone() };
            let net0 = init_net(dims, config.k, config.init_scale, seed);
            train_sgd(&net0, x, y, &cfg)
        })
        .collect()
}

/// Flattened gradient, in the parameter order used by the optimizers.
pub fn flatten<T: Scalar>(net: &ParallelNet<T>) -> Array1<T> {
    Array1::from(params(net))
}

/// Writes a flat parameter vector back into a network of the same shape.
pub fn unflatten<T: Scalar>(shape: &ParallelNet<T>, flat: &[T]) -> ParallelNet<T> {
    let mut net = shape.clone();
    for_each_param(&mut net, |i, v| *v = flat[i]);
    net
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn scalar_path_gradient() {
        let net = ParallelNet::new(vec![SubNet::new(vec![array![[2.0]], array![[3.0]]], array![5.0]).unwrap()]).unwrap();
        let spec = TrainSpec::new(1.0, Loss::Squared, Regularizer::Path).unwrap();
        // empty data: only the regularizer contributes
        let x = Array2::<f64>::zeros((0, 1));
        let y = Array1::<f64>::zeros(0);
        let g = grad_nonconvex(&net, x.view(), y.view(), &spec).unwrap();
        assert!((g.subnets[0].layers[0][[0, 0]] - 15.0).abs() < 1e-9);
        assert!((g.subnets[0].layers[1][[0, 0]] - 10.0).abs() < 1e-9);
        assert!((g.subnets[0].output[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_keeps_net() {
        let net = init_net::<f64>(&[2, 3, 1], 2, 1.0, 4);
        let x = array![[1.0, 0.5], [-0.3, 2.0], [0.2, -1.0]];
        let y = array![1.0, 0.0, -1.0];
        let cfg = SgdConfig {
            optimizer: Optimizer::Sgd { momentum: 0.9 },
            lr: 0.0,
            batch: 2,
            epochs: 3,
            seed: 1,
            reg: Regularizer::Path,
            beta: 0.1,
            init_scale: 1.0,
            k: 2,
            loss: Loss::Squared,
        };
        let (out, hist) = train_sgd(&net, x.view(), y.view(), &cfg).unwrap();
        assert_eq!(out, net);
        assert!(hist.rows.windows(2).all(|w| w[0].objective == w[1].objective));
        assert_eq!(hist.rows.len(), 4);
    }
}
