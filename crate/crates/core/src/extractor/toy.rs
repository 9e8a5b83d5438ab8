use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FeatureBatch;
use crate::error::{Error, Result, SolverError};
use crate::etf::EtfSimplex;

/// A frozen map from inputs to features.
pub trait FeatureExtractor: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn forward(&self, x: ArrayView1<f64>) -> Array1<f64>;
    /// `∂f/∂x` at `x`, output_dim × input_dim.
    fn jacobian(&self, x: ArrayView1<f64>) -> Array2<f64>;
}

/// Passes vectors through unchanged; used when features are given directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityExtractor {
    pub dim: usize,
}

impl FeatureExtractor for IdentityExtractor {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.to_owned()
    }

    fn jacobian(&self, _x: ArrayView1<f64>) -> Array2<f64> {
        Array2::eye(self.dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }
}

/// Trainable two-layer map `x ↦ W2·act(W1x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub activation: Activation,
}

impl Mlp {
    /// Gaussian weights scaled by fan-in, zero biases.
    pub fn random(input: usize, hidden: usize, output: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n1 = Normal::new(0.0, 1.0 / (input as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).unwrap();
        Mlp {
            w1: Array2::from_shape_fn((hidden, input), |_| n1.sample(&mut rng)),
            b1: Array1::zeros(hidden),
            w2: Array2::from_shape_fn((output, hidden), |_| n2.sample(&mut rng)),
            b2: Array1::zeros(output),
            activation,
        }
    }

    /// Linear map equal to the identity.
    pub fn identity(dim: usize) -> Self {
        Mlp {
            w1: Array2::eye(dim),
            b1: Array1::zeros(dim),
            w2: Array2::eye(dim),
            b2: Array1::zeros(dim),
            activation: Activation::Identity,
        }
    }

    pub fn freeze(self) -> ToyExtractor {
        ToyExtractor { net: self }
    }

    fn pre_activation(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w1.t()) + &self.b1
    }

    /// Rows of `x` mapped through the network.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let a = self.pre_activation(x).mapv(|z| self.activation.apply(z));
        a.dot(&self.w2.t()) + &self.b2
    }

    /// Mean squared distance to the target rows, `(1/n)Σ‖f(x_i) − t_i‖²`,
    /// and its gradient with respect to every parameter.
    pub fn target_loss(&self, x: ArrayView2<f64>, targets: ArrayView2<f64>) -> (f64, Mlp) {
        let n = x.nrows().max(1) as f64;
        let z = self.pre_activation(x);
        let a = z.mapv(|v| self.activation.apply(v));
        let y = a.dot(&self.w2.t()) + &self.b2;
        let r = &y - &targets;
        let loss = r.iter().map(|v| v * v).sum::<f64>() / n;
        let g = r * (2.0 / n);
        let dw2 = g.t().dot(&a);
        let db2 = g.sum_axis(Axis(0));
        let dz = g.dot(&self.w2) * z.mapv(|v| self.activation.derivative(v));
        let dw1 = dz.t().dot(&x);
        let db1 = dz.sum_axis(Axis(0));
        (
            loss,
            Mlp {
                w1: dw1,
                b1: db1,
                w2: dw2,
                b2: db2,
                activation: self.activation,
            },
        )
    }

    /// All parameters in the order w1, b1, w2, b2 (row-major).
    pub fn params(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .copied()
            .collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut it = p.iter().copied();
        for x in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
        {
            *x = it.next().expect("parameter vector too short");
        }
    }
}

/// A trained network whose weights can no longer change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyExtractor {
    net: Mlp,
}

impl ToyExtractor {
    pub fn network(&self) -> &Mlp {
        &self.net
    }
}

impl FeatureExtractor for ToyExtractor {
    fn input_dim(&self) -> usize {
        self.net.w1.ncols()
    }

    fn output_dim(&self) -> usize {
        self.net.w2.nrows()
    }

    fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let z = self.net.w1.dot(&x) + &self.net.b1;
        self.net.w2.dot(&z.mapv(|v| self.net.activation.apply(v))) + &self.net.b2
    }

    fn jacobian(&self, x: ArrayView1<f64>) -> Array2<f64> {
        let z = self.net.w1.dot(&x) + &self.net.b1;
        let dz = z.mapv(|v| self.net.activation.derivative(v));
        let scaled = &self.net.w1 * &dz.insert_axis(Axis(1));
        self.net.w2.dot(&scaled)
    }
}

/// Runs `ext` over every row of `x` and attaches `labels`.
pub fn extract(ext: &dyn FeatureExtractor, x: ArrayView2<f64>, labels: Vec<u32>) -> Result<FeatureBatch> {
    if x.ncols() != ext.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "extractor expects {} inputs, got {}",
            ext.input_dim(),
            x.ncols()
        )));
    }
    let mut out = Array2::zeros((x.nrows(), ext.output_dim()));
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        out.row_mut(i).assign(&ext.forward(row));
    }
    FeatureBatch::new(out, labels)
}

/// Per-row input Jacobians of `ext`.
pub fn extract_jacobians(ext: &dyn FeatureExtractor, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
    if x.ncols() != ext.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "extractor expects {} inputs, got {}",
            ext.input_dim(),
            x.ncols()
        )));
    }
    Ok(x.axis_iter(Axis(0)).map(|r| ext.jacobian(r)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            hidden: 32,
            epochs: 500,
            lr: 0.1,
            seed: 42,
        }
    }
}

/// Full-batch gradient descent pulling each sample's features onto the
/// simplex vertex of its class. Returns the frozen network and the loss
/// before training followed by the loss after every epoch.
pub fn train_toy_extractor(
    images: ArrayView2<f64>,
    labels: &[u32],
    targets: &EtfSimplex,
    cfg: &ToyTrainConfig,
) -> Result<(ToyExtractor, Vec<f64>)> {
    if images.nrows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images but {} labels",
            images.nrows(),
            labels.len()
        )));
    }
    let classes = labels.iter().map(|&y| y as usize + 1).max().unwrap_or(0);
    if classes != targets.k() {
        return Err(Error::validation(
            "targets",
            format!("simplex has {} vertices for {classes} classes", targets.k()),
        ));
    }
    let t = targets.vertices().select(Axis(0), &labels.iter().map(|&y| y as usize).collect::<Vec<_>>());
    let mut net = Mlp::random(images.ncols(), cfg.hidden, targets.d(), Activation::Tanh, cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (loss, grad) = net.target_loss(images, t.view());
        if !loss.is_finite() {
            return Err(SolverError::Divergence(format!("extractor loss non-finite at epoch {epoch}")).into());
        }
        trace.push(loss);
        if epoch == cfg.epochs {
            break;
        }
        net.w1.scaled_add(-cfg.lr, &grad.w1);
        net.b1.scaled_add(-cfg.lr, &grad.b1);
        net.w2.scaled_add(-cfg.lr, &grad.w2);
        net.b2.scaled_add(-cfg.lr, &grad.b2);
    }
    Ok((net.freeze(), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etf::make_etf;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn identity_passes_through() {
        let ext = Mlp::identity(3).freeze();
        let x = array![[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]];
        let b = extract(&ext, x.view(), vec![0, 1]).unwrap();
        assert_eq!(b.features(), &x);
        assert_eq!(ext.jacobian(x.row(0)), Array2::<f64>::eye(3));
    }

    #[test]
    fn linear_jacobian_is_weights() {
        let mut net = Mlp::random(4, 3, 2, Activation::Identity, 5);
        net.b1 = array![0.1, -0.2, 0.3];
        let w = net.w2.dot(&net.w1);
        let ext = net.freeze();
        let j = ext.jacobian(array![0.3, 0.1, -1.0, 2.0].view());
        assert!((&j - &w).iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn jacobian_matches_fd() {
        let ext = Mlp::random(5, 7, 3, Activation::Tanh, 9).freeze();
        let x = array![0.3, -0.7, 1.1, 0.2, -0.4];
        let j = ext.jacobian(x.view());
        let h = 1e-6;
        for c in 0..5 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let fd = (ext.forward(xp.view()) - ext.forward(xm.view())) / (2.0 * h);
            for r in 0..3 {
                let rel = (fd[r] - j[[r, c]]).abs() / j[[r, c]].abs().max(1e-3);
                assert!(rel <= 1e-5, "{rel}");
            }
        }
    }

    #[test]
    fn loss_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let net = Mlp::random(4, 5, 3, Activation::Tanh, 2);
        let (_, grad) = net.target_loss(x.view(), t.view());
        let g = grad.params();
        let p0 = net.params();
        let h = 1e-6;
        for _ in 0..10 {
            let i = rng.random_range(0..p0.len());
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut pp = p0.clone();
            pp[i] += h;
            plus.set_params(&pp);
            pp[i] -= 2.0 * h;
            minus.set_params(&pp);
            let fd = (plus.target_loss(x.view(), t.view()).0 - minus.target_loss(x.view(), t.view()).0) / (2.0 * h);
            let rel = (fd - g[i]).abs() / g[i].abs().max(1e-8);
            assert!(rel <= 1e-6, "param {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn zero_epochs_and_zero_lr() {
        let x = array![[0.0, 1.0], [1.0, 0.0]];
        let targets = make_etf(2, 2, 0).unwrap();
        let cfg = ToyTrainConfig { hidden: 4, epochs: 0, lr: 0.1, seed: 3 };
        let (ext, trace) = train_toy_extractor(x.view(), &[0, 1], &targets, &cfg).unwrap();
        assert_eq!(ext.network(), &Mlp::random(2, 4, 2, Activation::Tanh, 3));
        assert_eq!(trace.len(), 1);
        let cfg = ToyTrainConfig { epochs: 20, lr: 0.0, ..cfg };
        let (ext, _) = train_toy_extractor(x.view(), &[0, 1], &targets, &cfg).unwrap();
        assert_eq!(ext.network(), &Mlp::random(2, 4, 2, Activation::Tanh, 3));
    }
}
