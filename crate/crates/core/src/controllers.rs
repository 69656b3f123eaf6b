//! Routing controllers: the fixed score-threshold rule, the linear dynamic
//! threshold (FuncDyn), and the small routing MLP (PolicyNet).

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::econ::Decision;
use crate::error::{Error, Result};
use crate::net::NetworkState;

/// Min-max normalization bounds for raw link observations. Values outside the
/// bounds clip to [0, 1] after normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBounds {
    /// RTT bounds in seconds.
    pub rtt: (f64, f64),
    /// Bandwidth bounds in bits/second.
    pub bw: (f64, f64),
}

impl NormBounds {
    /// Envelope of the three regimes.
    pub fn regime_envelope() -> Self {
        NormBounds {
            rtt: (0.020, 0.130),
            bw: (5e6, 200e6),
        }
    }

    pub fn rtt_norm(&self, rtt: f64) -> f64 {
        min_max(rtt, self.rtt)
    }

    pub fn bw_norm(&self, bw: f64) -> f64 {
        min_max(bw, self.bw)
    }
}

fn min_max(x: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Linear dynamic threshold coefficients:
/// `tau = tau0 - a_rtt * rtt_norm + b_bw * bw_norm - g_hist * q_hat`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuncDynParams {
    pub tau0: f64,
    pub a_rtt: f64,
    pub b_bw: f64,
    pub g_hist: f64,
    pub norm: NormBounds,
}

impl FuncDynParams {
    pub fn new(tau0: f64, a_rtt: f64, b_bw: f64, g_hist: f64, norm: NormBounds) -> Result<Self> {
        if a_rtt < 0.0 || b_bw < 0.0 || g_hist < 0.0 {
            return Err(Error::domain("funcdyn coefficients must be nonnegative".to_string()));
        }
        if norm.rtt.1 < norm.rtt.0 || norm.bw.1 < norm.bw.0 {
            return Err(Error::domain("normalization bounds must be well ordered".to_string()));
        }
        Ok(FuncDynParams {
            tau0,
            a_rtt,
            b_bw,
            g_hist,
            norm,
        })
    }
}

/// One routing decision together with the statistic that produced it: the
/// threshold for rule-based controllers, the cloud probability for PolicyNet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub choice: Decision,
    pub score: f64,
    pub basis: f64,
}

/// Fixed threshold rule: accept at the edge iff `s >= tau` (boundary stays
/// on the edge).
pub fn route_fixed(s: f64, tau: f64) -> RouteDecision {
    RouteDecision {
        choice: if s >= tau { Decision::Edge } else { Decision::Cloud },
        score: s,
        basis: tau,
    }
}

/// Dynamic threshold from normalized link features and the quality history.
pub fn funcdyn_threshold(params: &FuncDynParams, state: &NetworkState, q_hat: f64) -> f64 {
    threshold_from_normalized(
        params,
        params.norm.rtt_norm(state.rtt),
        params.norm.bw_norm(state.bw),
        q_hat,
    )
}

/// Core linear form over already-normalized features.
pub fn threshold_from_normalized(
    params: &FuncDynParams,
    rtt_norm: f64,
    bw_norm: f64,
    q_hat: f64,
) -> f64 {
    params.tau0 - params.a_rtt * rtt_norm + params.b_bw * bw_norm - params.g_hist * q_hat
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Normalization bounds attached to a PolicyNet checkpoint: raw features are
/// min-max scaled before the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub rtt: (f64, f64),
    pub bw: (f64, f64),
    pub score: (f64, f64),
}

impl FeatureNorm {
    pub fn features(&self, state: &NetworkState, score: f64, q_hat: f64) -> [f64; 4] {
        [
            min_max(state.rtt, self.rtt),
            min_max(state.bw, self.bw),
            min_max(score, self.score),
            q_hat,
        ]
    }
}

impl Default for FeatureNorm {
    fn default() -> Self {
        let env = NormBounds::regime_envelope();
        FeatureNorm {
            rtt: env.rtt,
            bw: env.bw,
            score: (0.0, 1.0),
        }
    }
}

/// Compact routing MLP. Hidden layers use tanh; the scalar output is squashed
/// by the logistic function into a cloud-routing probability. The default
/// shape [4, 50, 50, 1] carries 2,851 parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    widths: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    pub norm: FeatureNorm,
}

/// Training hyperparameters for [`policynet_train`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        PolicyTrainConfig {
            lr: 0.05,
            epochs: 200,
            batch: 32,
            seed: 0,
        }
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct PolicyTrainReport {
    /// Full-set mean BCE before training and after each epoch.
    pub loss_history: Vec<f64>,
    /// Set when every label in the dataset is identical.
    pub single_class_warning: bool,
}

const P_CLIP: f64 = 1e-12;

impl PolicyNet {
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        Self::validate_widths(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in widths.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let scale = 1.0 / (n_in as f64).sqrt();
            weights.push(Array2::from_shape_fn((n_out, n_in), |_| {
                rng.random_range(-scale..scale)
            }));
            biases.push(Array1::zeros(n_out));
        }
        Ok(PolicyNet {
            widths: widths.to_vec(),
            weights,
            biases,
            norm: FeatureNorm::default(),
        })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        Self::validate_widths(widths)?;
        let weights = widths
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = widths.windows(2).map(|w| Array1::zeros(w[1])).collect();
        Ok(PolicyNet {
            widths: widths.to_vec(),
            weights,
            biases,
            norm: FeatureNorm::default(),
        })
    }

    /// The default routing shape.
    pub fn default_shape(seed: u64) -> Self {
        Self::new(&[4, 50, 50, 1], seed).expect("static widths are valid")
    }

    fn validate_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::usage(format!("invalid layer widths {widths:?}")));
        }
        if *widths.last().unwrap() != 1 {
            return Err(Error::usage("output layer must have width 1".to_string()));
        }
        Ok(())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    /// Cloud-routing probability, always inside the open interval (0, 1).
    pub fn forward(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.input_dim() {
            return Err(Error::usage(format!(
                "expected {} features, got {}",
                self.input_dim(),
                features.len()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("features must be finite".to_string()));
        }
        let mut a = Array1::from(features.to_vec());
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = w.dot(&a) + b;
            a = if l == last { z } else { z.mapv(f64::tanh) };
        }
        Ok(sigmoid(a[0]).clamp(P_CLIP, 1.0 - P_CLIP))
    }

    /// Decision rule: `p > 0.5` routes to the cloud, ties stay on the edge.
    pub fn decide(&self, features: &[f64]) -> Result<RouteDecision> {
        let p = self.forward(features)?;
        Ok(RouteDecision {
            choice: if p > 0.5 { Decision::Cloud } else { Decision::Edge },
            score: features[2],
            basis: p,
        })
    }

    /// Mean binary cross-entropy over a labeled set.
    pub fn mean_loss(&self, data: &[([f64; 4], u8)]) -> f64 {
        let n = data.len().max(1) as f64;
        data.iter()
            .map(|(x, y)| {
                let p = self.forward(x).expect("finite features");
                if *y == 1 {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / n
    }

    /// Classification accuracy with the p > 0.5 rule.
    pub fn accuracy(&self, data: &[([f64; 4], u8)]) -> f64 {
        let n = data.len().max(1) as f64;
        data.iter()
            .filter(|(x, y)| {
                let p = self.forward(x).expect("finite features");
                (p > 0.5) == (*y == 1)
            })
            .count() as f64
            / n
    }

    /// Mean-BCE gradient over a batch, by backpropagation.
    fn gradients(&self, batch: &[([f64; 4], u8)]) -> (Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let mut gw: Vec<Array2<f64>> = self.weights.iter().map(|w| Array2::zeros(w.dim())).collect();
        let mut gb: Vec<Array1<f64>> = self.biases.iter().map(|b| Array1::zeros(b.dim())).collect();
        let last = self.weights.len() - 1;
        let scale = 1.0 / batch.len() as f64;
        for (x, y) in batch {
            // Forward pass, keeping activations.
            let mut acts: Vec<Array1<f64>> = vec![Array1::from(x.to_vec())];
            for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
                let z = w.dot(acts.last().unwrap()) + b;
                acts.push(if l == last { z } else { z.mapv(f64::tanh) });
            }
            let p = sigmoid(acts[last + 1][0]).clamp(P_CLIP, 1.0 - P_CLIP);
            // dL/dz_out for BCE with the logistic output.
            let mut delta = Array1::from(vec![p - *y as f64]);
            for l in (0..=last).rev() {
                for i in 0..delta.len() {
                    let row = delta[i] * scale;
                    for j in 0..acts[l].len() {
                        gw[l][[i, j]] += row * acts[l][j];
                    }
                    gb[l][i] += row;
                }
                if l > 0 {
                    let back = self.weights[l].t().dot(&delta);
                    // tanh'(z) = 1 - a^2 with a the stored activation.
                    delta = &back * &acts[l].mapv(|a| 1.0 - a * a);
                }
            }
        }
        (gw, gb)
    }

    fn apply_gradients(&mut self, gw: &[Array2<f64>], gb: &[Array1<f64>], lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(gw) {
            w.scaled_add(-lr, g);
        }
        for (b, g) in self.biases.iter_mut().zip(gb) {
            b.scaled_add(-lr, g);
        }
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::usage(format!(
                "checkpoint has {} parameters, net needs {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut it = params.iter();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = *it.next().unwrap();
            }
            for v in b.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Serialize to the checkpoint JSON: widths, activation, normalization
    /// bounds, and the flat parameter array. Round-trips bit-exactly.
    pub fn to_checkpoint_json(&self) -> String {
        let ckpt = Checkpoint {
            widths: self.widths.clone(),
            activation: "tanh".to_string(),
            norm: self.norm,
            params: self.flat_params(),
        };
        serde_json::to_string_pretty(&ckpt).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::usage(format!("bad checkpoint: {e}")))?;
        if ckpt.activation != "tanh" {
            return Err(Error::usage(format!("unsupported activation {}", ckpt.activation)));
        }
        let mut net = PolicyNet::zeros(&ckpt.widths)?;
        net.norm = ckpt.norm;
        net.set_flat_params(&ckpt.params)?;
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    widths: Vec<usize>,
    activation: String,
    norm: FeatureNorm,
    params: Vec<f64>,
}

/// Venue labels from paired counterfactual outcomes: 1 (cloud) iff the cloud
/// utility strictly beats the edge utility; ties label 0 (edge).
pub fn policynet_labels(paired: &[(f64, f64, f64, f64)], lambda: f64) -> Vec<u8> {
    paired
        .iter()
        .map(|&(q_e, c_e, q_c, c_c)| {
            let j_edge = q_e - lambda * c_e;
            let j_cloud = q_c - lambda * c_c;
            u8::from(j_cloud > j_edge)
        })
        .collect()
}

/// Mini-batch gradient descent on mean BCE. Deterministic given the seed.
pub fn policynet_train(
    net: &mut PolicyNet,
    dataset: &[([f64; 4], u8)],
    hyper: &PolicyTrainConfig,
) -> Result<PolicyTrainReport> {
    if dataset.is_empty() {
        return Err(Error::usage("training set must be nonempty".to_string()));
    }
    if dataset.iter().any(|(_, y)| *y > 1) {
        return Err(Error::usage("labels must be 0 or 1".to_string()));
    }
    let single_class_warning = dataset.iter().all(|(_, y)| *y == dataset[0].1);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_history = vec![net.mean_loss(dataset)];
    let batch = hyper.batch.max(1);
    for _ in 0..hyper.epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(batch) {
            let minibatch: Vec<([f64; 4], u8)> = chunk.iter().map(|&i| dataset[i]).collect();
            let (gw, gb) = net.gradients(&minibatch);
            net.apply_gradients(&gw, &gb, hyper.lr);
        }
        loss_history.push(net.mean_loss(dataset));
    }
    Ok(PolicyTrainReport {
        loss_history,
        single_class_warning,
    })
}

fn shuffle<R: Rng>(xs: &mut [usize], rng: &mut R) {
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}
