//! Forward diffusion: noise schedules, sinusoidal time embeddings, and the
//! noise-prediction network with its denoising-score-matching training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Activation, MlpParams, OutputHead, SgdMomentum, TrainConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Linear beta schedule over `total_steps` forward steps.
///
/// `alpha_bar(t)` follows the convention `alpha_bar(0) = 1`, so `t = 0`
/// denotes clean samples and `t in 1..=total_steps` the noised ones.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    total_steps: usize,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps < 2 {
            return Err(Error::InvalidParameter {
                name: "total_steps",
                reason: format!("{total_steps} must be at least 2"),
            });
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidParameter {
                name: "beta range",
                reason: format!("need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"),
            });
        }
        let mut betas = Vec::with_capacity(total_steps);
        let mut alphas = Vec::with_capacity(total_steps);
        let mut alpha_bars = Vec::with_capacity(total_steps);
        let mut prod = 1.0;
        for i in 0..total_steps {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / (total_steps - 1) as f64;
            let alpha = 1.0 - beta;
            prod *= alpha;
            betas.push(beta);
            alphas.push(alpha);
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            total_steps,
            beta_start,
            beta_end,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Cumulative signal fraction at step `t`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::TimeStepOutOfRange {
                t,
                max: self.total_steps,
            });
        }
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    pub fn to_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            total_steps: self.total_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            seed: None,
        }
    }
}

/// Serializable schedule description. Derived arrays are recomputed on load,
/// never stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.total_steps, self.beta_start, self.beta_end)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

/// Sinusoidal embedding of the normalized diffusion step t/T.
///
/// Features are interleaved (sin, cos) pairs at geometrically spaced
/// frequencies from 1 to 1000, so t = 0 maps to the alternating (0, 1)
/// pattern and distinct steps map to distinct embeddings (the lowest
/// frequency keeps sin strictly increasing over [0, 1]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub total_steps: usize,
}

const EMBED_FREQ_MIN: f64 = 1.0;
const EMBED_FREQ_MAX: f64 = 1000.0;

impl TimeEmbedding {
    pub fn new(dim: usize, total_steps: usize) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::InvalidParameter {
                name: "embedding dim",
                reason: format!("{dim} must be a positive even integer"),
            });
        }
        if total_steps == 0 {
            return Err(Error::InvalidParameter {
                name: "total_steps",
                reason: "must be positive".into(),
            });
        }
        Ok(TimeEmbedding { dim, total_steps })
    }

    pub fn encode(&self, t: usize) -> Result<Vec<f64>> {
        if t > self.total_steps {
            return Err(Error::TimeStepOutOfRange {
                t,
                max: self.total_steps,
            });
        }
        let u = t as f64 / self.total_steps as f64;
        let pairs = self.dim / 2;
        let mut out = Vec::with_capacity(self.dim);
        for k in 0..pairs {
            let freq = if pairs == 1 {
                EMBED_FREQ_MIN
            } else {
                EMBED_FREQ_MIN * (EMBED_FREQ_MAX / EMBED_FREQ_MIN).powf(k as f64 / (pairs - 1) as f64)
            };
            let phase = freq * u;
            out.push(phase.sin());
            out.push(phase.cos());
        }
        Ok(out)
    }
}

/// Closed-form forward diffusion: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) z.
pub fn forward_diffuse(x0: &Tensor, t: usize, z: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if z.len() != x0.len() {
        return Err(Error::ShapeMismatch {
            context: "forward_diffuse noise",
            expected: x0.len(),
            got: z.len(),
        });
    }
    let ab = sched.alpha_bar(t)?;
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let values = x0
        .values()
        .iter()
        .zip(z.values())
        .map(|(x, zi)| s * x + n * zi)
        .collect();
    Tensor::new(x0.shape().to_vec(), values)
}

pub fn standard_normal_vec(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Noise-prediction network epsilon(x, t) on the concatenation of the state
/// and the time embedding, identity head, output dimension = data dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonNet {
    pub net: MlpParams,
    pub embed: TimeEmbedding,
    pub data_dim: usize,
}

impl EpsilonNet {
    pub fn init(data_dim: usize, hidden: &[usize], embed: TimeEmbedding, seed: u64) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(data_dim + embed.dim);
        dims.extend_from_slice(hidden);
        dims.push(data_dim);
        let net = MlpParams::init_seeded(&dims, Activation::Relu, OutputHead::Identity, seed)?;
        Ok(EpsilonNet { net, embed, data_dim })
    }

    pub fn total_steps(&self) -> usize {
        self.embed.total_steps
    }

    /// Predicted noise for a state at step `t`.
    pub fn predict_noise(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        if x.len() != self.data_dim {
            return Err(Error::ShapeMismatch {
                context: "epsilon input",
                expected: self.data_dim,
                got: x.len(),
            });
        }
        let mut input = x.values().to_vec();
        input.extend(self.embed.encode(t)?);
        Tensor::vector(self.net.forward(&input)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

/// Epsilon-matching training: per sample draw t ~ U{1..T} and z ~ N(0, I),
/// noise the sample, and regress the injected z under squared error.
/// Returns per-epoch mean losses.
pub fn train_epsilon(
    data: &[Tensor],
    sched: &NoiseSchedule,
    net: &mut EpsilonNet,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("train_epsilon data"));
    }
    if data.iter().any(|x| x.len() != net.data_dim) {
        return Err(Error::ShapeMismatch {
            context: "train_epsilon data",
            expected: net.data_dim,
            got: data.iter().map(Tensor::len).find(|&l| l != net.data_dim).unwrap_or(0),
        });
    }
    let total = sched.total_steps();
    if net.total_steps() != total {
        return Err(Error::InvalidParameter {
            name: "schedule",
            reason: format!(
                "epsilon net embeds {} steps but schedule has {total}",
                net.total_steps()
            ),
        });
    }
    let mut opt = SgdMomentum::new(&net.net, cfg.learning_rate, cfg.momentum)?;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let params = net.net.register_on_tape(&mut tape);
            let mut batch_loss = None;
            for &i in batch {
                let x0 = &data[i];
                let t = rng.gen_range(1..=total);
                let z = Tensor::vector(standard_normal_vec(net.data_dim, rng))?;
                let xt = forward_diffuse(x0, t, &z, sched)?;
                let mut input = xt.values().to_vec();
                input.extend(net.embed.encode(t)?);
                let xid = tape.leaf(&input);
                let fwd = net.net.forward_on_tape(&mut tape, &params, xid)?;
                let target = tape.leaf(z.values());
                let diff = tape.sub(fwd.output, target)?;
                let l = tape.squared_norm(diff);
                batch_loss = Some(match batch_loss {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
            let sum = batch_loss.expect("non-empty batch");
            let mean = tape.scale(sum, 1.0 / batch.len() as f64);
            epoch_loss += tape.value(sum)[0];
            let grads = tape.backward(mean)?;
            let layer_grads = params.collect_grads(&net.net, &grads);
            opt.step(&mut net.net, &layer_grads)?;
        }
        let mean_loss = epoch_loss / data.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::TrainingDiverged {
                stage: "train_epsilon",
                epoch,
                trace,
            });
        }
        trace.push(mean_loss);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;

    fn default_sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    /// Product oracle: recompute alpha_bar(T) by an independent loop over the
    /// definition of the linear schedule.
    #[test]
    fn alpha_bar_matches_direct_product() {
        let sched = default_sched();
        let mut prod = 1.0f64;
        for i in 0..1000u32 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        let got = sched.alpha_bar(1000).unwrap();
        assert!((got - prod).abs() <= 1e-12 * prod.abs().max(1.0), "{got} vs {prod}");
    }

    #[test]
    fn near_equal_betas_still_strictly_increasing() {
        let sched = NoiseSchedule::linear(2, 0.01, 0.01 + 1e-12).unwrap();
        assert!(sched.betas()[1] > sched.betas()[0]);
        assert!(NoiseSchedule::linear(2, 0.01, 0.01).is_err());
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
    }

    #[test]
    fn alpha_bar_recurrence_holds() {
        let sched = NoiseSchedule::linear(50, 1e-3, 0.1).unwrap();
        for t in 0..50 {
            let lhs = sched.alpha_bar(t).unwrap() * sched.alphas()[t];
            let rhs = sched.alpha_bar(t + 1).unwrap();
            assert!((lhs - rhs).abs() < 1e-15, "t={t}");
        }
    }

    proptest! {
        /// Schedule invariants over random valid (T, beta) ranges.
        #[test]
        fn schedule_invariants(total in 2usize..400, b0 in 1e-6f64..0.3, spread in 1e-4f64..0.6) {
            let b1 = (b0 + spread).min(0.97);
            prop_assume!(b1 > b0);
            let sched = NoiseSchedule::linear(total, b0, b1).unwrap();
            // betas strictly increasing, in (0,1)
            for w in sched.betas().windows(2) {
                prop_assert!(w[1] > w[0]);
            }
            prop_assert!(sched.betas().iter().all(|b| (0.0..1.0).contains(b)));
            // alpha_bars strictly decreasing, in (0,1)
            for w in sched.alpha_bars().windows(2) {
                prop_assert!(w[1] < w[0]);
            }
            prop_assert!(sched.alpha_bars().iter().all(|a| (0.0..1.0).contains(a)));
            prop_assert!(sched.alpha_bar(1).unwrap() > sched.alpha_bar(total).unwrap());
            // running product within 1e-12
            let mut prod = 1.0;
            for (i, a) in sched.alphas().iter().enumerate() {
                prod *= a;
                prop_assert!((prod - sched.alpha_bars()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn diffuse_at_t0_returns_x0_exactly() {
        let sched = default_sched();
        let x0 = Tensor::vector(vec![1.5, -2.5]).unwrap();
        let z = Tensor::vector(vec![3.0, 4.0]).unwrap();
        let xt = forward_diffuse(&x0, 0, &z, &sched).unwrap();
        assert_eq!(xt.values(), x0.values());
    }

    #[test]
    fn diffuse_with_zero_noise_is_pure_scaling() {
        let sched = default_sched();
        let x0 = Tensor::vector(vec![2.0, -1.0]).unwrap();
        let z = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let t = 350;
        let xt = forward_diffuse(&x0, t, &z, &sched).unwrap();
        let s = sched.alpha_bar(t).unwrap().sqrt();
        for (a, b) in xt.values().iter().zip(x0.values()) {
            assert!((a - s * b).abs() < 1e-15);
        }
    }

    #[test]
    fn diffuse_rejects_out_of_range_step() {
        let sched = default_sched();
        let x0 = Tensor::vector(vec![1.0]).unwrap();
        let z = Tensor::vector(vec![0.0]).unwrap();
        assert!(forward_diffuse(&x0, 1001, &z, &sched).is_err());
    }

    /// Monte-Carlo moment oracle at a fixed step.
    #[test]
    fn diffuse_moments_match_closed_form() {
        let sched = default_sched();
        let x0 = Tensor::vector(vec![1.2, -0.7]).unwrap();
        let t = 400;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut sums = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for _ in 0..n {
            let z = Tensor::vector(standard_normal_vec(2, &mut rng)).unwrap();
            let xt = forward_diffuse(&x0, t, &z, &sched).unwrap();
            for (k, v) in xt.values().iter().enumerate() {
                sums[k] += v;
                sq[k] += v * v;
            }
        }
        let ab = sched.alpha_bar(t).unwrap();
        let var = 1.0 - ab;
        let sigma_mean = (var / n as f64).sqrt();
        for k in 0..2 {
            let mean = sums[k] / n as f64;
            let expected = ab.sqrt() * x0.values()[k];
            assert!(
                (mean - expected).abs() < 3.0 * sigma_mean,
                "coord {k}: mean {mean} vs {expected}"
            );
            let v = sq[k] / n as f64 - mean * mean;
            assert!((v - var).abs() < 0.05 * var, "coord {k}: var {v} vs {var}");
        }
    }

    /// Variance of x_t on unit-variance data interpolates monotonically
    /// toward 1 as t grows.
    #[test]
    fn variance_interpolates_monotonically() {
        let sched = default_sched();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = standard_normal_vec(4000, &mut rng);
        let mut prev = -1.0;
        for &t in &[1usize, 100, 300, 600, 1000] {
            let ab = sched.alpha_bar(t).unwrap();
            let mut sum = 0.0;
            let mut sq = 0.0;
            for &x in &data {
                let x0 = Tensor::vector(vec![x]).unwrap();
                let z = Tensor::vector(standard_normal_vec(1, &mut rng)).unwrap();
                let xt = forward_diffuse(&x0, t, &z, &sched).unwrap();
                sum += xt.values()[0];
                sq += xt.values()[0] * xt.values()[0];
            }
            let n = data.len() as f64;
            let var = sq / n - (sum / n) * (sum / n);
            // population variance is ab*1 + (1-ab) = 1 for unit-variance data;
            // the monotone quantity is the noise share (1 - ab).
            assert!((var - 1.0).abs() < 0.1, "t={t} var={var}");
            let noise_share = 1.0 - ab;
            assert!(noise_share > prev, "t={t}");
            prev = noise_share;
        }
    }

    #[test]
    fn embedding_t0_is_alternating_pattern() {
        let emb = TimeEmbedding::new(8, 100).unwrap();
        let e = emb.encode(0).unwrap();
        for (i, v) in e.iter().enumerate() {
            let expected = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(*v, expected);
        }
    }

    #[test]
    fn embedding_distinct_steps_distinct_vectors() {
        let emb = TimeEmbedding::new(16, 200).unwrap();
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for t in 0..=200 {
            let e = emb.encode(t).unwrap();
            assert!(!seen.contains(&e), "duplicate embedding at t={t}");
            seen.push(e);
        }
    }

    #[test]
    fn embedding_rejects_odd_dim() {
        assert!(TimeEmbedding::new(7, 10).is_err());
        assert!(TimeEmbedding::new(0, 10).is_err());
    }

    #[test]
    fn schedule_spec_roundtrip_recomputes_arrays() {
        let sched = NoiseSchedule::linear(128, 2e-4, 0.015).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sched.json");
        sched.to_spec().save_json(&path).unwrap();
        let loaded = ScheduleSpec::load_json(&path).unwrap().build().unwrap();
        assert_eq!(sched, loaded);
        let raw = std::fs::read_to_string(&path).unwrap();
        assert!(!raw.contains("alpha"), "derived arrays must not be stored");
    }

    /// Analytic expectation: zero output layer predicts 0, so the initial
    /// loss is E||z||^2 = data dimension.
    #[test]
    fn initial_epsilon_loss_is_data_dimension() {
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let embed = TimeEmbedding::new(8, 100).unwrap();
        let mut net = EpsilonNet::init(2, &[16], embed, 3).unwrap();
        net.net.zero_output_layer();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<Tensor> = (0..400)
            .map(|_| Tensor::vector(standard_normal_vec(2, &mut rng)).unwrap())
            .collect();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 400,
            learning_rate: 1e-9,
            momentum: 0.0,
        };
        let trace = train_epsilon(&data, &sched, &mut net, &cfg, &mut rng).unwrap();
        // E chi^2_2 = 2, Var = 4; 3-sigma band for the mean of 400 draws.
        let band = 3.0 * (4.0f64 / 400.0).sqrt();
        assert!(
            (trace[0] - 2.0).abs() < band,
            "initial loss {} outside {band} of 2",
            trace[0]
        );
    }

    /// Descent oracle on degenerate data: a single repeated point.
    #[test]
    fn epsilon_training_descends_on_repeated_point() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let embed = TimeEmbedding::new(8, 50).unwrap();
        let mut net = EpsilonNet::init(2, &[32], embed, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let data: Vec<Tensor> = (0..16).map(|_| Tensor::vector(vec![0.5, -1.0]).unwrap()).collect();
        let cfg = TrainConfig {
            epochs: 500,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.5,
        };
        let trace = train_epsilon(&data, &sched, &mut net, &cfg, &mut rng).unwrap();
        let first = trace[0];
        let last = *trace.last().unwrap();
        assert!(last < 0.5 * first, "loss {first} -> {last}");
        assert!(last <= first);
    }

    #[test]
    fn epsilon_training_rejects_empty_data() {
        let sched = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let embed = TimeEmbedding::new(4, 10).unwrap();
        let mut net = EpsilonNet::init(2, &[8], embed, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = TrainConfig::default();
        assert!(train_epsilon(&[], &sched, &mut net, &cfg, &mut rng).is_err());
    }

    #[test]
    fn epsilon_training_trace_is_seed_reproducible() {
        let sched = NoiseSchedule::linear(30, 1e-4, 0.02).unwrap();
        let run = || {
            let embed = TimeEmbedding::new(4, 30).unwrap();
            let mut net = EpsilonNet::init(2, &[8], embed, 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let data: Vec<Tensor> = (0..20)
                .map(|i| Tensor::vector(vec![i as f64 / 10.0, -(i as f64) / 20.0]).unwrap())
                .collect();
            let cfg = TrainConfig {
                epochs: 10,
                batch_size: 8,
                learning_rate: 0.01,
                momentum: 0.5,
            };
            train_epsilon(&data, &sched, &mut net, &cfg, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
