//! A small instrumented denoiser plus the schedule machinery needed to
//! drive it, used to produce reproducible activation traces end to end.
//!
//! The model is a six-layer MLP shaped like a miniature U-Net: two encoder
//! layers, a middle layer, two decoder layers with concatenation skips
//! from their encoder mirrors, and a linear head predicting the noise.
//! Timestep information enters as sinusoidal features appended to the
//! input. Weights are drawn uniformly and rescaled to spectral norm 0.9 so
//! repeated application stays well-conditioned; no layer's activations
//! ever collapse to zero, which the orthogonality metric would reject.
//!
//! Reproducibility contract: every stochastic quantity comes from a
//! ChaCha8 stream seeded by (seed, stream tag, index), so the same seed
//! produces the same trace bit for bit regardless of thread count or
//! call order. Sample chains each own a stream, making the sample loop
//! embarrassingly parallel without sharing RNG state.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::exec::{map_indexed, Execution};
use crate::quantizer::{quantize, QuantError, QuantizerConfig};
use crate::trace::{ActivationTrace, Dtype, LayerMeta, TraceError, TraceManifest};

/// Noise schedule: `beta[i]`, `alpha[i] = 1 - beta[i]`, the running
/// product `alpha_bar[i]`, and the reverse-step noise scale `sigma[i]`,
/// all 0-indexed so index `i` describes step `i + 1` of the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub timesteps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear beta ramp, the usual small-to-moderate noise ramp.
    pub fn linear(
        timesteps: usize,
        beta_start: f64,
        beta_end: f64,
    ) -> Result<Self, DiffusionError> {
        if timesteps == 0 {
            return Err(DiffusionError::BadSchedule(
                "schedule needs at least one timestep".into(),
            ));
        }
        let beta = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    /// Builds the derived quantities from explicit betas. The last
    /// reverse step (index 0) adds no noise: `sigma[0] = 0`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self, DiffusionError> {
        if beta.is_empty() {
            return Err(DiffusionError::BadSchedule(
                "schedule needs at least one timestep".into(),
            ));
        }
        for (i, &b) in beta.iter().enumerate() {
            if !b.is_finite() || b <= 0.0 || b >= 1.0 {
                return Err(DiffusionError::BadSchedule(format!(
                    "beta[{i}] = {b} outside (0, 1)"
                )));
            }
        }
        let alpha: Vec<f64> = beta.iter().map(|&b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma: Vec<f64> = beta
            .iter()
            .enumerate()
            .map(|(i, &b)| if i == 0 { 0.0 } else { b.sqrt() })
            .collect();
        Ok(DiffusionSchedule {
            timesteps: beta.len(),
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }
}

/// Stream tags for seed derivation; distinct tags give independent
/// streams off one user-facing seed.
const STREAM_WEIGHTS: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_REVERSE: u64 = 3;
const STREAM_FORWARD: u64 = 4;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed.wrapping_add(tag)).wrapping_add(index))
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

/// Static shape of one model layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Concatenate this earlier layer's output to the input (U-Net skip).
    pub skip_from: Option<usize>,
    pub pinned_bits: Option<u8>,
}

impl LayerSpec {
    pub fn param_count(&self) -> u64 {
        (self.out_dim * self.in_dim + self.out_dim) as u64
    }
}

/// Construction parameters for the toy model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams {
    pub data_dim: usize,
    pub time_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub timesteps: usize,
    pub seed: u64,
}

impl Default for ToyModelParams {
    fn default() -> Self {
        ToyModelParams {
            data_dim: 8,
            time_dim: 4,
            hidden1: 32,
            hidden2: 48,
            timesteps: 20,
            seed: 7,
        }
    }
}

/// The instrumented denoiser. `forward` returns every layer's output so
/// callers can trace or range-calibrate without hooks.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub data_dim: usize,
    pub time_dim: usize,
    pub timesteps: usize,
    specs: Vec<LayerSpec>,
    /// Row-major `out_dim x in_dim` per layer.
    weights: Vec<Array2<f64>>,
    biases: Vec<Vec<f64>>,
}

impl ToyDenoiser {
    /// Builds the fixed encoder/middle/decoder architecture with weights
    /// derived from `params.seed`. Boundary layers are pinned at 8 bits.
    pub fn seeded(params: &ToyModelParams) -> Result<Self, DiffusionError> {
        let p = params;
        if p.data_dim == 0 || p.hidden2 == 0 || p.timesteps == 0 {
            return Err(DiffusionError::BadParams(
                "data_dim, hidden2, and timesteps must be positive".into(),
            ));
        }
        if p.hidden1 < 2 || !p.hidden1.is_multiple_of(2) {
            return Err(DiffusionError::BadParams(
                "hidden1 must be even and at least 2".into(),
            ));
        }
        let spec = |name: &str, in_dim, out_dim, activation, skip_from, pinned_bits| LayerSpec {
            name: name.to_string(),
            in_dim,
            out_dim,
            activation,
            skip_from,
            pinned_bits,
        };
        let specs = vec![
            spec(
                "enc0",
                p.data_dim + p.time_dim,
                p.hidden1,
                Activation::Tanh,
                None,
                Some(8),
            ),
            spec("enc1", p.hidden1, p.hidden2, Activation::Tanh, None, None),
            spec("mid", p.hidden2, p.hidden2, Activation::Tanh, None, None),
            spec(
                "dec0",
                2 * p.hidden2,
                p.hidden1,
                Activation::Tanh,
                Some(1),
                None,
            ),
            spec(
                "dec1",
                2 * p.hidden1,
                p.hidden1 / 2,
                Activation::Tanh,
                Some(0),
                None,
            ),
            spec(
                "head",
                p.hidden1 / 2,
                p.data_dim,
                Activation::Linear,
                None,
                Some(8),
            ),
        ];

        let mut weights = Vec::with_capacity(specs.len());
        let mut biases = Vec::with_capacity(specs.len());
        for (idx, s) in specs.iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(p.seed, STREAM_WEIGHTS, idx as u64));
            let mut w = Array2::zeros((s.out_dim, s.in_dim));
            for r in 0..s.out_dim {
                for c in 0..s.in_dim {
                    w[[r, c]] = rng.random_range(-1.0..1.0);
                }
            }
            let est = spectral_norm(&w);
            if est > 0.0 {
                let scale = 0.9 / est;
                w.mapv_inplace(|v| v * scale);
            }
            let b: Vec<f64> = (0..s.out_dim)
                .map(|_| rng.random_range(-0.05..0.05))
                .collect();
            weights.push(w);
            biases.push(b);
        }
        Ok(ToyDenoiser {
            data_dim: p.data_dim,
            time_dim: p.time_dim,
            timesteps: p.timesteps,
            specs,
            weights,
            biases,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn num_layers(&self) -> usize {
        self.specs.len()
    }

    /// The diffusion horizon the model was built for; forward accepts
    /// timesteps in `1..=timesteps()`.
    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    pub fn layer_param_counts(&self) -> Vec<u64> {
        self.specs.iter().map(|s| s.param_count()).collect()
    }

    pub fn manifest_layers(&self) -> Vec<LayerMeta> {
        self.specs
            .iter()
            .enumerate()
            .map(|(i, s)| LayerMeta {
                layer_id: i,
                name: s.name.clone(),
                param_count: s.param_count(),
                feature_dim: s.out_dim,
                pinned_bits: s.pinned_bits,
            })
            .collect()
    }

    /// Per-layer flat parameter vectors: weights row-major, bias appended.
    pub fn flat_weights(&self) -> Vec<Vec<f64>> {
        self.specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut flat = Vec::with_capacity(s.param_count() as usize);
                flat.extend(self.weights[i].iter().copied());
                flat.extend(self.biases[i].iter().copied());
                flat
            })
            .collect()
    }

    /// Rebuilds a model with the same shape but replaced parameters, the
    /// inverse of [`flat_weights`](Self::flat_weights). Used to run a
    /// quantized copy of the model.
    pub fn with_flat_weights(&self, flats: &[Vec<f64>]) -> Result<Self, DiffusionError> {
        if flats.len() != self.specs.len() {
            return Err(DiffusionError::WeightShape(format!(
                "expected {} layers, got {}",
                self.specs.len(),
                flats.len()
            )));
        }
        let mut weights = Vec::with_capacity(flats.len());
        let mut biases = Vec::with_capacity(flats.len());
        for (i, s) in self.specs.iter().enumerate() {
            if flats[i].len() != s.param_count() as usize {
                return Err(DiffusionError::WeightShape(format!(
                    "layer {i} expects {} parameters, got {}",
                    s.param_count(),
                    flats[i].len()
                )));
            }
            let split = s.out_dim * s.in_dim;
            let w = Array2::from_shape_vec((s.out_dim, s.in_dim), flats[i][..split].to_vec())
                .expect("length checked above");
            weights.push(w);
            biases.push(flats[i][split..].to_vec());
        }
        Ok(ToyDenoiser {
            specs: self.specs.clone(),
            weights,
            biases,
            ..*self
        })
    }

    /// Trace manifest for a full capture of this model.
    pub fn manifest(&self, num_samples: usize, dtype: Dtype, seed: u64) -> TraceManifest {
        TraceManifest {
            model_name: "toy-unet".into(),
            num_layers: self.num_layers(),
            num_timesteps: self.timesteps,
            num_samples,
            dtype,
            seed: Some(seed),
            timestep_indices: (0..self.timesteps).collect(),
            layers: self.manifest_layers(),
        }
    }

    /// Sinusoidal timestep features for step `t` in `1..=timesteps`:
    /// sin/cos pairs at geometrically spaced frequencies, plus a raw
    /// `t / T` slot when `time_dim` is odd.
    fn time_features(&self, t: usize) -> Vec<f64> {
        let scaled = t as f64 / self.timesteps as f64;
        let mut out = Vec::with_capacity(self.time_dim);
        for k in 0..self.time_dim / 2 {
            let omega = 2.0 * std::f64::consts::PI * 4f64.powi(k as i32);
            out.push((omega * scaled).sin());
            out.push((omega * scaled).cos());
        }
        if self.time_dim % 2 == 1 {
            out.push(scaled);
        }
        out
    }

    /// One noise prediction. Returns the predicted noise and every layer's
    /// post-activation output. When `act_quant` is given (one config per
    /// layer), each output is fake-quantized before anything downstream,
    /// skip connections included, sees it.
    pub fn forward(
        &self,
        x: &[f64],
        t: usize,
        act_quant: Option<&[QuantizerConfig]>,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), DiffusionError> {
        if x.len() != self.data_dim {
            return Err(DiffusionError::BadParams(format!(
                "input has {} features, model takes {}",
                x.len(),
                self.data_dim
            )));
        }
        if t == 0 || t > self.timesteps {
            return Err(DiffusionError::InvalidTimestep {
                t,
                max: self.timesteps,
            });
        }
        if let Some(cfgs) = act_quant {
            if cfgs.len() != self.num_layers() {
                return Err(DiffusionError::BadParams(format!(
                    "{} activation configs for {} layers",
                    cfgs.len(),
                    self.num_layers()
                )));
            }
        }

        let mut first_input = Vec::with_capacity(self.data_dim + self.time_dim);
        first_input.extend_from_slice(x);
        first_input.extend(self.time_features(t));

        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.num_layers());
        for (idx, s) in self.specs.iter().enumerate() {
            let mut input = if idx == 0 {
                first_input.clone()
            } else {
                outputs[idx - 1].clone()
            };
            if let Some(src) = s.skip_from {
                input.extend_from_slice(&outputs[src]);
            }
            debug_assert_eq!(input.len(), s.in_dim);
            let w = &self.weights[idx];
            let mut out = Vec::with_capacity(s.out_dim);
            for r in 0..s.out_dim {
                let row = w.row(r);
                let row = row.as_slice().expect("row of standard-layout array");
                let mut acc = self.biases[idx][r];
                for (wv, iv) in row.iter().zip(&input) {
                    acc += wv * iv;
                }
                out.push(match s.activation {
                    Activation::Tanh => acc.tanh(),
                    Activation::Linear => acc,
                });
            }
            if let Some(cfgs) = act_quant {
                out = quantize(&out, &cfgs[idx])?;
            }
            outputs.push(out);
        }
        Ok((outputs.last().unwrap().clone(), outputs))
    }
}

/// Estimated largest singular value by 40 rounds of power iteration from
/// a fixed starting vector; deterministic for a given matrix.
fn spectral_norm(w: &Array2<f64>) -> f64 {
    let inp = w.ncols();
    let matvec = |v: &[f64]| -> Vec<f64> {
        w.rows()
            .into_iter()
            .map(|row| {
                let row = row.as_slice().expect("row of standard-layout array");
                row.iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect()
    };
    let mut v = vec![1.0 / (inp as f64).sqrt(); inp];
    for _ in 0..40 {
        let u = matvec(&v);
        let mut vt = vec![0.0; inp];
        for (row, &uv) in w.rows().into_iter().zip(&u) {
            let row = row.as_slice().expect("row of standard-layout array");
            for (dst, &wv) in vt.iter_mut().zip(row) {
                *dst += wv * uv;
            }
        }
        let vn = vt.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vn < 1e-18 {
            return 0.0;
        }
        for (dst, &src) in v.iter_mut().zip(&vt) {
            *dst = src / vn;
        }
    }
    matvec(&v).iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_model_schedule(
    model: &ToyDenoiser,
    schedule: &DiffusionSchedule,
) -> Result<(), DiffusionError> {
    if model.timesteps != schedule.timesteps {
        return Err(DiffusionError::ScheduleModelMismatch {
            schedule: schedule.timesteps,
            model: model.timesteps,
        });
    }
    Ok(())
}

/// Runs one sample's full reverse chain from pure noise, invoking
/// `on_step(t, outputs)` for each step with `t` the 0-based trace label
/// (`step - 1`). Returns the denoised sample. The chain draws its noise
/// from a stream owned by (seed, sample index), so samples are
/// independent of each other and of scheduling.
fn sample_chain(
    model: &ToyDenoiser,
    schedule: &DiffusionSchedule,
    sample_idx: usize,
    seed: u64,
    act_quant: Option<&[QuantizerConfig]>,
    mut on_step: impl FnMut(usize, &[Vec<f64>]),
) -> Result<Vec<f64>, DiffusionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SAMPLE, sample_idx as u64));
    let mut x = standard_normal_vec(&mut rng, model.data_dim);
    for step in (1..=schedule.timesteps).rev() {
        let (eps, outs) = model.forward(&x, step, act_quant)?;
        on_step(step - 1, &outs);
        let i = step - 1;
        let inv_sqrt_alpha = 1.0 / schedule.alpha[i].sqrt();
        let coef = schedule.beta[i] / (1.0 - schedule.alpha_bar[i]).sqrt();
        let sigma = schedule.sigma[i];
        // z is drawn even when sigma is 0 so the stream position never
        // depends on the schedule's values.
        let z = standard_normal_vec(&mut rng, model.data_dim);
        for d in 0..model.data_dim {
            x[d] = inv_sqrt_alpha * (x[d] - coef * eps[d]) + sigma * z[d];
        }
    }
    Ok(x)
}

/// Drives the full reverse process for `num_samples` chains and captures
/// every layer activation at every timestep into a trace. For `f32`
/// traces values are cast at record time, exactly what an `f32` dumper
/// would have stored; the chain itself runs in f64.
pub fn generate_trace(
    model: &ToyDenoiser,
    schedule: &DiffusionSchedule,
    num_samples: usize,
    seed: u64,
    dtype: Dtype,
) -> Result<ActivationTrace, DiffusionError> {
    generate_trace_with(
        model,
        schedule,
        num_samples,
        seed,
        dtype,
        Execution::default(),
    )
}

/// [`generate_trace`] with an explicit execution strategy; output is
/// bit-identical across strategies because each sample owns its noise
/// stream and rows are assembled in sample order.
pub fn generate_trace_with(
    model: &ToyDenoiser,
    schedule: &DiffusionSchedule,
    num_samples: usize,
    seed: u64,
    dtype: Dtype,
    exec: Execution,
) -> Result<ActivationTrace, DiffusionError> {
    check_model_schedule(model, schedule)?;
    if num_samples == 0 {
        return Err(DiffusionError::BadParams(
            "num_samples must be positive".into(),
        ));
    }
    let t_total = schedule.timesteps;

    type SampleCapture = Vec<Vec<Vec<f64>>>; // [timestep][layer][feature]
    let per_sample: Vec<Result<SampleCapture, DiffusionError>> =
        map_indexed(num_samples, exec, |s| {
            let mut captured: SampleCapture = vec![Vec::new(); t_total];
            let record = |t: usize, outs: &[Vec<f64>]| {
                captured[t] = match dtype {
                    Dtype::F64 => outs.to_vec(),
                    Dtype::F32 => outs
                        .iter()
                        .map(|o| o.iter().map(|&v| (v as f32) as f64).collect())
                        .collect(),
                };
            };
            sample_chain(model, schedule, s, seed, None, record)?;
            Ok(captured)
        });
    let mut captures = Vec::with_capacity(num_samples);
    for r in per_sample {
        captures.push(r?);
    }

    let mut map = BTreeMap::new();
    for t in 0..t_total {
        for (i, spec) in model.specs.iter().enumerate() {
            let mut data = Vec::with_capacity(num_samples * spec.out_dim);
            for cap in &captures {
                data.extend_from_slice(&cap[t][i]);
            }
            let tensor = Array2::from_shape_vec((num_samples, spec.out_dim), data)
                .expect("capture dims fixed by model shape");
            map.insert((t, i), tensor);
        }
    }
    let manifest = model.manifest(num_samples, dtype, seed);
    Ok(ActivationTrace::from_map(manifest, map)?)
}

/// Final denoised batch of a reverse run plus per-layer activation ranges,
/// for calibrating activation quantizers and scoring quantized models.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    /// `num_samples x data_dim` denoised samples.
    pub x0: Array2<f64>,
    /// Per-layer (min, max) over every sample and timestep.
    pub act_ranges: Vec<(f64, f64)>,
}

/// Runs reverse chains exactly like [`generate_trace`] (same seed gives
/// the same noise draws) but keeps only the outputs and activation
/// ranges. `act_quant` threads per-layer fake quantization through every
/// forward call.
pub fn run_reverse_chain(
    model: &ToyDenoiser,
    schedule: &DiffusionSchedule,
    num_samples: usize,
    seed: u64,
    act_quant: Option<&[QuantizerConfig]>,
    exec: Execution,
) -> Result<ChainOutput, DiffusionError> {
    check_model_schedule(model, schedule)?;
    if num_samples == 0 {
        return Err(DiffusionError::BadParams(
            "num_samples must be positive".into(),
        ));
    }
    let layers = model.num_layers();
    let per_sample = map_indexed(num_samples, exec, |s| {
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); layers];
        let record = |_t: usize, outs: &[Vec<f64>]| {
            for (i, out) in outs.iter().enumerate() {
                for &v in out {
                    ranges[i].0 = ranges[i].0.min(v);
                    ranges[i].1 = ranges[i].1.max(v);
                }
            }
        };
        let x0 = sample_chain(model, schedule, s, seed, act_quant, record)?;
        Ok::<_, DiffusionError>((x0, ranges))
    });

    let mut x0 = Array2::zeros((num_samples, model.data_dim));
    let mut act_ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); layers];
    for (s, r) in per_sample.into_iter().enumerate() {
        let (row, ranges) = r?;
        for (d, &v) in row.iter().enumerate() {
            x0[[s, d]] = v;
        }
        for (i, (lo, hi)) in ranges.into_iter().enumerate() {
            act_ranges[i].0 = act_ranges[i].0.min(lo);
            act_ranges[i].1 = act_ranges[i].1.max(hi);
        }
    }
    Ok(ChainOutput { x0, act_ranges })
}

/// One reverse update applied to a whole batch:
///
/// ```text
/// x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps(x_t, t)) / sqrt(alpha_t)
///           + sigma_t * z
/// ```
///
/// `t` is 1-based; the final step (`t = 1`) adds no noise since
/// `sigma[0] = 0`. The noise `z` comes from a stream owned by
/// (`noise_seed`, t), row-major over the batch.
pub fn reverse_step(
    x: &Array2<f64>,
    t: usize,
    model: &ToyDenoiser,
    schedule: &DiffusionSchedule,
    noise_seed: u64,
) -> Result<Array2<f64>, DiffusionError> {
    check_model_schedule(model, schedule)?;
    if t == 0 || t > schedule.timesteps {
        return Err(DiffusionError::InvalidTimestep {
            t,
            max: schedule.timesteps,
        });
    }
    if x.ncols() != model.data_dim {
        return Err(DiffusionError::BadParams(format!(
            "batch has {} features, model takes {}",
            x.ncols(),
            model.data_dim
        )));
    }
    let i = t - 1;
    let inv_sqrt_alpha = 1.0 / schedule.alpha[i].sqrt();
    let coef = schedule.beta[i] / (1.0 - schedule.alpha_bar[i]).sqrt();
    let sigma = schedule.sigma[i];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, STREAM_REVERSE, t as u64));
    let mut out = Array2::zeros(x.dim());
    for r in 0..x.nrows() {
        let row: Vec<f64> = x.row(r).iter().copied().collect();
        let (eps, _) = model.forward(&row, t, None)?;
        let z = standard_normal_vec(&mut rng, x.ncols());
        for c in 0..x.ncols() {
            out[[r, c]] = inv_sqrt_alpha * (x[[r, c]] - coef * eps[c]) + sigma * z[c];
        }
    }
    Ok(out)
}

/// Applies `t` forward noising steps to a batch, stepwise:
/// `x_s = sqrt(1 - beta_s) * x_{s-1} + sqrt(beta_s) * eps_s`.
pub fn forward_noise(
    x0: &Array2<f64>,
    t: usize,
    schedule: &DiffusionSchedule,
    noise_seed: u64,
) -> Result<Array2<f64>, DiffusionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, STREAM_FORWARD, 0));
    let shape = x0.dim();
    forward_noise_with(x0, t, schedule, |_s| {
        let mut eps = Array2::zeros(shape);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                eps[[r, c]] = rng.sample(StandardNormal);
            }
        }
        eps
    })
}

/// [`forward_noise`] with the per-step noise supplied by `noise_step(s)`;
/// lets tests drive the recursion with fixed noise.
pub fn forward_noise_with(
    x0: &Array2<f64>,
    t: usize,
    schedule: &DiffusionSchedule,
    mut noise_step: impl FnMut(usize) -> Array2<f64>,
) -> Result<Array2<f64>, DiffusionError> {
    if t == 0 || t > schedule.timesteps {
        return Err(DiffusionError::InvalidTimestep {
            t,
            max: schedule.timesteps,
        });
    }
    let mut x = x0.clone();
    for s in 1..=t {
        let eps = noise_step(s);
        if eps.dim() != x.dim() {
            return Err(DiffusionError::BadParams(
                "noise shape does not match the batch".into(),
            ));
        }
        let scale = (1.0 - schedule.beta[s - 1]).sqrt();
        let noise_scale = schedule.beta[s - 1].sqrt();
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                x[[r, c]] = scale * x[[r, c]] + noise_scale * eps[[r, c]];
            }
        }
    }
    Ok(x)
}

/// Fractions of the trajectory the sampling study evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingFraction {
    Full,
    Half,
    Quarter,
    Eighth,
    Twentieth,
}

impl SamplingFraction {
    pub const ALL: [SamplingFraction; 5] = [
        SamplingFraction::Full,
        SamplingFraction::Half,
        SamplingFraction::Quarter,
        SamplingFraction::Eighth,
        SamplingFraction::Twentieth,
    ];

    pub fn as_f64(self) -> f64 {
        match self {
            SamplingFraction::Full => 1.0,
            SamplingFraction::Half => 0.5,
            SamplingFraction::Quarter => 0.25,
            SamplingFraction::Eighth => 0.125,
            SamplingFraction::Twentieth => 0.05,
        }
    }
}

impl std::fmt::Display for SamplingFraction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SamplingFraction::Full => write!(f, "1"),
            SamplingFraction::Half => write!(f, "1/2"),
            SamplingFraction::Quarter => write!(f, "1/4"),
            SamplingFraction::Eighth => write!(f, "1/8"),
            SamplingFraction::Twentieth => write!(f, "1/20"),
        }
    }
}

impl FromStr for SamplingFraction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" => Ok(SamplingFraction::Full),
            "1/2" => Ok(SamplingFraction::Half),
            "1/4" => Ok(SamplingFraction::Quarter),
            "1/8" => Ok(SamplingFraction::Eighth),
            "1/20" => Ok(SamplingFraction::Twentieth),
            other => Err(format!(
                "unknown fraction {other:?} (expected 1, 1/2, 1/4, 1/8, or 1/20)"
            )),
        }
    }
}

/// Evenly spaced timestep labels covering a fraction of the trajectory:
/// `round(k * T / m)` for `k` in `0..m` with `m = max(1, round(T * f))`,
/// deduplicated and ascending. Always includes label 0 and never reaches
/// `T`.
pub fn sample_timesteps(num_timesteps: usize, fraction: SamplingFraction) -> Vec<usize> {
    let t = num_timesteps as f64;
    let m = ((t * fraction.as_f64()).round() as usize).max(1);
    let mut out: Vec<usize> = (0..m)
        .map(|k| ((k as f64 * t) / m as f64).round() as usize)
        .collect();
    out.dedup();
    debug_assert!(out.last().is_none_or(|&l| l < num_timesteps));
    out
}

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("schedule: {0}")]
    BadSchedule(String),
    #[error("model parameters: {0}")]
    BadParams(String),
    #[error("timestep {t} outside 1..={max}")]
    InvalidTimestep { t: usize, max: usize },
    #[error("schedule has {schedule} timesteps but the model was built for {model}")]
    ScheduleModelMismatch { schedule: usize, model: usize },
    #[error("weight tensors do not fit the model: {0}")]
    WeightShape(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}
