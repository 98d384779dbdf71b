//! The fully convolutional detector: three feature blocks of
//! `[conv, conv, conv, batch norm, average pool]` followed by a 2-map
//! classification conv, global pooling and softmax.

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{self, Mode, Tensor3, BN_MOMENTUM, KERNEL};
use crate::dsp::WINDOW_SAMPLES;
use crate::error::{Result, SdaError};

pub const N_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub feature_maps: usize,
    pub blocks: usize,
    pub convs_per_block: usize,
}

impl Architecture {
    /// 32 maps per conv, 3 blocks of 3 convs: 10 conv layers in total.
    pub const STANDARD: Architecture = Architecture {
        feature_maps: 32,
        blocks: 3,
        convs_per_block: 3,
    };

    /// Same topology with 2 maps per layer, for gradient checking.
    pub const TINY: Architecture = Architecture {
        feature_maps: 2,
        blocks: 3,
        convs_per_block: 3,
    };

    pub fn n_convs(&self) -> usize {
        self.blocks * self.convs_per_block + 1
    }

    pub fn hash(&self) -> String {
        let desc = format!(
            "fcn1d;in=1;blocks={};convs={};maps={};kernel={KERNEL};pool={}/{};bn;head=2:mean_time,max_channel;softmax",
            self.blocks,
            self.convs_per_block,
            self.feature_maps,
            layers::POOL_SIZE,
            layers::POOL_STRIDE,
        );
        hex::encode(&Sha256::digest(desc.as_bytes())[..8])
    }

    /// Temporal length entering each block and the head.
    pub fn time_plan(&self, input_len: usize) -> Option<Vec<usize>> {
        let mut plan = vec![input_len];
        for _ in 0..self.blocks {
            plan.push(layers::pooled_len(*plan.last()?)?);
        }
        Some(plan)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `(KERNEL, maps_in, maps_out)`.
    pub weights: Array3<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// Number of training batches folded into the running statistics.
    pub updates: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub convs: Vec<ConvLayer>,
    pub norms: Vec<BatchNormLayer>,
    pub seed: u64,
}

/// Gradients for every learnable tensor, in the same order as
/// [`NetworkParams::learnable`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub convs: Vec<(Array3<f64>, Array1<f64>)>,
    pub norms: Vec<(Array1<f64>, Array1<f64>)>,
}

/// Uniform(-b, b) weights with b = sqrt(6 / fan_in), zero biases, unit
/// gamma, zero beta. Deterministic in `seed`.
pub fn init_params(arch: Architecture, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut convs = Vec::with_capacity(arch.n_convs());
    let mut maps_in = 1;
    for i in 0..arch.n_convs() {
        let maps_out = if i + 1 == arch.n_convs() {
            N_CLASSES
        } else {
            arch.feature_maps
        };
        let bound = (6.0 / (KERNEL * maps_in) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let weights = Array3::from_shape_simple_fn((KERNEL, maps_in, maps_out), || dist.sample(&mut rng));
        convs.push(ConvLayer {
            weights,
            bias: Array1::zeros(maps_out),
        });
        maps_in = maps_out;
    }
    let norms = (0..arch.blocks)
        .map(|_| BatchNormLayer {
            gamma: Array1::ones(arch.feature_maps),
            beta: Array1::zeros(arch.feature_maps),
            running_mean: Array1::zeros(arch.feature_maps),
            running_var: Array1::ones(arch.feature_maps),
            updates: 0,
        })
        .collect();
    NetworkParams {
        arch,
        convs,
        norms,
        seed,
    }
}

fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

fn slice_of_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are kept in standard layout")
}

impl NetworkParams {
    /// Index of the first conv of each block, and of the head conv.
    fn conv_index(&self, block: usize, j: usize) -> usize {
        block * self.arch.convs_per_block + j
    }

    fn head_conv(&self) -> usize {
        self.arch.n_convs() - 1
    }

    /// Names of the learnable tensors, in network order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for b in 0..self.arch.blocks {
            for j in 0..self.arch.convs_per_block {
                names.push(format!("block{b}.conv{j}.weight"));
                names.push(format!("block{b}.conv{j}.bias"));
            }
            names.push(format!("block{b}.bn.gamma"));
            names.push(format!("block{b}.bn.beta"));
        }
        names.push("head.conv.weight".into());
        names.push("head.conv.bias".into());
        names
    }

    pub fn learnable(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for b in 0..self.arch.blocks {
            for j in 0..self.arch.convs_per_block {
                let c = &self.convs[self.conv_index(b, j)];
                out.push(slice_of(&c.weights));
                out.push(slice_of(&c.bias));
            }
            out.push(slice_of(&self.norms[b].gamma));
            out.push(slice_of(&self.norms[b].beta));
        }
        let h = &self.convs[self.head_conv()];
        out.push(slice_of(&h.weights));
        out.push(slice_of(&h.bias));
        out
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut [f64]> {
        let per_block = self.arch.convs_per_block;
        let (feature_convs, head) = self.convs.split_at_mut(self.arch.n_convs() - 1);
        let mut out = Vec::new();
        for (block, norm) in feature_convs.chunks_mut(per_block).zip(self.norms.iter_mut()) {
            for c in block {
                out.push(slice_of_mut(&mut c.weights));
                out.push(slice_of_mut(&mut c.bias));
            }
            out.push(slice_of_mut(&mut norm.gamma));
            out.push(slice_of_mut(&mut norm.beta));
        }
        out.push(slice_of_mut(&mut head[0].weights));
        out.push(slice_of_mut(&mut head[0].bias));
        out
    }

    pub fn n_learnable(&self) -> usize {
        self.learnable().iter().map(|t| t.len()).sum()
    }

    pub fn check_architecture(&self, expected: &Architecture) -> Result<()> {
        if self.arch.hash() != expected.hash() {
            return Err(SdaError::ArchitectureMismatch {
                expected: expected.hash(),
                found: self.arch.hash(),
            });
        }
        Ok(())
    }

    /// Folds a training batch's statistics into the running estimates.
    /// The first batch initialises them directly.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (norm, block) in self.norms.iter_mut().zip(&cache.blocks) {
            let bn = &block.norm;
            if norm.updates == 0 {
                norm.running_mean.assign(&bn.batch_mean);
                norm.running_var.assign(&bn.batch_var);
            } else {
                norm.running_mean = &norm.running_mean * BN_MOMENTUM + &bn.batch_mean * (1.0 - BN_MOMENTUM);
                norm.running_var = &norm.running_var * BN_MOMENTUM + &bn.batch_var * (1.0 - BN_MOMENTUM);
            }
            norm.updates += 1;
        }
    }
}

impl ParamGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let per_block = self.convs.len() / self.norms.len().max(1);
        let mut out = Vec::new();
        for (b, norm) in self.norms.iter().enumerate() {
            for (w, bias) in &self.convs[b * per_block..(b + 1) * per_block] {
                out.push(slice_of(w));
                out.push(slice_of(bias));
            }
            out.push(slice_of(&norm.0));
            out.push(slice_of(&norm.1));
        }
        let (w, b) = self.convs.last().expect("head conv");
        out.push(slice_of(w));
        out.push(slice_of(b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let per_block = self.convs.len() / self.norms.len().max(1);
        let n = self.convs.len();
        let (feature, head) = self.convs.split_at_mut(n - 1);
        let mut out = Vec::new();
        for (block, norm) in feature.chunks_mut(per_block).zip(self.norms.iter_mut()) {
            for (w, b) in block {
                out.push(slice_of_mut(w));
                out.push(slice_of_mut(b));
            }
            out.push(slice_of_mut(&mut norm.0));
            out.push(slice_of_mut(&mut norm.1));
        }
        out.push(slice_of_mut(&mut head[0].0));
        out.push(slice_of_mut(&mut head[0].1));
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

pub struct BlockCache {
    /// Inputs of the block's convs; the first is the block input.
    pub conv_inputs: Vec<Tensor3>,
    /// Post-ReLU output of the last conv (batch-norm input).
    pub last_activation: Tensor3,
    pub norm: layers::BatchNormCache,
}

/// Intermediates of a training-mode forward pass.
pub struct ForwardCache {
    pub blocks: Vec<BlockCache>,
    pub head_input: Tensor3,
    pub head_activation: Tensor3,
    pub head: layers::HeadCache,
    pub probs: Array2<f64>,
    pub time_plan: Vec<usize>,
}

pub struct ForwardOutput {
    /// Seizure probability per window.
    pub seizure_prob: Vec<f64>,
    pub cache: Option<ForwardCache>,
}

/// Runs the network on `(windows, channels, time)` input. In `Train` mode
/// batch norm uses the batch's statistics and the cache for
/// [`model_backward`] is returned; running statistics are not touched
/// (see [`NetworkParams::update_running_stats`]).
pub fn model_forward(params: &NetworkParams, input: &ArrayView3<f64>, mode: Mode) -> Result<ForwardOutput> {
    let (windows, channels, len) = input.dim();
    if windows == 0 || channels == 0 {
        return Err(SdaError::Shape("empty input batch".into()));
    }
    let time_plan = params
        .arch
        .time_plan(len)
        .ok_or_else(|| SdaError::Shape(format!("input length {len} too short for {} pooling stages", params.arch.blocks)))?;
    if mode == Mode::Infer {
        if let Some(layer) = params.norms.iter().position(|n| n.updates == 0) {
            return Err(SdaError::NoRunningStats { layer });
        }
    }

    let mut x: Tensor3 = input
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((windows * channels, len, 1))
        .expect("standard layout");
    let mut blocks = Vec::new();
    for b in 0..params.arch.blocks {
        let mut conv_inputs = Vec::with_capacity(params.arch.convs_per_block);
        for j in 0..params.arch.convs_per_block {
            let conv = &params.convs[params.conv_index(b, j)];
            let mut y = layers::conv1d_forward(&x.view(), &conv.weights, &conv.bias)?;
            layers::relu_forward(&mut y);
            if mode == Mode::Train {
                conv_inputs.push(std::mem::replace(&mut x, y));
            } else {
                x = y;
            }
        }
        let norm = &params.norms[b];
        let normalized = match mode {
            Mode::Train => {
                let (out, cache) = layers::batchnorm_forward_train(&x, &norm.gamma, &norm.beta)?;
                blocks.push(BlockCache {
                    conv_inputs,
                    last_activation: std::mem::replace(&mut x, Array3::zeros((0, 0, 0))),
                    norm: cache,
                });
                out
            }
            Mode::Infer => layers::batchnorm_forward_infer(&x, &norm.gamma, &norm.beta, &norm.running_mean, &norm.running_var),
        };
        x = layers::avgpool_forward(&normalized)?;
    }

    let head = &params.convs[params.head_conv()];
    let mut y = layers::conv1d_forward(&x.view(), &head.weights, &head.bias)?;
    layers::relu_forward(&mut y);
    let (logits, head_cache) = layers::global_head_forward(&y, channels)?;
    let mut probs = Array2::zeros((windows, N_CLASSES));
    for (w, row) in logits.rows().into_iter().enumerate() {
        let p = layers::softmax(row.as_slice().expect("contiguous logits"));
        probs.row_mut(w).assign(&Array1::from(p));
    }
    let seizure_prob = probs.column(1).to_vec();
    let cache = (mode == Mode::Train).then(|| ForwardCache {
        blocks,
        head_input: x,
        head_activation: y,
        head: head_cache,
        probs,
        time_plan,
    });
    Ok(ForwardOutput { seizure_prob, cache })
}

/// Gradient of `sum_i weight_i * CE(softmax(logits_i), label_i)` with
/// respect to every learnable tensor.
pub fn model_backward(params: &NetworkParams, cache: &ForwardCache, labels: &[u8], weights: &[f64]) -> Result<ParamGrads> {
    let windows = cache.probs.nrows();
    if labels.len() != windows || weights.len() != windows {
        return Err(SdaError::Shape(format!(
            "{windows} windows but {} labels and {} weights",
            labels.len(),
            weights.len()
        )));
    }
    let mut g_logits = Array2::zeros((windows, N_CLASSES));
    for w in 0..windows {
        for c in 0..N_CLASSES {
            let target = if usize::from(labels[w]) == c { 1.0 } else { 0.0 };
            g_logits[[w, c]] = weights[w] * (cache.probs[[w, c]] - target);
        }
    }

    let mut conv_grads: Vec<Option<(Array3<f64>, Array1<f64>)>> = vec![None; params.arch.n_convs()];
    let mut norm_grads: Vec<Option<(Array1<f64>, Array1<f64>)>> = vec![None; params.arch.blocks];

    let mut g = layers::global_head_backward(&cache.head, &g_logits);
    layers::relu_backward(&cache.head_activation, &mut g);
    let head = &params.convs[params.head_conv()];
    let hg = layers::conv1d_backward(&cache.head_input.view(), &head.weights, &g.view(), true)?;
    conv_grads[params.head_conv()] = Some((hg.weights, hg.bias));
    let mut g = hg.input.expect("requested");

    for b in (0..params.arch.blocks).rev() {
        let block = &cache.blocks[b];
        let pooled = layers::avgpool_backward(&g, cache.time_plan[b]);
        let ng = layers::batchnorm_backward(&block.norm, &params.norms[b].gamma, &pooled);
        norm_grads[b] = Some((ng.gamma, ng.beta));
        g = ng.input;
        for j in (0..params.arch.convs_per_block).rev() {
            let activation = if j + 1 == params.arch.convs_per_block {
                &block.last_activation
            } else {
                &block.conv_inputs[j + 1]
            };
            layers::relu_backward(activation, &mut g);
            let idx = params.conv_index(b, j);
            let need_input = !(b == 0 && j == 0);
            let cg = layers::conv1d_backward(&block.conv_inputs[j].view(), &params.convs[idx].weights, &g.view(), need_input)?;
            conv_grads[idx] = Some((cg.weights, cg.bias));
            if let Some(gi) = cg.input {
                g = gi;
            }
        }
    }
    Ok(ParamGrads {
        convs: conv_grads.into_iter().map(|g| g.expect("every conv visited")).collect(),
        norms: norm_grads.into_iter().map(|g| g.expect("every norm visited")).collect(),
    })
}

/// Convenience: seizure probability of one `(channels, time)` window.
pub fn predict_window(params: &NetworkParams, window: &ndarray::ArrayView2<f64>) -> Result<f64> {
    let input = window.view().insert_axis(ndarray::Axis(0));
    Ok(model_forward(params, &input, Mode::Infer)?.seizure_prob[0])
}

/// Window length the standard pipeline feeds the network.
pub const INPUT_LEN: usize = WINDOW_SAMPLES;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(seed: u64, windows: usize, channels: usize, len: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((windows, channels, len), || rng.gen_range(-2.0..2.0))
    }

    /// Params with running statistics taken from one training batch.
    fn trained_stats(arch: Architecture, seed: u64) -> NetworkParams {
        let mut p = init_params(arch, seed);
        let x = random_input(seed + 100, 4, 3, INPUT_LEN);
        let out = model_forward(&p, &x.view(), Mode::Train).unwrap();
        p.update_running_stats(out.cache.as_ref().unwrap());
        p
    }

    #[test]
    fn time_plan_for_standard_input() {
        assert_eq!(Architecture::STANDARD.time_plan(256), Some(vec![256, 85, 28, 9]));
        assert_eq!(Architecture::STANDARD.n_convs(), 10);
        let p = init_params(Architecture::STANDARD, 1);
        let x = random_input(1, 2, 8, 256);
        let out = model_forward(&p, &x.view(), Mode::Train).unwrap();
        let cache = out.cache.unwrap();
        assert_eq!(cache.time_plan, vec![256, 85, 28, 9]);
        assert_eq!(cache.head_activation.dim(), (16, 9, 2));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(Architecture::STANDARD, 42);
        assert_eq!(a, init_params(Architecture::STANDARD, 42));
        assert_ne!(a.convs[3].weights, init_params(Architecture::STANDARD, 43).convs[3].weights);
        let mut maps_in = 1;
        for c in &a.convs {
            let b = (6.0 / (3 * maps_in) as f64).sqrt();
            assert!(c.weights.iter().all(|w| w.abs() <= b));
            assert!(c.bias.iter().all(|&v| v == 0.0));
            maps_in = c.weights.dim().2;
        }
        assert!(a.norms.iter().all(|n| n.gamma.iter().all(|&g| g == 1.0)));
        assert_eq!(a.tensor_names().len(), a.learnable().len());
    }

    #[test]
    fn infer_requires_running_stats() {
        let p = init_params(Architecture::TINY, 0);
        let x = random_input(0, 1, 2, INPUT_LEN);
        assert!(matches!(
            model_forward(&p, &x.view(), Mode::Infer),
            Err(SdaError::NoRunningStats { layer: 0 })
        ));
    }

    #[test]
    fn output_is_probability_and_channel_symmetric() {
        let p = trained_stats(Architecture::STANDARD, 3);
        let x = random_input(9, 1, 8, INPUT_LEN);
        let base = predict_window(&p, &x.slice(ndarray::s![0, .., ..])).unwrap();
        assert!(base > 0.0 && base < 1.0);

        let mut perm = x.clone();
        perm.invert_axis(ndarray::Axis(1));
        let permuted = predict_window(&p, &perm.slice(ndarray::s![0, .., ..])).unwrap();
        assert_eq!(base, permuted);

        let dup = ndarray::concatenate(ndarray::Axis(1), &[x.view(), x.view()]).unwrap();
        let duplicated = predict_window(&p, &dup.slice(ndarray::s![0, .., ..])).unwrap();
        assert_eq!(base, duplicated);
    }

    #[test]
    fn batched_inference_matches_single_window() {
        let p = trained_stats(Architecture::STANDARD, 5);
        let x = random_input(10, 5, 4, INPUT_LEN);
        let batched = model_forward(&p, &x.view(), Mode::Infer).unwrap().seizure_prob;
        for w in 0..5 {
            let single = predict_window(&p, &x.slice(ndarray::s![w, .., ..])).unwrap();
            assert_eq!(single, batched[w]);
        }
        let again = model_forward(&p, &x.view(), Mode::Infer).unwrap().seizure_prob;
        assert_eq!(batched, again);
    }

    #[test]
    fn backward_weight_scaling() {
        let p = init_params(Architecture::TINY, 7);
        let x = random_input(7, 1, 2, INPUT_LEN);
        let out = model_forward(&p, &x.view(), Mode::Train).unwrap();
        let cache = out.cache.unwrap();
        let zero = model_backward(&p, &cache, &[1], &[0.0]).unwrap();
        assert!(zero.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));

        let one = model_backward(&p, &cache, &[1], &[1.0]).unwrap();
        let two = model_backward(&p, &cache, &[1], &[2.0]).unwrap();
        for (a, b) in one.tensors().iter().zip(two.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(2.0 * x, *y);
            }
        }
        assert!(model_backward(&p, &cache, &[1, 0], &[1.0]).is_err());
    }

    #[test]
    fn learnable_views_agree() {
        let mut p = init_params(Architecture::TINY, 1);
        let before: Vec<Vec<f64>> = p.learnable().iter().map(|t| t.to_vec()).collect();
        let after: Vec<Vec<f64>> = p.learnable_mut().iter().map(|t| t.to_vec()).collect();
        assert_eq!(before, after);
        assert_eq!(p.tensor_names()[0], "block0.conv0.weight");
        assert_eq!(p.tensor_names().len(), 2 * 10 + 2 * 3);
    }
}
