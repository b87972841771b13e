use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layers::{
    concat_channels, conv2d, conv2d_backward, lstm_backward, lstm_forward, maxpool2, maxpool2_backward,
    relu_backward, relu_inplace, split_channels, upsample2, upsample2_backward, Fmap, LstmGrads, LstmTrace,
    LstmWeights,
};
use super::tensor::{Matrix, ParameterSet, Scalar, Tensor};
use super::ModelConfig;
use crate::error::{AmtError, Result};

struct ParamSpec {
    name: String,
    dims: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
}

fn specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let k = config.kernel_size;
    let mut out = Vec::new();
    let conv = |prefix: String, cin: usize, cout: usize, out: &mut Vec<ParamSpec>| {
        out.push(ParamSpec {
            name: format!("{prefix}.weight"),
            dims: vec![cout, cin, k, k],
            fan_in: cin * k * k,
            fan_out: cout * k * k,
        });
        out.push(ParamSpec {
            name: format!("{prefix}.bias"),
            dims: vec![cout],
            fan_in: cin * k * k,
            fan_out: cout * k * k,
        });
    };
    let levels = config.unet_levels;
    for l in 0..levels {
        let cin = if l == 0 { 1 } else { config.channels_at(l - 1) };
        conv(format!("enc{l}.conv1"), cin, config.channels_at(l), &mut out);
        conv(format!("enc{l}.conv2"), config.channels_at(l), config.channels_at(l), &mut out);
    }
    let mid_in = if levels == 0 { 1 } else { config.channels_at(levels - 1) };
    conv("mid.conv1".into(), mid_in, config.channels_at(levels), &mut out);
    conv("mid.conv2".into(), config.channels_at(levels), config.channels_at(levels), &mut out);
    for l in (0..levels).rev() {
        let cin = config.channels_at(l + 1) + config.channels_at(l);
        conv(format!("dec{l}.conv1"), cin, config.channels_at(l), &mut out);
        conv(format!("dec{l}.conv2"), config.channels_at(l), config.channels_at(l), &mut out);
    }
    let top = config.channels_at(0);
    out.push(ParamSpec {
        name: "collapse.weight".into(),
        dims: vec![1, top, 1, 1],
        fan_in: top,
        fan_out: 1,
    });
    out.push(ParamSpec {
        name: "collapse.bias".into(),
        dims: vec![1],
        fan_in: top,
        fan_out: 1,
    });
    let (f, h) = (config.input_bins, config.rnn_hidden);
    for dir in ["fwd", "bwd"] {
        out.push(ParamSpec {
            name: format!("rnn.{dir}.w_ih"),
            dims: vec![4 * h, f],
            fan_in: f,
            fan_out: 4 * h,
        });
        out.push(ParamSpec {
            name: format!("rnn.{dir}.w_hh"),
            dims: vec![4 * h, h],
            fan_in: h,
            fan_out: 4 * h,
        });
        out.push(ParamSpec {
            name: format!("rnn.{dir}.bias"),
            dims: vec![4 * h],
            fan_in: f,
            fan_out: 4 * h,
        });
    }
    out.push(ParamSpec {
        name: "head.weight".into(),
        dims: vec![config.output_pitches, 2 * h],
        fan_in: 2 * h,
        fan_out: config.output_pitches,
    });
    out.push(ParamSpec {
        name: "head.bias".into(),
        dims: vec![config.output_pitches],
        fan_in: 2 * h,
        fan_out: config.output_pitches,
    });
    out
}

/// Names and shapes of every parameter tensor, in architecture order.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    specs(config).into_iter().map(|s| (s.name, s.dims)).collect()
}

/// Glorot-uniform weights, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`,
/// drawn tensor by tensor from `ChaCha8Rng::seed_from_u64(seed)`; biases are zero.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParameterSet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    for spec in specs(config) {
        let n: usize = spec.dims.iter().product();
        let values = if spec.name.ends_with("bias") {
            vec![T::zero(); n]
        } else {
            let a = (6.0 / (spec.fan_in + spec.fan_out) as f64).sqrt();
            (0..n).map(|_| T::of(rng.gen_range(-a..a))).collect()
        };
        params.insert(spec.name, Tensor::new(spec.dims, values)?)?;
    }
    Ok(params)
}

#[derive(Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    cout: usize,
}

struct Layout {
    enc: Vec<[Conv; 2]>,
    mid: [Conv; 2],
    /// indexed by level
    dec: Vec<[Conv; 2]>,
    collapse_w: usize,
    collapse_b: usize,
    rnn: [[usize; 3]; 2],
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn resolve<T: Scalar>(params: &ParameterSet<T>, config: &ModelConfig) -> Result<Layout> {
        config.validate()?;
        let problems = params.shape_mismatches(&param_shapes(config));
        if !problems.is_empty() {
            return Err(AmtError::ShapeMismatch(problems));
        }
        let idx = |name: String| params.index_of(&name).expect("checked above");
        let conv = |prefix: String, cout: usize| Conv {
            w: idx(format!("{prefix}.weight")),
            b: idx(format!("{prefix}.bias")),
            cout,
        };
        let levels = config.unet_levels;
        let pair = |p: &str, cout: usize| [conv(format!("{p}.conv1"), cout), conv(format!("{p}.conv2"), cout)];
        Ok(Layout {
            enc: (0..levels).map(|l| pair(&format!("enc{l}"), config.channels_at(l))).collect(),
            mid: pair("mid", config.channels_at(levels)),
            dec: (0..levels).map(|l| pair(&format!("dec{l}"), config.channels_at(l))).collect(),
            collapse_w: idx("collapse.weight".into()),
            collapse_b: idx("collapse.bias".into()),
            rnn: ["fwd", "bwd"].map(|d| {
                [
                    idx(format!("rnn.{d}.w_ih")),
                    idx(format!("rnn.{d}.w_hh")),
                    idx(format!("rnn.{d}.bias")),
                ]
            }),
            head_w: idx("head.weight".into()),
            head_b: idx("head.bias".into()),
        })
    }
}

struct BlockTrace<T> {
    a1: Fmap<T>,
    a2: Fmap<T>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardTrace<T> {
    frames: usize,
    input: Fmap<T>,
    enc: Vec<BlockTrace<T>>,
    pooled: Vec<(Fmap<T>, Vec<u8>)>,
    mid: BlockTrace<T>,
    /// decoder inputs (upsampled ++ skip) and activations, indexed by level
    dec_in: Vec<Fmap<T>>,
    dec: Vec<BlockTrace<T>>,
    features: Vec<T>,
    lstm: Vec<LstmTrace<T>>,
    hidden_cat: Vec<T>,
    logits: Matrix<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn logits(&self) -> &Matrix<T> {
        &self.logits
    }

    pub fn into_logits(self) -> Matrix<T> {
        self.logits
    }

    /// Which rectifiers are open and which max-pool inputs won. Two
    /// parameter points with equal patterns lie in the same smooth piece of
    /// the network function.
    pub fn activation_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut relu = |f: &Fmap<T>| out.extend(f.data.iter().map(|&v| (v > T::zero()) as u8));
        for b in self.enc.iter().chain(std::iter::once(&self.mid)).chain(&self.dec) {
            relu(&b.a1);
            relu(&b.a2);
        }
        for (_, arg) in &self.pooled {
            out.extend_from_slice(arg);
        }
        out
    }
}

fn block<T: Scalar>(params: &ParameterSet<T>, convs: &[Conv; 2], x: &Fmap<T>, k: usize) -> BlockTrace<T> {
    let mut a1 = conv2d(x, params.at(convs[0].w), params.at(convs[0].b), convs[0].cout, k);
    relu_inplace(&mut a1);
    let mut a2 = conv2d(&a1, params.at(convs[1].w), params.at(convs[1].b), convs[1].cout, k);
    relu_inplace(&mut a2);
    BlockTrace { a1, a2 }
}

/// Runs the model and keeps the intermediate values needed for gradients.
pub fn forward_trace<T: Scalar>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    input: &Matrix<T>,
) -> Result<ForwardTrace<T>> {
    let layout = Layout::resolve(params, config)?;
    forward_with_layout(params, config, &layout, input)
}

fn forward_with_layout<T: Scalar>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    layout: &Layout,
    input: &Matrix<T>,
) -> Result<ForwardTrace<T>> {
    if input.cols != config.input_bins {
        return Err(AmtError::Argument(format!(
            "input has {} bins, model expects {}",
            input.cols, config.input_bins
        )));
    }
    let (frames, bins) = (input.rows, input.cols);
    let m = config.pad_multiple();
    let (tp, fp) = (frames.div_ceil(m) * m, bins.div_ceil(m) * m);
    let k = config.kernel_size;

    let mut x0 = Fmap::zeros(1, tp, fp);
    for t in 0..frames {
        x0.data[t * fp..t * fp + bins].copy_from_slice(input.row(t));
    }

    let mut enc = Vec::with_capacity(config.unet_levels);
    let mut pooled: Vec<(Fmap<T>, Vec<u8>)> = Vec::with_capacity(config.unet_levels);
    for (l, convs) in layout.enc.iter().enumerate() {
        let x = if l == 0 { &x0 } else { &pooled[l - 1].0 };
        let b = block(params, convs, x, k);
        pooled.push(maxpool2(&b.a2));
        enc.push(b);
    }
    let mid_in = pooled.last().map(|p| &p.0).unwrap_or(&x0);
    let mid = block(params, &layout.mid, mid_in, k);

    let levels = config.unet_levels;
    let mut dec_in: Vec<Option<Fmap<T>>> = (0..levels).map(|_| None).collect();
    let mut dec: Vec<Option<BlockTrace<T>>> = (0..levels).map(|_| None).collect();
    for l in (0..levels).rev() {
        let below = if l + 1 == levels { &mid.a2 } else { &dec[l + 1].as_ref().unwrap().a2 };
        let cat = concat_channels(&upsample2(below), &enc[l].a2);
        dec[l] = Some(block(params, &layout.dec[l], &cat, k));
        dec_in[l] = Some(cat);
    }
    let dec: Vec<BlockTrace<T>> = dec.into_iter().map(Option::unwrap).collect();
    let dec_in: Vec<Fmap<T>> = dec_in.into_iter().map(Option::unwrap).collect();

    // collapse channels to one value per (frame, bin), cropped to the input size
    let top = dec.first().map(|b| &b.a2).unwrap_or(&mid.a2);
    let cw = params.at(layout.collapse_w);
    let cb = params.at(layout.collapse_b)[0];
    let mut features = vec![cb; frames * bins];
    for (c, &w) in cw.iter().enumerate() {
        let plane = top.plane(c);
        for t in 0..frames {
            let src = &plane[t * fp..t * fp + bins];
            for (d, &v) in features[t * bins..(t + 1) * bins].iter_mut().zip(src) {
                *d += w * v;
            }
        }
    }

    let h = config.rnn_hidden;
    let mut hidden_cat = vec![T::zero(); frames * 2 * h];
    let lstm: Vec<LstmTrace<T>> = layout
        .rnn
        .iter()
        .enumerate()
        .map(|(d, idx)| {
            let w = LstmWeights {
                w_ih: params.at(idx[0]),
                w_hh: params.at(idx[1]),
                bias: params.at(idx[2]),
                hidden: h,
                input: bins,
            };
            lstm_forward(&w, &features, frames, d == 1, &mut hidden_cat, 2 * h, d * h)
        })
        .collect();

    let p = config.output_pitches;
    let hw = params.at(layout.head_w);
    let hb = params.at(layout.head_b);
    let mut logits = Matrix::zeros(frames, p);
    for t in 0..frames {
        let hrow = &hidden_cat[t * 2 * h..(t + 1) * 2 * h];
        for (j, out) in logits.data[t * p..(t + 1) * p].iter_mut().enumerate() {
            let mut acc = hb[j];
            for (&w, &v) in hw[j * 2 * h..(j + 1) * 2 * h].iter().zip(hrow) {
                acc += w * v;
            }
            *out = acc;
        }
    }

    Ok(ForwardTrace {
        frames,
        input: x0,
        enc,
        pooled,
        mid,
        dec_in,
        dec,
        features,
        lstm,
        hidden_cat,
        logits,
    })
}

/// Frame logits (`frames × output_pitches`) for a `frames × input_bins` input.
pub fn forward<T: Scalar>(params: &ParameterSet<T>, config: &ModelConfig, input: &Matrix<T>) -> Result<Matrix<T>> {
    Ok(forward_trace(params, config, input)?.into_logits())
}

#[allow(clippy::too_many_arguments)]
fn block_backward<T: Scalar>(
    params: &ParameterSet<T>,
    grads: &mut ParameterSet<T>,
    convs: &[Conv; 2],
    x: &Fmap<T>,
    trace: &BlockTrace<T>,
    mut grad_a2: Fmap<T>,
    k: usize,
    want_input_grad: bool,
) -> Option<Fmap<T>> {
    relu_backward(&trace.a2, &mut grad_a2);
    let mut conv_back = |conv: &Conv, x: &Fmap<T>, g: &Fmap<T>, want: bool| {
        let (mut gw, mut gb) = (grads.take(conv.w), grads.take(conv.b));
        let gx = conv2d_backward(x, params.at(conv.w), g, &mut gw, &mut gb, k, want);
        grads.restore(conv.w, gw);
        grads.restore(conv.b, gb);
        gx
    };
    let mut grad_a1 = conv_back(&convs[1], &trace.a1, &grad_a2, true).expect("input gradient requested");
    relu_backward(&trace.a1, &mut grad_a1);
    let grad_x = conv_back(&convs[0], x, &grad_a1, want_input_grad);
    grad_x
}

/// Reverse-mode pass: gradients of `sum(grad_logits * logits)` with respect
/// to every parameter, for the evaluation recorded in `trace`.
pub fn backward<T: Scalar>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    trace: &ForwardTrace<T>,
    grad_logits: &Matrix<T>,
) -> Result<ParameterSet<T>> {
    let layout = Layout::resolve(params, config)?;
    backward_with_layout(params, config, &layout, trace, grad_logits)
}

fn backward_with_layout<T: Scalar>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    layout: &Layout,
    trace: &ForwardTrace<T>,
    grad_logits: &Matrix<T>,
) -> Result<ParameterSet<T>> {
    let frames = trace.frames;
    let bins = config.input_bins;
    let (h, p, k) = (config.rnn_hidden, config.output_pitches, config.kernel_size);
    if grad_logits.rows != frames || grad_logits.cols != p {
        return Err(AmtError::Argument(format!(
            "logit gradient is {}x{}, expected {frames}x{p}",
            grad_logits.rows, grad_logits.cols
        )));
    }
    let mut grads = params.zeros_like();

    // head
    let hw = params.at(layout.head_w);
    let mut grad_hidden = vec![T::zero(); frames * 2 * h];
    {
        let mut gw = vec![T::zero(); p * 2 * h];
        let mut gb = vec![T::zero(); p];
        for t in 0..frames {
            let hrow = &trace.hidden_cat[t * 2 * h..(t + 1) * 2 * h];
            let ghrow = &mut grad_hidden[t * 2 * h..(t + 1) * 2 * h];
            for j in 0..p {
                let g = grad_logits.data[t * p + j];
                gb[j] += g;
                let wrow = &hw[j * 2 * h..(j + 1) * 2 * h];
                let gwrow = &mut gw[j * 2 * h..(j + 1) * 2 * h];
                for ((gwv, &hv), (ghv, &wv)) in gwrow.iter_mut().zip(hrow).zip(ghrow.iter_mut().zip(wrow)) {
                    *gwv += g * hv;
                    *ghv += g * wv;
                }
            }
        }
        grads.at_mut(layout.head_w).copy_from_slice(&gw);
        grads.at_mut(layout.head_b).copy_from_slice(&gb);
    }

    // recurrent layer
    let mut grad_features = vec![T::zero(); frames * bins];
    for (d, idx) in layout.rnn.iter().enumerate() {
        let w = LstmWeights {
            w_ih: params.at(idx[0]),
            w_hh: params.at(idx[1]),
            bias: params.at(idx[2]),
            hidden: h,
            input: bins,
        };
        let mut g_ih = vec![T::zero(); 4 * h * bins];
        let mut g_hh = vec![T::zero(); 4 * h * h];
        let mut g_b = vec![T::zero(); 4 * h];
        let mut g = LstmGrads {
            w_ih: &mut g_ih,
            w_hh: &mut g_hh,
            bias: &mut g_b,
        };
        lstm_backward(
            &w,
            &trace.lstm[d],
            &trace.features,
            frames,
            &grad_hidden,
            2 * h,
            d * h,
            &mut g,
            &mut grad_features,
        );
        grads.at_mut(idx[0]).copy_from_slice(&g_ih);
        grads.at_mut(idx[1]).copy_from_slice(&g_hh);
        grads.at_mut(idx[2]).copy_from_slice(&g_b);
    }

    // channel collapse
    let top = trace.dec.first().map(|b| &b.a2).unwrap_or(&trace.mid.a2);
    let (tp, fp) = (top.h, top.w);
    let cw = params.at(layout.collapse_w).to_vec();
    let mut grad_top = Fmap::zeros(top.c, tp, fp);
    {
        let mut gcw = vec![T::zero(); cw.len()];
        let mut gcb = T::zero();
        for t in 0..frames {
            for f in 0..bins {
                let g = grad_features[t * bins + f];
                gcb += g;
                for c in 0..top.c {
                    let o = (c * tp + t) * fp + f;
                    gcw[c] += g * top.data[o];
                    grad_top.data[o] = g * cw[c];
                }
            }
        }
        grads.at_mut(layout.collapse_w).copy_from_slice(&gcw);
        grads.at_mut(layout.collapse_b)[0] = gcb;
    }

    // decoder, top level first
    let levels = config.unet_levels;
    let mut grad_skip: Vec<Option<Fmap<T>>> = (0..levels).map(|_| None).collect();
    let mut grad_below = grad_top;
    for l in 0..levels {
        let grad_cat = block_backward(
            params,
            &mut grads,
            &layout.dec[l],
            &trace.dec_in[l],
            &trace.dec[l],
            grad_below,
            k,
            true,
        )
        .unwrap();
        let (grad_up, gskip) = split_channels(grad_cat, config.channels_at(l + 1));
        grad_skip[l] = Some(gskip);
        grad_below = upsample2_backward(&grad_up);
    }

    // bottleneck
    let mid_in = trace.pooled.last().map(|p| &p.0).unwrap_or(&trace.input);
    let mut grad_pooled = block_backward(
        params,
        &mut grads,
        &layout.mid,
        mid_in,
        &trace.mid,
        grad_below,
        k,
        levels > 0,
    );

    // encoder, deepest level first
    for l in (0..levels).rev() {
        let a2 = &trace.enc[l].a2;
        let mut grad_a2 = maxpool2_backward(grad_pooled.as_ref().unwrap(), &trace.pooled[l].1, a2.h, a2.w);
        let skip = grad_skip[l].take().unwrap();
        for (g, s) in grad_a2.data.iter_mut().zip(&skip.data) {
            *g += *s;
        }
        let x = if l == 0 { &trace.input } else { &trace.pooled[l - 1].0 };
        grad_pooled = block_backward(params, &mut grads, &layout.enc[l], x, &trace.enc[l], grad_a2, k, l > 0);
    }
    Ok(grads)
}

/// A group of aligned (input, target) windows evaluated together.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub id: usize,
    pub inputs: Vec<Matrix<T>>,
    pub targets: Vec<Matrix<T>>,
}

#[derive(Debug, Clone)]
pub struct GradientResult<T> {
    /// Mean loss over every cell of the batch.
    pub loss: T,
    pub grads: ParameterSet<T>,
}

/// Exact gradient of the batch-mean loss. `loss` maps (logits, targets) to
/// the per-cell mean loss and its gradient with respect to the logits.
///
/// Per-sample gradients are summed in sample order, so the parallel and
/// serial paths produce bit-identical results.
pub fn gradient<T, L>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    batch: &Batch<T>,
    loss: L,
    parallel: bool,
) -> Result<GradientResult<T>>
where
    T: Scalar,
    L: Fn(&Matrix<T>, &Matrix<T>) -> Result<(T, Matrix<T>)> + Sync,
{
    if batch.inputs.len() != batch.targets.len() || batch.inputs.is_empty() {
        return Err(AmtError::Argument(format!(
            "batch {} has {} inputs and {} targets",
            batch.id,
            batch.inputs.len(),
            batch.targets.len()
        )));
    }
    let layout = Layout::resolve(params, config)?;
    let total_cells: usize = batch.targets.iter().map(|t| t.data.len()).sum();
    let one = |i: usize| -> Result<(T, ParameterSet<T>)> {
        let trace = forward_with_layout(params, config, &layout, &batch.inputs[i])?;
        let target = &batch.targets[i];
        if target.rows != trace.logits.rows || target.cols != trace.logits.cols {
            return Err(AmtError::Argument(format!(
                "target {}x{} does not match logits {}x{}",
                target.rows, target.cols, trace.logits.rows, trace.logits.cols
            )));
        }
        let (value, mut grad) = loss(&trace.logits, target)?;
        if !value.is_finite() {
            return Err(AmtError::NonFinite {
                batch: batch.id,
                message: format!("loss is {value:?} for sample {i}"),
            });
        }
        let weight = T::of(target.data.len() as f64 / total_cells as f64);
        grad.data.iter_mut().for_each(|g| *g *= weight);
        let grads = backward_with_layout(params, config, &layout, &trace, &grad)?;
        Ok((value * weight, grads))
    };
    let parts: Vec<(T, ParameterSet<T>)> = if parallel {
        (0..batch.inputs.len()).into_par_iter().map(one).collect::<Result<_>>()?
    } else {
        (0..batch.inputs.len()).map(one).collect::<Result<_>>()?
    };
    let mut parts = parts.into_iter();
    let (mut loss_total, mut grads) = parts.next().expect("non-empty batch");
    for (l, g) in parts {
        loss_total += l;
        grads.add_scaled(&g, T::one());
    }
    if !grads.all_finite() {
        return Err(AmtError::NonFinite {
            batch: batch.id,
            message: "gradient contains non-finite values".into(),
        });
    }
    Ok(GradientResult {
        loss: loss_total,
        grads,
    })
}
