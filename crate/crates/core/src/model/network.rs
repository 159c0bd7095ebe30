use super::ops::{self, NormCache};
use super::{layout, Layout, NormSlots, ParamGrads, ParamSet, BN_MOMENTUM};
use crate::dataset::NUM_CLASSES;
use crate::error::{Error, Result};

/// Network outputs for a batch, each row-major `[batch, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub batch: usize,
    pub embeddings: Vec<f64>,
    /// Projection-head output before normalization.
    pub projections: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Upstream gradients; `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub embeddings: Option<Vec<f64>>,
    pub projections: Option<Vec<f64>>,
    pub logits: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    h: usize,
    w: usize,
    /// Resolution before the stride-2 pooling that feeds this block.
    pooled_from: Option<(usize, usize)>,
    input: Vec<f64>,
    bn1: NormCache,
    act1: Vec<f64>,
    bn2: NormCache,
    out: Vec<f64>,
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    train: bool,
    input: Vec<f64>,
    stem_bn: NormCache,
    stem_out: Vec<f64>,
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
    embed: Vec<f64>,
    proj_hidden: Vec<f64>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn train_mode(&self) -> bool {
        self.train
    }
}

#[allow(clippy::too_many_arguments)]
fn norm_forward(
    params: &ParamSet,
    slots: NormSlots,
    x: &[f64],
    batch: usize,
    c: usize,
    hw: usize,
    train: bool,
) -> (Vec<f64>, NormCache) {
    ops::batchnorm_forward(
        x,
        batch,
        c,
        hw,
        params.data(slots.gamma),
        params.data(slots.beta),
        params.data(slots.mean),
        params.data(slots.var),
        train,
    )
}

/// Runs the network on `batch` inputs laid out `[batch, 3, H, W]`.
/// `train` selects batch statistics (true) or running statistics (false)
/// in the normalization layers.
pub fn forward(params: &ParamSet, inputs: &[f64], batch: usize, train: bool) -> Result<(BatchOutput, ForwardCache)> {
    let cfg = *params.config();
    if batch == 0 || inputs.len() != batch * cfg.input_len() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} values, expected {batch} x {}",
            inputs.len(),
            cfg.input_len()
        )));
    }
    let lay: Layout = layout(&cfg);
    let c = cfg.stem_channels;
    let (mut h, mut w) = (cfg.input_height, cfg.input_width);

    let stem_pre = ops::conv3x3_forward(inputs, batch, 3, h, w, params.data(lay.stem_conv), c);
    let (mut stem_out, stem_bn) = norm_forward(params, lay.stem_bn, &stem_pre, batch, c, h * w, train);
    ops::relu_inplace(&mut stem_out);

    let mut x = stem_out.clone();
    let mut blocks = Vec::with_capacity(lay.blocks.len());
    for (i, slots) in lay.blocks.iter().enumerate() {
        let pooled_from = (i > 0).then_some((h, w));
        if pooled_from.is_some() {
            x = ops::avgpool2_forward(&x, batch * c, h, w);
            h /= 2;
            w /= 2;
        }
        let hw = h * w;
        let z1 = ops::conv3x3_forward(&x, batch, c, h, w, params.data(slots.conv1), c);
        let (mut act1, bn1) = norm_forward(params, slots.bn1, &z1, batch, c, hw, train);
        ops::relu_inplace(&mut act1);
        let z2 = ops::conv3x3_forward(&act1, batch, c, h, w, params.data(slots.conv2), c);
        let (mut out, bn2) = norm_forward(params, slots.bn2, &z2, batch, c, hw, train);
        out.iter_mut().zip(&x).for_each(|(o, s)| *o += s);
        ops::relu_inplace(&mut out);
        blocks.push(BlockCache {
            h,
            w,
            pooled_from,
            input: std::mem::take(&mut x),
            bn1,
            act1,
            bn2,
            out: out.clone(),
        });
        x = out;
    }

    let hw = h * w;
    let pooled: Vec<f64> = x
        .chunks_exact(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();

    let e = cfg.embed_dim;
    let mut embed = ops::linear_forward(&pooled, batch, c, params.data(lay.embed_w), params.data(lay.embed_b), e);
    ops::relu_inplace(&mut embed);
    let mut proj_hidden =
        ops::linear_forward(&embed, batch, e, params.data(lay.proj1_w), params.data(lay.proj1_b), e);
    ops::relu_inplace(&mut proj_hidden);
    let projections = ops::linear_forward(
        &proj_hidden,
        batch,
        e,
        params.data(lay.proj2_w),
        params.data(lay.proj2_b),
        cfg.proj_dim,
    );
    let logits = ops::linear_forward(&embed, batch, e, params.data(lay.head_w), params.data(lay.head_b), NUM_CLASSES);

    let out = BatchOutput {
        batch,
        embeddings: embed.clone(),
        projections,
        logits,
    };
    let cache = ForwardCache {
        batch,
        train,
        input: inputs.to_vec(),
        stem_bn,
        stem_out,
        blocks,
        pooled,
        embed,
        proj_hidden,
    };
    Ok((out, cache))
}

fn check_grad_len(name: &str, g: &Option<Vec<f64>>, expected: usize) -> Result<()> {
    match g {
        Some(v) if v.len() != expected => Err(Error::ShapeMismatch(format!(
            "{name} gradient has {} values, expected {expected}",
            v.len()
        ))),
        _ => Ok(()),
    }
}

/// Exact gradients of `sum(output * output_grads)` with respect to every
/// trainable tensor. Running statistics receive zero gradient.
pub fn backward(params: &ParamSet, cache: &ForwardCache, grads: &OutputGrads) -> Result<ParamGrads> {
    let cfg = *params.config();
    let lay = layout(&cfg);
    let batch = cache.batch;
    let (c, e, p) = (cfg.stem_channels, cfg.embed_dim, cfg.proj_dim);
    check_grad_len("embedding", &grads.embeddings, batch * e)?;
    check_grad_len("projection", &grads.projections, batch * p)?;
    check_grad_len("logit", &grads.logits, batch * NUM_CLASSES)?;
    if cache.blocks.len() != lay.blocks.len() || cache.pooled.len() != batch * c {
        return Err(Error::ShapeMismatch("cache does not match parameter layout".into()));
    }

    let mut out = params.zeros_like();
    let mut d_embed = grads.embeddings.clone().unwrap_or_else(|| vec![0.0; batch * e]);

    if let Some(dl) = &grads.logits {
        let (mut dw, mut db) = (vec![0.0; NUM_CLASSES * e], vec![0.0; NUM_CLASSES]);
        let dx = ops::linear_backward(&cache.embed, dl, batch, e, params.data(lay.head_w), NUM_CLASSES, &mut dw, &mut db);
        out.data_mut(lay.head_w).copy_from_slice(&dw);
        out.data_mut(lay.head_b).copy_from_slice(&db);
        d_embed.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
    }

    if let Some(dp) = &grads.projections {
        let (mut dw2, mut db2) = (vec![0.0; p * e], vec![0.0; p]);
        let mut dh = ops::linear_backward(&cache.proj_hidden, dp, batch, e, params.data(lay.proj2_w), p, &mut dw2, &mut db2);
        ops::relu_backward_inplace(&mut dh, &cache.proj_hidden);
        let (mut dw1, mut db1) = (vec![0.0; e * e], vec![0.0; e]);
        let dx = ops::linear_backward(&cache.embed, &dh, batch, e, params.data(lay.proj1_w), e, &mut dw1, &mut db1);
        out.data_mut(lay.proj2_w).copy_from_slice(&dw2);
        out.data_mut(lay.proj2_b).copy_from_slice(&db2);
        out.data_mut(lay.proj1_w).copy_from_slice(&dw1);
        out.data_mut(lay.proj1_b).copy_from_slice(&db1);
        d_embed.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
    }

    ops::relu_backward_inplace(&mut d_embed, &cache.embed);
    let (mut dwe, mut dbe) = (vec![0.0; e * c], vec![0.0; e]);
    let d_pooled = ops::linear_backward(&cache.pooled, &d_embed, batch, c, params.data(lay.embed_w), e, &mut dwe, &mut dbe);
    out.data_mut(lay.embed_w).copy_from_slice(&dwe);
    out.data_mut(lay.embed_b).copy_from_slice(&dbe);

    let (last_h, last_w) = cache
        .blocks
        .last()
        .map(|b| (b.h, b.w))
        .unwrap_or((cfg.input_height, cfg.input_width));
    let hw = last_h * last_w;
    let mut dx: Vec<f64> = d_pooled
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / hw as f64, hw))
        .collect();

    for (bc, slots) in cache.blocks.iter().zip(&lay.blocks).rev() {
        let hw = bc.h * bc.w;
        ops::relu_backward_inplace(&mut dx, &bc.out);
        let (mut dg, mut dbt) = (vec![0.0; c], vec![0.0; c]);
        let dz2 = ops::batchnorm_backward(&dx, &bc.bn2, batch, c, hw, params.data(slots.bn2.gamma), &mut dg, &mut dbt);
        out.data_mut(slots.bn2.gamma).copy_from_slice(&dg);
        out.data_mut(slots.bn2.beta).copy_from_slice(&dbt);

        let mut dw = vec![0.0; c * c * 9];
        let mut da1 = ops::conv3x3_backward(&bc.act1, &dz2, batch, c, bc.h, bc.w, params.data(slots.conv2), c, &mut dw, true);
        out.data_mut(slots.conv2).copy_from_slice(&dw);
        ops::relu_backward_inplace(&mut da1, &bc.act1);

        let (mut dg, mut dbt) = (vec![0.0; c], vec![0.0; c]);
        let dz1 = ops::batchnorm_backward(&da1, &bc.bn1, batch, c, hw, params.data(slots.bn1.gamma), &mut dg, &mut dbt);
        out.data_mut(slots.bn1.gamma).copy_from_slice(&dg);
        out.data_mut(slots.bn1.beta).copy_from_slice(&dbt);

        let mut dw = vec![0.0; c * c * 9];
        let din = ops::conv3x3_backward(&bc.input, &dz1, batch, c, bc.h, bc.w, params.data(slots.conv1), c, &mut dw, true);
        out.data_mut(slots.conv1).copy_from_slice(&dw);

        // skip connection
        dx.iter_mut().zip(&din).for_each(|(a, b)| *a += b);
        if let Some((ph, pw)) = bc.pooled_from {
            dx = ops::avgpool2_backward(&dx, batch * c, ph, pw);
        }
    }

    let (h, w) = (cfg.input_height, cfg.input_width);
    ops::relu_backward_inplace(&mut dx, &cache.stem_out);
    let (mut dg, mut dbt) = (vec![0.0; c], vec![0.0; c]);
    let dz = ops::batchnorm_backward(&dx, &cache.stem_bn, batch, c, h * w, params.data(lay.stem_bn.gamma), &mut dg, &mut dbt);
    out.data_mut(lay.stem_bn.gamma).copy_from_slice(&dg);
    out.data_mut(lay.stem_bn.beta).copy_from_slice(&dbt);
    let mut dw = vec![0.0; c * 27];
    ops::conv3x3_backward(&cache.input, &dz, batch, 3, h, w, params.data(lay.stem_conv), c, &mut dw, false);
    out.data_mut(lay.stem_conv).copy_from_slice(&dw);

    Ok(out)
}

/// Folds the batch statistics of a training-mode pass into the running
/// estimates: `running = (1 - m) * running + m * batch`.
pub fn update_running_stats(params: &mut ParamSet, cache: &ForwardCache) {
    if !cache.train {
        return;
    }
    let lay = layout(params.config());
    let mut pairs: Vec<(NormSlots, &NormCache)> = vec![(lay.stem_bn, &cache.stem_bn)];
    for (slots, bc) in lay.blocks.iter().zip(&cache.blocks) {
        pairs.push((slots.bn1, &bc.bn1));
        pairs.push((slots.bn2, &bc.bn2));
    }
    for (slots, nc) in pairs {
        let Some(stats) = &nc.stats else { continue };
        for (r, &m) in params.data_mut(slots.mean).iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, &v) in params.data_mut(slots.var).iter_mut().zip(&stats.var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}
