//! The tagging network: factorized encoder, coordinate channels,
//! spatio-temporal attention, bottleneck, tag generator, self-attention,
//! tag-based attention and a semantic decoder over `concat(v, w)`.


use serde::{Deserialize, Serialize};

use crate::attention::{
    self, AttentionTrace, AttentionWeights, TagAttentionTrace, TagAttentionWeights, TemporalPooling,
};
use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::loss::TagVolume;
use crate::model::{ModelState, ParamMap};
use crate::tensor::{self, TensorF};

/// Modules that can be switched off for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_spatio_temporal_attention: bool,
    pub no_self_attention: bool,
    pub no_tag_attention: bool,
    /// Drops the semantic decoder; tag-based attention only feeds the
    /// decoder, so it is skipped as well.
    pub no_decoder: bool,
    pub no_coordinates: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// One stride-2 encoder stage per entry.
    pub encoder_widths: Vec<usize>,
    /// Query/key/value width of every attention block.
    pub attention_dim: usize,
    pub bottleneck_channels: usize,
    /// Spatial stride of the bottleneck (1 keeps feature resolution).
    #[serde(default = "default_bottleneck_stride")]
    pub bottleneck_stride: usize,
    /// Channels of `q`, `v` and `w`.
    pub q_channels: usize,
    pub tag_hidden_channels: usize,
    /// Upsampling factors of the two tag-generator layers.
    pub tag_strides: [usize; 2],
    /// Width of the 1×1 tag expansion in tag-based attention.
    pub tag_embed: usize,
    /// One stride-2 decoder stage per entry, from feature to input resolution.
    pub decoder_widths: Vec<usize>,
    /// Foreground classes; the decoder predicts `classes + 1` scores.
    pub classes: usize,
    #[serde(default)]
    pub pooling: TemporalPooling,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub rng_seed: u64,
}

impl NetworkConfig {
    /// Small network for CPU training on 64×64 clips.
    pub fn desk() -> Self {
        NetworkConfig {
            frames: 8,
            height: 64,
            width: 64,
            encoder_widths: vec![16, 32],
            attention_dim: 16,
            bottleneck_channels: 64,
            bottleneck_stride: 2,
            q_channels: 32,
            tag_hidden_channels: 16,
            tag_strides: [2, 2],
            tag_embed: 8,
            decoder_widths: vec![32, 16],
            classes: 3,
            pooling: TemporalPooling::Mean,
            ablation: Ablation::default(),
            rng_seed: 0,
        }
    }

    /// Full-size layout: 32 frames of 224×224, 14×14×256 features,
    /// 7×7×512 bottleneck and 112×112 tags.
    pub fn full() -> Self {
        NetworkConfig {
            frames: 32,
            height: 224,
            width: 224,
            encoder_widths: vec![32, 64, 128, 256],
            attention_dim: 32,
            bottleneck_channels: 512,
            bottleneck_stride: 2,
            q_channels: 256,
            tag_hidden_channels: 32,
            tag_strides: [4, 2],
            tag_embed: 16,
            decoder_widths: vec![128, 64, 32, 16],
            classes: 40,
            pooling: TemporalPooling::Mean,
            ablation: Ablation::default(),
            rng_seed: 0,
        }
    }

    /// `H' × W'`.
    pub fn feature_size(&self) -> (usize, usize) {
        let f = 1 << self.encoder_widths.len();
        (self.height / f, self.width / f)
    }

    /// `Ht × Wt`.
    pub fn tag_size(&self) -> (usize, usize) {
        let (h, w) = self.feature_size();
        let s = self.tag_strides[0] * self.tag_strides[1];
        (h * s, w * s)
    }

    pub fn feature_channels(&self) -> usize {
        let c = *self.encoder_widths.last().unwrap_or(&3);
        if self.ablation.no_coordinates {
            c
        } else {
            c + 2
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 {
            return bad("frames must be ≥ 1".into());
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return bad("encoder needs at least one stage with positive width".into());
        }
        if !(1..=2).contains(&self.bottleneck_stride) {
            return bad(format!("bottleneck stride {} must be 1 or 2", self.bottleneck_stride));
        }
        let down = (1usize << self.encoder_widths.len()) * self.bottleneck_stride;
        if self.height == 0 || self.width == 0 || self.height % down != 0 || self.width % down != 0 {
            return bad(format!(
                "input {}×{} must be a positive multiple of {down} for {} encoder stages and the bottleneck",
                self.height,
                self.width,
                self.encoder_widths.len()
            ));
        }
        if self.encoder_widths.len() != self.decoder_widths.len() {
            return bad(format!(
                "decoder has {} stages but features are {}× below input resolution",
                self.decoder_widths.len(),
                1usize << self.encoder_widths.len()
            ));
        }
        let (th, tw) = self.tag_size();
        if th > self.height || self.height % th != 0 || tw > self.width || self.width % tw != 0 || self.height / th != self.width / tw {
            return bad(format!(
                "tag resolution {th}×{tw} must divide the input {}×{} by one common factor",
                self.height, self.width
            ));
        }
        if self.tag_strides.contains(&0) {
            return bad("tag strides must be ≥ 1".into());
        }
        for (name, v) in [
            ("attention_dim", self.attention_dim),
            ("bottleneck_channels", self.bottleneck_channels),
            ("q_channels", self.q_channels),
            ("tag_hidden_channels", self.tag_hidden_channels),
            ("tag_embed", self.tag_embed),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return bad(format!("{name} must be ≥ 1"));
            }
        }
        if self.decoder_widths.contains(&0) {
            return bad("decoder widths must be ≥ 1".into());
        }
        Ok(())
    }

    /// Factor between input and tag resolution.
    pub fn tag_downsample(&self) -> usize {
        self.height / self.tag_size().0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum LayerOp {
    Conv,
    Deconv,
}

#[derive(Clone, Debug)]
pub(crate) struct Layer {
    pub name: String,
    pub op: LayerOp,
    pub geom: ConvGeometry,
    pub cin: usize,
    pub cout: usize,
    pub relu: bool,
}

impl Layer {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let [kt, kh, kw] = self.geom.kernel;
        vec![kt, kh, kw, self.cin, self.cout]
    }

    /// Fan-in seen by one output element.
    pub fn fan_in(&self) -> usize {
        let taps = self.geom.taps() * self.cin;
        match self.op {
            LayerOp::Conv => taps,
            LayerOp::Deconv => (taps / self.geom.stride.iter().product::<usize>()).max(1),
        }
    }

    fn forward(&self, params: &ParamMap, x: &TensorF) -> Result<TensorF> {
        let w = param(params, &self.weight_name())?;
        let b = param(params, &self.bias_name())?;
        let mut y = match self.op {
            LayerOp::Conv => conv::conv3d(x, w, Some(b), &self.geom)?,
            LayerOp::Deconv => conv::conv_transpose3d(x, w, Some(b), &self.geom)?,
        };
        if self.relu {
            for v in y.data_mut() {
                *v = v.max(0.0);
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    /// `y` is the layer output; only read when the layer has a ReLU.
    fn backward(&self, params: &ParamMap, x: &TensorF, y: &TensorF, grad: &TensorF, grads: &mut ParamMap) -> Result<TensorF> {
        let w = param(params, &self.weight_name())?;
        let mut g = grad.clone();
        if self.relu {
            y.check_same_shape(grad)?;
            for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
                if *yv <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let cg = match self.op {
            LayerOp::Conv => conv::conv3d_backward(x, w, &self.geom, &g)?,
            LayerOp::Deconv => conv::conv_transpose3d_backward(x, w, &self.geom, &g)?,
        };
        accumulate(grads, &self.weight_name(), &cg.weight)?;
        accumulate(grads, &self.bias_name(), &cg.bias)?;
        Ok(cg.input)
    }
}

fn default_bottleneck_stride() -> usize {
    2
}

fn upsample_geometry(stride: usize) -> ConvGeometry {
    let pad = stride.div_ceil(2);
    ConvGeometry::new([1, stride + 2 * pad, stride + 2 * pad], [1, stride, stride], [0, pad, pad])
}

/// Every convolution layer of the network, in forward order.
pub(crate) struct Layers {
    pub encoder: Vec<(Layer, Layer)>,
    pub bottleneck: Layer,
    pub expand: Layer,
    pub tag: [Layer; 2],
    pub decoder: Vec<Layer>,
    pub classifier: Layer,
}

pub(crate) fn layers(cfg: &NetworkConfig) -> Layers {
    let spatial = ConvGeometry::new([1, 3, 3], [1, 2, 2], [0, 1, 1]);
    let temporal = ConvGeometry::new([3, 1, 1], [1, 1, 1], [1, 0, 0]);
    let up2 = ConvGeometry::new([1, 4, 4], [1, 2, 2], [0, 1, 1]);
    let layer = |name: String, op, geom, cin, cout, relu| Layer {
        name,
        op,
        geom,
        cin,
        cout,
        relu,
    };
    let mut cin = 3;
    let mut encoder = Vec::new();
    for (i, &c) in cfg.encoder_widths.iter().enumerate() {
        encoder.push((
            layer(format!("enc{i}.spatial"), LayerOp::Conv, spatial, cin, c, true),
            layer(format!("enc{i}.temporal"), LayerOp::Conv, temporal, c, c, true),
        ));
        cin = c;
    }
    let fc = cfg.feature_channels();
    let bs = cfg.bottleneck_stride;
    let squeeze = ConvGeometry::new([1, 3, 3], [1, bs, bs], [0, 1, 1]);
    let bottleneck = layer("bottleneck".into(), LayerOp::Conv, squeeze, fc, cfg.bottleneck_channels, true);
    let expand = layer(
        "expand".into(),
        LayerOp::Deconv,
        upsample_geometry(bs),
        cfg.bottleneck_channels,
        cfg.q_channels,
        true,
    );
    let tag = [
        layer(
            "tag1".into(),
            LayerOp::Deconv,
            upsample_geometry(cfg.tag_strides[0]),
            cfg.q_channels,
            cfg.tag_hidden_channels,
            true,
        ),
        layer(
            "tag2".into(),
            LayerOp::Deconv,
            upsample_geometry(cfg.tag_strides[1]),
            cfg.tag_hidden_channels,
            1,
            false,
        ),
    ];
    let mut decoder = Vec::new();
    let mut cin = 2 * cfg.q_channels;
    for (j, &c) in cfg.decoder_widths.iter().enumerate() {
        decoder.push(layer(format!("dec{j}"), LayerOp::Deconv, up2, cin, c, true));
        cin = c;
    }
    let classifier = layer(
        "classifier".into(),
        LayerOp::Conv,
        ConvGeometry::pointwise(),
        cin,
        cfg.classes + 1,
        false,
    );
    Layers {
        encoder,
        bottleneck,
        expand,
        tag,
        decoder,
        classifier,
    }
}

pub(crate) const ST_ATTN: &str = "st_attn";
pub(crate) const SELF_ATTN: &str = "self_attn";
pub(crate) const TAG_ATTN: &str = "tag_attn";

pub(crate) fn param<'a>(params: &'a ParamMap, name: &str) -> Result<&'a TensorF> {
    params
        .get(name)
        .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
}

fn accumulate(grads: &mut ParamMap, name: &str, g: &TensorF) -> Result<()> {
    match grads.get_mut(name) {
        Some(acc) => acc.add_assign(g),
        None => {
            grads.insert(name.to_string(), g.clone());
            Ok(())
        }
    }
}

pub(crate) fn attention_weights(params: &ParamMap, prefix: &str) -> Result<AttentionWeights> {
    let get = |s: &str| param(params, &format!("{prefix}.{s}")).cloned();
    Ok(AttentionWeights {
        query: get("query")?,
        key: get("key")?,
        value: get("value")?,
        output: get("output")?,
        output_bias: get("output_bias")?,
    })
}

fn tag_attention_weights(params: &ParamMap) -> Result<TagAttentionWeights> {
    Ok(TagAttentionWeights {
        expand: param(params, &format!("{TAG_ATTN}.expand"))?.clone(),
        expand_bias: param(params, &format!("{TAG_ATTN}.expand_bias"))?.clone(),
        attention: attention_weights(params, &format!("{TAG_ATTN}.attn"))?,
    })
}

fn store_attention_grads(grads: &mut ParamMap, prefix: &str, g: &AttentionWeights) -> Result<()> {
    for (suffix, t) in g.named() {
        accumulate(grads, &format!("{prefix}.{suffix}"), t)?;
    }
    Ok(())
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    revision: u64,
    config: NetworkConfig,
    /// Input followed by the output of every encoder layer.
    encoder: Vec<TensorF>,
    f: TensorF,
    st: Option<AttentionTrace>,
    u: TensorF,
    bottleneck: TensorF,
    q: TensorF,
    tag_hidden: TensorF,
    tags: TensorF,
    sa: Option<AttentionTrace>,
    v: TensorF,
    ta: Option<TagAttentionTrace>,
    w: Option<TensorF>,
    /// Decoder input followed by every decoder layer output.
    decoder: Vec<TensorF>,
}

impl ForwardTrace {
    /// Encoder output after coordinate channels.
    pub fn f(&self) -> &TensorF {
        &self.f
    }

    pub fn u(&self) -> &TensorF {
        &self.u
    }

    pub fn bottleneck(&self) -> &TensorF {
        &self.bottleneck
    }

    pub fn q(&self) -> &TensorF {
        &self.q
    }

    pub fn v(&self) -> &TensorF {
        &self.v
    }

    pub fn w(&self) -> Option<&TensorF> {
        self.w.as_ref()
    }

    pub fn tags(&self) -> &TensorF {
        &self.tags
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Runs the network on one clip `T×H×W×3`.
///
/// Returns tags at tag resolution, decoder logits `T×H×W×(C+1)` (absent when
/// the decoder is ablated) and the trace for [`backward`].
pub fn forward(clip: &TensorF, state: &ModelState) -> Result<(TagVolume, Option<TensorF>, ForwardTrace)> {
    let cfg = state.config();
    let (t, h, w, c) = clip.dims4()?;
    if (t, h, w, c) != (cfg.frames, cfg.height, cfg.width, 3) {
        return Err(Error::Config(format!(
            "clip {:?} does not match configured {}×{}×{}×3",
            clip.shape(),
            cfg.frames,
            cfg.height,
            cfg.width
        )));
    }
    let params = state.params();
    let ls = layers(cfg);

    let mut encoder = vec![clip.clone()];
    for (spatial, temporal) in &ls.encoder {
        let s = spatial.forward(params, encoder.last().expect("input"))?;
        let tm = temporal.forward(params, &s)?;
        encoder.push(s);
        encoder.push(tm);
    }
    let enc_out = encoder.last().expect("encoder output");
    let f = if cfg.ablation.no_coordinates {
        enc_out.clone()
    } else {
        attention::add_coordinate_channels(enc_out)?
    };

    let (u, st) = if cfg.ablation.no_spatio_temporal_attention {
        (f.clone(), None)
    } else {
        let aw = attention_weights(params, ST_ATTN)?;
        let (a, tr) = attention::spatio_temporal_attention(&f, &aw, cfg.pooling)?;
        (f.add(&a)?, Some(tr))
    };

    let bottleneck = ls.bottleneck.forward(params, &u)?;
    let q = ls.expand.forward(params, &bottleneck)?;
    let tag_hidden = ls.tag[0].forward(params, &q)?;
    let tags = ls.tag[1].forward(params, &tag_hidden)?.map(sigmoid);

    let (v, sa) = if cfg.ablation.no_self_attention {
        (q.clone(), None)
    } else {
        let aw = attention_weights(params, SELF_ATTN)?;
        let (a, tr) = attention::self_attention(&q, &aw)?;
        (q.add(&a)?, Some(tr))
    };

    let mut w_out = None;
    let mut ta = None;
    let mut decoder = Vec::new();
    let mut scores = None;
    if !cfg.ablation.no_decoder {
        let (fh, fw) = cfg.feature_size();
        let wv = if cfg.ablation.no_tag_attention {
            TensorF::zeros(v.shape())
        } else {
            let tw = tag_attention_weights(params)?;
            let (wv, tr) = attention::tag_based_attention(&tags, (fh, fw), &tw, cfg.pooling)?;
            ta = Some(tr);
            wv
        };
        decoder.push(tensor::concat_channels(&[&v, &wv])?);
        for layer in &ls.decoder {
            let y = layer.forward(params, decoder.last().expect("decoder input"))?;
            decoder.push(y);
        }
        scores = Some(ls.classifier.forward(params, decoder.last().expect("decoder output"))?);
        w_out = Some(wv);
    }

    let trace = ForwardTrace {
        revision: state.revision(),
        config: cfg.clone(),
        encoder,
        f,
        st,
        u,
        bottleneck,
        q,
        tag_hidden,
        tags: tags.clone(),
        sa,
        v,
        ta,
        w: w_out,
        decoder,
    };
    Ok((TagVolume::new(tags)?, scores, trace))
}

/// Gradients of every parameter given the loss gradients with respect to
/// the tags and (when the decoder is active) the decoder logits.
///
/// Parameters of disabled modules receive zero gradients.
pub fn backward(trace: &ForwardTrace, grad_tags: &TensorF, grad_scores: Option<&TensorF>, state: &ModelState) -> Result<ParamMap> {
    let cfg = state.config();
    if trace.revision != state.revision() || &trace.config != cfg {
        return Err(Error::Contract(format!(
            "stale trace: recorded at revision {} but the model is at revision {}",
            trace.revision,
            state.revision()
        )));
    }
    grad_tags.check_same_shape(&trace.tags)?;
    let params = state.params();
    let ls = layers(cfg);
    let mut grads = ParamMap::new();

    let mut g_tags = grad_tags.clone();
    let mut g_v = TensorF::zeros(trace.v.shape());
    if !cfg.ablation.no_decoder {
        let gs = grad_scores
            .ok_or_else(|| Error::Contract("decoder is active but no score gradient was given".into()))?;
        let n = trace.decoder.len();
        let mut g = ls.classifier.backward(params, &trace.decoder[n - 1], gs, gs, &mut grads)?;
        for (j, layer) in ls.decoder.iter().enumerate().rev() {
            g = layer.backward(params, &trace.decoder[j], &trace.decoder[j + 1], &g, &mut grads)?;
        }
        let parts = tensor::split_channels(&g, &[cfg.q_channels, cfg.q_channels])?;
        g_v = parts[0].clone();
        if let Some(ta) = &trace.ta {
            let tw = tag_attention_weights(params)?;
            let tg = attention::tag_based_attention_backward(ta, &tw, &parts[1])?;
            g_tags.add_assign(&tg.tags)?;
            accumulate(&mut grads, &format!("{TAG_ATTN}.expand"), &tg.weights.expand)?;
            accumulate(&mut grads, &format!("{TAG_ATTN}.expand_bias"), &tg.weights.expand_bias)?;
            store_attention_grads(&mut grads, &format!("{TAG_ATTN}.attn"), &tg.weights.attention)?;
        }
    } else if grad_scores.is_some() {
        return Err(Error::Contract("score gradient given but the decoder is disabled".into()));
    }

    // v = q + SA(q)
    let mut g_q = g_v.clone();
    if let Some(sa) = &trace.sa {
        let aw = attention_weights(params, SELF_ATTN)?;
        let ag = attention::attention_backward(sa, &aw, &g_v)?;
        g_q.add_assign(&ag.input)?;
        store_attention_grads(&mut grads, SELF_ATTN, &ag.weights)?;
    }

    // tags = sigmoid(z)
    let mut g_z = g_tags;
    for (g, s) in g_z.data_mut().iter_mut().zip(trace.tags.data()) {
        *g *= s * (1.0 - s);
    }
    let g_hidden = ls.tag[1].backward(params, &trace.tag_hidden, &g_z, &g_z, &mut grads)?;
    let g_q_tag = ls.tag[0].backward(params, &trace.q, &trace.tag_hidden, &g_hidden, &mut grads)?;
    g_q.add_assign(&g_q_tag)?;

    let g_b = ls.expand.backward(params, &trace.bottleneck, &trace.q, &g_q, &mut grads)?;
    let g_u = ls.bottleneck.backward(params, &trace.u, &trace.bottleneck, &g_b, &mut grads)?;

    // u = f + ST(f)
    let mut g_f = g_u.clone();
    if let Some(st) = &trace.st {
        let aw = attention_weights(params, ST_ATTN)?;
        let ag = attention::attention_backward(st, &aw, &g_u)?;
        g_f.add_assign(&ag.input)?;
        store_attention_grads(&mut grads, ST_ATTN, &ag.weights)?;
    }

    let enc_c = *cfg.encoder_widths.last().expect("validated");
    let mut g = if cfg.ablation.no_coordinates {
        g_f
    } else {
        tensor::split_channels(&g_f, &[enc_c, 2])?.swap_remove(0)
    };
    for (i, (spatial, temporal)) in ls.encoder.iter().enumerate().rev() {
        let x = &trace.encoder[2 * i];
        let s = &trace.encoder[2 * i + 1];
        let tm = &trace.encoder[2 * i + 2];
        g = temporal.backward(params, s, tm, &g, &mut grads)?;
        g = spatial.backward(params, x, s, &g, &mut grads)?;
    }

    for (name, p) in params {
        if !grads.contains_key(name) {
            grads.insert(name.clone(), TensorF::zeros(p.shape()));
        }
    }
    Ok(grads)
}
