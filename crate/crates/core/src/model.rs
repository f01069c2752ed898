//! Learnable state, initialization, Adam and the checkpoint format.
//!
//! Parameters and optimizer moments are kept at single precision (stored as
//! `f64` values that are exactly representable as `f32`) so a checkpoint
//! restores the state bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{self, NetworkConfig, SELF_ATTN, ST_ATTN, TAG_ATTN};
use crate::rng::Rng;
use crate::tensor::TensorF;

/// Named tensors in a stable (sorted) order.
pub type ParamMap = BTreeMap<String, TensorF>;

pub const CHECKPOINT_MAGIC: &str = "VISTAG-CKPT v1";

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Normal with the given standard deviation.
    Normal(f64),
    Zero,
}

fn param_specs(cfg: &NetworkConfig) -> Vec<(String, Vec<usize>, Init)> {
    let ls = network::layers(cfg);
    let mut specs = Vec::new();
    let mut conv = |layer: &network::Layer, gain: f64| {
        let std = (gain / layer.fan_in() as f64).sqrt();
        specs.push((layer.weight_name(), layer.weight_shape(), Init::Normal(std)));
        specs.push((layer.bias_name(), vec![layer.cout], Init::Zero));
    };
    for (s, t) in &ls.encoder {
        conv(s, 2.0);
        conv(t, 2.0);
    }
    conv(&ls.bottleneck, 2.0);
    conv(&ls.expand, 2.0);
    conv(&ls.tag[0], 2.0);
    conv(&ls.tag[1], 1.0);
    for d in &ls.decoder {
        conv(d, 2.0);
    }
    conv(&ls.classifier, 1.0);

    let d = cfg.attention_dim;
    let mut attn = |prefix: String, c_in: usize, c_out: usize| {
        let qk = (1.0 / c_in as f64).sqrt();
        specs.push((format!("{prefix}.query"), vec![c_in, d], Init::Normal(qk)));
        specs.push((format!("{prefix}.key"), vec![c_in, d], Init::Normal(qk)));
        specs.push((format!("{prefix}.value"), vec![c_in, d], Init::Normal(qk)));
        specs.push((format!("{prefix}.output"), vec![d, c_out], Init::Normal((1.0 / d as f64).sqrt())));
        specs.push((format!("{prefix}.output_bias"), vec![c_out], Init::Zero));
    };
    let fc = cfg.feature_channels();
    attn(ST_ATTN.to_string(), fc, fc);
    attn(SELF_ATTN.to_string(), cfg.q_channels, cfg.q_channels);
    attn(format!("{TAG_ATTN}.attn"), cfg.tag_embed, cfg.q_channels);
    specs.push((format!("{TAG_ATTN}.expand"), vec![1, cfg.tag_embed], Init::Normal(1.0)));
    specs.push((format!("{TAG_ATTN}.expand_bias"), vec![cfg.tag_embed], Init::Normal(0.5)));
    specs.sort_by(|a, b| a.0.cmp(&b.0));
    specs
}

/// Parameter shapes implied by a configuration.
pub fn param_shapes(cfg: &NetworkConfig) -> BTreeMap<String, Vec<usize>> {
    param_specs(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

fn to_f32_grid(t: &mut TensorF) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Parameters, Adam moments and the number of completed optimizer steps.
#[derive(Clone, Debug)]
pub struct ModelState {
    config: NetworkConfig,
    params: ParamMap,
    m: ParamMap,
    v: ParamMap,
    step: u64,
    /// Bumped on every mutation so stale forward traces can be detected.
    revision: u64,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.step == other.step
            && self.params == other.params
            && self.m == other.m
            && self.v == other.v
    }
}

impl ModelState {
    /// Fresh He-initialized state; every tensor draws from its own stream
    /// derived from `config.rng_seed`.
    pub fn init(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamMap::new();
        for (i, (name, shape, init)) in param_specs(config).into_iter().enumerate() {
            let mut t = match init {
                Init::Zero => TensorF::zeros(&shape),
                Init::Normal(std) => TensorF::randn(&shape, std, &mut Rng::derive(config.rng_seed, &[i as u64])),
            };
            to_f32_grid(&mut t);
            params.insert(name, t);
        }
        let zeros: ParamMap = params.iter().map(|(k, t)| (k.clone(), TensorF::zeros(t.shape()))).collect();
        Ok(ModelState {
            config: config.clone(),
            params,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            revision: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(TensorF::len).sum()
    }

    /// Replace one parameter (same shape). Counts as a state change, so
    /// traces recorded earlier become stale.
    pub fn set_param(&mut self, name: &str, value: TensorF) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        p.check_same_shape(&value)?;
        *p = value;
        self.revision += 1;
        Ok(())
    }

    /// One bias-corrected Adam update. A non-finite gradient aborts the step
    /// and leaves the state untouched.
    pub fn adam_step(&mut self, grads: &ParamMap, opt: &AdamConfig) -> Result<()> {
        opt.validate()?;
        if grads.len() != self.params.len() || grads.keys().zip(self.params.keys()).any(|(a, b)| a != b) {
            return Err(Error::Contract("gradient keys do not match parameter keys".into()));
        }
        for (name, g) in grads {
            g.check_same_shape(&self.params[name])?;
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
        }
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("checked");
            let m = self.m.get_mut(name).expect("moments follow params");
            let v = self.v.get_mut(name).expect("moments follow params");
            for (((pv, mv), vv), gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = (opt.beta1 * *mv + (1.0 - opt.beta1) * gv) as f32 as f64;
                *vv = (opt.beta2 * *vv + (1.0 - opt.beta2) * gv * gv) as f32 as f64;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = (*pv - opt.lr * mhat / (vhat.sqrt() + opt.eps)) as f32 as f64;
            }
        }
        self.step += 1;
        self.revision += 1;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let groups: [(&str, &ParamMap); 3] = [("", &self.params), ("adam.m/", &self.m), ("adam.v/", &self.v)];
        for (prefix, map) in groups {
            for (name, t) in map {
                entries.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                    offset: payload.len() as u64,
                });
                for &x in t.data() {
                    payload.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            step: self.step,
            config: self.config.clone(),
            tensors: entries,
        };
        let line = serde_json::to_string(&manifest).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut buf = Vec::with_capacity(payload.len() + line.len() + 32);
        buf.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        buf.push(b'\n');
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        buf.extend_from_slice(&payload);
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint; fails if its tensors do not match the shapes its
    /// own configuration implies.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::format(path, m);
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        let magic = lines.next().unwrap_or_default();
        if magic != CHECKPOINT_MAGIC.as_bytes() {
            return Err(bad("missing checkpoint header".into()));
        }
        let manifest_line = lines.next().ok_or_else(|| bad("missing manifest".into()))?;
        let payload = lines.next().unwrap_or_default();
        let manifest: Manifest = serde_json::from_slice(manifest_line).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        manifest.config.validate()?;
        let shapes = param_shapes(&manifest.config);
        let mut params = ParamMap::new();
        let mut m = ParamMap::new();
        let mut v = ParamMap::new();
        for e in &manifest.tensors {
            let (map, name) = if let Some(n) = e.name.strip_prefix("adam.m/") {
                (&mut m, n)
            } else if let Some(n) = e.name.strip_prefix("adam.v/") {
                (&mut v, n)
            } else {
                (&mut params, e.name.as_str())
            };
            match shapes.get(name) {
                Some(s) if *s == e.shape => {}
                _ => return Err(bad(format!("unexpected tensor {} {:?}", e.name, e.shape))),
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| bad(format!("payload too short for {}", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            map.insert(name.to_string(), TensorF::new(e.shape.clone(), data)?);
        }
        for map in [&params, &m, &v] {
            if map.len() != shapes.len() {
                return Err(bad(format!("expected {} tensors per group, found {}", shapes.len(), map.len())));
            }
        }
        Ok(ModelState {
            config: manifest.config,
            params,
            m,
            v,
            step: manifest.step,
            revision: 0,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    step: u64,
    config: NetworkConfig,
    tensors: Vec<TensorEntry>,
}
