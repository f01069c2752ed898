//! On-disk clips: PPM frames, PGM instance and class masks and a JSON
//! manifest per clip, plus a top-level manifest listing the clips.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{InstanceGT, InstanceInfo, LabelVolume};
use crate::pnm::Image;
use crate::synth::{self, SynthSpec};
use crate::tensor::TensorF;

pub const MANIFEST: &str = "manifest.json";

/// Top-level manifest of a dataset directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Clip sub-directories in order.
    pub clips: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub id: u32,
    pub class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// Per-clip manifest. Frame files may be empty for predictions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifest {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub frame_files: Vec<String>,
    pub instance_masks: Vec<String>,
    pub class_masks: Vec<String>,
    pub instances: Vec<InstanceRecord>,
    /// Frames that went through the network (predictions only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_frames: Option<Vec<usize>>,
    /// Frames filled by interpolation (predictions only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpolated_frames: Option<Vec<usize>>,
}

/// A clip read back from disk.
#[derive(Clone, Debug)]
pub struct ClipData {
    pub manifest: ClipManifest,
    /// `T×H×W×3` in `[0, 1]` when the clip carries frames.
    pub frames: Option<TensorF>,
    pub gt: InstanceGT,
}

impl ClipData {
    /// Predicted instances with their confidences (0 when absent).
    pub fn decoded(&self) -> crate::decode::InstanceResult {
        crate::decode::InstanceResult {
            labels: self.gt.volume.clone(),
            instances: self
                .manifest
                .instances
                .iter()
                .map(|r| crate::decode::DecodedInstance {
                    id: r.id,
                    class_id: r.class_id,
                    confidence: r.confidence.unwrap_or(0.0),
                })
                .collect(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn frame_name(t: usize) -> String {
    format!("frame_{t:03}.ppm")
}

/// Writes one clip directory. `frames` is `T×H×W×3` in `[0, 1]`.
pub fn write_clip(
    dir: &Path,
    frames: Option<&TensorF>,
    labels: &LabelVolume,
    instances: &[InstanceRecord],
    kept_frames: Option<Vec<usize>>,
    interpolated_frames: Option<Vec<usize>>,
) -> Result<()> {
    let (t_n, h, w) = (labels.frames, labels.height, labels.width);
    if let Some(f) = frames {
        let (ft, fh, fw, fc) = f.dims4()?;
        if (ft, fh, fw, fc) != (t_n, h, w, 3) {
            return Err(Error::Dimension(format!("frames {ft}×{fh}×{fw}×{fc} vs masks {t_n}×{h}×{w}")));
        }
    }
    if let Some(r) = instances.iter().find(|r| r.id > 255 || r.class_id > 255) {
        return Err(Error::Label(format!("instance {} / class {} does not fit an 8-bit mask", r.id, r.class_id)));
    }
    let class_of: std::collections::HashMap<u32, u32> = instances.iter().map(|r| (r.id, r.class_id)).collect();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = ClipManifest {
        frames: t_n,
        height: h,
        width: w,
        kept_frames,
        interpolated_frames,
        instances: instances.to_vec(),
        ..ClipManifest::default()
    };
    for t in 0..t_n {
        if let Some(f) = frames {
            let name = frame_name(t);
            Image::rgb(w, h, f.frame(t).iter().map(|&v| to_byte(v)).collect()).write(&dir.join(&name))?;
            m.frame_files.push(name);
        }
        let lab = labels.frame(t);
        let inst: Vec<u8> = lab.iter().map(|&l| l as u8).collect();
        let mut cls = Vec::with_capacity(lab.len());
        for &l in lab {
            if l == 0 {
                cls.push(0);
            } else {
                let c = class_of
                    .get(&l)
                    .ok_or_else(|| Error::Label(format!("mask uses instance {l} missing from the table")))?;
                cls.push(*c as u8);
            }
        }
        let iname = format!("inst_{t:03}.pgm");
        let cname = format!("class_{t:03}.pgm");
        Image::gray(w, h, inst).write(&dir.join(&iname))?;
        Image::gray(w, h, cls).write(&dir.join(&cname))?;
        m.instance_masks.push(iname);
        m.class_masks.push(cname);
    }
    write_json(&dir.join(MANIFEST), &m)
}

/// Files referenced by a clip manifest that do not exist.
pub fn missing_files(dir: &Path, m: &ClipManifest) -> Vec<String> {
    m.frame_files
        .iter()
        .chain(&m.instance_masks)
        .chain(&m.class_masks)
        .filter(|f| !dir.join(f).is_file())
        .cloned()
        .collect()
}

fn check_size(path: &Path, img: &Image, h: usize, w: usize) -> Result<()> {
    if (img.height, img.width) != (h, w) {
        return Err(Error::format(
            path,
            format!("image is {}×{} but the manifest says {h}×{w}", img.height, img.width),
        ));
    }
    Ok(())
}

/// Reads a clip directory written by [`write_clip`].
pub fn read_clip(dir: &Path) -> Result<ClipData> {
    let mpath = dir.join(MANIFEST);
    let m: ClipManifest = read_json(&mpath)?;
    let (t_n, h, w) = (m.frames, m.height, m.width);
    if m.instance_masks.len() != t_n || m.class_masks.len() != t_n || !(m.frame_files.is_empty() || m.frame_files.len() == t_n) {
        return Err(Error::format(&mpath, format!("file lists do not cover {t_n} frames")));
    }
    let missing = missing_files(dir, &m);
    if !missing.is_empty() {
        return Err(Error::format(dir, format!("missing frames: {}", missing.join(", "))));
    }
    let class_of: std::collections::HashMap<u32, u32> = m.instances.iter().map(|r| (r.id, r.class_id)).collect();
    let mut labels = Vec::with_capacity(t_n * h * w);
    for t in 0..t_n {
        let ip = dir.join(&m.instance_masks[t]);
        let cp = dir.join(&m.class_masks[t]);
        let inst = Image::read_gray(&ip)?;
        let cls = Image::read_gray(&cp)?;
        check_size(&ip, &inst, h, w)?;
        check_size(&cp, &cls, h, w)?;
        for (&i, &c) in inst.data.iter().zip(&cls.data) {
            let expect = if i == 0 { Some(0) } else { class_of.get(&(i as u32)).copied() };
            if expect != Some(c as u32) {
                return Err(Error::format(&cp, format!("class {c} disagrees with instance {i}")));
            }
        }
        labels.extend(inst.data.iter().map(|&v| v as u32));
    }
    let volume = LabelVolume::new(t_n, h, w, labels)?;
    // Instances listed but never drawn are tolerated in predictions.
    let present: std::collections::BTreeSet<u32> = volume.labels.iter().copied().filter(|&l| l != 0).collect();
    let infos = m
        .instances
        .iter()
        .filter(|r| present.contains(&r.id))
        .map(|r| InstanceInfo { id: r.id, class_id: r.class_id })
        .collect();
    let gt = InstanceGT::new(volume, infos)?;
    let frames = if m.frame_files.is_empty() {
        None
    } else {
        Some(read_frame_files(dir, &m.frame_files, h, w)?)
    };
    Ok(ClipData { manifest: m, frames, gt })
}

fn read_frame_files(dir: &Path, files: &[String], h: usize, w: usize) -> Result<TensorF> {
    let mut data = Vec::with_capacity(files.len() * h * w * 3);
    for f in files {
        let p = dir.join(f);
        let img = Image::read_rgb(&p)?;
        check_size(&p, &img, h, w)?;
        data.extend(img.data.iter().map(|&b| b as f64 / 255.0));
    }
    TensorF::new(vec![files.len(), h, w, 3], data)
}

/// Frames of a directory: the manifest's frame list when there is one,
/// otherwise every `.ppm` file in name order.
pub fn read_frames(dir: &Path) -> Result<TensorF> {
    if dir.join(MANIFEST).is_file() {
        let clip = read_clip(dir)?;
        return clip.frames.ok_or_else(|| Error::format(dir, "clip has no frames"));
    }
    let mut files: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::format(dir, "no .ppm frames found"));
    }
    let first = Image::read_rgb(&dir.join(&files[0]))?;
    read_frame_files(dir, &files, first.height, first.width)
}

pub fn clip_name(index: usize) -> String {
    format!("clip_{index:04}")
}

/// Renders `spec.clips` clips into `out` with a top-level manifest.
pub fn write_synthetic_dataset(out: &Path, spec: &SynthSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    (0..spec.clips).into_par_iter().try_for_each(|i| {
        let clip = synth::generate_clip(spec, i as u64)?;
        let records: Vec<InstanceRecord> = clip
            .gt
            .instances
            .iter()
            .map(|i| InstanceRecord { id: i.id, class_id: i.class_id, confidence: None })
            .collect();
        write_clip(&out.join(clip_name(i)), Some(&clip.clip), &clip.gt.volume, &records, None, None)
    })?;
    let manifest = DatasetManifest { clips: (0..spec.clips).map(clip_name).collect() };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// A directory is a dataset when its manifest lists clips.
pub fn is_dataset(dir: &Path) -> bool {
    read_json::<DatasetManifest>(&dir.join(MANIFEST)).is_ok()
}

/// Clip directories of a dataset, or the directory itself for a single clip.
pub fn clip_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if is_dataset(dir) {
        let m: DatasetManifest = read_json(&dir.join(MANIFEST))?;
        Ok(m.clips.iter().map(|c| (c.clone(), dir.join(c))).collect())
    } else {
        let name = dir.file_name().map_or_else(|| ".".into(), |n| n.to_string_lossy().into_owned());
        Ok(vec![(name, dir.to_path_buf())])
    }
}

pub fn write_dataset_manifest(dir: &Path, clips: Vec<String>) -> Result<()> {
    write_json(&dir.join(MANIFEST), &DatasetManifest { clips })
}

pub fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}
