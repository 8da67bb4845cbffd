//! Exemplar memory bank: herding selection, condensed-exemplar storage,
//! exact byte accounting, and the versioned `FMEX` binary container.

use crate::autodiff::Tensor;
use crate::condenser::LossBreakdown;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use std::collections::BTreeMap;
use std::path::Path;

/// Stored pixel payload: image bytes by default, raw floats when
/// quantization is ablated.
#[derive(Clone, Debug, PartialEq)]
pub enum PixelData {
    Bytes(Vec<u8>),
    Floats(Vec<f32>),
}

impl PixelData {
    pub fn len(&self) -> usize {
        match self {
            PixelData::Bytes(v) => v.len(),
            PixelData::Floats(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes occupied in storage (1 per value quantized, 4 per value float).
    pub fn storage_bytes(&self) -> u64 {
        match self {
            PixelData::Bytes(v) => v.len() as u64,
            PixelData::Floats(v) => 4 * v.len() as u64,
        }
    }
}

/// Recorded objective values at the start and end of an exemplar's
/// optimization. Debug metadata: not serialized and excluded from budgets.
#[derive(Clone, Debug, PartialEq)]
pub struct LossAudit {
    pub initial: LossBreakdown,
    pub last: LossBreakdown,
}

/// One stored exemplar: a single condensed frame (or the whole clip under
/// the all-frames strategy), its label, and audit metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct CondensedExemplar {
    pub label: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// T of the source clip; also the length of `weights_audit`.
    pub clip_frames: usize,
    /// Frames actually stored: 1 when condensed, `clip_frames` for a whole
    /// clip.
    pub stored_frames: usize,
    pub pixels: PixelData,
    /// Final normalized condensing weights (uniform for averages, one-hot
    /// for a random pick).
    pub weights_audit: Vec<f32>,
    pub loss_audit: Option<LossAudit>,
}

impl CondensedExemplar {
    pub fn frame_values(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn storage_bytes(&self) -> u64 {
        self.pixels.storage_bytes()
    }

    /// Normalized pixel values in [0, 1], `stored_frames × C × H × W`.
    pub fn pixel_floats(&self) -> Vec<f64> {
        match &self.pixels {
            PixelData::Bytes(v) => v.iter().map(|&b| f64::from(b) / 255.0).collect(),
            PixelData::Floats(v) => v.iter().map(|&f| f64::from(f)).collect(),
        }
    }

    /// Input tensor for replay: a stored single frame is replicated along
    /// the temporal axis back to the source clip's length.
    pub fn to_replay_tensor(&self) -> Tensor {
        let vals = self.pixel_floats();
        let frame = self.frame_values();
        let data = if self.stored_frames == 1 {
            let mut out = Vec::with_capacity(self.clip_frames * frame);
            for _ in 0..self.clip_frames {
                out.extend_from_slice(&vals);
            }
            out
        } else {
            vals
        };
        Tensor::new(
            vec![self.clip_frames, self.channels, self.height, self.width],
            data,
        )
        .expect("exemplar dimensions are consistent by construction")
    }
}

/// Bank configuration: the per-class budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryConfig {
    /// Frames stored per exemplar (1 condensed, T for whole clips).
    pub frames_per_exemplar: u32,
    /// Cap on exemplars per class; 0 disables the memory entirely.
    pub videos_per_class: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEntry {
    /// Incremental stage at which this class was condensed and stored.
    pub stage: u32,
    pub exemplars: Vec<CondensedExemplar>,
}

/// Per-class exemplar collections with exact byte accounting. Exemplars are
/// immutable once inserted; insertion is append-only.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MemoryBank {
    config: Option<MemoryConfig>,
    classes: BTreeMap<u32, ClassEntry>,
}

impl MemoryBank {
    pub fn new(config: MemoryConfig) -> Self {
        MemoryBank { config: Some(config), classes: BTreeMap::new() }
    }

    pub fn config(&self) -> Option<MemoryConfig> {
        self.config
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = (&u32, &ClassEntry)> {
        self.classes.iter()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.keys().copied().collect()
    }

    pub fn exemplars(&self) -> impl Iterator<Item = &CondensedExemplar> {
        self.classes.values().flat_map(|e| e.exemplars.iter())
    }

    pub fn exemplar_count(&self) -> usize {
        self.classes.values().map(|e| e.exemplars.len()).sum()
    }

    pub fn insert(&mut self, stage: u32, exemplar: CondensedExemplar) -> Result<()> {
        let cap = self
            .config
            .ok_or_else(|| Error::Contract("bank has no configuration".into()))?
            .videos_per_class as usize;
        let entry = self
            .classes
            .entry(exemplar.label)
            .or_insert_with(|| ClassEntry { stage, exemplars: Vec::new() });
        if entry.exemplars.len() >= cap {
            return Err(Error::Domain(format!(
                "class {} already holds {} exemplars (cap {})",
                exemplar.label,
                entry.exemplars.len(),
                cap
            )));
        }
        entry.exemplars.push(exemplar);
        Ok(())
    }

    /// Total stored bytes across all exemplars (pixel payloads only; audit
    /// floats are debug metadata and excluded from the budget).
    pub fn total_bytes(&self) -> u64 {
        self.exemplars().map(|e| e.storage_bytes()).sum()
    }

    pub fn total_megabytes(&self) -> f64 {
        self.total_bytes() as f64 / 1e6
    }
}

// ── herding ──────────────────────────────────────────────────────────

/// iCaRL-style herding: greedily pick exemplars whose running mean stays
/// closest to the class mean. Returns indices in selection order; ties break
/// toward the lowest index.
pub fn herding_select(embeddings: &[Vec<f64>], m: usize) -> Result<Vec<usize>> {
    let n = embeddings.len();
    if m > n {
        return Err(Error::Domain(format!("cannot select {} of {} embeddings", m, n)));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::Dim("embeddings have mixed dimensions".into()));
    }
    if embeddings.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain("embeddings must be finite".into()));
    }

    let mut mean = vec![0.0; dim];
    for e in embeddings {
        for (a, v) in mean.iter_mut().zip(e) {
            *a += v / n as f64;
        }
    }

    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut running_sum = vec![0.0; dim];
    for j in 1..=m {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in embeddings.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let mut dist = 0.0;
            for d in 0..dim {
                let diff = mean[d] - (running_sum[d] + e[d]) / j as f64;
                dist += diff * diff;
            }
            if best.map_or(true, |(_, bd)| dist < bd) {
                best = Some((i, dist));
            }
        }
        let (idx, _) = best.expect("at least one unchosen embedding remains");
        taken[idx] = true;
        for (a, v) in running_sum.iter_mut().zip(&embeddings[idx]) {
            *a += v;
        }
        chosen.push(idx);
    }
    Ok(chosen)
}

// ── budget arithmetic ────────────────────────────────────────────────

/// Raw frame pricing: one byte per channel value, megabytes on the 10^6
/// divisor. The returned Mb is rounded to two decimals.
pub fn memory_bytes(frames: u64, height: u64, width: u64, channels: u64) -> (u64, f64) {
    let bytes = frames * channels * height * width;
    let mb = (bytes as f64 / 1e6 * 100.0).round() / 100.0;
    (bytes, mb)
}

/// Display form used in budget tables: two significant figures, with a
/// trailing zero in the hundredths place dropped (0.30 → "0.3" but
/// 6.0 stays "6.0"), matching the published accounting rows.
pub fn format_mb(bytes: u64) -> String {
    let mb = bytes as f64 / 1e6;
    if mb <= 0.0 {
        return "0.0".to_string();
    }
    let decimals = (1 - mb.log10().floor() as i32).max(0) as usize;
    let mut s = format!("{:.*}", decimals, mb);
    if decimals == 2 && s.ends_with('0') {
        s.pop();
    }
    s
}

// ── class means ──────────────────────────────────────────────────────

/// Mean replay-feature embedding per class; the nearest-mean classifier's
/// reference points.
pub fn class_means(bank: &MemoryBank, params: &ModelParams) -> Result<BTreeMap<u32, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (&class, entry) in bank.classes() {
        if entry.exemplars.is_empty() {
            return Err(Error::Domain(format!("class {} has no exemplars", class)));
        }
        let mut mean = vec![0.0; model::EMBED_DIM];
        for ex in &entry.exemplars {
            let bundle = model::extract_features(params, &ex.to_replay_tensor())?;
            for (a, v) in mean.iter_mut().zip(&bundle.embedding.data) {
                *a += v / entry.exemplars.len() as f64;
            }
        }
        out.insert(class, mean);
    }
    Ok(out)
}

// ── FMEX container ───────────────────────────────────────────────────

pub const FMEX_MAGIC: [u8; 4] = *b"FMEX";
pub const FMEX_VERSION: u16 = 1;
pub const SECTION_EXEMPLARS: u8 = 1;
pub const SECTION_PARAMS: u8 = 2;
pub const SECTION_BANK_META: u8 = 3;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {} ({} bytes needed)", what, n),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn encode_exemplar(ex: &CondensedExemplar) -> Vec<u8> {
    let mut p = Vec::new();
    p.extend_from_slice(&ex.label.to_le_bytes());
    p.push(ex.channels as u8);
    p.extend_from_slice(&(ex.height as u16).to_le_bytes());
    p.extend_from_slice(&(ex.width as u16).to_le_bytes());
    p.push(matches!(ex.pixels, PixelData::Bytes(_)) as u8);
    p.extend_from_slice(&(ex.clip_frames as u16).to_le_bytes());
    for w in &ex.weights_audit {
        p.extend_from_slice(&w.to_le_bytes());
    }
    match &ex.pixels {
        PixelData::Bytes(v) => p.extend_from_slice(v),
        PixelData::Floats(v) => {
            for f in v {
                p.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    p
}

fn decode_exemplar(payload: &[u8], section_offset: u64) -> Result<CondensedExemplar> {
    let fail = |r: &Reader, msg: String| Error::Format { offset: section_offset + r.pos as u64, msg };
    let mut r = Reader::new(payload);
    let label = r.u32("exemplar label")?;
    let channels = r.u8("exemplar channels")? as usize;
    let height = r.u16("exemplar height")? as usize;
    let width = r.u16("exemplar width")? as usize;
    let quantized = r.u8("exemplar quantized flag")?;
    if quantized > 1 {
        return Err(fail(&r, format!("invalid quantized flag {}", quantized)));
    }
    let clip_frames = r.u16("exemplar frame count")? as usize;
    let mut weights = Vec::with_capacity(clip_frames);
    for _ in 0..clip_frames {
        weights.push(r.f32("weights audit")?);
    }
    let frame = channels * height * width;
    if frame == 0 {
        return Err(fail(&r, "exemplar has zero-sized frames".into()));
    }
    let remaining = payload.len() - r.pos;
    let value_size = if quantized == 1 { 1 } else { 4 };
    if remaining % (frame * value_size) != 0 {
        return Err(fail(
            &r,
            format!("pixel payload of {} bytes is not a whole number of {}-value frames", remaining, frame),
        ));
    }
    let stored_frames = remaining / (frame * value_size);
    if stored_frames != 1 && stored_frames != clip_frames {
        return Err(fail(
            &r,
            format!("stored frame count {} is neither 1 nor the clip length {}", stored_frames, clip_frames),
        ));
    }
    let pixels = if quantized == 1 {
        PixelData::Bytes(r.take(remaining, "pixel bytes")?.to_vec())
    } else {
        let mut v = Vec::with_capacity(remaining / 4);
        for _ in 0..remaining / 4 {
            v.push(r.f32("pixel floats")?);
        }
        PixelData::Floats(v)
    };
    Ok(CondensedExemplar {
        label,
        channels,
        height,
        width,
        clip_frames,
        stored_frames,
        pixels,
        weights_audit: weights,
        loss_audit: None,
    })
}

fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.push(t.shape.len() as u8);
    for &d in &t.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode_tensor(r: &mut Reader, what: &str) -> Result<Tensor> {
    let rank = r.u8(what)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32(what)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(r.f64(what)?);
    }
    Tensor::new(shape, data)
}

fn encode_params(params: &ModelParams) -> Vec<u8> {
    let mut p = Vec::new();
    p.extend_from_slice(&(params.in_channels as u32).to_le_bytes());
    p.extend_from_slice(&(params.num_classes as u32).to_le_bytes());
    p.extend_from_slice(&params.shift_fold.to_le_bytes());
    for t in params.tensors() {
        encode_tensor(t, &mut p);
    }
    p
}

fn decode_params(payload: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(payload);
    let in_channels = r.u32("params in_channels")? as usize;
    let num_classes = r.u32("params num_classes")? as usize;
    let shift_fold = r.f64("params shift_fold")?;
    let conv1_kernel = decode_tensor(&mut r, "conv1 kernel")?;
    let conv1_bias = decode_tensor(&mut r, "conv1 bias")?;
    let conv2_kernel = decode_tensor(&mut r, "conv2 kernel")?;
    let conv2_bias = decode_tensor(&mut r, "conv2 bias")?;
    let head_weight = decode_tensor(&mut r, "head weight")?;
    let head_bias = decode_tensor(&mut r, "head bias")?;
    Ok(ModelParams {
        conv1_kernel,
        conv1_bias,
        conv2_kernel,
        conv2_bias,
        head_weight,
        head_bias,
        shift_fold,
        num_classes,
        in_channels,
    })
}

fn push_section(out: &mut Vec<u8>, kind: u8, payload: &[u8]) {
    out.push(kind);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn encode_container(sections: &[(u8, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&FMEX_MAGIC);
    out.extend_from_slice(&FMEX_VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u16).to_le_bytes());
    for (kind, payload) in sections {
        push_section(&mut out, *kind, payload);
    }
    out
}

/// Parse the container and return (kind, payload, payload offset) triples.
fn decode_container(buf: &[u8]) -> Result<Vec<(u8, &[u8], u64)>> {
    let mut r = Reader::new(buf);
    let magic = r.take(4, "magic")?;
    if magic != FMEX_MAGIC {
        return Err(Error::Format { offset: 0, msg: format!("bad magic {:?}, expected \"FMEX\"", magic) });
    }
    let version = r.u16("version")?;
    if version != FMEX_VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {}", version) });
    }
    let count = r.u16("section count")?;
    let mut sections = Vec::with_capacity(count as usize);
    for i in 0..count {
        let kind = r.u8(&format!("section {} kind", i))?;
        let len = r.u64(&format!("section {} length", i))? as usize;
        let offset = r.pos as u64;
        let payload = r.take(len, &format!("section {} payload", i))?;
        sections.push((kind, payload, offset));
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes after the last section", buf.len() - r.pos),
        });
    }
    Ok(sections)
}

/// Serialize a bank: one bank-meta section followed by one exemplar section
/// per stored exemplar in class order.
pub fn store(bank: &MemoryBank, path: &Path) -> Result<()> {
    let cfg = bank
        .config()
        .ok_or_else(|| Error::Contract("cannot store a bank without configuration".into()))?;
    let mut sections = Vec::new();
    let mut meta = Vec::new();
    meta.extend_from_slice(&cfg.frames_per_exemplar.to_le_bytes());
    meta.extend_from_slice(&cfg.videos_per_class.to_le_bytes());
    meta.extend_from_slice(&(bank.classes.len() as u32).to_le_bytes());
    for (&class, entry) in bank.classes() {
        meta.extend_from_slice(&class.to_le_bytes());
        meta.extend_from_slice(&entry.stage.to_le_bytes());
    }
    sections.push((SECTION_BANK_META, meta));
    for (_, entry) in bank.classes() {
        for ex in &entry.exemplars {
            sections.push((SECTION_EXEMPLARS, encode_exemplar(ex)));
        }
    }
    std::fs::write(path, encode_container(&sections))?;
    Ok(())
}

/// Load a bank written by [`store`]; pixel data round-trips bit-exactly.
pub fn load(path: &Path) -> Result<MemoryBank> {
    let buf = std::fs::read(path)?;
    let sections = decode_container(&buf)?;
    let mut config = None;
    let mut stages: BTreeMap<u32, u32> = BTreeMap::new();
    let mut classes: BTreeMap<u32, ClassEntry> = BTreeMap::new();
    for (kind, payload, offset) in sections {
        match kind {
            SECTION_BANK_META => {
                let mut r = Reader::new(payload);
                let frames_per_exemplar = r.u32("bank frames_per_exemplar")?;
                let videos_per_class = r.u32("bank videos_per_class")?;
                config = Some(MemoryConfig { frames_per_exemplar, videos_per_class });
                let n = r.u32("bank class count")?;
                for _ in 0..n {
                    let class = r.u32("bank class id")?;
                    let stage = r.u32("bank class stage")?;
                    stages.insert(class, stage);
                }
            }
            SECTION_EXEMPLARS => {
                let ex = decode_exemplar(payload, offset)?;
                let stage = stages.get(&ex.label).copied().unwrap_or(0);
                classes
                    .entry(ex.label)
                    .or_insert_with(|| ClassEntry { stage, exemplars: Vec::new() })
                    .exemplars
                    .push(ex);
            }
            SECTION_PARAMS => {
                return Err(Error::Format {
                    offset,
                    msg: "params section inside a bank file".into(),
                })
            }
            other => {
                return Err(Error::Format { offset, msg: format!("unknown section kind {}", other) })
            }
        }
    }
    let config =
        config.ok_or_else(|| Error::Format { offset: 8, msg: "bank file has no meta section".into() })?;
    Ok(MemoryBank { config: Some(config), classes })
}

/// Write model parameters as a single-section container (kind = params).
pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    let sections = vec![(SECTION_PARAMS, encode_params(params))];
    std::fs::write(path, encode_container(&sections))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let buf = std::fs::read(path)?;
    let sections = decode_container(&buf)?;
    for (kind, payload, offset) in sections {
        if kind == SECTION_PARAMS {
            return decode_params(payload).map_err(|e| match e {
                Error::Format { offset: o, msg } => Error::Format { offset: offset + o, msg },
                other => other,
            });
        }
    }
    Err(Error::Format { offset: 8, msg: "no params section in file".into() })
}

/// Dump raw clips into the same container (exemplar sections holding whole
/// clips) for cross-run reuse.
pub fn dump_clips(clips: &[crate::datagen::VideoClip], path: &Path) -> Result<()> {
    let sections: Vec<(u8, Vec<u8>)> = clips
        .iter()
        .map(|c| {
            let ex = CondensedExemplar {
                label: c.label,
                channels: c.channels,
                height: c.height,
                width: c.width,
                clip_frames: c.frames,
                stored_frames: c.frames,
                pixels: PixelData::Bytes(c.pixels.clone()),
                weights_audit: vec![1.0 / c.frames as f32; c.frames],
                loss_audit: None,
            };
            (SECTION_EXEMPLARS, encode_exemplar(&ex))
        })
        .collect();
    std::fs::write(path, encode_container(&sections))?;
    Ok(())
}

pub fn load_clips(path: &Path) -> Result<Vec<crate::datagen::VideoClip>> {
    let buf = std::fs::read(path)?;
    let sections = decode_container(&buf)?;
    let mut out = Vec::new();
    for (i, (kind, payload, offset)) in sections.into_iter().enumerate() {
        if kind != SECTION_EXEMPLARS {
            return Err(Error::Format { offset, msg: format!("unexpected section kind {} in clip dump", kind) });
        }
        let ex = decode_exemplar(payload, offset)?;
        let PixelData::Bytes(pixels) = ex.pixels else {
            return Err(Error::Format { offset, msg: "clip dump must store quantized pixels".into() });
        };
        out.push(crate::datagen::VideoClip {
            pixels,
            frames: ex.clip_frames,
            channels: ex.channels,
            height: ex.height,
            width: ex.width,
            label: ex.label,
            instance: i as u64,
        });
    }
    Ok(out)
}
