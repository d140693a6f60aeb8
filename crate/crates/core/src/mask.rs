//! Segmentation masks: the canonical 12-region palette, one-hot codecs, class
//! weights, lower-half occlusion, nearest-neighbour downsampling and
//! mask-level edits.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of canonical regions.
pub const NUM_REGIONS: usize = 12;
/// Number of raw face-parser classes accepted by [`merge_classes`].
pub const NUM_RAW_CLASSES: usize = 19;

const AREA_EPS: f64 = 1e-6;
const WEIGHT_MIN: f64 = 0.1;
const WEIGHT_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Region {
    Background = 0,
    Skin = 1,
    Brow = 2,
    Eye = 3,
    Glasses = 4,
    Ear = 5,
    Nose = 6,
    InnerMouth = 7,
    UpperLip = 8,
    LowerLip = 9,
    Neck = 10,
    Hair = 11,
}

impl Region {
    pub const ALL: [Region; NUM_REGIONS] = [
        Region::Background,
        Region::Skin,
        Region::Brow,
        Region::Eye,
        Region::Glasses,
        Region::Ear,
        Region::Nose,
        Region::InnerMouth,
        Region::UpperLip,
        Region::LowerLip,
        Region::Neck,
        Region::Hair,
    ];

    /// Lip-sync relevant regions.
    pub const MOUTH: [Region; 3] = [Region::UpperLip, Region::LowerLip, Region::InnerMouth];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Background => "BACKGROUND",
            Region::Skin => "SKIN",
            Region::Brow => "BROW",
            Region::Eye => "EYE",
            Region::Glasses => "GLASSES",
            Region::Ear => "EAR",
            Region::Nose => "NOSE",
            Region::InnerMouth => "INNER_MOUTH",
            Region::UpperLip => "UPPER_LIP",
            Region::LowerLip => "LOWER_LIP",
            Region::Neck => "NECK",
            Region::Hair => "HAIR",
        }
    }

    pub fn from_id(id: u8) -> Option<Region> {
        Region::ALL.get(id as usize).copied()
    }

    pub fn from_name(name: &str) -> Option<Region> {
        Region::ALL.iter().copied().find(|r| r.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Region names with dense ids plus the raw-parser merge table.
///
/// Raw ids 0..12 are one representative of each canonical region in canonical
/// order, so the merge table restricted to canonical ids is the identity.
/// Ids 12..19 are the paired or accessory classes folded into a host region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPalette {
    labels: Vec<String>,
    merge_table: Vec<u8>,
}

impl Default for ClassPalette {
    fn default() -> Self {
        use Region::*;
        let merge = [
            Background, // background
            Skin,       // skin
            Brow,       // left brow
            Eye,        // left eye
            Glasses,    // eyeglasses
            Ear,        // left ear
            Nose,       // nose
            InnerMouth, // mouth interior
            UpperLip,   // upper lip
            LowerLip,   // lower lip
            Neck,       // neck
            Hair,       // hair
            Brow,       // right brow
            Eye,        // right eye
            Ear,        // right ear
            Ear,        // earring
            Neck,       // necklace
            Background, // cloth
            Hair,       // hat
        ];
        Self {
            labels: Region::ALL.iter().map(|r| r.name().to_string()).collect(),
            merge_table: merge.iter().map(|r| r.id()).collect(),
        }
    }
}

impl ClassPalette {
    pub fn new(labels: Vec<String>, merge_table: Vec<u8>) -> Result<Self> {
        if merge_table.len() != NUM_RAW_CLASSES {
            return Err(Error::invalid(format!(
                "merge table covers {} raw ids, expected {NUM_RAW_CLASSES}",
                merge_table.len()
            )));
        }
        let unique: BTreeSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::invalid("duplicate region names in palette"));
        }
        let targets: BTreeSet<u8> = merge_table.iter().copied().collect();
        if targets.len() != labels.len() || targets.iter().any(|&t| t as usize >= labels.len()) {
            return Err(Error::invalid(
                "merge targets must cover every palette id exactly",
            ));
        }
        Ok(Self { labels, merge_table })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn merge_table(&self) -> &[u8] {
        &self.merge_table
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.labels
            .iter()
            .position(|l| l.eq_ignore_ascii_case(name))
            .map(|i| i as u8)
    }

    /// One `raw_id -> canonical_name` line per raw class.
    pub fn to_manifest(&self) -> String {
        self.merge_table
            .iter()
            .enumerate()
            .map(|(raw, &c)| format!("{raw} -> {}\n", self.labels[c as usize]))
            .collect()
    }

    /// Parses a manifest; canonical ids are assigned in order of first appearance.
    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut labels: Vec<String> = Vec::new();
        let mut table = vec![None; NUM_RAW_CLASSES];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (raw, name) = line.split_once("->").ok_or_else(|| {
                Error::invalid(format!("palette line {}: expected `raw -> NAME`", lineno + 1))
            })?;
            let raw: usize = raw.trim().parse().map_err(|_| {
                Error::invalid(format!("palette line {}: bad raw id `{}`", lineno + 1, raw.trim()))
            })?;
            if raw >= NUM_RAW_CLASSES {
                return Err(Error::invalid(format!("palette raw id {raw} out of range")));
            }
            let name = name.trim().to_string();
            let id = match labels.iter().position(|l| *l == name) {
                Some(i) => i,
                None => {
                    labels.push(name);
                    labels.len() - 1
                }
            };
            table[raw] = Some(id as u8);
        }
        let merge_table = table
            .into_iter()
            .enumerate()
            .map(|(raw, t)| t.ok_or_else(|| Error::invalid(format!("raw id {raw} missing from palette"))))
            .collect::<Result<Vec<u8>>>()?;
        Self::new(labels, merge_table)
    }

    /// Short stable digest recorded in checkpoints.
    pub fn hash(&self) -> String {
        crate::harness::config::short_hash(self.to_manifest().as_bytes())
    }
}

/// Integer label grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("segmentation map dimensions must be positive"));
        }
        if labels.len() != height * width {
            return Err(Error::invalid(format!(
                "label buffer has {} entries, expected {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::invalid(format!("label {bad} is not below class count {classes}")));
        }
        Ok(Self { height, width, classes, labels })
    }

    pub fn filled(height: usize, width: usize, classes: usize, label: u8) -> Result<Self> {
        Self::new(height, width, classes, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        assert!((label as usize) < self.classes);
        self.labels[y * self.width + x] = label;
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn distinct(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().collect()
    }

    /// Inclusive bounding box `(y0, x0, y1, x1)` of pixels whose label is in `set`.
    pub fn bbox_of(&self, set: &[u8]) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if set.contains(&self.get(y, x)) {
                    bb = Some(match bb {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        bb
    }

    /// Writes an 8-bit single-channel indexed PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("buffer length checked at construction");
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>, classes: usize) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, classes, img.into_raw())
    }
}

/// Canonical per-frame mask filename.
pub fn frame_filename(index: usize) -> String {
    format!("frame_{index:05}.png")
}

/// Binary C×H×W channel encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotMask {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl OneHotMask {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Channel-major buffer of 0/1 values.
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Per-pixel argmax. An all-zero (occluded) pixel decodes to id 0.
    pub fn decode(&self) -> SegmentationMap {
        let plane = self.height * self.width;
        let mut labels = vec![0u8; plane];
        for (p, label) in labels.iter_mut().enumerate() {
            for c in 0..self.classes {
                if self.data[c * plane + p] > 0 {
                    *label = c as u8;
                    break;
                }
            }
        }
        SegmentationMap { height: self.height, width: self.width, classes: self.classes, labels }
    }

    /// True when every pixel has exactly one hot channel, except rows listed
    /// as occluded which must be all-zero.
    pub fn is_valid(&self, occluded_from_row: Option<usize>) -> bool {
        let plane = self.height * self.width;
        (0..plane).all(|p| {
            let hot: u32 = (0..self.classes).map(|c| self.data[c * plane + p] as u32).sum();
            let row = p / self.width;
            match occluded_from_row {
                Some(r) if row >= r => hot == 0,
                _ => hot == 1,
            }
        })
    }
}

/// Folds a raw parser map onto the palette's canonical ids.
pub fn merge_classes(raw: &SegmentationMap, palette: &ClassPalette) -> Result<SegmentationMap> {
    let table = palette.merge_table();
    let labels = raw
        .labels
        .iter()
        .map(|&v| {
            table
                .get(v as usize)
                .copied()
                .ok_or_else(|| Error::invalid(format!("raw label {v} outside [0,{NUM_RAW_CLASSES})")))
        })
        .collect::<Result<Vec<u8>>>()?;
    SegmentationMap::new(raw.height, raw.width, palette.num_classes(), labels)
}

pub fn one_hot(map: &SegmentationMap, classes: usize) -> Result<OneHotMask> {
    let plane = map.height * map.width;
    let mut data = vec![0u8; classes * plane];
    for (p, &l) in map.labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::invalid(format!("label {l} is not below class count {classes}")));
        }
        data[l as usize * plane + p] = 1;
    }
    Ok(OneHotMask { classes, height: map.height, width: map.width, data })
}

/// Inverse-area class weights over a corpus, normalised to mean one over the
/// classes that occur and clipped to `[0.1, 10]`.
pub fn compute_class_weights(corpus: &[SegmentationMap], classes: usize) -> Result<RegionWeights> {
    if corpus.is_empty() {
        return Err(Error::invalid("class weights need a non-empty corpus"));
    }
    let mut counts = vec![0u64; classes];
    let mut total = 0u64;
    for map in corpus {
        for &l in &map.labels {
            if l as usize >= classes {
                return Err(Error::invalid(format!("label {l} is not below class count {classes}")));
            }
            counts[l as usize] += 1;
        }
        total += map.labels.len() as u64;
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| 1.0 / (n as f64 / total as f64 + AREA_EPS))
        .collect();
    // Identical raw weights normalise to exactly one.
    if raw.iter().all(|&r| r == raw[0]) {
        return Ok(RegionWeights(vec![1.0; classes]));
    }
    // Absent classes sit outside the normalisation and land on the ceiling.
    let present: Vec<f64> = raw.iter().zip(&counts).filter(|(_, &n)| n > 0).map(|(r, _)| *r).collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(RegionWeights(
        raw.iter().map(|r| (r / mean).clamp(WEIGHT_MIN, WEIGHT_MAX)).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionWeights(pub Vec<f64>);

impl RegionWeights {
    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Zeroes every channel from row `floor(H/2)` down.
pub fn occlude_lower_half(mask: &OneHotMask) -> OneHotMask {
    let mut out = mask.clone();
    let start = mask.height / 2;
    for c in 0..mask.classes {
        let base = c * mask.height * mask.width;
        out.data[base + start * mask.width..base + mask.height * mask.width].fill(0);
    }
    out
}

/// Pose source (occluded) and identity reference (full) for one target frame.
#[derive(Debug, Clone)]
pub struct MaskPair {
    pub pose_source: OneHotMask,
    pub identity_reference: OneHotMask,
}

impl MaskPair {
    pub fn new(target: &SegmentationMap, reference: &SegmentationMap, classes: usize) -> Result<Self> {
        if target.height != reference.height || target.width != reference.width {
            return Err(Error::invalid("pose source and identity reference differ in size"));
        }
        Ok(Self {
            pose_source: occlude_lower_half(&one_hot(target, classes)?),
            identity_reference: one_hot(reference, classes)?,
        })
    }

    /// Channel-concatenated `2C×H×W` float buffer.
    pub fn to_input(&self) -> Vec<f32> {
        let mut v = self.pose_source.to_f32();
        v.extend(self.identity_reference.to_f32());
        v
    }
}

/// Nearest-neighbour downsampling anchored at the top-left pixel of each block.
pub fn downsample(map: &SegmentationMap, target_h: usize, target_w: usize) -> Result<SegmentationMap> {
    if target_h == 0 || target_w == 0 || map.height % target_h != 0 || map.width % target_w != 0 {
        return Err(Error::invalid(format!(
            "cannot downsample {}x{} to {}x{}",
            map.height, map.width, target_h, target_w
        )));
    }
    let (fy, fx) = (map.height / target_h, map.width / target_w);
    let mut labels = Vec::with_capacity(target_h * target_w);
    for y in 0..target_h {
        for x in 0..target_w {
            labels.push(map.get(y * fy, x * fx));
        }
    }
    Ok(SegmentationMap { height: target_h, width: target_w, classes: map.classes, labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EditKind {
    RegionTextureSwap,
    Blink,
    BackgroundSwap,
}

impl EditKind {
    pub fn name(self) -> &'static str {
        match self {
            EditKind::RegionTextureSwap => "region_texture_swap",
            EditKind::Blink => "blink",
            EditKind::BackgroundSwap => "background_swap",
        }
    }
}

impl std::str::FromStr for EditKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "region_texture_swap" => Ok(EditKind::RegionTextureSwap),
            "blink" => Ok(EditKind::Blink),
            "background_swap" => Ok(EditKind::BackgroundSwap),
            other => Err(Error::invalid(format!("unknown edit kind `{other}`"))),
        }
    }
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Stencil {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Stencil {
    pub fn is_empty(&self) -> bool {
        self.y1 <= self.y0 || self.x1 <= self.x0
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EditPayload {
    /// Index into the reference images supplied with the edit session.
    Reference(usize),
    Stencil(Stencil),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditSpec {
    pub kind: EditKind,
    pub region_id: u8,
    pub payload: EditPayload,
    /// Inclusive frame range the edit applies to; `None` means every frame.
    pub frames: Option<(usize, usize)>,
}

impl EditSpec {
    pub fn blink(stencil: Stencil) -> Self {
        Self { kind: EditKind::Blink, region_id: Region::Eye.id(), payload: EditPayload::Stencil(stencil), frames: None }
    }

    pub fn applies_to(&self, frame: usize) -> bool {
        self.frames.is_none_or(|(a, b)| frame >= a && frame <= b)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.region_id as usize >= classes {
            return Err(Error::invalid(format!(
                "edit region {} is not below class count {classes}",
                self.region_id
            )));
        }
        match (self.kind, &self.payload) {
            (EditKind::Blink, EditPayload::Stencil(_)) => {
                if self.region_id != Region::Eye.id() {
                    return Err(Error::invalid("blink edits target the EYE region"));
                }
                Ok(())
            }
            (EditKind::Blink, _) => Err(Error::invalid("blink edit needs a stencil payload")),
            (_, EditPayload::Reference(_)) => Ok(()),
            (kind, _) => Err(Error::invalid(format!("{} edit needs a reference payload", kind.name()))),
        }
    }

    /// Parses one `kind region payload [frames=a-b]` record.
    ///
    /// Payloads are `ref=<index>` or `rect=y0,x0,y1,x1`.
    pub fn parse_line(line: &str, palette: &ClassPalette) -> Result<Self> {
        let mut parts = line.split_whitespace();
        let (Some(kind), Some(region), Some(payload)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::invalid(format!("edit record `{line}` needs kind, region and payload")));
        };
        let kind: EditKind = kind.parse()?;
        let region_id = palette
            .id_of(region)
            .ok_or_else(|| Error::invalid(format!("unknown region `{region}`")))?;
        let payload = if let Some(r) = payload.strip_prefix("ref=") {
            EditPayload::Reference(r.parse().map_err(|_| Error::invalid(format!("bad reference `{r}`")))?)
        } else if let Some(r) = payload.strip_prefix("rect=") {
            let v: Vec<usize> = r
                .split(',')
                .map(|t| t.parse().map_err(|_| Error::invalid(format!("bad rectangle `{r}`"))))
                .collect::<Result<_>>()?;
            if v.len() != 4 {
                return Err(Error::invalid(format!("rectangle `{r}` needs four numbers")));
            }
            EditPayload::Stencil(Stencil { y0: v[0], x0: v[1], y1: v[2], x1: v[3] })
        } else {
            return Err(Error::invalid(format!("unrecognised payload `{payload}`")));
        };
        let frames = match parts.next() {
            None => None,
            Some(f) => {
                let range = f
                    .strip_prefix("frames=")
                    .and_then(|r| r.split_once('-'))
                    .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                    .ok_or_else(|| Error::invalid(format!("bad frame range `{f}`")))?;
                Some(range)
            }
        };
        let spec = Self { kind, region_id, payload, frames };
        spec.validate(palette.num_classes())?;
        Ok(spec)
    }

    pub fn to_line(&self, palette: &ClassPalette) -> String {
        let payload = match &self.payload {
            EditPayload::Reference(i) => format!("ref={i}"),
            EditPayload::Stencil(s) => format!("rect={},{},{},{}", s.y0, s.x0, s.y1, s.x1),
        };
        let mut line = format!("{} {} {}", self.kind.name(), palette.labels()[self.region_id as usize], payload);
        if let Some((a, b)) = self.frames {
            line.push_str(&format!(" frames={a}-{b}"));
        }
        line
    }
}

/// Parses an edit file; blank lines and `#` comments are skipped.
pub fn parse_edit_file(text: &str, palette: &ClassPalette) -> Result<Vec<EditSpec>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| EditSpec::parse_line(l, palette))
        .collect()
}

/// Face interior used to validate blink stencils.
const FACE_REGIONS: [Region; 8] = [
    Region::Skin,
    Region::Brow,
    Region::Eye,
    Region::Glasses,
    Region::Nose,
    Region::InnerMouth,
    Region::UpperLip,
    Region::LowerLip,
];

/// Applies a mask-level edit. Only blinks rewrite labels; texture and
/// background swaps act on style codes or pixels downstream.
pub fn apply_edit(map: &SegmentationMap, spec: &EditSpec) -> Result<SegmentationMap> {
    spec.validate(map.classes)?;
    match (spec.kind, &spec.payload) {
        (EditKind::Blink, EditPayload::Stencil(stencil)) => {
            if stencil.is_empty() {
                return Ok(map.clone());
            }
            let face: Vec<u8> = FACE_REGIONS.iter().map(|r| r.id()).collect();
            let inside = map.bbox_of(&face).is_some_and(|(y0, x0, y1, x1)| {
                stencil.y0 >= y0 && stencil.x0 >= x0 && stencil.y1 <= y1 + 1 && stencil.x1 <= x1 + 1
            });
            if !inside {
                return Err(Error::invalid(format!("blink stencil {stencil:?} leaves the face region")));
            }
            let mut out = map.clone();
            let (eye, skin) = (Region::Eye.id(), Region::Skin.id());
            for y in stencil.y0..stencil.y1 {
                for x in stencil.x0..stencil.x1 {
                    if out.get(y, x) == eye {
                        out.set(y, x, skin);
                    }
                }
            }
            Ok(out)
        }
        _ => Ok(map.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, classes: usize, v: &[u8]) -> SegmentationMap {
        SegmentationMap::new(h, w, classes, v.to_vec()).unwrap()
    }

    #[test]
    fn left_and_right_eyes_merge() {
        let p = ClassPalette::default();
        let raw = map(1, 2, NUM_RAW_CLASSES, &[3, 13]);
        let merged = merge_classes(&raw, &p).unwrap();
        assert_eq!(merged.labels(), &[Region::Eye.id(), Region::Eye.id()]);
    }

    #[test]
    fn merge_covers_twelve_ids() {
        let p = ClassPalette::default();
        let raw = map(1, 19, NUM_RAW_CLASSES, &(0..19).collect::<Vec<u8>>());
        let merged = merge_classes(&raw, &p).unwrap();
        assert_eq!(merged.distinct().len(), NUM_REGIONS);
        let bg = SegmentationMap::filled(4, 4, NUM_RAW_CLASSES, 0).unwrap();
        assert_eq!(merge_classes(&bg, &p).unwrap().labels(), bg.labels());
    }

    #[test]
    fn merge_is_identity_on_canonical_ids() {
        let p = ClassPalette::default();
        for id in 0..NUM_REGIONS {
            assert_eq!(p.merge_table()[id] as usize, id);
        }
    }

    #[test]
    fn merge_rejects_out_of_range() {
        let p = ClassPalette::default();
        let raw = map(1, 1, 25, &[21]);
        let err = merge_classes(&raw, &p).unwrap_err();
        assert!(err.to_string().contains("21"));
    }

    #[test]
    fn palette_manifest_round_trip() {
        let p = ClassPalette::default();
        let text = p.to_manifest();
        assert!(text.starts_with("0 -> BACKGROUND\n"));
        assert_eq!(ClassPalette::from_manifest(&text).unwrap(), p);
        assert!(ClassPalette::from_manifest("0 -> A\n").is_err());
    }

    #[test]
    fn one_hot_small_example() {
        let m = map(2, 2, 3, &[0, 1, 2, 0]);
        let oh = one_hot(&m, 3).unwrap();
        assert_eq!(oh.data(), &[1, 0, 0, 1, 0, 1, 0, 0, 0, 0, 1, 0]);
        assert_eq!(oh.decode(), m);
        assert!(one_hot(&m, 2).is_err());
    }

    #[test]
    fn one_hot_uniform() {
        let m = SegmentationMap::filled(3, 3, 5, 4).unwrap();
        let oh = one_hot(&m, 5).unwrap();
        for c in 0..5 {
            let expect = u8::from(c == 4);
            assert!((0..9).all(|p| oh.data()[c * 9 + p] == expect));
        }
    }

    #[test]
    fn class_weights_toy_corpus() {
        let m = map(2, 2, 3, &[0, 0, 1, 2]);
        let w = compute_class_weights(&[m], 3).unwrap();
        for (got, want) in w.as_slice().iter().zip([0.6, 1.2, 1.2]) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn class_weights_uniform_and_absent() {
        let m = map(1, 4, 4, &[0, 1, 2, 3]);
        assert_eq!(compute_class_weights(&[m], 4).unwrap().0, vec![1.0; 4]);
        let m = map(1, 4, 3, &[0, 0, 1, 1]);
        assert_eq!(compute_class_weights(&[m], 3).unwrap().0[2], 10.0);
        assert!(compute_class_weights(&[], 3).is_err());
    }

    #[test]
    fn occlusion_rows() {
        let m = map(4, 4, 2, &[1; 16]);
        let oh = occlude_lower_half(&one_hot(&m, 2).unwrap());
        assert!(oh.is_valid(Some(2)));
        assert_eq!(oh.at(1, 1, 3), 1);
        assert_eq!(oh.at(1, 2, 0), 0);
        let m = map(2, 1, 2, &[0, 1]);
        let oh = occlude_lower_half(&one_hot(&m, 2).unwrap());
        assert_eq!(oh.data(), &[1, 0, 0, 0]);
    }

    #[test]
    fn downsample_blocks() {
        let m = map(4, 4, 4, &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
        assert_eq!(downsample(&m, 2, 2).unwrap().labels(), &[0, 1, 2, 3]);
        assert_eq!(downsample(&m, 4, 4).unwrap(), m);
        assert!(downsample(&m, 3, 3).is_err());
    }

    fn face_map() -> SegmentationMap {
        let mut m = SegmentationMap::filled(16, 16, NUM_REGIONS, Region::Background.id()).unwrap();
        for y in 2..14 {
            for x in 2..14 {
                m.set(y, x, Region::Skin.id());
            }
        }
        for (y, x) in [(5, 4), (5, 5), (6, 4), (5, 10), (5, 11), (6, 11)] {
            m.set(y, x, Region::Eye.id());
        }
        m
    }

    #[test]
    fn blink_removes_eyes() {
        let m = face_map();
        let spec = EditSpec::blink(Stencil { y0: 4, x0: 3, y1: 8, x1: 13 });
        let out = apply_edit(&m, &spec).unwrap();
        assert_eq!(out.count(Region::Eye.id()), 0);
        assert_eq!(out.count(Region::Skin.id()), m.count(Region::Skin.id()) + 6);
        assert_eq!(out.count(Region::Background.id()), m.count(Region::Background.id()));
    }

    #[test]
    fn blink_degenerate_cases() {
        let m = face_map();
        let empty = EditSpec::blink(Stencil { y0: 5, x0: 5, y1: 5, x1: 9 });
        assert_eq!(apply_edit(&m, &empty).unwrap(), m);
        let mut no_eyes = m.clone();
        for l in no_eyes.labels.iter_mut() {
            if *l == Region::Eye.id() {
                *l = Region::Skin.id();
            }
        }
        let spec = EditSpec::blink(Stencil { y0: 4, x0: 3, y1: 8, x1: 13 });
        assert_eq!(apply_edit(&no_eyes, &spec).unwrap(), no_eyes);
        let outside = EditSpec::blink(Stencil { y0: 0, x0: 0, y1: 8, x1: 8 });
        assert!(apply_edit(&m, &outside).is_err());
    }

    #[test]
    fn swaps_leave_map_alone() {
        let m = face_map();
        let spec = EditSpec {
            kind: EditKind::RegionTextureSwap,
            region_id: Region::Hair.id(),
            payload: EditPayload::Reference(0),
            frames: None,
        };
        assert_eq!(apply_edit(&m, &spec).unwrap(), m);
    }

    #[test]
    fn edit_records_parse() {
        let p = ClassPalette::default();
        let specs = parse_edit_file(
            "# edits\nblink EYE rect=4,3,8,13 frames=10-15\nregion_texture_swap HAIR ref=0\n",
            &p,
        )
        .unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[0].frames, Some((10, 15)));
        assert!(specs[0].applies_to(12) && !specs[0].applies_to(16));
        assert_eq!(EditSpec::parse_line(&specs[1].to_line(&p), &p).unwrap(), specs[1]);
        assert!(parse_edit_file("wink EYE rect=1,1,2,2", &p).is_err());
        assert!(parse_edit_file("blink TAIL rect=1,1,2,2", &p).is_err());
    }

    fn arb_map(classes: usize) -> impl Strategy<Value = SegmentationMap> {
        prop::collection::vec(0..classes as u8, 256)
            .prop_map(move |v| SegmentationMap::new(16, 16, classes, v).unwrap())
    }

    proptest! {
        #[test]
        fn one_hot_round_trip(m in arb_map(NUM_REGIONS)) {
            let oh = one_hot(&m, NUM_REGIONS).unwrap();
            prop_assert!(oh.is_valid(None));
            prop_assert_eq!(oh.decode(), m);
        }

        #[test]
        fn occlusion_is_idempotent(m in arb_map(NUM_REGIONS)) {
            let once = occlude_lower_half(&one_hot(&m, NUM_REGIONS).unwrap());
            prop_assert_eq!(occlude_lower_half(&once), once.clone());
            prop_assert!(once.is_valid(Some(8)));
        }

        #[test]
        fn downsample_matches_strided_sampling(m in arb_map(6)) {
            let d = downsample(&m, 8, 8).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    prop_assert_eq!(d.get(y, x), m.labels()[(2 * y) * 16 + 2 * x]);
                }
            }
            prop_assert!(d.distinct().is_subset(&m.distinct()));
        }
    }
}
