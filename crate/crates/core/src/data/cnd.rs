//! CND container: a small little-endian binary format for synthetic sets
//! and model parameters.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CND1"
//! 4       4     version (u32, currently 1)
//! 8       4     K (classes)
//! 12      4     ipc
//! 16      4     C
//! 20      4     H
//! 24      4     W
//! 28      4     section count S
//! 32      16*S  section table: tag u32, reserved u32 (0), byte length u64
//! ...           payloads, back to back in table order
//! ```
//!
//! Section tags: 1 images (`f64`, class-major `[K·ipc, C, H, W]`),
//! 2 labels (`u32`), 3 normalization stats (`C` means then `C` stds, `f64`),
//! 4 model parameters (see [`encode_params`]).

use std::fs;
use std::path::Path;

use crate::bilevel::SyntheticSet;
use crate::data::dataset::NormStats;
use crate::error::{Error, Result};
use crate::models::{Architecture, ConvNetSpec, LinearSpec, MlpSpec, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CND1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 32;
const ENTRY_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
enum Tag {
    Images = 1,
    Labels = 2,
    NormStats = 3,
    Params = 4,
}

impl Tag {
    fn from_u32(v: u32) -> Option<Tag> {
        match v {
            1 => Some(Tag::Images),
            2 => Some(Tag::Labels),
            3 => Some(Tag::NormStats),
            4 => Some(Tag::Params),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CndContainer {
    pub num_classes: u32,
    pub ipc: u32,
    pub image_shape: [u32; 3],
    pub images: Option<Vec<f64>>,
    pub labels: Option<Vec<u32>>,
    pub norm_stats: Option<NormStats>,
    pub params: Option<ModelParams>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], pos: usize) -> Self {
        Reader { bytes, pos }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(
                self.pos as u64,
                format!("truncated input: need {n} bytes for {what}, {} remain", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| Error::parse(self.pos as u64, "length overflow"))?, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn arch_code(arch: &Architecture, out: &mut Vec<u8>) {
    match arch {
        Architecture::ConvNet(s) => {
            put_u32(out, 1);
            for v in [s.blocks, s.channels, s.input_shape[0], s.input_shape[1], s.input_shape[2], s.num_classes] {
                put_u32(out, v as u32);
            }
        }
        Architecture::Mlp(s) => {
            put_u32(out, 2);
            for v in [s.input_shape[0], s.input_shape[1], s.input_shape[2], s.num_classes, s.hidden.len()] {
                put_u32(out, v as u32);
            }
            for &h in &s.hidden {
                put_u32(out, h as u32);
            }
        }
        Architecture::Linear(s) => {
            put_u32(out, 3);
            for v in [s.input_shape[0], s.input_shape[1], s.input_shape[2], s.num_classes] {
                put_u32(out, v as u32);
            }
        }
    }
}

/// Params payload: architecture tag and fields (u32), tensor count, then per
/// tensor `ndim`, dims (u32) and values (f64).
pub fn encode_params(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    arch_code(&params.arch, &mut out);
    put_u32(&mut out, params.tensors.len() as u32);
    for t in &params.tensors {
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        put_f64s(&mut out, t.data());
    }
    out
}

fn decode_params(r: &mut Reader) -> Result<ModelParams> {
    let at = r.pos as u64;
    let arch = match r.u32("architecture tag")? {
        1 => {
            let mut v = [0usize; 6];
            for x in &mut v {
                *x = r.u32("convnet field")? as usize;
            }
            Architecture::ConvNet(ConvNetSpec {
                blocks: v[0],
                channels: v[1],
                input_shape: [v[2], v[3], v[4]],
                num_classes: v[5],
            })
        }
        2 => {
            let mut v = [0usize; 5];
            for x in &mut v {
                *x = r.u32("mlp field")? as usize;
            }
            let hidden = (0..v[4]).map(|_| r.u32("mlp width").map(|h| h as usize)).collect::<Result<_>>()?;
            Architecture::Mlp(MlpSpec {
                input_shape: [v[0], v[1], v[2]],
                hidden,
                num_classes: v[3],
            })
        }
        3 => {
            let mut v = [0usize; 4];
            for x in &mut v {
                *x = r.u32("linear field")? as usize;
            }
            Architecture::Linear(LinearSpec {
                input_shape: [v[0], v[1], v[2]],
                num_classes: v[3],
            })
        }
        other => return Err(Error::parse(at, format!("unknown architecture tag {other}"))),
    };
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let ndim = r.u32("tensor rank")? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| r.u32("tensor dim").map(|d| d as usize)).collect::<Result<_>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::parse(r.pos as u64, "tensor size overflow"))?;
        let data = r.f64s(n, "tensor values")?;
        tensors.push(Tensor::from_vec(shape, data)?);
    }
    ModelParams::new(arch, tensors).map_err(|e| Error::parse(at, format!("inconsistent parameters: {e}")))
}

impl CndContainer {
    pub fn encode(&self) -> Vec<u8> {
        let mut sections: Vec<(Tag, Vec<u8>)> = Vec::new();
        if let Some(images) = &self.images {
            let mut b = Vec::with_capacity(images.len() * 8);
            put_f64s(&mut b, images);
            sections.push((Tag::Images, b));
        }
        if let Some(labels) = &self.labels {
            let mut b = Vec::with_capacity(labels.len() * 4);
            labels.iter().for_each(|&l| put_u32(&mut b, l));
            sections.push((Tag::Labels, b));
        }
        if let Some(stats) = &self.norm_stats {
            let mut b = Vec::new();
            put_f64s(&mut b, &stats.mean);
            put_f64s(&mut b, &stats.std);
            sections.push((Tag::NormStats, b));
        }
        if let Some(params) = &self.params {
            sections.push((Tag::Params, encode_params(params)));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.num_classes,
            self.ipc,
            self.image_shape[0],
            self.image_shape[1],
            self.image_shape[2],
            sections.len() as u32,
        ] {
            put_u32(&mut out, v);
        }
        for (tag, body) in &sections {
            put_u32(&mut out, *tag as u32);
            put_u32(&mut out, 0);
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        }
        for (_, body) in &sections {
            out.extend_from_slice(body);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, 0);
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::parse(0, format!("bad magic {magic:?}, expected \"CND1\"")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::parse(
                4,
                format!("unsupported CND version {version}; this build reads version {VERSION}"),
            ));
        }
        let num_classes = r.u32("K")?;
        let ipc = r.u32("ipc")?;
        let image_shape = [r.u32("C")?, r.u32("H")?, r.u32("W")?];
        let count = r.u32("section count")? as usize;

        let mut table = Vec::with_capacity(count.min(16));
        for i in 0..count {
            let entry_at = (HEADER_LEN + i * ENTRY_LEN) as u64;
            let raw = r.u32("section tag")?;
            let tag = Tag::from_u32(raw).ok_or_else(|| Error::parse(entry_at, format!("unknown section tag {raw}")))?;
            if table.iter().any(|&(t, _, _)| t == tag) {
                return Err(Error::parse(entry_at, format!("duplicate section {tag:?}")));
            }
            if r.u32("reserved")? != 0 {
                return Err(Error::parse(entry_at + 4, "reserved field must be zero"));
            }
            let len = r.u64("section length")?;
            table.push((tag, len, entry_at));
        }

        let mut c = CndContainer {
            num_classes,
            ipc,
            image_shape,
            images: None,
            labels: None,
            norm_stats: None,
            params: None,
        };
        let n_images = num_classes as usize * ipc as usize;
        let pixels = n_images * image_shape.iter().map(|&d| d as usize).product::<usize>();
        for (tag, len, entry_at) in table {
            let start = r.pos;
            let body = r.take(
                usize::try_from(len).map_err(|_| Error::parse(entry_at + 8, "section length overflow"))?,
                &format!("{tag:?} section"),
            )?;
            let mut sr = Reader::new(bytes, start);
            let declared_mismatch = |expected: usize| {
                Error::parse(
                    entry_at + 8,
                    format!("{tag:?} section declares {len} bytes but the header implies {expected}"),
                )
            };
            match tag {
                Tag::Images => {
                    if body.len() != pixels * 8 {
                        return Err(declared_mismatch(pixels * 8));
                    }
                    c.images = Some(sr.f64s(pixels, "images")?);
                }
                Tag::Labels => {
                    if body.len() != n_images * 4 {
                        return Err(declared_mismatch(n_images * 4));
                    }
                    let labels = (0..n_images).map(|_| sr.u32("label")).collect::<Result<Vec<_>>>()?;
                    if let Some(i) = labels.iter().position(|&l| l >= num_classes) {
                        return Err(Error::parse((start + 4 * i) as u64, format!("label {} out of range", labels[i])));
                    }
                    c.labels = Some(labels);
                }
                Tag::NormStats => {
                    let ch = image_shape[0] as usize;
                    if body.len() != ch * 16 {
                        return Err(declared_mismatch(ch * 16));
                    }
                    let mean = sr.f64s(ch, "means")?;
                    let std = sr.f64s(ch, "stds")?;
                    c.norm_stats = Some(NormStats { mean, std });
                }
                Tag::Params => {
                    let mut pr = Reader::new(&bytes[..start + body.len()], start);
                    let params = decode_params(&mut pr)?;
                    if pr.pos != start + body.len() {
                        return Err(Error::parse(pr.pos as u64, "params section has trailing bytes"));
                    }
                    c.params = Some(params);
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::parse(r.pos as u64, format!("{} trailing bytes after the last section", bytes.len() - r.pos)));
        }
        Ok(c)
    }

    pub fn from_synthetic(set: &SyntheticSet, norm_stats: Option<&NormStats>) -> Self {
        let [c, h, w] = set.image_shape();
        CndContainer {
            num_classes: set.num_classes as u32,
            ipc: set.ipc as u32,
            image_shape: [c as u32, h as u32, w as u32],
            images: Some(set.images.data().to_vec()),
            labels: Some(set.labels().iter().map(|&l| l as u32).collect()),
            norm_stats: norm_stats.cloned(),
            params: None,
        }
    }

    pub fn to_synthetic(&self) -> Result<SyntheticSet> {
        let (Some(images), Some(labels)) = (&self.images, &self.labels) else {
            return Err(Error::input("container has no images/labels sections"));
        };
        let k = self.num_classes as usize;
        let ipc = self.ipc as usize;
        let [c, h, w] = self.image_shape.map(|d| d as usize);
        let set = SyntheticSet::new(Tensor::from_vec(vec![k * ipc, c, h, w], images.clone())?, k, ipc)?;
        if labels.iter().zip(set.labels()).any(|(&a, &b)| a as usize != b) {
            return Err(Error::input("container labels are not class-major"));
        }
        Ok(set)
    }
}

pub fn save_synthetic(set: &SyntheticSet, norm_stats: Option<&NormStats>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, CndContainer::from_synthetic(set, norm_stats).encode())?;
    Ok(())
}

/// Reads a synthetic set and, if present, the normalization statistics stored with it.
pub fn load_synthetic(path: impl AsRef<Path>) -> Result<(SyntheticSet, Option<NormStats>)> {
    let c = CndContainer::decode(&fs::read(path)?)?;
    let set = c.to_synthetic()?;
    Ok((set, c.norm_stats))
}

/// Parameter checkpoint: header carries K and the input shape, ipc = 0.
pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let [c, h, w] = params.arch.input_shape().map(|d| d as u32);
    let container = CndContainer {
        num_classes: params.arch.num_classes() as u32,
        ipc: 0,
        image_shape: [c, h, w],
        images: None,
        labels: None,
        norm_stats: None,
        params: Some(params.clone()),
    };
    fs::write(path, container.encode())?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    CndContainer::decode(&fs::read(path)?)?
        .params
        .ok_or_else(|| Error::input("container has no params section"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set() -> SyntheticSet {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        SyntheticSet::from_noise(10, 1, [1, 8, 8], &mut rng).unwrap()
    }

    #[test]
    fn synthetic_round_trip_is_bitwise() {
        let s = set();
        let stats = NormStats {
            mean: vec![0.1307],
            std: vec![0.3081],
        };
        let bytes = CndContainer::from_synthetic(&s, Some(&stats)).encode();
        let back = CndContainer::decode(&bytes).unwrap();
        let s2 = back.to_synthetic().unwrap();
        assert_eq!(s.images.checksum(), s2.images.checksum());
        assert_eq!(back.norm_stats.as_ref().unwrap(), &stats);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn params_round_trip() {
        let arch = Architecture::Mlp(MlpSpec {
            input_shape: [1, 2, 2],
            hidden: vec![3, 5],
            num_classes: 2,
        });
        let p = init_params(&arch, 1).unwrap();
        let c = CndContainer {
            num_classes: 2,
            ipc: 0,
            image_shape: [1, 2, 2],
            images: None,
            labels: None,
            norm_stats: None,
            params: Some(p.clone()),
        };
        assert_eq!(CndContainer::decode(&c.encode()).unwrap().params.unwrap(), p);
    }

    #[test]
    fn corrupted_magic_names_offset_zero() {
        let mut bytes = CndContainer::from_synthetic(&set(), None).encode();
        bytes[0] = b'X';
        let err = CndContainer::decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }), "{err}");
    }

    #[test]
    fn version_bump_rejected() {
        let mut bytes = CndContainer::from_synthetic(&set(), None).encode();
        bytes[4] = 2;
        let err = CndContainer::decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported CND version 2"), "{err}");
    }

    #[test]
    fn truncation_and_length_mismatch() {
        let bytes = CndContainer::from_synthetic(&set(), None).encode();
        let err = CndContainer::decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));

        // images section length declared one f64 short
        let mut bad = bytes.clone();
        let len_at = HEADER_LEN + 8;
        let len = u64::from_le_bytes(bad[len_at..len_at + 8].try_into().unwrap()) - 8;
        bad[len_at..len_at + 8].copy_from_slice(&len.to_le_bytes());
        match CndContainer::decode(&bad) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, len_at as u64),
            other => panic!("unexpected {other:?}"),
        }

        let mut extra = bytes;
        extra.push(0);
        assert!(CndContainer::decode(&extra).is_err());
    }
}
