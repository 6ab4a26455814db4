//! File formats: PFM/PPM images, flat `key=value` configs, scene
//! directories and checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{CameraRig, SyntheticScene};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CHIT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys are an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got {line:?}",
                n + 1
            )));
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
        }
    }
    Ok(out)
}

pub fn format_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Consumes typed values from a parsed config; whatever is left afterwards
/// is reported as unknown.
pub struct KvReader {
    map: BTreeMap<String, String>,
}

impl KvReader {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        Self { map }
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    pub fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}"))),
        }
    }

    pub fn set<T: std::str::FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn set_list<T: std::str::FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()> {
        if let Some(v) = self.map.remove(key) {
            *slot = v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Config(format!("invalid item {s:?} in {key}")))
                })
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if self.map.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.map.keys().map(String::as_str).collect();
            Err(Error::Config(format!("unknown config keys: {}", keys.join(", "))))
        }
    }
}

/// Writes an `H×W` map as little-endian single-channel PFM (rows bottom-up).
pub fn write_pfm(path: &Path, map: &Tensor) -> Result<()> {
    if map.rank() != 2 {
        return Err(Error::Format(format!("PFM needs an H×W map, got {:?}", map.shape())));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut buf = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            buf.extend_from_slice(&(map.at(&[y, x]) as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Format("non-ASCII header".into()))
}

fn parse_dim(s: &str) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(Error::Format(format!("invalid dimension {s:?}"))),
    }
}

/// Reads a single-channel PFM into an `H×W` map.
pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0;
    if read_token(&bytes, &mut pos)? != "Pf" {
        return Err(Error::Format("only single-channel PFM (Pf) is supported".into()));
    }
    let w = parse_dim(read_token(&bytes, &mut pos)?)?;
    let h = parse_dim(read_token(&bytes, &mut pos)?)?;
    let scale: f64 = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Format("invalid PFM scale".into()))?;
    pos += 1;
    let body = &bytes[pos.min(bytes.len())..];
    if body.len() != 4 * w * h {
        return Err(Error::Format(format!(
            "PFM body has {} bytes, expected {}",
            body.len(),
            4 * w * h
        )));
    }
    let mut out = Tensor::zeros(&[h, w]);
    for (i, c) in body.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        out.set(&[h - 1 - i / w, i % w], v as f64);
    }
    Ok(out)
}

/// Writes a `3×H×W` image with values in `[0, 1]` as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Format(format!("PPM needs a 3×H×W image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((image.at(&[c, y, x]).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a binary 8-bit PPM into a `3×H×W` image in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0;
    if read_token(&bytes, &mut pos)? != "P6" {
        return Err(Error::Format("only binary PPM (P6) is supported".into()));
    }
    let w = parse_dim(read_token(&bytes, &mut pos)?)?;
    let h = parse_dim(read_token(&bytes, &mut pos)?)?;
    if read_token(&bytes, &mut pos)? != "255" {
        return Err(Error::Format("only 8-bit PPM is supported".into()));
    }
    pos += 1;
    let body = &bytes[pos.min(bytes.len())..];
    if body.len() != 3 * w * h {
        return Err(Error::Format("PPM body size mismatch".into()));
    }
    let mut out = Tensor::zeros(&[3, h, w]);
    for (i, px) in body.chunks_exact(3).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            out.set(&[c, i / w, i % w], v as f64 / 255.0);
        }
    }
    Ok(out)
}

/// A stereo pair with ground truth as stored in a scene directory.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredScene {
    pub rig: CameraRig,
    pub left: Tensor,
    pub right: Tensor,
    pub depth_left: Tensor,
    pub depth_right: Tensor,
}

fn rig_text(rig: &CameraRig) -> String {
    let k: Vec<String> = rig.intrinsics.iter().flatten().map(f64::to_string).collect();
    format_kv([("K", k.join(" ")), ("b", rig.baseline.to_string())])
}

fn parse_rig(text: &str) -> Result<CameraRig> {
    let mut r = KvReader::new(parse_kv(text)?);
    let k = r.take_str("K").ok_or_else(|| Error::Format("rig.txt lacks K".into()))?;
    let b: f64 = r.take("b")?.ok_or_else(|| Error::Format("rig.txt lacks b".into()))?;
    r.finish()?;
    let k = k
        .split_whitespace()
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| Error::Format(format!("invalid K entry {v:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if k.len() != 9 {
        return Err(Error::Format(format!("K needs 9 entries, got {}", k.len())));
    }
    if !(b > 0.0) {
        return Err(Error::Format(format!("baseline must be positive, got {b}")));
    }
    Ok(CameraRig {
        intrinsics: [[k[0], k[1], k[2]], [k[3], k[4], k[5]], [k[6], k[7], k[8]]],
        baseline: b,
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [-b, 0.0, 0.0],
    })
}

/// Writes `left.ppm`, `right.ppm`, `depth_left.pfm`, `depth_right.pfm` and
/// `rig.txt` (intrinsics row-major and baseline) into `dir`.
pub fn write_scene_dir(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_ppm(&dir.join("left.ppm"), &scene.left)?;
    write_ppm(&dir.join("right.ppm"), &scene.right)?;
    write_pfm(&dir.join("depth_left.pfm"), &scene.depth_left)?;
    write_pfm(&dir.join("depth_right.pfm"), &scene.depth_right)?;
    std::fs::write(dir.join("rig.txt"), rig_text(&scene.rig))?;
    Ok(())
}

pub fn read_scene_dir(dir: &Path) -> Result<StoredScene> {
    let scene = StoredScene {
        rig: parse_rig(&std::fs::read_to_string(dir.join("rig.txt"))?)?,
        left: read_ppm(&dir.join("left.ppm"))?,
        right: read_ppm(&dir.join("right.ppm"))?,
        depth_left: read_pfm(&dir.join("depth_left.pfm"))?,
        depth_right: read_pfm(&dir.join("depth_right.pfm"))?,
    };
    let s = scene.left.shape();
    let plane = [s[1], s[2]];
    if scene.right.shape() != s || scene.depth_left.shape() != plane || scene.depth_right.shape() != plane {
        return Err(Error::Format(format!(
            "{}: image and depth sizes disagree",
            dir.display()
        )));
    }
    Ok(scene)
}

/// `dir` itself if it holds a scene, otherwise its scene subdirectories in
/// name order.
pub fn scene_dirs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if dir.join("left.ppm").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.join("left.ppm").is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Named tensors plus a `key=value` config block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_len(&mut out, self.config.len())?;
        out.extend_from_slice(self.config.as_bytes());
        put_len(&mut out, self.records.len())?;
        for (name, t) in &self.records {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, t.rank())?;
            for &d in t.shape() {
                put_len(&mut out, d)?;
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = get_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config =
            String::from_utf8(get_bytes(&mut r)?).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let count = get_u32(&mut r)? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name =
                String::from_utf8(get_bytes(&mut r)?).map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let rank = get_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| get_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if r.len() < 4 * n {
                return Err(truncated(()));
            }
            let data = r[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            r = &r[4 * n..];
            records.push((
                name,
                Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?,
            ));
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn truncated<T>(_: T) -> Error {
    Error::Format("truncated checkpoint".into())
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes(r: &mut &[u8]) -> Result<Vec<u8>> {
    let n = get_u32(r)? as usize;
    if r.len() < n {
        return Err(truncated(()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head.to_vec())
}
