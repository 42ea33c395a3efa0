//! Binary checkpoint format.
//!
//! Layout, little endian:
//!
//! ```text
//! "ALOD" | u32 version | u64 payload length | payload | u32 crc32(payload)
//! ```
//!
//! The payload is the config block followed by the mesh, the feature field
//! levels, the mapper and the five decoder heads, in that order. Every
//! parameter is stored as f64 so a save/load round trip is exact.

use std::fs;
use std::path::Path;

use nalgebra::Vector2;
use ndarray::{Array1, Array2};

use crate::decoder::DecoderHeads;
use crate::error::{Error, Result};
use crate::geometry::{Mesh, Vec3};
use crate::model::{AvatarModel, ModelConfig};
use crate::nn::{Activation, DenseLayer, Mlp};
use crate::uv_field::{FeatureField, FeatureMap};

pub const MAGIC: &[u8; 4] = b"ALOD";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn corrupt(what: impl Into<String>) -> Error {
    Error::Corrupt(what.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("payload ends early at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    /// A count, bounded by what the remaining bytes could hold.
    fn len(&mut self, elem_bytes: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.bytes.len() - self.pos) as u64;
        if n.saturating_mul(elem_bytes.max(1) as u64) > left {
            return Err(corrupt(format!("count {n} exceeds the remaining payload")));
        }
        Ok(n as usize)
    }
    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn write_config(w: &mut Writer, c: &ModelConfig) {
    for v in [
        c.s_max,
        c.s_min,
        c.levels,
        c.d_f,
        c.n_freq,
        c.code_dim,
        c.expr_dim,
        c.mapper_hidden,
        c.head_hidden,
        c.head_layers,
        c.sh_degree,
    ] {
        w.len(v);
    }
    w.f64(c.tau);
    w.f64(c.offset_fraction);
}

fn read_config(r: &mut Reader) -> Result<ModelConfig> {
    let mut u = [0usize; 11];
    for v in &mut u {
        *v = r.u64()? as usize;
    }
    let c = ModelConfig {
        s_max: u[0],
        s_min: u[1],
        levels: u[2],
        d_f: u[3],
        n_freq: u[4],
        code_dim: u[5],
        expr_dim: u[6],
        mapper_hidden: u[7],
        head_hidden: u[8],
        head_layers: u[9],
        sh_degree: u[10],
        tau: r.f64()?,
        offset_fraction: r.f64()?,
    };
    c.validate().map_err(|e| corrupt(format!("config block: {e}")))?;
    Ok(c)
}

fn write_vec3s(w: &mut Writer, vs: &[Vec3]) {
    w.len(vs.len());
    for v in vs {
        w.f64s(v.iter());
    }
}

fn read_vec3s(r: &mut Reader) -> Result<Vec<Vec3>> {
    let n = r.len(24)?;
    (0..n).map(|_| Ok(Vec3::new(r.f64()?, r.f64()?, r.f64()?))).collect()
}

fn write_mesh(w: &mut Writer, m: &Mesh) {
    write_vec3s(w, m.vertices());
    w.len(m.faces().len());
    for f in m.faces() {
        for i in f {
            w.u32(*i);
        }
    }
    for uv in m.uvs() {
        w.f64(uv.x);
        w.f64(uv.y);
    }
    w.len(m.blendshapes().len());
    for s in m.blendshapes() {
        write_vec3s(w, s);
    }
}

fn read_mesh(r: &mut Reader) -> Result<Mesh> {
    let vertices = read_vec3s(r)?;
    let nf = r.len(12)?;
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        faces.push([r.u32()?, r.u32()?, r.u32()?]);
    }
    let mut uvs = Vec::with_capacity(vertices.len());
    for _ in 0..vertices.len() {
        uvs.push(Vector2::new(r.f64()?, r.f64()?));
    }
    let nb = r.len(8)?;
    let blendshapes = (0..nb).map(|_| read_vec3s(r)).collect::<Result<Vec<_>>>()?;
    Mesh::new(vertices, faces, uvs, blendshapes).map_err(|e| corrupt(format!("mesh block: {e}")))
}

fn write_field(w: &mut Writer, f: &FeatureField) {
    w.len(f.levels().len());
    for m in f.levels() {
        w.len(m.resolution());
        w.len(m.channels());
        w.f64s(m.as_slice());
    }
}

fn read_field(r: &mut Reader, tau: f64) -> Result<FeatureField> {
    let n = r.len(16)?;
    let mut levels = Vec::with_capacity(n);
    for _ in 0..n {
        let s = r.len(0)?;
        let d = r.len(0)?;
        let count = s.checked_mul(s).and_then(|v| v.checked_mul(d)).ok_or_else(|| corrupt("level size overflows"))?;
        if count.saturating_mul(8) > r.bytes.len() - r.pos {
            return Err(corrupt(format!("level {s}x{s}x{d} exceeds the remaining payload")));
        }
        let data = Array2::from_shape_vec((s * s, d), r.f64_vec(count)?).expect("sized above");
        let data = data.into_shape_with_order((s, s, d)).expect("sized above");
        levels.push(FeatureMap::from_array(data).map_err(|e| corrupt(e.to_string()))?);
    }
    FeatureField::new(levels, tau).map_err(|e| corrupt(format!("field block: {e}")))
}

fn write_mlp(w: &mut Writer, net: &Mlp) {
    w.len(net.layers().len());
    for l in net.layers() {
        w.u8(l.activation.tag());
        w.len(l.inputs());
        w.len(l.outputs());
        w.f64s(l.weights.iter());
        w.f64s(l.bias.iter());
    }
}

fn read_mlp(r: &mut Reader) -> Result<Mlp> {
    let n = r.len(17)?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let tag = r.u8()?;
        let activation = Activation::from_tag(tag).ok_or_else(|| corrupt(format!("unknown activation tag {tag}")))?;
        let inputs = r.len(0)?;
        let outputs = r.len(0)?;
        let count = inputs.checked_mul(outputs).ok_or_else(|| corrupt("layer size overflows"))?;
        if count.saturating_add(outputs).saturating_mul(8) > r.bytes.len() - r.pos {
            return Err(corrupt(format!("layer {inputs}x{outputs} exceeds the remaining payload")));
        }
        let weights = Array2::from_shape_vec((outputs, inputs), r.f64_vec(count)?).expect("sized above");
        let bias = Array1::from_vec(r.f64_vec(outputs)?);
        layers.push(DenseLayer {
            weights,
            bias,
            activation,
        });
    }
    Mlp::new(layers).map_err(|e| corrupt(format!("network block: {e}")))
}

pub fn to_bytes(model: &AvatarModel) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    write_config(&mut w, &model.config);
    write_mesh(&mut w, model.mesh());
    write_field(&mut w, &model.field);
    write_mlp(&mut w, &model.mapper);
    for head in model.heads.as_array() {
        write_mlp(&mut w, head);
    }
    let payload = w.0;
    let mut out = Vec::with_capacity(payload.len() + HEADER_LEN + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<AvatarModel> {
    if bytes.len() < 8 {
        return Err(Error::Truncated(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic(format!("expected {:?}, found {:?}", MAGIC, &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::BadMagic(format!("unsupported version {version} (this build reads {VERSION})")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let want = (HEADER_LEN as u64).saturating_add(len).saturating_add(4);
    if (bytes.len() as u64) < want {
        return Err(Error::Truncated(format!("file has {} bytes, header promises {want}", bytes.len())));
    }
    if (bytes.len() as u64) > want {
        return Err(corrupt(format!("{} trailing bytes after the checksum", bytes.len() as u64 - want)));
    }
    let end = HEADER_LEN + len as usize;
    let payload = &bytes[HEADER_LEN..end];
    let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(corrupt(format!("checksum {actual:08x} does not match stored {stored:08x}")));
    }

    let mut r = Reader { bytes: payload, pos: 0 };
    let config = read_config(&mut r)?;
    let mesh = read_mesh(&mut r)?;
    let field = read_field(&mut r, config.tau)?;
    let mapper = read_mlp(&mut r)?;
    let mut heads = Vec::with_capacity(5);
    for _ in 0..5 {
        heads.push(read_mlp(&mut r)?);
    }
    if r.pos != payload.len() {
        return Err(corrupt(format!("{} unread payload bytes", payload.len() - r.pos)));
    }
    let heads = DecoderHeads::from_array(heads.try_into().expect("five heads"))
        .map_err(|e| corrupt(format!("decoder block: {e}")))?;
    AvatarModel::from_parts(config, field, mapper, heads, mesh).map_err(|e| corrupt(e.to_string()))
}

pub fn save_checkpoint(model: &AvatarModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<AvatarModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
