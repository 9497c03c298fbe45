//! Binary checkpoint container and codecs for networks and posteriors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "LALR" | u16 version=1 | u32 tensor_count | tensors... | u32 crc
//! tensor: u16 name_len | name (UTF-8) | u8 dtype (0 = f64) | u8 ndim
//!         | ndim x u64 dims | row-major f64 payload
//! ```
//!
//! The CRC-32 (IEEE, reflected) covers everything after the magic. Writing
//! the same tensors yields the same bytes, which is what makes rerun
//! determinism checkable at the file level.

use std::path::Path;

use crate::curvature::{
    AdapterCurvature, AdapterDims, BatchDescriptor, CurvatureKind, DiagPrecision, KfacFactors,
    Provenance,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Activation, Layer, Linear, LoraAdapter, Network};
use crate::posterior::{AdapterPosterior, LaplacePosterior};

pub const MAGIC: [u8; 4] = *b"LALR";
pub const VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;
/// Refuses absurd element counts before allocating.
const MAX_ELEMS: u64 = 1 << 28;

/// CRC-32 (IEEE 802.3): reflected polynomial 0xEDB88320, initial value and
/// final xor 0xFFFFFFFF. crc32(b"123456789") == 0xCBF43926.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let lsb = crc & 1;
            crc >>= 1;
            if lsb != 0 {
                crc ^= 0xEDB8_8320;
            }
        }
    }
    !crc
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    /// Row-major elements; `data.len()` equals the product of `dims`.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(name: &str, v: f64) -> Tensor {
        Tensor { name: name.to_string(), dims: vec![1], data: vec![v] }
    }

    pub fn vector(name: &str, v: Vec<f64>) -> Tensor {
        Tensor { name: name.to_string(), dims: vec![v.len() as u64], data: v }
    }

    pub fn matrix(name: &str, m: &Matrix) -> Tensor {
        Tensor {
            name: name.to_string(),
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn as_matrix(&self) -> Result<Matrix> {
        if self.dims.len() != 2
            || (self.dims[0] * self.dims[1]) as usize != self.data.len()
        {
            return Err(Error::contract(format!(
                "tensor '{}' is not a matrix (dims {:?}, {} elements)",
                self.name,
                self.dims,
                self.data.len()
            )));
        }
        Ok(Matrix::from_row_major(
            self.dims[0] as usize,
            self.dims[1] as usize,
            self.data.clone(),
        ))
    }

    pub fn as_scalar(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "tensor '{}' is not a scalar",
                self.name
            )));
        }
        Ok(self.data[0])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::contract(format!("checkpoint is missing tensor '{name}'")))
    }

    pub fn maybe(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        body.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::size("too many tensors"))?;
        body.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::size(format!("tensor name '{}' too long", t.name)))?;
            body.extend_from_slice(&name_len.to_le_bytes());
            body.extend_from_slice(name);
            body.push(DTYPE_F64);
            let ndim = u8::try_from(t.dims.len())
                .map_err(|_| Error::size("too many dimensions"))?;
            body.push(ndim);
            let mut elems = 1u64;
            for &d in &t.dims {
                body.extend_from_slice(&d.to_le_bytes());
                elems = elems
                    .checked_mul(d)
                    .filter(|&e| e <= MAX_ELEMS)
                    .ok_or_else(|| Error::size("tensor too large"))?;
            }
            if elems as usize != t.data.len() {
                return Err(Error::contract(format!(
                    "tensor '{}' dims {:?} do not cover {} elements",
                    t.name,
                    t.dims,
                    t.data.len()
                )));
            }
            for &v in &t.data {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(4 + body.len() + 4);
        out.extend_from_slice(&MAGIC);
        let crc = crc32(&body);
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 4 + 2 + 4 + 4 {
            return Err(Error::contract("checkpoint is truncated"));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::contract("bad magic; not a checkpoint file"));
        }
        let body = &bytes[4..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let actual = crc32(body);
        if stored_crc != actual {
            return Err(Error::contract(format!(
                "checksum mismatch: stored {stored_crc:#010x}, computed {actual:#010x}"
            )));
        }
        let mut cur = Cursor { buf: body, pos: 0 };
        let version = cur.u16()?;
        if version != VERSION {
            return Err(Error::contract(format!("unsupported version {version}")));
        }
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::contract("tensor name is not UTF-8"))?;
            let dtype = cur.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::contract(format!("unknown dtype {dtype}")));
            }
            let ndim = cur.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            let mut elems = 1u64;
            for _ in 0..ndim {
                let d = cur.u64()?;
                elems = elems
                    .checked_mul(d)
                    .filter(|&e| e <= MAX_ELEMS)
                    .ok_or_else(|| Error::size("tensor too large"))?;
                dims.push(d);
            }
            let mut data = Vec::with_capacity(elems as usize);
            for _ in 0..elems {
                data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
            }
            tensors.push(Tensor { name, dims, data });
        }
        if cur.pos != body.len() {
            return Err(Error::contract("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint { tensors })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::contract("checkpoint is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes bytes to a temp file in the target directory, then renames it
/// into place, so readers never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("bad path {}", path.display())))?;
    let tmp = match dir {
        Some(d) => d.join(format!(".{}.tmp", file_name.to_string_lossy())),
        None => Path::new(&format!(".{}.tmp", file_name.to_string_lossy())).to_path_buf(),
    };
    let io_err = |e: std::io::Error, what: &str| {
        Error::io(format!("{what} {}: {e}", path.display()), e)
    };
    std::fs::write(&tmp, bytes).map_err(|e| io_err(e, "writing"))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(e, "renaming into"))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}: {e}", path.display()), e))
}

fn kind_code(kind: CurvatureKind) -> f64 {
    match kind {
        CurvatureKind::Diag => 0.0,
        CurvatureKind::BlockKfac => 1.0,
        CurvatureKind::BlockTriKfac => 2.0,
        CurvatureKind::Identity => 3.0,
    }
}

fn kind_from_code(code: f64) -> Result<CurvatureKind> {
    match code as i64 {
        0 => Ok(CurvatureKind::Diag),
        1 => Ok(CurvatureKind::BlockKfac),
        2 => Ok(CurvatureKind::BlockTriKfac),
        3 => Ok(CurvatureKind::Identity),
        other => Err(Error::contract(format!("unknown curvature code {other}"))),
    }
}

/// Serializes hidden-dims, classes, base weights and any adapters. The
/// optional `config_sha256` records which configuration produced the file.
pub fn network_tensors(network: &Network, config_sha256: Option<&[u8; 32]>) -> Vec<Tensor> {
    let mut out = Vec::new();
    let mut dims: Vec<f64> = vec![network.input_dim as f64];
    for layer in &network.layers {
        dims.push(layer.linear.weight.rows() as f64);
    }
    out.push(Tensor::vector("meta.dims", dims));
    out.push(Tensor::scalar("meta.num_classes", network.num_classes as f64));
    out.push(Tensor::scalar(
        "meta.base_frozen",
        if network.base_frozen { 1.0 } else { 0.0 },
    ));
    if let Some(h) = config_sha256 {
        out.push(Tensor::vector(
            "meta.config_sha256",
            h.iter().map(|&b| b as f64).collect(),
        ));
    }
    let adapter_layers = network.adapter_layers();
    out.push(Tensor::vector(
        "meta.adapter_layers",
        adapter_layers.iter().map(|&l| l as f64).collect(),
    ));
    for (i, layer) in network.layers.iter().enumerate() {
        out.push(Tensor::matrix(&format!("layer{i}.weight"), &layer.linear.weight));
        out.push(Tensor::vector(&format!("layer{i}.bias"), layer.linear.bias.clone()));
    }
    for (j, &li) in adapter_layers.iter().enumerate() {
        let ad = network.layers[li].adapter.as_ref().expect("adapted layer");
        out.push(Tensor::matrix(&format!("adapter{j}.a"), &ad.a));
        out.push(Tensor::matrix(&format!("adapter{j}.b"), &ad.b));
        out.push(Tensor::vector(
            &format!("adapter{j}.hyper"),
            vec![ad.alpha, ad.dropout_p],
        ));
    }
    out
}

/// Rebuilds a network from [`network_tensors`] output. Hidden layers are
/// ReLU, the final layer is linear, matching how networks are built.
pub fn network_from_checkpoint(ck: &Checkpoint) -> Result<Network> {
    let dims = &ck.get("meta.dims")?.data;
    if dims.len() < 2 {
        return Err(Error::contract("meta.dims needs at least two entries"));
    }
    let num_classes = ck.get("meta.num_classes")?.as_scalar()? as usize;
    let base_frozen = ck.get("meta.base_frozen")?.as_scalar()? != 0.0;
    let n_layers = dims.len() - 1;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let weight = ck.get(&format!("layer{i}.weight"))?.as_matrix()?;
        let bias = ck.get(&format!("layer{i}.bias"))?.data.clone();
        if weight.rows() != dims[i + 1] as usize
            || weight.cols() != dims[i] as usize
            || bias.len() != weight.rows()
        {
            return Err(Error::contract(format!("layer {i} shape disagrees with meta.dims")));
        }
        layers.push(Layer {
            linear: Linear { weight, bias },
            adapter: None,
            activation: if i + 1 == n_layers { Activation::Identity } else { Activation::Relu },
        });
    }
    let adapter_layers: Vec<usize> = ck
        .get("meta.adapter_layers")?
        .data
        .iter()
        .map(|&v| v as usize)
        .collect();
    for (j, &li) in adapter_layers.iter().enumerate() {
        if li >= layers.len() {
            return Err(Error::contract(format!("adapter {j} points at layer {li}")));
        }
        let a = ck.get(&format!("adapter{j}.a"))?.as_matrix()?;
        let b = ck.get(&format!("adapter{j}.b"))?.as_matrix()?;
        let hyper = &ck.get(&format!("adapter{j}.hyper"))?.data;
        if hyper.len() != 2 {
            return Err(Error::contract(format!("adapter {j} hyper block malformed")));
        }
        layers[li].adapter = Some(LoraAdapter {
            a,
            b,
            alpha: hyper[0],
            dropout_p: hyper[1],
        });
    }
    let input_dim = dims[0] as usize;
    Ok(Network { layers, input_dim, num_classes, base_frozen })
}

/// Serializes a posterior alongside its provenance.
pub fn posterior_tensors(post: &LaplacePosterior, prov: Option<&Provenance>) -> Vec<Tensor> {
    let mut out = Vec::new();
    out.push(Tensor::scalar("posterior.kind", kind_code(post.kind)));
    for (j, ap) in post.adapters.iter().enumerate() {
        out.push(Tensor::scalar(
            &format!("posterior{j}.layer_index"),
            ap.layer_index as f64,
        ));
        out.push(Tensor::matrix(&format!("posterior{j}.mu_a"), &ap.mu_a));
        out.push(Tensor::matrix(&format!("posterior{j}.mu_b"), &ap.mu_b));
        match &ap.curvature {
            AdapterCurvature::Diag(d) => {
                out.push(Tensor::vector(&format!("posterior{j}.diag_a"), d.d_a.clone()));
                out.push(Tensor::vector(&format!("posterior{j}.diag_b"), d.d_b.clone()));
            }
            AdapterCurvature::Kfac(f) => {
                out.push(Tensor::matrix(&format!("posterior{j}.l00"), &f.l00));
                out.push(Tensor::matrix(&format!("posterior{j}.r11"), &f.r11));
                out.push(Tensor::matrix(&format!("posterior{j}.l11"), &f.l11));
                out.push(Tensor::matrix(&format!("posterior{j}.r22"), &f.r22));
                if let (Some(l01), Some(r12)) = (&f.l01, &f.r12) {
                    out.push(Tensor::matrix(&format!("posterior{j}.l01"), l01));
                    out.push(Tensor::matrix(&format!("posterior{j}.r12"), r12));
                }
            }
            AdapterCurvature::Identity(_) => {}
        }
    }
    if let Some(p) = prov {
        out.push(Tensor::vector(
            "provenance.shape",
            vec![
                p.subdataset_count as f64,
                p.batches_per_subdataset as f64,
                p.batch_size as f64,
            ],
        ));
        // Seeds split into 32-bit halves so u64 values survive the f64
        // payload exactly.
        let mut rows = Vec::with_capacity(p.descriptors.len() * 4);
        for d in &p.descriptors {
            rows.push(d.subdataset as f64);
            rows.push((d.shuffle_seed >> 32) as f64);
            rows.push((d.shuffle_seed & 0xFFFF_FFFF) as f64);
            rows.push(d.batch_index as f64);
        }
        out.push(Tensor {
            name: "provenance.batches".to_string(),
            dims: vec![p.descriptors.len() as u64, 4],
            data: rows,
        });
    }
    out
}

/// Rebuilds the posterior stored next to a network checkpoint.
pub fn posterior_from_checkpoint(ck: &Checkpoint) -> Result<LaplacePosterior> {
    let kind = kind_from_code(ck.get("posterior.kind")?.as_scalar()?)?;
    let mut adapters = Vec::new();
    let mut j = 0usize;
    while let Some(t) = ck.maybe(&format!("posterior{j}.layer_index")) {
        let layer_index = t.as_scalar()? as usize;
        let mu_a = ck.get(&format!("posterior{j}.mu_a"))?.as_matrix()?;
        let mu_b = ck.get(&format!("posterior{j}.mu_b"))?.as_matrix()?;
        let curvature = match kind {
            CurvatureKind::Diag => AdapterCurvature::Diag(DiagPrecision {
                d_a: ck.get(&format!("posterior{j}.diag_a"))?.data.clone(),
                d_b: ck.get(&format!("posterior{j}.diag_b"))?.data.clone(),
            }),
            CurvatureKind::BlockKfac | CurvatureKind::BlockTriKfac => {
                let l01 = ck
                    .maybe(&format!("posterior{j}.l01"))
                    .map(|t| t.as_matrix())
                    .transpose()?;
                let r12 = ck
                    .maybe(&format!("posterior{j}.r12"))
                    .map(|t| t.as_matrix())
                    .transpose()?;
                if (kind == CurvatureKind::BlockTriKfac) != (l01.is_some() && r12.is_some()) {
                    return Err(Error::contract(
                        "cross factors disagree with the stored kind",
                    ));
                }
                AdapterCurvature::Kfac(KfacFactors {
                    l00: ck.get(&format!("posterior{j}.l00"))?.as_matrix()?,
                    r11: ck.get(&format!("posterior{j}.r11"))?.as_matrix()?,
                    l11: ck.get(&format!("posterior{j}.l11"))?.as_matrix()?,
                    r22: ck.get(&format!("posterior{j}.r22"))?.as_matrix()?,
                    l01,
                    r12,
                })
            }
            CurvatureKind::Identity => AdapterCurvature::Identity(AdapterDims {
                rank: mu_a.rows(),
                d_in: mu_a.cols(),
                d_out: mu_b.rows(),
            }),
        };
        adapters.push(AdapterPosterior { layer_index, mu_a, mu_b, curvature });
        j += 1;
    }
    if adapters.is_empty() {
        return Err(Error::contract("checkpoint holds no posterior"));
    }
    Ok(LaplacePosterior { kind, adapters })
}

/// Rebuilds the provenance block, when present.
pub fn provenance_from_checkpoint(ck: &Checkpoint) -> Result<Option<Provenance>> {
    let Some(shape) = ck.maybe("provenance.shape") else {
        return Ok(None);
    };
    if shape.data.len() != 3 {
        return Err(Error::contract("provenance.shape malformed"));
    }
    let batches = ck.get("provenance.batches")?;
    if batches.dims.len() != 2 || batches.dims[1] != 4 {
        return Err(Error::contract("provenance.batches malformed"));
    }
    let mut descriptors = Vec::with_capacity(batches.dims[0] as usize);
    for row in batches.data.chunks_exact(4) {
        descriptors.push(BatchDescriptor {
            subdataset: row[0] as usize,
            shuffle_seed: ((row[1] as u64) << 32) | (row[2] as u64),
            batch_index: row[3] as usize,
        });
    }
    Ok(Some(Provenance {
        subdataset_count: shape.data[0] as usize,
        batches_per_subdataset: shape.data[1] as usize,
        batch_size: shape.data[2] as usize,
        descriptors,
    }))
}
