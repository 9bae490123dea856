//! Versioned binary checkpoints.
//!
//! Layout: magic `VFCK`, u32 format version, u32 header length, JSON header
//! `{format_version, config_hash, step}`, then raw little-endian `f64`
//! payload sections (parameter trees, optimizer velocities, queues,
//! prototypes) in canonical order. Forward outputs after a save/load round
//! trip are bitwise identical because nothing is quantized.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::coarse::{ContrastQueue, Prototype, QueueBank};
use crate::config::CoarseConfig;
use crate::detector::FaceLabel;
use crate::error::{Error, Result};
use crate::nn::ParamSet;

const MAGIC: &[u8; 4] = b"VFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_hash: String,
    step: u64,
}

pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub params_q: ParamSet,
    pub params_k: ParamSet,
    pub head_params: ParamSet,
    pub ext_velocity: IndexMap<String, ArrayD<f64>>,
    pub head_velocity: IndexMap<String, ArrayD<f64>>,
    pub queues: Vec<QueueState>,
    pub protos: Vec<ProtoState>,
}

#[derive(Clone, Debug)]
pub struct QueueState {
    pub level: usize,
    pub class: u32,
    pub entries: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ProtoState {
    pub level: usize,
    pub class: u32,
    pub vector: Option<Vec<f64>>,
}

pub fn snapshot_bank(bank: &QueueBank) -> (Vec<QueueState>, Vec<ProtoState>) {
    let queues = bank
        .queues
        .iter()
        .map(|(&(level, class), q)| QueueState {
            level,
            class,
            entries: q.iter().cloned().collect(),
        })
        .collect();
    let protos = bank
        .protos
        .iter()
        .map(|(&(level, class), p)| ProtoState {
            level,
            class,
            vector: p.vector.clone(),
        })
        .collect();
    (queues, protos)
}

pub fn restore_bank(
    cfg: &CoarseConfig,
    queues: &[QueueState],
    protos: &[ProtoState],
) -> Result<QueueBank> {
    let mut bank = QueueBank::new(cfg.clone());
    for qs in queues {
        let class = FaceLabel::from_category_id(qs.class)
            .ok_or_else(|| Error::Checkpoint(format!("bad queue class {}", qs.class)))?;
        let q = bank
            .queues
            .get_mut(&(qs.level, class.category_id()))
            .ok_or_else(|| Error::Checkpoint(format!("bad queue level {}", qs.level)))?;
        *q = ContrastQueue::new(qs.level, class, cfg.queue_capacity);
        for e in &qs.entries {
            q.push(e.clone());
        }
    }
    for ps in protos {
        let p = bank
            .protos
            .get_mut(&(ps.level, ps.class))
            .ok_or_else(|| Error::Checkpoint(format!("bad prototype key {}", ps.level)))?;
        *p = Prototype {
            vector: ps.vector.clone(),
            alpha: cfg.alpha,
        };
    }
    Ok(bank)
}

// --- binary primitives ------------------------------------------------------

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, xs: impl Iterator<Item = f64>) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        Ok(String::from_utf8_lossy(self.take(n)?).into_owned())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn put_param_set(buf: &mut Vec<u8>, params: &ParamSet) {
    put_u64(buf, params.len() as u64);
    for (name, entry) in params.iter() {
        put_str(buf, name);
        buf.push(entry.trainable as u8);
        put_u32(buf, entry.value.ndim() as u32);
        for &d in entry.value.shape() {
            put_u64(buf, d as u64);
        }
        put_f64s(buf, entry.value.iter().copied());
    }
}

fn read_param_set(r: &mut Reader<'_>) -> Result<ParamSet> {
    let count = r.u64()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = r.string()?;
        let trainable = r.take(1)?[0] != 0;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = r.f64s(len)?;
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        params.insert(&name, arr, trainable);
    }
    Ok(params)
}

fn put_velocity(buf: &mut Vec<u8>, vel: &IndexMap<String, ArrayD<f64>>) {
    put_u64(buf, vel.len() as u64);
    for (name, arr) in vel {
        put_str(buf, name);
        put_u32(buf, arr.ndim() as u32);
        for &d in arr.shape() {
            put_u64(buf, d as u64);
        }
        put_f64s(buf, arr.iter().copied());
    }
}

fn read_velocity(r: &mut Reader<'_>) -> Result<IndexMap<String, ArrayD<f64>>> {
    let count = r.u64()?;
    let mut out = IndexMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = r.f64s(len)?;
        out.insert(
            name,
            ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
    }
    Ok(out)
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        config_hash: ck.config_hash.clone(),
        step: ck.step,
    })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, header.len() as u32);
    buf.extend_from_slice(&header);

    put_param_set(&mut buf, &ck.params_q);
    put_param_set(&mut buf, &ck.params_k);
    put_param_set(&mut buf, &ck.head_params);
    put_velocity(&mut buf, &ck.ext_velocity);
    put_velocity(&mut buf, &ck.head_velocity);

    put_u64(&mut buf, ck.queues.len() as u64);
    for q in &ck.queues {
        put_u64(&mut buf, q.level as u64);
        put_u32(&mut buf, q.class);
        put_u64(&mut buf, q.entries.len() as u64);
        let dim = q.entries.first().map(|e| e.len()).unwrap_or(0);
        put_u64(&mut buf, dim as u64);
        for e in &q.entries {
            put_f64s(&mut buf, e.iter().copied());
        }
    }
    put_u64(&mut buf, ck.protos.len() as u64);
    for p in &ck.protos {
        put_u64(&mut buf, p.level as u64);
        put_u32(&mut buf, p.class);
        match &p.vector {
            Some(v) => {
                buf.push(1);
                put_u64(&mut buf, v.len() as u64);
                put_f64s(&mut buf, v.iter().copied());
            }
            None => buf.push(0),
        }
    }

    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut r = Reader { data: &data, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version}"
        )));
    }
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)?;

    let params_q = read_param_set(&mut r)?;
    let params_k = read_param_set(&mut r)?;
    let head_params = read_param_set(&mut r)?;
    let ext_velocity = read_velocity(&mut r)?;
    let head_velocity = read_velocity(&mut r)?;

    let n_queues = r.u64()? as usize;
    let mut queues = Vec::with_capacity(n_queues);
    for _ in 0..n_queues {
        let level = r.u64()? as usize;
        let class = r.u32()?;
        let n = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            entries.push(r.f64s(dim)?);
        }
        queues.push(QueueState {
            level,
            class,
            entries,
        });
    }
    let n_protos = r.u64()? as usize;
    let mut protos = Vec::with_capacity(n_protos);
    for _ in 0..n_protos {
        let level = r.u64()? as usize;
        let class = r.u32()?;
        let has = r.take(1)?[0] != 0;
        let vector = if has {
            let n = r.u64()? as usize;
            Some(r.f64s(n)?)
        } else {
            None
        };
        protos.push(ProtoState {
            level,
            class,
            vector,
        });
    }

    Ok(Checkpoint {
        config_hash: header.config_hash,
        step: header.step,
        params_q,
        params_k,
        head_params,
        ext_velocity,
        head_velocity,
        queues,
        protos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let mut rng = crate::rng::stream(31, "ckpt", 0);
        let mut params = ParamSet::new();
        for i in 0..4 {
            let shape = [rng.random_range(1..4), rng.random_range(1..5)];
            params.insert(
                &format!("layer{i}.w"),
                ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.random_range(-1.0..1.0)),
                i % 2 == 0,
            );
        }
        let mut vel = IndexMap::new();
        vel.insert(
            "layer0.w".to_string(),
            ArrayD::from_shape_fn(IxDyn(&[2, 2]), |_| rng.random_range(-1.0..1.0)),
        );
        let ck = Checkpoint {
            config_hash: "abc123".into(),
            step: 77,
            params_q: params.clone(),
            params_k: params.clone(),
            head_params: params.clone(),
            ext_velocity: vel.clone(),
            head_velocity: IndexMap::new(),
            queues: vec![QueueState {
                level: 3,
                class: 1,
                entries: vec![vec![0.1, 0.2], vec![0.3, 0.4]],
            }],
            protos: vec![
                ProtoState {
                    level: 3,
                    class: 1,
                    vector: Some(vec![0.5, -0.5]),
                },
                ProtoState {
                    level: 4,
                    class: 0,
                    vector: None,
                },
            ],
        };
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("ck.bin");
        save(&ck, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.step, 77);
        assert_eq!(back.config_hash, "abc123");
        assert!(back.params_q.same_structure(&ck.params_q));
        for (name, e) in back.params_q.iter() {
            assert_eq!(&e.value, ck.params_q.get(name));
        }
        assert_eq!(back.ext_velocity["layer0.w"], vel["layer0.w"]);
        assert_eq!(back.queues[0].entries, ck.queues[0].entries);
        assert_eq!(back.protos[0].vector, ck.protos[0].vector);
        assert_eq!(back.protos[1].vector, None);
    }

    #[test]
    fn rejects_garbage() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load(&path).is_err());
    }
}
