//! Parameter checkpoints: a text header, little-endian `f64` parameter
//! payloads, and a trailing SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{PcnError, Result};
use crate::io::write_atomic;
use crate::objective::{BundleArch, LossBreakdown, ModelBundle, Stage, NUM_SLOTS};
use crate::seg::{SegArch, SegModel};
use crate::translate::{Direction, GenArch, Generator};
use crate::types::PhaseTag;

pub const CKPT_MAGIC: &str = "PCNCKPT1";
const DIGEST_LEN: usize = 32;

/// Metadata stored alongside a bundle's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    pub log_tail: Option<LossBreakdown>,
}

fn encode(fields: &[(&str, String)], payloads: &[&[f64]]) -> Vec<u8> {
    let mut out = format!("{CKPT_MAGIC}\n");
    for (k, v) in fields {
        out.push_str(&format!("{k}={v}\n"));
    }
    let lens: Vec<String> = payloads.iter().map(|p| p.len().to_string()).collect();
    out.push_str(&format!("lengths={}\nend\n", lens.join(" ")));
    let mut bytes = out.into_bytes();
    for p in payloads {
        for v in p.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    bytes
}

struct Decoded {
    fields: BTreeMap<String, String>,
    payloads: Vec<Vec<f64>>,
}

fn format_err(path: &Path, detail: impl Into<String>) -> PcnError {
    PcnError::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn decode(bytes: &[u8], path: &Path) -> Result<Decoded> {
    if bytes.len() < DIGEST_LEN {
        return Err(PcnError::Checksum {
            path: path.to_path_buf(),
            detail: "file shorter than its checksum".into(),
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(PcnError::Checksum {
            path: path.to_path_buf(),
            detail: "content does not match stored sha256".into(),
        });
    }
    let mut fields = BTreeMap::new();
    let mut pos = 0;
    let mut first = true;
    loop {
        let nl = body[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err(path, "header not terminated"))?;
        let line = std::str::from_utf8(&body[pos..pos + nl]).map_err(|_| format_err(path, "header is not text"))?;
        pos += nl + 1;
        if first {
            if line != CKPT_MAGIC {
                return Err(format_err(path, format!("bad magic {line:?}")));
            }
            first = false;
            continue;
        }
        if line == "end" {
            break;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format_err(path, "header line is not key=value"))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let lens: Vec<usize> = fields
        .get("lengths")
        .ok_or_else(|| format_err(path, "missing lengths"))?
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format_err(path, "bad lengths"))?;
    let payload = &body[pos..];
    if payload.len() != lens.iter().sum::<usize>() * 8 {
        return Err(format_err(path, "payload length disagrees with header"));
    }
    let mut vals = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let payloads = lens.iter().map(|&n| vals.by_ref().take(n).collect()).collect();
    Ok(Decoded { fields, payloads })
}

impl Decoded {
    fn get(&self, k: &str, path: &Path) -> Result<&str> {
        self.fields
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| format_err(path, format!("missing header field {k}")))
    }

    fn json<T: serde::de::DeserializeOwned>(&self, k: &str, path: &Path) -> Result<T> {
        serde_json::from_str(self.get(k, path)?).map_err(|e| format_err(path, format!("field {k}: {e}")))
    }

    fn num<T: std::str::FromStr>(&self, k: &str, path: &Path) -> Result<T> {
        self.get(k, path)?
            .parse()
            .map_err(|_| format_err(path, format!("field {k} is not a number")))
    }
}

fn read(path: &Path, kind: &str) -> Result<Decoded> {
    let d = decode(&fs::read(path)?, path)?;
    let got = d.get("kind", path)?;
    if got != kind {
        return Err(format_err(path, format!("holds a {got} checkpoint, expected {kind}")));
    }
    Ok(d)
}

pub fn encode_bundle(b: &ModelBundle, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let payloads: Vec<&[f64]> = (0..NUM_SLOTS).map(|s| b.params(s)).collect();
    let tail = match &meta.log_tail {
        Some(l) => serde_json::to_string(l)?,
        None => "none".into(),
    };
    Ok(encode(
        &[
            ("kind", "bundle".into()),
            ("arch", serde_json::to_string(&b.arch())?),
            ("stage", b.stage.as_str().into()),
            ("iteration", b.iteration.to_string()),
            ("seed", meta.seed.to_string()),
            ("config_hash", meta.config_hash.clone()),
            ("log_tail", tail),
        ],
        &payloads,
    ))
}

pub fn save_bundle(path: &Path, b: &ModelBundle, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, &encode_bundle(b, meta)?)
}

pub fn load_bundle(path: &Path) -> Result<(ModelBundle, CheckpointMeta)> {
    let d = read(path, "bundle")?;
    let arch: BundleArch = d.json("arch", path)?;
    let stage = Stage::parse(d.get("stage", path)?).ok_or_else(|| format_err(path, "bad stage"))?;
    if d.payloads.len() != NUM_SLOTS {
        return Err(format_err(path, "bundle needs six parameter sets"));
    }
    // Grid only matters for validation; the smallest grid every arch accepts is used.
    let side = 4usize.max(1 << arch.seg.depth);
    let mut b = ModelBundle::init(arch, (side, side), 0)?;
    for (s, p) in d.payloads.iter().enumerate() {
        if p.len() != b.params(s).len() {
            return Err(format_err(path, format!("parameter set {s} has the wrong length for its arch")));
        }
        b.params_mut(s).clone_from(p);
    }
    b.stage = stage;
    b.iteration = d.num("iteration", path)?;
    let log_tail = match d.get("log_tail", path)? {
        "none" => None,
        _ => Some(d.json("log_tail", path)?),
    };
    let meta = CheckpointMeta {
        seed: d.num("seed", path)?,
        config_hash: d.get("config_hash", path)?.to_string(),
        log_tail,
    };
    Ok((b, meta))
}

pub fn save_generator(path: &Path, g: &Generator, seed: u64) -> Result<()> {
    let bytes = encode(
        &[
            ("kind", "generator".into()),
            ("arch", serde_json::to_string(&g.arch)?),
            ("source", g.direction.source.as_str().into()),
            ("target", g.direction.target.as_str().into()),
            ("seed", seed.to_string()),
        ],
        &[&g.params],
    );
    write_atomic(path, &bytes)
}

pub fn load_generator(path: &Path) -> Result<Generator> {
    let d = read(path, "generator")?;
    let arch: GenArch = d.json("arch", path)?;
    let source = PhaseTag::parse(d.get("source", path)?).ok_or_else(|| format_err(path, "bad source phase"))?;
    let g = Generator {
        arch,
        direction: Direction::from_source(source),
        params: d.payloads.into_iter().next().unwrap_or_default(),
    };
    if g.params.len() != arch.param_count() {
        return Err(format_err(path, "generator parameter count disagrees with arch"));
    }
    Ok(g)
}

pub fn save_seg(path: &Path, m: &SegModel, iteration: u64, seed: u64) -> Result<()> {
    let bytes = encode(
        &[
            ("kind", "seg".into()),
            ("arch", serde_json::to_string(&m.arch)?),
            ("phase", m.phase.as_str().into()),
            ("iteration", iteration.to_string()),
            ("seed", seed.to_string()),
        ],
        &[&m.params],
    );
    write_atomic(path, &bytes)
}

pub fn load_seg(path: &Path) -> Result<SegModel> {
    let d = read(path, "seg")?;
    let arch: SegArch = d.json("arch", path)?;
    let phase = PhaseTag::parse(d.get("phase", path)?).ok_or_else(|| format_err(path, "bad phase"))?;
    let m = SegModel {
        arch,
        phase,
        params: d.payloads.into_iter().next().unwrap_or_default(),
    };
    if m.params.len() != arch.param_count() {
        return Err(format_err(path, "segmentation parameter count disagrees with arch"));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seg::seg_forward;
    use crate::translate::DiscArch;
    use crate::types::Volume;

    fn small() -> BundleArch {
        BundleArch {
            seg: SegArch {
                depth: 2,
                base_width: 4,
                num_classes: 3,
                input_channels: 1,
            },
            gen: GenArch {
                num_res_blocks: 1,
                base_width: 2,
            },
            disc: DiscArch { base_width: 2, num_downsample: 2 },
        }
    }

    #[test]
    fn bundle_round_trip_and_truncation() {
        let mut b = ModelBundle::init(small(), (16, 16), 4).unwrap();
        b.stage = Stage::Separate;
        b.iteration = 17;
        b.gen_av.params[3] = 0.125;
        let meta = CheckpointMeta {
            seed: 4,
            config_hash: "abc".into(),
            log_tail: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.ckpt");
        save_bundle(&p, &b, &meta).unwrap();
        let (back, m) = load_bundle(&p).unwrap();
        assert_eq!(back, b);
        assert_eq!(m, meta);
        let x = Volume::new(16, 16, (0..256).map(|i| i as f64).collect(), PhaseTag::Arterial, "p").unwrap();
        assert_eq!(seg_forward(&back.seg_a, &x).unwrap(), seg_forward(&b.seg_a, &x).unwrap());

        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_bundle(&p), Err(PcnError::Checksum { .. })));
    }

    #[test]
    fn kind_is_checked() {
        let b = ModelBundle::init(small(), (16, 16), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.ckpt");
        save_generator(&p, &b.gen_va, 1).unwrap();
        assert_eq!(load_generator(&p).unwrap(), b.gen_va);
        assert!(load_bundle(&p).is_err());
        let q = dir.path().join("s.ckpt");
        save_seg(&q, &b.seg_v, 3, 1).unwrap();
        assert_eq!(load_seg(&q).unwrap(), b.seg_v);
    }
}
