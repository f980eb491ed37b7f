//! On-disk containers: the `PCNVOL1` volume/mask/field format and dataset directories.
//!
//! A container is a block of `key=value` text lines opened by the magic line
//! and closed by `end`, followed by a little-endian row-major payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PcnError, Result};
use crate::phantom::{DeformationField, PhantomConfig};
use crate::types::{Case, Dataset, LabelMask, LabelPhase, PhaseTag, Provenance, Sample, Volume};

pub const MAGIC: &str = "PCNVOL1";
pub const DATASET_MANIFEST: &str = "dataset.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn header(fields: &[(&str, String)]) -> Vec<u8> {
    let mut s = format!("{MAGIC}\n");
    for (k, v) in fields {
        s.push_str(&format!("{k}={v}\n"));
    }
    s.push_str("end\n");
    s.into_bytes()
}

struct Parsed<'a> {
    fields: BTreeMap<String, String>,
    payload: &'a [u8],
}

fn fmt_err(path: &Path, detail: impl Into<String>) -> PcnError {
    PcnError::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn parse<'a>(bytes: &'a [u8], path: &Path) -> Result<Parsed<'a>> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut fields = BTreeMap::new();
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt_err(path, "header not terminated"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| fmt_err(path, "header is not text"))?;
        pos += nl + 1;
        if line_no == 0 {
            if line != MAGIC {
                return Err(fmt_err(path, format!("bad magic {line:?}")));
            }
        } else if line == "end" {
            break;
        } else {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fmt_err(path, format!("header line {} is not key=value", line_no + 1)))?;
            fields.insert(k.to_string(), v.to_string());
        }
        line_no += 1;
    }
    Ok(Parsed {
        fields,
        payload: &bytes[pos..],
    })
}

impl Parsed<'_> {
    fn get(&self, key: &str, path: &Path) -> Result<&str> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| fmt_err(path, format!("missing header field {key}")))
    }

    fn dims(&self, path: &Path) -> Result<(usize, usize)> {
        let d = self.get("dims", path)?;
        let mut it = d.split_whitespace().map(str::parse::<usize>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(h)), Some(Ok(w)), None) => Ok((h, w)),
            _ => Err(fmt_err(path, format!("bad dims {d:?}"))),
        }
    }

    fn expect(&self, key: &str, want: &str, path: &Path) -> Result<()> {
        let got = self.get(key, path)?;
        if got != want {
            return Err(fmt_err(path, format!("{key} is {got:?}, expected {want:?}")));
        }
        Ok(())
    }

    fn payload_len(&self, want: usize, path: &Path) -> Result<()> {
        if self.payload.len() != want {
            return Err(fmt_err(
                path,
                format!("payload has {} bytes, expected {want}", self.payload.len()),
            ));
        }
        Ok(())
    }
}

fn spacing_str(s: Option<(f64, f64)>) -> String {
    match s {
        Some((a, b)) => format!("{a:?} {b:?}"),
        None => "none".into(),
    }
}

fn parse_spacing(s: &str, path: &Path) -> Result<Option<(f64, f64)>> {
    if s == "none" {
        return Ok(None);
    }
    let v: Vec<f64> = s
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| fmt_err(path, format!("bad spacing {s:?}")))?;
    match v[..] {
        [a, b] => Ok(Some((a, b))),
        _ => Err(fmt_err(path, format!("bad spacing {s:?}"))),
    }
}

/// Serializes a volume. Intensities are stored as 32-bit floats.
pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = header(&[
        ("kind", "volume".into()),
        ("dims", format!("{} {}", v.height, v.width)),
        ("phase", v.phase.as_str().into()),
        ("dtype", "f32le".into()),
        ("case_id", v.case_id.clone()),
        ("spacing", spacing_str(v.spacing)),
    ]);
    for &x in &v.data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume> {
    let p = parse(bytes, path)?;
    p.expect("kind", "volume", path)?;
    p.expect("dtype", "f32le", path)?;
    let (h, w) = p.dims(path)?;
    let phase = PhaseTag::parse(p.get("phase", path)?).ok_or_else(|| fmt_err(path, "bad phase"))?;
    p.payload_len(h * w * 4, path)?;
    let data = p
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut v = Volume::new(h, w, data, phase, p.get("case_id", path)?)?;
    v.spacing = parse_spacing(p.get("spacing", path)?, path)?;
    Ok(v)
}

pub fn encode_mask(m: &LabelMask) -> Vec<u8> {
    let mut out = header(&[
        ("kind", "mask".into()),
        ("dims", format!("{} {}", m.height, m.width)),
        ("phase", m.phase.as_str().into()),
        ("dtype", "u8".into()),
        ("classes", m.num_classes.to_string()),
    ]);
    out.extend_from_slice(&m.data);
    out
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<LabelMask> {
    let p = parse(bytes, path)?;
    p.expect("kind", "mask", path)?;
    p.expect("dtype", "u8", path)?;
    let (h, w) = p.dims(path)?;
    let phase = LabelPhase::parse(p.get("phase", path)?).ok_or_else(|| fmt_err(path, "bad phase"))?;
    let classes: u8 = p
        .get("classes", path)?
        .parse()
        .map_err(|_| fmt_err(path, "bad class count"))?;
    p.payload_len(h * w, path)?;
    LabelMask::new(h, w, p.payload.to_vec(), classes, phase)
}

/// Deformation fields keep full precision so stored fields reproduce the warped labels exactly.
pub fn encode_field(f: &DeformationField) -> Vec<u8> {
    let mut out = header(&[
        ("kind", "field".into()),
        ("dims", format!("{} {}", f.height, f.width)),
        ("dtype", "f64le".into()),
        ("channels", "2".into()),
    ]);
    for &x in f.dy.iter().chain(&f.dx) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_field(bytes: &[u8], path: &Path) -> Result<DeformationField> {
    let p = parse(bytes, path)?;
    p.expect("kind", "field", path)?;
    p.expect("dtype", "f64le", path)?;
    let (h, w) = p.dims(path)?;
    p.payload_len(2 * h * w * 8, path)?;
    let vals: Vec<f64> = p
        .payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let (dy, dx) = vals.split_at(h * w);
    Ok(DeformationField {
        height: h,
        width: w,
        dy: dy.to_vec(),
        dx: dx.to_vec(),
    })
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_atomic(path, &encode_volume(v))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&fs::read(path)?, path)
}

pub fn write_mask(path: &Path, m: &LabelMask) -> Result<()> {
    write_atomic(path, &encode_mask(m))
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    decode_mask(&fs::read(path)?, path)
}

/// Description of a dataset directory, stored next to the case subdirectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub provenance: Provenance,
    pub seed: Option<u64>,
    pub phantom: Option<PhantomConfig>,
    pub cases: Vec<CaseEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    /// File name within the case directory → sha256.
    pub files: BTreeMap<String, String>,
}

impl DatasetManifest {
    /// Hash of the manifest's canonical JSON; identifies a dataset's exact contents.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

fn phase_stem(p: PhaseTag) -> &'static str {
    match p {
        PhaseTag::Arterial => "arterial",
        PhaseTag::Venous => "venous",
    }
}

fn put(dir: &Path, name: &str, bytes: Vec<u8>, files: &mut BTreeMap<String, String>) -> Result<()> {
    files.insert(name.to_string(), sha256_hex(&bytes));
    write_atomic(&dir.join(name), &bytes)
}

/// Writes one subdirectory per case plus `dataset.json`. Refuses to overwrite an existing dataset.
pub fn save_dataset(d: &Dataset, dir: &Path, phantom: Option<(&PhantomConfig, u64)>) -> Result<DatasetManifest> {
    if dir.join(DATASET_MANIFEST).exists() {
        return Err(PcnError::Config(format!("{} already holds a dataset", dir.display())));
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for c in d.cases() {
        let cdir = dir.join(&c.case_id);
        fs::create_dir_all(&cdir)?;
        let mut files = BTreeMap::new();
        for p in PhaseTag::BOTH {
            if let Some(s) = c.phase(p) {
                let stem = phase_stem(p);
                put(&cdir, &format!("{stem}.vol"), encode_volume(&s.volume), &mut files)?;
                put(&cdir, &format!("{stem}.mask"), encode_mask(&s.label), &mut files)?;
                if let Some(f) = &s.deformation {
                    put(&cdir, &format!("{stem}.field"), encode_field(f), &mut files)?;
                }
            }
        }
        if let Some(l) = &c.latent_label {
            put(&cdir, "latent.mask", encode_mask(l), &mut files)?;
        }
        entries.push(CaseEntry {
            case_id: c.case_id.clone(),
            files,
        });
    }
    let m = DatasetManifest {
        format: MAGIC.into(),
        provenance: d.provenance,
        seed: phantom.map(|p| p.1),
        phantom: phantom.map(|p| p.0.clone()),
        cases: entries,
    };
    write_atomic(&dir.join(DATASET_MANIFEST), serde_json::to_string_pretty(&m)?.as_bytes())?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST);
    if !path.exists() {
        return Err(PcnError::Prerequisite(format!(
            "{} has no {DATASET_MANIFEST}; create it with `pcn phantom-gen`",
            dir.display()
        )));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Loads a dataset directory, verifying every file against the manifest checksums.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let m = read_manifest(dir)?;
    let mut cases = Vec::with_capacity(m.cases.len());
    for e in &m.cases {
        let cdir = dir.join(&e.case_id);
        let mut blobs: BTreeMap<&str, (PathBuf, Vec<u8>)> = BTreeMap::new();
        for (name, sum) in &e.files {
            let path = cdir.join(name);
            let bytes = fs::read(&path)?;
            let got = sha256_hex(&bytes);
            if &got != sum {
                return Err(PcnError::Checksum {
                    path,
                    detail: format!("expected {sum}, found {got}"),
                });
            }
            blobs.insert(name.as_str(), (path, bytes));
        }
        let mut case = Case {
            case_id: e.case_id.clone(),
            arterial: None,
            venous: None,
            latent_label: None,
        };
        for p in PhaseTag::BOTH {
            let stem = phase_stem(p);
            let vol = blobs.get(format!("{stem}.vol").as_str());
            let mask = blobs.get(format!("{stem}.mask").as_str());
            match (vol, mask) {
                (Some((vp, vb)), Some((mp, mb))) => {
                    let deformation = match blobs.get(format!("{stem}.field").as_str()) {
                        Some((fp, fb)) => Some(decode_field(fb, fp)?),
                        None => None,
                    };
                    *case.phase_mut(p) = Some(Sample {
                        volume: decode_volume(vb, vp)?,
                        label: decode_mask(mb, mp)?,
                        deformation,
                    });
                }
                (None, None) => {}
                _ => {
                    return Err(PcnError::Format {
                        path: cdir.clone(),
                        detail: format!("{stem} volume and mask must both be present"),
                    })
                }
            }
        }
        if let Some((lp, lb)) = blobs.get("latent.mask") {
            case.latent_label = Some(decode_mask(lb, lp)?);
        }
        cases.push(case);
    }
    Ok((Dataset::new(cases, m.provenance)?, m))
}
