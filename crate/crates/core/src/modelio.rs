//! Persistence for fitted models: a small container with a plain-text
//! header followed by named entries, each holding either an `F2TD` tensor or
//! an `F2IX` u32 index array (both little-endian).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::backends::{Backend, GaussianField, MemoryBank, PatchCoreModel};
use crate::error::{Error, Result};
use crate::extractor::{build_extractor, Extractor, ExtractorSpec, LayerKind};
use crate::regularizers::MogPrior;
use crate::tensor::{read_f2td, write_f2td, Tensor};

const CONTAINER_MAGIC: &[u8] = b"F2PADMODEL\n";
const F2IX_MAGIC: &[u8; 4] = b"F2IX";

enum Entry {
    Tensor(Tensor),
    Indices(Vec<u32>),
}

struct Container {
    header: Vec<(String, String)>,
    entries: Vec<(String, Entry)>,
}

impl Container {
    fn header_value(&self, key: &str) -> Result<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("missing header key '{key}'")))
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.entries.iter().find(|(n, _)| n == name) {
            Some((_, Entry::Tensor(t))) => Ok(t),
            _ => Err(Error::Format(format!("missing tensor entry '{name}'"))),
        }
    }

    fn indices(&self, name: &str) -> Result<&[u32]> {
        match self.entries.iter().find(|(n, _)| n == name) {
            Some((_, Entry::Indices(v))) => Ok(v),
            _ => Err(Error::Format(format!("missing index entry '{name}'"))),
        }
    }
}

fn write_container(path: &Path, header: &[(String, String)], entries: &[(String, Entry)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CONTAINER_MAGIC)?;
    let mut text = String::new();
    for (k, v) in header {
        text.push_str(&format!("{k} = {v}\n"));
    }
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, entry) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        match entry {
            Entry::Tensor(t) => {
                w.write_all(&[0u8])?;
                write_f2td(&mut w, t)?;
            }
            Entry::Indices(v) => {
                w.write_all(&[1u8])?;
                w.write_all(F2IX_MAGIC)?;
                w.write_all(&(v.len() as u64).to_le_bytes())?;
                for &i in v {
                    w.write_all(&i.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_container(path: &Path) -> Result<Container> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = vec![0u8; CONTAINER_MAGIC.len()];
    r.read_exact(&mut magic)?;
    if magic != CONTAINER_MAGIC {
        return Err(Error::Format(format!("not a model container: {}", path.display())));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let hlen = u32::from_le_bytes(b4) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)?;
    let htext = String::from_utf8(hbytes).map_err(|e| Error::Format(e.to_string()))?;
    let header = htext
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b4)?;
        let nlen = u32::from_le_bytes(b4) as usize;
        let mut nbytes = vec![0u8; nlen];
        r.read_exact(&mut nbytes)?;
        let name = String::from_utf8(nbytes).map_err(|e| Error::Format(e.to_string()))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let entry = match tag[0] {
            0 => Entry::Tensor(read_f2td(&mut r)?),
            1 => {
                let mut m = [0u8; 4];
                r.read_exact(&mut m)?;
                if &m != F2IX_MAGIC {
                    return Err(Error::Format("expected F2IX magic".into()));
                }
                let mut b8 = [0u8; 8];
                r.read_exact(&mut b8)?;
                let len = u64::from_le_bytes(b8) as usize;
                let mut v = Vec::with_capacity(len);
                for _ in 0..len {
                    r.read_exact(&mut b4)?;
                    v.push(u32::from_le_bytes(b4));
                }
                Entry::Indices(v)
            }
            t => return Err(Error::Format(format!("unknown entry tag {t}"))),
        };
        entries.push((name, entry));
    }
    Ok(Container { header, entries })
}

fn layer_to_string(layer: &LayerKind) -> String {
    match layer {
        LayerKind::Conv { kh, kw, cin, cout, stride, pad } => {
            format!("conv:{kh}x{kw}:{cin}>{cout}:s{stride}:p{pad}")
        }
        LayerKind::AvgPool { k, stride } => format!("pool:{k}:s{stride}"),
        LayerKind::LeakyRelu { slope } => format!("lrelu:{slope}"),
    }
}

fn layer_from_string(s: &str) -> Result<LayerKind> {
    let bad = || Error::Format(format!("bad layer descriptor '{s}'"));
    let mut parts = s.split(':');
    match parts.next() {
        Some("conv") => {
            let dims = parts.next().ok_or_else(bad)?;
            let (kh, kw) = dims.split_once('x').ok_or_else(bad)?;
            let chans = parts.next().ok_or_else(bad)?;
            let (cin, cout) = chans.split_once('>').ok_or_else(bad)?;
            let stride = parts.next().and_then(|p| p.strip_prefix('s')).ok_or_else(bad)?;
            let pad = parts.next().and_then(|p| p.strip_prefix('p')).ok_or_else(bad)?;
            Ok(LayerKind::Conv {
                kh: kh.parse().map_err(|_| bad())?,
                kw: kw.parse().map_err(|_| bad())?,
                cin: cin.parse().map_err(|_| bad())?,
                cout: cout.parse().map_err(|_| bad())?,
                stride: stride.parse().map_err(|_| bad())?,
                pad: pad.parse().map_err(|_| bad())?,
            })
        }
        Some("pool") => {
            let k = parts.next().ok_or_else(bad)?;
            let stride = parts.next().and_then(|p| p.strip_prefix('s')).ok_or_else(bad)?;
            Ok(LayerKind::AvgPool {
                k: k.parse().map_err(|_| bad())?,
                stride: stride.parse().map_err(|_| bad())?,
            })
        }
        Some("lrelu") => {
            let slope = parts.next().ok_or_else(bad)?;
            Ok(LayerKind::LeakyRelu { slope: slope.parse().map_err(|_| bad())? })
        }
        _ => Err(bad()),
    }
}

/// Persist an extractor: spec in the header, weights as tensor entries.
pub fn save_extractor(path: &Path, ex: &Extractor) -> Result<()> {
    let spec = ex.spec();
    let header = vec![
        ("kind".to_string(), "extractor".to_string()),
        (
            "layers".to_string(),
            spec.layers.iter().map(layer_to_string).collect::<Vec<_>>().join(","),
        ),
        (
            "taps".to_string(),
            spec.tap_points.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","),
        ),
        ("seed".to_string(), spec.seed.to_string()),
    ];
    let entries: Vec<(String, Entry)> = ex
        .weights()
        .iter()
        .enumerate()
        .map(|(i, w)| (format!("w{i}"), Entry::Tensor(w.clone())))
        .collect();
    write_container(path, &header, &entries)
}

pub fn load_extractor(path: &Path) -> Result<Extractor> {
    let c = read_container(path)?;
    if c.header_value("kind")? != "extractor" {
        return Err(Error::Format("container is not an extractor".into()));
    }
    let layers = c
        .header_value("layers")?
        .split(',')
        .map(layer_from_string)
        .collect::<Result<Vec<_>>>()?;
    let tap_points = c
        .header_value("taps")?
        .split(',')
        .map(|t| t.parse::<usize>().map_err(|e| Error::Format(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let seed = c
        .header_value("seed")?
        .parse::<u64>()
        .map_err(|e| Error::Format(e.to_string()))?;
    let spec = ExtractorSpec { layers, tap_points, seed };
    let n_convs = spec
        .layers
        .iter()
        .filter(|l| matches!(l, LayerKind::Conv { .. }))
        .count();
    let mut weights = Vec::with_capacity(n_convs);
    for i in 0..n_convs {
        weights.push(c.tensor(&format!("w{i}"))?.clone());
    }
    Extractor::from_parts(spec, weights)
}

/// Rebuild an extractor purely from its seed-bearing spec (weights are a
/// pure function of the seed, so this equals the persisted one).
pub fn extractor_from_spec(spec: &ExtractorSpec) -> Result<Extractor> {
    build_extractor(spec)
}

/// Persist a fitted backend.
pub fn save_backend(path: &Path, backend: &Backend) -> Result<()> {
    match backend {
        Backend::Gaussian(f) => {
            let header = vec![("kind".to_string(), "gaussian_field".to_string())];
            let entries = vec![
                ("mean".to_string(), Entry::Tensor(f.mean().clone())),
                ("factor".to_string(), Entry::Tensor(f.factor().clone())),
            ];
            write_container(path, &header, &entries)
        }
        Backend::PatchCore(m) => {
            let header = vec![("kind".to_string(), "memory_bank".to_string())];
            let entries = vec![
                ("features".to_string(), Entry::Tensor(m.bank.as_matrix()?)),
                ("coreset".to_string(), Entry::Indices(m.coreset.clone())),
            ];
            write_container(path, &header, &entries)
        }
    }
}

pub fn load_backend(path: &Path) -> Result<Backend> {
    let c = read_container(path)?;
    match c.header_value("kind")? {
        "gaussian_field" => {
            let mean = c.tensor("mean")?.clone();
            let factor = c.tensor("factor")?.clone();
            Ok(Backend::Gaussian(GaussianField::from_parts(mean, factor)?))
        }
        "memory_bank" => {
            let features = c.tensor("features")?.clone();
            let bank = MemoryBank::from_matrix(features)?;
            let coreset = c.indices("coreset")?.to_vec();
            Ok(Backend::PatchCore(PatchCoreModel { bank: Arc::new(bank), coreset }))
        }
        other => Err(Error::Format(format!("unknown backend kind '{other}'"))),
    }
}

/// Persist a fitted pixel prior.
pub fn save_prior(path: &Path, prior: &MogPrior) -> Result<()> {
    let q = prior.components();
    let header = vec![("kind".to_string(), "mog_prior".to_string())];
    let means: Vec<f64> = prior.means.iter().flatten().copied().collect();
    let covs: Vec<f64> = prior.covs.iter().flatten().copied().collect();
    let entries = vec![
        ("weights".to_string(), Entry::Tensor(Tensor::new(vec![q], prior.weights.clone())?)),
        ("means".to_string(), Entry::Tensor(Tensor::new(vec![q, 3], means)?)),
        ("covs".to_string(), Entry::Tensor(Tensor::new(vec![q, 3, 3], covs)?)),
    ];
    write_container(path, &header, &entries)
}

pub fn load_prior(path: &Path) -> Result<MogPrior> {
    let c = read_container(path)?;
    if c.header_value("kind")? != "mog_prior" {
        return Err(Error::Format("container is not a pixel prior".into()));
    }
    let weights = c.tensor("weights")?.data().to_vec();
    let means_t = c.tensor("means")?;
    let covs_t = c.tensor("covs")?;
    let q = weights.len();
    if means_t.shape() != [q, 3] || covs_t.shape() != [q, 3, 3] {
        return Err(Error::Format("prior tensor shapes inconsistent".into()));
    }
    let means: Vec<[f64; 3]> = (0..q)
        .map(|k| [means_t.data()[k * 3], means_t.data()[k * 3 + 1], means_t.data()[k * 3 + 2]])
        .collect();
    let covs: Vec<[f64; 9]> = (0..q)
        .map(|k| {
            let mut c9 = [0.0; 9];
            c9.copy_from_slice(&covs_t.data()[k * 9..(k + 1) * 9]);
            c9
        })
        .collect();
    MogPrior::from_parts(weights, means, covs)
}
