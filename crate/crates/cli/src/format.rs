//! On-disk formats: a magic tag, a little-endian `u64` header length, a JSON
//! header, then raw little-endian `f32` data.
//!
//! * Model files (`CDWN1`): `W_up`, `W_gate`, `W_down` (each `d_inter × d_model`),
//!   then the optional predictor (`theta_A`, `theta_B` for low-rank, the
//!   `d_model × d_inter` shadow weights for ternary).
//! * Raw matrices (`CDMX1`): one `rows × cols` matrix, e.g. a batch of inputs.

use std::path::Path;

use countdown_core::predictor::{LowRankPredictor, Predictor, PredictorKind, TernaryPredictor};
use countdown_core::{Activation, GatedMlpLayer, Mat32};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MODEL_MAGIC: &[u8; 5] = b"CDWN1";
pub const MATRIX_MAGIC: &[u8; 5] = b"CDMX1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorHeader {
    pub kind: PredictorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_rank: Option<usize>,
    /// Sparsity ratio the predictor was trained for.
    pub k: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub d_model: usize,
    pub d_inter: usize,
    pub activation: Activation,
    /// Seed the weights were drawn from, if generated.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor: Option<PredictorHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub layer: GatedMlpLayer,
    pub seed: Option<u64>,
    pub predictor: Option<(Predictor, f64)>,
}

impl ModelFile {
    pub fn new(layer: GatedMlpLayer, seed: Option<u64>) -> Self {
        Self {
            layer,
            seed,
            predictor: None,
        }
    }

    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            d_model: self.layer.d_model(),
            d_inter: self.layer.d_inter(),
            activation: self.layer.activation(),
            seed: self.seed,
            predictor: self.predictor.as_ref().map(|(p, k)| PredictorHeader {
                kind: p.kind(),
                d_rank: p.d_rank(),
                k: *k,
                gamma: match p {
                    Predictor::Ternary(t) => Some(t.gamma()),
                    Predictor::LowRank(_) => None,
                },
            }),
        }
    }

    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        let mut blobs: Vec<&[f32]> = vec![
            self.layer.w_up().data(),
            self.layer.w_gate().data(),
            self.layer.w_down().data(),
        ];
        match &self.predictor {
            Some((Predictor::LowRank(p), _)) => {
                blobs.push(p.theta_a().data());
                blobs.push(p.theta_b().data());
            }
            Some((Predictor::Ternary(p), _)) => blobs.push(p.shadow().data()),
            None => {}
        }
        encode(MODEL_MAGIC, &self.header(), &blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        let (header, payload): (ModelHeader, _) = decode(MODEL_MAGIC, "model", bytes)?;
        let (dm, di) = (header.d_model, header.d_inter);
        if dm == 0 || di == 0 {
            return Err(CliError::Data(format!(
                "model header declares empty shape {di}×{dm}"
            )));
        }
        let mut shapes = vec![(di, dm); 3];
        if let Some(p) = &header.predictor {
            match p.kind {
                PredictorKind::LowRank => {
                    let dr = p.d_rank.ok_or_else(|| {
                        CliError::Data("low-rank predictor header lacks d_rank".into())
                    })?;
                    shapes.push((dm, dr));
                    shapes.push((dr, di));
                }
                PredictorKind::Ternary => shapes.push((dm, di)),
            }
        }
        let mut mats = split_payload("model", payload, &shapes)?.into_iter();
        let mut next = || mats.next().expect("one matrix per declared shape");
        let layer = GatedMlpLayer::new(next(), next(), next(), header.activation)?;
        let predictor = match &header.predictor {
            Some(p) => {
                let pred = match p.kind {
                    PredictorKind::LowRank => {
                        Predictor::LowRank(LowRankPredictor::new(next(), next())?)
                    }
                    PredictorKind::Ternary => Predictor::Ternary(TernaryPredictor::new(next())),
                };
                Some((pred, p.k))
            }
            None => None,
        };
        Ok(Self {
            layer,
            seed: header.seed,
            predictor,
        })
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| prefix(path, e))
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| CliError::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct MatrixHeader {
    rows: usize,
    cols: usize,
}

pub fn matrix_to_bytes(m: &Mat32) -> CliResult<Vec<u8>> {
    let header = MatrixHeader {
        rows: m.rows(),
        cols: m.cols(),
    };
    encode(MATRIX_MAGIC, &header, &[m.data()])
}

pub fn matrix_from_bytes(bytes: &[u8]) -> CliResult<Mat32> {
    let (h, payload): (MatrixHeader, _) = decode(MATRIX_MAGIC, "matrix", bytes)?;
    Ok(split_payload("matrix", payload, &[(h.rows, h.cols)])?.remove(0))
}

pub fn read_matrix(path: &Path) -> CliResult<Mat32> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    matrix_from_bytes(&bytes).map_err(|e| prefix(path, e))
}

pub fn write_matrix(path: &Path, m: &Mat32) -> CliResult<()> {
    std::fs::write(path, matrix_to_bytes(m)?).map_err(|e| CliError::io(path, e))
}

fn prefix(path: &Path, e: CliError) -> CliError {
    match e {
        CliError::Data(msg) => CliError::Data(format!("{}: {msg}", path.display())),
        other => other,
    }
}

fn encode<H: Serialize>(magic: &[u8; 5], header: &H, blobs: &[&[f32]]) -> CliResult<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let floats: usize = blobs.iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(magic.len() + 8 + json.len() + 4 * floats);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for blob in blobs {
        for v in blob.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode<'a, H: Deserialize<'a>>(
    magic: &[u8; 5],
    what: &str,
    bytes: &'a [u8],
) -> CliResult<(H, &'a [u8])> {
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(CliError::Data(format!(
            "not a {what} file: expected magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let rest = &bytes[magic.len()..];
    let len_bytes: [u8; 8] = rest
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| CliError::Data(format!("{what} file truncated inside the header length")))?;
    let header_len = u64::from_le_bytes(len_bytes);
    let rest = &rest[8..];
    let header_len = usize::try_from(header_len)
        .ok()
        .filter(|&n| n <= rest.len())
        .ok_or_else(|| {
            CliError::Data(format!(
                "{what} header length {header_len} exceeds the {} bytes that follow",
                rest.len()
            ))
        })?;
    let header = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| CliError::Data(format!("{what} header: {e}")))?;
    Ok((header, &rest[header_len..]))
}

fn split_payload(what: &str, payload: &[u8], shapes: &[(usize, usize)]) -> CliResult<Vec<Mat32>> {
    let expected = shapes
        .iter()
        .try_fold(0usize, |acc, &(r, c)| {
            r.checked_mul(c)?.checked_mul(4)?.checked_add(acc)
        })
        .ok_or_else(|| CliError::Data(format!("{what} header declares an impossibly large payload")))?;
    if payload.len() != expected {
        return Err(CliError::Data(format!(
            "{what} payload length mismatch: expected {expected} bytes, found {} bytes",
            payload.len()
        )));
    }
    let mut offset = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let n = r * c * 4;
            let data = payload[offset..offset + n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            offset += n;
            Ok(Mat32::new(r, c, data)?)
        })
        .collect()
}
