//! Byte encodings of message payloads. Every tensor travels as TNSR.

use crate::error::{Error, Result};
use crate::linalg::SingularState;
use crate::tensor::{Matrix, Tensor};
use crate::tnsr;

use super::transport::{digest, PayloadKind};

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    tnsr::encode(t)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    tnsr::decode(bytes)
}

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    tnsr::encode(&Tensor::from_matrix(m))
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    tnsr::decode(bytes)?.to_matrix()
}

pub fn encode_vector(v: &[f64]) -> Vec<u8> {
    tnsr::encode(&Tensor::new(vec![v.len().max(1)], pad(v)).expect("length matches"))
}

fn pad(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        vec![0.0]
    } else {
        v.to_vec()
    }
}

pub fn decode_vector(bytes: &[u8]) -> Result<Vec<f64>> {
    let t = tnsr::decode(bytes)?;
    if t.order() != 1 {
        return Err(Error::Format(format!("expected a vector, got dims {:?}", t.dims())));
    }
    Ok(t.into_data())
}

pub fn encode_scalar(v: f64) -> Vec<u8> {
    encode_vector(&[v])
}

pub fn decode_scalar(bytes: &[u8]) -> Result<f64> {
    match decode_vector(bytes)?.as_slice() {
        [v] => Ok(*v),
        other => Err(Error::Format(format!("expected one value, got {}", other.len()))),
    }
}

/// Sample count (u64 LE) followed by the masked mean tensor.
pub fn encode_masked_mean(count: usize, mean: &Tensor) -> Vec<u8> {
    let mut out = (count as u64).to_le_bytes().to_vec();
    out.extend(tnsr::encode(mean));
    out
}

pub fn decode_masked_mean(bytes: &[u8]) -> Result<(usize, Tensor)> {
    if bytes.len() < 8 {
        return Err(Error::Format("masked mean payload too short".into()));
    }
    let count = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    Ok((count as usize, tnsr::decode(&bytes[8..])?))
}

/// Basis then singular values, back to back.
pub fn encode_singular_state(state: &SingularState) -> Vec<u8> {
    let mut out = encode_matrix(state.u());
    out.extend(encode_vector(state.singular_values()));
    out
}

pub fn decode_singular_state(bytes: &[u8]) -> Result<SingularState> {
    let (u, used) = tnsr::decode_prefix(bytes)?;
    let s = decode_vector(&bytes[used..])?;
    SingularState::new(u.to_matrix()?, s)
}

/// Digest of every TNSR object inside a payload, for leak auditing.
pub fn part_digests(kind: PayloadKind, bytes: &[u8]) -> Result<Vec<String>> {
    let mut rest = match kind {
        PayloadKind::MaskedMean if bytes.len() >= 8 && &bytes[..6] != tnsr::MAGIC => &bytes[8..],
        _ => bytes,
    };
    let mut parts = Vec::new();
    while !rest.is_empty() {
        let (_, used) = tnsr::decode_prefix(rest)?;
        parts.push(digest(&rest[..used]));
        rest = &rest[used..];
    }
    Ok(parts)
}
