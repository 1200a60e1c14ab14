//! Helpers shared by the integration tests: an independent reader of the
//! checkpoint framing and a catalogue of corrupted files.

#![allow(dead_code)]

use chela::ChelaError;
use serde_json::Value;

pub const MAGIC: &[u8] = b"CHELA1";

/// Manifest JSON and payload bytes, parsed without the library.
pub fn split(bytes: &[u8]) -> (Value, &[u8]) {
    assert_eq!(&bytes[..6], MAGIC);
    let n = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let manifest = serde_json::from_slice(&bytes[14..14 + n]).unwrap();
    (manifest, &bytes[14 + n..])
}

/// Reassembles a file from an edited manifest and a payload.
pub fn join(manifest: &Value, payload: &[u8]) -> Vec<u8> {
    let header = serde_json::to_vec(manifest).unwrap();
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    out
}

fn edit(bytes: &[u8], f: impl FnOnce(&mut Value)) -> Vec<u8> {
    let (mut m, payload) = split(bytes);
    f(&mut m);
    join(&m, payload)
}

/// Decoded `(name, shape, values)` of every stored tensor.
pub fn tensors(bytes: &[u8]) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let (m, payload) = split(bytes);
    m["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| {
            let off = e["offset"].as_u64().unwrap() as usize;
            let nb = e["nbytes"].as_u64().unwrap() as usize;
            let shape = e["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap() as usize).collect();
            let vals = payload[off..off + nb]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            (e["name"].as_str().unwrap().to_string(), shape, vals)
        })
        .collect()
}

pub type Matcher = fn(&ChelaError) -> bool;

/// Damaged variants of a valid checkpoint, each with the error it must
/// produce.
pub fn corruptions(valid: &[u8]) -> Vec<(&'static str, Vec<u8>, Matcher)> {
    let mut cases: Vec<(&'static str, Vec<u8>, Matcher)> = Vec::new();

    let mut v = valid.to_vec();
    v[0] = b'X';
    cases.push(("bad magic", v, |e| matches!(e, ChelaError::BadMagic)));
    cases.push(("empty file", Vec::new(), |e| matches!(e, ChelaError::BadMagic)));
    cases.push(("cut inside length field", valid[..10].to_vec(), |e| {
        matches!(e, ChelaError::Truncated { .. })
    }));
    cases.push(("cut inside manifest", valid[..40].to_vec(), |e| matches!(e, ChelaError::Truncated { .. })));
    cases.push(("cut inside payload", valid[..valid.len() - 3].to_vec(), |e| {
        matches!(e, ChelaError::Truncated { .. })
    }));

    let mut v = valid.to_vec();
    v[6..14].copy_from_slice(&u64::MAX.to_le_bytes());
    cases.push(("huge manifest length", v, |e| matches!(e, ChelaError::Truncated { .. })));

    let mut v = valid.to_vec();
    v.extend_from_slice(&[0, 0, 0, 0]);
    cases.push(("trailing bytes", v, |e| matches!(e, ChelaError::Manifest(_))));

    let mut v = valid.to_vec();
    v[14] = b'#';
    cases.push(("manifest not json", v, |e| matches!(e, ChelaError::Manifest(_))));

    cases.push((
        "unknown manifest key",
        edit(valid, |m| {
            m["extra"] = Value::from(1);
        }),
        |e| matches!(e, ChelaError::Manifest(_)),
    ));
    cases.push((
        "invalid config",
        edit(valid, |m| {
            m["config"]["d_model"] = Value::from(0);
        }),
        |e| matches!(e, ChelaError::Manifest(_)),
    ));
    cases.push((
        "dtype",
        edit(valid, |m| {
            m["tensors"][0]["dtype"] = Value::from("f16");
        }),
        |e| matches!(e, ChelaError::Manifest(_)),
    ));
    cases.push((
        "missing tensor",
        edit(valid, |m| {
            m["tensors"][0]["name"] = Value::from("renamed");
        }),
        |e| matches!(e, ChelaError::Manifest(_)),
    ));
    cases.push((
        "shifted offset",
        edit(valid, |m| {
            let o = m["tensors"][1]["offset"].as_u64().unwrap();
            m["tensors"][1]["offset"] = Value::from(o + 4);
        }),
        |e| matches!(e, ChelaError::OffsetMismatch { .. }),
    ));
    cases.push((
        "nbytes disagrees with shape",
        edit(valid, |m| {
            let n = m["tensors"][0]["nbytes"].as_u64().unwrap();
            m["tensors"][0]["nbytes"] = Value::from(n - 4);
        }),
        |e| matches!(e, ChelaError::OffsetMismatch { .. }),
    ));
    cases.push((
        "overflowing shape",
        edit(valid, |m| {
            m["tensors"][0]["shape"] = Value::from(vec![u64::MAX, 2]);
        }),
        |e| matches!(e, ChelaError::OffsetMismatch { .. }),
    ));
    cases.push((
        "huge nbytes",
        edit(valid, |m| {
            let last = m["tensors"].as_array().unwrap().len() - 1;
            m["tensors"][last]["nbytes"] = Value::from(u64::MAX - 3);
        }),
        |e| matches!(e, ChelaError::OffsetMismatch { .. }),
    ));
    cases.push((
        "transposed shape",
        edit(valid, |m| {
            let s = m["tensors"][0]["shape"].as_array().unwrap().clone();
            m["tensors"][0]["shape"] = Value::from(vec![s[1].clone(), s[0].clone()]);
        }),
        |e| matches!(e, ChelaError::TensorShape { .. }),
    ));

    let (m, payload) = split(valid);
    let mut p = payload.to_vec();
    p[..4].copy_from_slice(&f32::NAN.to_le_bytes());
    cases.push(("nan in payload", join(&m, &p), |e| matches!(e, ChelaError::NonFinite(_))));
    cases
}
