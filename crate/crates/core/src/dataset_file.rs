//! Flat binary dataset container.
//!
//! All integers are little-endian `u32`.
//!
//! ```text
//! "FPRD"  version  K  (train_k  test_k) × K  C_in  H  W
//! then for each client k in order:
//!     train images  f32 × train_k·C_in·H·W
//!     train labels  u8  × train_k
//!     test images   f32 × test_k·C_in·H·W
//!     test labels   u8  × test_k
//! ```

use std::fs;
use std::path::Path;

use crate::data::{ClientData, LabeledSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FPRD";
pub const VERSION: u32 = 1;

pub fn encode(clients: &[ClientData]) -> Result<Vec<u8>> {
    let dims = clients
        .iter()
        .flat_map(|c| c.train.iter().chain(&c.test))
        .map(|s| s.image.shape().to_vec())
        .next()
        .ok_or_else(|| Error::format("dataset", "no samples to encode"))?;
    let [c, h, w] = dims[..] else {
        return Err(Error::format("dataset", format!("sample shape {dims:?} is not C×H×W")));
    };
    let u32_of = |v: usize, field: &str| {
        u32::try_from(v).map_err(|_| Error::format(field.to_string(), format!("{v} exceeds u32")))
    };

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(clients.len(), "clients")?.to_le_bytes());
    for client in clients {
        out.extend_from_slice(&u32_of(client.train.len(), "train count")?.to_le_bytes());
        out.extend_from_slice(&u32_of(client.test.len(), "test count")?.to_le_bytes());
    }
    for d in [c, h, w] {
        out.extend_from_slice(&u32_of(d, "image dims")?.to_le_bytes());
    }
    for client in clients {
        for split in [&client.train, &client.test] {
            for s in split.iter() {
                if s.image.shape() != dims.as_slice() {
                    return Err(Error::format("image dims", "samples differ in shape"));
                }
                for v in s.image.data() {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            out.extend(split.iter().map(|s| s.label));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(field.to_string(), "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<ClientData>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "expected \"FPRD\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let k = r.u32("clients")? as usize;
    // each client needs at least its two counts
    if k.checked_mul(8).is_none_or(|n| n > r.remaining()) {
        return Err(Error::format("clients", format!("{k} clients exceed file size")));
    }
    let mut counts = Vec::with_capacity(k);
    for _ in 0..k {
        counts.push((r.u32("train count")? as usize, r.u32("test count")? as usize));
    }
    let (c, h, w) = (r.u32("image dims")? as usize, r.u32("image dims")? as usize, r.u32("image dims")? as usize);
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::format("image dims", "zero dimension"));
    }

    // validate the declared body size before allocating anything
    let per_sample = c
        .checked_mul(h)
        .and_then(|p| p.checked_mul(w))
        .and_then(|p| p.checked_mul(4))
        .and_then(|p| p.checked_add(1))
        .ok_or_else(|| Error::format("image dims", "overflow"))?;
    let total_samples = counts
        .iter()
        .try_fold(0usize, |acc, (a, b)| acc.checked_add(*a)?.checked_add(*b))
        .ok_or_else(|| Error::format("counts", "overflow"))?;
    let body = total_samples
        .checked_mul(per_sample)
        .ok_or_else(|| Error::format("counts", "overflow"))?;
    if body != r.remaining() {
        return Err(Error::format(
            "body",
            format!("expected {body} bytes, found {}", r.remaining()),
        ));
    }

    let pixels = c * h * w;
    let mut clients = Vec::with_capacity(k);
    for (client_id, (n_train, n_test)) in counts.into_iter().enumerate() {
        let mut split = |n: usize, field: &str| -> Result<Vec<LabeledSample>> {
            let raw = r.take(n * pixels * 4, field)?;
            let labels = r.take(n, "labels")?;
            raw.chunks_exact(pixels * 4)
                .zip(labels)
                .map(|(img, &label)| {
                    if label > 1 {
                        return Err(Error::format("labels", format!("label {label} not in {{0, 1}}")));
                    }
                    let data: Vec<f64> = img
                        .chunks_exact(4)
                        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                        .collect();
                    let image = Tensor::new(vec![c, h, w], data)
                        .map_err(|e| Error::format(field.to_string(), e.to_string()))?;
                    Ok(LabeledSample {
                        image,
                        label,
                        client_id,
                    })
                })
                .collect()
        };
        let train = split(n_train, "train images")?;
        let test = split(n_test, "test images")?;
        clients.push(ClientData { train, test });
    }
    Ok(clients)
}

pub fn write(path: &Path, clients: &[ClientData]) -> Result<()> {
    fs::write(path, encode(clients)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<ClientData>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            clients: 2,
            samples_per_client: 10,
            image_size: (1, 4, 4),
            seed: 9,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let data = generate(&spec()).unwrap();
        let bytes = encode(&data).unwrap();
        assert_eq!(&bytes[..4], b"FPRD");
        assert_eq!(decode(&bytes).unwrap(), data);
        assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let data = generate(&spec()).unwrap();
        let bytes = encode(&data).unwrap();
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        // magic, version, K, (8, 2) × 2, 1, 4, 4
        assert_eq!(
            (1..=9).map(word).collect::<Vec<_>>(),
            vec![1, 2, 8, 2, 8, 2, 1, 4, 4]
        );
        assert_eq!(bytes.len(), 40 + 20 * (16 * 4 + 1));
    }

    #[test]
    fn corruption_names_the_field() {
        let bytes = encode(&generate(&spec()).unwrap()).unwrap();
        let field = |b: &[u8]| match decode(b) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(field(b"NOPE"), "magic");
        let mut v = bytes.clone();
        v[4] = 2;
        assert_eq!(field(&v), "version");
        assert_eq!(field(&bytes[..bytes.len() - 1]), "body");
        let mut v = bytes.clone();
        let first_label = 40 + 8 * 64;
        v[first_label] = 7;
        assert_eq!(field(&v), "labels");
        let mut v = bytes.clone();
        v[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert_eq!(field(&v), "clients");
        let mut v = bytes;
        v[40..44].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(field(&v), "train images");
    }
}
