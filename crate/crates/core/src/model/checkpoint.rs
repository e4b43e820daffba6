//! Checkpoint files: a text header naming every tensor, then the raw
//! little-endian `f64` buffer.
//!
//! ```text
//! #pi2i-checkpoint v1
//! vocab_hash <hex>
//! vocab items=<n> users=<n> sellers=<n> brands=<n>
//! config <key> <value>
//! tensor <name> <rows> <cols>
//! #data <bytes>
//! <bytes>
//! ```

use std::path::Path;

use super::{Layout, ModelParams, TrainConfig, Vocabulary};
use crate::error::{Error, Result};

const MAGIC: &str = "#pi2i-checkpoint v1";

pub fn save_params(path: &Path, params: &ModelParams, cfg: &TrainConfig) -> Result<()> {
    let v = params.layout.vocabulary();
    let hash = if params.vocab_hash.is_empty() { "-" } else { &params.vocab_hash };
    let mut header = format!(
        "{MAGIC}\nvocab_hash {hash}\nvocab items={} users={} sellers={} brands={}\n",
        v.items, v.users, v.sellers, v.brands
    );
    for (k, val) in cfg.to_pairs() {
        header.push_str(&format!("config {k} {val}\n"));
    }
    for (name, t) in params.layout.named() {
        header.push_str(&format!("tensor {name} {} {}\n", t.rows, t.cols));
    }
    header.push_str(&format!("#data {}\n", params.data.len() * 8));
    let mut bytes = header.into_bytes();
    bytes.reserve(params.data.len() * 8);
    for x in &params.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and the config it was trained with. When `expected_hash`
/// is given the stored vocabulary hash must match it.
pub fn load_params(path: &Path, expected_hash: Option<&str>) -> Result<(ModelParams, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut line_no = 0;
    let mut next_line = |pos: &mut usize| -> Result<String> {
        line_no += 1;
        let rest = &bytes[*pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, line_no, "truncated header"))?;
        *pos += end + 1;
        String::from_utf8(rest[..end].to_vec()).map_err(|_| Error::format(path, line_no, "header is not UTF-8"))
    };

    let magic = next_line(&mut pos)?;
    if magic != MAGIC {
        return Err(Error::Version(format!("{}: expected '{MAGIC}', found '{magic}'", path.display())));
    }
    let mut hash = String::new();
    let mut vocab = Vocabulary::default();
    let mut cfg = TrainConfig::default();
    let mut tensors: Vec<(String, usize, usize)> = Vec::new();
    let data_len;
    let mut n = 1;
    loop {
        let line = next_line(&mut pos)?;
        n += 1;
        let fields: Vec<&str> = line.split(' ').collect();
        let bad = |msg: &str| Error::format(path, n, format!("{msg}: '{line}'"));
        match fields[0] {
            "vocab_hash" if fields.len() == 2 => {
                hash = if fields[1] == "-" { String::new() } else { fields[1].to_string() };
            }
            "vocab" => {
                for kv in &fields[1..] {
                    let (k, v) = kv.split_once('=').ok_or_else(|| bad("bad vocab entry"))?;
                    let v: usize = v.parse().map_err(|_| bad("bad vocab size"))?;
                    match k {
                        "items" => vocab.items = v,
                        "users" => vocab.users = v,
                        "sellers" => vocab.sellers = v,
                        "brands" => vocab.brands = v,
                        _ => return Err(bad("unknown vocab kind")),
                    }
                }
            }
            "config" if fields.len() >= 2 => {
                let value = fields[2..].join(" ");
                if !cfg.set(fields[1], &value)? {
                    return Err(bad("unknown config key"));
                }
            }
            "tensor" if fields.len() == 4 => {
                let rows = fields[2].parse().map_err(|_| bad("bad rows"))?;
                let cols = fields[3].parse().map_err(|_| bad("bad cols"))?;
                tensors.push((fields[1].to_string(), rows, cols));
            }
            "#data" if fields.len() == 2 => {
                data_len = fields[1].parse::<usize>().map_err(|_| bad("bad data length"))?;
                break;
            }
            _ => return Err(bad("unexpected header line")),
        }
    }

    if let Some(expected) = expected_hash {
        if expected != hash {
            return Err(Error::VocabMismatch {
                checkpoint: hash,
                data: expected.to_string(),
            });
        }
    }
    let layout = Layout::new(vocab, &cfg);
    let expected: Vec<(String, usize, usize)> = layout.named().into_iter().map(|(name, t)| (name, t.rows, t.cols)).collect();
    if expected != tensors {
        return Err(Error::Shape(format!("{}: tensor list does not match the stored config", path.display())));
    }
    let raw = &bytes[pos..];
    if data_len != layout.total * 8 || raw.len() != data_len {
        return Err(Error::Shape(format!(
            "{}: expected {} data bytes, header says {data_len}, file has {}",
            path.display(),
            layout.total * 8,
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((ModelParams { layout, data, vocab_hash: hash }, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            embedding_dim: 3,
            heads: 2,
            key_dim: 2,
            out_hidden: vec![4, 3],
            ..TrainConfig::default()
        }
    }

    fn params() -> ModelParams {
        ModelParams::init(Vocabulary { items: 6, users: 2, sellers: 1, brands: 3 }, &cfg(), 11).with_vocab_hash("abc123")
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut p = params();
        p.data[3] = -0.0;
        p.data[4] = f64::MIN_POSITIVE / 4.0;
        save_params(&path, &p, &cfg()).unwrap();
        let (back, back_cfg) = load_params(&path, Some("abc123")).unwrap();
        assert_eq!(back_cfg, cfg());
        assert_eq!(back.layout, p.layout);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.data), bits(&p.data));
        assert_eq!(back.vocab_hash, "abc123");
    }

    #[test]
    fn vocab_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_params(&path, &params(), &cfg()).unwrap();
        assert!(matches!(load_params(&path, Some("other")), Err(Error::VocabMismatch { .. })));
        assert!(load_params(&path, None).is_ok());
    }

    #[test]
    fn truncated_or_foreign_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_params(&path, &params(), &cfg()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_params(&path, None), Err(Error::Shape(_))));
        std::fs::write(&path, b"#pi2i-checkpoint v9\n").unwrap();
        assert!(matches!(load_params(&path, None), Err(Error::Version(_))));
    }
}
