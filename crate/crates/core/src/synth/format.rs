//! On-disk dataset directory.
//!
//! ```text
//! meta.txt                 key=value lines
//! {split}.features.f32     per instance, per region, d_v values
//! {split}.questions.u32    per instance: question type, then question_len token ids
//! {split}.scores.f32       per instance: |answers| soft scores
//! {split}.aux.u32          per instance: N region classes, then the salient index
//! ```
//!
//! Every binary file starts with the 8-byte magic `VPLDS001`; all numbers are
//! little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, InstanceRecord, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VPLDS001";
pub const FORMAT_VERSION: u32 = 1;

fn file(dir: &Path, split: Split, kind: &str) -> PathBuf {
    dir.join(format!("{}.{kind}", split.name()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = &ds.config;
    let meta = format!(
        "format_version={FORMAT_VERSION}\n{}token_vocab={}\nnum_answers={}\nanswers={}\n",
        cfg.to_kv_lines(),
        cfg.token_vocab(),
        cfg.num_answers(),
        ds.answers.join(",")
    );
    write_file(&dir.join("meta.txt"), meta.as_bytes())?;

    for split in [Split::Train, Split::Test] {
        let records = ds.split(split);
        let mut features = MAGIC.to_vec();
        let mut questions = MAGIC.to_vec();
        let mut scores = MAGIC.to_vec();
        let mut aux = MAGIC.to_vec();
        for r in records {
            for n in 0..cfg.regions_per_image {
                for v in r.features.column(n) {
                    features.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            questions.extend_from_slice(&r.question_type.to_le_bytes());
            for t in &r.tokens {
                questions.extend_from_slice(&t.to_le_bytes());
            }
            for &s in &r.scores {
                scores.extend_from_slice(&(s as f32).to_le_bytes());
            }
            for c in &r.region_classes {
                aux.extend_from_slice(&c.to_le_bytes());
            }
            aux.extend_from_slice(&r.salient_region.to_le_bytes());
        }
        write_file(&file(dir, split, "features.f32"), &features)?;
        write_file(&file(dir, split, "questions.u32"), &questions)?;
        write_file(&file(dir, split, "scores.f32"), &scores)?;
        write_file(&file(dir, split, "aux.u32"), &aux)?;
    }
    Ok(())
}

fn read_meta(path: &Path) -> Result<(SynthConfig, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kv = KvMap::parse(&text).map_err(|(off, msg)| Error::format(path, off, msg))?;
    let bad = |off: u64, msg: String| Error::format(path, off, msg);

    let (version, off) = kv
        .take_raw("format_version")
        .ok_or_else(|| bad(0, "missing format_version".into()))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(bad(off, format!("unsupported format_version {version}")));
    }
    let derived: Vec<(String, u64)> = ["token_vocab", "num_answers", "answers"]
        .iter()
        .map(|k| kv.take_raw(k).ok_or_else(|| bad(0, format!("missing {k}"))))
        .collect::<Result<_>>()?;

    let mut cfg = SynthConfig::default();
    let required = [
        "num_region_classes",
        "num_question_types",
        "answers_per_type",
        "regions_per_image",
        "feature_dim",
        "question_dim",
        "question_len",
        "filler_tokens",
        "train_size",
        "test_size",
        "train_skew",
        "annotators",
        "annotator_accuracy",
        "noise_scale",
        "seed",
    ];
    let mut probe = kv.clone();
    for key in required {
        if probe.take_raw(key).is_none() {
            return Err(bad(0, format!("missing {key}")));
        }
    }
    cfg.read_kv(&mut kv).map_err(|e| bad(0, e.to_string()))?;
    kv.finish().map_err(|e| bad(0, e.to_string()))?;
    cfg.validate().map_err(|e| bad(0, e.to_string()))?;

    let (vocab, voff) = &derived[0];
    if vocab.parse::<usize>().ok() != Some(cfg.token_vocab()) {
        return Err(bad(*voff, format!("token_vocab {vocab} disagrees with dimensions ({})", cfg.token_vocab())));
    }
    let (num, noff) = &derived[1];
    if num.parse::<usize>().ok() != Some(cfg.num_answers()) {
        return Err(bad(*noff, format!("num_answers {num} disagrees with Q*A ({})", cfg.num_answers())));
    }
    let (names, aoff) = &derived[2];
    let answers: Vec<String> = names.split(',').map(str::to_string).collect();
    if answers.len() != cfg.num_answers() {
        return Err(bad(
            *aoff,
            format!("{} answer tokens listed, expected {}", answers.len(), cfg.num_answers()),
        ));
    }
    Ok((cfg, answers))
}

/// Reads a binary file, checks its magic and exact length, and returns the payload.
fn read_payload(path: &Path, expected_payload: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("file shorter than the {}-byte magic", MAGIC.len()),
        ));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format(path, 0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..8]))));
    }
    let expected = MAGIC.len() + expected_payload;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok(bytes[8..].to_vec())
}

fn words(payload: &[u8]) -> impl Iterator<Item = [u8; 4]> + '_ {
    payload.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]])
}

fn read_split(dir: &Path, cfg: &SynthConfig, split: Split) -> Result<Vec<InstanceRecord>> {
    let count = match split {
        Split::Train => cfg.train_size,
        Split::Test => cfg.test_size,
    };
    let (n, dv, len, na) = (cfg.regions_per_image, cfg.feature_dim, cfg.question_len, cfg.num_answers());

    let fpath = file(dir, split, "features.f32");
    let qpath = file(dir, split, "questions.u32");
    let spath = file(dir, split, "scores.f32");
    let apath = file(dir, split, "aux.u32");
    let features: Vec<f32> = words(&read_payload(&fpath, count * n * dv * 4)?).map(f32::from_le_bytes).collect();
    let questions: Vec<u32> = words(&read_payload(&qpath, count * (1 + len) * 4)?).map(u32::from_le_bytes).collect();
    let scores: Vec<f32> = words(&read_payload(&spath, count * na * 4)?).map(f32::from_le_bytes).collect();
    let aux: Vec<u32> = words(&read_payload(&apath, count * (n + 1) * 4)?).map(u32::from_le_bytes).collect();

    let at = |word: usize| (MAGIC.len() + 4 * word) as u64;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let mut t = Tensor::zeros(&[dv, n]);
        for r in 0..n {
            for d in 0..dv {
                let w = (i * n + r) * dv + d;
                let v = features[w];
                if !v.is_finite() {
                    return Err(Error::format(&fpath, at(w), "non-finite feature"));
                }
                t.set2(d, r, v as f64);
            }
        }
        let qbase = i * (1 + len);
        let qtype = questions[qbase];
        if qtype as usize >= cfg.num_question_types {
            return Err(Error::format(&qpath, at(qbase), format!("question type {qtype} out of range")));
        }
        let tokens = questions[qbase + 1..qbase + 1 + len].to_vec();
        if let Some(pos) = tokens.iter().position(|&t| t as usize >= cfg.token_vocab()) {
            return Err(Error::format(&qpath, at(qbase + 1 + pos), "token id out of vocabulary"));
        }
        let sbase = i * na;
        let row: Vec<f64> = scores[sbase..sbase + na].iter().map(|&s| s as f64).collect();
        if let Some(pos) = row.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::format(&spath, at(sbase + pos), "soft score outside [0, 1]"));
        }
        let abase = i * (n + 1);
        let classes = aux[abase..abase + n].to_vec();
        if let Some(pos) = classes.iter().position(|&c| c as usize >= cfg.num_region_classes) {
            return Err(Error::format(&apath, at(abase + pos), "region class out of range"));
        }
        let salient = aux[abase + n];
        if salient as usize >= n {
            return Err(Error::format(&apath, at(abase + n), "salient index out of range"));
        }
        records.push(InstanceRecord {
            features: t,
            region_classes: classes,
            question_type: qtype,
            tokens,
            scores: row,
            salient_region: salient,
        });
    }
    Ok(records)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let (config, answers) = read_meta(&dir.join("meta.txt"))?;
    let train = read_split(dir, &config, Split::Train)?;
    let test = read_split(dir, &config, Split::Test)?;
    Ok(Dataset {
        config,
        answers,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::super::generate;
    use super::*;

    fn tiny() -> Dataset {
        generate(&SynthConfig {
            train_size: 40,
            test_size: 10,
            seed: 9,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        let p = dir.path().join("train.scores.f32");
        let mut bytes = fs::read(&p).unwrap();
        bytes[..8].copy_from_slice(b"NOTMAGIC");
        fs::write(&p, bytes).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Format { offset, message, .. }) => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_cites_lengths() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        let p = dir.path().join("test.features.f32");
        let bytes = fs::read(&p).unwrap();
        let full = bytes.len();
        fs::write(&p, &bytes[..full - 4]).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Format { offset, message, .. }) => {
                assert_eq!(offset, (full - 4) as u64);
                assert!(message.contains(&format!("expected {full} bytes, found {}", full - 4)), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn header_dimension_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        let p = dir.path().join("meta.txt");
        let text = fs::read_to_string(&p).unwrap().replace("feature_dim=32", "feature_dim=31");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn malformed_header_line() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        let p = dir.path().join("meta.txt");
        fs::write(&p, "format_version=1\ngarbage line\n").unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 17),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
