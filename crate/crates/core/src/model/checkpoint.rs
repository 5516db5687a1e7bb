//! Checkpoint ("YNC1") and training-resume ("YNR1") files.
//!
//! ```text
//! magic (4 bytes) | descriptor_len: u32 LE | descriptor JSON (UTF-8)
//!                 | named YTF records, in the model's fixed tensor order
//! ```
//!
//! Resume files append the optimizer state as further records:
//! `adam.m.<param>` for every trainable parameter, then `adam.v.<param>`,
//! then a one-element `adam.t` holding the step count.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, Attention, YNetModel};
use crate::error::{Error, Result};
use crate::io::{read_json_block, read_magic, read_record, write_json_block, write_record};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"YNC1";
pub const RESUME_MAGIC: &[u8; 4] = b"YNR1";

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    arch: ArchConfig,
    #[serde(default)]
    attention: Attention,
    #[serde(default)]
    class_names: Vec<String>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: YNetModel,
    pub class_names: Vec<String>,
}

/// A loaded training-resume file.
#[derive(Debug, Clone)]
pub struct ResumeState {
    pub model: YNetModel,
    pub class_names: Vec<String>,
    pub adam: Adam,
    /// Caller-defined progress record (epoch, history, ...).
    pub meta: serde_json::Value,
}

/// Writes through a temporary sibling file and renames it into place.
fn write_atomically(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_model(w: &mut impl Write, model: &YNetModel) -> std::io::Result<()> {
    for (name, t) in model.named_tensors() {
        write_record(w, &name, t)?;
    }
    Ok(())
}

fn describe_mismatch(expected: &ArchConfig, found: &ArchConfig) -> String {
    let e = serde_json::to_value(expected).unwrap_or_default();
    let f = serde_json::to_value(found).unwrap_or_default();
    let mut diffs = Vec::new();
    if let (Some(e), Some(f)) = (e.as_object(), f.as_object()) {
        for (k, ev) in e {
            let fv = f.get(k).cloned().unwrap_or_default();
            if &fv != ev {
                diffs.push(format!("{k}: expected {ev}, file has {fv}"));
            }
        }
    }
    diffs.join("; ")
}

fn read_descriptor(r: &mut impl Read, magic: &[u8; 4]) -> Result<Descriptor> {
    read_magic(r, magic)?;
    let json = read_json_block(r)?;
    let desc: Descriptor =
        serde_json::from_str(&json).map_err(|e| Error::Format(format!("bad architecture descriptor: {e}")))?;
    desc.arch
        .validate()
        .map_err(|e| Error::Format(format!("descriptor holds an invalid architecture: {e}")))?;
    Ok(desc)
}

fn read_model(r: &mut impl Read, arch: ArchConfig) -> Result<YNetModel> {
    let mut model = YNetModel::new(arch, &mut Rng::new(0, 0))?;
    for (name, slot) in model.named_tensors_mut() {
        let (found, t) = read_record(r)?;
        if found != name {
            return Err(Error::ArchitectureMismatch(format!(
                "expected tensor {name}, file has {found}"
            )));
        }
        if t.shape() != slot.shape() {
            return Err(Error::ArchitectureMismatch(format!(
                "{name}: expected shape {:?}, file has {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
    }
    for block in model.branch1.blocks.iter().chain(&model.branch2.blocks) {
        if block.bn.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Format("negative running variance".into()));
        }
    }
    Ok(model)
}

fn expect_eof(r: &mut impl Read) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::ArchitectureMismatch(
            "file holds more tensors than the architecture defines".into(),
        )),
        Err(e) => Err(Error::Format(format!("reading past last record: {e}"))),
    }
}

impl YNetModel {
    pub fn save_checkpoint(&self, path: impl AsRef<Path>, class_names: &[String]) -> Result<()> {
        let desc = serde_json::to_string(&Descriptor {
            arch: self.arch.clone(),
            attention: self.attention,
            class_names: class_names.to_vec(),
            meta: serde_json::Value::Null,
        })
        .expect("descriptor serializes");
        write_atomically(path.as_ref(), |w| {
            w.write_all(CHECKPOINT_MAGIC)?;
            write_json_block(w, &desc)?;
            write_model(w, self)
        })
    }
}

impl Checkpoint {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_inner(path.as_ref(), None)
    }

    /// Loads and fails with [`Error::ArchitectureMismatch`] unless the
    /// file was written for exactly `arch`.
    pub fn load_expecting(path: impl AsRef<Path>, arch: &ArchConfig) -> Result<Self> {
        Self::load_inner(path.as_ref(), Some(arch))
    }

    fn load_inner(path: &Path, expected: Option<&ArchConfig>) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let desc = read_descriptor(&mut r, CHECKPOINT_MAGIC)?;
        if let Some(arch) = expected {
            if arch != &desc.arch {
                return Err(Error::ArchitectureMismatch(describe_mismatch(arch, &desc.arch)));
            }
        }
        let mut model = read_model(&mut r, desc.arch)?;
        model.attention = desc.attention;
        expect_eof(&mut r)?;
        Ok(Self {
            model,
            class_names: desc.class_names,
        })
    }
}

pub fn save_resume(
    path: impl AsRef<Path>,
    model: &YNetModel,
    class_names: &[String],
    adam: &Adam,
    meta: &serde_json::Value,
) -> Result<()> {
    let desc = serde_json::to_string(&Descriptor {
        arch: model.arch.clone(),
        attention: model.attention,
        class_names: class_names.to_vec(),
        meta: meta.clone(),
    })
    .expect("descriptor serializes");
    let trainable = model.trainable();
    let moments: Vec<_> = adam.moments().collect();
    if !moments.is_empty()
        && (moments.len() != trainable.len()
            || moments.iter().zip(&trainable).any(|((n, _, _), (p, _))| n != p))
    {
        return Err(Error::InvalidArgument(
            "optimizer state does not match the model's parameters".into(),
        ));
    }
    write_atomically(path.as_ref(), |w| {
        w.write_all(RESUME_MAGIC)?;
        write_json_block(w, &desc)?;
        write_model(w, model)?;
        for (name, t) in &trainable {
            let m = moments.iter().find(|(n, _, _)| n == name).map(|(_, m, _)| (*m).clone());
            write_record(w, &format!("adam.m.{name}"), &m.unwrap_or_else(|| Tensor::zeros(t.shape())))?;
        }
        for (name, t) in &trainable {
            let v = moments.iter().find(|(n, _, _)| n == name).map(|(_, _, v)| (*v).clone());
            write_record(w, &format!("adam.v.{name}"), &v.unwrap_or_else(|| Tensor::zeros(t.shape())))?;
        }
        write_record(w, "adam.t", &Tensor::from_vec(vec![adam.steps() as f64]))
    })
}

pub fn load_resume(path: impl AsRef<Path>, lr: f64) -> Result<ResumeState> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let desc = read_descriptor(&mut r, RESUME_MAGIC)?;
    let mut model = read_model(&mut r, desc.arch)?;
    model.attention = desc.attention;
    let names: Vec<(String, Vec<usize>)> = model
        .trainable()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let mut read_group = |prefix: &str| -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(names.len());
        for (name, shape) in &names {
            let (found, t) = read_record(&mut r)?;
            let want = format!("{prefix}.{name}");
            if found != want || t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("expected {want} {shape:?}, found {found} {:?}", t.shape())));
            }
            out.push(t);
        }
        Ok(out)
    };
    let ms = read_group("adam.m")?;
    let vs = read_group("adam.v")?;
    let (tname, t) = read_record(&mut r)?;
    if tname != "adam.t" || t.len() != 1 || !(t.item() >= 0.0) || t.item().fract() != 0.0 {
        return Err(Error::Format("missing or invalid adam.t record".into()));
    }
    expect_eof(&mut r)?;
    let mut adam = Adam::new(lr);
    let steps = t.item() as u64;
    if steps > 0 {
        let moments = names
            .into_iter()
            .zip(ms.into_iter().zip(vs))
            .map(|((n, _), (m, v))| (n, m, v))
            .collect();
        adam.restore(steps, moments)?;
    }
    Ok(ResumeState {
        model,
        class_names: desc.class_names,
        adam,
        meta: desc.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;

    fn model(k: usize) -> YNetModel {
        YNetModel::new(ArchConfig::tiny(k).with_input_size(16), &mut Rng::new(3, 0)).unwrap()
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ync");
        let mut m = model(3);
        m.branch1.blocks[2].bn.running_mean.data_mut()[1] = 0.123456789;
        let names = vec!["a".to_string(), "b".into(), "c".into()];
        m.save_checkpoint(&path, &names).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.class_names, names);
        assert_eq!(back.model.arch(), m.arch());
        for ((n1, t1), (n2, t2)) in m.named_tensors().into_iter().zip(back.model.named_tensors()) {
            assert_eq!(n1, n2);
            assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let x = Tensor::full(&[1, 16, 16, 3], 0.3);
        let mut rng = Rng::new(0, 0);
        assert_eq!(
            m.forward(&x, Mode::Eval, &mut rng).unwrap().probs,
            back.model.forward(&x, Mode::Eval, &mut rng).unwrap().probs
        );
    }

    #[test]
    fn attention_mode_is_persisted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ync");
        let mut m = model(3);
        m.attention = Attention::Constant(1.0);
        m.save_checkpoint(&path, &[]).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().model.attention, Attention::Constant(1.0));
        model(3).save_checkpoint(&path, &[]).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().model.attention, Attention::Learned);
    }

    #[test]
    fn resume_meta_floats_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ynr");
        let mut rng = Rng::new(8, 0);
        let values: Vec<f64> = (0..1000).map(|_| rng.normal() * 10f64.powi(rng.below(20) as i32 - 10)).collect();
        let meta = serde_json::json!({ "values": values });
        save_resume(&path, &model(3), &[], &Adam::new(1e-3), &meta).unwrap();
        let back = load_resume(&path, 1e-3).unwrap().meta;
        let got: Vec<f64> = serde_json::from_value(back["values"].clone()).unwrap();
        assert!(got.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn class_count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ync");
        model(3).save_checkpoint(&path, &[]).unwrap();
        let want = ArchConfig::tiny(30).with_input_size(16);
        match Checkpoint::load_expecting(&path, &want) {
            Err(Error::ArchitectureMismatch(msg)) => assert!(msg.contains("num_classes"), "{msg}"),
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ync");
        model(3).save_checkpoint(&path, &[]).unwrap();
        let bytes = fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'Z';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));

        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));

        let mut long = bytes.clone();
        long.extend_from_slice(&bytes[8..40]);
        fs::write(&path, &long).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn resume_round_trip_restores_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ynr");
        let mut m = model(3);
        let mut adam = Adam::new(1e-3);
        let x = Tensor::full(&[2, 16, 16, 3], 0.5).add(&Tensor::from_vec(vec![0.1, -0.2, 0.3])).unwrap();
        let mut labels = Tensor::zeros(&[2, 3]);
        labels.data_mut()[0] = 1.0;
        labels.data_mut()[5] = 1.0;
        m.train_step(&mut adam, &x, &labels, &mut Rng::new(1, 1)).unwrap();
        let meta = serde_json::json!({"epoch": 4});
        save_resume(&path, &m, &[], &adam, &meta).unwrap();
        let state = load_resume(&path, 1e-3).unwrap();
        assert_eq!(state.meta, meta);
        assert_eq!(state.adam, adam);
        assert_eq!(state.model.named_tensors().len(), m.named_tensors().len());

        let mut a = m.clone();
        let mut b = state.model;
        let mut adam_b = state.adam;
        let oa = a.train_step(&mut adam, &x, &labels, &mut Rng::new(1, 2)).unwrap();
        let ob = b.train_step(&mut adam_b, &x, &labels, &mut Rng::new(1, 2)).unwrap();
        assert_eq!(oa.loss.to_bits(), ob.loss.to_bits());
        for ((_, t1), (_, t2)) in a.named_tensors().into_iter().zip(b.named_tensors()) {
            assert_eq!(t1, t2);
        }
    }
}
