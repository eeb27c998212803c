use std::fs;
use std::path::Path;

use mpsl_tensor::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Partition, SyntheticSpec};
use crate::error::{io_err, Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    spec: SyntheticSpec,
    seed: u64,
    labels: Vec<usize>,
    train: Vec<usize>,
    test: Vec<usize>,
    files: Vec<(String, String)>,
}

fn write_tensor(dir: &Path, name: &str, dims: Vec<usize>, data: Vec<f64>) -> Result<String> {
    let file = format!("{name}.tensor");
    let t = Tensor::new(dims, data, DType::F64)?;
    let path = dir.join(&file);
    fs::write(&path, t.to_bytes()).map_err(io_err(&path))?;
    Ok(file)
}

fn read_tensor(dir: &Path, file: &str) -> Result<Tensor> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let (t, used) = Tensor::from_bytes(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if used != bytes.len() {
        return Err(Error::Data(format!("{}: trailing bytes", path.display())));
    }
    Ok(t)
}

/// Writes `manifest.json` plus one tensor file per modality.
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let s = &ds.spec;
    let n = ds.len();
    let mut files = Vec::new();
    if let Some(v) = &ds.vision {
        let dims = vec![n, s.image_size, s.image_size, s.image_channels];
        files.push(("vision".into(), write_tensor(dir, "vision", dims, v.clone())?));
    }
    if let Some(a) = &ds.audio {
        files.push(("audio".into(), write_tensor(dir, "audio", vec![n, s.audio_len], a.clone())?));
    }
    if let Some(t) = &ds.text {
        let data = t.iter().map(|&x| x as f64).collect();
        files.push(("text".into(), write_tensor(dir, "text", vec![n, s.text_len], data)?));
    }
    let manifest = Manifest {
        spec: s.clone(),
        seed: s.seed,
        labels: ds.labels.clone(),
        train: ds.train.clone(),
        test: ds.test.clone(),
        files,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io_err(&path))
}

pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut ds = Dataset {
        spec: m.spec,
        labels: m.labels,
        vision: None,
        audio: None,
        text: None,
        train: m.train,
        test: m.test,
    };
    for (modality, file) in &m.files {
        let t = read_tensor(dir, file)?;
        match modality.as_str() {
            "vision" => ds.vision = Some(t.into_data()),
            "audio" => ds.audio = Some(t.into_data()),
            "text" => ds.text = Some(t.data().iter().map(|&x| x as usize).collect()),
            other => return Err(Error::Data(format!("unknown modality file `{other}` in manifest"))),
        }
    }
    Ok(ds)
}

/// CSV with columns `sample_index, client_id, label`; `samples[i]` is the
/// dataset index of partition position `i` and `labels` is indexed by
/// dataset index.
pub fn write_partition_csv(path: &Path, partition: &Partition, samples: &[usize], labels: &[usize]) -> Result<()> {
    if samples.len() != partition.assignment.len() || samples.iter().any(|&i| i >= labels.len()) {
        return Err(Error::Data(format!(
            "partition of {} positions does not match {} samples over {} labels",
            partition.assignment.len(),
            samples.len(),
            labels.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["sample_index", "client_id", "label"]).map_err(csv_err)?;
    for (pos, &client) in partition.assignment.iter().enumerate() {
        let i = samples[pos];
        w.write_record([i.to_string(), client.to_string(), labels[i].to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}
