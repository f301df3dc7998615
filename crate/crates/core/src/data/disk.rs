//! Dataset directories: `meta.json` plus one `img_%05d.bin` and one
//! `lab_%05d.bin` per sample, each holding a single container entry.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::{Dataset, LabelMap, Sample, SynthSpec};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{self, DType};
use crate::tensor::Tensor;

pub(crate) fn label_tensor(l: &LabelMap) -> Result<Tensor> {
    Tensor::new(vec![l.n, l.h, l.w], l.labels.iter().map(|&v| v as f64).collect())
}

pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&dataset.spec)?)?;
    for (i, s) in dataset.samples.iter().enumerate() {
        let mut w = BufWriter::new(File::create(dir.join(format!("img_{i:05}.bin")))?);
        checkpoint::write_entry(&mut w, &format!("img_{i:05}"), &s.image, DType::F64)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(format!("lab_{i:05}.bin")))?);
        checkpoint::write_entry(&mut w, &format!("lab_{i:05}"), &label_tensor(&s.label)?, DType::F32)?;
        w.flush()?;
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let spec: SynthSpec = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let mut samples = Vec::with_capacity(spec.train + spec.val);
    for i in 0..spec.train + spec.val {
        let (_, image, _) = checkpoint::read_entry(&mut BufReader::new(File::open(dir.join(format!("img_{i:05}.bin")))?))?;
        let (_, lab, _) = checkpoint::read_entry(&mut BufReader::new(File::open(dir.join(format!("lab_{i:05}.bin")))?))?;
        let [n, h, w] = lab.shape()[..] else {
            return Err(Error::Checkpoint(format!("lab_{i:05}: expected rank 3")));
        };
        let labels = lab
            .data()
            .iter()
            .map(|&v| {
                if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                    Err(Error::Checkpoint(format!("lab_{i:05}: non-integer label {v}")))
                } else {
                    Ok(v as u32)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample { image, label: LabelMap::new(n, h, w, spec.classes, None, labels)? });
    }
    Ok(Dataset { spec, samples })
}
