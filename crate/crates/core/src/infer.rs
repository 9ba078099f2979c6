//! Checkpoint-driven inference: translate single images or directories.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{load_domain_dir, save_image, DataError, Domain};
use crate::networks::{decode, encode, generate, translate, BoundNet};
use crate::tensor::{Tape, Tensor};
use crate::training::{Model, TrainError, TrainResult};

/// Full translation path for one `3 x S x S` image (no batch dimension).
/// Proposed model: decode(translate(encode(x))); baseline: its A-to-B
/// generator. The same path serves domain-B inputs, which is what the
/// pass-through property is about.
pub fn translate_image(model: &Model, image: &Tensor) -> TrainResult<Tensor> {
    let s = image.shape();
    assert_eq!(s.len(), 3, "translate_image wants 3 x S x S, got {s:?}");
    let batched = Tensor::new(vec![1, s[0], s[1], s[2]], image.data().to_vec())?;
    let mut tape = Tape::new();
    let out = match model {
        Model::Proposed(m) => {
            let enc = BoundNet::bind(&mut tape, &m.encoder);
            let tr = BoundNet::bind(&mut tape, &m.translator);
            let dec = BoundNet::bind(&mut tape, &m.decoder);
            let e = encode(&mut tape, &enc, &batched)?;
            let t = translate(&mut tape, &tr, &e)?;
            decode(&mut tape, &dec, &t)?
        }
        Model::Baseline(m) => {
            let gen = BoundNet::bind(&mut tape, &m.gen_a2b);
            generate(&mut tape, &gen, &batched)?
        }
    };
    Ok(Tensor::new(vec![s[0], s[1], s[2]], out.data().to_vec())?)
}

#[derive(Debug, Clone)]
pub struct TranslateOutcome {
    pub count: usize,
    /// Mean over images of the per-image mean |output - input|.
    pub mean_l1_change: f64,
    pub outputs: Vec<PathBuf>,
}

/// Translate every PPM in `input` and write the results to `output`,
/// preserving file stems with `suffix` appended.
pub fn translate_dir(
    model: &Model,
    input: &Path,
    output: &Path,
    suffix: &str,
) -> TrainResult<TranslateOutcome> {
    let records = load_domain_dir(input, Domain::A)?;
    fs::create_dir_all(output).map_err(|source| {
        TrainError::Data(DataError::Io {
            path: output.to_path_buf(),
            source,
        })
    })?;
    let mut total_l1 = 0.0;
    let mut outputs = Vec::with_capacity(records.len());
    for rec in &records {
        let out = translate_image(model, &rec.pixels)?;
        let l1: f64 = rec
            .pixels
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / rec.pixels.len() as f64;
        total_l1 += l1;
        let stem = rec
            .source
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        let path = output.join(format!("{stem}{suffix}.ppm"));
        save_image(&out, &path)?;
        outputs.push(path);
    }
    Ok(TranslateOutcome {
        count: records.len(),
        mean_l1_change: total_l1 / records.len() as f64,
        outputs,
    })
}
