use std::io::Write;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::world::LabeledSet;

/// Writes one CSV row per sample: set tag, the `;`-joined class ids carrying
/// label weight, then the penultimate features `f0..f{d-1}`.
pub fn export_embeddings<W: Write>(extractor: &ModelParams, sets: &[(&str, &LabeledSet)], w: W) -> Result<usize> {
    let d = extractor.spec.d_feat;
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["set".to_string(), "classes".to_string()];
    header.extend((0..d).map(|k| format!("f{k}")));
    out.write_record(&header).map_err(csv_err)?;
    let mut rows = 0;
    for (tag, set) in sets {
        let feats = extractor.extract_features(&set.images)?;
        for (i, label) in set.labels.iter().enumerate() {
            let classes: Vec<String> = label.entries().iter().map(|(c, _)| c.to_string()).collect();
            let mut rec = vec![tag.to_string(), classes.join(";")];
            rec.extend(feats.row(i).iter().map(|v| v.to_string()));
            out.write_record(&rec).map_err(csv_err)?;
            rows += 1;
        }
    }
    out.flush()?;
    Ok(rows)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::numerics::Tensor;
    use crate::world::{Provenance, SoftLabel};

    #[test]
    fn rows_and_schema() {
        let spec = ModelSpec { input: [1, 4, 4], conv_channels: vec![2], d_feat: 3, num_classes: 3, init_seed: 4 };
        let model = ModelParams::init(&spec).unwrap();
        let images = Tensor::from_fn(&[2, 1, 4, 4], |k| (k % 16) as f64 / 16.0);
        let a = LabeledSet::new(images.clone(), vec![SoftLabel::hard(0), SoftLabel::hard(2)], Provenance::Real).unwrap();
        let mixed = SoftLabel::mix(&SoftLabel::hard(1), &SoftLabel::hard(2), 0.4);
        let b = LabeledSet::new(images, vec![mixed, SoftLabel::hard(2)], Provenance::SyntheticMixup).unwrap();
        let mut buf = Vec::new();
        assert_eq!(export_embeddings(&model, &[("real", &a), ("mixup", &b)], &mut buf).unwrap(), 4);
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "set,classes,f0,f1,f2");
        assert!(lines[3].starts_with("mixup,1;2,"));
        // identical inputs give identical feature columns
        let feats = |l: &str| l.splitn(3, ',').nth(2).unwrap().to_string();
        assert_eq!(feats(lines[1]), feats(lines[3]));
    }
}
