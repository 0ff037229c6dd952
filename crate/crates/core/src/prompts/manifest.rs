//! JSON Lines prompt manifests.
//!
//! One record per line with the fields `id`, `strategy`, `template_id`,
//! `class_ids`, `text`, `seed` in that order.

use std::io::{BufRead, Write};
use std::path::Path;

use super::generate::PromptRecord;
use crate::error::{Error, Result};

pub fn write_manifest<W: Write>(w: &mut W, records: &[PromptRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn manifest_to_string(records: &[PromptRecord]) -> String {
    let mut buf = Vec::new();
    write_manifest(&mut buf, records).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// Parses a manifest. Blank lines are skipped; errors carry the 1-based line number.
pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<PromptRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PromptRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        rec.validate().map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_manifest(path: &Path, records: &[PromptRecord]) -> Result<()> {
    std::fs::write(path, manifest_to_string(records))?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<PromptRecord>> {
    let f = std::fs::File::open(path)?;
    read_manifest(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::prompts::{default_templates, gen_mixup_class, PairingPolicy, Vocabulary};

    fn sample(n: usize) -> Vec<PromptRecord> {
        gen_mixup_class(
            &Vocabulary::default_ten(),
            &default_templates(),
            n,
            &PairingPolicy::random(),
            &RngStream::new(3, 0),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_1024() {
        let recs = sample(1024);
        let text = manifest_to_string(&recs);
        assert_eq!(text.lines().count(), 1024);
        let back = read_manifest(text.as_bytes()).unwrap();
        assert_eq!(back, recs);
        assert_eq!(manifest_to_string(&back), text);
    }

    #[test]
    fn empty_round_trip() {
        assert_eq!(manifest_to_string(&[]), "");
        assert!(read_manifest("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn field_order_is_stable() {
        let line = manifest_to_string(&sample(1));
        let keys: Vec<usize> = ["\"id\"", "\"strategy\"", "\"template_id\"", "\"class_ids\"", "\"text\"", "\"seed\""]
            .iter()
            .map(|k| line.find(k).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]), "{line}");
        assert!(line.contains("\"strategy\":\"mixup\""));
    }

    #[test]
    fn corrupted_line_reports_its_number() {
        let mut lines: Vec<String> = manifest_to_string(&sample(10)).lines().map(String::from).collect();
        lines[6] = lines[6].replace("\"class_ids\"", "\"klass_ids\"");
        let text = lines.join("\n");
        match read_manifest(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
        // structurally valid JSON that breaks a record invariant
        let mut lines: Vec<String> = manifest_to_string(&sample(10)).lines().map(String::from).collect();
        lines[2] = r#"{"id":2,"strategy":"single","template_id":0,"class_ids":[1,2],"text":"x","seed":1}"#.into();
        match read_manifest(lines.join("\n").as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
