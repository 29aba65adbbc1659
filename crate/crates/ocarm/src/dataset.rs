//! Line-delimited dataset files.
//!
//! The first line is a header carrying the split tag, the generator config
//! hash and the record count; every following line is one
//! `UserJourneyRecord` as a JSON object.

use std::io::{BufRead, BufReader};
use std::path::Path;

use ocarm_core::datagen::{Dataset, Split, UserJourneyRecord};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::fsutil::write_atomic;

pub const FORMAT: &str = "ocarm-dataset/1";

const RECORD_FIELDS: [&str; 8] = [
    "user_id",
    "profile_cat",
    "profile_dense",
    "hist_seq",
    "ad_seq",
    "onboarding",
    "labels",
    "label_counts",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    split: Split,
    gen_config_hash: String,
    n_records: usize,
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let header = Header {
        format: FORMAT.to_string(),
        split: dataset.split_tag,
        gen_config_hash: dataset.gen_config_hash.clone(),
        n_records: dataset.len(),
    };
    write_atomic(path, |w| {
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for r in &dataset.records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let parse = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let header: Header = match lines.next() {
        None => return Err(parse(1, "empty file, expected a header line".into())),
        Some(l) => {
            let l = l.map_err(io_err(path))?;
            serde_json::from_str(&l).map_err(|e| parse(1, format!("bad header: {e}")))?
        }
    };
    if header.format != FORMAT {
        return Err(parse(1, format!("unknown format `{}`, expected `{FORMAT}`", header.format)));
    }
    let mut records = Vec::with_capacity(header.n_records);
    for (i, l) in lines.enumerate() {
        let line_no = i + 2;
        let l = l.map_err(io_err(path))?;
        if l.is_empty() {
            return Err(parse(line_no, "blank line".into()));
        }
        let value: serde_json::Value = serde_json::from_str(&l).map_err(|e| parse(line_no, e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| parse(line_no, "record is not a JSON object".into()))?;
        if let Some(field) = RECORD_FIELDS.iter().find(|f| !obj.contains_key(**f)) {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line: line_no,
                field: field.to_string(),
            });
        }
        let record: UserJourneyRecord =
            serde_json::from_value(value).map_err(|e| parse(line_no, e.to_string()))?;
        records.push(record);
    }
    if records.len() != header.n_records {
        return Err(parse(
            records.len() + 2,
            format!("header promises {} records, file holds {}", header.n_records, records.len()),
        ));
    }
    Ok(Dataset {
        records,
        split_tag: header.split,
        gen_config_hash: header.gen_config_hash,
    })
}
