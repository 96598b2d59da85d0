//! Subject manifest CSV: `subject_id,diagnosis,sex,age,pet_path,mri_path`.

use super::SubjectRecord;
use crate::error::{Error, Result};
use std::path::Path;

const HEADER: [&str; 6] = ["subject_id", "diagnosis", "sex", "age", "pet_path", "mri_path"];

pub fn write_manifest(path: &Path, records: &[SubjectRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for r in records {
        w.write_record([
            r.subject_id.as_str(),
            &r.diagnosis.to_string(),
            &r.sex.to_string(),
            &format!("{}", r.age),
            &r.pet_path,
            &r.mri_path,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<SubjectRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    {
        let headers = rd.headers()?;
        if headers.iter().ne(HEADER.iter().copied()) {
            return Err(Error::format(format!(
                "{}: manifest header must be {}",
                path.display(),
                HEADER.join(",")
            )));
        }
    }
    let mut records = Vec::new();
    for row in rd.records() {
        let row = row?;
        if row.len() != 6 {
            return Err(Error::format(format!("{}: manifest row has {} fields", path.display(), row.len())));
        }
        records.push(SubjectRecord {
            subject_id: row[0].to_string(),
            diagnosis: row[1].parse()?,
            sex: row[2].parse()?,
            age: row[3]
                .parse()
                .map_err(|_| Error::format(format!("bad age '{}'", &row[3])))?,
            pet_path: row[4].to_string(),
            mri_path: row[5].to_string(),
        });
    }
    Ok(records)
}
