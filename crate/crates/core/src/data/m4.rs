use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// M4 frequency groups with their fixed horizons and seasonal periods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum M4Group {
    Yearly,
    Quarterly,
    Monthly,
    Weekly,
    Daily,
    Hourly,
}

impl M4Group {
    pub const ALL: [M4Group; 6] = [
        M4Group::Yearly,
        M4Group::Quarterly,
        M4Group::Monthly,
        M4Group::Weekly,
        M4Group::Daily,
        M4Group::Hourly,
    ];

    pub fn horizon(self) -> usize {
        match self {
            M4Group::Yearly => 6,
            M4Group::Quarterly => 8,
            M4Group::Monthly => 18,
            M4Group::Weekly => 13,
            M4Group::Daily => 14,
            M4Group::Hourly => 48,
        }
    }

    pub fn seasonality(self) -> usize {
        match self {
            M4Group::Yearly => 1,
            M4Group::Quarterly => 4,
            M4Group::Monthly => 12,
            M4Group::Weekly => 1,
            M4Group::Daily => 1,
            M4Group::Hourly => 24,
        }
    }

    /// Model input length, twice the horizon.
    pub fn input_len(self) -> usize {
        2 * self.horizon()
    }

    pub fn name(self) -> &'static str {
        match self {
            M4Group::Yearly => "yearly",
            M4Group::Quarterly => "quarterly",
            M4Group::Monthly => "monthly",
            M4Group::Weekly => "weekly",
            M4Group::Daily => "daily",
            M4Group::Hourly => "hourly",
        }
    }

    pub fn parse(s: &str) -> Option<M4Group> {
        let s = s.to_ascii_lowercase();
        M4Group::ALL
            .into_iter()
            .find(|g| g.name() == s || (s.len() == 1 && g.name().starts_with(&s)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct M4Series {
    pub id: String,
    pub history: Vec<f64>,
    pub future: Vec<f64>,
}

fn read_rows(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let Some(id) = rec.get(0) else { continue };
        let cells: Vec<&str> = rec.iter().skip(1).map(str::trim).filter(|c| !c.is_empty()).collect();
        if line == 1 && cells.first().is_some_and(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        let values = cells
            .iter()
            .map(|c| {
                c.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse { line, msg: format!("{c:?} is not a number") })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(Error::Parse { line, msg: format!("series {id} is empty") });
        }
        rows.push((id.trim().to_string(), values));
    }
    Ok(rows)
}

/// Reads paired M4-style train/test files (`id, v1, v2, …`, one series per
/// line) and checks every test row has the group's horizon.
pub fn load_m4(train: &Path, test: &Path, group: M4Group) -> Result<Vec<M4Series>> {
    let future: HashMap<String, Vec<f64>> = read_rows(test)?.into_iter().collect();
    read_rows(train)?
        .into_iter()
        .map(|(id, history)| {
            let f = future
                .get(&id)
                .ok_or_else(|| Error::Data(format!("series {id} has no test row")))?;
            if f.len() != group.horizon() {
                return Err(Error::Data(format!(
                    "series {id}: test row has {} values, {} horizon is {}",
                    f.len(),
                    group.name(),
                    group.horizon()
                )));
            }
            Ok(M4Series {
                id,
                history,
                future: f.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn parses_quoted_rows_with_header() {
        let mut tr = tempfile::NamedTempFile::new().unwrap();
        write!(tr, "\"V1\",\"V2\",\"V3\",\"V4\"\n\"Y1\",\"1\",\"2\",\"3\"\n\"Y2\",\"4\",\"5\",\n").unwrap();
        let mut te = tempfile::NamedTempFile::new().unwrap();
        writeln!(te, "V1,V2,V3,V4,V5,V6,V7").unwrap();
        writeln!(te, "Y1,1,2,3,4,5,6").unwrap();
        writeln!(te, "Y2,1,2,3,4,5,6").unwrap();
        let s = load_m4(tr.path(), te.path(), M4Group::Yearly).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].history, vec![4.0, 5.0]);
        assert_eq!(s[0].future.len(), 6);
    }

    #[test]
    fn wrong_horizon_rejected() {
        let mut tr = tempfile::NamedTempFile::new().unwrap();
        writeln!(tr, "H1,1,2,3").unwrap();
        let mut te = tempfile::NamedTempFile::new().unwrap();
        writeln!(te, "H1,1,2").unwrap();
        assert!(load_m4(tr.path(), te.path(), M4Group::Hourly).is_err());
    }

    #[test]
    fn group_table() {
        let h: Vec<usize> = M4Group::ALL.iter().map(|g| g.horizon()).collect();
        assert_eq!(h, vec![6, 8, 18, 13, 14, 48]);
        assert_eq!(M4Group::parse("Monthly"), Some(M4Group::Monthly));
        assert_eq!(M4Group::parse("h"), Some(M4Group::Hourly));
    }
}
