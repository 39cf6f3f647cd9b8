//! CSV dataset format and the bundled example datasets.
//!
//! One row per cluster:
//!
//! ```text
//! group_id,cluster_id,cell_1,...,cell_M
//! ```
//!
//! Rows sharing a `group_id` must have the same cluster size. Groups keep the
//! order in which their ids first appear.

use std::io::{Read, Write};

use crate::data::{ClusterGroup, ClusterTable, ClusteredSample};
use crate::error::{invalid, Error, Result};

/// Datasets shipped with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BundledDataset {
    /// Housing satisfaction: 20 neighbourhoods, 3×3 table of satisfaction
    /// by contact with other residents.
    Housing,
    /// Allele counts at locus D3S1358 for six subpopulations.
    FbiD3s1358,
    FbiVwa,
    FbiFga,
    FbiD8s1179,
}

impl BundledDataset {
    pub const ALL: [BundledDataset; 5] = [
        Self::Housing,
        Self::FbiD3s1358,
        Self::FbiVwa,
        Self::FbiFga,
        Self::FbiD8s1179,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Housing => "housing",
            Self::FbiD3s1358 => "fbi-d3s1358",
            Self::FbiVwa => "fbi-vwa",
            Self::FbiFga => "fbi-fga",
            Self::FbiD8s1179 => "fbi-d8s1179",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == name)
            .ok_or_else(|| {
                let known: Vec<_> = Self::ALL.iter().map(|d| d.name()).collect();
                Error::InvalidInput(format!(
                    "unknown dataset {name:?}; expected one of {}",
                    known.join(", ")
                ))
            })
    }

    /// Raw CSV text.
    pub fn csv(self) -> &'static str {
        match self {
            Self::Housing => include_str!("../data/housing.csv"),
            Self::FbiD3s1358 => include_str!("../data/fbi_d3s1358.csv"),
            Self::FbiVwa => include_str!("../data/fbi_vwa.csv"),
            Self::FbiFga => include_str!("../data/fbi_fga.csv"),
            Self::FbiD8s1179 => include_str!("../data/fbi_d8s1179.csv"),
        }
    }

    pub fn load(self) -> ClusteredSample {
        read_csv(self.csv().as_bytes()).expect("bundled datasets are well formed")
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

/// Parses the dataset format.
pub fn read_csv<R: Read>(reader: R) -> Result<ClusteredSample> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    if headers.len() < 4 || &headers[0] != "group_id" || &headers[1] != "cluster_id" {
        return invalid("header must be group_id,cluster_id,cell_1,...,cell_M with M >= 2");
    }
    for (i, h) in headers.iter().skip(2).enumerate() {
        if h != format!("cell_{}", i + 1) {
            return invalid(format!("column {} should be cell_{}, found {h:?}", i + 3, i + 1));
        }
    }

    let mut groups: Vec<(u64, Vec<ClusterTable>)> = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let row = line + 2;
        let field = |i: usize| -> Result<u64> {
            record[i].parse().map_err(|_| {
                Error::InvalidInput(format!(
                    "row {row}, column {}: {:?} is not a non-negative integer",
                    &headers[i], &record[i]
                ))
            })
        };
        let group_id = field(0)?;
        field(1)?;
        let counts = (2..record.len()).map(field).collect::<Result<Vec<_>>>()?;
        let table = ClusterTable::new(counts)
            .map_err(|e| Error::InvalidInput(format!("row {row}: {e}")))?;
        match groups.iter_mut().find(|(id, _)| *id == group_id) {
            Some((_, tables)) => {
                if tables[0].cluster_size() != table.cluster_size() {
                    return invalid(format!(
                        "row {row}: group {group_id} mixes cluster sizes {} and {}",
                        tables[0].cluster_size(),
                        table.cluster_size()
                    ));
                }
                tables.push(table);
            }
            None => groups.push((group_id, vec![table])),
        }
    }
    if groups.is_empty() {
        return invalid("dataset has no rows");
    }
    let groups = groups
        .into_iter()
        .map(|(_, tables)| ClusterGroup::new(tables))
        .collect::<Result<Vec<_>>>()?;
    ClusteredSample::new(groups)
}

/// Writes `sample` in the dataset format, numbering groups and clusters from 1.
pub fn write_csv<W: Write>(sample: &ClusteredSample, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["group_id".to_string(), "cluster_id".to_string()];
    header.extend((1..=sample.num_cells()).map(|i| format!("cell_{i}")));
    wtr.write_record(&header).map_err(csv_error)?;
    let mut cluster_id = 0;
    for (g, group) in sample.groups().iter().enumerate() {
        for table in group.tables() {
            cluster_id += 1;
            let mut row = vec![(g + 1).to_string(), cluster_id.to_string()];
            row.extend(table.counts().iter().map(u64::to_string));
            wtr.write_record(&row).map_err(csv_error)?;
        }
    }
    wtr.flush()
        .map_err(|e| Error::InvalidInput(format!("write failed: {e}")))
}
