//! CSV exports for external plotting: embeddings and learned adjacencies.

use std::path::{Path, PathBuf};

use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::graph::{symmetrize, write_matrix_csv};
use crate::model::gcn_prefix;
use crate::numerics::ParamStore;
use crate::train::Predictions;

/// Paired embeddings, one row per window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Embeddings {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub z_p: Vec<Vec<f32>>,
    pub z_v: Vec<Vec<f32>>,
}

impl From<&Predictions> for Embeddings {
    fn from(p: &Predictions) -> Self {
        Embeddings { ids: (0..p.labels.len()).collect(), labels: p.labels.clone(), z_p: p.z_p.clone(), z_v: p.z_v.clone() }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::schema(path.display().to_string(), format!("{other:?}")),
    }
}

/// Columns `id,label,zp_0..,zv_0..`. Values are written in shortest
/// round-trip form, so reading back is lossless.
pub fn write_embeddings_csv(e: &Embeddings, path: &Path) -> Result<()> {
    let d = e.z_p.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_path(path).map_err(|err| csv_err(path, err))?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..d).map(|j| format!("zp_{j}")));
    header.extend((0..d).map(|j| format!("zv_{j}")));
    w.write_record(&header).map_err(|err| csv_err(path, err))?;
    for i in 0..e.ids.len() {
        if e.z_p[i].len() != d || e.z_v[i].len() != d {
            return Err(Error::contract("write_embeddings_csv", format!("row {i} does not have width {d}")));
        }
        let mut row = vec![e.ids[i].to_string(), e.labels[i].to_string()];
        row.extend(e.z_p[i].iter().chain(&e.z_v[i]).map(f32::to_string));
        w.write_record(&row).map_err(|err| csv_err(path, err))?;
    }
    w.flush().map_err(|err| Error::io(path, err))
}

pub fn read_embeddings_csv(path: &Path) -> Result<Embeddings> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let width = rdr.headers().map_err(|e| csv_err(path, e))?.len();
    if width < 2 || width % 2 != 0 {
        return Err(Error::schema(path.display().to_string(), format!("{width} columns")));
    }
    let d = (width - 2) / 2;
    let bad = |i: usize, m: String| Error::schema(path.display().to_string(), format!("row {}: {m}", i + 1));
    let mut out = Embeddings::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        out.ids.push(rec[0].parse().map_err(|e| bad(i, format!("{e}")))?);
        out.labels.push(rec[1].parse().map_err(|e| bad(i, format!("{e}")))?);
        let vals = rec.iter().skip(2).map(str::parse::<f32>).collect::<std::result::Result<Vec<_>, _>>().map_err(|e| bad(i, format!("{e}")))?;
        out.z_p.push(vals[..d].to_vec());
        out.z_v.push(vals[d..].to_vec());
    }
    Ok(out)
}

/// Writes the symmetric adjacency of every modality graph as
/// `adjacency_<modality>.csv` in `dir`.
pub fn export_graphs(store: &ParamStore<f32>, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Modality::ALL
        .iter()
        .map(|&m| {
            let raw = store.get(&format!("{}.adj", gcn_prefix(m)))?;
            let path = dir.join(format!("adjacency_{}.csv", m.name()));
            write_matrix_csv(&symmetrize(raw), &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{alignment_report, PairMode};
    use crate::model::init_model;
    use crate::model::tests::tiny_config;

    #[test]
    fn embeddings_round_trip_keeps_alignment_metrics() {
        let e = Embeddings {
            ids: vec![0, 1, 2],
            labels: vec![4, 0, 10],
            z_p: vec![vec![0.1, -2.5e-7], vec![1.0 / 3.0, 7.0], vec![-1e6, 0.0]],
            z_v: vec![vec![0.3, 0.2], vec![f32::MIN_POSITIVE, -1.0], vec![2.0, 2.0 / 3.0]],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        write_embeddings_csv(&e, &path).unwrap();
        let back = read_embeddings_csv(&path).unwrap();
        assert_eq!(back, e);
        for mode in [PairMode::Paired, PairMode::Shuffled] {
            assert_eq!(alignment_report(&e.z_v, &e.z_p, mode).unwrap(), alignment_report(&back.z_v, &back.z_p, mode).unwrap());
        }
    }

    #[test]
    fn exported_graphs_are_symmetric() {
        let store = init_model::<f32>(&tiny_config(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for path in export_graphs(&store, dir.path()).unwrap() {
            let rows: Vec<Vec<f64>> = std::fs::read_to_string(&path)
                .unwrap()
                .lines()
                .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
                .collect();
            for i in 0..rows.len() {
                for j in 0..rows.len() {
                    assert_eq!(rows[i][j], rows[j][i]);
                }
            }
        }
    }
}
