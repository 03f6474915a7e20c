//! CSV ingestion and atomic file output.

use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use neon_core::{Dataset, FlipCurve, Matrix};
use tempfile::NamedTempFile;

/// Reads a headered CSV. A column named `label` becomes the labels; every
/// other cell must be a finite decimal.
pub fn ingest_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    ingest_reader(file, &path.display().to_string())
}

pub fn ingest_reader<R: std::io::Read>(reader: R, name: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().with_context(|| format!("{name}: reading header"))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        bail!("{name}: line 1: empty file");
    }
    let label_col = header.iter().position(|h| h == "label");
    let width = header.len();
    let dim = width - usize::from(label_col.is_some());
    if dim == 0 {
        bail!("{name}: line 1: no feature columns");
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;
    for rec in rdr.records() {
        let rec = rec.with_context(|| format!("{name}: malformed record"))?;
        let line = rec.position().map_or(rows + 2, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != width {
            bail!("{name}: line {line}: expected {width} cells, found {}", rec.len());
        }
        for (j, cell) in rec.iter().enumerate() {
            if Some(j) == label_col {
                let y: usize = cell
                    .parse()
                    .map_err(|_| anyhow!("{name}: line {line}: label `{cell}` is not a non-negative integer"))?;
                labels.push(y);
            } else {
                let v: f64 = cell
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| anyhow!("{name}: line {line}: `{cell}` in column `{}` is not a finite number", &header[j]))?;
                values.push(v);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        bail!("{name}: line 2: empty file (header only)");
    }
    let points = Matrix::from_vec(rows, dim, values)?;
    Ok(Dataset::new(points, label_col.map(|_| labels))?)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = NamedTempFile::new_in(dir).with_context(|| format!("temporary file in {}", dir.display()))?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| anyhow!("csv buffer: {e}"))
}

/// Dataset as CSV with columns `x0..x{d-1}` and, if labeled, `label`.
pub fn dataset_csv(data: &Dataset) -> Result<Vec<u8>> {
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    let labels = data.labels();
    if labels.is_some() {
        header.push("label".into());
    }
    csv_bytes(
        &header,
        (0..data.len()).map(|i| {
            let mut r: Vec<String> = data.point(i).iter().map(|v| v.to_string()).collect();
            if let Some(l) = labels {
                r.push(l[i].to_string());
            }
            r
        }),
    )
}

/// Curves as `fraction,mean_logit,method` rows.
pub fn curves_csv(curves: &[FlipCurve]) -> Result<Vec<u8>> {
    let header = ["fraction", "mean_logit", "method"].map(String::from);
    csv_bytes(
        &header,
        curves.iter().flat_map(|c| {
            c.fractions
                .iter()
                .zip(&c.mean_logit)
                .map(|(f, m)| vec![f.to_string(), m.to_string(), c.method.clone()])
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Dataset> {
        ingest_reader(s.as_bytes(), "t.csv")
    }

    #[test]
    fn two_by_two() {
        let d = parse("a,b\n1,2\n3.5,-4e-1\n").unwrap();
        assert_eq!((d.len(), d.dim()), (2, 2));
        assert_eq!(d.point(1), &[3.5, -0.4]);
        assert!(d.labels().is_none());
    }

    #[test]
    fn label_column_extracted() {
        let d = parse("x,label,y\n1,0,2\n3,1,4\n").unwrap();
        assert_eq!(d.dim(), 2);
        assert_eq!(d.labels(), Some(&[0, 1][..]));
        assert_eq!(d.point(0), &[1.0, 2.0]);
    }

    #[test]
    fn errors_name_the_line() {
        let mut s = String::from("a,b\n");
        for i in 0..5 {
            s += &format!("{i},{i}\n");
        }
        s += "1,oops\n";
        let e = parse(&s).unwrap_err().to_string();
        assert!(e.contains("line 7"), "{e}");
        let e = parse("a,b\n1,2\n1,2,3\n").unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        assert!(parse("").unwrap_err().to_string().contains("empty"));
        assert!(parse("a,b\n").unwrap_err().to_string().contains("empty"));
        assert!(parse("a\nNaN\n").is_err());
        assert!(parse("a\ninf\n").is_err());
    }

    #[test]
    fn blobs_round_trip() {
        let d: Dataset = neon_core::models::make_blobs(3, 2, 2, 0.7, 5).unwrap();
        let back = parse(std::str::from_utf8(&dataset_csv(&d).unwrap()).unwrap()).unwrap();
        assert_eq!(back.points(), d.points());
        assert_eq!(back.labels(), d.labels());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path().join("sub")).unwrap().count(), 1);
    }
}
