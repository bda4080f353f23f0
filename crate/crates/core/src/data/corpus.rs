use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ParallelExample;
use crate::{Error, Result};

/// Per-epoch development evaluation never looks at more than this many pairs.
pub const DEV_EVAL_CAP: usize = 500;

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub examples: Vec<ParallelExample>,
    /// Rows skipped because one side was empty.
    pub dropped: usize,
}

/// Reads a UTF-8 CSV with a header row. Text passes through unmodified.
pub fn load_csv(
    path: impl AsRef<Path>,
    src_col: &str,
    tgt_col: &str,
    src_lang: &str,
    tgt_lang: &str,
) -> Result<LoadedCorpus> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(e, 1))?;
    let headers = reader.headers().map_err(|e| csv_error(e, 1))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (si, ti) = (column(src_col)?, column(tgt_col)?);

    let mut examples = Vec::new();
    let mut dropped = 0;
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_error(e, i as u64 + 2))?;
        let (src, tgt) = (row.get(si).unwrap_or(""), row.get(ti).unwrap_or(""));
        if src.trim().is_empty() || tgt.trim().is_empty() {
            dropped += 1;
            continue;
        }
        examples.push(ParallelExample::new(src, tgt, src_lang, tgt_lang)?);
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} rows with an empty side", path.display());
    }
    Ok(LoadedCorpus { examples, dropped })
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    if let csv::ErrorKind::Io(_) = e.kind() {
        let csv::ErrorKind::Io(io) = e.into_kind() else {
            unreachable!()
        };
        return Error::Io(io);
    }
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Csv {
        line,
        msg: e.to_string(),
    }
}

pub fn write_csv(path: impl AsRef<Path>, examples: &[ParallelExample], src_col: &str, tgt_col: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(e, 0))?;
    w.write_record([src_col, tgt_col]).map_err(|e| csv_error(e, 1))?;
    for (i, ex) in examples.iter().enumerate() {
        w.write_record([&ex.src_text, &ex.tgt_text])
            .map_err(|e| csv_error(e, i as u64 + 2))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub dev: usize,
}

impl SplitSpec {
    pub fn for_total(total: usize) -> Self {
        let dev = dev_count(total);
        Self {
            train: total - dev,
            dev,
        }
    }
}

/// 10% when the corpus has at most 1k pairs, otherwise 5% clamped to [1000, 2000].
/// Whenever there are two or more pairs both sides keep at least one.
pub fn dev_count(total: usize) -> usize {
    if total < 2 {
        return 0;
    }
    let dev = if total <= 1000 {
        (total as f64 * 0.10).round() as usize
    } else {
        ((total as f64 * 0.05).round() as usize).clamp(1000, 2000)
    };
    dev.clamp(1, total - 1)
}

/// Seeded shuffle, then the first `dev_count` pairs become the development set.
pub fn split(examples: &[ParallelExample], seed: u64) -> (Vec<ParallelExample>, Vec<ParallelExample>) {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let dev = dev_count(examples.len());
    let pick = |ix: &[usize]| ix.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
    (pick(&order[dev..]), pick(&order[..dev]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_well_formed_rows() {
        let f = write("src,tgt,id\nएक,one,1\n\"a, b\",c,2\nx y,z,3\n");
        let c = load_csv(f.path(), "src", "tgt", "A", "B").unwrap();
        assert_eq!(c.examples.len(), 3);
        assert_eq!(c.examples[0].src_text, "एक");
        assert_eq!(c.examples[1].src_text, "a, b");
        assert_eq!(c.dropped, 0);
    }

    #[test]
    fn missing_column_is_named() {
        let f = write("src,other\na,b\n");
        let err = load_csv(f.path(), "src", "tgt", "A", "B").unwrap_err();
        assert!(matches!(&err, Error::MissingColumn(c) if c == "tgt"));
        assert!(err.to_string().contains("tgt"));
    }

    #[test]
    fn empty_sides_are_dropped_and_counted() {
        let f = write("src,tgt\na,b\n,c\nd,  \ne,f\n");
        let c = load_csv(f.path(), "src", "tgt", "A", "B").unwrap();
        assert_eq!(c.examples.len(), 2);
        assert_eq!(c.dropped, 2);
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = write("src,tgt\na,b\nc,d,e\n");
        match load_csv(f.path(), "src", "tgt", "A", "B").unwrap_err() {
            Error::Csv { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_rules() {
        assert_eq!(dev_count(1000), 100);
        assert_eq!(dev_count(20_000), 1000);
        assert_eq!(dev_count(60_000), 2000);
        assert_eq!(dev_count(10), 1);
        assert_eq!(dev_count(1), 0);
        for n in [1usize, 2, 7, 999, 1000, 1001, 5000, 50_000] {
            let s = SplitSpec::for_total(n);
            assert_eq!(s.train + s.dev, n);
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ex: Vec<_> = (0..200)
            .map(|i| ParallelExample::new(format!("s{i}"), format!("t{i}"), "A", "B").unwrap())
            .collect();
        let (tr1, dv1) = split(&ex, 3);
        let (tr2, dv2) = split(&ex, 3);
        assert_eq!((tr1.clone(), dv1.clone()), (tr2, dv2));
        assert_eq!(dv1.len(), 20);
        assert!(dv1.iter().all(|d| !tr1.contains(d)));
        let (_, dv3) = split(&ex, 4);
        assert_ne!(dv1, dv3);
    }

    #[test]
    fn csv_roundtrip() {
        let ex = vec![ParallelExample::new("a \"q\", b", "c", "A", "B").unwrap()];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(f.path(), &ex, "src", "tgt").unwrap();
        assert_eq!(load_csv(f.path(), "src", "tgt", "A", "B").unwrap().examples, ex);
    }
}
