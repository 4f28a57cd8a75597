//! Sample persistence: CSV (lossless) and binary PGM (8-bit, lossy).

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Writes rows with header `x0,...,x{d-1}` (prefixed by `id` when requested).
/// Values use 17 significant digits, which round-trips every `f64`.
pub fn write_csv<W: Write>(mut w: W, t: &Tensor, with_id: bool) -> Result<()> {
    let d = t.cols();
    let mut header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
    if with_id {
        header.insert(0, "id".into());
    }
    writeln!(w, "{}", header.join(","))?;
    let mut line = String::new();
    for i in 0..t.rows() {
        line.clear();
        if with_id {
            line.push_str(&i.to_string());
        }
        for (k, v) in t.row(i).iter().enumerate() {
            if with_id || k > 0 {
                line.push(',');
            }
            line.push_str(&format!("{v:.16e}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub ids: Option<Vec<u64>>,
    pub values: Tensor,
}

/// Parses a numeric CSV with a header row. A leading `id` column is split off.
pub fn read_csv<R: BufRead>(r: R) -> Result<CsvTable> {
    let mut lines = r.lines().enumerate();
    let header: Vec<String> = match lines.next() {
        Some((_, l)) => l?.trim().split(',').map(|s| s.trim().to_string()).collect(),
        None => return Err(Error::Parse { line: 1, msg: "empty file, expected a header".into() }),
    };
    let has_id = header.first().is_some_and(|h| h == "id");
    let d = header.len() - usize::from(has_id);
    if d == 0 {
        return Err(Error::Parse { line: 1, msg: "header has no value columns".into() });
    }
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (i, l) in lines {
        let l = l?;
        let lineno = i + 1;
        if l.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = l.trim().split(',').collect();
        if fields.len() != header.len() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("{} fields, header has {}", fields.len(), header.len()),
            });
        }
        let mut it = fields.into_iter();
        if has_id {
            let f = it.next().expect("non-empty");
            ids.push(f.trim().parse::<u64>().map_err(|_| Error::Parse { line: lineno, msg: format!("bad id '{f}'") })?);
        }
        for f in it {
            let v = f.trim().parse::<f64>().map_err(|_| Error::Parse { line: lineno, msg: format!("bad number '{f}'") })?;
            values.push(v);
        }
    }
    let rows = values.len() / d;
    Ok(CsvTable { header, ids: has_id.then_some(ids), values: Tensor::new(vec![rows, d], values)? })
}

pub fn save_samples(path: &Path, t: &Tensor, with_id: bool) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_csv(&mut w, t, with_id)?;
    w.flush()?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Tensor> {
    Ok(read_csv(BufReader::new(std::fs::File::open(path)?))?.values)
}

fn quantize(v: f64) -> u8 {
    let c = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    ((c + 1.0) * 0.5 * 255.0).round() as u8
}

/// One `h × w` image, values clamped to `[-1, 1]` then mapped to `0..=255`.
pub fn write_pgm<W: Write>(mut w: W, values: &[f64], h: usize, wd: usize) -> Result<()> {
    if values.len() != h * wd {
        return Err(Error::dim(&[h * wd], &[values.len()]));
    }
    write!(w, "P5\n{wd} {h}\n255\n")?;
    let bytes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Tiles the rows of `t` (each an `h × w` image) into a grid `cols` images wide,
/// separated by one-pixel black borders.
pub fn write_pgm_grid<W: Write>(w: W, t: &Tensor, h: usize, wd: usize, cols: usize) -> Result<()> {
    if t.cols() != h * wd {
        return Err(Error::dim(&[t.rows(), h * wd], t.shape()));
    }
    let n = t.rows();
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols).max(1);
    let (gh, gw) = (rows * (h + 1) + 1, cols * (wd + 1) + 1);
    let mut canvas = vec![-1.0; gh * gw];
    for i in 0..n {
        let (r0, c0) = ((i / cols) * (h + 1) + 1, (i % cols) * (wd + 1) + 1);
        for y in 0..h {
            for x in 0..wd {
                canvas[(r0 + y) * gw + c0 + x] = t.row(i)[y * wd + x];
            }
        }
    }
    write_pgm(w, &canvas, gh, gw)
}
