//! On-disk formats: TSV edge lists, `UDPM` feature matrices, label lists.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ultradp_autodiff::Tensor;

use super::Graph;
use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 4] = b"UDPM";

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 20 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format(format!("{} is not a UDPM feature file", path.display())));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|x| x.checked_mul(8))
        .ok_or_else(|| Error::Format("feature header overflows".into()))?;
    if body.len() != expected {
        return Err(Error::Format(format!(
            "{}: header says {rows}x{cols} but payload has {} bytes",
            path.display(),
            body.len()
        )));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(rows, cols, data)?)
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let mut w = create(path)?;
    let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(format!("writing {}", path.display()), e));
    put(FEATURE_MAGIC)?;
    put(&(features.rows() as u64).to_le_bytes())?;
    put(&(features.cols() as u64).to_le_bytes())?;
    for v in features.data() {
        put(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let reader = BufReader::new(open(path)?);
    let mut edges = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|x| x.trim().parse().ok()).ok_or_else(|| {
                Error::MalformedInput(format!("{}:{}: expected `src<TAB>dst`", path.display(), lineno + 1))
            })
        };
        let a = parse(parts.next())?;
        let b = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(Error::MalformedInput(format!(
                "{}:{}: more than two columns",
                path.display(),
                lineno + 1
            )));
        }
        edges.push((a, b));
    }
    Ok(edges)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let reader = BufReader::new(open(path)?);
    let mut labels = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        labels.push(line.parse().map_err(|_| {
            Error::MalformedInput(format!("{}:{}: `{line}` is not a class id", path.display(), lineno + 1))
        })?);
    }
    Ok(labels)
}

/// Loads a graph; the node count is the feature file's row count.
pub fn load_graph(edge_path: &Path, feature_path: &Path, label_path: Option<&Path>) -> Result<Graph> {
    let features = read_features(feature_path)?;
    let edges = read_edges(edge_path)?;
    let labels = label_path.map(read_labels).transpose()?;
    if let Some(l) = &labels {
        if l.len() != features.rows() {
            return Err(Error::Dimension(format!(
                "{} labels but {} feature rows",
                l.len(),
                features.rows()
            )));
        }
    }
    Graph::from_edges(&edges, features, labels)
}

pub fn write_edges(path: &Path, graph: &Graph) -> Result<()> {
    let mut w = create(path)?;
    for (a, b) in graph.edges() {
        writeln!(w, "{a}\t{b}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = create(path)?;
    for l in labels {
        writeln!(w, "{l}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes `edges.tsv`, `features.udpm` and, when present, `labels.txt`.
pub fn write_graph(dir: &Path, graph: &Graph) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write_edges(&dir.join("edges.tsv"), graph)?;
    write_features(&dir.join("features.udpm"), graph.features())?;
    if let Some(l) = graph.labels() {
        write_labels(&dir.join("labels.txt"), l)?;
    }
    Ok(())
}
