//! Readers and writers for every on-disk format.
//!
//! Text files are comma-delimited with a header row; fields are trimmed on
//! read. Embedding matrices use a small binary layout: the magic
//! `GMVOEMB1`, row count and dimension as little-endian `u64`, then
//! row-major little-endian `f32` values.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{similarity_signal, InteractionCounts, InteractionStats, ItemCatalog, ItemGraph, ItemId};
use crate::matrix::Matrix;
use crate::ranking::{AnchorRanking, CandidateSet, RelevanceLabels, SweepRun, TransactionTable};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"GMVOEMB1";

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_reader(file))
}

/// Iterates records with their 1-based line numbers, checking the column
/// count.
fn records(path: &Path, columns: usize) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut rdr = reader(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != columns {
            return Err(Error::parse(
                path,
                line,
                format!("expected {columns} fields, found {}", rec.len()),
            ));
        }
        out.push((line, rec));
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    rec[i]
        .parse()
        .map_err(|e| Error::parse(path, line, format!("bad {name} `{}`: {e}", &rec[i])))
}

fn item_id(path: &Path, line: usize, raw: &str) -> Result<ItemId> {
    ItemId::new(raw).map_err(|e| Error::parse(path, line, e.to_string()))
}

fn known(path: &Path, line: usize, catalog: &ItemCatalog, id: &ItemId) -> Result<usize> {
    catalog
        .index_of(id)
        .ok_or_else(|| Error::parse(path, line, format!("unknown item id `{id}`")))
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, 0, format!("{other:?}")),
    }
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `item_id, raw_price`; an empty price field is returned as `None`.
pub fn read_catalog(path: &Path) -> Result<Vec<(ItemId, Option<f64>)>> {
    let mut items = Vec::new();
    for (line, rec) in records(path, 2)? {
        let id = item_id(path, line, &rec[0])?;
        let price = if rec[1].is_empty() {
            None
        } else {
            let p: f64 = field(path, line, &rec, 1, "raw_price")?;
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::parse(path, line, format!("price {p} is negative or not finite")));
            }
            Some(p)
        };
        items.push((id, price));
    }
    Ok(items)
}

pub fn write_catalog(path: &Path, items: &[(ItemId, f64)]) -> Result<()> {
    write_rows(
        path,
        &["item_id", "raw_price"],
        items.iter().map(|(id, p)| [id.to_string(), p.to_string()]),
    )
}

pub fn encode_embeddings(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + m.as_slice().len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for &x in m.as_slice() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 24 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(Error::invalid("embeddings", "missing GMVOEMB1 header"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let d = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let expected = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::invalid("embeddings", "header dimensions overflow"))?;
    let body = &bytes[24..];
    if body.len() as u64 != expected {
        return Err(Error::invalid(
            "embeddings",
            format!("expected {expected} data bytes for {n}x{d}, found {}", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Matrix::from_vec(n as usize, d as usize, data)
}

/// Reads only the `(rows, dim)` header of an embedding file.
pub fn read_embedding_header(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut head = [0u8; 24];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map_err(|e| Error::io(path, e))?;
    if &head[..8] != EMBEDDING_MAGIC {
        return Err(Error::invalid("embeddings", "missing GMVOEMB1 header"));
    }
    let n = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes"));
    let d = u64::from_le_bytes(head[16..24].try_into().expect("8 bytes"));
    Ok((n as usize, d as usize))
}

pub fn read_embeddings(path: &Path) -> Result<Matrix> {
    decode_embeddings(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_embeddings(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, encode_embeddings(m)).map_err(|e| Error::io(path, e))
}

/// Reads the catalog and embedding files and builds the catalog, imputing
/// missing prices with `price_seed`.
pub fn load_catalog(catalog_path: &Path, embeddings_path: &Path, price_seed: u64) -> Result<ItemCatalog> {
    let rows = read_catalog(catalog_path)?;
    let (n, _) = read_embedding_header(embeddings_path)?;
    if n != rows.len() {
        return Err(Error::RowCountMismatch {
            embedding_rows: n,
            catalog_rows: rows.len(),
        });
    }
    let x = read_embeddings(embeddings_path)?;
    let prices: Vec<Option<f64>> = rows.iter().map(|(_, p)| *p).collect();
    let prices = crate::graph::impute_missing_prices(&prices, price_seed)?;
    ItemCatalog::new(rows.into_iter().map(|(id, _)| id).zip(prices).collect(), x)
}

/// Catalog without embeddings (a zero-width feature matrix), for commands
/// that only need ids and prices.
pub fn load_catalog_ids(catalog_path: &Path, price_seed: u64) -> Result<ItemCatalog> {
    let rows = read_catalog(catalog_path)?;
    let prices: Vec<Option<f64>> = rows.iter().map(|(_, p)| *p).collect();
    let prices = crate::graph::impute_missing_prices(&prices, price_seed)?;
    let n = rows.len();
    ItemCatalog::new(rows.into_iter().map(|(id, _)| id).zip(prices).collect(), Matrix::zeros(n, 0))
}

/// `u_id, v_id, cv, vb_uv, vb_vu, cp`; every id must be in the catalog.
pub fn read_interactions(path: &Path, catalog: &ItemCatalog) -> Result<InteractionStats> {
    let mut stats = InteractionStats::new();
    for (line, rec) in records(path, 6)? {
        let u = item_id(path, line, &rec[0])?;
        let v = item_id(path, line, &rec[1])?;
        known(path, line, catalog, &u)?;
        known(path, line, catalog, &v)?;
        let counts = InteractionCounts {
            cv: field(path, line, &rec, 2, "cv")?,
            vb_uv: field(path, line, &rec, 3, "vb_uv")?,
            vb_vu: field(path, line, &rec, 4, "vb_vu")?,
            cp: field(path, line, &rec, 5, "cp")?,
        };
        stats
            .insert(u, v, counts)
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
    }
    Ok(stats)
}

pub fn write_interactions(path: &Path, stats: &InteractionStats) -> Result<()> {
    write_rows(
        path,
        &["u_id", "v_id", "cv", "vb_uv", "vb_vu", "cp"],
        stats.iter().map(|(u, v, c)| {
            [
                u.to_string(),
                v.to_string(),
                c.cv.to_string(),
                c.vb_uv.to_string(),
                c.vb_vu.to_string(),
                c.cp.to_string(),
            ]
        }),
    )
}

/// `u_id, v_id, score` with `u_id < v_id`, sorted; the score is the pair's
/// similarity signal.
pub fn write_edge_list(path: &Path, graph: &ItemGraph, catalog: &ItemCatalog, stats: &InteractionStats) -> Result<()> {
    let mut rows = Vec::with_capacity(graph.edge_count());
    for &(u, v) in graph.edges() {
        let (a, b) = (&catalog.item(u).id, &catalog.item(v).id);
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        rows.push((a.clone(), b.clone(), similarity_signal(stats, a, b)?));
    }
    rows.sort();
    write_rows(
        path,
        &["u_id", "v_id", "score"],
        rows.into_iter().map(|(a, b, s)| [a.to_string(), b.to_string(), s.to_string()]),
    )
}

pub fn read_edge_list(path: &Path, catalog: &ItemCatalog) -> Result<ItemGraph> {
    let mut pairs = Vec::new();
    for (line, rec) in records(path, 3)? {
        let u = known(path, line, catalog, &item_id(path, line, &rec[0])?)?;
        let v = known(path, line, catalog, &item_id(path, line, &rec[1])?)?;
        pairs.push((u, v));
    }
    ItemGraph::from_edges(catalog.len(), &pairs).map_err(|e| Error::parse(path, 0, e.to_string()))
}

/// `anchor_id, candidate_id`, grouped by anchor in order of first
/// appearance.
pub fn read_candidates(path: &Path) -> Result<Vec<CandidateSet>> {
    let mut order = Vec::new();
    let mut groups: HashMap<ItemId, (usize, Vec<ItemId>)> = HashMap::new();
    for (line, rec) in records(path, 2)? {
        let anchor = item_id(path, line, &rec[0])?;
        let candidate = item_id(path, line, &rec[1])?;
        let entry = groups.entry(anchor.clone()).or_insert_with(|| {
            order.push(anchor.clone());
            (line, Vec::new())
        });
        entry.1.push(candidate);
    }
    order
        .into_iter()
        .map(|anchor| {
            let (line, cands) = groups.remove(&anchor).expect("grouped above");
            CandidateSet::new(anchor, cands).map_err(|e| Error::parse(path, line, e.to_string()))
        })
        .collect()
}

pub fn write_candidates(path: &Path, sets: &[CandidateSet]) -> Result<()> {
    write_rows(
        path,
        &["anchor_id", "candidate_id"],
        sets.iter()
            .flat_map(|s| s.candidates.iter().map(|c| [s.anchor.to_string(), c.to_string()])),
    )
}

/// `item_id, bucket, count`; prices come from `prices`.
pub fn read_transactions(path: &Path, prices: HashMap<ItemId, f64>) -> Result<TransactionTable> {
    let mut tx = TransactionTable::new(prices);
    for (line, rec) in records(path, 3)? {
        let item = item_id(path, line, &rec[0])?;
        let bucket: u32 = field(path, line, &rec, 1, "bucket")?;
        let count: u64 = field(path, line, &rec, 2, "count")?;
        tx.insert(item, bucket, count)
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
    }
    Ok(tx)
}

pub fn write_transactions(path: &Path, tx: &TransactionTable) -> Result<()> {
    write_rows(
        path,
        &["item_id", "bucket", "count"],
        tx.rows()
            .into_iter()
            .map(|(id, t, c)| [id.to_string(), t.to_string(), c.to_string()]),
    )
}

/// `anchor_id, candidate_id, rel` with `rel` in {0, 1}.
pub fn read_labels(path: &Path) -> Result<RelevanceLabels> {
    let mut labels = RelevanceLabels::new();
    for (line, rec) in records(path, 3)? {
        let anchor = item_id(path, line, &rec[0])?;
        let candidate = item_id(path, line, &rec[1])?;
        let rel: u8 = field(path, line, &rec, 2, "rel")?;
        labels
            .insert(anchor, candidate, rel)
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
    }
    Ok(labels)
}

pub fn write_labels(path: &Path, labels: &RelevanceLabels) -> Result<()> {
    write_rows(
        path,
        &["anchor_id", "candidate_id", "rel"],
        labels
            .rows()
            .map(|(a, c, r)| [a.to_string(), c.to_string(), r.to_string()]),
    )
}

/// `anchor_id, candidate_id, rank, score` with 1-based ranks.
pub fn write_rankings(path: &Path, rankings: &[AnchorRanking]) -> Result<()> {
    write_rows(
        path,
        &["anchor_id", "candidate_id", "rank", "score"],
        rankings.iter().flat_map(|r| {
            r.ranked.iter().enumerate().map(|(i, (c, s))| {
                [r.anchor.to_string(), c.to_string(), (i + 1).to_string(), s.to_string()]
            })
        }),
    )
}

/// Reads rankings grouped by anchor (in order of first appearance), sorted
/// by rank. Pools are left empty.
pub fn read_rankings(path: &Path) -> Result<Vec<AnchorRanking>> {
    let mut order = Vec::new();
    let mut groups: HashMap<ItemId, BTreeMap<usize, (ItemId, f64)>> = HashMap::new();
    for (line, rec) in records(path, 4)? {
        let anchor = item_id(path, line, &rec[0])?;
        let candidate = item_id(path, line, &rec[1])?;
        let rank: usize = field(path, line, &rec, 2, "rank")?;
        let score: f64 = field(path, line, &rec, 3, "score")?;
        let group = groups.entry(anchor.clone()).or_insert_with(|| {
            order.push(anchor.clone());
            BTreeMap::new()
        });
        if group.insert(rank, (candidate, score)).is_some() {
            return Err(Error::parse(path, line, format!("duplicate rank {rank} for anchor `{anchor}`")));
        }
    }
    Ok(order
        .into_iter()
        .map(|anchor| {
            let ranked = groups.remove(&anchor).expect("grouped above").into_values().collect();
            AnchorRanking {
                anchor,
                pool: Vec::new(),
                ranked,
            }
        })
        .collect())
}

pub fn write_sweep_table(path: &Path, runs: &[SweepRun]) -> Result<()> {
    write_rows(
        path,
        &["lambda", "ndcg_at_k", "egmv_at_k"],
        runs.iter().map(|r| {
            [
                r.lambda.to_string(),
                r.metrics.ndcg.to_string(),
                r.metrics.egmv.to_string(),
            ]
        }),
    )
}

pub fn format_sweep_table(runs: &[SweepRun], k: usize) -> String {
    let mut out = format!("{:>8}  {:>10}  {:>10}\n", "lambda", format!("NDCG@{k}"), format!("EGMV@{k}"));
    for r in runs {
        out.push_str(&format!(
            "{:>8}  {:>10.4}  {:>10.4}\n",
            r.lambda.to_string(),
            r.metrics.ndcg,
            r.metrics.egmv
        ));
    }
    out
}

/// `epoch, loss, wall_ms`, one line per epoch.
pub fn write_run_log(path: &Path, history: &[f64], epoch_ms: &[u128]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "epoch,loss,wall_ms").map_err(io)?;
    for (i, (loss, ms)) in history.iter().zip(epoch_ms).enumerate() {
        writeln!(w, "{},{loss},{ms}", i + 1).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn embedding_header_is_validated() {
        let m = Matrix::from_rows(&[vec![1.0, -2.5], vec![0.25, 8.0]]).unwrap();
        let bytes = encode_embeddings(&m);
        assert_eq!(&bytes[..8], b"GMVOEMB1");
        assert_eq!(bytes.len(), 24 + 16);
        assert_eq!(decode_embeddings(&bytes).unwrap(), m);
        assert!(decode_embeddings(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_embeddings(&bad).is_err());
    }

    #[test]
    fn catalog_reader_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("catalog.csv");
        fs::write(&p, "item_id,raw_price\na, 1.5\nb,\nc,-3\n").unwrap();
        let err = read_catalog(&p).unwrap_err().to_string();
        assert!(err.contains(":4:"), "{err}");
        fs::write(&p, "item_id,raw_price\na, 1.5\nb,\n").unwrap();
        let rows = read_catalog(&p).unwrap();
        assert_eq!(rows[0].1, Some(1.5));
        assert_eq!(rows[1].1, None);
    }

    proptest! {
        #[test]
        fn embeddings_round_trip(vals in proptest::collection::vec(-1e6f32..1e6, 0..40), cols in 1usize..5) {
            let rows = vals.len() / cols;
            let data: Vec<f64> = vals[..rows * cols].iter().map(|&x| f64::from(x)).collect();
            let m = Matrix::from_vec(rows, cols, data).unwrap();
            prop_assert_eq!(decode_embeddings(&encode_embeddings(&m)).unwrap(), m);
        }
    }
}
