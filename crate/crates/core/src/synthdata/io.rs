//! JSON-lines dataset files.
//!
//! Line 1 is a header, then one line per candidate item, then one line per
//! transaction. Floats are written in their shortest round-trip form.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::CandidateDb;
use crate::synthdata::{Split, SyntheticDataset, Transaction, Turn};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    #[serde(rename = "D")]
    dim: usize,
    #[serde(rename = "N_max")]
    max_turns: usize,
    db_size: usize,
    blocks: usize,
    split: Split,
    transactions: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Item {
    id: u32,
    feature: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnRecord {
    qry: Vec<f32>,
    target_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    block: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TxnRecord {
    original_len: usize,
    turns: Vec<TurnRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference_id: Option<u32>,
}

fn json_line<W: Write>(w: &mut W, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn save_dataset(ds: &SyntheticDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    json_line(
        &mut w,
        &Header {
            version: FORMAT_VERSION,
            dim: ds.dim(),
            max_turns: ds.max_turns,
            db_size: ds.db.len(),
            blocks: ds.blocks,
            split: ds.split,
            transactions: ds.transactions.len(),
        },
    )?;
    for (i, &id) in ds.db.ids().iter().enumerate() {
        json_line(
            &mut w,
            &Item {
                id,
                feature: ds.db.row(i).to_vec(),
            },
        )?;
    }
    for t in &ds.transactions {
        let rec = TxnRecord {
            original_len: t.original_len,
            turns: t
                .turns
                .iter()
                .map(|x| TurnRecord {
                    qry: x.query.clone(),
                    target_id: x.target_id,
                    block: x.block,
                })
                .collect(),
            reference_id: t.reference_id,
        };
        json_line(&mut w, &rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(s))) => Ok((i + 1, s)),
            Some((i, Err(e))) => Err(err(i + 1, e.to_string())),
            None => Err(err(0, format!("unexpected end of file, expected {what}"))),
        }
    };
    let (ln, s) = next("header")?;
    let header: Header = serde_json::from_str(&s).map_err(|e| err(ln, e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(err(ln, format!("unsupported version {}", header.version)));
    }
    if header.blocks == 0 || !header.dim.is_multiple_of(header.blocks) {
        return Err(err(ln, "dimension is not divisible by blocks".into()));
    }
    let mut ids = Vec::with_capacity(header.db_size);
    let mut features = Vec::with_capacity(header.db_size * header.dim);
    for _ in 0..header.db_size {
        let (ln, s) = next("candidate item")?;
        let item: Item = serde_json::from_str(&s).map_err(|e| err(ln, e.to_string()))?;
        if item.feature.len() != header.dim {
            return Err(err(
                ln,
                format!("feature has {} values, expected {}", item.feature.len(), header.dim),
            ));
        }
        ids.push(item.id);
        features.extend(item.feature);
    }
    let db = CandidateDb::new(ids, features, header.dim).map_err(|e| err(1, e.to_string()))?;
    let mut transactions = Vec::with_capacity(header.transactions);
    for _ in 0..header.transactions {
        let (ln, s) = next("transaction")?;
        let rec: TxnRecord = serde_json::from_str(&s).map_err(|e| err(ln, e.to_string()))?;
        if rec.turns.len() != header.max_turns || rec.original_len == 0 || rec.original_len > rec.turns.len() {
            return Err(err(ln, "transaction is not padded to N_max".into()));
        }
        let mut turns = Vec::with_capacity(rec.turns.len());
        for t in rec.turns {
            if t.qry.len() != header.dim {
                return Err(err(ln, "query dimension mismatch".into()));
            }
            if !db.contains(t.target_id) {
                return Err(err(ln, format!("unknown target id {}", t.target_id)));
            }
            if t.block.is_some_and(|b| b >= header.blocks) {
                return Err(err(ln, "block index out of range".into()));
            }
            turns.push(Turn {
                query: t.qry,
                target_id: t.target_id,
                block: t.block,
            });
        }
        transactions.push(Transaction {
            turns,
            original_len: rec.original_len,
            reference_id: rec.reference_id,
        });
    }
    if let Ok((ln, s)) = next("end of file") {
        if !s.trim().is_empty() {
            return Err(err(ln, "trailing data after the last transaction".into()));
        }
    }
    Ok(SyntheticDataset {
        transactions,
        db,
        split: header.split,
        max_turns: header.max_turns,
        blocks: header.blocks,
    })
}
