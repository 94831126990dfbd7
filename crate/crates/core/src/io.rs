//! CSV and JSON Lines writers for result rows.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

fn io_err(e: impl std::fmt::Display) -> Error {
    Error::InsufficientData(format!("write failed: {e}"))
}

pub fn write_csv<T: Serialize>(rows: &[T], w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(io_err)?;
    }
    wr.flush().map_err(io_err)
}

pub fn write_jsonl<T: Serialize>(rows: &[T], mut w: impl Write) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    Ok(())
}
