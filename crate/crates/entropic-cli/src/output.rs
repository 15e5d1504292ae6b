//! CSV output helpers.
//!
//! All numeric cells go through the standard shortest round-trip float
//! formatting, so files are byte-identical across runs and thread counts.

use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::fail::{Fail, Result};

/// Opens `name` under `dir` for buffered writing, creating the directory.
pub fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Fail::config(format!("cannot create {}: {}", dir.display(), e)))?;
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| Fail::config(format!("cannot write {}: {}", path.display(), e)))
}

pub fn io(e: std::io::Error) -> Fail {
    Fail::config(format!("output write failed: {e}"))
}

/// Ordered label/value rows, written as a two-column CSV and echoed to
/// stdout in the same format.
#[derive(Default)]
pub struct Rows {
    rows: Vec<(String, String)>,
}

impl Rows {
    pub fn add(&mut self, label: &str, value: impl Display) {
        self.rows.push((label.to_string(), value.to_string()));
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        let mut w = create(dir, name)?;
        writeln!(w, "label,value").map_err(io)?;
        for (label, value) in &self.rows {
            writeln!(w, "{label},{value}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn print(&self) {
        println!("label,value");
        for (label, value) in &self.rows {
            println!("{label},{value}");
        }
    }
}
