//! Text checkpoint format.
//!
//! ```text
//! pathconcept-checkpoint 1
//! header {"...": ...}
//! param <name> <rows> <cols>
//! <rows*cols values, row-major, space separated>
//! ...
//! end
//! ```
//!
//! Values are written in shortest round-trip form, so a load reproduces the
//! saved parameters bit for bit.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

use super::matrix::DenseMatrix;
use super::param::ParamTensor;

pub const MAGIC: &str = "pathconcept-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub params: Vec<(String, DenseMatrix)>,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    header: &serde_json::Value,
    params: &[(String, &ParamTensor)],
) -> Result<()> {
    writeln!(w, "{MAGIC} {VERSION}")?;
    writeln!(w, "header {}", serde_json::to_string(header)?)?;
    for (name, p) in params {
        if name.contains(char::is_whitespace) {
            return Err(Error::Format(format!("parameter name {name:?} contains whitespace")));
        }
        writeln!(w, "param {name} {} {}", p.value.rows(), p.value.cols())?;
        let mut first = true;
        for v in p.value.values() {
            if !first {
                w.write_all(b" ")?;
            }
            first = false;
            write!(w, "{v:?}")?;
        }
        writeln!(w)?;
    }
    writeln!(w, "end")?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Checkpoint> {
    let mut lines = r.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Format(format!("unexpected end of file, expected {what}")))
    };
    let magic = next("magic line")?;
    let version = magic
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| Error::Format("not a checkpoint file".into()))?;
    if version != VERSION.to_string() {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_line = next("header")?;
    let header = serde_json::from_str(
        header_line
            .strip_prefix("header ")
            .ok_or_else(|| Error::Format("missing header line".into()))?,
    )?;
    let mut params = Vec::new();
    loop {
        let line = next("param or end")?;
        if line == "end" {
            break;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        let [tag, name, rows, cols] = fields[..] else {
            return Err(Error::Format(format!("bad param line {line:?}")));
        };
        if tag != "param" {
            return Err(Error::Format(format!("bad param line {line:?}")));
        }
        let parse_dim = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("{name}: {e}")));
        let (rows, cols) = (parse_dim(rows)?, parse_dim(cols)?);
        let data = next("values")?;
        let values = if data.is_empty() {
            Vec::new()
        } else {
            data.split(' ')
                .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("{name}: {e}"))))
                .collect::<Result<Vec<_>>>()?
        };
        params.push((name.to_string(), DenseMatrix::from_vec(rows, cols, values)?));
    }
    Ok(Checkpoint { header, params })
}

/// Copies checkpoint values into `targets`, checking names and shapes.
pub fn restore_params(ckpt: &Checkpoint, targets: Vec<(String, &mut ParamTensor)>) -> Result<()> {
    if ckpt.params.len() != targets.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model expects {}",
            ckpt.params.len(),
            targets.len()
        )));
    }
    for ((name, value), (want, p)) in ckpt.params.iter().zip(targets) {
        if *name != want || value.shape() != p.value.shape() {
            return Err(Error::Format(format!(
                "parameter {name} {:?} does not match model parameter {want} {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value.clone();
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let a = ParamTensor::new(DenseMatrix::from_rows(&[vec![0.1, -1e-300, 1.0 / 3.0]]).unwrap());
        let b = ParamTensor::new(DenseMatrix::zeros(0, 4));
        let mut buf = Vec::new();
        let header = serde_json::json!({"kind": "test"});
        write_checkpoint(&mut buf, &header, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let ckpt = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(ckpt.header, header);
        assert_eq!(ckpt.params[0].1, a.value);
        assert_eq!(ckpt.params[1].1.shape(), (0, 4));
    }

    #[test]
    fn rejects_wrong_version_and_shape() {
        assert!(read_checkpoint(&b"pathconcept-checkpoint 9\n"[..]).is_err());
        let a = ParamTensor::zeros(2, 2);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &serde_json::Value::Null, &[("a".into(), &a)]).unwrap();
        let ckpt = read_checkpoint(&buf[..]).unwrap();
        let mut other = ParamTensor::zeros(2, 3);
        assert!(restore_params(&ckpt, vec![("a".into(), &mut other)]).is_err());
    }
}
